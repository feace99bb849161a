#pragma once

// Sample and dataset types. Target training data is represented by
// UnlabeledSample, which has no label field, so adaptation code cannot read
// target labels by construction. Labeled reads go through an audited accessor
// so tests can prove which domains' labels were touched.

#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "biadapt/image.hpp"

namespace biadapt {

class LabelAudit {
 public:
  static LabelAudit& instance() {
    static LabelAudit audit;
    return audit;
  }

  void record(const std::string& domain_id) {
    std::lock_guard<std::mutex> lock(mutex_);
    ++counts_[domain_id];
  }

  long count(const std::string& domain_id) const {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = counts_.find(domain_id);
    return it == counts_.end() ? 0 : it->second;
  }

  void reset() {
    std::lock_guard<std::mutex> lock(mutex_);
    counts_.clear();
  }

 private:
  LabelAudit() = default;
  mutable std::mutex mutex_;
  std::map<std::string, long> counts_;
};

class LabeledSample {
 public:
  Image image;
  std::string domain_id;

  LabeledSample() = default;
  LabeledSample(Image img, int label, std::string domain)
      : image(std::move(img)), domain_id(std::move(domain)), label_(label) {
    if (label_ != 0 && label_ != 1)
      throw DomainError("labeled sample: label must be 0 or 1");
  }

  // every read is recorded against the sample's domain
  int label() const {
    LabelAudit::instance().record(domain_id);
    return label_;
  }

 private:
  int label_ = 0;
};

struct UnlabeledSample {
  Image image;
  std::string domain_id;
};

struct DomainDataset {
  std::string domain_id;
  bool labeled = true;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
  std::vector<UnlabeledSample> train_u;
  std::vector<UnlabeledSample> test_u;

  std::size_t n() const {
    return labeled ? train.size() + test.size()
                   : train_u.size() + test_u.size();
  }
};

inline DomainDataset unlabeled_view(const DomainDataset& d) {
  DomainDataset out;
  out.domain_id = d.domain_id;
  out.labeled = false;
  if (d.labeled) {
    out.train_u.reserve(d.train.size());
    for (const auto& s : d.train)
      out.train_u.push_back(UnlabeledSample{s.image, s.domain_id});
    out.test_u.reserve(d.test.size());
    for (const auto& s : d.test)
      out.test_u.push_back(UnlabeledSample{s.image, s.domain_id});
  } else {
    out.train_u = d.train_u;
    out.test_u = d.test_u;
  }
  return out;
}

namespace detail {

inline void check_disjoint(const std::vector<std::uint64_t>& train_hashes,
                           const std::vector<std::uint64_t>& test_hashes,
                           const std::string& domain_id) {
  for (std::uint64_t th : train_hashes)
    for (std::uint64_t eh : test_hashes)
      if (th == eh)
        throw StateError("split_domain: train/test share content in domain " +
                         domain_id);
}

}  // namespace detail

// re-splits the full sample pool; per-class stratified when labeled
inline DomainDataset split_domain(const DomainDataset& d, double train_fraction,
                                  std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw DomainError("split_domain: train_fraction must be in (0,1)");
  DomainDataset out;
  out.domain_id = d.domain_id;
  out.labeled = d.labeled;
  Rng root(seed);
  if (d.labeled) {
    std::vector<LabeledSample> pool = d.train;
    pool.insert(pool.end(), d.test.begin(), d.test.end());
    for (int cls = 0; cls <= 1; ++cls) {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < pool.size(); ++i)
        if (pool[i].label() == cls) idx.push_back(i);
      Rng rng = root.fork("split:" + d.domain_id + ":class" +
                          std::to_string(cls));
      rng.shuffle(idx);
      auto take = static_cast<std::size_t>(
          std::llround(train_fraction * static_cast<double>(idx.size())));
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (i < take)
          out.train.push_back(pool[idx[i]]);
        else
          out.test.push_back(pool[idx[i]]);
      }
    }
    if (out.train.empty() || out.test.empty())
      throw SizeError("split_domain: fraction yields an empty split");
    std::vector<std::uint64_t> th, eh;
    for (const auto& s : out.train) th.push_back(content_hash(s.image));
    for (const auto& s : out.test) eh.push_back(content_hash(s.image));
    detail::check_disjoint(th, eh, d.domain_id);
  } else {
    std::vector<UnlabeledSample> pool = d.train_u;
    pool.insert(pool.end(), d.test_u.begin(), d.test_u.end());
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = root.fork("split:" + d.domain_id);
    rng.shuffle(idx);
    auto take = static_cast<std::size_t>(
        std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (i < take)
        out.train_u.push_back(pool[idx[i]]);
      else
        out.test_u.push_back(pool[idx[i]]);
    }
    if (out.train_u.empty() || out.test_u.empty())
      throw SizeError("split_domain: fraction yields an empty split");
    std::vector<std::uint64_t> th, eh;
    for (const auto& s : out.train_u) th.push_back(content_hash(s.image));
    for (const auto& s : out.test_u) eh.push_back(content_hash(s.image));
    detail::check_disjoint(th, eh, d.domain_id);
  }
  return out;
}

enum class ScenarioKind { O2O, O2M };

struct Scenario {
  DomainDataset source;                         // labeled
  std::vector<DomainDataset> targets;           // unlabeled views
  std::vector<UnlabeledSample> target_train_pool;
  ScenarioKind kind = ScenarioKind::O2O;
};

inline Scenario make_scenario(const DomainDataset& source,
                              const std::vector<DomainDataset>& targets) {
  if (!source.labeled)
    throw ConfigError("make_scenario: source must be labeled");
  if (targets.empty())
    throw ConfigError("make_scenario: at least one target required");
  Scenario sc;
  sc.source = source;
  sc.kind = targets.size() == 1 ? ScenarioKind::O2O : ScenarioKind::O2M;
  for (const auto& t : targets) {
    DomainDataset view = unlabeled_view(t);
    if (view.train_u.empty())
      throw ConfigError("make_scenario: target " + t.domain_id +
                        " has no train split");
    sc.target_train_pool.insert(sc.target_train_pool.end(),
                                view.train_u.begin(), view.train_u.end());
    sc.targets.push_back(std::move(view));
  }
  return sc;
}

}  // namespace biadapt
