#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <utility>
#include <vector>

#include "paco/errors.hpp"

namespace paco {

// Floor applied to every stored Poisson rate so log(rate) stays finite.
inline constexpr double kRateFloor = 1e-12;

// One Poisson rate vector over the vocabulary. Words that were never
// credited to the component share a single default rate, so memory stays
// proportional to the number of credited words rather than |W|.
class SparseRateVector {
 public:
  SparseRateVector() = default;
  explicit SparseRateVector(double default_rate)
      : default_rate_(std::max(default_rate, kRateFloor)) {}

  double default_rate() const { return default_rate_; }
  void set_default_rate(double r) { default_rate_ = std::max(r, kRateFloor); }

  double at(uint32_t word) const {
    auto it = entries_.find(word);
    return it == entries_.end() ? default_rate_ : it->second;
  }

  void set(uint32_t word, double rate) {
    entries_[word] = std::max(rate, kRateFloor);
  }

  void clear_entries() { entries_.clear(); }

  size_t explicit_count() const { return entries_.size(); }

  const std::unordered_map<uint32_t, double> &entries() const { return entries_; }

  // Sum over all |vocab_size| words.
  double total(size_t vocab_size) const {
    PACO_DCHECK(entries_.size() <= vocab_size, "rate vector wider than vocabulary");
    double s = default_rate_ * static_cast<double>(vocab_size - entries_.size());
    for (const auto &kv : entries_) s += kv.second;
    return s;
  }

  // Entries sorted by word index; used wherever a deterministic order is
  // required (serialization, reporting, drawing).
  std::vector<std::pair<uint32_t, double>> sorted_entries() const {
    std::vector<std::pair<uint32_t, double>> v(entries_.begin(), entries_.end());
    std::sort(v.begin(), v.end());
    return v;
  }

  bool operator==(const SparseRateVector &o) const {
    return default_rate_ == o.default_rate_ && entries_ == o.entries_;
  }

 private:
  double default_rate_ = 1.0;
  std::unordered_map<uint32_t, double> entries_;
};

}  // namespace paco
