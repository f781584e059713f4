#pragma once

#include <map>
#include <set>
#include <sstream>
#include <utility>

#include "ssdlab/common.hpp"
#include "ssdlab/nn.hpp"

namespace ssdlab {

/// Per-(layer, timestep) key/value features captured from a style-reference
/// denoising pass. Entries are write-once; clear() drops everything (used when
/// a shared-noise style latent changes between iterations).
class AttentionCache {
 public:
  AttentionCache() = default;
  explicit AttentionCache(std::set<int> swap_layers) : swap_layers_(std::move(swap_layers)) {}

  const std::set<int>& swap_layers() const { return swap_layers_; }

  bool has(int layer, int t) const { return entries_.count({layer, t}) > 0; }

  const nn::KvFeatures& entry(int layer, int t) const {
    auto it = entries_.find({layer, t});
    if (it == entries_.end()) {
      std::ostringstream os;
      os << "attention cache: missing entry for layer " << layer << " at t=" << t;
      throw ContractError(os.str());
    }
    return it->second;
  }

  void insert(int layer, int t, nn::KvFeatures kv) {
    auto [it, inserted] = entries_.emplace(std::make_pair(layer, t), std::move(kv));
    (void)it;
    check(inserted, "attention cache: entry already captured (entries are immutable)");
  }

  bool complete_for(int t) const {
    for (int layer : swap_layers_)
      if (!has(layer, t)) return false;
    return true;
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& [key, kv] : entries_) {
      h = fnv1a(&key, sizeof(key), h);
      h = hash_mat(kv.k, h);
      h = hash_mat(kv.v, h);
    }
    return h;
  }

 private:
  std::set<int> swap_layers_;
  std::map<std::pair<int, int>, nn::KvFeatures> entries_;
};

}  // namespace ssdlab
