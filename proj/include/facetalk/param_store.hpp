#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "facetalk/array.hpp"
#include "facetalk/rng.hpp"

namespace facetalk {

// One named parameter block with its gradient accumulator and Adam state.
struct ParamEntry {
  std::string name;
  Array value;
  Array grad;
  Array first_moment;
  Array second_moment;
  std::uint64_t step = 0;
  // Frozen blocks are skipped by the optimizer.
  bool frozen = false;
};

// Ordered collection of parameter blocks. Entry addresses are stable for the
// lifetime of the store: blocks are never removed.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  // Adds a block initialized to `value`. Throws on duplicate names.
  ParamEntry& add(const std::string& name, Array value);
  // Adds a block drawn uniformly from [-scale, scale].
  ParamEntry& add_uniform(const std::string& name, Shape shape, double scale,
                          Rng& rng);

  bool contains(const std::string& name) const;
  ParamEntry& at(const std::string& name);
  const ParamEntry& at(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  ParamEntry& entry(std::size_t i) { return *entries_[i]; }
  const ParamEntry& entry(std::size_t i) const { return *entries_[i]; }
  std::vector<std::string> names() const;

  void zero_grads();
  void set_frozen(const std::string& name, bool frozen);

  // Deterministic FNV hash over a block's values; used to verify freezing.
  std::uint64_t checksum(const std::string& name) const;

 private:
  std::vector<std::unique_ptr<ParamEntry>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace facetalk
