#include "facetalk/param_store.hpp"

#include <cstring>
#include <memory>

#include "facetalk/error.hpp"

namespace facetalk {

ParamStore::ParamStore(const ParamStore& other) { *this = other; }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  entries_.clear();
  index_ = other.index_;
  entries_.reserve(other.entries_.size());
  for (const auto& e : other.entries_) {
    entries_.push_back(std::make_unique<ParamEntry>(*e));
  }
  return *this;
}

ParamEntry& ParamStore::add(const std::string& name, Array value) {
  if (index_.contains(name)) {
    throw ConfigError("duplicate parameter block '" + name + "'");
  }
  require_finite(value, "parameter " + name);
  auto entry = std::make_unique<ParamEntry>();
  entry->name = name;
  entry->grad = Array(value.shape());
  entry->first_moment = Array(value.shape());
  entry->second_moment = Array(value.shape());
  entry->value = std::move(value);
  index_.emplace(name, entries_.size());
  entries_.push_back(std::move(entry));
  return *entries_.back();
}

ParamEntry& ParamStore::add_uniform(const std::string& name, Shape shape,
                                    double scale, Rng& rng) {
  Array value(std::move(shape));
  for (std::size_t i = 0; i < value.size(); ++i) {
    value[i] = rng.uniform(-scale, scale);
  }
  return add(name, std::move(value));
}

bool ParamStore::contains(const std::string& name) const {
  return index_.contains(name);
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) {
    throw ConfigError("unknown parameter block '" + name + "'");
  }
  return it->second;
}

ParamEntry& ParamStore::at(const std::string& name) {
  return *entries_[index_of(name)];
}

const ParamEntry& ParamStore::at(const std::string& name) const {
  return *entries_[index_of(name)];
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e->value.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e->name);
  return out;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) e->grad.fill(0.0);
}

void ParamStore::set_frozen(const std::string& name, bool frozen) {
  at(name).frozen = frozen;
}

std::uint64_t ParamStore::checksum(const std::string& name) const {
  const Array& v = at(name).value;
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < v.size(); ++i) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v.data()[i], sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace facetalk
