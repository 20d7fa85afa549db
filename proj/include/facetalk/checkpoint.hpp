#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "facetalk/array.hpp"
#include "facetalk/param_store.hpp"

namespace facetalk {

// Binary little-endian container:
//   magic "NVSQ1" (5 bytes), version u32, block count u32, then per block
//   name length u32, UTF-8 name, rank u32, dims u32 each, float64 values.
inline constexpr std::string_view kCheckpointMagic = "NVSQ1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Array value;
};

std::string encode_checkpoint(const std::vector<NamedArray>& blocks);
std::vector<NamedArray> decode_checkpoint(std::string_view bytes);

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<NamedArray>& blocks);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

// Parameter values of every block, in store order.
std::vector<NamedArray> blocks_of(const ParamStore& store);

// Copies values for every block of `store` from `blocks`. Throws DataError if
// a block is missing or its shape differs.
void load_blocks(ParamStore& store, const std::vector<NamedArray>& blocks);

const NamedArray* find_block(const std::vector<NamedArray>& blocks,
                             std::string_view name);

}  // namespace facetalk
