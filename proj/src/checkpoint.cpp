#include "facetalk/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "facetalk/error.hpp"

namespace facetalk {
namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 4;
    return v;
  }

  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i]))
           << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError("checkpoint truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<NamedArray>& blocks) {
  std::string out(kCheckpointMagic);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(blocks.size()));
  for (const NamedArray& b : blocks) {
    put_u32(out, static_cast<std::uint32_t>(b.name.size()));
    out += b.name;
    put_u32(out, static_cast<std::uint32_t>(b.value.rank()));
    for (std::size_t d : b.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : b.value.values()) put_f64(out, v);
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(std::string_view bytes) {
  Reader in(bytes);
  if (bytes.size() < kCheckpointMagic.size() ||
      in.take(kCheckpointMagic.size()) != kCheckpointMagic) {
    throw DataError("checkpoint: bad magic (expected NVSQ1)");
  }
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version " +
                    std::to_string(version));
  }
  const std::uint32_t count = in.u32();
  std::vector<NamedArray> blocks;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray block;
    block.name = std::string(in.take(in.u32()));
    const std::uint32_t rank = in.u32();
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    std::vector<double> values(shape_size(shape));
    for (double& v : values) v = in.f64();
    block.value = Array(std::move(shape), std::move(values));
    blocks.push_back(std::move(block));
  }
  if (!in.done()) throw DataError("checkpoint: trailing bytes after last block");
  return blocks;
}

void write_checkpoint(const std::filesystem::path& path,
                      const std::vector<NamedArray>& blocks) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = encode_checkpoint(blocks);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing checkpoint: " + path.string());
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

std::vector<NamedArray> blocks_of(const ParamStore& store) {
  std::vector<NamedArray> out;
  for (std::size_t i = 0; i < store.size(); ++i) {
    out.push_back({store.entry(i).name, store.entry(i).value});
  }
  return out;
}

const NamedArray* find_block(const std::vector<NamedArray>& blocks,
                             std::string_view name) {
  for (const NamedArray& b : blocks) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

void load_blocks(ParamStore& store, const std::vector<NamedArray>& blocks) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    ParamEntry& e = store.entry(i);
    const NamedArray* b = find_block(blocks, e.name);
    if (!b) throw DataError("checkpoint is missing block '" + e.name + "'");
    if (b->value.shape() != e.value.shape()) {
      throw DataError("checkpoint block '" + e.name + "' has shape " +
                      shape_string(b->value.shape()) + ", expected " +
                      shape_string(e.value.shape()));
    }
    e.value = b->value;
  }
}

}  // namespace facetalk
