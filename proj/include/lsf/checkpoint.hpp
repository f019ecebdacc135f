#ifndef LSF_CHECKPOINT_HPP
#define LSF_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "lsf/tensor.hpp"

namespace lsf {

// Checkpoint file layout (all integers unsigned 64-bit little-endian unless
// noted, no alignment padding):
//   magic "LSF1"
//   u64 tensor count
//   per tensor:
//     u64 name length, UTF-8 name bytes
//     u64 rank, u64 extent per axis
//     u8 dtype tag (0 = FP32, 1 = FP64)
//     raw little-endian values
inline constexpr char kCheckpointMagic[4] = {'L', 'S', 'F', '1'};

template <typename S>
constexpr std::uint8_t dtype_tag() {
  static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>,
                "checkpoint supports float and double tensors");
  return std::is_same_v<S, float> ? 0 : 1;
}

template <typename S>
using NamedTensorList = std::vector<std::pair<std::string, Tensor<S>>>;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size()) {
      throw IoError(cat("checkpoint truncated while reading ", what, " (need ", n,
                        " bytes at offset ", pos, ", file has ", buf.size(), ")"));
    }
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i]))
           << (8 * i);
    pos += 8;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <typename S>
void save_checkpoint(const std::string& path, const NamedTensorList<S>& tensors) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u64(out, tensors.size());
  for (const auto& [name, t] : tensors) {
    detail::put_u64(out, name.size());
    out.append(name);
    detail::put_u64(out, t.rank());
    for (std::size_t a = 0; a < t.rank(); ++a) detail::put_u64(out, t.extent(a));
    out.push_back(static_cast<char>(dtype_tag<S>()));
    const auto vals = t.values();
    const std::size_t bytes = vals.size() * sizeof(S);
    const std::size_t offset = out.size();
    out.resize(offset + bytes);
    std::memcpy(out.data() + offset, vals.data(), bytes);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(cat("cannot open checkpoint for writing: ", path));
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError(cat("failed writing checkpoint: ", path));
}

// Loads a whole checkpoint; every tensor must carry the dtype tag matching S
// so FP32 and FP64 payloads never silently mix in one graph.
template <typename S>
NamedTensorList<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open checkpoint: ", path));
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw IoError(cat("bad checkpoint magic in ", path));
  }
  const std::uint64_t count = r.u64("tensor count");
  NamedTensorList<S> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint64_t name_len = r.u64("name length");
    std::string name = r.bytes(name_len, "name");
    const std::uint64_t rank = r.u64("rank");
    Shape shape;
    shape.reserve(rank);
    std::size_t numel = 1;
    for (std::uint64_t a = 0; a < rank; ++a) {
      const std::uint64_t e = r.u64("extent");
      shape.push_back(e);
      numel *= e;
    }
    const std::uint8_t tag = r.u8("dtype tag");
    if (tag != dtype_tag<S>()) {
      throw IoError(cat("checkpoint tensor '", name, "' has dtype tag ",
                        static_cast<int>(tag), ", expected ",
                        static_cast<int>(dtype_tag<S>())));
    }
    std::vector<S> vals(numel);
    const std::string raw = r.bytes(numel * sizeof(S), "values");
    std::memcpy(vals.data(), raw.data(), raw.size());
    out.emplace_back(std::move(name), Tensor<S>(std::move(shape), std::move(vals)));
  }
  if (r.pos != buf.size()) {
    throw IoError(cat("checkpoint has ", buf.size() - r.pos, " trailing bytes: ", path));
  }
  return out;
}

// Dtype tag of the first tensor record, for dispatch before a typed load.
inline std::uint8_t peek_checkpoint_dtype(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError(cat("cannot open checkpoint: ", path));
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  detail::ByteReader r{buf};
  if (r.bytes(4, "magic") != std::string(kCheckpointMagic, 4)) {
    throw IoError(cat("bad checkpoint magic in ", path));
  }
  const std::uint64_t count = r.u64("tensor count");
  if (count == 0) throw IoError(cat("empty checkpoint: ", path));
  const std::uint64_t name_len = r.u64("name length");
  r.bytes(name_len, "name");
  const std::uint64_t rank = r.u64("rank");
  for (std::uint64_t a = 0; a < rank; ++a) r.u64("extent");
  return r.u8("dtype tag");
}

// Name-indexed view over a loaded checkpoint that records which names were
// consumed, so callers can report both missing and unexpected tensors.
template <typename S>
class TensorBundle {
 public:
  explicit TensorBundle(NamedTensorList<S> items) : items_(std::move(items)) {
    for (auto& [name, t] : items_) {
      if (!index_.emplace(name, &t).second) {
        throw IoError(cat("duplicate tensor name in checkpoint: ", name));
      }
    }
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor<S>* find(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) {
      missing_.push_back(name);
      return nullptr;
    }
    used_.insert(name);
    return it->second;
  }

  Tensor<S> take(const std::string& name, const Shape& expected_shape) {
    const Tensor<S>* t = find(name);
    if (t == nullptr) return Tensor<S>(expected_shape);
    if (t->shape() != expected_shape) {
      throw IoError(cat("checkpoint tensor '", name, "' has shape ",
                        shape_str(t->shape()), ", expected ",
                        shape_str(expected_shape)));
    }
    return t->clone();
  }

  const std::vector<std::string>& missing() const { return missing_; }

  void finish(const std::string& context) const {
    if (!missing_.empty()) {
      std::string msg = cat("checkpoint missing ", missing_.size(),
                            " tensors for ", context, ":");
      for (const auto& name : missing_) msg += cat(" ", name);
      throw IoError(msg);
    }
  }

 private:
  NamedTensorList<S> items_;
  std::map<std::string, Tensor<S>*> index_;
  std::set<std::string> used_;
  std::vector<std::string> missing_;
};

}  // namespace lsf

#endif  // LSF_CHECKPOINT_HPP
