#include "ghostv2/weights.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace ghostv2 {

static_assert(std::endian::native == std::endian::little, "weight files assume a little-endian host");

std::string to_string(WeightErrorKind k) {
  switch (k) {
    case WeightErrorKind::io: return "io";
    case WeightErrorKind::magic: return "magic";
    case WeightErrorKind::version: return "version";
    case WeightErrorKind::truncated: return "truncated";
    case WeightErrorKind::checksum: return "checksum";
    case WeightErrorKind::format: return "format";
    case WeightErrorKind::name_mismatch: return "name mismatch";
    case WeightErrorKind::shape_mismatch: return "shape mismatch";
    case WeightErrorKind::dtype_mismatch: return "dtype mismatch";
  }
  return "?";
}

namespace {

constexpr char kMagic[4] = {'G', 'N', 'V', '2'};

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded chunks.
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  std::uint8_t b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.insert(out.end(), b, b + sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> d) : d_(d) {}

  template <typename U>
  U get(const char* what) {
    U v;
    std::memcpy(&v, take(sizeof(U), what), sizeof(U));
    return v;
  }
  const std::uint8_t* take(std::size_t n, const char* what) {
    if (d_.size() - pos_ < n) {
      throw WeightFileError(WeightErrorKind::truncated, std::string("file ends inside ") + what + " at byte " +
                                                            std::to_string(pos_));
    }
    const std::uint8_t* p = d_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return d_.size() - pos_; }

 private:
  std::span<const std::uint8_t> d_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

}  // namespace

std::vector<std::uint8_t> encode_weights(const std::vector<WeightEntry>& entries) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kWeightFormatVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > 0xFFFF) throw WeightFileError(WeightErrorKind::format, "name too long: " + e.name);
    if (e.bytes.size() != static_cast<std::size_t>(e.shape.numel()) * dtype_size(e.dtype)) {
      throw WeightFileError(WeightErrorKind::format, "payload size of '" + e.name + "' does not match its shape");
    }
    put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    std::size_t first = 0;
    while (first < 3 && e.shape[first] == 1) ++first;
    out.push_back(static_cast<std::uint8_t>(4 - first));
    for (std::size_t i = first; i < 4; ++i) put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape[i]));
    out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  }
  put<std::uint32_t>(out, crc_of(out.data() + 4, out.size() - 4));
  return out;
}

std::vector<WeightEntry> decode_weights(std::span<const std::uint8_t> data) {
  Reader r(data);
  const std::uint8_t* magic = r.take(4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw WeightFileError(WeightErrorKind::magic, "not a GNV2 weight file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kWeightFormatVersion) {
    throw WeightFileError(WeightErrorKind::version, "unsupported format version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<WeightEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    WeightEntry e;
    const auto len = r.get<std::uint16_t>("name length");
    const std::uint8_t* name = r.take(len, "tensor name");
    e.name.assign(reinterpret_cast<const char*>(name), len);
    const auto dtype = r.get<std::uint8_t>("dtype");
    if (dtype > 1) throw WeightFileError(WeightErrorKind::format, "unknown dtype " + std::to_string(dtype) + " for '" + e.name + "'");
    e.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank < 1 || rank > 4) throw WeightFileError(WeightErrorKind::format, "rank " + std::to_string(rank) + " for '" + e.name + "'");
    std::int64_t dims[4] = {1, 1, 1, 1};
    for (int k = 4 - rank; k < 4; ++k) {
      dims[k] = r.get<std::uint32_t>("dimensions");
      if (dims[k] < 1) throw WeightFileError(WeightErrorKind::format, "zero dimension in '" + e.name + "'");
    }
    e.shape = Shape(dims[0], dims[1], dims[2], dims[3]);
    const std::size_t n = static_cast<std::size_t>(e.shape.numel()) * dtype_size(e.dtype);
    const std::uint8_t* payload = r.take(n, "tensor values");
    e.bytes.assign(payload, payload + n);
    entries.push_back(std::move(e));
  }
  const std::size_t body_end = r.pos();
  const auto stored = r.get<std::uint32_t>("checksum");
  if (r.remaining() != 0) {
    throw WeightFileError(WeightErrorKind::format, std::to_string(r.remaining()) + " trailing bytes after checksum");
  }
  const std::uint32_t actual = crc_of(data.data() + 4, body_end - 4);
  if (stored != actual) throw WeightFileError(WeightErrorKind::checksum, "CRC32 mismatch");
  return entries;
}

template <typename T>
std::vector<WeightEntry> collect_weights(const Model<T>& model) {
  std::vector<WeightEntry> out;
  model.for_each_param([&](const std::string& name, const Tensor<T>& t, bool) {
    WeightEntry e{name, dtype_of<T>(), t.shape(), {}};
    auto d = t.data();
    e.bytes.resize(d.size() * sizeof(T));
    std::memcpy(e.bytes.data(), d.data(), e.bytes.size());
    out.push_back(std::move(e));
  });
  return out;
}

template <typename T>
void save_weights(const Model<T>& model, const std::string& path) {
  const auto bytes = encode_weights(collect_weights(model));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightFileError(WeightErrorKind::io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw WeightFileError(WeightErrorKind::io, "write to '" + path + "' failed");
}

template <typename T>
void assign_weights(Model<T>& model, const std::vector<WeightEntry>& entries) {
  std::unordered_map<std::string, const WeightEntry*> by_name;
  for (const auto& e : entries) by_name.emplace(e.name, &e);
  // Validate everything first so a failure leaves the model untouched.
  std::vector<std::pair<Tensor<T>*, const WeightEntry*>> plan;
  model.visit([&](const std::string& name, Tensor<T>& t, bool) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw WeightFileError(WeightErrorKind::name_mismatch, "missing tensor '" + name + "'");
    const WeightEntry& e = *it->second;
    if (e.dtype != dtype_of<T>()) {
      throw WeightFileError(WeightErrorKind::dtype_mismatch, "tensor '" + name + "' is " +
                                                                 std::string(dtype_name(e.dtype)) + ", model is " +
                                                                 std::string(dtype_name(dtype_of<T>())));
    }
    if (!(e.shape == t.shape())) {
      throw WeightFileError(WeightErrorKind::shape_mismatch,
                            "tensor '" + name + "' has shape " + e.shape.str() + ", model expects " + t.shape().str());
    }
    plan.emplace_back(&t, &e);
    by_name.erase(it);
  });
  if (!by_name.empty()) {
    throw WeightFileError(WeightErrorKind::name_mismatch, "unexpected tensor '" + by_name.begin()->first + "'");
  }
  for (auto& [t, e] : plan) {
    std::vector<T> v(static_cast<std::size_t>(e->shape.numel()));
    std::memcpy(v.data(), e->bytes.data(), e->bytes.size());
    *t = Tensor<T>(e->shape, std::move(v));
  }
}

template <typename T>
void load_weights(Model<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightFileError(WeightErrorKind::io, "cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  assign_weights(model, decode_weights(bytes));
}

template std::vector<WeightEntry> collect_weights(const Model<float>&);
template std::vector<WeightEntry> collect_weights(const Model<double>&);
template void save_weights(const Model<float>&, const std::string&);
template void save_weights(const Model<double>&, const std::string&);
template void load_weights(Model<float>&, const std::string&);
template void load_weights(Model<double>&, const std::string&);
template void assign_weights(Model<float>&, const std::vector<WeightEntry>&);
template void assign_weights(Model<double>&, const std::vector<WeightEntry>&);

}  // namespace ghostv2
