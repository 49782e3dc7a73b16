#include "epi_unwarp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "epi_unwarp/errors.hpp"

namespace epi::nn {

namespace {

constexpr char kMagic[4] = {'E', 'U', 'W', '1'};

class ByteWriter {
 public:
  template <class T>
  void put(T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    const auto bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<std::uint8_t> take() && { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return std::bit_cast<T>(bits);
  }
  void get_bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) raise(ErrorKind::TruncatedData, "checkpoint ends unexpectedly");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void put_tensor(ByteWriter& w, const std::string& name, const std::vector<int>& shape, bool is_bias,
                const std::vector<double>& values) {
  w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
  w.put_bytes(name.data(), name.size());
  w.put<std::uint8_t>(is_bias ? 1 : 0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
  for (int d : shape) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
  w.put<std::uint64_t>(values.size());
  for (double v : values) w.put<double>(v);
}

ParamTensor get_tensor(ByteReader& r) {
  ParamTensor t;
  t.name.resize(r.get<std::uint16_t>());
  r.get_bytes(t.name.data(), t.name.size());
  t.is_bias = r.get<std::uint8_t>() != 0;
  const auto rank = r.get<std::uint8_t>();
  std::size_t expect = 1;
  for (int i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
    expect *= static_cast<std::size_t>(t.shape.back());
  }
  const auto count = r.get<std::uint64_t>();
  if (count != expect) raise(ErrorKind::ShapeMismatch, "tensor " + t.name + " count disagrees with its shape");
  if (count > r.remaining() / sizeof(double)) raise(ErrorKind::TruncatedData, "checkpoint ends inside tensor " + t.name);
  t.values.resize(count);
  for (auto& v : t.values) v = r.get<double>();
  return t;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint16_t>(kCheckpointVersion);

  const UNetConfig& c = ckpt.config;
  w.put<std::int32_t>(c.in_channels);
  w.put<std::int32_t>(c.base_channels);
  w.put<std::int32_t>(c.levels);
  w.put<std::int32_t>(c.max_channels);
  w.put<std::int32_t>(c.out_channels);
  w.put<std::int32_t>(c.kernel);
  w.put<double>(c.dropout_rate);
  w.put<std::uint8_t>(ckpt.use_t1 ? 1 : 0);

  const OptimState& s = ckpt.state;
  w.put<std::int64_t>(s.step);
  w.put<double>(s.learning_rate);
  w.put<std::int32_t>(s.plateau_count);
  w.put<double>(s.best_validation);
  w.put<std::int32_t>(s.stagnant_epochs);
  w.put<std::uint8_t>(s.early_stop ? 1 : 0);

  const auto& tensors = ckpt.params.tensors;
  const bool has_moments = s.first_moment.size() == tensors.size() && !tensors.empty();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size() * (has_moments ? 3 : 1)));
  for (const auto& t : tensors) put_tensor(w, t.name, t.shape, t.is_bias, t.values);
  if (has_moments) {
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      put_tensor(w, "adam.m/" + tensors[i].name, tensors[i].shape, tensors[i].is_bias, s.first_moment[i]);
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      put_tensor(w, "adam.v/" + tensors[i].name, tensors[i].shape, tensors[i].is_bias, s.second_moment[i]);
    }
  }
  return std::move(w).take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) raise(ErrorKind::BadMagic, "not a checkpoint (magic mismatch)");
  const auto version = r.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    raise(ErrorKind::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                          std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  UNetConfig& c = ck.config;
  c.in_channels = r.get<std::int32_t>();
  c.base_channels = r.get<std::int32_t>();
  c.levels = r.get<std::int32_t>();
  c.max_channels = r.get<std::int32_t>();
  c.out_channels = r.get<std::int32_t>();
  c.kernel = r.get<std::int32_t>();
  c.dropout_rate = r.get<double>();
  const auto flags = r.get<std::uint8_t>();
  if ((flags & ~1u) != 0) raise(ErrorKind::InvalidArgument, "unknown checkpoint flags");
  ck.use_t1 = (flags & 1u) != 0;

  OptimState& s = ck.state;
  s.step = r.get<std::int64_t>();
  s.learning_rate = r.get<double>();
  s.plateau_count = r.get<std::int32_t>();
  s.best_validation = r.get<double>();
  s.stagnant_epochs = r.get<std::int32_t>();
  s.early_stop = r.get<std::uint8_t>() != 0;

  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    ParamTensor t = get_tensor(r);
    if (t.name.starts_with("adam.m/")) {
      s.first_moment.push_back(std::move(t.values));
    } else if (t.name.starts_with("adam.v/")) {
      s.second_moment.push_back(std::move(t.values));
    } else {
      ck.params.tensors.push_back(std::move(t));
    }
  }
  if (!r.at_end()) raise(ErrorKind::InvalidArgument, "trailing bytes after checkpoint payload");

  // The declared config must produce exactly the stored layout.
  const UNet net(c);
  net.check_params(ck.params);
  if (s.first_moment.empty()) {
    const OptimState fresh = OptimState::for_params(ck.params, s.learning_rate);
    s.first_moment = fresh.first_moment;
    s.second_moment = fresh.second_moment;
  } else if (s.first_moment.size() != ck.params.tensors.size() || s.second_moment.size() != ck.params.tensors.size()) {
    raise(ErrorKind::ShapeMismatch, "optimizer moments do not match parameters");
  }
  return ck;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorKind::Io, "write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace epi::nn
