#include "epi_unwarp/nifti_io.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "epi_unwarp/errors.hpp"

namespace epi::nifti {

namespace {

constexpr bool kHostLittle = std::endian::native == std::endian::little;

// Field offsets in the 348-byte NIfTI-1 header.
namespace off {
constexpr std::size_t sizeof_hdr = 0;
constexpr std::size_t dim = 40;
constexpr std::size_t datatype = 70;
constexpr std::size_t bitpix = 72;
constexpr std::size_t pixdim = 76;
constexpr std::size_t vox_offset = 108;
constexpr std::size_t scl_slope = 112;
constexpr std::size_t scl_inter = 116;
constexpr std::size_t xyzt_units = 123;
constexpr std::size_t descrip = 148;
constexpr std::size_t qform_code = 252;
constexpr std::size_t sform_code = 254;
constexpr std::size_t quatern_b = 256;
constexpr std::size_t srow_x = 280;
constexpr std::size_t srow_y = 296;
constexpr std::size_t srow_z = 312;
constexpr std::size_t magic = 344;
}  // namespace off

class FieldReader {
 public:
  FieldReader(std::span<const std::uint8_t> bytes, bool swap) : bytes_(bytes), swap_(swap) {}

  template <class T>
  T get(std::size_t offset) const {
    std::array<std::uint8_t, sizeof(T)> raw{};
    std::memcpy(raw.data(), bytes_.data() + offset, sizeof(T));
    if (swap_) std::reverse(raw.begin(), raw.end());
    return std::bit_cast<T>(raw);
  }

 private:
  std::span<const std::uint8_t> bytes_;
  bool swap_;
};

class FieldWriter {
 public:
  explicit FieldWriter(std::span<std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  void put(std::size_t offset, T value) {
    std::memcpy(bytes_.data() + offset, &value, sizeof(T));
  }

 private:
  std::span<std::uint8_t> bytes_;
};

std::size_t datatype_width(std::int16_t code) {
  switch (static_cast<Datatype>(code)) {
    case Datatype::UInt8: return 1;
    case Datatype::Int16: return 2;
    case Datatype::Int32: return 4;
    case Datatype::Float32: return 4;
    case Datatype::Float64: return 8;
  }
  raise(ErrorKind::UnsupportedDatatype, "datatype code " + std::to_string(code));
}

template <class T>
void decode_payload(std::span<const std::uint8_t> payload, std::vector<double>& out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    T value;
    std::memcpy(&value, payload.data() + i * sizeof(T), sizeof(T));
    out[i] = static_cast<double>(value);
  }
}

Header parse_header(std::span<const std::uint8_t> bytes, bool& swap) {
  if (bytes.size() < static_cast<std::size_t>(kHeaderSize)) {
    raise(ErrorKind::TruncatedData, "file shorter than a NIfTI-1 header");
  }
  const FieldReader native(bytes, false);
  const auto size_native = native.get<std::int32_t>(off::sizeof_hdr);
  const auto size_swapped = FieldReader(bytes, true).get<std::int32_t>(off::sizeof_hdr);
  if (size_native == kHeaderSize) {
    swap = false;
  } else if (size_swapped == kHeaderSize) {
    swap = true;
  } else if (size_native == 540 || size_swapped == 540) {
    raise(ErrorKind::BadMagic, "NIfTI-2 files are not supported");
  } else {
    raise(ErrorKind::BadMagic, "sizeof_hdr is not 348");
  }

  const FieldReader r(bytes, swap);
  Header h;
  h.sizeof_hdr = kHeaderSize;
  std::memcpy(h.magic.data(), bytes.data() + off::magic, 4);
  if (std::memcmp(h.magic.data(), "ni1\0", 4) == 0) {
    raise(ErrorKind::BadMagic, "split .hdr/.img pairs are not supported");
  }
  if (std::memcmp(h.magic.data(), "n+1\0", 4) != 0) {
    raise(ErrorKind::BadMagic, "magic is not \"n+1\"");
  }
  for (std::size_t i = 0; i < 8; ++i) {
    h.dim[i] = r.get<std::int16_t>(off::dim + 2 * i);
    h.pixdim[i] = r.get<float>(off::pixdim + 4 * i);
  }
  h.datatype = r.get<std::int16_t>(off::datatype);
  h.bitpix = r.get<std::int16_t>(off::bitpix);
  h.vox_offset = r.get<float>(off::vox_offset);
  h.scl_slope = r.get<float>(off::scl_slope);
  h.scl_inter = r.get<float>(off::scl_inter);
  h.xyzt_units = bytes[off::xyzt_units];
  std::memcpy(h.descrip.data(), bytes.data() + off::descrip, h.descrip.size());
  h.qform_code = r.get<std::int16_t>(off::qform_code);
  h.sform_code = r.get<std::int16_t>(off::sform_code);
  h.quatern_b = r.get<float>(off::quatern_b);
  h.quatern_c = r.get<float>(off::quatern_b + 4);
  h.quatern_d = r.get<float>(off::quatern_b + 8);
  h.qoffset_x = r.get<float>(off::quatern_b + 12);
  h.qoffset_y = r.get<float>(off::quatern_b + 16);
  h.qoffset_z = r.get<float>(off::quatern_b + 20);
  for (std::size_t i = 0; i < 4; ++i) {
    h.srow_x[i] = r.get<float>(off::srow_x + 4 * i);
    h.srow_y[i] = r.get<float>(off::srow_y + 4 * i);
    h.srow_z[i] = r.get<float>(off::srow_z + 4 * i);
  }

  if (h.dim[0] != 3 && h.dim[0] != 4) {
    raise(ErrorKind::InvalidArgument, "dim[0] must be 3 or 4, got " + std::to_string(h.dim[0]));
  }
  for (int i = 1; i <= h.dim[0]; ++i) {
    if (h.dim[i] < 1) raise(ErrorKind::InvalidArgument, "non-positive extent in dim[]");
  }
  datatype_width(h.datatype);
  return h;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorKind::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) raise(ErrorKind::Io, "read failed for " + path.string());
  return bytes;
}

}  // namespace

std::size_t Header::voxel_count() const noexcept {
  std::size_t n = 1;
  for (int i = 1; i <= dim[0] && i < 8; ++i) n *= static_cast<std::size_t>(std::max<int>(dim[i], 0));
  return n;
}

Header make_header(std::span<const int> extents, std::span<const double> voxel_size) {
  if (extents.size() < 3 || extents.size() > 4) {
    raise(ErrorKind::InvalidArgument, "NIfTI volumes must have 3 or 4 extents");
  }
  Header h;
  const bool four_d = extents.size() == 4 && extents[3] > 1;
  h.dim.fill(1);
  h.dim[0] = four_d ? 4 : 3;
  for (std::size_t i = 0; i < extents.size(); ++i) {
    if (extents[i] < 1 || extents[i] > 32767) raise(ErrorKind::InvalidArgument, "extent out of range");
    h.dim[i + 1] = static_cast<std::int16_t>(extents[i]);
  }
  h.pixdim.fill(1.0f);
  h.pixdim[0] = 1.0f;  // qfac
  for (std::size_t i = 0; i < std::min<std::size_t>(3, voxel_size.size()); ++i) {
    h.pixdim[i + 1] = static_cast<float>(voxel_size[i]);
  }
  h.xyzt_units = 2 | 8;  // mm, seconds
  h.sform_code = 1;
  h.srow_x = {h.pixdim[1], 0.0f, 0.0f, 0.0f};
  h.srow_y = {0.0f, h.pixdim[2], 0.0f, 0.0f};
  h.srow_z = {0.0f, 0.0f, h.pixdim[3], 0.0f};
  return h;
}

namespace detail {

void swap_words(std::span<std::uint8_t> bytes, std::size_t width) {
  if (width <= 1) return;
  for (std::size_t i = 0; i + width <= bytes.size(); i += width) {
    std::reverse(bytes.begin() + static_cast<std::ptrdiff_t>(i),
                 bytes.begin() + static_cast<std::ptrdiff_t>(i + width));
  }
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) raise(ErrorKind::Io, "inflateInit2 failed");
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk{};
  int status = Z_OK;
  while (status != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    status = inflate(&zs, Z_NO_FLUSH);
    if (status != Z_OK && status != Z_STREAM_END) {
      inflateEnd(&zs);
      if (status == Z_BUF_ERROR) raise(ErrorKind::TruncatedData, "gzip stream ended early");
      raise(ErrorKind::Io, "corrupt gzip stream");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (status == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      raise(ErrorKind::TruncatedData, "gzip stream ended early");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> bytes) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    raise(ErrorKind::Io, "deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(bytes.size())) + 32);
  zs.next_in = const_cast<Bytef*>(bytes.data());
  zs.avail_in = static_cast<uInt>(bytes.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int status = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (status != Z_STREAM_END) raise(ErrorKind::Io, "gzip compression failed");
  out.resize(zs.total_out);
  return out;
}

}  // namespace detail

RawVolume decode(std::span<const std::uint8_t> bytes) {
  std::vector<std::uint8_t> inflated;
  if (bytes.size() >= 2 && bytes[0] == 0x1F && bytes[1] == 0x8B) {
    inflated = detail::gunzip(bytes);
    bytes = inflated;
  }
  bool swap = false;
  RawVolume vol;
  vol.header = parse_header(bytes, swap);
  const Header& h = vol.header;

  const std::size_t width = datatype_width(h.datatype);
  const std::size_t count = h.voxel_count();
  const double offset = h.vox_offset;
  if (!(offset >= static_cast<double>(kHeaderSize)) || offset != std::floor(offset)) {
    raise(ErrorKind::InvalidArgument, "invalid vox_offset");
  }
  const auto start = static_cast<std::size_t>(offset);
  if (bytes.size() < start || bytes.size() - start < count * width) {
    raise(ErrorKind::TruncatedData, "payload holds " +
                                        std::to_string(bytes.size() > start ? bytes.size() - start : 0) +
                                        " bytes, extents need " + std::to_string(count * width));
  }

  std::vector<std::uint8_t> payload(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                                    bytes.begin() + static_cast<std::ptrdiff_t>(start + count * width));
  if (swap) detail::swap_words(payload, width);

  vol.data.resize(count);
  switch (static_cast<Datatype>(h.datatype)) {
    case Datatype::UInt8: decode_payload<std::uint8_t>(payload, vol.data); break;
    case Datatype::Int16: decode_payload<std::int16_t>(payload, vol.data); break;
    case Datatype::Int32: decode_payload<std::int32_t>(payload, vol.data); break;
    case Datatype::Float32: decode_payload<float>(payload, vol.data); break;
    case Datatype::Float64: decode_payload<double>(payload, vol.data); break;
  }

  const double slope = h.scl_slope == 0.0f || !std::isfinite(h.scl_slope) ? 1.0 : h.scl_slope;
  const double inter = std::isfinite(h.scl_inter) ? h.scl_inter : 0.0;
  if (slope != 1.0 || inter != 0.0) {
    for (double& v : vol.data) v = v * slope + inter;
  }
  return vol;
}

std::vector<std::uint8_t> encode(const RawVolume& volume) {
  const Header& src = volume.header;
  if (src.dim[0] != 3 && src.dim[0] != 4) raise(ErrorKind::InvalidArgument, "dim[0] must be 3 or 4");
  if (src.voxel_count() != volume.data.size()) {
    raise(ErrorKind::ShapeMismatch, "data length does not match header extents");
  }
  static_assert(kHostLittle || std::endian::native == std::endian::big);

  std::vector<std::uint8_t> bytes(kSingleFileOffset + volume.data.size() * 4, 0);
  FieldWriter w(bytes);
  w.put<std::int32_t>(off::sizeof_hdr, kHeaderSize);
  bytes[38] = 'r';  // "regular"
  for (std::size_t i = 0; i < 8; ++i) {
    w.put<std::int16_t>(off::dim + 2 * i, src.dim[i]);
    w.put<float>(off::pixdim + 4 * i, src.pixdim[i]);
  }
  w.put<std::int16_t>(off::datatype, static_cast<std::int16_t>(Datatype::Float32));
  w.put<std::int16_t>(off::bitpix, 32);
  w.put<float>(off::vox_offset, static_cast<float>(kSingleFileOffset));
  w.put<float>(off::scl_slope, 1.0f);
  w.put<float>(off::scl_inter, 0.0f);
  bytes[off::xyzt_units] = src.xyzt_units;
  std::memcpy(bytes.data() + off::descrip, src.descrip.data(), src.descrip.size());
  w.put<std::int16_t>(off::qform_code, src.qform_code);
  w.put<std::int16_t>(off::sform_code, src.sform_code);
  w.put<float>(off::quatern_b, src.quatern_b);
  w.put<float>(off::quatern_b + 4, src.quatern_c);
  w.put<float>(off::quatern_b + 8, src.quatern_d);
  w.put<float>(off::quatern_b + 12, src.qoffset_x);
  w.put<float>(off::quatern_b + 16, src.qoffset_y);
  w.put<float>(off::quatern_b + 20, src.qoffset_z);
  for (std::size_t i = 0; i < 4; ++i) {
    w.put<float>(off::srow_x + 4 * i, src.srow_x[i]);
    w.put<float>(off::srow_y + 4 * i, src.srow_y[i]);
    w.put<float>(off::srow_z + 4 * i, src.srow_z[i]);
  }
  std::memcpy(bytes.data() + off::magic, "n+1\0", 4);

  std::uint8_t* payload = bytes.data() + kSingleFileOffset;
  for (std::size_t i = 0; i < volume.data.size(); ++i) {
    const auto value = static_cast<float>(volume.data[i]);
    std::memcpy(payload + 4 * i, &value, 4);
  }
  return bytes;
}

RawVolume read_nifti(const std::filesystem::path& path) { return decode(read_file(path)); }

void write_nifti(const RawVolume& volume, const std::filesystem::path& path) {
  std::vector<std::uint8_t> bytes = encode(volume);
  if (path.extension() == ".gz") bytes = detail::gzip(bytes);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) raise(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace epi::nifti
