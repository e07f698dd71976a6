#pragma once

/// NIfTI-1 single-file volumes (.nii, .nii.gz) and FSL bvals/bvecs text files.
///
/// Orientation fields are carried in the header but never applied: every grid
/// in the pipeline is axis aligned.

#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <zlib.h>

#include "tractseg/core.hpp"
#include "tractseg/error.hpp"
#include "tractseg/qspace.hpp"

namespace tractseg {

static_assert(std::endian::native == std::endian::little,
              "NIfTI I/O assumes a little-endian host");

enum class NiftiDatatype : std::int16_t {
  uint8 = 2,
  int16 = 4,
  float32 = 16,
};

struct NiftiHeaderLite {
  std::array<std::int16_t, 8> dim{};
  NiftiDatatype datatype = NiftiDatatype::float32;
  std::array<float, 8> pixdim{};
  float scl_slope = 1.0f;
  float scl_inter = 0.0f;
  float vox_offset = 352.0f;
  std::int16_t qform_code = 0;
  std::int16_t sform_code = 0;
  std::array<float, 3> quatern{};
  std::array<float, 3> qoffset{};
  std::array<std::array<float, 4>, 3> srow{};
};

namespace detail {

inline constexpr std::size_t kNiftiHeaderSize = 348;
inline constexpr std::size_t kNiftiVoxOffset = 352;

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path.string());
}

inline bool is_gzip(std::span<const std::uint8_t> b) {
  return b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b;
}

inline std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) fail(ErrorKind::io, "inflateInit failed");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> buf{};
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      fail(ErrorKind::truncated, "corrupt or truncated gzip stream");
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      fail(ErrorKind::truncated, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

// gzip wrapper with a zeroed mtime, so equal payloads give equal files.
inline std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    fail(ErrorKind::io, "deflateInit failed");
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())) + 64);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) fail(ErrorKind::io, "deflate failed");
  out.resize(zs.total_out);
  return out;
}

template <typename T>
T load(std::span<const std::uint8_t> b, std::size_t off) {
  T v;
  std::memcpy(&v, b.data() + off, sizeof(T));
  return v;
}

template <typename T>
void store(std::span<std::uint8_t> b, std::size_t off, T v) {
  std::memcpy(b.data() + off, &v, sizeof(T));
}

inline std::size_t bytes_per_voxel(NiftiDatatype dt) {
  switch (dt) {
    case NiftiDatatype::uint8: return 1;
    case NiftiDatatype::int16: return 2;
    case NiftiDatatype::float32: return 4;
  }
  return 0;
}

inline bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

}  // namespace detail

inline NiftiHeaderLite parse_nifti_header(std::span<const std::uint8_t> b) {
  using detail::load;
  if (b.size() < detail::kNiftiHeaderSize) fail(ErrorKind::truncated, "file shorter than a NIfTI header");
  const auto sizeof_hdr = load<std::int32_t>(b, 0);
  if (sizeof_hdr != 348) {
    const auto u = static_cast<std::uint32_t>(sizeof_hdr);
    const std::uint32_t swapped =
        (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
    if (swapped == 348u)
      fail(ErrorKind::unsupported_endianness, "big-endian NIfTI is not supported");
    fail(ErrorKind::bad_magic, "sizeof_hdr is not 348");
  }
  if (std::memcmp(b.data() + 344, "n+1\0", 4) != 0)
    fail(ErrorKind::bad_magic, "missing n+1 magic (only single-file NIfTI-1 is supported)");
  NiftiHeaderLite h;
  for (int i = 0; i < 8; ++i) h.dim[static_cast<std::size_t>(i)] = load<std::int16_t>(b, 40 + 2 * static_cast<std::size_t>(i));
  const auto dt = load<std::int16_t>(b, 70);
  if (dt != 2 && dt != 4 && dt != 16)
    fail(ErrorKind::unsupported_datatype, "unsupported NIfTI datatype " + std::to_string(dt));
  h.datatype = static_cast<NiftiDatatype>(dt);
  for (std::size_t i = 0; i < 8; ++i) h.pixdim[i] = load<float>(b, 76 + 4 * i);
  h.vox_offset = load<float>(b, 108);
  h.scl_slope = load<float>(b, 112);
  h.scl_inter = load<float>(b, 116);
  h.qform_code = load<std::int16_t>(b, 252);
  h.sform_code = load<std::int16_t>(b, 254);
  for (std::size_t i = 0; i < 3; ++i) {
    h.quatern[i] = load<float>(b, 256 + 4 * i);
    h.qoffset[i] = load<float>(b, 268 + 4 * i);
  }
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 4; ++c) h.srow[r][c] = load<float>(b, 280 + 16 * r + 4 * c);
  if (h.dim[0] < 1 || h.dim[0] > 4) fail(ErrorKind::domain, "only 1-4 dimensional volumes are supported");
  for (int i = 1; i <= h.dim[0]; ++i)
    if (h.dim[static_cast<std::size_t>(i)] < 1) fail(ErrorKind::domain, "non-positive dimension");
  return h;
}

inline Volume decode_nifti(std::span<const std::uint8_t> raw, NiftiHeaderLite* header_out = nullptr) {
  std::vector<std::uint8_t> inflated;
  std::span<const std::uint8_t> b = raw;
  if (detail::is_gzip(raw)) {
    inflated = detail::gunzip(raw);
    b = inflated;
  }
  const NiftiHeaderLite h = parse_nifti_header(b);
  auto dim = [&](int i) -> std::size_t {
    return i <= h.dim[0] ? static_cast<std::size_t>(h.dim[static_cast<std::size_t>(i)]) : 1;
  };
  auto spacing = [&](int i) -> double {
    const double p = i <= h.dim[0] ? std::abs(h.pixdim[static_cast<std::size_t>(i)]) : 1.0;
    return p > 0.0 ? p : 1.0;
  };
  Vec3 origin{0.0, 0.0, 0.0};
  if (h.qform_code > 0) {
    origin = {h.qoffset[0], h.qoffset[1], h.qoffset[2]};
  } else if (h.sform_code > 0) {
    origin = {h.srow[0][3], h.srow[1][3], h.srow[2][3]};
  }
  const Grid3 grid({dim(1), dim(2), dim(3)}, {spacing(1), spacing(2), spacing(3)}, origin);
  const std::size_t channels = dim(4);
  const std::size_t n = grid.voxels() * channels;
  const std::size_t bpv = detail::bytes_per_voxel(h.datatype);
  const auto off = static_cast<std::size_t>(h.vox_offset);
  if (off < detail::kNiftiHeaderSize || b.size() < off + n * bpv)
    fail(ErrorKind::truncated, "voxel payload is truncated");
  const bool scaled = h.scl_slope != 0.0f && !(h.scl_slope == 1.0f && h.scl_inter == 0.0f);
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    switch (h.datatype) {
      case NiftiDatatype::uint8: v = b[off + i]; break;
      case NiftiDatatype::int16: v = detail::load<std::int16_t>(b, off + 2 * i); break;
      case NiftiDatatype::float32: v = detail::load<float>(b, off + 4 * i); break;
    }
    data[i] = scaled ? static_cast<float>(v * h.scl_slope + h.scl_inter) : static_cast<float>(v);
  }
  if (header_out) *header_out = h;
  return Volume(grid, channels, std::move(data));
}

inline Volume read_nifti(const std::filesystem::path& path, NiftiHeaderLite* header_out = nullptr) {
  return decode_nifti(detail::read_file(path), header_out);
}

/// Uncompressed NIfTI-1 bytes. Integer datatypes are rounded and saturated;
/// all datatypes are written with scl_slope = 1, scl_inter = 0.
inline std::vector<std::uint8_t> encode_nifti(const Volume& v, NiftiDatatype dt) {
  using detail::store;
  const std::size_t bpv = detail::bytes_per_voxel(dt);
  std::vector<std::uint8_t> b(detail::kNiftiVoxOffset + v.size() * bpv, 0);
  std::span<std::uint8_t> s(b);
  const Grid3& g = v.grid();
  const bool four_d = v.channels() > 1;
  store<std::int32_t>(s, 0, 348);
  b[38] = 'r';
  std::array<std::int64_t, 8> dim{four_d ? 4 : 3, static_cast<std::int64_t>(g.dims[0]),
                                  static_cast<std::int64_t>(g.dims[1]),
                                  static_cast<std::int64_t>(g.dims[2]),
                                  static_cast<std::int64_t>(v.channels()), 1, 1, 1};
  for (std::size_t i = 0; i < 8; ++i) {
    if (dim[i] > 32767) fail(ErrorKind::domain, "dimension too large for NIfTI-1");
    store<std::int16_t>(s, 40 + 2 * i, static_cast<std::int16_t>(dim[i]));
  }
  store<std::int16_t>(s, 70, static_cast<std::int16_t>(dt));
  store<std::int16_t>(s, 72, static_cast<std::int16_t>(bpv * 8));
  const std::array<float, 8> pixdim{1.0f, static_cast<float>(g.spacing[0]),
                                    static_cast<float>(g.spacing[1]),
                                    static_cast<float>(g.spacing[2]), 1.0f, 1.0f, 1.0f, 1.0f};
  for (std::size_t i = 0; i < 8; ++i) store<float>(s, 76 + 4 * i, pixdim[i]);
  store<float>(s, 108, static_cast<float>(detail::kNiftiVoxOffset));
  store<float>(s, 112, 1.0f);
  store<float>(s, 116, 0.0f);
  b[123] = 2;  // xyzt_units: mm
  store<std::int16_t>(s, 252, 1);
  store<std::int16_t>(s, 254, 1);
  for (std::size_t a = 0; a < 3; ++a) {
    store<float>(s, 268 + 4 * a, static_cast<float>(g.origin[a]));
    store<float>(s, 280 + 16 * a + 4 * a, static_cast<float>(g.spacing[a]));
    store<float>(s, 280 + 16 * a + 12, static_cast<float>(g.origin[a]));
  }
  std::memcpy(b.data() + 344, "n+1\0", 4);

  const std::size_t off = detail::kNiftiVoxOffset;
  const auto& d = v.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    switch (dt) {
      case NiftiDatatype::uint8:
        b[off + i] = static_cast<std::uint8_t>(std::clamp(std::lround(d[i]), 0L, 255L));
        break;
      case NiftiDatatype::int16:
        store<std::int16_t>(s, off + 2 * i,
                            static_cast<std::int16_t>(std::clamp(std::lround(d[i]), -32768L, 32767L)));
        break;
      case NiftiDatatype::float32:
        store<float>(s, off + 4 * i, d[i]);
        break;
    }
  }
  return b;
}

/// Writes gzip-compressed output when the path ends in ".gz".
inline void write_nifti(const Volume& v, const std::filesystem::path& path,
                        NiftiDatatype dt = NiftiDatatype::float32) {
  auto bytes = encode_nifti(v, dt);
  if (detail::ends_with(path.string(), ".gz")) bytes = detail::gzip(bytes);
  detail::write_file(path, bytes);
}

// FSL gradient files --------------------------------------------------------

namespace detail {

inline std::vector<double> parse_row(std::string_view line, std::string_view what) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i >= line.size()) break;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    double v = 0.0;
    const auto* first = line.data() + i;
    const auto* last = line.data() + j;
    if (*first == '+') ++first;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last)
      fail(ErrorKind::parse, "non-numeric token '" + std::string(line.substr(i, j - i)) + "' in " +
                                 std::string(what));
    out.push_back(v);
    i = j;
  }
  return out;
}

inline std::vector<std::vector<double>> parse_rows(const std::string& text, std::string_view what) {
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto row = parse_row(line, what);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_number(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

inline std::string slurp(const std::filesystem::path& p) {
  const auto bytes = read_file(p);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace detail

/// Parses FSL-layout text: bvals one row of m numbers, bvecs three rows of m.
inline GradientTable parse_gradients(const std::string& bvals_text, const std::string& bvecs_text,
                                     double b0_tol = kDefaultB0Tol) {
  const auto brows = detail::parse_rows(bvals_text, "bvals");
  const auto vrows = detail::parse_rows(bvecs_text, "bvecs");
  if (brows.size() != 1) fail(ErrorKind::parse, "bvals must contain exactly one row");
  if (vrows.size() != 3) fail(ErrorKind::parse, "bvecs must contain exactly three rows");
  const auto& bvals = brows[0];
  for (const auto& r : vrows)
    if (r.size() != bvals.size())
      fail(ErrorKind::length_mismatch, "bvals/bvecs column counts differ");
  std::vector<Vec3> dirs(bvals.size());
  for (std::size_t i = 0; i < bvals.size(); ++i) dirs[i] = {vrows[0][i], vrows[1][i], vrows[2][i]};
  return make_gradient_table(bvals, dirs, b0_tol);
}

inline GradientTable read_gradients(const std::filesystem::path& bval_path,
                                    const std::filesystem::path& bvec_path,
                                    double b0_tol = kDefaultB0Tol) {
  return parse_gradients(detail::slurp(bval_path), detail::slurp(bvec_path), b0_tol);
}

/// Shortest round-trip decimal text for each number, single-space separated.
inline std::pair<std::string, std::string> format_gradients(const GradientTable& table) {
  if (table.empty()) fail(ErrorKind::empty_input, "cannot write an empty gradient table");
  std::string bvals;
  std::array<std::string, 3> rows;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto sep = i == 0 ? "" : " ";
    bvals += sep + detail::format_number(table.entries[i].bval);
    for (std::size_t a = 0; a < 3; ++a) rows[a] += sep + detail::format_number(table.entries[i].dir[a]);
  }
  return {bvals + "\n", rows[0] + "\n" + rows[1] + "\n" + rows[2] + "\n"};
}

inline void write_gradients(const GradientTable& table, const std::filesystem::path& bval_path,
                            const std::filesystem::path& bvec_path) {
  const auto [bvals, bvecs] = format_gradients(table);
  const auto as_bytes = [](const std::string& s) {
    return std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size());
  };
  detail::write_file(bval_path, as_bytes(bvals));
  detail::write_file(bvec_path, as_bytes(bvecs));
}

}  // namespace tractseg
