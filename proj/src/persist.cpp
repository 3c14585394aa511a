#include "aranet/persist.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace aranet {

namespace {

constexpr std::int64_t kMaxVoxels = std::int64_t(1) << 28;
constexpr std::size_t kMaxHeader = 4096;
constexpr std::size_t kMaxFile = std::size_t(1) << 30;
constexpr std::size_t kMaxName = 512;
constexpr std::size_t kMaxDims = 8;

// ---- little-endian packing ----

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size, const char* what)
      : p_(data), n_(size), what_(what) {}

  std::size_t remaining() const { return n_ - off_; }

  const std::uint8_t* take(std::size_t k) {
    if (k > remaining()) throw io_error(std::string(what_) + ": truncated body");
    const std::uint8_t* at = p_ + off_;
    off_ += k;
    return at;
  }

  std::uint8_t u8() { return *take(1); }

  std::uint16_t u16() {
    const std::uint8_t* b = take(2);
    return static_cast<std::uint16_t>(b[0] | (std::uint16_t(b[1]) << 8));
  }

  std::uint32_t u32() {
    const std::uint8_t* b = take(4);
    return b[0] | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }

  float f32() { return std::bit_cast<float>(u32()); }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t off_ = 0;
  const char* what_;
};

// ---- file helpers ----

std::vector<std::uint8_t> read_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error(std::string(what) + ": cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  if (end < 0) throw io_error(std::string(what) + ": cannot stat '" + path + "'");
  const auto size = static_cast<std::size_t>(end);
  if (size > kMaxFile) throw io_error(std::string(what) + ": file exceeds the 1 GiB cap");
  in.seekg(0, std::ios::beg);
  std::vector<std::uint8_t> data(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(size))) {
    throw io_error(std::string(what) + ": short read on '" + path + "'");
  }
  return data;
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& data, const char* what) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error(std::string(what) + ": cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
  out.flush();
  if (!out) throw io_error(std::string(what) + ": write failed on '" + path + "'");
}

std::string format_spacing(const std::array<double, 3>& s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.9g,%.9g,%.9g", s[0], s[1], s[2]);
  return buf;
}

// ---- volume container ----

struct DvolHeader {
  std::string dtype;
  Shape shape;
  std::array<double, 3> spacing{};
  std::string label;
  std::size_t header_len = 0;
};

DvolHeader parse_dvol_header(const std::vector<std::uint8_t>& data, const char* what) {
  std::size_t eol = 0;
  while (eol < data.size() && data[eol] != '\n') {
    if (++eol > kMaxHeader) throw io_error(std::string(what) + ": header line too long");
  }
  if (eol >= data.size()) throw io_error(std::string(what) + ": missing header terminator");

  std::string line(reinterpret_cast<const char*>(data.data()), eol);
  std::istringstream tokens(line);
  std::string magic;
  tokens >> magic;
  if (magic != "DVOL1") throw io_error(std::string(what) + ": bad magic");

  DvolHeader h;
  h.header_len = eol + 1;
  bool have_dtype = false, have_shape = false, have_spacing = false;
  std::string tok;
  while (tokens >> tok) {
    const auto sep = tok.find('=');
    if (sep == std::string::npos) throw io_error(std::string(what) + ": malformed header field '" + tok + "'");
    const std::string key = tok.substr(0, sep);
    const std::string val = tok.substr(sep + 1);
    if (key == "dtype") {
      if (val != "f32le" && val != "u8") throw io_error(std::string(what) + ": unknown dtype '" + val + "'");
      h.dtype = val;
      have_dtype = true;
    } else if (key == "shape") {
      std::istringstream ss(val);
      std::string part;
      while (std::getline(ss, part, ',')) {
        char* endp = nullptr;
        const long long ext = std::strtoll(part.c_str(), &endp, 10);
        if (part.empty() || endp == nullptr || *endp != '\0' || ext <= 0) {
          throw io_error(std::string(what) + ": bad shape extent '" + part + "'");
        }
        h.shape.push_back(ext);
      }
      if (h.shape.size() != 3) throw io_error(std::string(what) + ": shape must have 3 extents");
      have_shape = true;
    } else if (key == "spacing") {
      std::istringstream ss(val);
      std::string part;
      std::size_t i = 0;
      while (std::getline(ss, part, ',')) {
        if (i >= 3) throw io_error(std::string(what) + ": spacing must have 3 values");
        char* endp = nullptr;
        const double s = std::strtod(part.c_str(), &endp);
        if (part.empty() || endp == nullptr || *endp != '\0' || !(s > 0.0) || !std::isfinite(s)) {
          throw io_error(std::string(what) + ": bad spacing value '" + part + "'");
        }
        h.spacing[i++] = s;
      }
      if (i != 3) throw io_error(std::string(what) + ": spacing must have 3 values");
      have_spacing = true;
    } else if (key == "label") {
      h.label = val;
    } else {
      throw io_error(std::string(what) + ": unknown header field '" + key + "'");
    }
  }
  if (!have_dtype || !have_shape || !have_spacing) {
    throw io_error(std::string(what) + ": header needs dtype, shape and spacing");
  }
  std::int64_t numel = 1;
  for (std::int64_t e : h.shape) {
    if (e > kMaxVoxels / numel) throw io_error(std::string(what) + ": declared volume too large");
    numel *= e;
  }
  return h;
}

std::string header_line(const char* dtype, const Shape& shape, const std::array<double, 3>& spacing,
                        const std::string& label) {
  std::string line = "DVOL1 dtype=";
  line += dtype;
  line += " shape=" + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
          std::to_string(shape[2]);
  line += " spacing=" + format_spacing(spacing);
  if (!label.empty()) line += " label=" + label;
  line += "\n";
  return line;
}

}  // namespace

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const std::array<std::uint32_t, 256> table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) {
    crc = table[(crc ^ data[i]) & 0xFFu] ^ (crc >> 8);
  }
  return crc ^ 0xFFFFFFFFu;
}

void write_volume(const std::string& path, const Volume& v) {
  validate_volume(v, false, "volume");
  const std::string header = header_line("f32le", v.shape, v.spacing_mm, "");
  std::vector<std::uint8_t> data;
  data.reserve(header.size() + v.values.size() * 4);
  data.insert(data.end(), header.begin(), header.end());
  for (float x : v.values) put_f32(data, x);
  write_file(path, data, "volume");
}

Volume read_volume(const std::string& path) {
  const std::vector<std::uint8_t> data = read_file(path, "volume");
  const DvolHeader h = parse_dvol_header(data, "volume");
  if (h.dtype != "f32le") throw io_error("volume: expected dtype f32le, found " + h.dtype);

  Volume v;
  v.shape = h.shape;
  v.spacing_mm = h.spacing;
  const auto numel = static_cast<std::size_t>(shape_numel(h.shape));
  if (data.size() - h.header_len < numel * 4) throw io_error("volume: truncated body");
  if (data.size() - h.header_len > numel * 4) throw io_error("volume: trailing bytes after body");
  ByteReader body(data.data() + h.header_len, data.size() - h.header_len, "volume");
  v.values.resize(numel);
  for (auto& x : v.values) {
    x = body.f32();
    if (!std::isfinite(x)) throw io_error("volume: non-finite value in body");
  }
  return v;
}

void write_mask(const std::string& path, const MaskVolume& m) {
  validate_mask(m);
  const std::string header = header_line("u8", m.shape, m.spacing_mm, m.label);
  std::vector<std::uint8_t> data;
  data.reserve(header.size() + m.values.size());
  data.insert(data.end(), header.begin(), header.end());
  data.insert(data.end(), m.values.begin(), m.values.end());
  write_file(path, data, "mask");
}

MaskVolume read_mask(const std::string& path) {
  const std::vector<std::uint8_t> data = read_file(path, "mask");
  const DvolHeader h = parse_dvol_header(data, "mask");
  if (h.dtype != "u8") throw io_error("mask: expected dtype u8, found " + h.dtype);

  MaskVolume m;
  m.shape = h.shape;
  m.spacing_mm = h.spacing;
  m.label = h.label.empty() ? std::filesystem::path(path).stem().string() : h.label;
  const auto numel = static_cast<std::size_t>(shape_numel(h.shape));
  if (data.size() - h.header_len < numel) throw io_error("mask: truncated body");
  if (data.size() - h.header_len > numel) throw io_error("mask: trailing bytes after body");
  m.values.assign(data.begin() + static_cast<std::ptrdiff_t>(h.header_len), data.end());
  for (std::uint8_t b : m.values) {
    if (b > 1) throw io_error("mask: body byte is not 0 or 1");
  }
  return m;
}

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::set<std::string> seen;
  std::vector<std::uint8_t> data;
  data.insert(data.end(), {'A', 'R', 'A', 'C', 'K', 'P', 'T', '1'});
  put_u32(data, 1);
  put_u32(data, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    if (name.empty() || name.size() > kMaxName) {
      throw std::invalid_argument("checkpoint: tensor name length must be 1.." + std::to_string(kMaxName));
    }
    if (!seen.insert(name).second) {
      throw std::invalid_argument("checkpoint: duplicate tensor name '" + name + "'");
    }
    if (!tensor.defined()) throw std::invalid_argument("checkpoint: undefined tensor '" + name + "'");
    if (tensor.rank() > static_cast<std::int64_t>(kMaxDims)) {
      throw std::invalid_argument("checkpoint: tensor '" + name + "' exceeds 8 dimensions");
    }
    if (tensor.numel() > kMaxVoxels) {
      throw std::invalid_argument("checkpoint: tensor '" + name + "' exceeds the element cap");
    }
    put_u16(data, static_cast<std::uint16_t>(name.size()));
    data.insert(data.end(), name.begin(), name.end());
    data.push_back(static_cast<std::uint8_t>(tensor.rank()));
    for (std::int64_t d : tensor.shape()) {
      if (d > 0xFFFFFFFFll) throw std::invalid_argument("checkpoint: extent exceeds u32 in '" + name + "'");
      put_u32(data, static_cast<std::uint32_t>(d));
    }
    for (float x : tensor.data()) put_f32(data, x);
  }
  put_u32(data, crc32(data.data(), data.size()));
  write_file(path, data, "checkpoint");
}

NamedTensors load_checkpoint(const std::string& path) {
  const std::vector<std::uint8_t> data = read_file(path, "checkpoint");
  if (data.size() < 20) throw io_error("checkpoint: truncated body");
  static constexpr std::uint8_t kMagic[8] = {'A', 'R', 'A', 'C', 'K', 'P', 'T', '1'};
  if (std::memcmp(data.data(), kMagic, 8) != 0) throw io_error("checkpoint: bad magic");

  const std::size_t body_len = data.size() - 4;
  ByteReader tail(data.data() + body_len, 4, "checkpoint");
  const std::uint32_t stored = tail.u32();
  const std::uint32_t computed = crc32(data.data(), body_len);
  if (stored != computed) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "stored %08x, computed %08x", stored, computed);
    throw io_error(std::string("checkpoint: CRC mismatch, ") + buf);
  }

  ByteReader r(data.data() + 8, body_len - 8, "checkpoint");
  const std::uint32_t version = r.u32();
  if (version != 1) throw io_error("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  if (count > body_len / 8) throw io_error("checkpoint: implausible tensor count");

  NamedTensors out;
  out.reserve(count);
  std::set<std::string> seen;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16();
    if (name_len == 0 || name_len > kMaxName) throw io_error("checkpoint: bad tensor name length");
    const std::uint8_t* name_bytes = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(name_bytes), name_len);
    if (!seen.insert(name).second) throw io_error("checkpoint: duplicate tensor name '" + name + "'");

    const std::uint8_t ndim = r.u8();
    if (ndim == 0 || ndim > kMaxDims) throw io_error("checkpoint: bad dimension count");
    Shape shape;
    std::int64_t numel = 1;
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::uint32_t ext = r.u32();
      if (ext == 0) throw io_error("checkpoint: zero extent");
      if (static_cast<std::int64_t>(ext) > kMaxVoxels / numel) {
        throw io_error("checkpoint: tensor exceeds the element cap");
      }
      numel *= ext;
      shape.push_back(ext);
    }
    if (static_cast<std::size_t>(numel) * 4 > r.remaining()) throw io_error("checkpoint: truncated body");
    TensorF tensor(shape);
    auto dst = tensor.data();
    for (auto& x : dst) x = r.f32();
    out.emplace_back(std::move(name), std::move(tensor));
  }
  if (r.remaining() != 0) throw io_error("checkpoint: trailing bytes after last tensor");
  return out;
}

}  // namespace aranet
