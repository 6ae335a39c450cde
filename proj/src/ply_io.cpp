#include <algorithm>
#include <array>
#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string_view>

#include "dlign/error.hpp"
#include "dlign/geomio.hpp"

namespace dlign {
namespace {

static_assert(std::endian::native == std::endian::little, "binary PLY I/O assumes a little-endian host");

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error("cannot open point cloud file '" + path.string() + "'");
  }
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

enum class ScalarType { kInt8, kUInt8, kInt16, kUInt16, kInt32, kUInt32, kFloat32, kFloat64 };

std::optional<ScalarType> parse_scalar_type(std::string_view name) {
  if (name == "char" || name == "int8") return ScalarType::kInt8;
  if (name == "uchar" || name == "uint8") return ScalarType::kUInt8;
  if (name == "short" || name == "int16") return ScalarType::kInt16;
  if (name == "ushort" || name == "uint16") return ScalarType::kUInt16;
  if (name == "int" || name == "int32") return ScalarType::kInt32;
  if (name == "uint" || name == "uint32") return ScalarType::kUInt32;
  if (name == "float" || name == "float32") return ScalarType::kFloat32;
  if (name == "double" || name == "float64") return ScalarType::kFloat64;
  return std::nullopt;
}

std::size_t scalar_size(ScalarType t) {
  switch (t) {
    case ScalarType::kInt8:
    case ScalarType::kUInt8:
      return 1;
    case ScalarType::kInt16:
    case ScalarType::kUInt16:
      return 2;
    case ScalarType::kInt32:
    case ScalarType::kUInt32:
    case ScalarType::kFloat32:
      return 4;
    case ScalarType::kFloat64:
      return 8;
  }
  return 0;
}

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

double decode_scalar(ScalarType t, const char* p) {
  switch (t) {
    case ScalarType::kInt8:
      return load_le<std::int8_t>(p);
    case ScalarType::kUInt8:
      return load_le<std::uint8_t>(p);
    case ScalarType::kInt16:
      return load_le<std::int16_t>(p);
    case ScalarType::kUInt16:
      return load_le<std::uint16_t>(p);
    case ScalarType::kInt32:
      return load_le<std::int32_t>(p);
    case ScalarType::kUInt32:
      return load_le<std::uint32_t>(p);
    case ScalarType::kFloat32:
      return load_le<float>(p);
    case ScalarType::kFloat64:
      return load_le<double>(p);
  }
  return 0.0;
}

struct Property {
  std::string name;
  ScalarType type = ScalarType::kFloat32;
  bool is_list = false;
  ScalarType count_type = ScalarType::kUInt8;
};

struct Element {
  std::string name;
  std::uint64_t count = 0;
  std::uint64_t header_offset = 0;
  std::vector<Property> properties;
};

struct PlyHeader {
  bool ascii = false;
  std::vector<Element> elements;
  std::size_t body_offset = 0;
};

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

// Reads one '\n'-terminated line starting at `pos`. Returns false at EOF.
bool next_line(std::string_view buf, std::size_t& pos, std::string_view& line) {
  if (pos >= buf.size()) return false;
  const std::size_t end = buf.find('\n', pos);
  const std::size_t stop = end == std::string_view::npos ? buf.size() : end;
  line = buf.substr(pos, stop - pos);
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  pos = end == std::string_view::npos ? buf.size() : end + 1;
  return true;
}

PlyHeader parse_header(std::string_view buf) {
  PlyHeader header;
  std::size_t pos = 0;
  std::string_view line;
  if (!next_line(buf, pos, line) || line != "ply") {
    throw ParseError("malformed PLY header: missing 'ply' magic", 0);
  }
  bool have_format = false;
  for (;;) {
    const std::size_t line_offset = pos;
    if (!next_line(buf, pos, line)) {
      throw ParseError("malformed PLY header: missing end_header", line_offset);
    }
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0] == "comment" || tok[0] == "obj_info") continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "format") {
      if (tok.size() != 3) throw ParseError("malformed PLY format line", line_offset);
      if (tok[1] == "ascii") {
        header.ascii = true;
      } else if (tok[1] == "binary_little_endian") {
        header.ascii = false;
      } else {
        throw ParseError("unsupported PLY format '" + std::string(tok[1]) + "'", line_offset);
      }
      have_format = true;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed PLY element line", line_offset);
      Element el;
      el.name = std::string(tok[1]);
      el.header_offset = line_offset;
      const auto r = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), el.count);
      if (r.ec != std::errc() || r.ptr != tok[2].data() + tok[2].size()) {
        throw ParseError("malformed PLY element count", line_offset);
      }
      header.elements.push_back(std::move(el));
    } else if (tok[0] == "property") {
      if (header.elements.empty()) throw ParseError("PLY property before any element", line_offset);
      Property prop;
      if (tok.size() == 5 && tok[1] == "list") {
        const auto ct = parse_scalar_type(tok[2]);
        const auto vt = parse_scalar_type(tok[3]);
        if (!ct || !vt) throw ParseError("unknown PLY list property type", line_offset);
        prop.is_list = true;
        prop.count_type = *ct;
        prop.type = *vt;
        prop.name = std::string(tok[4]);
      } else if (tok.size() == 3) {
        const auto t = parse_scalar_type(tok[1]);
        if (!t) throw ParseError("unknown PLY property type '" + std::string(tok[1]) + "'", line_offset);
        prop.type = *t;
        prop.name = std::string(tok[2]);
      } else {
        throw ParseError("malformed PLY property line", line_offset);
      }
      header.elements.back().properties.push_back(std::move(prop));
    } else {
      throw ParseError("unknown PLY header keyword '" + std::string(tok[0]) + "'", line_offset);
    }
  }
  if (!have_format) throw ParseError("malformed PLY header: missing format line", pos);
  header.body_offset = pos;
  return header;
}

struct XyzSlots {
  int x = -1, y = -1, z = -1;
};

XyzSlots find_xyz(const Element& vertex) {
  XyzSlots s;
  for (int i = 0; i < static_cast<int>(vertex.properties.size()); ++i) {
    const auto& p = vertex.properties[i];
    if (p.is_list) continue;
    if (p.name == "x") s.x = i;
    if (p.name == "y") s.y = i;
    if (p.name == "z") s.z = i;
  }
  if (s.x < 0 || s.y < 0 || s.z < 0) {
    throw ParseError("PLY vertex element lacks x/y/z properties", vertex.header_offset);
  }
  return s;
}

void check_finite(const Vec3& p, std::uint64_t offset) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
    throw ParseError("non-finite vertex coordinate", offset);
  }
}

PointCloud parse_ply(std::string_view buf, bool expect_ascii) {
  const PlyHeader header = parse_header(buf);
  if (header.ascii != expect_ascii) {
    throw ParseError(std::string("PLY body is ") + (header.ascii ? "ascii" : "binary") +
                         " but a different format was declared",
                     0);
  }
  const auto vit = std::find_if(header.elements.begin(), header.elements.end(),
                                [](const Element& e) { return e.name == "vertex"; });
  if (vit == header.elements.end()) throw ParseError("PLY header declares no vertex element", header.body_offset);
  if (vit->count == 0) throw ParseError("PLY declares zero vertices", vit->header_offset);
  const XyzSlots slots = find_xyz(*vit);

  PointCloud pc;
  pc.points.reserve(vit->count);
  std::size_t pos = header.body_offset;

  if (header.ascii) {
    std::string_view line;
    for (const Element& el : header.elements) {
      const bool is_vertex = &el == &*vit;
      for (std::uint64_t i = 0; i < el.count; ++i) {
        const std::size_t line_offset = pos;
        bool got = next_line(buf, pos, line);
        while (got && split_ws(line).empty()) got = next_line(buf, pos, line);
        if (!got) {
          throw ParseError("truncated PLY payload: element '" + el.name + "' declares " +
                               std::to_string(el.count) + " entries, found " + std::to_string(i),
                           buf.size());
        }
        if (!is_vertex) continue;
        const auto tok = split_ws(line);
        if (tok.size() < el.properties.size()) {
          throw ParseError("truncated PLY vertex line", line_offset);
        }
        auto parse = [&](int slot) {
          double v = 0.0;
          const auto t = tok[slot];
          const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
          if (r.ec != std::errc() || r.ptr != t.data() + t.size()) {
            throw ParseError("malformed PLY vertex value '" + std::string(t) + "'", line_offset);
          }
          return v;
        };
        Vec3 p{parse(slots.x), parse(slots.y), parse(slots.z)};
        check_finite(p, line_offset);
        pc.points.push_back(p);
      }
      if (is_vertex) break;
    }
    return pc;
  }

  for (const Element& el : header.elements) {
    const bool is_vertex = &el == &*vit;
    std::vector<std::size_t> offsets;
    std::size_t stride = 0;
    for (const auto& p : el.properties) {
      if (p.is_list) {
        if (is_vertex) throw ParseError("list properties on vertices are not supported", el.header_offset);
        stride = 0;
        break;
      }
      offsets.push_back(stride);
      stride += scalar_size(p.type);
    }
    if (stride == 0 && !el.properties.empty()) {
      // Variable-size element ahead of the vertices: walk it record by record.
      for (std::uint64_t i = 0; i < el.count; ++i) {
        for (const auto& p : el.properties) {
          if (!p.is_list) {
            pos += scalar_size(p.type);
            continue;
          }
          const std::size_t cs = scalar_size(p.count_type);
          if (pos + cs > buf.size()) throw ParseError("truncated PLY payload", buf.size());
          const auto n = static_cast<std::uint64_t>(decode_scalar(p.count_type, buf.data() + pos));
          pos += cs + n * scalar_size(p.type);
        }
        if (pos > buf.size()) throw ParseError("truncated PLY payload", buf.size());
      }
      continue;
    }
    if (!is_vertex) {
      pos += stride * el.count;
      if (pos > buf.size()) throw ParseError("truncated PLY payload", buf.size());
      continue;
    }
    const std::size_t need = stride * el.count;
    if (buf.size() - pos < need) {
      const std::uint64_t complete = (buf.size() - pos) / stride;
      throw ParseError("truncated PLY payload: " + std::to_string(el.count) + " vertices declared, " +
                           std::to_string(complete) + " complete",
                       buf.size());
    }
    for (std::uint64_t i = 0; i < el.count; ++i) {
      const char* rec = buf.data() + pos;
      Vec3 p{decode_scalar(el.properties[slots.x].type, rec + offsets[slots.x]),
             decode_scalar(el.properties[slots.y].type, rec + offsets[slots.y]),
             decode_scalar(el.properties[slots.z].type, rec + offsets[slots.z])};
      check_finite(p, pos);
      pc.points.push_back(p);
      pos += stride;
    }
    break;
  }
  return pc;
}

PointCloud parse_xyz(std::string_view buf) {
  PointCloud pc;
  std::size_t pos = 0;
  std::string_view line;
  for (;;) {
    const std::size_t line_offset = pos;
    if (!next_line(buf, pos, line)) break;
    const auto tok = split_ws(line);
    if (tok.empty() || tok[0].front() == '#') continue;
    if (tok.size() < 3) throw ParseError("XYZ line has fewer than 3 coordinates", line_offset);
    std::array<double, 3> v{};
    for (int k = 0; k < 3; ++k) {
      const auto r = std::from_chars(tok[k].data(), tok[k].data() + tok[k].size(), v[k]);
      if (r.ec != std::errc() || r.ptr != tok[k].data() + tok[k].size()) {
        throw ParseError("malformed XYZ value '" + std::string(tok[k]) + "'", line_offset);
      }
    }
    Vec3 p{v[0], v[1], v[2]};
    check_finite(p, line_offset);
    pc.points.push_back(p);
  }
  if (pc.points.empty()) throw ParseError("XYZ file contains zero points", buf.size());
  return pc;
}

}  // namespace

PointCloud load_point_cloud(const std::filesystem::path& path, PointFormat format) {
  const std::string buf = read_file(path);
  PointCloud pc;
  switch (format) {
    case PointFormat::kPlyAscii:
      pc = parse_ply(buf, true);
      break;
    case PointFormat::kPlyBinaryLE:
      pc = parse_ply(buf, false);
      break;
    case PointFormat::kXyzText:
      pc = parse_xyz(buf);
      break;
  }
  pc.id = path.stem().string();
  return pc;
}

PointFormat detect_point_format(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".ply") return PointFormat::kXyzText;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open point cloud file '" + path.string() + "'");
  std::string line;
  for (int i = 0; i < 64 && std::getline(in, line); ++i) {
    if (line.rfind("format ", 0) == 0) {
      return line.find("ascii") != std::string::npos ? PointFormat::kPlyAscii : PointFormat::kPlyBinaryLE;
    }
    if (line.rfind("end_header", 0) == 0) break;
  }
  throw ParseError("malformed PLY header: missing format line", 0);
}

void write_ply_binary(const PointCloud& pc, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "ply\nformat binary_little_endian 1.0\n";
  out << "element vertex " << pc.points.size() << "\n";
  out << "property float x\nproperty float y\nproperty float z\nend_header\n";
  std::vector<float> payload;
  payload.reserve(pc.points.size() * 3);
  for (const Vec3& p : pc.points) {
    payload.push_back(static_cast<float>(p.x));
    payload.push_back(static_cast<float>(p.y));
    payload.push_back(static_cast<float>(p.z));
  }
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!out) throw Error("short write to '" + path.string() + "'");
}

}  // namespace dlign
