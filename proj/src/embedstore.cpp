#include "dlign/embedstore.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace dlign {
namespace {

static_assert(std::endian::native == std::endian::little, "DLEM I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'L', 'E', 'M'};
constexpr std::uint8_t kDtypeF32 = 1;
constexpr std::size_t kTagBytes = 16;

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(const std::uint8_t* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

}  // namespace

std::string to_string(EncoderTag tag) {
  switch (tag) {
    case EncoderTag::kPretrained:
      return "pretrained";
    case EncoderTag::kFinetuned:
      return "finetuned";
    case EncoderTag::kText:
      return "text";
  }
  return "";
}

std::optional<EncoderTag> parse_encoder_tag(const std::string& s) {
  if (s == "pretrained") return EncoderTag::kPretrained;
  if (s == "finetuned") return EncoderTag::kFinetuned;
  if (s == "text") return EncoderTag::kText;
  return std::nullopt;
}

std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.rows() < 1 || m.dim() < 1) throw PreconditionError("write_embeddings: matrix must be at least 1x1");
  if (!m.data.allFinite()) throw CodecError(CodecErrc::kNonFinite, "write_embeddings: matrix has NaN/Inf entries");
  std::vector<std::uint8_t> out;
  out.reserve(kEmbeddingHeaderSize + static_cast<std::size_t>(m.data.size()) * sizeof(float));
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put<std::uint32_t>(out, kEmbeddingVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  put<std::uint8_t>(out, kDtypeF32);
  put<std::uint8_t>(out, m.normalized ? 1 : 0);
  const std::string tag = to_string(m.tag);
  std::uint8_t tag_bytes[kTagBytes] = {};
  std::memcpy(tag_bytes, tag.data(), tag.size());
  out.insert(out.end(), std::begin(tag_bytes), std::end(tag_bytes));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.dim(); ++j) put<float>(out, static_cast<float>(m.data(i, j)));
  }
  return out;
}

EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CodecError(CodecErrc::kBadMagic, "embedding file: bad magic (expected \"DLEM\")");
  }
  if (bytes.size() < kEmbeddingHeaderSize) {
    throw CodecError(CodecErrc::kLengthMismatch, "embedding file: header truncated");
  }
  const auto version = get<std::uint32_t>(bytes.data() + 4);
  if (version != kEmbeddingVersion) {
    throw CodecError(CodecErrc::kVersionMismatch,
                     "embedding file: version " + std::to_string(version) + " is not supported");
  }
  const auto rows = get<std::uint32_t>(bytes.data() + 8);
  const auto dim = get<std::uint32_t>(bytes.data() + 12);
  const auto dtype = bytes[16];
  const auto normalized = bytes[17];
  if (dtype != kDtypeF32) throw CodecError(CodecErrc::kBadHeader, "embedding file: unknown dtype");
  if (normalized > 1) throw CodecError(CodecErrc::kBadHeader, "embedding file: bad normalized flag");
  if (rows < 1 || dim < 1) throw CodecError(CodecErrc::kBadHeader, "embedding file: empty matrix");

  const char* tag_begin = reinterpret_cast<const char*>(bytes.data() + 18);
  const std::size_t tag_len = strnlen(tag_begin, kTagBytes);
  for (std::size_t k = tag_len; k < kTagBytes; ++k) {
    if (tag_begin[k] != 0) throw CodecError(CodecErrc::kBadHeader, "embedding file: tag is not zero padded");
  }
  const auto tag = parse_encoder_tag(std::string(tag_begin, tag_len));
  if (!tag) throw CodecError(CodecErrc::kBadHeader, "embedding file: unknown encoder tag");

  const std::uint64_t expected = kEmbeddingHeaderSize + std::uint64_t{rows} * dim * sizeof(float);
  if (bytes.size() != expected) {
    throw CodecError(CodecErrc::kLengthMismatch, "embedding file: payload is " +
                                                     std::to_string(bytes.size() - kEmbeddingHeaderSize) +
                                                     " bytes, header implies " +
                                                     std::to_string(expected - kEmbeddingHeaderSize));
  }
  EmbeddingMatrix m;
  m.data.resize(rows, dim);
  m.normalized = normalized == 1;
  m.tag = *tag;
  const std::uint8_t* p = bytes.data() + kEmbeddingHeaderSize;
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < dim; ++j, p += sizeof(float)) {
      const float v = get<float>(p);
      if (!std::isfinite(v)) {
        throw CodecError(CodecErrc::kNonFinite, "embedding file: non-finite value at row " + std::to_string(i) +
                                                    ", column " + std::to_string(j));
      }
      m.data(i, j) = v;
    }
  }
  return m;
}

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
  const auto bytes = encode_embeddings(m);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CodecError(CodecErrc::kIo, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CodecError(CodecErrc::kIo, "short write to '" + path.string() + "'");
}

EmbeddingMatrix read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CodecError(CodecErrc::kIo, "cannot open embedding file '" + path.string() + "'");
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_embeddings(bytes);
  } catch (const CodecError& e) {
    throw CodecError(e.code(), path.string() + ": " + e.what());
  }
}

EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m) {
  EmbeddingMatrix out = m;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    const double n = m.data.row(i).norm();
    if (n == 0.0) throw PreconditionError("l2_normalize: row " + std::to_string(i) + " is all zeros");
    out.data.row(i) /= n;
  }
  out.normalized = true;
  return out;
}

Eigen::VectorXd mean_pool_normalized(const Eigen::MatrixXd& rows) {
  if (rows.rows() < 1) throw PreconditionError("mean_pool_normalized: needs at least one view");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    const double n = rows.row(i).norm();
    if (n == 0.0) throw PreconditionError("mean_pool_normalized: view " + std::to_string(i) + " is all zeros");
    acc += rows.row(i).transpose() / n;
  }
  return acc / static_cast<double>(rows.rows());
}

Eigen::VectorXd mean_pool_normalized(const ViewFeatureSet& v) { return mean_pool_normalized(v.views.data); }

FeatureManifest load_feature_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open feature manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("feature manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("shapes") || !doc["shapes"].is_object()) {
    throw ValidationError("feature manifest needs a \"shapes\" object");
  }
  const std::filesystem::path base = path.parent_path();
  auto resolve = [&](const nlohmann::json& obj, const char* key) -> std::optional<std::filesystem::path> {
    if (!obj.contains(key)) return std::nullopt;
    if (!obj[key].is_string()) throw ValidationError(std::string("feature manifest: \"") + key + "\" must be a path");
    const std::filesystem::path p = obj[key].get<std::string>();
    return p.is_absolute() ? p : base / p;
  };

  FeatureManifest fm;
  for (const auto& [id, spec] : doc["shapes"].items()) {
    if (id.empty()) throw ValidationError("feature manifest contains an empty shape id");
    if (!spec.is_object()) throw ValidationError("feature manifest: shape '" + id + "' must be an object");
    ShapeFeatures s;
    s.id = id;
    s.pretrained = resolve(spec, "pretrained");
    s.finetuned = resolve(spec, "finetuned");
    s.depth_tokens = resolve(spec, "depth_tokens");
    s.depth_frozen = resolve(spec, "depth_frozen");
    s.image = resolve(spec, "image");
    if (spec.contains("label")) {
      if (!spec["label"].is_string()) throw ValidationError("feature manifest: label of '" + id + "' must be a string");
      s.label = spec["label"].get<std::string>();
    }
    fm.shapes.push_back(std::move(s));
  }
  if (doc.contains("labels")) {
    for (const auto& [label, spec] : doc["labels"].items()) {
      const auto text = spec.is_object() ? resolve(spec, "text") : std::nullopt;
      if (!text) throw ValidationError("feature manifest: label '" + label + "' lacks a \"text\" path");
      fm.label_text[label] = *text;
    }
  }
  if (doc.contains("split")) {
    const auto& sp = doc["split"];
    ViewSplit split;
    try {
      split.pretrained = sp.value("pretrained", std::vector<int>{});
      split.finetuned = sp.value("finetuned", std::vector<int>{});
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(std::string("feature manifest: bad \"split\": ") + e.what());
    }
    fm.split = std::move(split);
  }
  return fm;
}

}  // namespace dlign
