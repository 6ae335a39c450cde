#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlign/error.hpp"

namespace dlign {

// Which encoder produced a feature matrix.
enum class EncoderTag { kPretrained, kFinetuned, kText };

std::string to_string(EncoderTag tag);
std::optional<EncoderTag> parse_encoder_tag(const std::string& s);

// n x d feature rows. Stored on disk as float32, held in memory as double.
struct EmbeddingMatrix {
  Eigen::MatrixXd data;  // rows x dim
  bool normalized = false;
  EncoderTag tag = EncoderTag::kPretrained;

  Eigen::Index rows() const { return data.rows(); }
  Eigen::Index dim() const { return data.cols(); }
};

// Per-view features of one shape from one encoder state.
struct ViewFeatureSet {
  std::string shape_id;
  EmbeddingMatrix views;  // N x d
};

enum class CodecErrc {
  kIo,
  kBadMagic,
  kVersionMismatch,
  kBadHeader,
  kLengthMismatch,
  kNonFinite,
};

class CodecError : public Error {
 public:
  CodecError(CodecErrc code, const std::string& what) : Error(what), code_(code) {}
  CodecErrc code() const { return code_; }

 private:
  CodecErrc code_;
};

// "DLEM" v1: magic, u32 version, u32 rows, u32 dim, u8 dtype (1 = f32),
// u8 normalized, 16-byte zero-padded tag, row-major little-endian payload.
inline constexpr std::uint32_t kEmbeddingVersion = 1;
inline constexpr std::size_t kEmbeddingHeaderSize = 34;

void write_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix read_embeddings(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m);
EmbeddingMatrix decode_embeddings(const std::vector<std::uint8_t>& bytes);

// Throws PreconditionError naming the first zero row.
EmbeddingMatrix l2_normalize(const EmbeddingMatrix& m);

// Mean of the L2-normalized view rows. Not re-normalized.
Eigen::VectorXd mean_pool_normalized(const ViewFeatureSet& v);
Eigen::VectorXd mean_pool_normalized(const Eigen::MatrixXd& rows);

// Feature manifest:
//   {"shapes": {id: {"pretrained": path, "finetuned": path, "label": str,
//                    "depth_tokens": path, "depth_frozen": path, "image": path}},
//    "labels": {label: {"text": path}},
//    "split": {"pretrained": [view...], "finetuned": [view...]}}
// Every field except the "shapes" object is optional; commands check the
// ones they need.
struct ShapeFeatures {
  std::string id;
  std::optional<std::filesystem::path> pretrained;
  std::optional<std::filesystem::path> finetuned;
  std::optional<std::string> label;
  std::optional<std::filesystem::path> depth_tokens;
  std::optional<std::filesystem::path> depth_frozen;
  std::optional<std::filesystem::path> image;
};

struct ViewSplit {
  std::vector<int> pretrained;
  std::vector<int> finetuned;
};

struct FeatureManifest {
  std::vector<ShapeFeatures> shapes;                      // manifest order (sorted by id)
  std::map<std::string, std::filesystem::path> label_text;  // label -> encoded prompts
  std::optional<ViewSplit> split;
};

FeatureManifest load_feature_manifest(const std::filesystem::path& path);

}  // namespace dlign
