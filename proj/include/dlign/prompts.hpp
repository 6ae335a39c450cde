#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dlign/embedstore.hpp"

namespace dlign {

inline constexpr std::size_t kNumTemplates = 80;

// A depth keyword and the photographic medium phrase it replaces in the
// base templates ("photo" -> "depth map", ...).
struct DepthKeyword {
  std::string keyword;
  std::string replaces;
};

const std::vector<std::string>& imagenet_templates();
const std::vector<DepthKeyword>& default_depth_keywords();

struct PromptSet {
  std::vector<std::string> templates;  // exactly 80, one "{}" each
  std::vector<std::string> keywords;

  // Rewrites every base template with the keyword substitutions (first
  // matching substitution wins, at most one per template).
  static PromptSet augment(const std::vector<std::string>& base, const std::vector<DepthKeyword>& keywords);
  static PromptSet default_set();
  // One template per line, "{}" as the slot.
  static PromptSet load(const std::filesystem::path& path);

  void validate() const;
};

std::vector<std::string> generate_prompts(const std::string& label, const PromptSet& ps);

struct LabelTextFeature {
  std::string label;
  Eigen::VectorXd direction;     // unit norm, used for classification
  Eigen::VectorXd literal_mean;  // mean of normalized rows, not re-normalized
};

LabelTextFeature pool_text_features(const EmbeddingMatrix& encoded, const std::string& label);

// Reads a labels file: one label per line, blank lines skipped.
std::vector<std::string> read_labels_file(const std::filesystem::path& path);

// {label: [80 prompts]} in input order.
std::string prompts_json(const std::vector<std::string>& labels, const PromptSet& ps);

void write_templates(const PromptSet& ps, const std::filesystem::path& path);

}  // namespace dlign
