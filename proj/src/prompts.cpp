#include "dlign/prompts.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "dlign/error.hpp"

namespace dlign {
namespace {

std::size_t count_slots(const std::string& t) {
  std::size_t n = 0;
  for (std::size_t pos = t.find("{}"); pos != std::string::npos; pos = t.find("{}", pos + 2)) ++n;
  return n;
}

}  // namespace

const std::vector<std::string>& imagenet_templates() {
  static const std::vector<std::string> kTemplates = {
      "a bad photo of a {}.",
      "a photo of many {}.",
      "a sculpture of a {}.",
      "a photo of the hard to see {}.",
      "a low resolution photo of the {}.",
      "a rendering of a {}.",
      "graffiti of a {}.",
      "a bad photo of the {}.",
      "a cropped photo of the {}.",
      "a tattoo of a {}.",
      "the embroidered {}.",
      "a photo of a hard to see {}.",
      "a bright photo of a {}.",
      "a photo of a clean {}.",
      "a photo of a dirty {}.",
      "a dark photo of the {}.",
      "a drawing of a {}.",
      "a photo of my {}.",
      "the plastic {}.",
      "a photo of the cool {}.",
      "a close-up photo of a {}.",
      "a black and white photo of the {}.",
      "a painting of the {}.",
      "a painting of a {}.",
      "a pixelated photo of the {}.",
      "a sculpture of the {}.",
      "a bright photo of the {}.",
      "a cropped photo of a {}.",
      "a plastic {}.",
      "a photo of the dirty {}.",
      "a jpeg corrupted photo of a {}.",
      "a blurry photo of the {}.",
      "a photo of the {}.",
      "a good photo of the {}.",
      "a rendering of the {}.",
      "a {} in a video game.",
      "a photo of one {}.",
      "a doodle of a {}.",
      "a close-up photo of the {}.",
      "a photo of a {}.",
      "the origami {}.",
      "the {} in a video game.",
      "a sketch of a {}.",
      "a doodle of the {}.",
      "a origami {}.",
      "a low resolution photo of a {}.",
      "the toy {}.",
      "a rendition of the {}.",
      "a photo of the clean {}.",
      "a photo of a large {}.",
      "a rendition of a {}.",
      "a photo of a nice {}.",
      "a photo of a weird {}.",
      "a blurry photo of a {}.",
      "a cartoon {}.",
      "art of a {}.",
      "a sketch of the {}.",
      "a embroidered {}.",
      "a pixelated photo of a {}.",
      "itap of the {}.",
      "a jpeg corrupted photo of the {}.",
      "a good photo of a {}.",
      "a plushie {}.",
      "a photo of the nice {}.",
      "a photo of the small {}.",
      "a photo of the weird {}.",
      "the cartoon {}.",
      "art of the {}.",
      "a drawing of the {}.",
      "a photo of the large {}.",
      "a black and white photo of a {}.",
      "the plushie {}.",
      "a dark photo of a {}.",
      "itap of a {}.",
      "graffiti of the {}.",
      "a toy {}.",
      "itap of my {}.",
      "a photo of a cool {}.",
      "a photo of a small {}.",
      "a tattoo of the {}.",
  };
  return kTemplates;
}

const std::vector<DepthKeyword>& default_depth_keywords() {
  static const std::vector<DepthKeyword> kKeywords = {
      {"depth map", "photo"},
      {"raytraced image", "rendering"},
      {"silhouette of", "sketch of"},
  };
  return kKeywords;
}

PromptSet PromptSet::augment(const std::vector<std::string>& base, const std::vector<DepthKeyword>& keywords) {
  PromptSet ps;
  for (const auto& kw : keywords) ps.keywords.push_back(kw.keyword);
  ps.templates.reserve(base.size());
  for (const std::string& t : base) {
    std::string out = t;
    for (const auto& kw : keywords) {
      const auto pos = out.find(kw.replaces);
      if (pos == std::string::npos) continue;
      out.replace(pos, kw.replaces.size(), kw.keyword);
      break;
    }
    ps.templates.push_back(std::move(out));
  }
  ps.validate();
  return ps;
}

PromptSet PromptSet::default_set() { return augment(imagenet_templates(), default_depth_keywords()); }

PromptSet PromptSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open template file '" + path.string() + "'");
  PromptSet ps;
  for (const auto& kw : default_depth_keywords()) ps.keywords.push_back(kw.keyword);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ps.templates.push_back(line);
  }
  ps.validate();
  return ps;
}

void PromptSet::validate() const {
  if (templates.size() != kNumTemplates) {
    throw ValidationError("prompt set needs exactly 80 templates, got " + std::to_string(templates.size()));
  }
  std::set<std::string> seen;
  for (const auto& t : templates) {
    if (count_slots(t) != 1) throw ValidationError("template '" + t + "' must contain exactly one {} slot");
    if (!seen.insert(t).second) throw ValidationError("duplicate template '" + t + "'");
  }
  if (keywords.empty()) throw ValidationError("prompt set has no depth keywords");
  if (std::set<std::string>(keywords.begin(), keywords.end()).size() != keywords.size()) {
    throw ValidationError("prompt set has duplicate depth keywords");
  }
}

std::vector<std::string> generate_prompts(const std::string& label, const PromptSet& ps) {
  if (label.empty()) throw PreconditionError("generate_prompts: label must be non-empty");
  std::vector<std::string> out;
  out.reserve(ps.templates.size());
  for (const std::string& t : ps.templates) {
    std::string s = t;
    s.replace(s.find("{}"), 2, label);
    out.push_back(std::move(s));
  }
  return out;
}

LabelTextFeature pool_text_features(const EmbeddingMatrix& encoded, const std::string& label) {
  if (encoded.rows() != static_cast<Eigen::Index>(kNumTemplates)) {
    throw PreconditionError("pool_text_features: label '" + label + "' has " + std::to_string(encoded.rows()) +
                            " encoded prompts, expected 80");
  }
  LabelTextFeature f;
  f.label = label;
  f.literal_mean = mean_pool_normalized(encoded.data);
  const double n = f.literal_mean.norm();
  if (n == 0.0) throw PreconditionError("pool_text_features: prompts of '" + label + "' average to zero");
  f.direction = f.literal_mean / n;
  return f;
}

std::vector<std::string> read_labels_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open labels file '" + path.string() + "'");
  std::vector<std::string> labels;
  std::set<std::string> seen;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    std::string label = line.substr(b, e - b + 1);
    if (!seen.insert(label).second) throw ValidationError("duplicate label '" + label + "' in labels file");
    labels.push_back(std::move(label));
  }
  if (labels.empty()) throw ValidationError("labels file '" + path.string() + "' is empty");
  return labels;
}

std::string prompts_json(const std::vector<std::string>& labels, const PromptSet& ps) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::object();
  for (const auto& label : labels) doc[label] = generate_prompts(label, ps);
  return doc.dump(2) + "\n";
}

void write_templates(const PromptSet& ps, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& t : ps.templates) out << t << "\n";
}

}  // namespace dlign
