#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "dlign/cli.hpp"
#include "dlign/error.hpp"
#include "dlign/image_io.hpp"
#include "dlign/parallel.hpp"
#include "dlign/prompts.hpp"

namespace dlign::cli {
namespace {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// Runs a validation step, reclassifying library errors as validation failures.
template <typename F>
auto validated(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError&) {
    throw;
  } catch (const Error& e) {
    throw ValidationError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(e.what());
  }
}

template <typename F>
int guarded(const char* command, std::ostream& log, F&& f) {
  try {
    return f();
  } catch (const ValidationError& e) {
    log << command << ": validation failed: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    log << command << ": failed: " << e.what() << "\n";
    return kExitPartial;
  }
}

void throw_missing(const std::vector<std::string>& missing) {
  if (missing.empty()) return;
  std::string msg = std::to_string(missing.size()) + " required input(s) missing:";
  for (const auto& m : missing) msg += "\n  " + m;
  throw ValidationError(msg);
}

void require_file(const std::optional<fs::path>& p, const std::string& what, std::vector<std::string>& missing) {
  if (!p) {
    missing.push_back(what + ": not set in manifest");
  } else if (!fs::is_regular_file(*p)) {
    missing.push_back(what + ": " + p->string());
  }
}

void require_out_dir(const fs::path& out) {
  if (out.empty()) throw ValidationError("no output directory given");
  if (fs::exists(out) && !fs::is_directory(out)) {
    throw ValidationError("output path '" + out.string() + "' exists and is not a directory");
  }
}

bool safe_component(const std::string& id) {
  return !id.empty() && id != "." && id != ".." && id.find_first_of("/\\") == std::string::npos;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw Error("short write to '" + path.string() + "'");
}

Eigen::VectorXd pooled_unit(const EmbeddingMatrix& m, const std::string& what) {
  Eigen::VectorXd v = mean_pool_normalized(m.data);
  const double n = v.norm();
  if (n == 0.0) throw ValidationError(what + ": rows average to zero");
  return v / n;
}

void append_predictions(const std::string& id, const std::vector<RankedLabel>& ranked, int k,
                        std::vector<PredictionRow>& rows) {
  const std::size_t n = std::min(ranked.size(), static_cast<std::size_t>(std::max(k, 1)));
  for (std::size_t r = 0; r < n; ++r) rows.push_back({id, static_cast<int>(r + 1), ranked[r].label, ranked[r].score});
}

struct EncodedShape {
  std::string id;
  EmbeddingMatrix pretrained;
  EmbeddingMatrix finetuned;
  std::optional<std::string> label;
};

// Checks and decodes both encoder files of every shape.
std::vector<EncodedShape> load_encoded_shapes(const FeatureManifest& fm, bool need_label) {
  std::vector<std::string> missing;
  for (const auto& s : fm.shapes) {
    require_file(s.pretrained, "shape '" + s.id + "' " + to_string(EncoderTag::kPretrained) + " features", missing);
    require_file(s.finetuned, "shape '" + s.id + "' " + to_string(EncoderTag::kFinetuned) + " features", missing);
    if (need_label && !s.label) missing.push_back("shape '" + s.id + "': label not set in manifest");
  }
  throw_missing(missing);
  std::vector<EncodedShape> out;
  for (const auto& s : fm.shapes) {
    out.push_back({s.id, validated([&] { return read_embeddings(*s.pretrained); }),
                   validated([&] { return read_embeddings(*s.finetuned); }), s.label});
  }
  if (out.empty()) throw ValidationError("feature manifest lists no shapes");
  return out;
}

}  // namespace

int cmd_project(const RunConfig& cfg, const ProjectArgs& args, std::ostream& log) {
  return guarded("project", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const auto entries = load_dataset_manifest(args.manifest);
    std::vector<std::string> missing;
    for (const auto& e : entries) {
      if (!safe_component(e.id)) missing.push_back("shape id '" + e.id + "' is not a valid directory name");
      if (!fs::is_regular_file(e.pointcloud)) missing.push_back("shape '" + e.id + "': " + e.pointcloud.string());
    }
    throw_missing(missing);
    const auto poses =
        make_view_set(cfg.views.n_views, cfg.views.azimuth_start_deg, cfg.views.azimuth_step_deg, cfg.views.elevation_deg);

    fs::create_directories(args.out);
    write_run_manifest(args.out, "project", cfg, {{"manifest", args.manifest.string()}, {"shapes", entries.size()}});

    const std::size_t n = entries.size();
    std::vector<PointCloud> clouds(n);
    std::vector<std::string> errors(n);
    parallel_for(n, args.jobs, [&](std::size_t i) {
      try {
        const auto& e = entries[i];
        PointCloud pc = load_point_cloud(e.pointcloud, detect_point_format(e.pointcloud));
        if (cfg.max_points > 0 && pc.points.size() > cfg.max_points) {
          pc = uniform_downsample(pc, cfg.max_points, cfg.seed ^ fnv1a(e.id));
        }
        pc = normalize_unit_cube(pc);
        pc.id = e.id;
        pc.metadata = e.metadata;
        clouds[i] = std::move(pc);
      } catch (const std::exception& ex) {
        errors[i] = ex.what();
      }
    });

    std::vector<std::pair<std::size_t, std::size_t>> tasks;
    for (std::size_t i = 0; i < n; ++i) {
      if (!errors[i].empty()) continue;
      fs::create_directories(args.out / entries[i].id);
      for (std::size_t v = 0; v < poses.size(); ++v) tasks.emplace_back(i, v);
    }
    std::vector<std::string> task_errors(tasks.size());
    parallel_for(tasks.size(), args.jobs, [&](std::size_t t) {
      const auto [i, v] = tasks[t];
      try {
        const fs::path dir = args.out / entries[i].id;
        const DepthMap d = project_view(clouds[i], poses[v], cfg.projection);
        write_depth_png(d, dir / depth_png_name(poses[v].index));
        write_control_png(export_control_image(d), dir / control_png_name(poses[v].index));
      } catch (const std::exception& ex) {
        task_errors[t] = "view " + std::to_string(poses[v].index) + ": " + ex.what();
      }
    });
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      auto& err = errors[tasks[t].first];
      if (!task_errors[t].empty() && err.empty()) err = task_errors[t];
    }

    ojson failures = ojson::array();
    for (std::size_t i = 0; i < n; ++i) {
      if (errors[i].empty()) {
        try {
          export_generation_manifest(clouds[i], poses, args.out / entries[i].id, cfg.seed);
        } catch (const std::exception& ex) {
          errors[i] = ex.what();
        }
      }
      if (errors[i].empty()) {
        log << "project: " << entries[i].id << ": " << poses.size() << " views\n";
      } else {
        log << "project: " << entries[i].id << ": FAILED: " << errors[i] << "\n";
        failures.push_back({{"shape_id", entries[i].id}, {"pointcloud", entries[i].pointcloud.string()},
                            {"error", errors[i]}});
      }
    }
    const std::size_t failed = failures.size();
    log << "project: " << (n - failed) << "/" << n << " shapes complete, " << failed << " failed\n";
    const fs::path report = args.out / kFailuresName;
    if (failed > 0) {
      write_text(report, ojson{{"failures", failures}}.dump(2) + "\n");
      return static_cast<int>(kExitPartial);
    }
    fs::remove(report);
    return static_cast<int>(kExitOk);
  });
}

int cmd_prompts(const RunConfig& cfg, const PromptsArgs& args, std::ostream& log) {
  return guarded("prompts", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const auto labels = validated([&] { return read_labels_file(args.labels); });
    const PromptSet ps = validated([&] {
      PromptSet p = args.templates ? PromptSet::load(*args.templates) : PromptSet::default_set();
      p.validate();
      return p;
    });
    const std::string doc = prompts_json(labels, ps);
    fs::create_directories(args.out);
    write_run_manifest(args.out, "prompts", cfg,
                       {{"labels", args.labels.string()},
                        {"templates", args.templates ? args.templates->string() : std::string("<builtin>")}});
    write_text(args.out / kPromptsName, doc);
    log << "prompts: " << labels.size() << " labels x " << ps.templates.size() << " templates\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_align(const RunConfig& cfg, const AlignArgs& args, std::ostream& log) {
  return guarded("align", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const FeatureManifest fm = load_feature_manifest(args.features);
    std::vector<std::string> missing;
    for (const auto& s : fm.shapes) {
      require_file(s.depth_tokens, "shape '" + s.id + "' depth tokens", missing);
      require_file(s.depth_frozen, "shape '" + s.id + "' frozen depth features", missing);
      require_file(s.image, "shape '" + s.id + "' image features", missing);
    }
    if (args.init && !fs::is_regular_file(*args.init)) missing.push_back("initial checkpoint: " + args.init->string());
    throw_missing(missing);
    const auto samples = validated([&] { return load_align_dataset(fm); });
    std::optional<AlignHead> init;
    if (args.init) init = validated([&] { return read_checkpoint(*args.init); });

    const TrainResult res = init ? train_align(samples, cfg.train, *init) : train_align(samples, cfg.train);
    fs::create_directories(args.out);
    write_run_manifest(args.out, "align", cfg,
                       {{"features", args.features.string()},
                        {"init", args.init ? args.init->string() : std::string("<seeded>")},
                        {"samples", samples.size()}});
    write_checkpoint(res.head, args.out / kCheckpointName);
    write_loss_csv(res.curve, args.out / kLossCsvName);
    log << "align: " << samples.size() << " samples, " << res.curve.size() << " steps";
    if (!res.curve.empty()) log << ", final loss " << res.curve.back().total;
    log << ", tau " << res.head.tau() << "\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_classify_zs(const RunConfig& cfg, const ZeroShotArgs& args, std::ostream& log) {
  return guarded("classify-zs", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const FeatureManifest fm = load_feature_manifest(args.features);
    if (fm.label_text.empty()) throw ValidationError("feature manifest lists no labels");
    std::vector<std::string> missing;
    for (const auto& [label, path] : fm.label_text) require_file(path, "label '" + label + "' text features", missing);
    std::vector<EncodedShape> shapes;
    try {
      shapes = load_encoded_shapes(fm, false);
    } catch (const ValidationError& e) {
      missing.push_back(e.what());
    }
    throw_missing(missing);
    std::vector<LabelTextFeature> feats;
    for (const auto& [label, path] : fm.label_text) {
      feats.push_back(validated([&] { return pool_text_features(read_embeddings(path), label); }));
    }
    const LabelBank bank = validated([&] { return LabelBank::from_features(feats); });

    std::vector<PredictionRow> rows;
    for (const auto& s : shapes) {
      try {
        const auto res = zeroshot_classify(s.pretrained, s.finetuned, bank, args.top_k, fm.split);
        append_predictions(s.id, res.ranked, args.top_k, rows);
      } catch (const Error& e) {
        throw Error("shape '" + s.id + "': " + e.what());
      }
    }
    fs::create_directories(args.out);
    write_run_manifest(args.out, "classify-zs", cfg,
                       {{"features", args.features.string()}, {"top_k", args.top_k}, {"labels", bank.names.size()}});
    write_predictions_csv(rows, args.out / kPredictionsName);
    log << "classify-zs: " << shapes.size() << " shapes, " << bank.names.size() << " labels\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_classify_fs(const RunConfig& cfg, const FewShotArgs& args, std::ostream& log) {
  return guarded("classify-fs", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const FeatureManifest support_m = load_feature_manifest(args.support);
    const FeatureManifest query_m = load_feature_manifest(args.query);
    const auto support = load_encoded_shapes(support_m, true);
    const auto query = load_encoded_shapes(query_m, false);

    std::set<std::string> label_set;
    for (const auto& s : support) label_set.insert(*s.label);
    const std::vector<std::string> classes(label_set.begin(), label_set.end());
    if (classes.size() < 2) throw ValidationError("support set needs at least two labels");
    std::map<std::string, int> class_index;
    for (std::size_t c = 0; c < classes.size(); ++c) class_index[classes[c]] = static_cast<int>(c);

    // Every view of every encoder state is one training sample.
    std::vector<Eigen::MatrixXd> blocks;
    std::vector<int> labels;
    Eigen::Index rows_total = 0;
    for (const auto& s : support) {
      for (const EmbeddingMatrix* m : {&s.pretrained, &s.finetuned}) {
        blocks.push_back(validated([&] { return l2_normalize(*m).data; }));
        labels.insert(labels.end(), static_cast<std::size_t>(m->rows()), class_index[*s.label]);
        rows_total += m->rows();
      }
    }
    const Eigen::Index d = blocks.front().cols();
    Eigen::MatrixXd features(rows_total, d);
    Eigen::Index at = 0;
    for (const auto& b : blocks) {
      if (b.cols() != d) throw ValidationError("support features have inconsistent dimensions");
      features.middleRows(at, b.rows()) = b;
      at += b.rows();
    }
    const LogRegModel model = fit_logreg(features, labels, static_cast<int>(classes.size()), cfg.probe);

    std::vector<PredictionRow> rows;
    for (const auto& q : query) {
      try {
        const std::vector<Eigen::MatrixXd> views = {l2_normalize(q.pretrained).data, l2_normalize(q.finetuned).data};
        append_predictions(q.id, fewshot_classify(model, views, classes), args.top_k, rows);
      } catch (const Error& e) {
        throw Error("shape '" + q.id + "': " + e.what());
      }
    }
    fs::create_directories(args.out);
    write_run_manifest(args.out, "classify-fs", cfg,
                       {{"support", args.support.string()},
                        {"query", args.query.string()},
                        {"top_k", args.top_k},
                        {"support_samples", rows_total}});
    write_predictions_csv(rows, args.out / kPredictionsName);
    log << "classify-fs: " << support.size() << " support shapes (" << rows_total << " views), " << query.size()
        << " queries, final probe loss " << model.loss_history.back() << "\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_retrieve(const RunConfig& cfg, const RetrieveArgs& args, std::ostream& log) {
  return guarded("retrieve", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    if (!args.query_image && !args.query_text) throw ValidationError("give --query-image, --query-text, or both");
    if (args.top_k < 1) throw ValidationError("--top-k must be positive");
    std::vector<std::string> missing;
    if (args.query_image) require_file(args.query_image, "query image features", missing);
    if (args.query_text) require_file(args.query_text, "query text features", missing);
    const FeatureManifest fm = load_feature_manifest(args.index);
    std::vector<EncodedShape> shapes;
    try {
      shapes = load_encoded_shapes(fm, false);
    } catch (const ValidationError& e) {
      missing.push_back(e.what());
    }
    throw_missing(missing);

    std::vector<std::string> ids;
    Eigen::MatrixXd vectors;
    for (const auto& s : shapes) {
      const Eigen::VectorXd v = validated([&] { return shape_embedding(s.pretrained, s.finetuned); });
      if (vectors.size() == 0) vectors.resize(static_cast<Eigen::Index>(shapes.size()), v.size());
      if (v.size() != vectors.cols()) throw ValidationError("shape '" + s.id + "' has a different feature dimension");
      vectors.row(static_cast<Eigen::Index>(ids.size())) = v.transpose();
      ids.push_back(s.id);
    }
    const RetrievalIndex index(std::move(ids), std::move(vectors));
    std::optional<Eigen::VectorXd> qi, qt;
    if (args.query_image) qi = validated([&] { return pooled_unit(read_embeddings(*args.query_image), "query image"); });
    if (args.query_text) qt = validated([&] { return pooled_unit(read_embeddings(*args.query_text), "query text"); });

    const int k = std::min(args.top_k, index.size());
    const auto hits = qi && qt ? knn_retrieve(index, *qi, *qt, k) : knn_retrieve(index, qi ? *qi : *qt, k);
    std::string query_id = args.query_id;
    if (query_id.empty()) query_id = (args.query_image ? *args.query_image : *args.query_text).stem().string();
    ojson line;
    line["query_id"] = query_id;
    line["hits"] = ojson::array();
    for (const auto& h : hits) line["hits"].push_back({{"id", h.id}, {"cosine", h.cosine}});

    fs::create_directories(args.out);
    write_run_manifest(args.out, "retrieve", cfg,
                       {{"index", args.index.string()},
                        {"query_image", args.query_image ? args.query_image->string() : std::string()},
                        {"query_text", args.query_text ? args.query_text->string() : std::string()},
                        {"top_k", k}});
    write_text(args.out / kRetrievalName, line.dump() + "\n");
    log << "retrieve: " << query_id << ": top hit " << hits.front().id << " (cosine " << hits.front().cosine << ")\n";
    return static_cast<int>(kExitOk);
  });
}

int cmd_eval(const RunConfig& cfg, const EvalArgs& args, std::ostream& log) {
  return guarded("eval", log, [&] {
    cfg.validate();
    require_out_dir(args.out);
    const auto rows = read_predictions_csv(args.predictions);
    if (rows.empty()) throw ValidationError("prediction CSV has no rows");

    std::ifstream in(args.truth);
    if (!in) throw ValidationError("cannot open truth manifest '" + args.truth.string() + "'");
    const nlohmann::json truth_doc = validated([&] { return nlohmann::json::parse(in); });
    if (!truth_doc.is_object() || !truth_doc.contains("shapes") || !truth_doc["shapes"].is_object()) {
      throw ValidationError("truth manifest needs a \"shapes\" object");
    }
    const auto& truth_shapes = truth_doc["shapes"];

    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<int, std::string>>> by_shape;
    for (const auto& r : rows) {
      auto [it, inserted] = by_shape.try_emplace(r.shape_id);
      if (inserted) order.push_back(r.shape_id);
      it->second.emplace_back(r.rank, r.label);
    }
    std::vector<std::string> problems;
    std::vector<std::vector<std::string>> predictions;
    std::vector<std::string> truths;
    for (const auto& id : order) {
      if (!truth_shapes.contains(id)) {
        problems.push_back("shape '" + id + "' is not in the truth manifest");
        continue;
      }
      const auto& spec = truth_shapes[id];
      if (!spec.is_object() || !spec.contains("label") || !spec["label"].is_string()) {
        problems.push_back("shape '" + id + "' has no truth label");
        continue;
      }
      auto ranked = by_shape[id];
      std::sort(ranked.begin(), ranked.end());
      for (std::size_t r = 0; r < ranked.size(); ++r) {
        if (ranked[r].first != static_cast<int>(r + 1)) {
          problems.push_back("shape '" + id + "' has ranks that are not 1..n");
          break;
        }
      }
      std::vector<std::string> labels;
      for (const auto& p : ranked) labels.push_back(p.second);
      predictions.push_back(std::move(labels));
      truths.push_back(spec["label"].get<std::string>());
    }
    if (!problems.empty()) {
      std::string msg = "prediction CSV does not match the truth manifest:";
      for (const auto& p : problems) msg += "\n  " + p;
      throw ValidationError(msg);
    }
    const auto acc = topk_accuracy(predictions, truths);
    ojson metrics;
    metrics["top1"] = acc[0];
    metrics["top3"] = acc[1];
    metrics["top5"] = acc[2];
    metrics["n_shapes"] = truths.size();
    fs::create_directories(args.out);
    write_run_manifest(args.out, "eval", cfg,
                       {{"predictions", args.predictions.string()}, {"truth", args.truth.string()}});
    write_text(args.out / kMetricsName, metrics.dump(2) + "\n");
    log << "eval: " << truths.size() << " shapes, top1 " << acc[0] << ", top3 " << acc[1] << ", top5 " << acc[2]
        << "\n";
    return static_cast<int>(kExitOk);
  });
}

}  // namespace dlign::cli
