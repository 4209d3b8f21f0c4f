#pragma once

// Stage orchestration for the command-line tool. Every stage reads and writes
// artifacts under a run directory so later stages can be re-run on their own:
//
//   preprocessed/            residual PNGs, FOV masks, preprocessed.csv
//   basic.ckpt final.ckpt    trained networks
//   maps_basic/ maps_final/  probability maps (.pmap + .valid.png)
//   candidates.csv           extracted candidates, evaluated_images.txt
//   froc.csv operating_points.csv report.txt
//   manifest_<stage>.json    config echo, seed, input and output digests
//
// `pipeline` runs the stages fold by fold (fold<k>/ holds per-fold artifacts)
// and pools the held-out candidates.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "macnn/checkpoint.hpp"
#include "macnn/config.hpp"
#include "macnn/digest.hpp"
#include "macnn/evaluation.hpp"
#include "macnn/inference.hpp"
#include "macnn/postprocess.hpp"
#include "macnn/preprocess.hpp"
#include "macnn/synthetic.hpp"
#include "macnn/trainer.hpp"

namespace macnn {

inline constexpr const char* kToolVersion = "1.0.0";

inline std::string version_text() {
  return std::string("macnn ") + kToolVersion +
         " (checkpoint MACNN1, pmap 1, candidates csv 1, preprocessed png16 1)";
}

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names = {"gen-synthetic", "preprocess", "train-basic", "infer-basic",
                                                 "train-final",   "infer",      "postprocess", "evaluate",
                                                 "froc-report",   "pipeline"};
  return names;
}

struct RunContext {
  RunConfig config;
  std::filesystem::path config_path;
  std::filesystem::path data;       // dataset directory (images/ + annotations.csv)
  std::filesystem::path out;        // run directory
  std::filesystem::path prob_maps;  // optional override of the maps a stage reads
  std::size_t threads = 1;
  std::optional<std::size_t> fold;  // hold out this fold in train/infer stages
  bool quiet = false;
};

// ---------------------------------------------------------------------------
// Manifests

class Manifest {
 public:
  Manifest(std::string stage, const RunContext& ctx) : stage_(std::move(stage)), ctx_(ctx) {
    started_ = std::chrono::steady_clock::now();
  }

  void input(const std::filesystem::path& p) { add(inputs_, p); }
  void output(const std::filesystem::path& p) { add(outputs_, p); }
  void note(const std::string& key, nlohmann::json value) { notes_[key] = std::move(value); }

  void write(const std::filesystem::path& dir) const {
    nlohmann::ordered_json j;
    j["tool"] = "macnn";
    j["version"] = kToolVersion;
    j["formats"] = {{"checkpoint", "MACNN1"}, {"pmap", 1}, {"candidates_csv", 1}, {"preprocessed_png16", 1}};
    j["stage"] = stage_;
    j["seed"] = ctx_.config.seed;
    j["threads"] = ctx_.threads;
    j["fold"] = ctx_.fold ? nlohmann::json(*ctx_.fold) : nlohmann::json(nullptr);
    nlohmann::ordered_json cfg;
    for (const auto& [k, v] : config_echo(ctx_.config)) cfg[k] = v;
    j["config"] = cfg;
    j["config_file"] = ctx_.config_path.string();
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    if (!notes_.empty()) j["notes"] = notes_;
    j["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
    std::filesystem::create_directories(dir);
    const auto path = dir / ("manifest_" + stage_ + ".json");
    std::ofstream out(path);
    if (!out) fail(ErrorKind::io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
  }

 private:
  static void add(nlohmann::ordered_json& list, const std::filesystem::path& p) {
    if (std::filesystem::is_directory(p)) {
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) list.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}});
    } else if (std::filesystem::exists(p)) {
      list.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
    }
  }

  std::string stage_;
  const RunContext& ctx_;
  std::chrono::steady_clock::time_point started_;
  nlohmann::ordered_json inputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json outputs_ = nlohmann::ordered_json::array();
  nlohmann::ordered_json notes_ = nlohmann::ordered_json::object();
};

// ---------------------------------------------------------------------------
// Preprocessed artifacts: residuals as 16-bit RGB PNG, round((v + 1) / 2 * 65535)

inline std::uint16_t encode_residual(real_t v) {
  return static_cast<std::uint16_t>(std::lround((std::clamp<real_t>(v, -1, 1) + 1) / 2 * 65535));
}

inline real_t decode_residual(std::uint16_t s) { return real_t(s) / 65535 * 2 - 1; }

inline void save_preprocessed(const std::filesystem::path& dir, const std::vector<PreprocessedImage>& images) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "preprocessed.csv");
  if (!csv) fail(ErrorKind::io, "cannot write " + (dir / "preprocessed.csv").string());
  csv << "image_id,width,height,residual,fov\n";
  for (const auto& im : images) {
    RawImage raw{im.width(), im.height(), 3, 16, {}};
    raw.samples.resize(im.width() * im.height() * 3);
    for (std::size_t y = 0; y < im.height(); ++y)
      for (std::size_t x = 0; x < im.width(); ++x)
        for (std::size_t c = 0; c < 3; ++c)
          raw.samples[(y * im.width() + x) * 3 + c] = encode_residual(im.residual(c, y, x));
    write_png(dir / (im.image_id + ".residual.png"), raw);
    save_mask(dir / (im.image_id + ".fov.png"), im.fov_mask);
    csv << im.image_id << ',' << im.width() << ',' << im.height() << ',' << im.image_id << ".residual.png,"
        << im.image_id << ".fov.png\n";
  }
  if (!csv) fail(ErrorKind::io, "write failed: " + (dir / "preprocessed.csv").string());
}

inline std::vector<PreprocessedImage> load_preprocessed(const std::filesystem::path& dir, std::size_t threads = 1) {
  const auto csv_path = dir / "preprocessed.csv";
  std::ifstream csv(csv_path);
  if (!csv) fail(ErrorKind::pipeline_order, "no preprocessed images in '" + dir.string() + "'; run preprocess first");
  std::string line;
  if (!std::getline(csv, line) || line != "image_id,width,height,residual,fov") {
    fail(ErrorKind::format, csv_path.string() + ": unexpected header");
  }
  std::vector<std::vector<std::string>> rows;
  for (std::size_t lineno = 2; std::getline(csv, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 5) fail(ErrorKind::format, csv_path.string() + ":" + std::to_string(lineno) + ": expected 5 fields");
    rows.push_back(std::move(f));
  }
  std::vector<PreprocessedImage> images(rows.size());
  parallel_for(rows.size(), threads, [&](std::size_t i) {
    const auto& f = rows[i];
    const RawImage raw = read_png(dir / f[3]);
    if (raw.channels != 3 || raw.bit_depth != 16) fail(ErrorKind::format, f[3] + ": expected a 16-bit RGB PNG");
    if (std::to_string(raw.width) != f[1] || std::to_string(raw.height) != f[2]) {
      fail(ErrorKind::format, f[3] + ": size disagrees with preprocessed.csv");
    }
    PreprocessedImage im{f[0], Tensor({3, raw.height, raw.width}), load_mask(dir / f[4])};
    for (std::size_t y = 0; y < raw.height; ++y)
      for (std::size_t x = 0; x < raw.width; ++x)
        for (std::size_t c = 0; c < 3; ++c) im.residual(c, y, x) = decode_residual(raw.samples[(y * raw.width + x) * 3 + c]);
    if (im.fov_mask.width() != raw.width || im.fov_mask.height() != raw.height) {
      fail(ErrorKind::format, f[4] + ": FOV mask size disagrees with the residual");
    }
    images[i] = std::move(im);
  });
  return images;
}

// ---------------------------------------------------------------------------
// Helpers

namespace detail {

struct RunPaths {
  std::filesystem::path preprocessed, basic_ckpt, maps_basic, final_ckpt, maps_final;

  static RunPaths under(const std::filesystem::path& out, const std::filesystem::path& shared_pre = {}) {
    return {shared_pre.empty() ? out / "preprocessed" : shared_pre, out / "basic.ckpt", out / "maps_basic",
            out / "final.ckpt", out / "maps_final"};
  }
};

inline void log(const RunContext& ctx, const std::string& msg) {
  if (!ctx.quiet) std::cerr << "macnn: " << msg << std::endl;
}

inline void require_dir(const std::filesystem::path& p, const char* what) {
  if (p.empty()) fail(ErrorKind::usage, std::string("this subcommand needs ") + what);
}

inline std::vector<AnnotationSet> load_truths(const RunContext& ctx, const std::vector<PreprocessedImage>& images) {
  require_dir(ctx.data, "--data");
  std::map<std::string, AnnotationSet> by_id;
  const auto csv = ctx.data / "annotations.csv";
  if (std::filesystem::exists(csv))
    for (auto& set : load_annotations(csv)) by_id[set.image_id] = std::move(set);
  std::vector<AnnotationSet> truths;
  for (const auto& im : images) {
    auto it = by_id.find(im.image_id);
    truths.push_back(it == by_id.end() ? AnnotationSet{im.image_id, {}} : it->second);
  }
  return truths;
}

inline std::vector<std::size_t> fold_assignment(const RunContext& ctx, std::size_t n) {
  return assign_folds(n, ctx.config.folds, ctx.config.seed);
}

/// Indices of the images a stage trains on (all, or all outside the held-out fold).
inline std::vector<std::size_t> training_indices(const RunContext& ctx, std::size_t n) {
  std::vector<std::size_t> idx;
  if (!ctx.fold) {
    for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
    return idx;
  }
  if (*ctx.fold >= ctx.config.folds) fail(ErrorKind::usage, "--fold must be below folds");
  const auto folds = fold_assignment(ctx, n);
  for (std::size_t i = 0; i < n; ++i)
    if (folds[i] != *ctx.fold) idx.push_back(i);
  return idx;
}

inline std::vector<std::size_t> test_indices(const RunContext& ctx, std::size_t n) {
  std::vector<std::size_t> idx;
  const auto folds = ctx.fold ? fold_assignment(ctx, n) : std::vector<std::size_t>{};
  for (std::size_t i = 0; i < n; ++i)
    if (!ctx.fold || folds[i] == *ctx.fold) idx.push_back(i);
  return idx;
}

template <class T>
std::vector<T> pick(const std::vector<T>& all, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

inline Checkpoint require_checkpoint(const std::filesystem::path& p, const NetworkSpec& spec, const char* stage) {
  if (!std::filesystem::exists(p)) {
    fail(ErrorKind::pipeline_order, "missing " + p.string() + "; run " + stage + " first");
  }
  return load_checkpoint(p, spec);
}

inline ProbabilityMap require_map(const std::filesystem::path& dir, const std::string& id, const char* stage) {
  if (!std::filesystem::exists(dir / (id + ".pmap"))) {
    fail(ErrorKind::pipeline_order, "missing map for '" + id + "' in " + dir.string() + "; run " + stage + " first");
  }
  return load_probability_map(dir, id);
}

inline std::vector<std::string> read_lines(const std::filesystem::path& p, const char* stage) {
  std::ifstream in(p);
  if (!in) fail(ErrorKind::pipeline_order, "missing " + p.string() + "; run " + stage + " first");
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorKind::io, "cannot write " + p.string());
  out << text;
  if (!out) fail(ErrorKind::io, "write failed: " + p.string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

inline void stage_gen_synthetic(const RunContext& ctx, Manifest& m) {
  detail::require_dir(ctx.out, "--out");
  SyntheticConfig syn = ctx.config.synth;
  syn.seed = ctx.config.seed;
  const Dataset data = generate_synthetic(syn);
  save_dataset(ctx.out, data);
  m.output(ctx.out / "images");
  m.output(ctx.out / "annotations.csv");
  std::size_t lesions = 0;
  for (const auto& a : data.annotations) lesions += a.centroids.size();
  m.note("images", data.images.size());
  m.note("lesions", lesions);
  detail::log(ctx, "generated " + std::to_string(data.images.size()) + " images with " + std::to_string(lesions) +
                       " lesions");
}

inline void stage_preprocess(const RunContext& ctx, const detail::RunPaths& paths, Manifest& m) {
  detail::require_dir(ctx.data, "--data");
  const Dataset data = load_dataset(ctx.data, ctx.config.fov_threshold);
  m.input(ctx.data / "images");
  std::vector<PreprocessedImage> out(data.images.size());
  parallel_for(data.images.size(), ctx.threads,
               [&](std::size_t i) { out[i] = preprocess(data.images[i], ctx.config.median_kernel, 1); });
  save_preprocessed(paths.preprocessed, out);
  m.output(paths.preprocessed);
  detail::log(ctx, "preprocessed " + std::to_string(out.size()) + " images");
}

inline NetworkSpec stage_spec(const RunConfig& cfg, Stage stage) {
  return stage == Stage::basic ? build_basic_spec(cfg.model) : build_final_spec(cfg.model);
}

inline void stage_train(const RunContext& ctx, const detail::RunPaths& paths, Stage stage, Manifest& m) {
  const TrainConfig tc = train_config(ctx.config, stage, ctx.threads);
  const auto all = load_preprocessed(paths.preprocessed, ctx.threads);
  m.input(paths.preprocessed);
  const auto truths_all = detail::load_truths(ctx, all);
  m.input(ctx.data / "annotations.csv");
  const auto idx = detail::training_indices(ctx, all.size());
  const auto images = detail::pick(all, idx);
  const auto truths = detail::pick(truths_all, idx);

  std::vector<ProbabilityMap> maps;
  if (stage == Stage::final) {
    const auto dir = ctx.prob_maps.empty() ? paths.maps_basic : ctx.prob_maps;
    for (const auto& im : images) maps.push_back(detail::require_map(dir, im.image_id, "infer-basic"));
    m.input(dir);
  }
  const char* name = stage == Stage::basic ? "basic" : "final";
  const auto [ckpt, report] =
      train(stage_spec(ctx.config, stage), images, truths, tc, stage, stage == Stage::final ? &maps : nullptr,
            [&](const Checkpoint& c, const TrainReport& r) {
              detail::log(ctx, std::string(name) + " epoch " + std::to_string(c.meta.epoch) + "/" +
                                   std::to_string(tc.epochs) + " loss " + detail::format_score(real_t(r.loss.back())) +
                                   " acc " + detail::format_score(real_t(r.accuracy.back())));
              return true;
            });
  const auto path = stage == Stage::basic ? paths.basic_ckpt : paths.final_ckpt;
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(path, ckpt);
  m.output(path);
  m.note("training_images", images.size());
  m.note("loss_history", report.loss);
  m.note("accuracy_history", report.accuracy);
}

inline void stage_infer(const RunContext& ctx, const detail::RunPaths& paths, Stage stage, Manifest& m) {
  const auto all = load_preprocessed(paths.preprocessed, ctx.threads);
  m.input(paths.preprocessed);
  const auto ckpt_path = stage == Stage::basic ? paths.basic_ckpt : paths.final_ckpt;
  const Checkpoint ckpt =
      detail::require_checkpoint(ckpt_path, stage_spec(ctx.config, stage), stage == Stage::basic ? "train-basic" : "train-final");
  m.input(ckpt_path);
  // Basic maps feed stage-2 sampling on the training images and the cascade on
  // the test images, so infer-basic scores every image.
  std::vector<std::size_t> idx(all.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (stage == Stage::final) idx = detail::test_indices(ctx, all.size());
  const auto out_dir = stage == Stage::basic ? paths.maps_basic : paths.maps_final;
  const auto basic_dir = ctx.prob_maps.empty() ? paths.maps_basic : ctx.prob_maps;
  const InferOptions opt = infer_options(ctx.config, ctx.threads);
  for (std::size_t i : idx) {
    ProbabilityMap map = infer_map(ckpt, all[i], opt);
    if (stage == Stage::final && ctx.config.infer_cascade) {
      const auto basic = detail::require_map(basic_dir, all[i].image_id, "infer-basic");
      m.input(basic_dir / (all[i].image_id + ".pmap"));
      map = cascade(map, basic, ctx.config.stage2_threshold);
    }
    save_probability_map(out_dir, map);
  }
  m.output(out_dir);
  detail::log(ctx, std::string("inferred ") + std::to_string(idx.size()) + (stage == Stage::basic ? " basic" : " final") +
                       " maps");
}

inline std::vector<Candidate> candidates_for(const RunContext& ctx, const std::filesystem::path& maps_dir,
                                             const std::vector<std::string>& ids) {
  std::vector<std::vector<Candidate>> per(ids.size());
  parallel_for(ids.size(), ctx.threads, [&](std::size_t i) {
    const ProbabilityMap map = detail::require_map(maps_dir, ids[i], "infer");
    per[i] = postprocess(map, ctx.config.post_radius, ctx.config.nms_radius, ctx.config.post_floor);
  });
  std::vector<Candidate> out;
  for (auto& c : per) out.insert(out.end(), c.begin(), c.end());
  return out;
}

inline std::vector<std::string> map_ids(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(ErrorKind::pipeline_order, "no maps in " + dir.string() + "; run infer first");
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".pmap") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  if (ids.empty()) fail(ErrorKind::pipeline_order, "no maps in " + dir.string() + "; run infer first");
  return ids;
}

inline void write_candidate_outputs(const std::filesystem::path& out, const std::vector<Candidate>& candidates,
                                    const std::vector<std::string>& ids, Manifest& m) {
  std::filesystem::create_directories(out);
  save_candidates(out / "candidates.csv", candidates);
  std::string list;
  for (const auto& id : ids) list += id + "\n";
  detail::write_text(out / "evaluated_images.txt", list);
  m.output(out / "candidates.csv");
  m.output(out / "evaluated_images.txt");
}

inline void stage_postprocess(const RunContext& ctx, const detail::RunPaths& paths, Manifest& m) {
  const auto dir = ctx.prob_maps.empty() ? paths.maps_final : ctx.prob_maps;
  const auto ids = map_ids(dir);
  m.input(dir);
  const auto candidates = candidates_for(ctx, dir, ids);
  write_candidate_outputs(ctx.out, candidates, ids, m);
  detail::log(ctx, std::to_string(candidates.size()) + " candidates from " + std::to_string(ids.size()) + " maps");
}

inline std::vector<ImageResult> image_results(const std::vector<Candidate>& candidates,
                                              const std::vector<std::string>& ids,
                                              const std::vector<AnnotationSet>& truths) {
  std::map<std::string, std::size_t> slot;
  std::vector<ImageResult> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) slot[ids[i]] = i;
  for (const auto& t : truths)
    if (auto it = slot.find(t.image_id); it != slot.end()) out[it->second].centroids = t.centroids;
  for (const auto& c : candidates) {
    const auto it = slot.find(c.image_id);
    if (it == slot.end()) fail(ErrorKind::validation, "candidate for image '" + c.image_id + "' that was not evaluated");
    out[it->second].candidates.push_back(c);
  }
  return out;
}

/// Parses `threshold,avg_fp_per_image,sensitivity`.
inline FrocCurve load_froc_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::pipeline_order, "missing " + path.string() + "; run evaluate first");
  std::string line;
  if (!std::getline(in, line) || line != "threshold,avg_fp_per_image,sensitivity") {
    fail(ErrorKind::format, path.string() + ": unexpected FROC header");
  }
  FrocCurve curve;
  for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    double v[3];
    std::stringstream ss(line);
    std::string cell;
    for (double& x : v) {
      if (!std::getline(ss, cell, ',') || !detail::parse_number(std::string_view(cell), x)) {
        fail(ErrorKind::parse, path.string() + ":" + std::to_string(lineno) + ": bad FROC row");
      }
    }
    curve.points.push_back({v[0], v[1], v[2]});
  }
  if (curve.points.empty()) fail(ErrorKind::format, path.string() + ": empty FROC curve");
  return curve;
}

inline std::string froc_report_text(const FrocCurve& curve, const std::string& label) {
  std::ostringstream out;
  out << std::left << std::setw(26) << "method" << std::setw(13) << "dataset";
  for (double r : kCpmRates) out << std::setw(7) << detail::format_real(real_t(r));
  out << "cpm\n";
  auto row = [&](const std::string& method, const std::string& dataset, const std::optional<std::array<double, 7>>& s,
                 std::optional<double> score) {
    out << std::setw(26) << method << std::setw(13) << dataset;
    char buf[32];
    for (std::size_t i = 0; i < 7; ++i) {
      if (s) std::snprintf(buf, sizeof buf, "%.2f", (*s)[i]);
      out << std::setw(7) << (s ? buf : "-");
    }
    if (score) std::snprintf(buf, sizeof buf, "%.3f", *score);
    out << (score ? buf : "-") << '\n';
  };
  const auto sens = operating_points(curve);
  row(label, "this run", sens, cpm(sens));
  for (const auto& t : reference_tables()) row(t.method, t.dataset, t.sensitivities, t.cpm);
  return out.str();
}

inline void stage_froc_report(const RunContext& ctx, Manifest& m) {
  const auto froc_path = ctx.out / "froc.csv";
  const FrocCurve curve = load_froc_csv(froc_path);
  m.input(froc_path);
  std::ostringstream op;
  write_operating_points_csv(op, curve);
  detail::write_text(ctx.out / "operating_points.csv", op.str());
  const std::string report = froc_report_text(curve, "macnn");
  detail::write_text(ctx.out / "report.txt", report);
  m.output(ctx.out / "operating_points.csv");
  m.output(ctx.out / "report.txt");
  m.note("cpm", cpm(curve));
  m.note("max_sensitivity_at_8fp", max_sensitivity_within(curve, 8));
  if (!ctx.quiet) std::cout << report;
}

inline FrocCurve stage_evaluate(const RunContext& ctx, Manifest& m) {
  const auto ids = detail::read_lines(ctx.out / "evaluated_images.txt", "postprocess");
  if (!std::filesystem::exists(ctx.out / "candidates.csv")) {
    fail(ErrorKind::pipeline_order, "missing " + (ctx.out / "candidates.csv").string() + "; run postprocess first");
  }
  const auto candidates = load_candidates(ctx.out / "candidates.csv");
  m.input(ctx.out / "candidates.csv");
  m.input(ctx.out / "evaluated_images.txt");
  detail::require_dir(ctx.data, "--data");
  const auto annotations = ctx.data / "annotations.csv";
  const auto truths = std::filesystem::exists(annotations) ? load_annotations(annotations) : std::vector<AnnotationSet>{};
  m.input(annotations);
  const auto results = image_results(candidates, ids, truths);
  const FrocCurve curve = froc(results, ctx.config.eval_radius);
  std::ostringstream csv;
  write_froc_csv(csv, curve);
  detail::write_text(ctx.out / "froc.csv", csv.str());
  m.output(ctx.out / "froc.csv");
  MatchStats total;
  for (const auto& r : results) {
    std::vector<Candidate> sorted = r.candidates;
    sort_candidates(sorted);
    total += match(sorted, r.centroids, ctx.config.eval_radius).stats;
  }
  m.note("tp", total.tp);
  m.note("fp", total.fp);
  m.note("fn", total.fn);
  return curve;
}

/// Cross-validated run of every stage; returns the pooled held-out curve.
inline FrocCurve stage_pipeline(const RunContext& ctx, Manifest& m) {
  detail::require_dir(ctx.data, "--data");
  detail::require_dir(ctx.out, "--out");
  const auto shared = detail::RunPaths::under(ctx.out);
  {
    Manifest sub("preprocess", ctx);
    stage_preprocess(ctx, shared, sub);
    sub.write(ctx.out);
  }
  const auto images = load_preprocessed(shared.preprocessed, ctx.threads);
  const auto folds = detail::fold_assignment(ctx, images.size());
  {
    std::string text = "image_id,fold\n";
    for (std::size_t i = 0; i < images.size(); ++i) text += images[i].image_id + "," + std::to_string(folds[i]) + "\n";
    detail::write_text(ctx.out / "folds.csv", text);
    m.output(ctx.out / "folds.csv");
  }
  const auto truths = detail::load_truths(ctx, images);
  std::vector<Candidate> pooled;
  std::vector<std::string> ids;
  std::string summary = "fold,images,lesions,candidates,cpm,max_sensitivity_at_8fp\n";
  for (std::size_t k = 0; k < ctx.config.folds; ++k) {
    RunContext fold_ctx = ctx;
    fold_ctx.fold = k;
    fold_ctx.out = ctx.out / ("fold" + std::to_string(k));
    fold_ctx.prob_maps.clear();
    const auto paths = detail::RunPaths::under(fold_ctx.out, shared.preprocessed);
    detail::log(ctx, "fold " + std::to_string(k + 1) + "/" + std::to_string(ctx.config.folds));
    auto run = [&](const char* name, auto&& body) {
      Manifest sub(name, fold_ctx);
      body(sub);
      sub.write(fold_ctx.out);
    };
    run("train-basic", [&](Manifest& s) { stage_train(fold_ctx, paths, Stage::basic, s); });
    run("infer-basic", [&](Manifest& s) { stage_infer(fold_ctx, paths, Stage::basic, s); });
    run("train-final", [&](Manifest& s) { stage_train(fold_ctx, paths, Stage::final, s); });
    run("infer", [&](Manifest& s) { stage_infer(fold_ctx, paths, Stage::final, s); });
    std::vector<std::string> fold_ids;
    for (std::size_t i : detail::test_indices(fold_ctx, images.size())) fold_ids.push_back(images[i].image_id);
    const auto fold_candidates = candidates_for(fold_ctx, paths.maps_final, fold_ids);
    pooled.insert(pooled.end(), fold_candidates.begin(), fold_candidates.end());
    ids.insert(ids.end(), fold_ids.begin(), fold_ids.end());

    std::size_t lesions = 0;
    for (const auto& id : fold_ids)
      for (const auto& t : truths)
        if (t.image_id == id) lesions += t.centroids.size();
    summary += std::to_string(k) + "," + std::to_string(fold_ids.size()) + "," + std::to_string(lesions) + "," +
               std::to_string(fold_candidates.size()) + ",";
    if (lesions > 0) {
      const FrocCurve c = froc(image_results(fold_candidates, fold_ids, truths), ctx.config.eval_radius);
      summary += detail::format_score(real_t(cpm(c))) + "," + detail::format_score(real_t(max_sensitivity_within(c, 8)));
    } else {
      summary += ",";
    }
    summary += "\n";
  }
  detail::write_text(ctx.out / "cv_folds.csv", summary);
  m.output(ctx.out / "cv_folds.csv");

  // Pooled candidates in image-id order so the CSV does not depend on the fold layout.
  std::vector<std::size_t> order(ids.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ids[a] < ids[b]; });
  std::vector<std::string> sorted_ids;
  for (std::size_t i : order) sorted_ids.push_back(ids[i]);
  std::stable_sort(pooled.begin(), pooled.end(),
                   [](const Candidate& a, const Candidate& b) { return a.image_id < b.image_id; });
  write_candidate_outputs(ctx.out, pooled, sorted_ids, m);
  {
    Manifest sub("evaluate", ctx);
    stage_evaluate(ctx, sub);
    sub.write(ctx.out);
  }
  Manifest sub("froc-report", ctx);
  stage_froc_report(ctx, sub);
  sub.write(ctx.out);
  return load_froc_csv(ctx.out / "froc.csv");
}

/// Runs one subcommand and writes its manifest into the run directory.
inline void run_subcommand(const std::string& name, const RunContext& ctx) {
  if (std::find(subcommands().begin(), subcommands().end(), name) == subcommands().end()) {
    fail(ErrorKind::usage, "unknown subcommand '" + name + "'");
  }
  detail::require_dir(ctx.out, "--out");
  Manifest m(name, ctx);
  if (!ctx.config_path.empty()) m.input(ctx.config_path);
  const auto paths = detail::RunPaths::under(ctx.out);
  if (name == "gen-synthetic") stage_gen_synthetic(ctx, m);
  else if (name == "preprocess") stage_preprocess(ctx, paths, m);
  else if (name == "train-basic") stage_train(ctx, paths, Stage::basic, m);
  else if (name == "infer-basic") stage_infer(ctx, paths, Stage::basic, m);
  else if (name == "train-final") stage_train(ctx, paths, Stage::final, m);
  else if (name == "infer") stage_infer(ctx, paths, Stage::final, m);
  else if (name == "postprocess") stage_postprocess(ctx, paths, m);
  else if (name == "evaluate") {
    const FrocCurve curve = stage_evaluate(ctx, m);
    if (!ctx.quiet) {
      std::cout << "cpm " << detail::format_score(real_t(cpm(curve))) << ", sensitivity at <= 8 FP/image "
                << detail::format_score(real_t(max_sensitivity_within(curve, 8))) << '\n';
    }
  } else if (name == "froc-report") stage_froc_report(ctx, m);
  else stage_pipeline(ctx, m);
  m.write(ctx.out);
}

}  // namespace macnn
