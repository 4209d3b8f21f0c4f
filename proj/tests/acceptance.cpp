// Acceptance run: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "macnn/pipeline.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace macnn;
using testing::finite_difference;
using testing::random_tensor;
using testing::relative_error;
using testing::weighted_sum;

namespace {

// Pinned tolerances and limits.
constexpr double kFdEps = 1e-4;
constexpr double kFdRelTol = 1e-3;
constexpr double kGradientSeconds = 60;
constexpr double kConvAbsTol = 1e-9;
constexpr int kOracleInstances = 100;
constexpr int kMicroSets = 100;
constexpr double kCpmExpected = 0.4571;
constexpr double kCpmTol = 5e-4;
constexpr double kCpmPublished = 0.45;
constexpr double kCpmPublishedTol = 0.01;
constexpr std::size_t kOverfitPatches = 100;
constexpr std::size_t kOverfitEpochs = 200;
constexpr double kOverfitLoss = 0.05;
constexpr double kOverfitSeconds = 600;
constexpr double kEndToEndSensitivity = 0.8;
constexpr double kEndToEndFp = 8;
constexpr double kEndToEndSeconds = 45 * 60;
constexpr double kConstantTol = 1e-12;

struct Outcome {
  bool pass;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------

struct GradientLog {
  double worst = 0;
  std::size_t checks = 0;
  std::string worst_name;
  void add(const std::string& name, std::span<const real_t> analytic, std::span<const real_t> numeric) {
    const double e = relative_error(analytic, numeric);
    ++checks;
    if (e >= worst) {
      worst = e;
      worst_name = name;
    }
  }
};

double network_loss(const NetworkSpec& spec, const std::vector<Tensor>& w, const Tensor& x, int target, bool training,
                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto trace = forward(spec, w, x, training, &rng, false);
  return bce_loss(trace.probs[1], target).loss;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  GradientLog log;
  std::mt19937_64 rng(101);
  {
    Tensor in = random_tensor({2, 7, 6}, rng), k = random_tensor({3, 2, 3, 2}, rng), b = random_tensor({3}, rng);
    const Tensor r = random_tensor({3, 5, 5}, rng);
    auto loss = [&] { return weighted_sum(conv2d_forward(in, k, b), r); };
    const auto g = conv2d_backward(in, k, r);
    log.add("conv input", g.d_input.data(), finite_difference(in, loss, kFdEps).data());
    log.add("conv kernels", g.d_params[0].data(), finite_difference(k, loss, kFdEps).data());
    log.add("conv bias", g.d_params[1].data(), finite_difference(b, loss, kFdEps).data());
  }
  {
    std::vector<real_t> values(2 * 7 * 6);
    for (std::size_t n = 0; n < values.size(); ++n) values[n] = 0.01 * double(n);
    std::shuffle(values.begin(), values.end(), rng);
    Tensor in({2, 7, 6}, values);
    const Tensor r = random_tensor({2, 3, 3}, rng);
    auto loss = [&] { return weighted_sum(maxpool2_forward(in).output, r); };
    log.add("maxpool", maxpool2_backward(maxpool2_forward(in).indices, r).data(),
            finite_difference(in, loss, kFdEps).data());
  }
  {
    Tensor in = random_tensor({40}, rng);
    for (auto& v : in.data())
      if (std::abs(v) < 1e-2) v += 0.05;
    const Tensor r = random_tensor({40}, rng);
    auto loss = [&] { return weighted_sum(leaky_relu(in, 0.01), r); };
    log.add("leaky relu", leaky_relu_backward(in, r, 0.01).data(), finite_difference(in, loss, kFdEps).data());
  }
  {
    Tensor in = random_tensor({30}, rng);
    for (std::size_t i = 0; i < 15; ++i)
      if (std::abs(in[2 * i] - in[2 * i + 1]) < 1e-2) in[2 * i] += 0.1;
    const Tensor r = random_tensor({15}, rng);
    auto loss = [&] { return weighted_sum(maxout_pairs(in).output, r); };
    log.add("maxout", maxout_pairs_backward(maxout_pairs(in), r).data(), finite_difference(in, loss, kFdEps).data());
  }
  {
    Tensor x = random_tensor({2, 3, 2}, rng), w = random_tensor({9, 12}, rng), b = random_tensor({9}, rng);
    const Tensor r = random_tensor({9}, rng);
    auto loss = [&] { return weighted_sum(fully_connected_forward(x, w, b), r); };
    const auto g = fully_connected_backward(x, w, r);
    log.add("fc input", g.d_input.data(), finite_difference(x, loss, kFdEps).data());
    log.add("fc weights", g.d_params[0].data(), finite_difference(w, loss, kFdEps).data());
    log.add("fc bias", g.d_params[1].data(), finite_difference(b, loss, kFdEps).data());
  }
  {
    Tensor z = random_tensor({2}, rng, -3, 3);
    const Tensor r = random_tensor({2}, rng);
    auto loss = [&] { return weighted_sum(softmax2(z), r); };
    log.add("softmax", softmax2_backward(softmax2(z), r).data(), finite_difference(z, loss, kFdEps).data());
  }
  {
    std::uniform_real_distribution<double> prob(0.01, 0.99);
    for (int i = 0; i < 20; ++i) {
      Tensor p({1}, prob(rng));
      const int t = i % 2;
      auto loss = [&] { return bce_loss(p[0], t).loss; };
      const Tensor analytic({1}, bce_loss(p[0], t).d_p);
      log.add("bce", analytic.data(), finite_difference(p, loss, kFdEps).data());
    }
  }
  {
    Tensor in = random_tensor({50}, rng);
    const Tensor r = random_tensor({50}, rng);
    std::mt19937_64 drop_rng(7);
    const auto fixed = dropout(in, 0.25, drop_rng, true);
    auto loss = [&] {
      Tensor out = in;
      for (std::size_t n = 0; n < out.size(); ++n) out[n] *= fixed.scale[n];
      return weighted_sum(out, r);
    };
    log.add("dropout", dropout_backward(fixed, r).data(), finite_difference(in, loss, kFdEps).data());
  }
  const NetworkSpec spec = testing::shrunken_spec();
  const auto names = parameter_names(spec);
  for (bool training : {false, true})
    for (int target : {0, 1}) {
      Checkpoint ckpt = init_weights(spec, 17 + target);
      Tensor x = random_tensor({3, 21, 21}, rng);
      std::mt19937_64 drop_rng(99);
      const auto analytic = loss_and_gradient(spec, ckpt.weights, x, target, training, &drop_rng);
      auto loss = [&] { return network_loss(spec, ckpt.weights, x, target, training, 99); };
      for (std::size_t i = 0; i < ckpt.weights.size(); ++i)
        log.add("network " + names[i], analytic.grads[i].data(), finite_difference(ckpt.weights[i], loss, kFdEps).data());
      const auto trace = forward(spec, ckpt.weights, x);
      Tensor d_input;
      backward(spec, ckpt.weights, trace, Tensor({2}, {0.0, bce_loss(trace.probs[1], target).d_p}), &d_input);
      auto eval_loss = [&] { return network_loss(spec, ckpt.weights, x, target, false, 0); };
      log.add("network input", d_input.data(), finite_difference(x, eval_loss, kFdEps).data());
    }
  const double secs = seconds_since(t0);
  return {log.worst < kFdRelTol && secs < kGradientSeconds,
          fmt("%zu checks, worst rel err %.2e (%s), %.1f s", log.checks, log.worst, log.worst_name.c_str(), secs)};
}

std::vector<std::size_t> spatial_chain(const NetworkSpec& spec) {
  std::vector<std::size_t> chain;
  const auto shapes = infer_shapes(spec);
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::conv || spec.layers[i].kind == LayerKind::maxpool2)
      chain.push_back(shapes[i][1]);
  return chain;
}

std::string chain_text(const std::vector<std::size_t>& chain) {
  std::string s;
  for (std::size_t v : chain) s += (s.empty() ? "" : "/") + std::to_string(v);
  return s;
}

Outcome shape_chains() {
  const auto basic = spatial_chain(build_basic_spec()), final = spatial_chain(build_final_spec());
  const bool ok = basic == std::vector<std::size_t>{96, 48, 44, 22, 20, 10} &&
                  final == std::vector<std::size_t>{96, 48, 44, 22, 20, 10, 9, 4, 3, 1};
  return {ok, "basic " + chain_text(basic) + ", final " + chain_text(final)};
}

Outcome conv_median_oracles() {
  std::mt19937_64 rng(303);
  double worst = 0;
  for (int trial = 0; trial < kOracleInstances; ++trial) {
    const std::size_t c = 1 + rng() % 4, h = 3 + rng() % 12, w = 3 + rng() % 12, o = 1 + rng() % 6;
    const std::size_t kh = 1 + rng() % h, kw = 1 + rng() % w;
    const Tensor in = random_tensor({c, h, w}, rng), k = random_tensor({o, c, kh, kw}, rng), b = random_tensor({o}, rng);
    const Tensor fast = conv2d_forward(in, k, b), slow = testing::brute_conv2d(in, k, b);
    if (fast.shape() != slow.shape()) return {false, fmt("conv shape mismatch in instance %d", trial)};
    for (std::size_t n = 0; n < fast.size(); ++n) worst = std::max(worst, std::abs(fast[n] - slow[n]));
  }
  const std::size_t windows[] = {1, 2, 3, 4, 5, 7, 8, 30};
  std::size_t median_mismatches = 0;
  for (int trial = 0; trial < kOracleInstances; ++trial) {
    const std::size_t k = windows[trial % 8], h = 3 + rng() % 14, w = 3 + rng() % 14;
    const Tensor img = random_tensor({2, h, w}, rng);
    const Tensor bg = median_background(img, k);
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) median_mismatches += bg(c, y, x) != testing::brute_median_at(img, c, y, x, k);
  }
  return {worst <= kConvAbsTol && median_mismatches == 0,
          fmt("%d conv instances, max abs diff %.2e; %d median instances, %zu mismatching pixels", kOracleInstances,
              worst, kOracleInstances, median_mismatches)};
}

Outcome evaluator_oracle() {
  std::mt19937_64 rng(404);
  int mismatched = 0;
  std::size_t points = 0;
  for (int trial = 0; trial < kMicroSets; ++trial) {
    const auto images = testing::micro_set(rng);
    const FrocCurve fast = froc(images), slow = testing::brute_froc(images, kDefaultMatchRadius);
    bool same = fast.points == slow.points;
    for (auto im : images) {
      sort_candidates(im.candidates);
      same = same && match(im.candidates, im.centroids).stats ==
                         testing::brute_match(im.candidates, im.centroids, kDefaultMatchRadius);
    }
    mismatched += !same;
    points += fast.points.size();
  }
  return {mismatched == 0, fmt("%d micro-datasets, %zu curve points, %d mismatching", kMicroSets, points, mismatched)};
}

Outcome paper_cpm() {
  const auto& row = reference_table("ROC", "Proposed");
  const double value = cpm(*row.sensitivities);
  return {std::abs(value - kCpmExpected) <= kCpmTol && std::abs(value - kCpmPublished) <= kCpmPublishedTol,
          fmt("cpm %.6f, expected %.4f +/- %.0e, published %.2f", value, kCpmExpected, kCpmTol, kCpmPublished)};
}

Outcome overfit() {
  SyntheticConfig syn;
  syn.n_images = 2;
  syn.seed = 11;
  const Dataset data = generate_synthetic(syn);
  std::vector<PreprocessedImage> images;
  for (const auto& im : data.images) images.push_back(preprocess(im));
  SamplePlan plan;
  plan.epoch_size = kOverfitPatches;
  plan.rng_seed = 5;
  const std::vector<Patch> patches = materialize(sample_balanced(images, data.annotations, plan), images);

  TrainConfig cfg;
  cfg.epochs = kOverfitEpochs;
  cfg.seed = 3;
  std::size_t reached = 0;
  const auto t0 = std::chrono::steady_clock::now();
  const auto [ckpt, report] =
      train_on_patches(build_basic_spec(), patches, cfg, [&](const Checkpoint& c, const TrainReport& r) {
        if (r.accuracy.back() == 1.0 && r.loss.back() < kOverfitLoss) reached = c.meta.epoch;
        return reached == 0;
      });
  const double secs = seconds_since(t0);
  return {reached > 0 && secs < kOverfitSeconds,
          fmt("%zu patches, epoch %zu: loss %.4f acc %.3f, %.0f s", patches.size(), report.loss.size(),
              report.loss.back(), report.accuracy.back(), secs)};
}

Outcome postprocess_properties() {
  const std::size_t support = disk_offsets(5).size();
  ProbabilityMap map{"c", Raster<real_t>(40, 30, 0.37), 1, Mask(40, 30, 1)};
  for (int y = 0; y < 30; ++y)
    for (int x = 0; x < 12; ++x)
      if ((x + y) % 7 == 0) {
        map.valid_mask.at(x, y) = 0;
        map.scores.at(x, y) = 0;
      }
  const auto smooth = disk_smooth(map, 5);
  double drift = 0;
  for (std::size_t n = 0; n < smooth.scores.size(); ++n)
    drift = std::max(drift, std::abs(smooth.scores[n] - (map.valid_mask[n] ? 0.37 : 0.0)));

  std::mt19937_64 rng(909);
  std::uniform_real_distribution<double> u(0, 1);
  std::size_t candidates = 0, too_close = 0;
  for (int trial = 0; trial < 50; ++trial) {
    ProbabilityMap m{"r", Raster<real_t>(60, 50, 0), 1, Mask(60, 50, 1)};
    for (auto& v : m.scores.values()) v = u(rng) < 0.03 ? std::round(u(rng) * 4) / 4 : 0.0;
    const auto c = postprocess(m, 5, 5, kDefaultScoreFloor);
    candidates += c.size();
    for (std::size_t i = 0; i < c.size(); ++i)
      for (std::size_t j = 0; j < i; ++j) too_close += squared_distance(c[i].position, c[j].position) <= 25;
  }
  return {support == 81 && drift <= kConstantTol && too_close == 0,
          fmt("disk support %zu, constant drift %.1e, %zu candidates with %zu pairs within 5 px", support, drift,
              candidates, too_close)};
}

// ---------------------------------------------------------------------------

struct EndToEnd {
  fs::path cli, config, work;
  bool ran = false;
  double seconds = 0;

  int run(const std::string& args) const {
    const std::string cmd = cli.string() + " " + args + " --config " + config.string() + " --quiet";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  }

  bool pipeline(const std::string& out, std::size_t threads) const {
    return run("pipeline --data " + (work / "data").string() + " --out " + (work / out).string() + " --threads " +
               std::to_string(threads)) == 0;
  }
};

Outcome end_to_end(EndToEnd& e) {
  fs::remove_all(e.work);
  fs::create_directories(e.work);
  const auto t0 = std::chrono::steady_clock::now();
  if (e.run("gen-synthetic --out " + (e.work / "data").string()) != 0) return {false, "gen-synthetic failed"};
  if (!e.pipeline("threads8", 8)) return {false, "pipeline run failed"};
  e.seconds = seconds_since(t0);
  e.ran = true;
  const FrocCurve curve = load_froc_csv(e.work / "threads8" / "froc.csv");
  const double s = max_sensitivity_within(curve, kEndToEndFp);
  return {s >= kEndToEndSensitivity && e.seconds < kEndToEndSeconds,
          fmt("sensitivity %.4f at <= %.0f FP/image, cpm %.4f, %.0f s at --threads 8", s, kEndToEndFp, cpm(curve),
              e.seconds)};
}

Outcome determinism(EndToEnd& e) {
  if (!e.ran) {
    fs::create_directories(e.work);
    if (e.run("gen-synthetic --out " + (e.work / "data").string()) != 0) return {false, "gen-synthetic failed"};
  }
  if (!e.pipeline("ref1", 1) || !e.pipeline("ref2", 1)) return {false, "pipeline run failed"};
  bool same = true;
  std::string detail;
  for (const char* f : {"candidates.csv", "froc.csv"}) {
    const std::string a = slurp(e.work / "ref1" / f), b = slurp(e.work / "ref2" / f);
    same = same && !a.empty() && a == b;
    detail += fmt("%s %zu bytes %s; ", f, a.size(), a == b ? "identical" : "DIFFER");
  }
  if (e.ran) {
    const bool threaded = slurp(e.work / "ref1" / "candidates.csv") == slurp(e.work / "threads8" / "candidates.csv") &&
                          slurp(e.work / "ref1" / "froc.csv") == slurp(e.work / "threads8" / "froc.csv");
    detail += threaded ? "threads-8 run identical too" : "threads-8 run differs";
  }
  return {same, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"macnn acceptance run"};
  std::vector<int> only;
  std::string cli = MACNN_CLI, config = MACNN_SAMPLES_DIR "/desk.cfg",
              work = (fs::temp_directory_path() / "macnn_acceptance").string();
  bool keep = false;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--cli", cli, "macnn executable");
  app.add_option("--config", config, "configuration for the end-to-end runs");
  app.add_option("--work", work, "scratch directory for the end-to-end runs");
  app.add_flag("--keep", keep, "keep the scratch directory");
  CLI11_PARSE(app, argc, argv);

  EndToEnd e2e{cli, config, work};
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"shape chains", shape_chains},
      {"conv and median oracles", conv_median_oracles},
      {"evaluator oracle", evaluator_oracle},
      {"published cpm arithmetic", paper_cpm},
      {"overfit sanity", overfit},
      {"end-to-end synthetic run", [&] { return end_to_end(e2e); }},
      {"determinism", [&] { return determinism(e2e); }},
      {"post-processing properties", postprocess_properties},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& ex) {
      o = {false, std::string("exception: ") + ex.what()};
    }
    failed += !o.pass;
    std::printf("%s %d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  if (!keep) fs::remove_all(work);
  return failed;
}
