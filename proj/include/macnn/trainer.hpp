#pragma once

// Minibatch SGD with momentum over freshly sampled patch epochs.
//
// All randomness is derived from (seed, epoch, purpose, index), so an epoch
// can be replayed from a checkpoint, and per-sample work can run on any
// number of threads: gradients are reduced in sample order afterwards.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "macnn/checkpoint.hpp"
#include "macnn/parallel.hpp"
#include "macnn/patcher.hpp"

namespace macnn {

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  SamplePlan plan;
  std::size_t threads = 1;

  void validate() const {
    if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) {
      fail(ErrorKind::config, "learning_rate must be a finite value >= 0");
    }
    if (!(momentum >= 0 && momentum < 1)) fail(ErrorKind::config, "momentum must lie in [0, 1)");
    if (batch_size < 1) fail(ErrorKind::config, "batch_size must be at least 1");
    if (epochs < 1) fail(ErrorKind::config, "epochs must be set and at least 1");
  }
};

struct TrainReport {
  std::vector<double> loss;      // per-epoch mean training loss (dropout active)
  std::vector<double> accuracy;  // per-epoch training accuracy at P(MA) >= 0.5
  double wall_seconds = 0;
};

enum class Stage { basic, final };

/// v' = momentum * v - lr * g;  w' = w + v'
inline void sgd_step(Tensor& weights, const Tensor& grads, Tensor& velocity, double lr, double momentum) {
  require_shape(grads.shape(), weights.shape(), "sgd_step grads");
  require_shape(velocity.shape(), weights.shape(), "sgd_step velocity");
  const real_t m = static_cast<real_t>(momentum), a = static_cast<real_t>(lr);
  for (std::size_t n = 0; n < weights.size(); ++n) {
    velocity[n] = m * velocity[n] - a * grads[n];
    weights[n] += velocity[n];
  }
}

inline void sgd_step(std::vector<Tensor>& weights, const std::vector<Tensor>& grads, std::vector<Tensor>& velocity,
                     double lr, double momentum) {
  if (grads.size() != weights.size() || velocity.size() != weights.size()) {
    fail(ErrorKind::shape, "sgd_step: weights, grads and velocity differ in tensor count");
  }
  for (std::size_t i = 0; i < weights.size(); ++i) sgd_step(weights[i], grads[i], velocity[i], lr, momentum);
}

enum class RngPurpose : std::uint32_t { sample = 1, shuffle = 2, dropout = 3 };

inline std::mt19937_64 derived_rng(std::uint64_t seed, std::size_t epoch, RngPurpose purpose, std::size_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(purpose),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
  return std::mt19937_64(seq);
}

inline std::uint64_t derived_seed(std::uint64_t seed, std::size_t epoch, RngPurpose purpose) {
  return derived_rng(seed, epoch, purpose)();
}

/// Produces the (unshuffled) patch list for one epoch.
using EpochSampler = std::function<std::vector<PatchRef>(std::size_t epoch)>;

/// Called after every epoch with the updated checkpoint; return false to stop.
using EpochCallback = std::function<bool(const Checkpoint&, const TrainReport&)>;

/// Runs epochs [start.meta.epoch, config.epochs). The patch images are only read.
inline std::pair<Checkpoint, TrainReport> run_training(Checkpoint ckpt, const std::vector<PreprocessedImage>& images,
                                                       const EpochSampler& sampler, const TrainConfig& config,
                                                       const EpochCallback& on_epoch = {}) {
  config.validate();
  const auto started = std::chrono::steady_clock::now();
  const NetworkSpec& spec = ckpt.spec;
  check_weights(spec, ckpt.weights);
  check_weights(spec, ckpt.velocity);
  TrainReport report{ckpt.meta.loss_history, ckpt.meta.accuracy_history, 0};

  struct SampleOut {
    double loss = 0;
    bool correct = false;
    std::vector<Tensor> grads;
  };

  for (std::size_t epoch = ckpt.meta.epoch; epoch < config.epochs; ++epoch) {
    std::vector<PatchRef> refs = sampler(epoch);
    auto shuffle_rng = derived_rng(config.seed, epoch, RngPurpose::shuffle);
    std::shuffle(refs.begin(), refs.end(), shuffle_rng);

    double loss_sum = 0;
    std::size_t correct = 0;
    std::vector<SampleOut> outs;
    for (std::size_t begin = 0, batch = 0; begin < refs.size(); begin += config.batch_size, ++batch) {
      const std::size_t count = std::min(config.batch_size, refs.size() - begin);
      outs.assign(count, {});
      parallel_for(count, config.threads, [&](std::size_t s) {
        const PatchRef& ref = refs[begin + s];
        Tensor input({3, kPatchSize, kPatchSize});
        copy_patch(images[ref.image], ref.center, ref.op, input.data().data());
        auto rng = derived_rng(config.seed, epoch, RngPurpose::dropout, begin + s);
        auto r = loss_and_gradient(spec, ckpt.weights, input, ref.ma ? 1 : 0, true, &rng);
        outs[s].loss = r.loss;
        outs[s].correct = (r.p_ma >= 0.5) == ref.ma;
        outs[s].grads = std::move(r.grads);
      });
      // Ordered reduction: identical arithmetic for every thread count.
      std::vector<Tensor> grads = std::move(outs[0].grads);
      for (std::size_t s = 1; s < count; ++s)
        for (std::size_t i = 0; i < grads.size(); ++i) {
          real_t* acc = grads[i].data().data();
          const real_t* g = outs[s].grads[i].data().data();
          for (std::size_t n = 0; n < grads[i].size(); ++n) acc[n] += g[n];
        }
      const real_t inv = real_t(1) / static_cast<real_t>(count);
      for (auto& g : grads)
        for (auto& v : g.data()) v *= inv;
      for (std::size_t s = 0; s < count; ++s) {
        if (!std::isfinite(outs[s].loss)) {
          fail(ErrorKind::divergence, "non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                                          std::to_string(batch + 1));
        }
        loss_sum += outs[s].loss;
        correct += outs[s].correct;
      }
      sgd_step(ckpt.weights, grads, ckpt.velocity, config.learning_rate, config.momentum);
      for (const auto& w : ckpt.weights)
        if (!w.all_finite()) {
          fail(ErrorKind::divergence, "non-finite weights after epoch " + std::to_string(epoch + 1) + ", batch " +
                                          std::to_string(batch + 1));
        }
    }
    const double n = refs.empty() ? 1.0 : double(refs.size());
    report.loss.push_back(loss_sum / n);
    report.accuracy.push_back(double(correct) / n);
    ckpt.meta.epoch = epoch + 1;
    ckpt.meta.seed = config.seed;
    ckpt.meta.loss_history = report.loss;
    ckpt.meta.accuracy_history = report.accuracy;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (on_epoch && !on_epoch(ckpt, report)) break;
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return {std::move(ckpt), std::move(report)};
}

/// Trains either stage on sampled epochs. `resume` continues from a saved
/// checkpoint (its spec must equal `spec`); otherwise weights are He-initialised
/// from config.seed.
inline std::pair<Checkpoint, TrainReport> train(const NetworkSpec& spec, const std::vector<PreprocessedImage>& images,
                                                const std::vector<AnnotationSet>& truths, const TrainConfig& config,
                                                Stage stage, const std::vector<ProbabilityMap>* prob_maps = nullptr,
                                                const EpochCallback& on_epoch = {},
                                                std::optional<Checkpoint> resume = std::nullopt) {
  config.validate();
  if (stage == Stage::final && (!prob_maps || prob_maps->empty())) {
    fail(ErrorKind::pipeline_order, "final-stage training needs stage-1 probability maps");
  }
  if (resume && spec_digest(resume->spec) != spec_digest(spec)) {
    fail(ErrorKind::checkpoint, "resume checkpoint was trained for a different network");
  }
  Checkpoint start = resume ? std::move(*resume) : init_weights(spec, config.seed);
  const EpochSampler sampler = [&](std::size_t epoch) {
    SamplePlan plan = config.plan;
    plan.rng_seed = derived_seed(config.seed, epoch, RngPurpose::sample);
    return stage == Stage::basic ? sample_balanced(images, truths, plan)
                                 : sample_stage2(images, truths, *prob_maps, plan);
  };
  return run_training(std::move(start), images, sampler, config, on_epoch);
}

/// Trains on a fixed list of patches, reshuffled every epoch.
inline std::pair<Checkpoint, TrainReport> train_on_patches(const NetworkSpec& spec, const std::vector<Patch>& patches,
                                                           const TrainConfig& config,
                                                           const EpochCallback& on_epoch = {}) {
  std::vector<PreprocessedImage> images;
  std::vector<PatchRef> refs;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    require_shape(patches[i].data.shape(), {3, kPatchSize, kPatchSize}, "training patch");
    images.push_back({patches[i].source_id, patches[i].data, Mask(kPatchSize, kPatchSize, 1)});
    refs.push_back({i, {kPatchMargin, kPatchMargin}, patches[i].ma, AugmentOp::identity});
  }
  return run_training(init_weights(spec, config.seed), images, [&](std::size_t) { return refs; }, config, on_epoch);
}

}  // namespace macnn
