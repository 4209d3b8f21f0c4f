#pragma once

// Declarative network specifications, shape bookkeeping, parameter storage
// and the whole-network forward/backward pass.

#include <charconv>
#include <cmath>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "macnn/digest.hpp"
#include "macnn/layers.hpp"

namespace macnn {

enum class LayerKind { conv, maxpool2, leaky_relu, maxout_fc, fully_connected, dropout, softmax };

constexpr std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::maxpool2: return "maxpool2";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::maxout_fc: return "maxout_fc";
    case LayerKind::fully_connected: return "fully_connected";
    case LayerKind::dropout: return "dropout";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind;
  std::size_t units = 0;   // conv: output channels; fully_connected: width
  std::size_t kernel = 0;  // conv: square kernel side
  double value = 0;        // dropout: p; leaky_relu: slope

  static LayerSpec conv(std::size_t channels, std::size_t kernel) { return {LayerKind::conv, channels, kernel, 0}; }
  static LayerSpec pool() { return {LayerKind::maxpool2}; }
  static LayerSpec leaky(double slope) { return {LayerKind::leaky_relu, 0, 0, slope}; }
  static LayerSpec maxout() { return {LayerKind::maxout_fc}; }
  static LayerSpec fc(std::size_t width) { return {LayerKind::fully_connected, width, 0, 0}; }
  static LayerSpec drop(double p) { return {LayerKind::dropout, 0, 0, p}; }
  static LayerSpec softmax() { return {LayerKind::softmax}; }

  bool has_params() const { return kind == LayerKind::conv || kind == LayerKind::fully_connected; }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct NetworkSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  Shape input_shape{3, 101, 101};
  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

struct ModelOptions {
  double leaky_slope = 0.01;
  double dropout = 0.25;
  bool fc_maxout = true;
  std::vector<std::size_t> final_dropout_blocks{1, 3};  // 1-based conv blocks followed by dropout
};

inline NetworkSpec build_basic_spec(const ModelOptions& opt = {}) {
  NetworkSpec spec{"basic", {}};
  for (std::size_t k : {6u, 5u, 3u}) {
    spec.layers.push_back(LayerSpec::conv(16, k));
    spec.layers.push_back(LayerSpec::leaky(opt.leaky_slope));
    spec.layers.push_back(LayerSpec::pool());
    spec.layers.push_back(LayerSpec::drop(opt.dropout));
  }
  spec.layers.push_back(LayerSpec::fc(200));
  if (opt.fc_maxout) spec.layers.push_back(LayerSpec::maxout());
  spec.layers.push_back(LayerSpec::fc(100));
  spec.layers.push_back(LayerSpec::fc(2));
  spec.layers.push_back(LayerSpec::softmax());
  return spec;
}

inline NetworkSpec build_final_spec(const ModelOptions& opt = {}) {
  NetworkSpec spec{"final", {}};
  std::size_t block = 0;
  for (std::size_t k : {6u, 5u, 3u, 2u, 2u}) {
    ++block;
    spec.layers.push_back(LayerSpec::conv(16, k));
    spec.layers.push_back(LayerSpec::leaky(opt.leaky_slope));
    spec.layers.push_back(LayerSpec::pool());
    for (std::size_t b : opt.final_dropout_blocks)
      if (b == block) {
        spec.layers.push_back(LayerSpec::drop(opt.dropout));
        break;
      }
  }
  spec.layers.push_back(LayerSpec::fc(100));
  if (opt.fc_maxout) spec.layers.push_back(LayerSpec::maxout());
  spec.layers.push_back(LayerSpec::fc(2));
  spec.layers.push_back(LayerSpec::softmax());
  return spec;
}

/// Output shape of every layer, in order.
inline std::vector<Shape> infer_shapes(const NetworkSpec& spec) {
  if (spec.input_shape.size() != 3 || shape_size(spec.input_shape) == 0) {
    fail(ErrorKind::spec, "input shape must be [C,H,W] with positive sizes");
  }
  std::vector<Shape> shapes;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i + 1) + " (" + std::string(to_string(l.kind)) + ")";
    switch (l.kind) {
      case LayerKind::conv:
        if (cur.size() != 3) fail(ErrorKind::spec, where + " needs a spatial input");
        if (l.units == 0 || l.kernel == 0) fail(ErrorKind::spec, where + " needs positive channels and kernel");
        if (l.kernel > cur[1] || l.kernel > cur[2]) {
          fail(ErrorKind::spec, where + ": " + std::to_string(l.kernel) + "x" + std::to_string(l.kernel) +
                                    " kernel on " + shape_string(cur) + " input leaves no output");
        }
        cur = {l.units, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
        break;
      case LayerKind::maxpool2:
        if (cur.size() != 3) fail(ErrorKind::spec, where + " needs a spatial input");
        if (cur[1] < 2 || cur[2] < 2) fail(ErrorKind::spec, where + ": pooling " + shape_string(cur) + " leaves no output");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case LayerKind::leaky_relu:
        if (!(l.value >= 0 && l.value < 1)) fail(ErrorKind::spec, where + ": slope must lie in [0,1)");
        break;
      case LayerKind::dropout:
        if (!(l.value >= 0 && l.value < 1)) fail(ErrorKind::spec, where + ": p must lie in [0,1)");
        break;
      case LayerKind::maxout_fc:
        if (cur.size() != 1 || cur[0] % 2 != 0) fail(ErrorKind::spec, where + " needs an even-width vector input");
        cur = {cur[0] / 2};
        break;
      case LayerKind::fully_connected:
        if (l.units == 0) fail(ErrorKind::spec, where + " needs a positive width");
        cur = {l.units};
        break;
      case LayerKind::softmax:
        if (cur != Shape{2}) fail(ErrorKind::spec, where + " needs exactly 2 inputs, got " + shape_string(cur));
        if (i + 1 != spec.layers.size()) fail(ErrorKind::spec, where + " must be the last layer");
        break;
    }
    shapes.push_back(cur);
  }
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::softmax) {
    fail(ErrorKind::spec, "network '" + spec.name + "' must end in a 2-way softmax");
  }
  return shapes;
}

/// Shapes of the trainable tensors (weight, bias per parameterised layer).
inline std::vector<Shape> parameter_shapes(const NetworkSpec& spec) {
  const auto shapes = infer_shapes(spec);
  std::vector<Shape> out;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::conv) {
      out.push_back({l.units, cur[0], l.kernel, l.kernel});
      out.push_back({l.units});
    } else if (l.kind == LayerKind::fully_connected) {
      out.push_back({l.units, shape_size(cur)});
      out.push_back({l.units});
    }
    cur = shapes[i];
  }
  return out;
}

inline std::size_t parameter_count(const NetworkSpec& spec) {
  std::size_t n = 0;
  for (const auto& s : parameter_shapes(spec)) n += shape_size(s);
  return n;
}

/// Tensor names: conv1.weight, conv1.bias, fc1.weight, ...
inline std::vector<std::string> parameter_names(const NetworkSpec& spec) {
  std::vector<std::string> names;
  std::size_t conv = 0, fc = 0;
  for (const auto& l : spec.layers) {
    std::string base;
    if (l.kind == LayerKind::conv) base = "conv" + std::to_string(++conv);
    else if (l.kind == LayerKind::fully_connected) base = "fc" + std::to_string(++fc);
    else continue;
    names.push_back(base + ".weight");
    names.push_back(base + ".bias");
  }
  return names;
}

// ---------------------------------------------------------------------------
// Canonical text form and digest

inline std::string spec_text(const NetworkSpec& spec) {
  std::ostringstream out;
  auto real = [](double v) {
    char buf[64];
    return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
  };
  out << "network " << spec.name << "\ninput";
  for (auto d : spec.input_shape) out << ' ' << d;
  out << '\n';
  for (const auto& l : spec.layers) {
    out << to_string(l.kind);
    switch (l.kind) {
      case LayerKind::conv: out << ' ' << l.units << ' ' << l.kernel; break;
      case LayerKind::fully_connected: out << ' ' << l.units; break;
      case LayerKind::leaky_relu:
      case LayerKind::dropout: out << ' ' << real(l.value); break;
      default: break;
    }
    out << '\n';
  }
  return out.str();
}

inline NetworkSpec parse_spec_text(const std::string& text) {
  std::istringstream in(text);
  NetworkSpec spec;
  std::string line, word;
  std::size_t line_no = 0;
  auto bad = [&](const std::string& why) { fail(ErrorKind::spec, "spec line " + std::to_string(line_no) + ": " + why); };
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    if (!(ls >> word)) continue;
    if (word == "network") {
      if (!(ls >> spec.name)) bad("missing network name");
    } else if (word == "input") {
      spec.input_shape.clear();
      for (std::size_t d; ls >> d;) spec.input_shape.push_back(d);
    } else if (word == "conv") {
      LayerSpec l{LayerKind::conv};
      if (!(ls >> l.units >> l.kernel)) bad("conv needs channels and kernel");
      spec.layers.push_back(l);
    } else if (word == "fully_connected") {
      LayerSpec l{LayerKind::fully_connected};
      if (!(ls >> l.units)) bad("fully_connected needs a width");
      spec.layers.push_back(l);
    } else if (word == "leaky_relu" || word == "dropout") {
      LayerSpec l{word == "dropout" ? LayerKind::dropout : LayerKind::leaky_relu};
      std::string v;
      if (!(ls >> v) || std::from_chars(v.data(), v.data() + v.size(), l.value).ec != std::errc{}) {
        bad(word + " needs a numeric value");
      }
      spec.layers.push_back(l);
    } else if (word == "maxpool2") {
      spec.layers.push_back(LayerSpec::pool());
    } else if (word == "maxout_fc") {
      spec.layers.push_back(LayerSpec::maxout());
    } else if (word == "softmax") {
      spec.layers.push_back(LayerSpec::softmax());
    } else {
      bad("unknown layer kind '" + word + "'");
    }
  }
  infer_shapes(spec);
  return spec;
}

inline std::string spec_digest(const NetworkSpec& spec) { return sha256_hex(spec_text(spec)); }

// ---------------------------------------------------------------------------
// Parameters

struct TrainingMeta {
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::vector<double> loss_history;
  std::vector<double> accuracy_history;
  friend bool operator==(const TrainingMeta&, const TrainingMeta&) = default;
};

struct Checkpoint {
  NetworkSpec spec;
  std::vector<Tensor> weights;   // parameter_shapes(spec) order
  std::vector<Tensor> velocity;  // SGD momentum buffers, same layout
  TrainingMeta meta;
  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

/// He-normal weights (std sqrt(2/fan_in)), zero biases, zero velocity.
inline Checkpoint init_weights(const NetworkSpec& spec, std::uint64_t seed) {
  Checkpoint ckpt{spec, {}, {}, {0, seed, {}, {}}};
  std::mt19937_64 rng(seed);
  for (const Shape& s : parameter_shapes(spec)) {
    Tensor t(s);
    if (s.size() > 1) {
      const std::size_t fan_in = shape_size(s) / s[0];
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / double(fan_in)));
      for (auto& w : t.data()) w = static_cast<real_t>(normal(rng));
    }
    ckpt.weights.push_back(std::move(t));
    ckpt.velocity.emplace_back(s);
  }
  return ckpt;
}

inline void check_weights(const NetworkSpec& spec, const std::vector<Tensor>& weights) {
  const auto shapes = parameter_shapes(spec);
  if (weights.size() != shapes.size()) {
    fail(ErrorKind::shape, "network '" + spec.name + "' expects " + std::to_string(shapes.size()) +
                               " parameter tensors, got " + std::to_string(weights.size()));
  }
  const auto names = parameter_names(spec);
  for (std::size_t i = 0; i < shapes.size(); ++i) require_shape(weights[i].shape(), shapes[i], names[i]);
}

// ---------------------------------------------------------------------------
// Forward / backward

struct LayerCache {
  Tensor input;                 // conv, fully_connected, leaky_relu
  PoolIndices pool;             // maxpool2
  MaxoutResult<real_t> maxout;  // maxout_fc
  std::vector<real_t> scale;    // dropout
};

struct ForwardTrace {
  std::vector<LayerCache> layers;
  std::vector<Shape> shapes;  // output shape of every layer
  Tensor probs;  // softmax output: [P(non-MA), P(MA)]
};

/// Runs the network on one input. rng may be null when training is false.
template <class Rng = std::mt19937_64>
ForwardTrace forward(const NetworkSpec& spec, const std::vector<Tensor>& weights, const Tensor& input,
                     bool training = false, Rng* rng = nullptr, bool keep_trace = true) {
  require_shape(input.shape(), spec.input_shape, "network input");
  if (training && !rng) fail(ErrorKind::validation, "training-mode forward needs an RNG");
  ForwardTrace trace;
  if (keep_trace) trace.layers.resize(spec.layers.size());
  Tensor x = input;
  std::size_t param = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    LayerCache* cache = keep_trace ? &trace.layers[i] : nullptr;
    switch (l.kind) {
      case LayerKind::conv: {
        Tensor y = conv2d_forward(x, weights[param], weights[param + 1]);
        param += 2;
        if (cache) cache->input = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::fully_connected: {
        Tensor y = fully_connected_forward(x, weights[param], weights[param + 1]);
        param += 2;
        if (cache) cache->input = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::leaky_relu: {
        Tensor y = leaky_relu(x, static_cast<real_t>(l.value));
        if (cache) cache->input = std::move(x);
        x = std::move(y);
        break;
      }
      case LayerKind::maxpool2: {
        auto r = maxpool2_forward(x);
        if (cache) cache->pool = std::move(r.indices);
        x = std::move(r.output);
        break;
      }
      case LayerKind::maxout_fc: {
        auto r = maxout_pairs(x);
        x = r.output;
        if (cache) cache->maxout = std::move(r);
        break;
      }
      case LayerKind::dropout: {
        if (!training) break;
        auto r = dropout(x, l.value, *rng, true);
        x = std::move(r.output);
        if (cache) cache->scale = std::move(r.scale);
        break;
      }
      case LayerKind::softmax:
        x = softmax2(x);
        break;
    }
    trace.shapes.push_back(x.shape());
  }
  trace.probs = std::move(x);
  return trace;
}

/// P(MA) for one input in inference mode.
inline real_t predict(const NetworkSpec& spec, const std::vector<Tensor>& weights, const Tensor& input) {
  return forward(spec, weights, input, false, static_cast<std::mt19937_64*>(nullptr), false).probs[1];
}

/// Gradients w.r.t. every parameter given dL/dprobs.
inline std::vector<Tensor> backward(const NetworkSpec& spec, const std::vector<Tensor>& weights,
                                    const ForwardTrace& trace, const Tensor& d_probs, Tensor* d_input = nullptr) {
  if (trace.layers.size() != spec.layers.size()) fail(ErrorKind::shape, "backward needs a full forward trace");
  std::vector<Tensor> grads(weights.size());
  std::size_t param = weights.size();
  Tensor d = d_probs;
  for (std::size_t i = spec.layers.size(); i-- > 0;) {
    const LayerSpec& l = spec.layers[i];
    const LayerCache& cache = trace.layers[i];
    switch (l.kind) {
      case LayerKind::softmax:
        d = softmax2_backward(trace.probs, d);
        break;
      case LayerKind::fully_connected: {
        param -= 2;
        auto g = fully_connected_backward(cache.input, weights[param], d);
        grads[param] = std::move(g.d_params[0]);
        grads[param + 1] = std::move(g.d_params[1]);
        d = std::move(g.d_input);
        break;
      }
      case LayerKind::conv: {
        param -= 2;
        const bool need_input = i > 0 || d_input;
        auto g = conv2d_backward(cache.input, weights[param], d, need_input);
        grads[param] = std::move(g.d_params[0]);
        grads[param + 1] = std::move(g.d_params[1]);
        if (need_input) d = std::move(g.d_input);
        break;
      }
      case LayerKind::leaky_relu:
        d = leaky_relu_backward(cache.input, d, static_cast<real_t>(l.value));
        break;
      case LayerKind::maxpool2:
        d = maxpool2_backward(cache.pool, d);
        break;
      case LayerKind::maxout_fc:
        d = maxout_pairs_backward(cache.maxout, d);
        break;
      case LayerKind::dropout:
        if (!cache.scale.empty())
          for (std::size_t n = 0; n < d.size(); ++n) d[n] *= cache.scale[n];
        break;
    }
  }
  if (d_input) *d_input = std::move(d);
  return grads;
}

struct SampleResult {
  double loss = 0;
  real_t p_ma = 0;
  std::vector<Tensor> grads;
};

/// Binary cross-entropy on P(MA) for one labelled input, with gradients.
template <class Rng = std::mt19937_64>
SampleResult loss_and_gradient(const NetworkSpec& spec, const std::vector<Tensor>& weights, const Tensor& input,
                               int target, bool training, Rng* rng = nullptr) {
  const ForwardTrace trace = forward(spec, weights, input, training, rng);
  const auto loss = bce_loss(trace.probs[1], target);
  const Tensor d_probs({2}, {real_t{0}, loss.d_p});
  return {double(loss.loss), trace.probs[1], backward(spec, weights, trace, d_probs)};
}

}  // namespace macnn
