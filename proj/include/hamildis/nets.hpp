#pragma once

// Network building blocks: a plain MLP with flat parameter storage, the
// variational encoder head, the Hamiltonian decoder and the baseline
// decoder. Forward passes exist twice: a double-valued path for inference
// and a tape path for training.

#include <array>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "hamildis/autodiff.hpp"
#include "hamildis/dynamics.hpp"
#include "hamildis/rng.hpp"

namespace hamildis {

enum class ModelKind { consci, baseline };

inline const char* model_name(ModelKind k) {
  return k == ModelKind::consci ? "consci" : "baseline";
}

inline ModelKind parse_model(const std::string& s) {
  if (s == "consci") return ModelKind::consci;
  if (s == "baseline") return ModelKind::baseline;
  throw std::invalid_argument("unknown model kind: " + s);
}

enum class Activation { identity, tanh, elu, square };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::tanh: return "tanh";
    case Activation::elu: return "elu";
    case Activation::square: return "square";
  }
  return "identity";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "identity") return Activation::identity;
  if (s == "tanh") return Activation::tanh;
  if (s == "elu") return Activation::elu;
  if (s == "square") return Activation::square;
  throw std::invalid_argument("unknown activation: " + s);
}

inline double apply_activation(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return std::tanh(x);
    case Activation::elu: return x > 0.0 ? x : std::expm1(x);
    case Activation::square: return x * x;
  }
  return x;
}

inline ad::Var apply_activation(Activation a, ad::Var x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::tanh: return ad::tanh(x);
    case Activation::elu: return ad::elu(x);
    case Activation::square: return ad::square(x);
  }
  return x;
}

/// Hidden activation applies to every layer except the last; the output
/// layer is always linear.
struct MlpSpec {
  std::vector<int> widths;
  Activation hidden = Activation::tanh;

  void validate() const {
    if (widths.size() < 3) throw std::invalid_argument("mlp: need at least one hidden layer");
    for (int w : widths) {
      if (w < 1) throw std::invalid_argument("mlp: widths must be >= 1");
    }
  }
};

class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < spec_.widths.size(); ++l) {
      const auto in = static_cast<std::size_t>(spec_.widths[l]);
      const auto out = static_cast<std::size_t>(spec_.widths[l + 1]);
      w_off_.push_back(total);
      total += in * out;
      b_off_.push_back(total);
      total += out;
    }
    params_.assign(total, 0.0);
  }

  /// Per-layer uniform init in +-sqrt(6 / (fan_in + fan_out)); biases zero.
  static Mlp glorot(MlpSpec spec, RngStream& rng) {
    Mlp net(std::move(spec));
    for (int l = 0; l < net.layer_count(); ++l) {
      const double fan_in = net.spec_.widths[static_cast<std::size_t>(l)];
      const double fan_out = net.spec_.widths[static_cast<std::size_t>(l) + 1];
      const double r = std::sqrt(6.0 / (fan_in + fan_out));
      for (double& w : net.weight(l)) w = rng.uniform(-r, r);
    }
    return net;
  }

  const MlpSpec& spec() const { return spec_; }
  int layer_count() const { return static_cast<int>(spec_.widths.size()) - 1; }
  int input_width() const { return spec_.widths.front(); }
  int output_width() const { return spec_.widths.back(); }
  std::size_t param_count() const { return params_.size(); }

  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::span<double> weight(int layer) {
    return {params_.data() + w_off_[static_cast<std::size_t>(layer)], weight_count(layer)};
  }
  std::span<const double> weight(int layer) const {
    return {params_.data() + w_off_[static_cast<std::size_t>(layer)], weight_count(layer)};
  }
  std::span<double> bias(int layer) {
    return {params_.data() + b_off_[static_cast<std::size_t>(layer)],
            static_cast<std::size_t>(spec_.widths[static_cast<std::size_t>(layer) + 1])};
  }
  std::span<const double> bias(int layer) const {
    return {params_.data() + b_off_[static_cast<std::size_t>(layer)],
            static_cast<std::size_t>(spec_.widths[static_cast<std::size_t>(layer) + 1])};
  }

  std::vector<double> forward(std::span<const double> input) const {
    if (static_cast<int>(input.size()) != input_width()) {
      throw std::invalid_argument("mlp: input dimension mismatch");
    }
    std::vector<double> x(input.begin(), input.end());
    std::vector<double> y;
    for (int l = 0; l < layer_count(); ++l) {
      const auto in = static_cast<std::size_t>(spec_.widths[static_cast<std::size_t>(l)]);
      const auto out = static_cast<std::size_t>(spec_.widths[static_cast<std::size_t>(l) + 1]);
      const auto W = weight(l);
      const auto B = bias(l);
      y.assign(out, 0.0);
      for (std::size_t j = 0; j < out; ++j) {
        double acc = B[j];
        const double* row = W.data() + j * in;
        for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
        y[j] = l + 1 < layer_count() ? apply_activation(spec_.hidden, acc) : acc;
      }
      x.swap(y);
    }
    return x;
  }

  /// One differentiable leaf per parameter, in flat storage order.
  std::vector<ad::Var> leaves_on_tape(ad::Tape& tape) const {
    std::vector<ad::Var> vars;
    vars.reserve(params_.size());
    for (double v : params_) vars.push_back(tape.leaf(v));
    return vars;
  }

  /// Tape forward with an externally supplied parameter vector (leaves or
  /// constants), laid out as by leaves_on_tape.
  static std::vector<ad::Var> forward_on_tape(const MlpSpec& spec,
                                              std::span<const ad::Var> params,
                                              std::span<const ad::Var> input,
                                              ad::Tape& tape) {
    spec.validate();
    if (static_cast<int>(input.size()) != spec.widths.front()) {
      throw std::invalid_argument("mlp: input dimension mismatch");
    }
    const int layers = static_cast<int>(spec.widths.size()) - 1;
    std::vector<ad::Var> x(input.begin(), input.end());
    std::size_t off = 0;
    for (int l = 0; l < layers; ++l) {
      const auto in = static_cast<std::size_t>(spec.widths[static_cast<std::size_t>(l)]);
      const auto out = static_cast<std::size_t>(spec.widths[static_cast<std::size_t>(l) + 1]);
      std::span<const ad::Var> W = params.subspan(off, in * out);
      std::span<const ad::Var> B = params.subspan(off + in * out, out);
      off += in * out + out;
      std::vector<ad::Var> y;
      y.reserve(out);
      for (std::size_t j = 0; j < out; ++j) {
        ad::Var acc = tape.affine(B[j], W.subspan(j * in, in), x);
        y.push_back(l + 1 < layers ? apply_activation(spec.hidden, acc) : acc);
      }
      x.swap(y);
    }
    if (off != params.size()) throw std::invalid_argument("mlp: parameter count mismatch");
    return x;
  }

 private:
  std::size_t weight_count(int layer) const {
    const auto l = static_cast<std::size_t>(layer);
    return static_cast<std::size_t>(spec_.widths[l]) *
           static_cast<std::size_t>(spec_.widths[l + 1]);
  }

  MlpSpec spec_;
  std::vector<double> params_;
  std::vector<std::size_t> w_off_, b_off_;
};

/// Per-feature observation normalization, frozen into the checkpoint.
struct NormStats {
  std::vector<double> mean;
  std::vector<double> stdev;

  std::vector<double> apply(std::span<const double> obs) const {
    if (obs.size() != mean.size() || obs.size() != stdev.size()) {
      throw std::invalid_argument("normalization: dimension mismatch");
    }
    std::vector<double> out(obs.size());
    for (std::size_t i = 0; i < obs.size(); ++i) {
      out[i] = (obs[i] - mean[i]) / std::max(stdev[i], 1e-8);
    }
    return out;
  }
};

inline constexpr int kLatentSize = 3;

struct LatentCode {
  std::array<double, 3> mu{};
  std::array<double, 3> logvar{};
  std::array<double, 3> z{};
};

enum class PassMode { train, eval };

inline MlpSpec default_encoder_spec(int traj_len) {
  return MlpSpec{{2 * traj_len, 128, 64, 2 * kLatentSize}, Activation::elu};
}

// tanh hidden units: smooth second derivatives under double backprop
inline MlpSpec default_hnn_decoder_spec() {
  return MlpSpec{{2 + kLatentSize, 64, 64, 1}, Activation::tanh};
}

inline MlpSpec default_baseline_decoder_spec() {
  return MlpSpec{{2 + kLatentSize, 64, 64, 2}, Activation::tanh};
}

/// Encoder head: normalized observation in, (mu, logvar, z) out.
/// Training mode samples z = mu + eps * exp(logvar / 2); eval returns mu.
inline LatentCode encoder_forward(const Mlp& enc, const NormStats& norm,
                                  std::span<const double> observation, PassMode mode,
                                  RngStream* reparam = nullptr) {
  if (static_cast<int>(observation.size()) != enc.input_width()) {
    throw std::invalid_argument("encoder: observation dimension mismatch");
  }
  if (enc.output_width() != 2 * kLatentSize) {
    throw std::invalid_argument("encoder: output head must be 2 x latent size");
  }
  const std::vector<double> out = enc.forward(norm.apply(observation));
  LatentCode code;
  for (int i = 0; i < kLatentSize; ++i) {
    code.mu[static_cast<std::size_t>(i)] = out[static_cast<std::size_t>(i)];
    code.logvar[static_cast<std::size_t>(i)] = out[static_cast<std::size_t>(kLatentSize + i)];
  }
  if (mode == PassMode::train) {
    if (reparam == nullptr) {
      throw std::invalid_argument("encoder: train mode needs a reparameterization stream");
    }
    for (int i = 0; i < kLatentSize; ++i) {
      const auto k = static_cast<std::size_t>(i);
      code.z[k] = code.mu[k] + reparam->normal() * std::exp(0.5 * code.logvar[k]);
    }
  } else {
    code.z = code.mu;
  }
  return code;
}

/// Fixed decoder input ordering (q, p, z1, z2, z3).
inline std::array<double, 5> interface_concat(std::span<const double, 3> z,
                                              const PhaseState& s) {
  return {s.q, s.p, z[0], z[1], z[2]};
}

struct HnnOutput {
  double h_star = 0.0;
  double dq = 0.0;
  double dp = 0.0;
};

/// HNN decoder evaluation: H* plus the symplectic-gradient field
/// (dH*/dp, -dH*/dq). Derivatives are taken only with respect to the
/// coordinates, never the latent slots. Builds a transient tape; hot
/// loops should use rollout's DecoderField instead.
inline HnnOutput hnn_decoder(const Mlp& dec, const PhaseState& s,
                             std::span<const double, 3> z) {
  if (dec.input_width() != 5 || dec.output_width() != 1) {
    throw std::invalid_argument("hnn decoder: expected 5 inputs and 1 output");
  }
  ad::Tape tape;
  tape.reserve(dec.param_count() + 64);
  std::vector<ad::Var> pv;
  pv.reserve(dec.param_count());
  for (double v : dec.params()) pv.push_back(tape.constant(v));
  const ad::Var q = tape.leaf(s.q), p = tape.leaf(s.p);
  const std::array<ad::Var, 5> in = {q, p, tape.constant(z[0]), tape.constant(z[1]),
                                     tape.constant(z[2])};
  ad::Var h;
  try {
    h = Mlp::forward_on_tape(dec.spec(), pv, in, tape)[0];
  } catch (const std::overflow_error&) {
    throw std::runtime_error("hnn decoder: non-finite H* at q=" + std::to_string(s.q) +
                             " p=" + std::to_string(s.p));
  }
  std::array<double, 2> g{};
  const std::array<ad::Var, 2> coords = {q, p};
  tape.gradient_accumulate(h, coords, g);
  return {h.value(), g[1], -g[0]};
}

/// Baseline decoder: direct two-output regression, no differentiation.
inline PhaseDeriv baseline_decoder(const Mlp& dec, const PhaseState& s,
                                   std::span<const double, 3> z) {
  if (dec.input_width() != 5 || dec.output_width() != 2) {
    throw std::invalid_argument("baseline decoder: expected 5 inputs and 2 outputs");
  }
  const auto in = interface_concat(z, s);
  const auto out = dec.forward(in);
  if (!std::isfinite(out[0]) || !std::isfinite(out[1])) {
    throw std::runtime_error("baseline decoder: non-finite output at q=" +
                             std::to_string(s.q) + " p=" + std::to_string(s.p));
  }
  return {out[0], out[1]};
}

}  // namespace hamildis
