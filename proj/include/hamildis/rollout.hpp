#pragma once

// Treats a trained decoder as a time-evolution model: fixes the latent
// parameter argument, exposes the decoder as a vector field over phase
// space and integrates it with the adaptive solver.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "hamildis/checkpoint.hpp"
#include "hamildis/dynamics.hpp"
#include "hamildis/nets.hpp"

namespace hamildis {

/// Latent vector supplied to a decoder during generation; inactive slots
/// are exactly zero.
struct ParameterArgument {
  std::array<double, 3> z{0.0, 0.0, 0.0};

  void validate() const {
    for (double v : z) {
      if (!std::isfinite(v)) throw std::invalid_argument("parameter argument must be finite");
    }
  }
};

struct GeneratedTrajectory {
  std::vector<double> times;
  std::vector<PhaseState> states;
  ParameterArgument arg;
  ModelKind kind = ModelKind::consci;
  std::vector<double> h_star;  // consci only; empty for baseline
};

/// Decoder bound to a fixed parameter argument. Evaluation-mode forward
/// only; the consci variant keeps a persistent tape with the weights at the
/// bottom and rewinds past them per call.
class DecoderField {
 public:
  DecoderField(const ModelCheckpoint& ckpt, ParameterArgument arg)
      : kind_(ckpt.kind), dec_(ckpt.decoder), arg_(arg) {
    arg_.validate();
    if (kind_ == ModelKind::consci) {
      tape_ = std::make_unique<ad::Tape>();
      tape_->reserve(dec_.param_count() + 512);
      weights_.reserve(dec_.param_count());
      for (double v : dec_.params()) weights_.push_back(tape_->constant(v));
      base_ = tape_->mark();
    }
  }

  ModelKind kind() const { return kind_; }
  const ParameterArgument& arg() const { return arg_; }

  PhaseDeriv operator()(const PhaseState& s) const {
    if (kind_ == ModelKind::baseline) {
      return baseline_decoder(dec_, s, arg_.z);
    }
    double h = 0.0;
    return consci_eval(s, h);
  }

  /// Energy-like decoder output at a state (consci only).
  double h_star(const PhaseState& s) const {
    if (kind_ != ModelKind::consci) {
      throw std::logic_error("h_star is only defined for consci decoders");
    }
    double h = 0.0;
    consci_eval(s, h);
    return h;
  }

 private:
  PhaseDeriv consci_eval(const PhaseState& s, double& h_out) const {
    ad::Tape& tape = *tape_;
    tape.rewind(base_);
    const ad::Var q = tape.leaf(s.q);
    const ad::Var p = tape.leaf(s.p);
    const std::array<ad::Var, 5> in = {q, p, tape.constant(arg_.z[0]),
                                       tape.constant(arg_.z[1]), tape.constant(arg_.z[2])};
    ad::Var h;
    try {
      h = Mlp::forward_on_tape(dec_.spec(), weights_, in, tape)[0];
    } catch (const std::overflow_error&) {
      throw std::runtime_error(
          "decoder field: non-finite H* at q=" + std::to_string(s.q) +
          " p=" + std::to_string(s.p) + " z=(" + std::to_string(arg_.z[0]) + "," +
          std::to_string(arg_.z[1]) + "," + std::to_string(arg_.z[2]) + ")");
    }
    std::array<double, 2> g{};
    const std::array<ad::Var, 2> coords = {q, p};
    tape.gradient_accumulate(h, coords, g);
    h_out = h.value();
    return {g[1], -g[0]};
  }

  ModelKind kind_;
  Mlp dec_;
  ParameterArgument arg_;
  std::unique_ptr<ad::Tape> tape_;
  std::vector<ad::Var> weights_;
  ad::TapeMark base_{};
};

/// Integrates the decoder field from state0 over [t0, t1] and records the
/// H*-series for conservative decoders. t0 == t1 returns the single state.
inline GeneratedTrajectory generate(const ModelCheckpoint& ckpt, ParameterArgument arg,
                                    PhaseState state0, double t0, double t1, double tol,
                                    int n_points = 200) {
  if (t1 < t0) throw std::invalid_argument("generate: t1 must be >= t0");
  DecoderField field(ckpt, arg);

  GeneratedTrajectory traj;
  traj.arg = arg;
  traj.kind = ckpt.kind;
  if (t0 == t1) {
    traj.times = {t0};
    traj.states = {state0};
  } else {
    traj.times = linspace(t0, t1, n_points);
    traj.states = integrate_adaptive(state0, [&field](const PhaseState& s) { return field(s); },
                                     traj.times, tol);
  }
  if (ckpt.kind == ModelKind::consci) {
    traj.h_star.reserve(traj.states.size());
    for (const PhaseState& s : traj.states) traj.h_star.push_back(field.h_star(s));
  }
  return traj;
}

/// Mean over time points of the squared error summed over (q, p).
inline double trajectory_mse(std::span<const PhaseState> a, std::span<const PhaseState> b) {
  if (a.size() != b.size() || a.empty()) {
    throw std::invalid_argument("trajectory_mse: output grid mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dq = a[i].q - b[i].q;
    const double dp = a[i].p - b[i].p;
    acc += dq * dq + dp * dp;
  }
  return acc / static_cast<double>(a.size());
}

inline double trajectory_mse(const GeneratedTrajectory& generated, const Trajectory& truth) {
  if (generated.times.size() != truth.times.size()) {
    throw std::invalid_argument("trajectory_mse: output grid mismatch");
  }
  for (std::size_t i = 0; i < generated.times.size(); ++i) {
    if (std::abs(generated.times[i] - truth.times[i]) > 1e-9) {
      throw std::invalid_argument("trajectory_mse: output grid mismatch");
    }
  }
  return trajectory_mse(generated.states, truth.states);
}

/// Relative drift of the recorded H*-series along the trajectory.
inline double h_star_drift(const GeneratedTrajectory& traj) {
  if (traj.h_star.empty()) return 0.0;
  const double h0 = traj.h_star.front();
  const double denom = std::max(std::abs(h0), 1e-12);
  double worst = 0.0;
  for (double h : traj.h_star) worst = std::max(worst, std::abs(h - h0) / denom);
  return worst;
}

/// CSV columns t, q, p, H_star (empty for baseline) plus a JSON sidecar
/// with the argument, model kind and tolerance.
inline void write_trajectory_csv(const GeneratedTrajectory& traj,
                                 const std::filesystem::path& csv_file, double tol) {
  if (csv_file.has_parent_path()) std::filesystem::create_directories(csv_file.parent_path());
  std::ofstream out(csv_file, std::ios::binary);
  if (!out) throw std::runtime_error("rollout: cannot write " + csv_file.string());
  out << "t,q,p,H_star\n";
  char buf[200];
  for (std::size_t i = 0; i < traj.times.size(); ++i) {
    if (traj.h_star.empty()) {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,\n", traj.times[i],
                    traj.states[i].q, traj.states[i].p);
    } else {
      std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", traj.times[i],
                    traj.states[i].q, traj.states[i].p, traj.h_star[i]);
    }
    out << buf;
  }

  nlohmann::json side;
  side["arg"] = traj.arg.z;
  side["model"] = model_name(traj.kind);
  side["tol"] = tol;
  side["points"] = traj.times.size();
  std::filesystem::path side_file = csv_file;
  side_file.replace_extension(".json");
  std::ofstream sf(side_file, std::ios::binary);
  sf << side.dump(2) << '\n';
}

}  // namespace hamildis
