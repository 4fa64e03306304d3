#pragma once

// Objectives and the training loop. The dynamics term is the mean squared
// error of the decoder's predicted time evolutions against the stored
// targets; the KL term pulls the encoder posterior toward a standard
// normal and is weighted by beta. For the Hamiltonian model the predicted
// evolutions are input-gradients of H*, so the weight gradient runs
// through a second differentiation pass (create_graph).

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "hamildis/checkpoint.hpp"
#include "hamildis/dataset.hpp"
#include "hamildis/nets.hpp"
#include "hamildis/rng.hpp"

namespace hamildis {

struct TrainingConfig {
  ModelKind kind = ModelKind::consci;
  double beta = 0.005;
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 40;
  std::uint64_t seed = 0;
  int threads = 1;
  double clip_norm = 10.0;
  bool resample_aux = false;

  void validate() const {
    if (beta < 0.0) throw std::invalid_argument("training: beta must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("training: batch size must be >= 1");
    if (!(lr > 0.0)) throw std::invalid_argument("training: learning rate must be > 0");
    if (epochs < 1) throw std::invalid_argument("training: epochs must be >= 1");
  }
};

struct LossReport {
  int epoch = -1;
  int batch = -1;
  double dynamics = 0.0;
  double kl = 0.0;
  double total = 0.0;
};

/// -1/2 sum_i (1 + logvar_i - mu_i^2 - exp(logvar_i)) for one code.
inline double kl_divergence(const LatentCode& code) {
  double acc = 0.0;
  for (std::size_t i = 0; i < 3; ++i) {
    acc += 1.0 + code.logvar[i] - code.mu[i] * code.mu[i] - std::exp(code.logvar[i]);
  }
  return -0.5 * acc;
}

namespace detail {

struct ChunkAccum {
  double dyn = 0.0;
  double kl = 0.0;
  std::vector<double> grad;
};

// Builds the per-sample graph on `tape` after the parameter leaves and
// accumulates loss values (and, when grad is non-empty, weight gradients).
inline void loss_sample(ModelKind kind, const MlpSpec& enc_spec, const MlpSpec& dec_spec,
                        std::span<const ad::Var> all_params, std::size_t enc_count,
                        const NormStats& norm, double beta, const Sample& s,
                        const std::array<double, 3>* eps, ad::Tape& tape, ad::TapeMark wm,
                        ChunkAccum& acc, bool with_grad) {
  tape.rewind(wm);

  const std::vector<double> obs = norm.apply(s.observation);
  std::vector<ad::Var> obs_vars;
  obs_vars.reserve(obs.size());
  for (double v : obs) obs_vars.push_back(tape.constant(v));

  auto enc_params = all_params.first(enc_count);
  auto dec_params = all_params.subspan(enc_count);

  auto enc_out = Mlp::forward_on_tape(enc_spec, enc_params, obs_vars, tape);
  std::array<ad::Var, 3> mu = {enc_out[0], enc_out[1], enc_out[2]};
  std::array<ad::Var, 3> lv = {enc_out[3], enc_out[4], enc_out[5]};

  std::array<ad::Var, 3> z{};
  for (std::size_t i = 0; i < 3; ++i) {
    z[i] = eps != nullptr ? mu[i] + (*eps)[i] * ad::exp(0.5 * lv[i]) : mu[i];
  }

  ad::Var err;
  if (kind == ModelKind::consci) {
    const ad::Var q = tape.leaf(s.aux.q);
    const ad::Var p = tape.leaf(s.aux.p);
    const std::array<ad::Var, 5> in5 = {q, p, z[0], z[1], z[2]};
    const ad::Var h = Mlp::forward_on_tape(dec_spec, dec_params, in5, tape)[0];
    auto g = ad::grad(h, {q, p}, /*create_graph=*/with_grad);
    const ad::Var dq_hat = g[1];
    const ad::Var dp_hat = -g[0];
    err = ad::square(dq_hat - s.target.dq) + ad::square(dp_hat - s.target.dp);
  } else {
    const std::array<ad::Var, 5> in5 = {tape.constant(s.aux.q), tape.constant(s.aux.p),
                                        z[0], z[1], z[2]};
    auto out = Mlp::forward_on_tape(dec_spec, dec_params, in5, tape);
    err = ad::square(out[0] - s.target.dq) + ad::square(out[1] - s.target.dp);
  }

  ad::Var kl_sum = tape.constant(0.0);
  for (std::size_t i = 0; i < 3; ++i) {
    kl_sum = kl_sum + (1.0 + lv[i] - ad::square(mu[i]) - ad::exp(lv[i]));
  }
  const ad::Var kl = -0.5 * kl_sum;
  const ad::Var total = err + beta * kl;

  if (with_grad) {
    tape.gradient_accumulate(total, all_params, acc.grad);
  }
  acc.dyn += err.value();
  acc.kl += kl.value();
}

// Fixed-size chunks summed in chunk order, so the result is identical for
// any thread count.
inline constexpr std::size_t kChunk = 32;

inline LossReport batch_loss(ModelKind kind, const Mlp& enc, const Mlp& dec,
                             const NormStats& norm, double beta,
                             std::span<const Sample* const> batch,
                             std::span<const std::array<double, 3>> eps,
                             std::span<double> grad_out, int threads) {
  if (batch.empty()) throw std::invalid_argument("loss: empty batch");
  const bool with_grad = !grad_out.empty();
  const std::size_t n_params = enc.param_count() + dec.param_count();
  if (with_grad && grad_out.size() != n_params) {
    throw std::invalid_argument("loss: gradient buffer size mismatch");
  }
  if (!eps.empty() && eps.size() != batch.size()) {
    throw std::invalid_argument("loss: eps count mismatch");
  }

  const std::size_t n_chunks = (batch.size() + kChunk - 1) / kChunk;
  std::vector<ChunkAccum> accums(n_chunks);

  auto run_chunk = [&](std::size_t ci, ad::Tape& tape) {
    ChunkAccum& acc = accums[ci];
    if (with_grad) acc.grad.assign(n_params, 0.0);
    tape.clear();
    std::vector<ad::Var> all_params;
    all_params.reserve(n_params);
    for (double v : enc.params()) all_params.push_back(tape.leaf(v));
    for (double v : dec.params()) all_params.push_back(tape.leaf(v));
    const ad::TapeMark wm = tape.mark();
    const std::size_t lo = ci * kChunk;
    const std::size_t hi = std::min(batch.size(), lo + kChunk);
    for (std::size_t i = lo; i < hi; ++i) {
      loss_sample(kind, enc.spec(), dec.spec(), all_params, enc.param_count(), norm, beta,
                  *batch[i], eps.empty() ? nullptr : &eps[i], tape, wm, acc, with_grad);
    }
  };

  const int workers = std::max(1, std::min<int>(threads, static_cast<int>(n_chunks)));
  if (workers == 1) {
    ad::Tape tape;
    for (std::size_t ci = 0; ci < n_chunks; ++ci) run_chunk(ci, tape);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          ad::Tape tape;
          for (std::size_t ci = static_cast<std::size_t>(w); ci < n_chunks;
               ci += static_cast<std::size_t>(workers)) {
            run_chunk(ci, tape);
          }
        } catch (...) {
          errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  const double inv_n = 1.0 / static_cast<double>(batch.size());
  LossReport report;
  for (const ChunkAccum& acc : accums) {
    report.dynamics += acc.dyn;
    report.kl += acc.kl;
  }
  report.dynamics *= inv_n;
  report.kl *= inv_n;
  report.total = report.dynamics + beta * report.kl;
  if (with_grad) {
    for (const ChunkAccum& acc : accums) {
      for (std::size_t i = 0; i < n_params; ++i) grad_out[i] += acc.grad[i];
    }
    for (double& g : grad_out) g *= inv_n;
  }
  return report;
}

inline std::vector<const Sample*> to_ptrs(std::span<const Sample> batch) {
  std::vector<const Sample*> p;
  p.reserve(batch.size());
  for (const Sample& s : batch) p.push_back(&s);
  return p;
}

}  // namespace detail

/// Loss of Hamiltonian-decoder models. With `eps` the latent sample is
/// mu + eps * exp(logvar/2) per sample; without, z = mu (eval mode). A
/// non-empty `grad_out` additionally accumulates d(total)/d(enc params,
/// dec params).
inline LossReport consci_loss(std::span<const Sample> batch, const Mlp& enc, const Mlp& dec,
                              const NormStats& norm, double beta,
                              std::span<const std::array<double, 3>> eps = {},
                              std::span<double> grad_out = {}, int threads = 1) {
  auto ptrs = detail::to_ptrs(batch);
  return detail::batch_loss(ModelKind::consci, enc, dec, norm, beta, ptrs, eps, grad_out,
                            threads);
}

/// Loss of the direct-regression baseline, same shape as consci_loss.
inline LossReport baseline_loss(std::span<const Sample> batch, const Mlp& enc,
                                const Mlp& dec, const NormStats& norm, double beta,
                                std::span<const std::array<double, 3>> eps = {},
                                std::span<double> grad_out = {}, int threads = 1) {
  auto ptrs = detail::to_ptrs(batch);
  return detail::batch_loss(ModelKind::baseline, enc, dec, norm, beta, ptrs, eps, grad_out,
                            threads);
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  long t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

inline void adam_step(std::span<double> params, std::span<const double> grad,
                      AdamState& state, double lr) {
  if (params.size() != grad.size() || params.size() != state.m.size()) {
    throw std::invalid_argument("adam: shape mismatch");
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

/// Per-feature mean and standard deviation over the training observations.
inline NormStats compute_norm_stats(std::span<const Sample> samples) {
  if (samples.empty()) throw std::invalid_argument("norm stats: empty dataset");
  const std::size_t d = samples.front().observation.size();
  NormStats stats;
  stats.mean.assign(d, 0.0);
  stats.stdev.assign(d, 0.0);
  for (const Sample& s : samples) {
    for (std::size_t i = 0; i < d; ++i) stats.mean[i] += s.observation[i];
  }
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  for (double& m : stats.mean) m *= inv_n;
  for (const Sample& s : samples) {
    for (std::size_t i = 0; i < d; ++i) {
      const double c = s.observation[i] - stats.mean[i];
      stats.stdev[i] += c * c;
    }
  }
  for (double& v : stats.stdev) v = std::sqrt(v * inv_n);
  return stats;
}

struct TrainResult {
  ModelCheckpoint checkpoint;
  std::vector<LossReport> history;
  bool aborted = false;
  std::string abort_reason;
};

/// Full training loop: seeded shuffled mini-batches, Adam with global-norm
/// gradient clipping, per-batch loss history. A non-finite loss aborts and
/// returns the last good weights.
inline TrainResult train(const TrainingConfig& cfg, const Dataset& ds) {
  cfg.validate();
  if (ds.samples.empty()) throw std::invalid_argument("train: empty dataset");
  const int traj_len = ds.spec.traj_len;
  if (ds.samples.front().observation.size() != static_cast<std::size_t>(2 * traj_len)) {
    throw std::invalid_argument("train: observation length does not match traj_len");
  }
  if (cfg.resample_aux && ds.clean.empty()) {
    throw std::invalid_argument("train: aux resampling needs in-memory clean trajectories");
  }

  const NormStats norm = compute_norm_stats(ds.samples);

  RngStream init_rng(derive_seed(cfg.seed, "init"));
  Mlp enc = Mlp::glorot(default_encoder_spec(traj_len), init_rng);
  Mlp dec = Mlp::glorot(cfg.kind == ModelKind::consci ? default_hnn_decoder_spec()
                                                      : default_baseline_decoder_spec(),
                        init_rng);

  RngStream shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  RngStream reparam_rng(derive_seed(cfg.seed, "reparam"));
  RngStream aux_rng(derive_seed(cfg.seed, "aux"));

  AdamState st_enc(enc.param_count());
  AdamState st_dec(dec.param_count());
  const std::size_t n_params = enc.param_count() + dec.param_count();
  std::vector<double> grad(n_params);

  const std::size_t n = ds.samples.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  std::vector<Sample> resampled;  // per-epoch aux picks, optional

  TrainResult result;
  const int batches_per_epoch =
      static_cast<int>((n + static_cast<std::size_t>(cfg.batch_size) - 1) /
                       static_cast<std::size_t>(cfg.batch_size));
  result.history.reserve(static_cast<std::size_t>(cfg.epochs * batches_per_epoch));

  for (int epoch = 0; epoch < cfg.epochs && !result.aborted; ++epoch) {
    shuffle_rng.shuffle(order);

    const std::vector<Sample>* pool = &ds.samples;
    if (cfg.resample_aux) {
      resampled = ds.samples;
      for (std::size_t i = 0; i < n; ++i) {
        const Trajectory& tr = ds.clean[i];
        const std::size_t idx = aux_rng.below(tr.times.size());
        resampled[i].t_aux = tr.times[idx];
        resampled[i].aux = tr.states[idx];
        resampled[i].target = time_evolution(tr.states[idx], tr.params);
      }
      pool = &resampled;
    }

    for (int b = 0; b < batches_per_epoch && !result.aborted; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(cfg.batch_size);
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));

      std::vector<const Sample*> batch;
      batch.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&(*pool)[order[i]]);

      std::vector<std::array<double, 3>> eps(batch.size());
      for (auto& e : eps) {
        e = {reparam_rng.normal(), reparam_rng.normal(), reparam_rng.normal()};
      }

      std::fill(grad.begin(), grad.end(), 0.0);
      LossReport report;
      try {
        report = detail::batch_loss(cfg.kind, enc, dec, norm, cfg.beta, batch, eps, grad,
                                    cfg.threads);
      } catch (const std::overflow_error& e) {
        result.aborted = true;
        result.abort_reason = std::string("non-finite forward pass: ") + e.what();
        break;
      }
      if (!std::isfinite(report.total)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) +
                              " batch " + std::to_string(b);
        break;
      }

      if (cfg.clip_norm > 0.0) {
        double norm2 = 0.0;
        for (double g : grad) norm2 += g * g;
        const double gn = std::sqrt(norm2);
        if (gn > cfg.clip_norm) {
          const double scale = cfg.clip_norm / gn;
          for (double& g : grad) g *= scale;
        }
      }

      adam_step(enc.params(), std::span<const double>(grad).first(enc.param_count()),
                st_enc, cfg.lr);
      adam_step(dec.params(), std::span<const double>(grad).subspan(enc.param_count()),
                st_dec, cfg.lr);

      report.epoch = epoch;
      report.batch = b;
      result.history.push_back(report);
    }
  }

  ModelCheckpoint ckpt;
  ckpt.kind = cfg.kind;
  ckpt.task = ds.spec.system;
  ckpt.traj_len = traj_len;
  ckpt.beta = cfg.beta;
  ckpt.seed = cfg.seed;
  ckpt.encoder = std::move(enc);
  ckpt.decoder = std::move(dec);
  ckpt.norm = norm;
  ckpt.training_meta = {
      {"epochs", cfg.epochs},
      {"lr", cfg.lr},
      {"batch_size", cfg.batch_size},
      {"clip_norm", cfg.clip_norm},
      {"dataset_seed", ds.spec.seed},
      {"dataset_count", ds.spec.count},
      {"aborted", result.aborted},
  };
  if (!result.history.empty()) {
    ckpt.training_meta["final_dynamics"] = result.history.back().dynamics;
    ckpt.training_meta["final_kl"] = result.history.back().kl;
    ckpt.training_meta["final_total"] = result.history.back().total;
  }
  result.checkpoint = std::move(ckpt);
  return result;
}

inline void write_loss_history(std::span<const LossReport> history,
                               const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("loss history: cannot write " + file.string());
  out << "epoch,batch,dynamics,kl,total\n";
  char buf[96];
  for (const LossReport& r : history) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g\n", r.epoch, r.batch,
                  r.dynamics, r.kl, r.total);
    out << buf;
  }
}

}  // namespace hamildis
