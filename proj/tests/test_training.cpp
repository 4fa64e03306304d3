#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "hamildis/training.hpp"

using namespace hamildis;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

// Tiny spring dataset for loss-level tests.
Dataset tiny_dataset(int count, int traj_len = 6, double sigma = 0.01) {
  DatasetSpec spec;
  spec.system = SystemKind::spring;
  spec.count = count;
  spec.traj_len = traj_len;
  spec.noise.sigma = sigma;
  spec.seed = 13;
  return generate_dataset(spec);
}

NormStats identity_norm(std::size_t n) {
  NormStats s;
  s.mean.assign(n, 0.0);
  s.stdev.assign(n, 1.0);
  return s;
}

// 5 -> 2 -> 1 square net computing the unit-spring Hamiltonian q^2/2 + p^2/2.
Mlp true_spring_hnn() {
  Mlp net(MlpSpec{{5, 2, 1}, Activation::square});
  net.weight(0)[0] = 1.0;
  net.weight(0)[6] = 1.0;
  net.weight(1)[0] = 0.5;
  net.weight(1)[1] = 0.5;
  return net;
}

}  // namespace

TEST_CASE("kl divergence closed form") {
  LatentCode zero;
  CHECK(kl_divergence(zero) == 0.0);

  LatentCode one;
  one.mu = {1.0, 0.0, 0.0};
  CHECK_THAT(kl_divergence(one), WithinAbs(0.5, 1e-12));

  RngStream rng(derive_seed(1, "kl"));
  for (int i = 0; i < 1000; ++i) {
    LatentCode c;
    for (auto& v : c.mu) v = rng.uniform(-3, 3);
    for (auto& v : c.logvar) v = rng.uniform(-3, 3);
    CHECK(kl_divergence(c) >= 0.0);
  }
}

TEST_CASE("exact decoder and zero code give zero consci loss") {
  // unit spring so the hand-set decoder matches the generating system
  DatasetSpec spec;
  spec.system = SystemKind::spring;
  spec.count = 6;
  spec.traj_len = 6;
  spec.noise.sigma = 0.0;
  spec.k_min = spec.k_max = 1.0;
  spec.m_min = spec.m_max = 1.0;
  Dataset ds = generate_dataset(spec);

  Mlp enc(default_encoder_spec(spec.traj_len));  // zero weights: mu = logvar = 0
  Mlp dec = true_spring_hnn();
  auto report = consci_loss(ds.samples, enc, dec, identity_norm(12), 0.005);
  CHECK_THAT(report.dynamics, WithinAbs(0.0, 1e-20));
  CHECK_THAT(report.kl, WithinAbs(0.0, 1e-20));
  CHECK_THAT(report.total, WithinAbs(0.0, 1e-20));
}

TEST_CASE("sigma zero with the true Hamiltonian keeps dynamics under 1e-10") {
  DatasetSpec spec;
  spec.system = SystemKind::spring;
  spec.count = 10;
  spec.traj_len = 8;
  spec.noise.sigma = 0.0;
  spec.k_min = spec.k_max = 1.0;
  spec.m_min = spec.m_max = 1.0;
  Dataset ds = generate_dataset(spec);
  Mlp enc(default_encoder_spec(spec.traj_len));
  Mlp dec = true_spring_hnn();
  auto report = consci_loss(ds.samples, enc, dec, identity_norm(16), 0.0);
  CHECK(report.dynamics < 1e-10);
}

TEST_CASE("beta scaling of the total is exact") {
  Dataset ds = tiny_dataset(8);
  RngStream rng(derive_seed(2, "nets"));
  Mlp enc = Mlp::glorot(default_encoder_spec(ds.spec.traj_len), rng);
  Mlp dec = Mlp::glorot(default_hnn_decoder_spec(), rng);
  NormStats norm = compute_norm_stats(ds.samples);

  auto r0 = consci_loss(ds.samples, enc, dec, norm, 0.0);
  CHECK(r0.total == r0.dynamics);

  auto r1 = consci_loss(ds.samples, enc, dec, norm, 0.01);
  auto r2 = consci_loss(ds.samples, enc, dec, norm, 0.02);
  CHECK(r1.kl == r2.kl);
  CHECK(0.02 * r2.kl == 2.0 * (0.01 * r1.kl));  // beta term doubles exactly
  CHECK_THAT(r2.total - r2.dynamics, WithinRel(2.0 * (r1.total - r1.dynamics), 1e-12));
}

TEST_CASE("baseline loss determinism and monotonicity") {
  Dataset ds = tiny_dataset(8);
  RngStream rng(derive_seed(3, "base"));
  Mlp enc = Mlp::glorot(default_encoder_spec(ds.spec.traj_len), rng);
  Mlp dec = Mlp::glorot(default_baseline_decoder_spec(), rng);
  NormStats norm = compute_norm_stats(ds.samples);

  auto r1 = baseline_loss(ds.samples, enc, dec, norm, 0.005);
  auto r2 = baseline_loss(ds.samples, enc, dec, norm, 0.005);
  CHECK(r1.total == r2.total);

  // perfect predictions are a strict lower bound on the dynamics term
  Mlp zero_dec(default_baseline_decoder_spec());
  auto rz = baseline_loss(ds.samples, enc, zero_dec, norm, 0.0);
  double best = 0.0;
  for (const Sample& s : ds.samples) {
    best += s.target.dq * s.target.dq + s.target.dp * s.target.dp;
  }
  best /= static_cast<double>(ds.samples.size());
  CHECK_THAT(rz.dynamics, WithinRel(best, 1e-12));
}

TEST_CASE("loss is invariant under batch permutation") {
  Dataset ds = tiny_dataset(12);
  RngStream rng(derive_seed(4, "perm"));
  Mlp enc = Mlp::glorot(default_encoder_spec(ds.spec.traj_len), rng);
  Mlp dec = Mlp::glorot(default_hnn_decoder_spec(), rng);
  NormStats norm = compute_norm_stats(ds.samples);

  auto fwd = consci_loss(ds.samples, enc, dec, norm, 0.005);
  std::vector<Sample> reversed(ds.samples.rbegin(), ds.samples.rend());
  auto rev = consci_loss(reversed, enc, dec, norm, 0.005);
  CHECK_THAT(rev.total, WithinRel(fwd.total, 1e-12));
  CHECK_THAT(rev.dynamics, WithinRel(fwd.dynamics, 1e-12));
}

TEST_CASE("threaded batch loss is bit-identical to serial") {
  Dataset ds = tiny_dataset(70);  // 3 chunks of 32
  RngStream rng(derive_seed(5, "thr"));
  Mlp enc = Mlp::glorot(default_encoder_spec(ds.spec.traj_len), rng);
  Mlp dec = Mlp::glorot(default_hnn_decoder_spec(), rng);
  NormStats norm = compute_norm_stats(ds.samples);

  std::vector<std::array<double, 3>> eps(ds.samples.size());
  RngStream er(derive_seed(5, "eps"));
  for (auto& e : eps) e = {er.normal(), er.normal(), er.normal()};

  const std::size_t np = enc.param_count() + dec.param_count();
  std::vector<double> g1(np, 0.0), g2(np, 0.0);
  auto r1 = consci_loss(ds.samples, enc, dec, norm, 0.005, eps, g1, 1);
  auto r2 = consci_loss(ds.samples, enc, dec, norm, 0.005, eps, g2, 3);
  CHECK(r1.total == r2.total);
  CHECK(g1 == g2);
}

TEST_CASE("full weight gradient matches finite differences on a tiny model") {
  // exercises the double-backprop path end to end
  Dataset ds = tiny_dataset(4, /*traj_len=*/3, /*sigma=*/0.01);
  RngStream rng(derive_seed(6, "tiny"));
  Mlp enc = Mlp::glorot(MlpSpec{{6, 4, 6}, Activation::elu}, rng);
  Mlp dec = Mlp::glorot(MlpSpec{{5, 4, 1}, Activation::tanh}, rng);
  NormStats norm = compute_norm_stats(ds.samples);
  const double beta = 0.005;

  std::vector<std::array<double, 3>> eps(ds.samples.size());
  RngStream er(derive_seed(6, "eps"));
  for (auto& e : eps) e = {er.normal(), er.normal(), er.normal()};

  const std::size_t ne = enc.param_count(), nd = dec.param_count();
  std::vector<double> grad(ne + nd, 0.0);
  consci_loss(ds.samples, enc, dec, norm, beta, eps, grad);

  auto loss_at = [&](Mlp& net, std::size_t k, double delta) {
    net.params()[k] += delta;
    const double v = consci_loss(ds.samples, enc, dec, norm, beta, eps).total;
    net.params()[k] -= delta;
    return v;
  };

  const double h = 1e-5;
  for (std::size_t k = 0; k < ne; ++k) {
    const double fd = (loss_at(enc, k, h) - loss_at(enc, k, -h)) / (2 * h);
    const double tol = std::abs(fd) < 1e-3 ? 1e-6 : std::abs(fd) * 1e-3;
    CHECK_THAT(grad[k], WithinAbs(fd, tol));
  }
  for (std::size_t k = 0; k < nd; ++k) {
    const double fd = (loss_at(dec, k, h) - loss_at(dec, k, -h)) / (2 * h);
    const double tol = std::abs(fd) < 1e-3 ? 1e-6 : std::abs(fd) * 1e-3;
    CHECK_THAT(grad[ne + k], WithinAbs(fd, tol));
  }
}

TEST_CASE("baseline weight gradient matches finite differences") {
  Dataset ds = tiny_dataset(4, 3, 0.01);
  RngStream rng(derive_seed(7, "tinyb"));
  Mlp enc = Mlp::glorot(MlpSpec{{6, 4, 6}, Activation::elu}, rng);
  Mlp dec = Mlp::glorot(MlpSpec{{5, 4, 2}, Activation::tanh}, rng);
  NormStats norm = compute_norm_stats(ds.samples);

  std::vector<std::array<double, 3>> eps(ds.samples.size());
  RngStream er(derive_seed(7, "eps"));
  for (auto& e : eps) e = {er.normal(), er.normal(), er.normal()};

  const std::size_t ne = enc.param_count(), nd = dec.param_count();
  std::vector<double> grad(ne + nd, 0.0);
  baseline_loss(ds.samples, enc, dec, norm, 0.005, eps, grad);

  const double h = 1e-5;
  RngStream pick(derive_seed(7, "pick"));
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t k = pick.below(ne + nd);
    Mlp& net = k < ne ? enc : dec;
    const std::size_t j = k < ne ? k : k - ne;
    net.params()[j] += h;
    const double up = baseline_loss(ds.samples, enc, dec, norm, 0.005, eps).total;
    net.params()[j] -= 2 * h;
    const double dn = baseline_loss(ds.samples, enc, dec, norm, 0.005, eps).total;
    net.params()[j] += h;
    const double fd = (up - dn) / (2 * h);
    const double tol = std::abs(fd) < 1e-3 ? 1e-6 : std::abs(fd) * 1e-3;
    CHECK_THAT(grad[k], WithinAbs(fd, tol));
  }
}

TEST_CASE("adam zero gradient leaves fresh parameters unchanged and decays moments") {
  std::vector<double> params{1.0, -2.0};
  std::vector<double> grad{0.0, 0.0};
  AdamState fresh(2);
  adam_step(params, grad, fresh, 0.1);
  CHECK(params[0] == 1.0);
  CHECK(params[1] == -2.0);

  AdamState st(2);
  st.m = {0.5, -0.5};
  st.v = {0.25, 0.25};
  std::vector<double> p2{1.0, -2.0};
  adam_step(p2, grad, st, 0.1);
  CHECK(st.m[0] == 0.5 * 0.9);
  CHECK(st.v[0] == 0.25 * 0.999);
}

TEST_CASE("adam converges on a scalar quadratic") {
  std::vector<double> w{0.0};
  AdamState st(1);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> g{2.0 * (w[0] - 3.0)};
    adam_step(w, g, st, 0.1);
  }
  CHECK(std::abs(w[0] - 3.0) < 1e-2);
}

TEST_CASE("adam trajectories are bit-identical across runs") {
  auto run = [] {
    std::vector<double> w{0.2, -0.4};
    AdamState st(2);
    RngStream rng(derive_seed(8, "adam"));
    for (int i = 0; i < 50; ++i) {
      std::vector<double> g{2.0 * (w[0] - 1.0) + 0.01 * rng.normal(),
                            2.0 * (w[1] + 2.0) + 0.01 * rng.normal()};
      adam_step(w, g, st, 0.05);
    }
    return w;
  };
  CHECK(run() == run());
}

TEST_CASE("one epoch bookkeeping") {
  Dataset ds = tiny_dataset(10);
  TrainingConfig cfg;
  cfg.kind = ModelKind::baseline;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.seed = 0;
  auto result = train(cfg, ds);
  CHECK_FALSE(result.aborted);
  CHECK(result.history.size() == 3);  // ceil(10 / 4)
  CHECK(result.checkpoint.kind == ModelKind::baseline);
  CHECK(result.checkpoint.norm.mean.size() == 12);
}

TEST_CASE("training is deterministic given the seed") {
  Dataset ds = tiny_dataset(16);
  TrainingConfig cfg;
  cfg.kind = ModelKind::consci;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 5;
  auto a = train(cfg, ds);
  auto b = train(cfg, ds);
  CHECK(std::equal(a.checkpoint.encoder.params().begin(), a.checkpoint.encoder.params().end(),
                   b.checkpoint.encoder.params().begin()));
  CHECK(std::equal(a.checkpoint.decoder.params().begin(), a.checkpoint.decoder.params().end(),
                   b.checkpoint.decoder.params().begin()));
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].total == b.history[i].total);
  }
}

TEST_CASE("aux resampling needs clean trajectories") {
  Dataset ds = tiny_dataset(6);
  ds.clean.clear();
  TrainingConfig cfg;
  cfg.kind = ModelKind::baseline;
  cfg.epochs = 1;
  cfg.resample_aux = true;
  CHECK_THROWS_AS(train(cfg, ds), std::invalid_argument);
}

TEST_CASE("short training run reduces the loss") {
  Dataset ds = tiny_dataset(64, 10, 0.0);
  TrainingConfig cfg;
  cfg.kind = ModelKind::baseline;
  cfg.epochs = 30;
  cfg.batch_size = 32;
  cfg.seed = 1;
  auto result = train(cfg, ds);
  REQUIRE_FALSE(result.aborted);
  REQUIRE(result.history.size() >= 10);
  const double first = result.history.front().dynamics;
  const double last = result.history.back().dynamics;
  CHECK(last < first);
}
