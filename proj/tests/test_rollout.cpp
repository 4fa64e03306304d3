#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "hamildis/rollout.hpp"

using namespace hamildis;
using Catch::Matchers::WithinAbs;

namespace {

// Checkpoint whose decoder computes H* = q^2/2 + p^2/2 exactly.
ModelCheckpoint quadratic_ckpt() {
  ModelCheckpoint ckpt;
  ckpt.kind = ModelKind::consci;
  ckpt.task = SystemKind::spring;
  ckpt.traj_len = 10;
  ckpt.encoder = Mlp(default_encoder_spec(10));
  Mlp dec(MlpSpec{{5, 2, 1}, Activation::square});
  dec.weight(0)[0] = 1.0;
  dec.weight(0)[6] = 1.0;
  dec.weight(1)[0] = 0.5;
  dec.weight(1)[1] = 0.5;
  ckpt.decoder = std::move(dec);
  ckpt.norm.mean.assign(20, 0.0);
  ckpt.norm.stdev.assign(20, 1.0);
  return ckpt;
}

ModelCheckpoint random_consci_ckpt(std::uint64_t seed) {
  RngStream rng(derive_seed(seed, "ckpt"));
  ModelCheckpoint ckpt;
  ckpt.kind = ModelKind::consci;
  ckpt.traj_len = 10;
  ckpt.encoder = Mlp::glorot(default_encoder_spec(10), rng);
  ckpt.decoder = Mlp::glorot(default_hnn_decoder_spec(), rng);
  ckpt.norm.mean.assign(20, 0.0);
  ckpt.norm.stdev.assign(20, 1.0);
  return ckpt;
}

}  // namespace

TEST_CASE("hand-set quadratic decoder yields the rotation field") {
  auto ckpt = quadratic_ckpt();
  DecoderField field(ckpt, ParameterArgument{{0.4, -0.2, 0.1}});
  auto d = field({1.0, 0.0});
  CHECK_THAT(d.dq, WithinAbs(0.0, 1e-12));
  CHECK_THAT(d.dp, WithinAbs(-1.0, 1e-12));
  auto d2 = field({0.3, -0.8});
  CHECK_THAT(d2.dq, WithinAbs(-0.8, 1e-12));
  CHECK_THAT(d2.dp, WithinAbs(-0.3, 1e-12));
}

TEST_CASE("decoder field is deterministic call to call") {
  auto ckpt = random_consci_ckpt(1);
  DecoderField field(ckpt, ParameterArgument{{0.2, 0.0, -0.5}});
  auto a = field({0.7, -0.4});
  auto b = field({0.7, -0.4});
  CHECK(a.dq == b.dq);
  CHECK(a.dp == b.dp);
  CHECK(field.h_star({0.7, -0.4}) == field.h_star({0.7, -0.4}));
}

TEST_CASE("different parameter arguments change the field") {
  auto ckpt = random_consci_ckpt(2);
  DecoderField f1(ckpt, ParameterArgument{{0.0, 0.0, 0.0}});
  DecoderField f2(ckpt, ParameterArgument{{1.0, -0.5, 0.3}});
  auto a = f1({0.5, 0.5});
  auto b = f2({0.5, 0.5});
  CHECK((a.dq != b.dq || a.dp != b.dp));
}

TEST_CASE("quadratic rollout traces the unit circle") {
  auto ckpt = quadratic_ckpt();
  auto traj = generate(ckpt, ParameterArgument{}, {1.0, 0.0}, 0.0,
                       2.0 * std::numbers::pi, 1e-10, 100);
  REQUIRE(traj.states.size() == 100);
  double worst = 0.0;
  for (std::size_t i = 0; i < traj.times.size(); ++i) {
    const double t = traj.times[i];
    worst = std::max({worst, std::abs(traj.states[i].q - std::cos(t)),
                      std::abs(traj.states[i].p + std::sin(t))});
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("zero-length span returns the initial state") {
  auto ckpt = quadratic_ckpt();
  auto traj = generate(ckpt, ParameterArgument{}, {0.3, 0.7}, 2.0, 2.0, 1e-10);
  REQUIRE(traj.times.size() == 1);
  CHECK(traj.states[0].q == 0.3);
  CHECK(traj.h_star.size() == 1);
}

TEST_CASE("random consci decoders conserve H* over [0,20]") {
  RngStream rng(derive_seed(4, "args"));
  auto ckpt = random_consci_ckpt(3);
  for (int i = 0; i < 3; ++i) {
    ParameterArgument arg{{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)}};
    auto traj = generate(ckpt, arg, {1.0, 0.0}, 0.0, 20.0, 1e-10, 200);
    CHECK(h_star_drift(traj) < 1e-6);
  }
}

TEST_CASE("output grid density does not change shared states beyond tolerance") {
  auto ckpt = random_consci_ckpt(5);
  ParameterArgument arg{{0.3, 0.0, 0.0}};
  auto coarse = generate(ckpt, arg, {1.0, 0.0}, 0.0, 5.0, 1e-10, 51);
  auto fine = generate(ckpt, arg, {1.0, 0.0}, 0.0, 5.0, 1e-10, 101);
  double worst = 0.0;
  for (std::size_t i = 0; i < coarse.times.size(); ++i) {
    const PhaseState& a = coarse.states[i];
    const PhaseState& b = fine.states[2 * i];
    worst = std::max({worst, std::abs(a.q - b.q), std::abs(a.p - b.p)});
  }
  CHECK(worst < 1e-9);  // 10 x tol
}

TEST_CASE("trajectory mse basics") {
  GeneratedTrajectory a;
  a.times = linspace(0, 1, 5);
  a.states.assign(5, PhaseState{1.0, 2.0});
  Trajectory b;
  b.times = a.times;
  b.states = a.states;
  b.params = SpringParams{0.25, 1.0};
  CHECK(trajectory_mse(a, b) == 0.0);

  for (auto& s : b.states) s.q += 0.1;
  CHECK_THAT(trajectory_mse(a, b), WithinAbs(0.01, 1e-12));
  CHECK(trajectory_mse(a.states, b.states) == trajectory_mse(b.states, a.states));

  Trajectory c = b;
  c.times.pop_back();
  c.states.pop_back();
  CHECK_THROWS_AS(trajectory_mse(a, c), std::invalid_argument);
}

TEST_CASE("baseline rollout leaves the H_star column empty") {
  RngStream rng(derive_seed(6, "b"));
  ModelCheckpoint ckpt;
  ckpt.kind = ModelKind::baseline;
  ckpt.traj_len = 10;
  ckpt.encoder = Mlp(default_encoder_spec(10));
  ckpt.decoder = Mlp::glorot(default_baseline_decoder_spec(), rng);
  ckpt.norm.mean.assign(20, 0.0);
  ckpt.norm.stdev.assign(20, 1.0);

  auto traj = generate(ckpt, ParameterArgument{}, {1.0, 0.0}, 0.0, 1.0, 1e-8, 11);
  CHECK(traj.h_star.empty());

  auto dir = std::filesystem::temp_directory_path() / "hamildis_rollout_test";
  std::filesystem::remove_all(dir);
  write_trajectory_csv(traj, dir / "traj.csv", 1e-8);
  std::ifstream in(dir / "traj.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(header == "t,q,p,H_star");
  CHECK(row.back() == ',');  // empty H_star cell
  CHECK(std::filesystem::exists(dir / "traj.json"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite parameter argument is rejected") {
  auto ckpt = quadratic_ckpt();
  ParameterArgument bad;
  bad.z[1] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(DecoderField(ckpt, bad), std::invalid_argument);
}
