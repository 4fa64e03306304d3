#pragma once

// Dataset generation and the on-disk format: manifest.json plus data.bin of
// little-endian 64-bit floats, one fixed-size record per trajectory:
//   [params..., times x L, q x L (noisy), p x L (noisy),
//    t_aux, q_aux, p_aux, dq/dt, dp/dt]

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "hamildis/dynamics.hpp"
#include "hamildis/rng.hpp"

namespace hamildis {

struct NoiseSpec {
  double mean = 0.0;
  double sigma = 0.03;
};

struct Trajectory {
  std::vector<double> times;
  std::vector<PhaseState> states;
  SystemParams params;
  bool noisy = false;
};

struct Sample {
  std::vector<double> observation;  // q-series then p-series, noisy
  double t_aux = 0.0;
  PhaseState aux;      // clean state at t_aux
  PhaseDeriv target;   // analytic time evolution at aux
  std::vector<double> params;  // evaluation only, never fed to models
};

struct DatasetSpec {
  SystemKind system = SystemKind::spring;
  int count = 2000;
  int traj_len = 100;
  double t0 = 0.0;
  double t1 = 10.0;
  NoiseSpec noise;
  std::uint64_t seed = 0;
  double l_min = 0.3, l_max = 0.8;          // pendulum length range
  double k_min = 0.1, k_max = 0.5;          // spring stiffness range
  double m_min = 0.5, m_max = 1.0;          // spring mass range
  double pendulum_mass = 1.0;
  double gravity = 9.8;
  PhaseState initial{1.0, 0.0};
  double integrator_tol = 1e-10;

  int params_per_record() const { return system == SystemKind::pendulum ? 1 : 2; }
  int record_doubles() const { return params_per_record() + 3 * traj_len + 5; }
  std::vector<std::string> param_names() const {
    if (system == SystemKind::pendulum) return {"l"};
    return {"k", "m"};
  }

  void validate() const {
    if (count < 1) throw std::invalid_argument("dataset: count must be >= 1");
    if (traj_len < 2) throw std::invalid_argument("dataset: traj_len must be >= 2");
    if (!(t1 > t0)) throw std::invalid_argument("dataset: t1 must exceed t0");
    if (noise.sigma < 0.0) throw std::invalid_argument("dataset: sigma must be >= 0");
    if (!(l_min > 0.0 && l_max >= l_min) || !(k_min > 0.0 && k_max >= k_min) ||
        !(m_min > 0.0 && m_max >= m_min)) {
      throw std::invalid_argument("dataset: invalid parameter range");
    }
    if (!(pendulum_mass > 0.0 && gravity > 0.0)) {
      throw std::invalid_argument("dataset: constants must be positive");
    }
    if (!(integrator_tol > 0.0)) throw std::invalid_argument("dataset: tol must be > 0");
  }
};

struct Dataset {
  DatasetSpec spec;
  std::vector<Sample> samples;
  std::vector<Trajectory> clean;  // retained in memory; not written to disk
};

namespace detail {

inline void generate_one(const DatasetSpec& spec, std::size_t index, Sample& sample,
                         Trajectory& clean) {
  RngStream rng(derive_seed(spec.seed, "data", index));
  SystemParams params;
  std::vector<double> pvals;
  if (spec.system == SystemKind::pendulum) {
    const double l = rng.uniform(spec.l_min, spec.l_max);
    params = PendulumParams{spec.pendulum_mass, spec.gravity, l};
    pvals = {l};
  } else {
    const double k = rng.uniform(spec.k_min, spec.k_max);
    const double m = rng.uniform(spec.m_min, spec.m_max);
    params = SpringParams{k, m};
    pvals = {k, m};
  }

  const auto times = linspace(spec.t0, spec.t1, spec.traj_len);
  auto states = integrate_adaptive(spec.initial, analytic_field(params), times,
                                   spec.integrator_tol);

  const std::size_t L = static_cast<std::size_t>(spec.traj_len);
  sample.observation.resize(2 * L);
  for (std::size_t j = 0; j < L; ++j) {
    sample.observation[j] = states[j].q + rng.normal(spec.noise.mean, spec.noise.sigma);
  }
  for (std::size_t j = 0; j < L; ++j) {
    sample.observation[L + j] = states[j].p + rng.normal(spec.noise.mean, spec.noise.sigma);
  }

  const std::size_t aux_idx = rng.below(L);
  sample.t_aux = times[aux_idx];
  sample.aux = states[aux_idx];
  sample.target = time_evolution(sample.aux, params);
  sample.params = pvals;

  clean.times = times;
  clean.states = std::move(states);
  clean.params = params;
  clean.noisy = false;
}

}  // namespace detail

/// One i.i.d. parameter draw per trajectory, clean integration on the
/// uniform grid, independent Gaussian noise on every observation entry,
/// one uniformly sampled (aux, target) pair per trajectory. Trajectories
/// get independent RNG streams derived from the master seed, so results
/// are identical regardless of thread count.
inline Dataset generate_dataset(const DatasetSpec& spec, int threads = 1) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.samples.resize(static_cast<std::size_t>(spec.count));
  ds.clean.resize(static_cast<std::size_t>(spec.count));

  const std::size_t n = ds.samples.size();
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) {
      detail::generate_one(spec, i, ds.samples[i], ds.clean[i]);
    }
    return ds;
  }

  const int workers = std::min<int>(threads, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = static_cast<std::size_t>(w); i < n;
           i += static_cast<std::size_t>(workers)) {
        detail::generate_one(spec, i, ds.samples[i], ds.clean[i]);
      }
    });
  }
  for (auto& th : pool) th.join();
  return ds;
}

inline nlohmann::json dataset_manifest(const DatasetSpec& spec) {
  nlohmann::json j;
  j["format_version"] = 1;
  j["system"] = system_name(spec.system);
  j["count"] = spec.count;
  j["traj_len"] = spec.traj_len;
  j["t_span"] = {spec.t0, spec.t1};
  j["sigma"] = spec.noise.sigma;
  j["noise_mean"] = spec.noise.mean;
  j["seed"] = spec.seed;
  j["param_names"] = spec.param_names();
  if (spec.system == SystemKind::pendulum) {
    j["param_ranges"] = {{"l", {spec.l_min, spec.l_max}}};
    j["pendulum_mass"] = spec.pendulum_mass;
    j["gravity"] = spec.gravity;
  } else {
    j["param_ranges"] = {{"k", {spec.k_min, spec.k_max}}, {"m", {spec.m_min, spec.m_max}}};
  }
  j["initial"] = {spec.initial.q, spec.initial.p};
  j["integrator_tol"] = spec.integrator_tol;
  j["record_doubles"] = spec.record_doubles();
  j["data_file"] = "data.bin";
  j["encoding"] = "float64-le";
  j["layout"] =
      "params, times*traj_len, q*traj_len(noisy), p*traj_len(noisy), "
      "t_aux, q_aux, p_aux, dq_dt, dp_dt";
  return j;
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream mf(dir / "manifest.json", std::ios::binary);
    if (!mf) throw std::runtime_error("dataset: cannot write manifest in " + dir.string());
    mf << dataset_manifest(ds.spec).dump(2) << '\n';
  }
  std::ofstream bf(dir / "data.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("dataset: cannot write data.bin in " + dir.string());
  const std::size_t L = static_cast<std::size_t>(ds.spec.traj_len);
  std::vector<double> record(static_cast<std::size_t>(ds.spec.record_doubles()));
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const Trajectory& c = ds.clean[i];
    std::size_t o = 0;
    for (double v : s.params) record[o++] = v;
    for (std::size_t j = 0; j < L; ++j) record[o++] = c.times[j];
    for (std::size_t j = 0; j < L; ++j) record[o++] = s.observation[j];
    for (std::size_t j = 0; j < L; ++j) record[o++] = s.observation[L + j];
    record[o++] = s.t_aux;
    record[o++] = s.aux.q;
    record[o++] = s.aux.p;
    record[o++] = s.target.dq;
    record[o++] = s.target.dp;
    bf.write(reinterpret_cast<const char*>(record.data()),
             static_cast<std::streamsize>(record.size() * sizeof(double)));
  }
  if (!bf) throw std::runtime_error("dataset: short write to data.bin");
}

/// Loads manifest + records. Clean trajectories are not on disk, so the
/// returned dataset carries noisy observation times only (clean is empty).
inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: missing manifest.json in " + dir.string());
  nlohmann::json j = nlohmann::json::parse(mf);

  DatasetSpec spec;
  try {
    if (j.at("format_version").get<int>() != 1) {
      throw std::runtime_error("dataset: unsupported format_version");
    }
    spec.system = parse_system(j.at("system").get<std::string>());
    spec.count = j.at("count").get<int>();
    spec.traj_len = j.at("traj_len").get<int>();
    spec.t0 = j.at("t_span").at(0).get<double>();
    spec.t1 = j.at("t_span").at(1).get<double>();
    spec.noise.sigma = j.at("sigma").get<double>();
    spec.noise.mean = j.at("noise_mean").get<double>();
    spec.seed = j.at("seed").get<std::uint64_t>();
    spec.initial.q = j.at("initial").at(0).get<double>();
    spec.initial.p = j.at("initial").at(1).get<double>();
    spec.integrator_tol = j.at("integrator_tol").get<double>();
    const auto& ranges = j.at("param_ranges");
    if (spec.system == SystemKind::pendulum) {
      spec.l_min = ranges.at("l").at(0).get<double>();
      spec.l_max = ranges.at("l").at(1).get<double>();
      spec.pendulum_mass = j.at("pendulum_mass").get<double>();
      spec.gravity = j.at("gravity").get<double>();
    } else {
      spec.k_min = ranges.at("k").at(0).get<double>();
      spec.k_max = ranges.at("k").at(1).get<double>();
      spec.m_min = ranges.at("m").at(0).get<double>();
      spec.m_max = ranges.at("m").at(1).get<double>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("dataset: bad manifest: ") + e.what());
  }

  const std::size_t record = static_cast<std::size_t>(spec.record_doubles());
  std::ifstream bf(dir / "data.bin", std::ios::binary);
  if (!bf) throw std::runtime_error("dataset: missing data.bin in " + dir.string());
  bf.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(bf.tellg());
  bf.seekg(0);
  const std::size_t expect = record * sizeof(double) * static_cast<std::size_t>(spec.count);
  if (bytes != expect) {
    throw std::runtime_error("dataset: data.bin has " + std::to_string(bytes) +
                             " bytes, expected " + std::to_string(expect));
  }

  Dataset ds;
  ds.spec = spec;
  ds.samples.resize(static_cast<std::size_t>(spec.count));
  const std::size_t L = static_cast<std::size_t>(spec.traj_len);
  const std::size_t np = static_cast<std::size_t>(spec.params_per_record());
  std::vector<double> buf(record);
  for (Sample& s : ds.samples) {
    bf.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(double)));
    if (!bf) throw std::runtime_error("dataset: truncated data.bin");
    std::size_t o = 0;
    s.params.assign(buf.begin(), buf.begin() + static_cast<std::ptrdiff_t>(np));
    o += np;
    o += L;  // times are implied by the uniform grid; skip
    s.observation.assign(buf.begin() + static_cast<std::ptrdiff_t>(o),
                         buf.begin() + static_cast<std::ptrdiff_t>(o + 2 * L));
    o += 2 * L;
    s.t_aux = buf[o++];
    s.aux.q = buf[o++];
    s.aux.p = buf[o++];
    s.target.dq = buf[o++];
    s.target.dp = buf[o++];
  }
  return ds;
}

/// Inspection export: one row per grid point per trajectory.
inline void export_dataset_csv(const Dataset& ds, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("dataset: cannot write " + file.string());
  out << "traj";
  for (const auto& n : ds.spec.param_names()) out << ',' << n;
  out << ",t,q_noisy,p_noisy\n";
  const auto times = linspace(ds.spec.t0, ds.spec.t1, ds.spec.traj_len);
  const std::size_t L = times.size();
  char buf[64];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << buf;
  };
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    for (std::size_t j = 0; j < L; ++j) {
      out << i;
      for (double v : s.params) {
        out << ',';
        put(v);
      }
      out << ',';
      put(times[j]);
      out << ',';
      put(s.observation[j]);
      out << ',';
      put(s.observation[L + j]);
      out << '\n';
    }
  }
}

}  // namespace hamildis
