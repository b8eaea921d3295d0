#include "ncdssm/data.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace ncdssm::data {

IrregularSeries IrregularSeries::observed_view() const {
  IrregularSeries out;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (observed[i]) out.push(times[i], values[i], true);
  return out;
}

IrregularSeries IrregularSeries::head(double t_max) const {
  IrregularSeries out;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (times[i] <= t_max + 1e-12) out.push(times[i], values[i], observed[i] != 0);
  return out;
}

IrregularSeries IrregularSeries::tail(double t_min) const {
  IrregularSeries out;
  for (std::size_t i = 0; i < times.size(); ++i)
    if (times[i] > t_min + 1e-12) out.push(times[i], values[i], observed[i] != 0);
  return out;
}

void IrregularSeries::validate() const {
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      throw DataFormatError("times must be strictly increasing");
  for (std::size_t i = 0; i < values.size(); ++i)
    if (observed[i] && !values[i].allFinite())
      throw DataFormatError("observed value is not finite");
}

std::vector<IrregularSeries> gen_bouncing_ball(const GeneratorConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<IrregularSeries> out;
  const int steps = static_cast<int>(std::round(cfg.length / cfg.dt));
  for (int s = 0; s < cfg.n_sequences; ++s) {
    double x = rng.uniform(-1.0, 1.0);
    double v = rng.uniform(0.05, 0.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
    IrregularSeries seq;
    for (int k = 0; k <= steps; ++k) {
      Vec y(1);
      y[0] = x + cfg.noise_std * rng.normal();
      seq.push(k * cfg.dt, y);
      // Euler step with elastic reflection at the walls.
      double raw = x + v * cfg.dt;
      if (raw > 1.0) {
        raw = 2.0 - raw;
        v = -v;
      } else if (raw < -1.0) {
        raw = -2.0 - raw;
        v = -v;
      }
      x = raw;
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<IrregularSeries> gen_damped_pendulum(const GeneratorConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<IrregularSeries> out;
  const int steps = static_cast<int>(std::round(cfg.length / cfg.dt));
  const double g = 9.81, l = 1.0, mass = 1.0, gamma = 0.25;
  auto field = [&](double theta, double omega, double& dth, double& dom) {
    dth = omega;
    dom = -(g / l) * std::sin(theta) - (gamma / mass) * omega;
  };
  auto clip = [](double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); };
  for (int s = 0; s < cfg.n_sequences; ++s) {
    double theta = M_PI + clip(rng.normal(), -2.0, 2.0);
    double omega = 4.0 * clip(rng.normal(), -2.0, 2.0);
    IrregularSeries seq;
    for (int k = 0; k <= steps; ++k) {
      Vec y(2);
      y[0] = std::sin(theta) + cfg.noise_std * rng.normal();
      y[1] = -std::cos(theta) + cfg.noise_std * rng.normal();
      seq.push(k * cfg.dt, y);
      double k1t, k1w, k2t, k2w, k3t, k3w, k4t, k4w;
      const double h = cfg.dt;
      field(theta, omega, k1t, k1w);
      field(theta + 0.5 * h * k1t, omega + 0.5 * h * k1w, k2t, k2w);
      field(theta + 0.5 * h * k2t, omega + 0.5 * h * k2w, k3t, k3w);
      field(theta + h * k3t, omega + h * k3w, k4t, k4w);
      theta += h / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t);
      omega += h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<IrregularSeries> gen_scalar_lgssm(const GeneratorConfig& cfg) {
  Rng rng(cfg.seed);
  std::vector<IrregularSeries> out;
  const int steps = static_cast<int>(std::round(cfg.length / cfg.dt));
  const double f = cfg.lgssm_f, q = cfg.lgssm_q, r = cfg.lgssm_r;
  const double phi = std::exp(f * cfg.dt);
  const double qd = q * (std::exp(2.0 * f * cfg.dt) - 1.0) / (2.0 * f);
  const double stat_var = q / (2.0 * std::abs(f));
  for (int s = 0; s < cfg.n_sequences; ++s) {
    double z = std::sqrt(stat_var) * rng.normal();
    IrregularSeries seq;
    for (int k = 0; k <= steps; ++k) {
      Vec y(1);
      y[0] = z + std::sqrt(r) * rng.normal();
      seq.push(k * cfg.dt, y);
      z = phi * z + std::sqrt(qd) * rng.normal();
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<IrregularSeries> generate(const GeneratorConfig& cfg) {
  if (cfg.missing_fraction < 0.0 || cfg.missing_fraction >= 1.0)
    throw ConfigError("missing_fraction must lie in [0, 1)");
  if (cfg.dataset == "bouncing-ball") return gen_bouncing_ball(cfg);
  if (cfg.dataset == "damped-pendulum") return gen_damped_pendulum(cfg);
  if (cfg.dataset == "scalar-lgssm") return gen_scalar_lgssm(cfg);
  throw ConfigError("unknown dataset: " + cfg.dataset);
}

void apply_missingness(std::vector<IrregularSeries>& seqs, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("missing fraction must lie in [0, 1)");
  Rng rng(seed);
  for (auto& seq : seqs)
    for (std::size_t k = 1; k < seq.size(); ++k)
      if (rng.bernoulli(p)) seq.observed[k] = 0;
}

void write_csv(const IrregularSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataFormatError("cannot open for writing: " + path);
  const int d = series.dim();
  out << "t";
  for (int j = 0; j < d; ++j) out << ",y" << (j + 1);
  out << "\n";
  char buf[32];
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (!series.observed[i]) continue;
    std::snprintf(buf, sizeof(buf), "%.17g", series.times[i]);
    out << buf;
    for (int j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", series.values[i][j]);
      out << "," << buf;
    }
    out << "\n";
  }
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

double parse_cell(const std::string& cell, long line_no) {
  double v = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last)
    throw DataFormatError("unparseable cell '" + cell + "'", line_no);
  return v;
}

}  // namespace

IrregularSeries read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataFormatError("cannot open: " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataFormatError("empty file: " + path);
  const auto header = split_csv_line(line);
  if (header.empty() || header[0] != "t") throw DataFormatError("header must start with 't'", 1);
  const int d = static_cast<int>(header.size()) - 1;
  if (d < 1) throw DataFormatError("no value columns", 1);

  IrregularSeries series;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (static_cast<int>(cells.size()) != d + 1)
      throw DataFormatError("ragged row: expected " + std::to_string(d + 1) + " cells, got " +
                                std::to_string(cells.size()),
                            line_no);
    const double t = parse_cell(cells[0], line_no);
    if (!series.times.empty() && !(t > series.times.back()))
      throw DataFormatError("non-monotone time column", line_no);
    int empties = 0;
    for (int j = 0; j < d; ++j)
      if (cells[j + 1].empty()) ++empties;
    if (empties == d) {
      series.push(t, Vec::Zero(d), false);
      continue;
    }
    if (empties != 0)
      throw DataFormatError("partially empty row (whole-timestep missingness only)", line_no);
    Vec v(d);
    for (int j = 0; j < d; ++j) v[j] = parse_cell(cells[j + 1], line_no);
    series.push(t, std::move(v), true);
  }
  return series;
}

double mse_against(const IrregularSeries& pred, const IrregularSeries& truth) {
  if (pred.size() == 0) throw DataFormatError("mse: empty prediction");
  double se = 0.0;
  long cells = 0;
  for (std::size_t k = 0; k < pred.size(); ++k) {
    if (!pred.observed[k]) continue;
    bool found = false;
    for (std::size_t j = 0; j < truth.size(); ++j) {
      if (std::abs(truth.times[j] - pred.times[k]) <= 1e-9) {
        se += (pred.values[k] - truth.values[j]).squaredNorm();
        cells += pred.values[k].size();
        found = true;
        break;
      }
    }
    if (!found)
      throw DataFormatError("mse: prediction time " + std::to_string(pred.times[k]) +
                            " not present in the ground truth");
  }
  if (cells == 0) throw DataFormatError("mse: no observed prediction rows");
  return se / cells;
}

}  // namespace ncdssm::data
