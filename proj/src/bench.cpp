#include "temde/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <thread>

namespace temde {

std::string bench_subject_name(BenchSubject subject) {
  switch (subject) {
    case BenchSubject::temde:
      return "temde";
    case BenchSubject::global_sim_attention:
      return "global_sim_attention";
    default:
      return "full_self_attention";
  }
}

BenchSubject parse_bench_subject(const std::string& name) {
  if (name == "temde") return BenchSubject::temde;
  if (name == "global_sim_attention") return BenchSubject::global_sim_attention;
  if (name == "full_self_attention") return BenchSubject::full_self_attention;
  throw ContractError("unknown bench subject '" + name + "'");
}

void BenchSpec::validate() const {
  if (repeats < 10) throw ContractError("bench needs repeats >= 10");
  if (warmup < 3) throw ContractError("bench needs warmup >= 3");
  if (t_values.empty()) throw ContractError("bench needs sequence lengths");
  for (std::size_t t : t_values) {
    if (t < 1) throw ContractError("bench sequence lengths must be >= 1");
  }
  if (width < 1) throw ContractError("bench width must be >= 1");
}

namespace {

using Clock = std::chrono::steady_clock;

double now_ns() {
  return static_cast<double>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(
          Clock::now().time_since_epoch())
          .count());
}

double percentile(std::vector<double> samples, double p) {
  std::sort(samples.begin(), samples.end());
  double pos = p * static_cast<double>(samples.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  std::size_t hi = std::min(lo + 1, samples.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return samples[lo] * (1 - frac) + samples[hi] * frac;
}

}  // namespace

Tensor<float> bench_input(std::uint64_t seed, std::size_t t,
                          std::size_t width) {
  std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ull * (t + 1)));
  return Tensor<float>::randn({t, width}, rng, 1.0f);
}

BenchTable run_bench(const BenchSpec& spec) {
  spec.validate();
  NoGradGuard no_grad;
  std::mt19937_64 param_rng(spec.seed);

  // Subject state built once; eval mode throughout.
  TemdeConfig temde_cfg = spec.temde;
  temde_cfg.input_dim = spec.width;
  TemdeParams<float> coder;
  GlobalSimConfig sim_cfg;
  sim_cfg.input_dim = spec.width;
  sim_cfg.width = spec.width;
  GlobalSimParams<float> sim;
  if (spec.subject == BenchSubject::temde) {
    coder = TemdeParams<float>(temde_cfg, param_rng);
  } else if (spec.subject == BenchSubject::global_sim_attention) {
    sim = GlobalSimParams<float>(sim_cfg, param_rng);
  }

  // The sink defeats dead-code elimination across iterations.
  volatile float sink = 0;
  std::function<void(const Tensor<float>&)> subject;
  switch (spec.subject) {
    case BenchSubject::temde:
      subject = [&](const Tensor<float>& x) {
        auto agg = aggregate(encode_tokens(coder, x, Mode::eval));
        sink = sink + agg.values.data()[0];
      };
      break;
    case BenchSubject::global_sim_attention:
      subject = [&](const Tensor<float>& x) {
        auto local = local_representation(sim, x, Mode::eval);
        auto mean_row = reshape(mean(x, 0), {1, spec.width});
        auto global =
            reshape(global_representation(sim, mean_row, Mode::eval),
                    {spec.width});
        auto out = global_similarity_attention(local, global);
        sink = sink + out.data()[0];
      };
      break;
    case BenchSubject::full_self_attention:
      subject = [&](const Tensor<float>& x) {
        auto out = full_self_attention(x);
        sink = sink + out.data()[0];
      };
      break;
  }

  constexpr double kMinSampleNs = 5e4;  // keep samples above timer noise
  BenchTable table;
  table.subject = spec.subject;
  for (std::size_t t : spec.t_values) {
    auto input = bench_input(spec.seed, t, spec.width);

    double probe_start = now_ns();
    subject(input);
    double probe = std::max(now_ns() - probe_start, 1.0);
    std::size_t inner =
        probe >= kMinSampleNs
            ? 1
            : static_cast<std::size_t>(std::ceil(kMinSampleNs / probe));

    for (std::size_t w = 0; w < spec.warmup; ++w)
      for (std::size_t i = 0; i < inner; ++i) subject(input);

    std::vector<double> samples(spec.repeats);
    for (auto& sample : samples) {
      double start = now_ns();
      for (std::size_t i = 0; i < inner; ++i) subject(input);
      sample = (now_ns() - start) / static_cast<double>(inner);
    }
    BenchRow row;
    row.t = t;
    row.median_ns = percentile(samples, 0.5);
    row.p10_ns = percentile(samples, 0.1);
    row.p90_ns = percentile(samples, 0.9);
    row.inner_iters = inner;
    table.rows.push_back(row);
  }
  return table;
}

ExponentFit fit_exponent(
    const std::vector<std::pair<std::size_t, double>>& points) {
  if (points.size() < 4) {
    throw ContractError("fit_exponent needs at least 4 points, got " +
                        std::to_string(points.size()));
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::vector<double> xs, ys;
  for (auto [t, time_ns] : points) {
    if (t < 1 || !(time_ns > 0)) {
      throw ContractError("fit_exponent needs positive T and times");
    }
    double x = std::log(static_cast<double>(t));
    double y = std::log(time_ns);
    xs.push_back(x);
    ys.push_back(y);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double n = static_cast<double>(points.size());
  double denom = n * sxx - sx * sx;
  if (denom == 0) throw ContractError("fit_exponent needs distinct T values");
  ExponentFit fit;
  fit.slope = (n * sxy - sx * sy) / denom;
  double intercept = (sy - fit.slope * sx) / n;
  double ss_res = 0, ss_tot = 0, mean_y = sy / n;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double pred = intercept + fit.slope * xs[i];
    ss_res += (ys[i] - pred) * (ys[i] - pred);
    ss_tot += (ys[i] - mean_y) * (ys[i] - mean_y);
  }
  fit.r2 = ss_tot == 0 ? 1.0 : 1.0 - ss_res / ss_tot;
  return fit;
}

ExponentFit fit_exponent(const BenchTable& table) {
  std::vector<std::pair<std::size_t, double>> points;
  for (const auto& row : table.rows) points.emplace_back(row.t, row.median_ns);
  return fit_exponent(points);
}

std::string machine_descriptor() {
  std::string cpu = "unknown cpu";
  std::ifstream info("/proc/cpuinfo");
  std::string line;
  while (std::getline(info, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto colon = line.find(':');
      if (colon != std::string::npos) cpu = line.substr(colon + 2);
      break;
    }
  }
  std::ostringstream os;
  os << cpu << ", " << std::thread::hardware_concurrency()
     << " hw threads, single-threaded run";
  return os.str();
}

std::string format_bench(const std::vector<BenchTable>& tables,
                         const BenchSpec& spec) {
  std::ostringstream os;
  os << "# machine: " << machine_descriptor() << '\n';
  os << "# config: width=" << spec.width << " repeats=" << spec.repeats
     << " warmup=" << spec.warmup << " seed=" << spec.seed
     << " temde_n=" << spec.temde.n_divisions
     << " temde_k=" << spec.temde.n_centroids
     << " temde_d=" << spec.temde.inner_dim << '\n';
  char buf[160];
  for (const auto& table : tables) {
    std::string name = bench_subject_name(table.subject);
    for (const auto& row : table.rows) {
      std::snprintf(buf, sizeof(buf), "%s\t%zu\t%.0f\t%.0f\t%.0f",
                    name.c_str(), row.t, row.median_ns, row.p10_ns,
                    row.p90_ns);
      os << buf << '\n';
      if (row.inner_iters > 1) {
        os << "# inner_iters " << name << " T=" << row.t << " iters="
           << row.inner_iters << '\n';
      }
    }
    auto fit = fit_exponent(table);
    std::snprintf(buf, sizeof(buf), "# slope=%.4f r2=%.4f", fit.slope, fit.r2);
    os << buf << '\n';
  }
  return os.str();
}

std::vector<BenchTable> parse_bench_output(const std::string& text) {
  std::vector<BenchTable> tables;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    BenchRow row;
    if (!(ls >> name >> row.t >> row.median_ns >> row.p10_ns >> row.p90_ns)) {
      throw ParseError("bench output line " + std::to_string(line_no) +
                       ": expected subject, T and three times");
    }
    BenchSubject subject = parse_bench_subject(name);
    if (tables.empty() || tables.back().subject != subject) {
      tables.push_back(BenchTable{subject, {}});
    }
    tables.back().rows.push_back(row);
  }
  return tables;
}

}  // namespace temde
