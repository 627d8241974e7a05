#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "temde/attention.hpp"
#include "temde/coder.hpp"

namespace temde {

enum class BenchSubject { temde, global_sim_attention, full_self_attention };

std::string bench_subject_name(BenchSubject subject);
BenchSubject parse_bench_subject(const std::string& name);

struct BenchSpec {
  BenchSubject subject = BenchSubject::temde;
  std::vector<std::size_t> t_values;
  std::size_t width = 256;  // E = d, shared by all subjects
  std::size_t repeats = 10;
  std::size_t warmup = 3;
  std::uint64_t seed = 1;
  TemdeConfig temde;  // input_dim is forced to width

  void validate() const;
};

struct BenchRow {
  std::size_t t = 0;
  double median_ns = 0;
  double p10_ns = 0;
  double p90_ns = 0;
  std::size_t inner_iters = 1;  // >1 when the timer needed batching
};

struct BenchTable {
  BenchSubject subject = BenchSubject::temde;
  std::vector<BenchRow> rows;
};

// Input tokens for one sequence length; depends only on (seed, t, width) so
// every subject sees bit-identical data.
Tensor<float> bench_input(std::uint64_t seed, std::size_t t,
                          std::size_t width);

// Times the subject's eval-mode forward over each sequence length.
// Strictly single-threaded, no gradient tape.
BenchTable run_bench(const BenchSpec& spec);

struct ExponentFit {
  double slope = 0;
  double r2 = 0;
};

// Least squares on log(time) vs log(T). Needs >= 4 distinct T values and
// positive times.
ExponentFit fit_exponent(const std::vector<std::pair<std::size_t, double>>& points);
ExponentFit fit_exponent(const BenchTable& table);

// Tab-separated rows `subject T median_ns p10 p90` per table, each followed
// by its `# slope=<s> r2=<r>` line; leading comment lines carry the machine
// descriptor and config.
std::string format_bench(const std::vector<BenchTable>& tables,
                         const BenchSpec& spec);

// Reads format_bench output back (comment lines ignored).
std::vector<BenchTable> parse_bench_output(const std::string& text);

std::string machine_descriptor();

}  // namespace temde
