#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "neurocodec/objectives.hpp"
#include "neurocodec/tensor.hpp"

namespace neurocodec::stats {

// ---- scalar statistics ----

// Sample Pearson correlation; constant inputs are defined as 0 (flagged
// through the optional out-param) so aggregation stays total.
double pearson(const std::vector<double>& x, const std::vector<double>& y,
               bool* degenerate = nullptr);

double median(std::vector<double> values);

// ---- encoder / decoder evaluation ----

struct EncoderEval {
  std::vector<double> per_voxel_r;
  std::vector<double> per_voxel_mse;
  double mean_r = 0.0;
  double mse = 0.0;  // grand per-element mean
  int degenerate_voxels = 0;
};

// Correlation per voxel across time between measured and predicted series.
EncoderEval evaluate_encoder(const Tensor& v_true, const Tensor& v_pred);

struct DecoderEval {
  std::vector<double> per_frame_ssim;
  std::vector<double> per_frame_mse;
  double mean_ssim = 0.0;
  double mse = 0.0;
};

DecoderEval evaluate_decoder(const std::vector<Tensor>& f_true,
                             const std::vector<Tensor>& f_pred,
                             const objectives::SsimParams& sp = {});

// ---- shuffled nulls ----

// Per shuffle: permute the prediction axis (time for the correlation
// metric, frame pairing for ssim) and record the mean score.
std::vector<double> null_pearson(const Tensor& v_true, const Tensor& v_pred,
                                 int n_shuffles, std::uint64_t seed);
std::vector<double> null_ssim(const std::vector<Tensor>& f_true,
                              const std::vector<Tensor>& f_pred, int n_shuffles,
                              std::uint64_t seed,
                              const objectives::SsimParams& sp = {});

// ---- rank statistics ----

struct MannWhitneyResult {
  double u = 0.0;        // U of the first sample, midranks for ties
  double p = 0.0;        // two-sided
  bool exact = false;    // enumeration (n1*n2 <= 64) vs normal approximation
};

// Exact path: distribution of U over all group assignments via rank-sum
// counting. Approximate path: normal with tie-corrected variance and 0.5
// continuity correction. Two-sided deviation form in both cases.
MannWhitneyResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);
double mann_whitney_exact_p(const std::vector<double>& a, const std::vector<double>& b);
double mann_whitney_normal_p(const std::vector<double>& a, const std::vector<double>& b);
double mann_whitney_u_stat(const std::vector<double>& a, const std::vector<double>& b);

// (#{a_i > b_j} - #{a_i < b_j}) / (n1 n2), exact, via sorted counting.
double cliffs_delta(const std::vector<double>& a, const std::vector<double>& b);

// ---- run-level reporting ----

struct MovieScores {
  std::string movie_id;
  int n = 0;
  double mean = 0.0;
  double med = 0.0;
};

struct MetricBlock {           // one metric family for one run
  std::vector<double> values;  // pooled distribution (per voxel or per frame)
  double mean = 0.0;
  double med = 0.0;
  std::vector<MovieScores> per_movie;
};

struct NullBlock {
  std::vector<double> per_shuffle;
  double mean = 0.0;
  double sd = 0.0;
  int n_shuffles = 0;
  std::uint64_t seed = 0;
};

struct RunEval {
  std::string run_name;
  bool has_decoder = false;
  MetricBlock enc_corr;
  MetricBlock enc_mse;
  MetricBlock dec_ssim;  // empty when !has_decoder
  MetricBlock dec_mse;
  std::optional<NullBlock> null_corr;
  std::optional<NullBlock> null_ssim;
};

struct Comparison {
  std::string metric;
  std::string run_a, run_b;
  double u = 0.0, p = 0.0, delta = 0.0;
  std::int64_t n1 = 0, n2 = 0;
};

struct EvalReport {
  std::vector<RunEval> runs;
  std::vector<Comparison> comparisons;
};

NullBlock make_null_block(std::vector<double> per_shuffle, std::uint64_t seed);
MetricBlock make_metric_block(std::vector<double> pooled,
                              std::vector<std::pair<std::string, std::vector<double>>> per_movie);

// All run pairs on every metric both runs expose.
EvalReport build_report(const std::vector<RunEval>& runs);

// report.csv: one row per run/metric with mean, median and n.
// comparisons.csv: metric, pair, U, p, delta, n1, n2.
// table_comparison.csv: metric rows x run columns, "/" for missing cells.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_comparisons_csv(const std::filesystem::path& path, const EvalReport& report);
void write_metric_table_csv(const std::filesystem::path& path, const EvalReport& report);

// Scatter plot of per-movie points, the pooled point, and the shuffled-null
// points with their mean line.
void write_performance_svg(const std::filesystem::path& path, const std::string& title,
                           const MetricBlock& metric, const NullBlock* null_block);

}  // namespace neurocodec::stats
