#include "neurocodec/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "neurocodec/io.hpp"

namespace neurocodec::saliency {

namespace {

// Pairwise tree sum over the sample axis. Splitting at floor(n/2) makes the
// reduction of a duplicated sample list equal exactly twice the original.
void pairwise_sum(const std::vector<std::vector<double>>& rows, std::size_t lo, std::size_t hi,
                  std::vector<double>& out) {
  if (hi - lo == 1) {
    out = rows[lo];
    return;
  }
  const std::size_t mid = lo + (hi - lo) / 2;
  std::vector<double> left, right;
  pairwise_sum(rows, lo, mid, left);
  pairwise_sum(rows, mid, hi, right);
  out.resize(left.size());
  for (std::size_t i = 0; i < left.size(); ++i) out[i] = left[i] + right[i];
}

}  // namespace

std::vector<double> compute_saliency(const models::DecoderSpec& spec,
                                     models::ParamStore& params, const Tensor& voxel_inputs,
                                     const std::vector<Tensor>& targets,
                                     const objectives::SsimParams& sp, int batch_size) {
  if (voxel_inputs.ndim() != 2 || voxel_inputs.dim(1) != spec.in_voxels)
    throw DataError("compute_saliency: voxel inputs must be [N, V]");
  const std::int64_t n = voxel_inputs.dim(0);
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw DataError("compute_saliency: inputs and targets disagree");
  const std::int64_t v = voxel_inputs.dim(1);

  std::vector<std::vector<double>> per_sample;
  per_sample.reserve(static_cast<std::size_t>(n));

  for (std::int64_t begin = 0; begin < n; begin += batch_size) {
    const std::int64_t end = std::min<std::int64_t>(n, begin + batch_size);
    const std::int64_t b = end - begin;
    Tensor vox(Shape{b, v});
    std::copy_n(voxel_inputs.data() + begin * v, b * v, vox.data());
    Tensor tgt(Shape{b, targets[0].dim(0), targets[0].dim(1), targets[0].dim(2)});
    for (std::int64_t i = 0; i < b; ++i) {
      const Tensor& t = targets[static_cast<std::size_t>(begin + i)];
      if (t.shape() != targets[0].shape())
        throw DataError("compute_saliency: ragged target shapes");
      std::copy_n(t.data(), t.size(), tgt.data() + i * t.size());
    }

    ad::Tape tape;
    models::BoundParams bp{&tape, &params, false, {}};
    ad::Value vin = tape.leaf(vox, true);
    ad::Value recon = models::decoder_forward_t(tape, spec, bp, vin, false);
    // ssim_t averages over the batch; scaling by B makes the root the SUM of
    // per-sample scores, whose gradient rows are the per-sample gradients
    ad::Value root = tape.mul_scalar(objectives::ssim_t(tape, tape.leaf(tgt), recon, sp),
                                     static_cast<double>(b));
    tape.backward(root);
    const Tensor& grad = tape.grad(vin);
    for (std::int64_t i = 0; i < b; ++i) {
      std::vector<double> row(static_cast<std::size_t>(v));
      for (std::int64_t j = 0; j < v; ++j) row[static_cast<std::size_t>(j)] = std::abs(grad[i * v + j]);
      per_sample.push_back(std::move(row));
    }
  }

  std::vector<double> score;
  pairwise_sum(per_sample, 0, per_sample.size(), score);
  return score;
}

std::vector<bool> top_fraction_mask(const std::vector<double>& scores, double fraction) {
  if (scores.empty()) throw DataError("top_fraction_mask: empty scores");
  if (fraction <= 0.0 || fraction > 1.0)
    throw DataError("top_fraction_mask: fraction must be in (0,1]");
  const int keep = count_ceil(fraction, static_cast<std::int64_t>(scores.size()));
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<bool> mask(scores.size(), false);
  for (int i = 0; i < keep; ++i)
    mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return mask;
}

std::vector<RegionRow> region_contributions(const std::vector<bool>& top_mask,
                                            const std::vector<std::string>& region_labels) {
  if (top_mask.size() != region_labels.size())
    throw DataError("region_contributions: labels must cover all voxels");
  std::vector<RegionRow> rows;
  std::map<std::string, std::size_t> by_name;
  for (std::size_t i = 0; i < region_labels.size(); ++i) {
    auto it = by_name.find(region_labels[i]);
    if (it == by_name.end()) {
      it = by_name.emplace(region_labels[i], rows.size()).first;
      rows.push_back(RegionRow{region_labels[i], 0, 0, 0, 0, 0});
    }
    RegionRow& row = rows[it->second];
    ++row.a;
    if (top_mask[i]) ++row.b;
  }
  const auto total_a = static_cast<double>(top_mask.size());
  const auto total_b =
      static_cast<double>(std::count(top_mask.begin(), top_mask.end(), true));
  for (auto& row : rows) {
    row.a_ratio_pct = 100.0 * static_cast<double>(row.a) / total_a;
    row.b_ratio_pct = total_b > 0 ? 100.0 * static_cast<double>(row.b) / total_b : 0.0;
    row.b_over_a_pct = 100.0 * static_cast<double>(row.b) / static_cast<double>(row.a);
  }
  return rows;
}

SaliencyResult analyze(const models::DecoderSpec& spec, models::ParamStore& params,
                       const Tensor& voxel_inputs, const std::vector<Tensor>& targets,
                       const std::vector<std::string>& region_labels, double top_fraction) {
  SaliencyResult res;
  res.per_voxel_score = compute_saliency(spec, params, voxel_inputs, targets);
  res.top_fraction = top_fraction;
  res.top_mask = top_fraction_mask(res.per_voxel_score, top_fraction);
  res.region_rows = region_contributions(res.top_mask, region_labels);
  return res;
}

void write_saliency_csv(const std::filesystem::path& path, const SaliencyResult& result,
                        const std::vector<int>& voxel_ids,
                        const std::vector<std::string>& region_labels) {
  std::ostringstream os;
  os << "voxel_id,region,score,selected\n";
  for (std::size_t i = 0; i < result.per_voxel_score.size(); ++i)
    os << voxel_ids[i] << "," << region_labels[i] << ","
       << io::format_double(result.per_voxel_score[i]) << "," << (result.top_mask[i] ? 1 : 0)
       << "\n";
  const std::string s = os.str();
  io::write_file(path, s.data(), s.size());
}

void write_regions_csv(const std::filesystem::path& path, const SaliencyResult& result) {
  std::ostringstream os;
  os << "region,A,B,A_ratio_pct,B_ratio_pct,B_over_A_pct\n";
  for (const auto& row : result.region_rows)
    os << row.region << "," << row.a << "," << row.b << ","
       << io::format_double(row.a_ratio_pct) << "," << io::format_double(row.b_ratio_pct)
       << "," << io::format_double(row.b_over_a_pct) << "\n";
  const std::string s = os.str();
  io::write_file(path, s.data(), s.size());
}

void write_scores_json(const std::filesystem::path& path, const SaliencyResult& result,
                       const std::vector<int>& voxel_ids) {
  io::json j = io::json::object();
  for (std::size_t i = 0; i < voxel_ids.size(); ++i)
    j[std::to_string(voxel_ids[i])] = result.per_voxel_score[i];
  io::save_json(path, j);
}

}  // namespace neurocodec::saliency
