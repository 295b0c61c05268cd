#include "neurocodec/fmri_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::fmri {

namespace fs = std::filesystem;

std::int64_t VoxelMask::selected_count() const {
  return std::count(selected.begin(), selected.end(), true);
}

std::vector<int> VoxelMask::selected_indices() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < selected.size(); ++i)
    if (selected[i]) idx.push_back(static_cast<int>(i));
  return idx;
}

Tensor zscore_voxels(const Tensor& data) {
  if (data.ndim() != 2) throw DataError("zscore_voxels: expected [T,V]");
  const std::int64_t t = data.dim(0), v = data.dim(1);
  if (t < 2) throw DataError("zscore_voxels: need at least 2 TRs");
  Tensor out(data.shape());
  for (std::int64_t j = 0; j < v; ++j) {
    double mean = 0.0;
    for (std::int64_t i = 0; i < t; ++i) mean += data[i * v + j];
    mean /= static_cast<double>(t);
    double q = 0.0;
    for (std::int64_t i = 0; i < t; ++i) {
      const double d = data[i * v + j] - mean;
      q += d * d;
    }
    const double sd = std::sqrt(q / static_cast<double>(t - 1));
    if (sd > 0.0) {
      for (std::int64_t i = 0; i < t; ++i) out[i * v + j] = (data[i * v + j] - mean) / sd;
    } else {
      for (std::int64_t i = 0; i < t; ++i) out[i * v + j] = 0.0;
    }
  }
  return out;
}

Tensor align_delay(const Tensor& fmri, std::int64_t n_chunks, int delay_tr) {
  if (fmri.ndim() != 2) throw DataError("align_delay: expected [T,V]");
  if (delay_tr < 0) throw DataError("align_delay: delay must be nonnegative");
  const std::int64_t t = fmri.dim(0), v = fmri.dim(1);
  if (t < n_chunks + delay_tr)
    throw DataError("align_delay: need " + std::to_string(n_chunks + delay_tr) +
                    " TRs, have " + std::to_string(t));
  Tensor out(Shape{n_chunks, v});
  std::copy_n(fmri.data() + static_cast<std::int64_t>(delay_tr) * v, n_chunks * v, out.data());
  return out;
}

std::vector<double> compute_snr(const SubjectStack& stack) {
  const std::int64_t s = stack.subjects(), t = stack.trs(), v = stack.voxels();
  if (s < 2 || t < 2) throw DataError("compute_snr: need S >= 2 and T >= 2");
  std::vector<double> snr(static_cast<std::size_t>(v));
  const double* d = stack.data.data();
  std::vector<double> group_mean(static_cast<std::size_t>(t));
  std::vector<double> subj_mean(static_cast<std::size_t>(s));
  for (std::int64_t j = 0; j < v; ++j) {
    for (std::int64_t i = 0; i < t; ++i) {
      double acc = 0.0;
      for (std::int64_t k = 0; k < s; ++k) acc += d[(k * t + i) * v + j];
      group_mean[static_cast<std::size_t>(i)] = acc / static_cast<double>(s);
    }
    for (std::int64_t k = 0; k < s; ++k) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < t; ++i) acc += d[(k * t + i) * v + j];
      subj_mean[static_cast<std::size_t>(k)] = acc / static_cast<double>(t);
    }
    double m = std::accumulate(group_mean.begin(), group_mean.end(), 0.0) / static_cast<double>(t);
    double signal_var = 0.0;
    for (double x : group_mean) signal_var += (x - m) * (x - m);
    signal_var /= static_cast<double>(t - 1);

    m = std::accumulate(subj_mean.begin(), subj_mean.end(), 0.0) / static_cast<double>(s);
    double noise_var = 0.0;
    for (double x : subj_mean) noise_var += (x - m) * (x - m);
    noise_var /= static_cast<double>(s - 1);

    snr[static_cast<std::size_t>(j)] =
        noise_var == 0.0 ? std::numeric_limits<double>::infinity() : signal_var / noise_var;
  }
  return snr;
}

std::vector<bool> select_top_fraction(const std::vector<double>& snr, double fraction) {
  if (snr.empty()) throw DataError("select_top_fraction: empty snr vector");
  if (fraction <= 0.0 || fraction > 1.0)
    throw DataError("select_top_fraction: fraction must be in (0,1]");
  const auto v = static_cast<std::int64_t>(snr.size());
  const int keep = count_floor(fraction, v);
  std::vector<int> order(snr.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (snr[static_cast<std::size_t>(a)] != snr[static_cast<std::size_t>(b)])
      return snr[static_cast<std::size_t>(a)] > snr[static_cast<std::size_t>(b)];
    return a < b;  // ties to the lower voxel id
  });
  std::vector<bool> sel(snr.size(), false);
  for (int i = 0; i < keep; ++i) sel[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  return sel;
}

Tensor average_subjects(const SubjectStack& stack) {
  const std::int64_t s = stack.subjects(), t = stack.trs(), v = stack.voxels();
  if (s < 1) throw DataError("average_subjects: empty stack");
  Tensor out(Shape{t, v});
  const double inv = 1.0 / static_cast<double>(s);
  const double* d = stack.data.data();
  for (std::int64_t k = 0; k < s; ++k) {
    const double* sp = d + k * t * v;
    for (std::int64_t i = 0; i < t * v; ++i) out[i] += sp[i];
  }
  for (std::int64_t i = 0; i < t * v; ++i) out[i] *= inv;
  return out;
}

SplitPlan make_split(const std::map<std::string, int>& movie_chunk_counts,
                     const std::string& held_out, double train_frac,
                     std::pair<int, int> ratio, std::uint64_t seed) {
  if (!movie_chunk_counts.count(held_out))
    throw DataError("make_split: unknown held-out movie \"" + held_out + "\"");
  if (train_frac <= 0.0 || train_frac >= 1.0)
    throw DataError("make_split: train_frac must be in (0,1)");
  if (ratio.first < 1 || ratio.second < 1) throw DataError("make_split: bad ratio");

  SplitPlan plan;
  plan.held_out_movie_id = held_out;
  plan.train_frac = train_frac;
  plan.ratio_train = ratio.first;
  plan.ratio_val = ratio.second;
  plan.seed = seed;

  for (const auto& [movie, n] : movie_chunk_counts) {
    if (n < 5) throw DataError("make_split: movie \"" + movie + "\" too short (" +
                               std::to_string(n) + " chunks)");
    SplitLists lists;
    if (movie == held_out) {
      lists.test.resize(static_cast<std::size_t>(n));
      std::iota(lists.test.begin(), lists.test.end(), 0);
    } else {
      const int pool = count_floor(train_frac, n);
      for (int i = pool; i < n; ++i) lists.test.push_back(i);
      // seeded uniform 4:1 assignment inside the pool, derived per movie so
      // per-movie parallelism cannot change the plan
      const int n_val = pool * ratio.second / (ratio.first + ratio.second);
      rng::Stream rs(rng::derive(seed, movie));
      std::vector<int> pool_idx = rs.permutation(pool);
      lists.val.assign(pool_idx.begin(), pool_idx.begin() + n_val);
      lists.train.assign(pool_idx.begin() + n_val, pool_idx.end());
      std::sort(lists.val.begin(), lists.val.end());
      std::sort(lists.train.begin(), lists.train.end());
    }
    plan.movies[movie] = std::move(lists);
  }
  return plan;
}

// ---- on-disk formats ----------------------------------------------------------

void write_subject_stack(const fs::path& dir, const SubjectStack& stack,
                         const std::string& movie_id) {
  fs::create_directories(dir);
  io::write_f32_tensor(dir / "fmri.bin", stack.data);
  io::json hdr = {{"subjects", stack.subjects()},
                  {"trs", stack.trs()},
                  {"voxels", stack.voxels()},
                  {"tr_seconds", stack.tr_seconds},
                  {"movie_id", movie_id}};
  io::save_json(dir / "fmri.json", hdr);
}

SubjectStack read_subject_stack(const fs::path& dir, std::string* movie_id) {
  const auto j = io::load_json(dir / "fmri.json");
  io::check_keys(j, {"subjects", "trs", "voxels", "tr_seconds", "movie_id"},
                 (dir / "fmri.json").string());
  FmriHeader h;
  h.subjects = j.at("subjects").get<std::int64_t>();
  h.trs = j.at("trs").get<std::int64_t>();
  h.voxels = j.at("voxels").get<std::int64_t>();
  h.tr_seconds = j.at("tr_seconds").get<double>();
  h.movie_id = j.at("movie_id").get<std::string>();
  if (h.subjects < 1 || h.trs < 2 || h.voxels < 1)
    throw DataError("bad fmri header in " + dir.string());
  SubjectStack s;
  s.tr_seconds = h.tr_seconds;
  s.data = io::read_f32_tensor(dir / "fmri.bin", Shape{h.subjects, h.trs, h.voxels});
  if (!s.data.all_finite()) throw DataError("non-finite fmri values in " + dir.string());
  if (movie_id) *movie_id = h.movie_id;
  return s;
}

void write_mask(const fs::path& path, const VoxelMask& mask) {
  io::json snr = io::json::array();
  for (double v : mask.snr) snr.push_back(io::snr_to_json(v));
  io::json j = {{"voxel_ids", mask.voxel_ids},
                {"region_labels", mask.region_label},
                {"snr", snr},
                {"selected", mask.selected}};
  io::save_json(path, j);
}

VoxelMask read_mask(const fs::path& path) {
  const auto j = io::load_json(path);
  io::check_keys(j, {"voxel_ids", "region_labels", "snr", "selected"}, path.string());
  VoxelMask m;
  m.voxel_ids = j.at("voxel_ids").get<std::vector<int>>();
  m.region_label = j.at("region_labels").get<std::vector<std::string>>();
  m.selected = j.at("selected").get<std::vector<bool>>();
  for (const auto& v : j.at("snr")) m.snr.push_back(io::json_snr_value(v));
  const auto n = m.voxel_ids.size();
  if (m.region_label.size() != n || m.selected.size() != n || m.snr.size() != n)
    throw DataError("mask field lengths disagree in " + path.string());
  return m;
}

void write_split(const fs::path& path, const SplitPlan& plan) {
  io::json movies = io::json::object();
  for (const auto& [id, lists] : plan.movies)
    movies[id] = {{"train", lists.train}, {"val", lists.val}, {"test", lists.test}};
  io::json j = {{"held_out_movie_id", plan.held_out_movie_id},
                {"train_frac", plan.train_frac},
                {"ratio", {plan.ratio_train, plan.ratio_val}},
                {"seed", plan.seed},
                {"movies", movies}};
  io::save_json(path, j);
}

SplitPlan read_split(const fs::path& path) {
  const auto j = io::load_json(path);
  io::check_keys(j, {"held_out_movie_id", "train_frac", "ratio", "seed", "movies"},
                 path.string());
  SplitPlan p;
  p.held_out_movie_id = j.at("held_out_movie_id").get<std::string>();
  p.train_frac = j.at("train_frac").get<double>();
  p.ratio_train = j.at("ratio")[0].get<int>();
  p.ratio_val = j.at("ratio")[1].get<int>();
  p.seed = j.at("seed").get<std::uint64_t>();
  for (auto it = j.at("movies").begin(); it != j.at("movies").end(); ++it) {
    SplitLists lists;
    lists.train = it.value().at("train").get<std::vector<int>>();
    lists.val = it.value().at("val").get<std::vector<int>>();
    lists.test = it.value().at("test").get<std::vector<int>>();
    p.movies[it.key()] = std::move(lists);
  }
  return p;
}

void write_voxel_series(const fs::path& dir, const VoxelSeries& series) {
  fs::create_directories(dir);
  io::write_f32_tensor(dir / "voxels.bin", series.data);
  io::json hdr = {{"movie_id", series.movie_id},
                  {"rows", series.data.dim(0)},
                  {"voxels", series.data.dim(1)},
                  {"delay_applied_tr", series.delay_applied_tr}};
  io::save_json(dir / "voxels.json", hdr);
}

VoxelSeries read_voxel_series(const fs::path& dir) {
  const auto j = io::load_json(dir / "voxels.json");
  io::check_keys(j, {"movie_id", "rows", "voxels", "delay_applied_tr"},
                 (dir / "voxels.json").string());
  VoxelSeries s;
  s.movie_id = j.at("movie_id").get<std::string>();
  s.delay_applied_tr = j.at("delay_applied_tr").get<int>();
  s.data = io::read_f32_tensor(dir / "voxels.bin",
                               Shape{j.at("rows").get<std::int64_t>(),
                                     j.at("voxels").get<std::int64_t>()});
  return s;
}

}  // namespace neurocodec::fmri
