#include "neurocodec/cli_runner.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <iostream>
#include <map>
#include <set>

#include "neurocodec/dataset.hpp"
#include "neurocodec/eval_stats.hpp"
#include "neurocodec/io.hpp"
#include "neurocodec/saliency.hpp"
#include "neurocodec/synthcortex.hpp"
#include "neurocodec/trainer.hpp"

namespace neurocodec::cli {

namespace fs = std::filesystem;
using io::json;

namespace {

// ---- shared plumbing --------------------------------------------------------

// Guards an output directory against concurrent commands.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "lock") {
    fs::create_directories(dir);
    if (fs::exists(path_))
      throw DataError("directory is locked by another command: " + dir.string());
    io::write_file(path_, "", 0);
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

// Relative output paths and content hashes; no timestamps or absolute
// paths, so re-runs with identical inputs produce byte-identical manifests.
class Manifest {
 public:
  Manifest(std::string command, fs::path root) : root_(std::move(root)) {
    doc_["schema_version"] = 1;
    doc_["command"] = std::move(command);
    doc_["outputs"] = json::array();
  }
  void resolved(const json& j) { doc_["resolved"] = j; }
  void add_output(const fs::path& file) {
    char hex[20];
    std::snprintf(hex, sizeof(hex), "%016llx",
                  static_cast<unsigned long long>(io::hash_file(file)));
    doc_["outputs"].push_back(
        {{"file", fs::relative(file, root_).generic_string()}, {"fnv1a64", hex}});
  }
  void write() { io::save_json(root_ / "manifest.json", doc_); }

 private:
  fs::path root_;
  json doc_;
};

json load_config_file(const std::string& path, const std::vector<std::string>& allowed) {
  if (path.empty()) return json::object();
  json j = io::load_json(path);
  std::vector<std::string> with_version = allowed;
  with_version.push_back("schema_version");
  io::check_keys(j, with_version, path);
  if (!j.contains("schema_version"))
    throw ConfigError(path + ": missing required key \"schema_version\"");
  if (j.at("schema_version").get<int>() != 1)
    throw ConfigError(path + ": unsupported schema_version");
  return j;
}

// flag/env (CLI11 count > 0) beats config file beats default
template <typename T>
void merge(const CLI::App& app, const std::string& flag, const json& cfg,
           const std::string& key, T& value) {
  if (app.count(flag) > 0) return;
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

std::string env_name(const std::string& flag) {
  std::string out = "NEUROCODEC_";
  for (char c : flag)
    out.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(c)));
  return out;
}

// ---- synth ------------------------------------------------------------------

int cmd_synth(const std::string& config_path, const std::string& out,
              const CLI::App& app, std::uint64_t seed) {
  const std::vector<std::string> keys = {
      "seed", "n_movies", "chunks_per_movie", "voxels", "features", "frame_size",
      "n_regions", "noise_sigma", "tr_seconds", "subjects", "informative_fraction",
      "hrf", "movie_prefix"};
  const json cfg = load_config_file(config_path, keys);

  synthcortex::SynthConfig sc;
  sc.seed = seed;
  merge(app, "--seed", cfg, "seed", sc.seed);
  if (cfg.contains("n_movies")) sc.n_movies = cfg.at("n_movies").get<int>();
  if (cfg.contains("chunks_per_movie")) sc.chunks_per_movie = cfg.at("chunks_per_movie").get<int>();
  if (cfg.contains("voxels")) sc.voxels = cfg.at("voxels").get<int>();
  if (cfg.contains("features")) sc.features = cfg.at("features").get<int>();
  if (cfg.contains("frame_size")) sc.frame_size = cfg.at("frame_size").get<int>();
  if (cfg.contains("n_regions")) sc.n_regions = cfg.at("n_regions").get<int>();
  if (cfg.contains("noise_sigma")) sc.noise_sigma = cfg.at("noise_sigma").get<double>();
  if (cfg.contains("tr_seconds")) sc.tr_seconds = cfg.at("tr_seconds").get<double>();
  if (cfg.contains("subjects")) sc.subjects = cfg.at("subjects").get<int>();
  if (cfg.contains("informative_fraction"))
    sc.informative_fraction = cfg.at("informative_fraction").get<double>();
  if (cfg.contains("movie_prefix")) sc.movie_prefix = cfg.at("movie_prefix").get<std::string>();
  if (cfg.contains("hrf")) {
    const json& h = cfg.at("hrf");
    io::check_keys(h, {"kind", "delay_tr"}, "hrf");
    const auto kind = h.at("kind").get<std::string>();
    if (kind == "delay") sc.hrf.kind = synthcortex::HrfSpec::Kind::delay;
    else if (kind == "double_gamma") sc.hrf.kind = synthcortex::HrfSpec::Kind::double_gamma;
    else throw ConfigError("hrf.kind must be \"delay\" or \"double_gamma\"");
    if (h.contains("delay_tr")) sc.hrf.delay_tr = h.at("delay_tr").get<int>();
  }

  DirLock lock(out);
  Manifest manifest("synth", out);
  synthcortex::SynthDataset ds = synthcortex::make_synth_dataset(sc);
  synthcortex::export_raw(ds, out);

  json resolved = {{"seed", sc.seed},
                   {"n_movies", sc.n_movies},
                   {"chunks_per_movie", sc.chunks_per_movie},
                   {"voxels", sc.voxels},
                   {"features", sc.features},
                   {"frame_size", sc.frame_size},
                   {"n_regions", sc.n_regions},
                   {"noise_sigma", sc.noise_sigma},
                   {"tr_seconds", sc.tr_seconds},
                   {"subjects", sc.subjects},
                   {"informative_fraction", sc.informative_fraction},
                   {"movie_prefix", sc.movie_prefix}};
  manifest.resolved(resolved);
  manifest.add_output(fs::path(out) / "dataset.json");
  manifest.add_output(fs::path(out) / "atlas.json");
  manifest.add_output(fs::path(out) / "ground_truth.json");
  manifest.add_output(fs::path(out) / "ground_truth_weights.bin");
  for (const auto& movie : ds.movies) {
    manifest.add_output(fs::path(out) / "movies" / movie.id / "fmri.bin");
    manifest.add_output(fs::path(out) / "movies" / movie.id / "movie.json");
  }
  manifest.write();
  std::cout << "synth: wrote " << ds.movies.size() << " movies to " << out << "\n";
  return 0;
}

// ---- preprocess -------------------------------------------------------------

int cmd_preprocess(const std::string& raw, const std::string& out, int delay_tr,
                   double snr_fraction, double train_frac, std::string held_out,
                   int target_size, std::uint64_t seed) {
  const json meta = io::load_json(fs::path(raw) / "dataset.json");
  const auto movie_ids = meta.at("movie_ids").get<std::vector<std::string>>();
  if (movie_ids.empty()) throw DataError("raw dataset has no movies");
  if (held_out.empty()) held_out = movie_ids.back();

  const json atlas = io::load_json(fs::path(raw) / "atlas.json");
  const auto region_labels = atlas.at("region_labels").get<std::vector<std::string>>();

  DirLock lock(out);
  Manifest manifest("preprocess", out);

  // stimulus: resample + chunk per movie
  struct Prepared {
    std::vector<stimulus::VideoChunk> chunks;
    fmri::SubjectStack stack;
  };
  std::map<std::string, Prepared> prepared;
  for (const auto& id : movie_ids) {
    const fs::path mdir = fs::path(raw) / "movies" / id;
    const auto sidecar = stimulus::read_movie_sidecar(mdir);
    if (sidecar.movie_id != id)
      throw DataError("movie id mismatch in " + mdir.string());
    Tensor frames = stimulus::load_movie_frames(mdir, sidecar);
    Tensor grid = stimulus::resample_movie(frames, sidecar.fps, meta.at("tr_seconds").get<double>(),
                                           target_size);
    Prepared p;
    p.chunks = stimulus::chunk_movie(grid, id);
    std::string fid;
    p.stack = fmri::read_subject_stack(mdir, &fid);
    prepared.emplace(id, std::move(p));
  }

  // one SNR ranking over the full session: concatenate stacks along time
  std::int64_t total_t = 0;
  const auto s0 = prepared.at(movie_ids.front()).stack.subjects();
  const auto v0 = prepared.at(movie_ids.front()).stack.voxels();
  for (const auto& id : movie_ids) {
    const auto& st = prepared.at(id).stack;
    if (st.subjects() != s0 || st.voxels() != v0)
      throw DataError("subject stacks disagree across movies");
    total_t += st.trs();
  }
  fmri::SubjectStack session;
  session.tr_seconds = meta.at("tr_seconds").get<double>();
  session.data = Tensor(Shape{s0, total_t, v0});
  std::int64_t row = 0;
  for (const auto& id : movie_ids) {
    const auto& st = prepared.at(id).stack;
    for (std::int64_t s = 0; s < s0; ++s)
      std::copy_n(st.data.data() + s * st.trs() * v0, st.trs() * v0,
                  session.data.data() + (s * total_t + row) * v0);
    row += st.trs();
  }
  const auto snr = fmri::compute_snr(session);
  const auto selected = fmri::select_top_fraction(snr, snr_fraction);

  fmri::VoxelMask mask;
  mask.voxel_ids = atlas.at("voxel_ids").get<std::vector<int>>();
  if (static_cast<std::int64_t>(mask.voxel_ids.size()) != v0)
    throw DataError("atlas voxel count does not match the fmri stacks");
  mask.region_label = region_labels;
  mask.snr = snr;
  mask.selected = selected;
  fmri::write_mask(fs::path(out) / "mask.json", mask);

  // per movie: per-subject normalization, averaging, delay alignment, final
  // normalization so the stored series meets the voxel-series contract
  std::map<std::string, int> usable_counts;
  for (const auto& id : movie_ids) {
    auto& p = prepared.at(id);
    const std::int64_t t = p.stack.trs();
    Tensor avg(Shape{t, v0});
    {
      Tensor norm_stack(Shape{p.stack.subjects(), t, v0});
      for (std::int64_t s = 0; s < p.stack.subjects(); ++s) {
        Tensor one(Shape{t, v0});
        std::copy_n(p.stack.data.data() + s * t * v0, t * v0, one.data());
        Tensor z = fmri::zscore_voxels(one);
        std::copy_n(z.data(), t * v0, norm_stack.data() + s * t * v0);
      }
      fmri::SubjectStack normed;
      normed.data = std::move(norm_stack);
      normed.tr_seconds = p.stack.tr_seconds;
      avg = fmri::average_subjects(normed);
    }
    const auto usable = std::min<std::int64_t>(static_cast<std::int64_t>(p.chunks.size()),
                                               t - delay_tr);
    if (usable < 5) throw DataError("movie too short after delay alignment: " + id);
    p.chunks.resize(static_cast<std::size_t>(usable));
    Tensor aligned = fmri::align_delay(avg, usable, delay_tr);

    fmri::VoxelSeries series;
    series.movie_id = id;
    series.delay_applied_tr = delay_tr;
    series.data = fmri::zscore_voxels(aligned);

    const fs::path mdir = fs::path(out) / "movies" / id;
    stimulus::write_chunks(mdir, id, p.chunks);
    fmri::write_voxel_series(mdir, series);
    manifest.add_output(mdir / "chunks.bin");
    manifest.add_output(mdir / "chunks.json");
    manifest.add_output(mdir / "voxels.bin");
    manifest.add_output(mdir / "voxels.json");
    usable_counts[id] = static_cast<int>(usable);
  }

  fmri::SplitPlan split = fmri::make_split(usable_counts, held_out, train_frac, {4, 1}, seed);
  fmri::write_split(fs::path(out) / "split.json", split);

  json resolved = {{"raw", raw},
                   {"delay_tr", delay_tr},
                   {"snr_fraction", snr_fraction},
                   {"train_frac", train_frac},
                   {"held_out", held_out},
                   {"target_size", target_size},
                   {"seed", seed},
                   {"selected_voxels", mask.selected_count()},
                   {"total_voxels", mask.size()}};
  manifest.resolved(resolved);
  manifest.add_output(fs::path(out) / "mask.json");
  manifest.add_output(fs::path(out) / "split.json");
  manifest.write();
  std::cout << "preprocess: " << movie_ids.size() << " movies, mask "
            << mask.selected_count() << "/" << mask.size() << " voxels\n";
  return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out, const CLI::App& app, const std::string& mode,
              const std::string& mask_sel, double epsilon, int epochs,
              std::uint64_t seed, int batch_size, double learning_rate) {
  const std::vector<std::string> keys = {"mode", "mask", "hyper", "batch_size",
                                         "encoder", "decoder", "pyramid",
                                         "pyramid_seed", "pyramid_weights"};
  const json cfg = load_config_file(config_path, keys);

  data::Dataset ds = data::load_dataset(data_dir);
  fmri::SplitPlan split = fmri::read_split(fs::path(data_dir) / "split.json");

  trainer::TrainOptions opt;
  if (cfg.contains("hyper")) opt.hyper = objectives::HyperConfig::from_json(cfg.at("hyper"));
  std::string mode_str = mode, mask_str = mask_sel;
  merge(app, "--mode", cfg, "mode", mode_str);
  merge(app, "--mask", cfg, "mask", mask_str);
  opt.mode = trainer::mode_from_name(mode_str);
  if (mask_str != "full" && mask_str != "snr_top")
    throw ConfigError("--mask must be full or snr_top");
  opt.mask = mask_str == "full" ? data::MaskSelection::full : data::MaskSelection::snr_top;
  if (app.count("--epsilon") > 0) opt.hyper.epsilon = epsilon;
  if (app.count("--epochs") > 0) opt.hyper.epochs = epochs;
  if (app.count("--seed") > 0) opt.hyper.seed = seed;
  if (app.count("--batch-size") > 0) opt.batch_size = batch_size;
  else if (cfg.contains("batch_size")) opt.batch_size = cfg.at("batch_size").get<int>();
  if (app.count("--learning-rate") > 0) opt.hyper.learning_rate = learning_rate;
  opt.hyper.validate();

  const data::VoxelView view = data::make_view(ds.mask, opt.mask);
  const int v = static_cast<int>(view.count());
  const int frame = ds.frame_size();
  if (cfg.contains("encoder")) {
    opt.encoder = models::EncoderSpec::from_json(cfg.at("encoder"));
  } else {
    opt.encoder = frame >= 96 ? models::EncoderSpec::reference(v, frame)
                              : models::EncoderSpec::desk(v, frame);
  }
  if (cfg.contains("decoder")) {
    opt.decoder = models::DecoderSpec::from_json(cfg.at("decoder"));
  } else {
    opt.decoder = frame >= 96 ? models::DecoderSpec::reference(v, frame)
                              : models::DecoderSpec::desk(v, frame);
  }
  if (cfg.contains("pyramid")) opt.pyramid = objectives::PyramidSpec::from_json(cfg.at("pyramid"));
  if (cfg.contains("pyramid_seed")) opt.pyramid_seed = cfg.at("pyramid_seed").get<std::uint64_t>();
  if (cfg.contains("pyramid_weights"))
    opt.pyramid_weights = cfg.at("pyramid_weights").get<std::string>();
  opt.run_dir = out;

  DirLock lock(out);
  Manifest manifest("train", out);
  trainer::TrainResult res = trainer::train(ds, split, opt);

  json resolved = {{"data", data_dir},
                   {"mode", trainer::mode_name(opt.mode)},
                   {"mask", mask_str},
                   {"batch_size", opt.batch_size},
                   {"hyper", opt.hyper.to_json()},
                   {"best_epoch", res.best_epoch},
                   {"voxels", v}};
  manifest.resolved(resolved);
  manifest.add_output(fs::path(out) / "config.json");
  manifest.add_output(fs::path(out) / "split.json");
  manifest.add_output(fs::path(out) / "history.csv");
  manifest.add_output(fs::path(out) / "best.bin");
  manifest.write();
  std::cout << "train: best epoch " << res.best_epoch << ", val loss "
            << io::format_double(res.best_val_loss) << "\n";
  return 0;
}

// ---- eval ---------------------------------------------------------------------

struct LoadedRun {
  json manifest;
  models::ParamStore params;
  models::EncoderSpec encoder;
  models::DecoderSpec decoder;
  bool has_decoder = false;
  std::string mode;
  data::MaskSelection mask = data::MaskSelection::full;
};

LoadedRun load_run(const fs::path& run_dir) {
  LoadedRun run;
  run.params = models::load_checkpoint(run_dir / "best.bin", &run.manifest);
  run.encoder = models::EncoderSpec::from_json(run.manifest.at("spec").at("encoder"));
  run.mode = run.manifest.at("mode").get<std::string>();
  run.has_decoder = run.mode == "end_to_end";
  if (run.has_decoder)
    run.decoder = models::DecoderSpec::from_json(run.manifest.at("spec").at("decoder"));
  const json cfg = io::load_json(run_dir / "config.json");
  run.mask = cfg.at("train_options").at("mask").get<std::string>() == "full"
                 ? data::MaskSelection::full
                 : data::MaskSelection::snr_top;
  return run;
}

Tensor predict_voxels(const data::Dataset& ds, const data::VoxelView& view,
                      const std::vector<data::SampleRef>& refs, const models::EncoderSpec& spec,
                      models::ParamStore& params, int batch_size) {
  Tensor out(Shape{static_cast<std::int64_t>(refs.size()), view.count()});
  const auto bsz = static_cast<std::size_t>(batch_size);
  for (std::size_t begin = 0; begin < refs.size(); begin += bsz) {
    const std::size_t end = std::min(refs.size(), begin + bsz);
    data::Batch batch = data::assemble_batch(ds, view, refs, begin, end);
    ad::Tape tape;
    models::BoundParams bp{&tape, &params, false, {}};
    const Tensor& pred = tape.val(models::encoder_forward_t(
        tape, spec, bp, tape.leaf(batch.frames_btchw), false, 0));
    std::copy_n(pred.data(), pred.size(),
                out.data() + static_cast<std::int64_t>(begin) * view.count());
  }
  return out;
}

Tensor gather_true_voxels(const data::Dataset& ds, const data::VoxelView& view,
                          const std::vector<data::SampleRef>& refs) {
  Tensor out(Shape{static_cast<std::int64_t>(refs.size()), view.count()});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const auto& movie = ds.movies[static_cast<std::size_t>(refs[i].movie)];
    const double* src = movie.voxels.data() +
                        static_cast<std::int64_t>(refs[i].chunk) * movie.voxels.dim(1);
    for (std::int64_t j = 0; j < view.count(); ++j)
      out[static_cast<std::int64_t>(i) * view.count() + j] =
          src[view.columns[static_cast<std::size_t>(j)]];
  }
  return out;
}

std::vector<Tensor> gather_targets(const data::Dataset& ds,
                                   const std::vector<data::SampleRef>& refs) {
  std::vector<Tensor> out;
  out.reserve(refs.size());
  for (const auto& ref : refs)
    out.push_back(ds.movies[static_cast<std::size_t>(ref.movie)].chunks.target_frame(ref.chunk));
  return out;
}

std::vector<Tensor> decode_frames(const data::Dataset& ds, const Tensor& voxels,
                                  const models::DecoderSpec& spec,
                                  models::ParamStore& params, int batch_size) {
  std::vector<Tensor> frames;
  const std::int64_t n = voxels.dim(0), v = voxels.dim(1);
  const int h = ds.frame_size();
  for (std::int64_t begin = 0; begin < n; begin += batch_size) {
    const std::int64_t end = std::min<std::int64_t>(n, begin + batch_size);
    Tensor batch(Shape{end - begin, v});
    std::copy_n(voxels.data() + begin * v, (end - begin) * v, batch.data());
    Tensor recon = models::decoder_forward(spec, params, batch, false);
    for (std::int64_t i = 0; i < end - begin; ++i) {
      Tensor frame(Shape{3, h, h});
      std::copy_n(recon.data() + i * frame.size(), frame.size(), frame.data());
      frames.push_back(std::move(frame));
    }
  }
  return frames;
}

json metric_values(const std::vector<double>& v) { return json(v); }

int cmd_eval(const std::string& run_dir, const std::string& data_dir, int shuffles,
             std::uint64_t seed, const std::string& predictions_path, int batch_size) {
  data::Dataset ds = data::load_dataset(data_dir);
  fmri::SplitPlan split = fmri::read_split(fs::path(run_dir) / "split.json");
  LoadedRun run = load_run(run_dir);
  const data::VoxelView view = data::make_view(ds.mask, run.mask);

  DirLock lock(fs::path(run_dir) / "eval");
  Manifest manifest("eval", fs::path(run_dir) / "eval");

  // per-movie blocks plus the pooled block over the concatenated test set
  json movies_json = json::array();
  std::vector<data::SampleRef> pooled_refs;
  std::vector<std::pair<std::string, std::vector<double>>> corr_by_movie, ssim_by_movie;
  std::int64_t pooled_trs = 0;

  for (std::size_t m = 0; m < ds.movies.size(); ++m) {
    const auto& id = ds.movies[m].id;
    auto it = split.movies.find(id);
    if (it == split.movies.end() || it->second.test.empty()) continue;
    std::vector<data::SampleRef> refs;
    for (int c : it->second.test) refs.push_back({static_cast<int>(m), c});
    pooled_refs.insert(pooled_refs.end(), refs.begin(), refs.end());
    pooled_trs += static_cast<std::int64_t>(refs.size());
  }
  if (pooled_refs.size() < 2) throw DataError("test split has fewer than 2 samples");

  Tensor v_true = gather_true_voxels(ds, view, pooled_refs);
  Tensor v_pred;
  if (!predictions_path.empty()) {
    const fs::path pbin(predictions_path);
    fs::path pjson = pbin;
    pjson.replace_extension(".json");
    const json hdr = io::load_json(pjson);
    v_pred = io::read_f32_tensor(pbin, Shape{hdr.at("rows").get<std::int64_t>(),
                                             hdr.at("voxels").get<std::int64_t>()});
    if (!same_shape(v_pred, v_true))
      throw DataError("supplied predictions do not match the test set shape");
  } else {
    v_pred = predict_voxels(ds, view, pooled_refs, run.encoder, run.params, batch_size);
  }

  stats::EncoderEval pooled_enc = stats::evaluate_encoder(v_true, v_pred);

  // per movie slices
  std::size_t offset = 0;
  for (std::size_t m = 0; m < ds.movies.size(); ++m) {
    const auto& id = ds.movies[m].id;
    auto it = split.movies.find(id);
    if (it == split.movies.end() || it->second.test.empty()) continue;
    const auto n = it->second.test.size();
    Tensor vt(Shape{static_cast<std::int64_t>(n), view.count()});
    Tensor vp(Shape{static_cast<std::int64_t>(n), view.count()});
    std::copy_n(v_true.data() + static_cast<std::int64_t>(offset) * view.count(),
                static_cast<std::int64_t>(n) * view.count(), vt.data());
    std::copy_n(v_pred.data() + static_cast<std::int64_t>(offset) * view.count(),
                static_cast<std::int64_t>(n) * view.count(), vp.data());
    stats::EncoderEval enc = stats::evaluate_encoder(vt, vp);
    corr_by_movie.emplace_back(id, enc.per_voxel_r);
    json mj = {{"id", id},
               {"test_trs", n},
               {"enc_corr_values", metric_values(enc.per_voxel_r)},
               {"enc_mse_values", metric_values(enc.per_voxel_mse)},
               {"mean_r", enc.mean_r},
               {"mse", enc.mse}};
    offset += n;
    movies_json.push_back(std::move(mj));
  }

  const auto nulls_corr = stats::null_pearson(v_true, v_pred, shuffles, seed);

  json pooled_json = {{"test_trs", pooled_trs},
                      {"enc_corr_values", metric_values(pooled_enc.per_voxel_r)},
                      {"enc_mse_values", metric_values(pooled_enc.per_voxel_mse)},
                      {"mean_r", pooled_enc.mean_r},
                      {"mse", pooled_enc.mse}};

  json null_json = {{"pearson", {{"seed", seed}, {"values", json(nulls_corr)}}}};

  // decoder side
  if (run.has_decoder) {
    const auto targets = gather_targets(ds, pooled_refs);
    const auto recon = decode_frames(ds, v_pred, run.decoder, run.params, batch_size);
    stats::DecoderEval pooled_dec = stats::evaluate_decoder(targets, recon);
    std::size_t frame_offset = 0;
    for (auto& mj : movies_json) {
      const auto n = mj.at("test_trs").get<std::size_t>();
      std::vector<Tensor> t_slice(targets.begin() + static_cast<std::ptrdiff_t>(frame_offset),
                                  targets.begin() + static_cast<std::ptrdiff_t>(frame_offset + n));
      std::vector<Tensor> r_slice(recon.begin() + static_cast<std::ptrdiff_t>(frame_offset),
                                  recon.begin() + static_cast<std::ptrdiff_t>(frame_offset + n));
      stats::DecoderEval dec = stats::evaluate_decoder(t_slice, r_slice);
      mj["dec_ssim_values"] = metric_values(dec.per_frame_ssim);
      mj["dec_mse_values"] = metric_values(dec.per_frame_mse);
      ssim_by_movie.emplace_back(mj.at("id").get<std::string>(), dec.per_frame_ssim);
      frame_offset += n;
    }
    pooled_json["dec_ssim_values"] = metric_values(pooled_dec.per_frame_ssim);
    pooled_json["dec_mse_values"] = metric_values(pooled_dec.per_frame_mse);
    pooled_json["mean_ssim"] = pooled_dec.mean_ssim;
    pooled_json["dec_mse"] = pooled_dec.mse;

    const auto nulls_s = stats::null_ssim(targets, recon, shuffles, seed + 1);
    null_json["ssim"] = {{"seed", seed + 1}, {"values", json(nulls_s)}};

    stats::MetricBlock ssim_block =
        stats::make_metric_block(pooled_dec.per_frame_ssim, ssim_by_movie);
    stats::NullBlock ssim_null = stats::make_null_block(nulls_s, seed + 1);
    stats::write_performance_svg(fs::path(run_dir) / "eval" / "decoder_performance.svg",
                                 "decoder performance (ssim)", ssim_block, &ssim_null);
  }

  json eval_json = {{"schema_version", 1},
                    {"run_name", fs::path(run_dir).filename().string()},
                    {"mode", run.mode},
                    {"has_decoder", run.has_decoder},
                    {"movies", movies_json},
                    {"pooled", pooled_json},
                    {"null", null_json}};
  io::save_json(fs::path(run_dir) / "eval" / "eval.json", eval_json);

  // predictions for downstream commands and external checks
  io::write_f32_tensor(fs::path(run_dir) / "eval" / "predictions.bin", v_pred);
  io::save_json(fs::path(run_dir) / "eval" / "predictions.json",
                {{"rows", v_pred.dim(0)}, {"voxels", v_pred.dim(1)}});

  stats::MetricBlock corr_block =
      stats::make_metric_block(pooled_enc.per_voxel_r, corr_by_movie);
  stats::NullBlock corr_null = stats::make_null_block(nulls_corr, seed);
  stats::write_performance_svg(fs::path(run_dir) / "eval" / "encoder_performance.svg",
                               "encoder performance (pearson)", corr_block, &corr_null);

  manifest.resolved({{"run", fs::path(run_dir).filename().string()},
                     {"shuffles", shuffles},
                     {"seed", seed},
                     {"external_predictions", !predictions_path.empty()}});
  manifest.add_output(fs::path(run_dir) / "eval" / "eval.json");
  manifest.add_output(fs::path(run_dir) / "eval" / "predictions.bin");
  manifest.add_output(fs::path(run_dir) / "eval" / "encoder_performance.svg");
  if (run.has_decoder)
    manifest.add_output(fs::path(run_dir) / "eval" / "decoder_performance.svg");
  manifest.write();
  std::cout << "eval: pooled mean corr " << io::format_double(pooled_enc.mean_r);
  if (run.has_decoder)
    std::cout << ", mean ssim "
              << io::format_double(pooled_json.at("mean_ssim").get<double>());
  std::cout << "\n";
  return 0;
}

// ---- saliency -------------------------------------------------------------------

int cmd_saliency(const std::string& run_dir, const std::string& data_dir,
                 double top_fraction, const std::string& input_kind, int batch_size) {
  data::Dataset ds = data::load_dataset(data_dir);
  fmri::SplitPlan split = fmri::read_split(fs::path(run_dir) / "split.json");
  LoadedRun run = load_run(run_dir);
  if (!run.has_decoder)
    throw DataError("saliency requires an end_to_end run with a decoder");
  if (input_kind != "predicted" && input_kind != "measured")
    throw ConfigError("--input must be predicted or measured");
  const data::VoxelView view = data::make_view(ds.mask, run.mask);

  const auto refs = data::gather_samples(ds, split, "test");
  if (refs.empty()) throw DataError("test split is empty");

  Tensor inputs = input_kind == "predicted"
                      ? predict_voxels(ds, view, refs, run.encoder, run.params, batch_size)
                      : gather_true_voxels(ds, view, refs);
  const auto targets = gather_targets(ds, refs);

  std::vector<std::string> region_labels;
  std::vector<int> voxel_ids;
  for (int col : view.columns) {
    region_labels.push_back(ds.mask.region_label[static_cast<std::size_t>(col)]);
    voxel_ids.push_back(ds.mask.voxel_ids[static_cast<std::size_t>(col)]);
  }

  DirLock lock(fs::path(run_dir) / "saliency");
  Manifest manifest("saliency", fs::path(run_dir) / "saliency");
  saliency::SaliencyResult result =
      saliency::analyze(run.decoder, run.params, inputs, targets, region_labels, top_fraction);

  saliency::write_saliency_csv(fs::path(run_dir) / "saliency" / "saliency.csv", result,
                               voxel_ids, region_labels);
  saliency::write_regions_csv(fs::path(run_dir) / "saliency" / "regions.csv", result);
  saliency::write_scores_json(fs::path(run_dir) / "saliency" / "scores.json", result,
                              voxel_ids);

  manifest.resolved({{"top_fraction", top_fraction},
                     {"input", input_kind},
                     {"samples", refs.size()}});
  manifest.add_output(fs::path(run_dir) / "saliency" / "saliency.csv");
  manifest.add_output(fs::path(run_dir) / "saliency" / "regions.csv");
  manifest.add_output(fs::path(run_dir) / "saliency" / "scores.json");
  manifest.write();
  std::cout << "saliency: " << result.region_rows.size() << " regions, top "
            << io::format_double(100.0 * top_fraction) << "%\n";
  return 0;
}

// ---- report ---------------------------------------------------------------------

stats::MetricBlock block_from_json(const json& pooled, const json& movies,
                                   const std::string& values_key, const std::string& n_key) {
  std::vector<std::pair<std::string, std::vector<double>>> per_movie;
  for (const auto& m : movies)
    if (m.contains(values_key))
      per_movie.emplace_back(m.at("id").get<std::string>(),
                             m.at(values_key).get<std::vector<double>>());
  auto mb = stats::make_metric_block(pooled.at(values_key).get<std::vector<double>>(),
                                     std::move(per_movie));
  // movie n = contributing test samples, not distribution size
  std::size_t i = 0;
  for (const auto& m : movies) {
    if (!m.contains(values_key)) continue;
    mb.per_movie[i].n = m.at(n_key).get<int>();
    ++i;
  }
  return mb;
}

int cmd_report(const std::vector<std::string>& run_dirs, const std::string& out) {
  if (run_dirs.empty()) throw ConfigError("report needs at least one --runs entry");
  std::vector<stats::RunEval> runs;
  for (const auto& dir : run_dirs) {
    const json ej = io::load_json(fs::path(dir) / "eval" / "eval.json");
    stats::RunEval run;
    run.run_name = ej.at("run_name").get<std::string>();
    run.has_decoder = ej.at("has_decoder").get<bool>();
    const json& pooled = ej.at("pooled");
    const json& movies = ej.at("movies");
    run.enc_corr = block_from_json(pooled, movies, "enc_corr_values", "test_trs");
    run.enc_mse = block_from_json(pooled, movies, "enc_mse_values", "test_trs");
    if (run.has_decoder) {
      run.dec_ssim = block_from_json(pooled, movies, "dec_ssim_values", "test_trs");
      run.dec_mse = block_from_json(pooled, movies, "dec_mse_values", "test_trs");
      if (ej.at("null").contains("ssim"))
        run.null_ssim = stats::make_null_block(
            ej.at("null").at("ssim").at("values").get<std::vector<double>>(),
            ej.at("null").at("ssim").at("seed").get<std::uint64_t>());
    }
    if (ej.at("null").contains("pearson"))
      run.null_corr = stats::make_null_block(
          ej.at("null").at("pearson").at("values").get<std::vector<double>>(),
          ej.at("null").at("pearson").at("seed").get<std::uint64_t>());
    runs.push_back(std::move(run));
  }

  DirLock lock(out);
  Manifest manifest("report", out);
  stats::EvalReport report = stats::build_report(runs);
  stats::write_report_csv(fs::path(out) / "report.csv", report);
  stats::write_comparisons_csv(fs::path(out) / "comparisons.csv", report);
  stats::write_metric_table_csv(fs::path(out) / "table_comparison.csv", report);

  json resolved = {{"runs", json::array()}};
  for (const auto& r : runs) resolved["runs"].push_back(r.run_name);
  manifest.resolved(resolved);
  manifest.add_output(fs::path(out) / "report.csv");
  manifest.add_output(fs::path(out) / "comparisons.csv");
  manifest.add_output(fs::path(out) / "table_comparison.csv");
  manifest.write();
  std::cout << "report: " << runs.size() << " runs, " << report.comparisons.size()
            << " comparisons\n";
  return 0;
}

// ---- validate ---------------------------------------------------------------------

int cmd_validate(const std::string& dir) {
  const fs::path root(dir);
  if (fs::exists(root / "dataset.json")) {
    const json meta = io::load_json(root / "dataset.json");
    const auto ids = meta.at("movie_ids").get<std::vector<std::string>>();
    for (const auto& id : ids) {
      const fs::path mdir = root / "movies" / id;
      const auto sidecar = stimulus::read_movie_sidecar(mdir);
      Tensor frames = stimulus::load_movie_frames(mdir, sidecar);
      if (frames.min() < 0.0 || frames.max() > 1.0)
        throw DataError("pixels out of range in " + mdir.string());
      std::string fid;
      fmri::read_subject_stack(mdir, &fid);
      if (fid != id) throw DataError("fmri movie id mismatch in " + mdir.string());
    }
    const json atlas = io::load_json(root / "atlas.json");
    if (atlas.at("voxel_ids").size() != atlas.at("region_labels").size())
      throw DataError("atlas field lengths disagree");
    std::cout << "validate: raw dataset ok (" << ids.size() << " movies)\n";
    return 0;
  }
  if (fs::exists(root / "mask.json")) {
    data::Dataset ds = data::load_dataset(root);
    fmri::read_split(root / "split.json");
    std::cout << "validate: processed dataset ok (" << ds.movies.size() << " movies, "
              << ds.mask.size() << " voxels)\n";
    return 0;
  }
  throw DataError("not a dataset directory: " + dir);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"movie/fMRI encoder-decoder pipeline"};
  app.require_subcommand(1);

  std::string config_path, out, raw, data_dir, run_dir, held_out;
  std::string mode = "end_to_end", mask_sel = "snr_top", input_kind = "predicted";
  std::string predictions_path;
  std::vector<std::string> run_dirs;
  std::uint64_t seed = 0;
  int epochs = 11, shuffles = 100, batch_size = 16, delay_tr = fmri::kDefaultDelayTr;
  int target_size = 0;
  double epsilon = 0.5, snr_fraction = fmri::kDefaultSnrFraction;
  double train_frac = fmri::kDefaultTrainFrac, top_fraction = 0.20, learning_rate = 1e-4;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON configuration file")
        ->envname(env_name("config"));
    cmd->add_option("--seed", seed, "random seed")->envname(env_name("seed"));
  };

  CLI::App* synth = app.add_subcommand("synth", "generate a synthetic raw dataset");
  add_common(synth);
  synth->add_option("--out", out, "output directory")->required()->envname(env_name("out"));

  CLI::App* preprocess =
      app.add_subcommand("preprocess", "standardize stimuli and fMRI, build mask and split");
  add_common(preprocess);
  preprocess->add_option("--raw", raw, "raw dataset directory")->required();
  preprocess->add_option("--out", out, "output directory")->required()->envname(env_name("out"));
  preprocess->add_option("--delay-tr", delay_tr, "hemodynamic delay in TRs")
      ->envname(env_name("delay-tr"));
  preprocess->add_option("--snr-fraction", snr_fraction, "kept fraction of top-SNR voxels");
  preprocess->add_option("--train-frac", train_frac, "leading fraction used for train+val");
  preprocess->add_option("--held-out", held_out, "movie excluded from training");
  preprocess->add_option("--target-size", target_size,
                         "square frame size (0 keeps the native size)");

  CLI::App* train = app.add_subcommand("train", "optimize a model on a processed dataset");
  add_common(train);
  train->add_option("--data", data_dir, "processed dataset directory")->required();
  train->add_option("--out", out, "run directory")->required()->envname(env_name("out"));
  train->add_option("--mode", mode, "encoder_only or end_to_end")->envname(env_name("mode"));
  train->add_option("--mask", mask_sel, "full or snr_top")->envname(env_name("mask"));
  train->add_option("--epsilon", epsilon, "combined-loss mix")->envname(env_name("epsilon"));
  train->add_option("--epochs", epochs, "training epochs")->envname(env_name("epochs"));
  train->add_option("--batch-size", batch_size, "batch size");
  train->add_option("--learning-rate", learning_rate, "Adam learning rate");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a trained run on its test split");
  add_common(eval);
  eval->add_option("--run", run_dir, "run directory")->required();
  eval->add_option("--data", data_dir, "processed dataset directory")->required();
  eval->add_option("--shuffles", shuffles, "null-distribution shuffles")
      ->envname(env_name("shuffles"));
  eval->add_option("--predictions", predictions_path,
                   "evaluate externally supplied predictions (.bin with .json sidecar)");
  eval->add_option("--batch-size", batch_size, "batch size");

  CLI::App* sal = app.add_subcommand("saliency", "attribute reconstructions to voxels");
  add_common(sal);
  sal->add_option("--run", run_dir, "run directory")->required();
  sal->add_option("--data", data_dir, "processed dataset directory")->required();
  sal->add_option("--top-fraction", top_fraction, "retained fraction of top scores")
      ->envname(env_name("top-fraction"));
  sal->add_option("--input", input_kind, "predicted or measured voxel inputs");
  sal->add_option("--batch-size", batch_size, "batch size");

  CLI::App* report = app.add_subcommand("report", "cross-run comparison tables");
  add_common(report);
  report->add_option("--runs", run_dirs, "run directories")->required();
  report->add_option("--out", out, "output directory")->required()->envname(env_name("out"));

  CLI::App* validate = app.add_subcommand("validate", "check a dataset directory");
  validate->add_option("dir", data_dir, "dataset directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(config_path, out, *synth, seed);
    if (preprocess->parsed())
      return cmd_preprocess(raw, out, delay_tr, snr_fraction, train_frac, held_out,
                            target_size, seed);
    if (train->parsed())
      return cmd_train(config_path, data_dir, out, *train, mode, mask_sel, epsilon, epochs,
                       seed, batch_size, learning_rate);
    if (eval->parsed())
      return cmd_eval(run_dir, data_dir, shuffles, seed, predictions_path, batch_size);
    if (sal->parsed())
      return cmd_saliency(run_dir, data_dir, top_fraction, input_kind, batch_size);
    if (report->parsed()) return cmd_report(run_dirs, out);
    if (validate->parsed()) return cmd_validate(data_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("neurocodec");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace neurocodec::cli
