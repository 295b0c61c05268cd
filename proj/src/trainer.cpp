#include "neurocodec/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "neurocodec/eval_stats.hpp"
#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::trainer {

namespace fs = std::filesystem;
using models::BoundParams;
using models::ParamStore;
using nlohmann::json;
using objectives::LossBreakdown;

std::string mode_name(TrainMode m) {
  return m == TrainMode::encoder_only ? "encoder_only" : "end_to_end";
}

TrainMode mode_from_name(const std::string& s) {
  if (s == "encoder_only") return TrainMode::encoder_only;
  if (s == "end_to_end") return TrainMode::end_to_end;
  throw ConfigError("unknown training mode \"" + s + "\"");
}

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

struct AdamState {
  // parallel to the trainable entries of (encoder, decoder) stores
  std::map<std::string, Tensor> m, v;
  std::int64_t step = 0;

  void ensure(const ParamStore& store) {
    for (const auto& e : store.entries)
      if (e.trainable && !m.count(e.name)) {
        m.emplace(e.name, Tensor(e.value.shape()));
        v.emplace(e.name, Tensor(e.value.shape()));
      }
  }

  void update(ParamStore& store, const std::vector<std::pair<int, ad::Value>>& bound,
              const ad::Tape& tape, double lr) {
    const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
    for (const auto& [entry, value] : bound) {
      auto& e = store.entries[static_cast<std::size_t>(entry)];
      if (!e.trainable) continue;
      const Tensor& grad = tape.grad(value);
      Tensor& mm = m.at(e.name);
      Tensor& vv = v.at(e.name);
      for (std::int64_t i = 0; i < grad.size(); ++i) {
        mm[i] = kAdamBeta1 * mm[i] + (1.0 - kAdamBeta1) * grad[i];
        vv[i] = kAdamBeta2 * vv[i] + (1.0 - kAdamBeta2) * grad[i] * grad[i];
        const double mhat = mm[i] / bc1;
        const double vhat = vv[i] / bc2;
        e.value[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
      }
    }
  }
};

struct StepLoss {
  LossBreakdown bd;
  ad::Value root;
};

// Builds the mode-appropriate loss for one batch on the given tape.
StepLoss batch_loss(ad::Tape& tape, const TrainOptions& opt, BoundParams& enc_bp,
                    BoundParams& dec_bp, const objectives::FeaturePyramid& pyr,
                    const data::Batch& batch, bool train_mode, std::uint64_t dropout_seed) {
  StepLoss out;
  ad::Value x = tape.leaf(batch.frames_btchw);
  ad::Value v_true = tape.leaf(batch.voxels);
  ad::Value v_pred =
      models::encoder_forward_t(tape, opt.encoder, enc_bp, x, train_mode, dropout_seed);

  if (opt.mode == TrainMode::encoder_only) {
    auto enc = objectives::encoder_loss_t(tape, v_true, v_pred, opt.hyper.alpha);
    out.bd.mse_v = tape.scalar(enc.mse);
    out.bd.cos_dist = tape.scalar(enc.cos_dist);
    out.bd.encoder_loss = tape.scalar(enc.total);
    out.bd.combined_loss = out.bd.encoder_loss;
    out.bd.cosine_zero_rows = enc.cosine_zero_rows;
    out.root = enc.total;
    return out;
  }

  ad::Value f_true = tape.leaf(batch.targets);
  ad::Value f_pred = models::decoder_forward_t(tape, opt.decoder, dec_bp, v_pred, train_mode);
  auto lv = objectives::combined_loss_t(tape, v_true, v_pred, f_true, f_pred, pyr, opt.hyper);
  out.bd.mse_v = tape.scalar(lv.enc.mse);
  out.bd.cos_dist = tape.scalar(lv.enc.cos_dist);
  out.bd.encoder_loss = tape.scalar(lv.enc.total);
  out.bd.psim = tape.scalar(lv.dec.psim);
  out.bd.ssim_loss = tape.scalar(lv.dec.ssim_loss);
  out.bd.tv = tape.scalar(lv.dec.tv);
  out.bd.decoder_loss = tape.scalar(lv.dec.total);
  out.bd.combined_loss = tape.scalar(lv.total);
  out.bd.cosine_zero_rows = lv.enc.cosine_zero_rows;
  out.root = lv.total;
  return out;
}

void accumulate(LossBreakdown& into, const LossBreakdown& part, double weight) {
  into.mse_v += weight * part.mse_v;
  into.cos_dist += weight * part.cos_dist;
  into.encoder_loss += weight * part.encoder_loss;
  into.psim += weight * part.psim;
  into.ssim_loss += weight * part.ssim_loss;
  into.tv += weight * part.tv;
  into.decoder_loss += weight * part.decoder_loss;
  into.combined_loss += weight * part.combined_loss;
  into.cosine_zero_rows += part.cosine_zero_rows;
}

LossBreakdown evaluate_split(const data::Dataset& ds, const data::VoxelView& view,
                             const std::vector<data::SampleRef>& refs, const TrainOptions& opt,
                             ParamStore& enc, ParamStore& dec,
                             const objectives::FeaturePyramid& pyr) {
  LossBreakdown total;
  if (refs.empty()) return total;
  const auto bsz = static_cast<std::size_t>(opt.batch_size);
  for (std::size_t begin = 0; begin < refs.size(); begin += bsz) {
    const std::size_t end = std::min(refs.size(), begin + bsz);
    data::Batch batch = data::assemble_batch(ds, view, refs, begin, end);
    ad::Tape tape;
    BoundParams enc_bp{&tape, &enc, false, {}};
    BoundParams dec_bp{&tape, &dec, false, {}};
    StepLoss sl = batch_loss(tape, opt, enc_bp, dec_bp, pyr, batch, false, 0);
    accumulate(total, sl.bd, static_cast<double>(end - begin) / static_cast<double>(refs.size()));
  }
  return total;
}

json options_to_json(const TrainOptions& opt) {
  return {{"mode", mode_name(opt.mode)},
          {"hyper", opt.hyper.to_json()},
          {"batch_size", opt.batch_size},
          {"mask", opt.mask == data::MaskSelection::full ? "full" : "snr_top"},
          {"encoder", opt.encoder.to_json()},
          {"decoder", opt.decoder.to_json()},
          {"pyramid", opt.pyramid.to_json()},
          {"pyramid_seed", opt.pyramid_seed},
          {"pyramid_weights", opt.pyramid_weights.generic_string()},
          {"keep_checkpoint_every", opt.keep_checkpoint_every}};
}

TrainOptions options_from_json(const json& j) {
  TrainOptions opt;
  opt.mode = mode_from_name(j.at("mode").get<std::string>());
  opt.hyper = objectives::HyperConfig::from_json(j.at("hyper"));
  opt.batch_size = j.at("batch_size").get<int>();
  opt.mask = j.at("mask").get<std::string>() == "full" ? data::MaskSelection::full
                                                       : data::MaskSelection::snr_top;
  opt.encoder = models::EncoderSpec::from_json(j.at("encoder"));
  opt.decoder = models::DecoderSpec::from_json(j.at("decoder"));
  opt.pyramid = objectives::PyramidSpec::from_json(j.at("pyramid"));
  opt.pyramid_seed = j.at("pyramid_seed").get<std::uint64_t>();
  if (j.contains("pyramid_weights"))
    opt.pyramid_weights = j.at("pyramid_weights").get<std::string>();
  opt.keep_checkpoint_every = j.at("keep_checkpoint_every").get<int>();
  return opt;
}

ParamStore merge_stores(const ParamStore& enc, const ParamStore& dec, const AdamState& adam) {
  ParamStore out;
  for (const auto& e : enc.entries) out.add(e.name, e.value, e.trainable);
  for (const auto& e : dec.entries) out.add(e.name, e.value, e.trainable);
  for (const auto& [name, t] : adam.m) out.add("adam.m." + name, t, false);
  for (const auto& [name, t] : adam.v) out.add("adam.v." + name, t, false);
  return out;
}

void split_stores(const ParamStore& merged, ParamStore& enc, ParamStore& dec, AdamState& adam) {
  for (const auto& e : merged.entries) {
    if (e.name.rfind("adam.m.", 0) == 0) adam.m.emplace(e.name.substr(7), e.value);
    else if (e.name.rfind("adam.v.", 0) == 0) adam.v.emplace(e.name.substr(7), e.value);
    else if (e.name.rfind("enc.", 0) == 0) enc.add(e.name, e.value, e.trainable);
    else if (e.name.rfind("dec.", 0) == 0) dec.add(e.name, e.value, e.trainable);
    else throw DataError("unexpected checkpoint tensor " + e.name);
  }
}

fs::path epoch_path(const fs::path& run_dir, int epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03d.bin", epoch);
  return run_dir / "checkpoints" / buf;
}

TrainResult train_loop(const data::Dataset& ds, const fmri::SplitPlan& split,
                       const TrainOptions& opt, ParamStore enc, ParamStore dec,
                       AdamState adam, int start_epoch, std::vector<EpochStats> history) {
  opt.hyper.validate();
  if (opt.batch_size < 1) throw ConfigError("batch_size must be positive");

  const data::VoxelView view = data::make_view(ds.mask, opt.mask);
  if (view.count() != opt.encoder.voxels())
    throw DataError("encoder output width " + std::to_string(opt.encoder.voxels()) +
                    " does not match the voxel view (" + std::to_string(view.count()) + ")");
  if (opt.mode == TrainMode::end_to_end && opt.decoder.in_voxels != opt.encoder.voxels())
    throw DataError("decoder in_voxels does not match the encoder output");

  const auto train_refs = data::gather_samples(ds, split, "train");
  const auto val_refs = data::gather_samples(ds, split, "val");
  if (train_refs.empty()) throw DataError("empty train split");

  const objectives::FeaturePyramid pyr =
      opt.pyramid_weights.empty()
          ? objectives::make_random_pyramid(opt.pyramid, opt.pyramid_seed)
          : objectives::load_pyramid(opt.pyramid_weights);

  const bool to_disk = !opt.run_dir.empty();
  if (to_disk) {
    fs::create_directories(opt.run_dir / "checkpoints");
    io::save_json(opt.run_dir / "config.json",
                  {{"schema_version", 1}, {"train_options", options_to_json(opt)}});
    fmri::write_split(opt.run_dir / "split.json", split);
  }

  adam.ensure(enc);
  if (opt.mode == TrainMode::end_to_end) adam.ensure(dec);

  TrainResult result;
  result.history = std::move(history);

  // best-so-far tracking survives resume via the stored history
  int best_epoch = -1;
  double best_val = 0.0;
  ParamStore best_enc, best_dec;
  bool have_best_copy = false;
  auto mode_loss = [&](const LossBreakdown& bd) {
    return opt.mode == TrainMode::encoder_only ? bd.encoder_loss : bd.combined_loss;
  };
  for (const auto& h : result.history) {
    const double l = mode_loss(h.val);
    if (best_epoch < 0 || l < best_val) {
      best_val = l;
      best_epoch = h.epoch;
    }
  }

  for (int epoch = start_epoch; epoch < opt.hyper.epochs; ++epoch) {
    rng::Stream shuffle_rs(rng::derive(opt.hyper.seed, "epoch-shuffle",
                                       static_cast<std::uint64_t>(epoch)));
    const auto order = shuffle_rs.permutation(static_cast<int>(train_refs.size()));
    std::vector<data::SampleRef> shuffled(train_refs.size());
    for (std::size_t i = 0; i < order.size(); ++i)
      shuffled[i] = train_refs[static_cast<std::size_t>(order[i])];

    LossBreakdown train_bd;
    const auto bsz = static_cast<std::size_t>(opt.batch_size);
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < shuffled.size(); begin += bsz, ++batch_index) {
      const std::size_t end = std::min(shuffled.size(), begin + bsz);
      data::Batch batch = data::assemble_batch(ds, view, shuffled, begin, end);
      ad::Tape tape;
      BoundParams enc_bp{&tape, &enc, true, {}};
      BoundParams dec_bp{&tape, &dec, true, {}};
      const std::uint64_t dropout_seed = rng::derive(
          opt.hyper.seed, "dropout",
          static_cast<std::uint64_t>(epoch) * 1000003ULL + batch_index);
      StepLoss sl = batch_loss(tape, opt, enc_bp, dec_bp, pyr, batch, true, dropout_seed);
      if (!std::isfinite(sl.bd.combined_loss))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", batch " + std::to_string(batch_index));
      tape.backward(sl.root);
      ++adam.step;
      adam.update(enc, enc_bp.bound, tape, opt.hyper.learning_rate);
      if (opt.mode == TrainMode::end_to_end)
        adam.update(dec, dec_bp.bound, tape, opt.hyper.learning_rate);
      accumulate(train_bd, sl.bd,
                 static_cast<double>(end - begin) / static_cast<double>(shuffled.size()));
    }

    EpochStats es;
    es.epoch = epoch;
    es.train = train_bd;
    es.val = evaluate_split(ds, view, val_refs, opt, enc, dec, pyr);
    es.val_encoder_corr =
        val_refs.empty() ? 0.0
                         : encoder_correlation(ds, view, val_refs, opt.encoder, enc,
                                               opt.batch_size);
    result.history.push_back(es);

    const double vloss = mode_loss(es.val);
    if (best_epoch < 0 || vloss < best_val) {
      best_val = vloss;
      best_epoch = epoch;
      best_enc = enc;
      best_dec = dec;
      have_best_copy = true;
    }

    if (to_disk && (epoch % std::max(1, opt.keep_checkpoint_every) == 0 ||
                    epoch + 1 == opt.hyper.epochs)) {
      json manifest = {{"epoch", epoch},
                       {"adam_step", adam.step},
                       {"best_epoch", best_epoch},
                       {"best_val_loss", best_val},
                       {"spec", {{"encoder", opt.encoder.to_json()},
                                 {"decoder", opt.decoder.to_json()}}},
                       {"seed", opt.hyper.seed},
                       {"hyperconfig", opt.hyper.to_json()},
                       {"mode", mode_name(opt.mode)}};
      save_checkpoint(epoch_path(opt.run_dir, epoch), merge_stores(enc, dec, adam), manifest);
      write_history_csv(opt.run_dir / "history.csv", result.history, opt.mode);
    }
  }

  result.best_epoch = best_epoch;
  result.best_val_loss = best_val;

  if (opt.hyper.epochs == 0 || best_epoch < 0) {
    result.encoder_params = enc;
    result.decoder_params = dec;
  } else if (have_best_copy) {
    result.encoder_params = std::move(best_enc);
    result.decoder_params = std::move(best_dec);
  } else {
    // resumed run whose best epoch predates the resume point
    json manifest;
    ParamStore merged = models::load_checkpoint(epoch_path(opt.run_dir, best_epoch), &manifest);
    ParamStore be, bd_;
    AdamState dummy;
    split_stores(merged, be, bd_, dummy);
    result.encoder_params = std::move(be);
    result.decoder_params = std::move(bd_);
  }

  if (to_disk && best_epoch >= 0) {
    json best_manifest = {{"epoch", best_epoch},
                          {"best_epoch", best_epoch},
                          {"best_val_loss", best_val},
                          {"spec", {{"encoder", opt.encoder.to_json()},
                                    {"decoder", opt.decoder.to_json()}}},
                          {"seed", opt.hyper.seed},
                          {"hyperconfig", opt.hyper.to_json()},
                          {"mode", mode_name(opt.mode)}};
    ParamStore best;
    for (const auto& e : result.encoder_params.entries) best.add(e.name, e.value, e.trainable);
    for (const auto& e : result.decoder_params.entries) best.add(e.name, e.value, e.trainable);
    save_checkpoint(opt.run_dir / "best.bin", best, best_manifest);
    write_history_csv(opt.run_dir / "history.csv", result.history, opt.mode);
  }
  return result;
}

}  // namespace

TrainResult train(const data::Dataset& ds, const fmri::SplitPlan& split,
                  const TrainOptions& options) {
  ParamStore enc = models::init_encoder_params(options.encoder, options.hyper.seed);
  ParamStore dec;
  if (options.mode == TrainMode::end_to_end)
    dec = models::init_decoder_params(options.decoder, options.hyper.seed + 1);
  return train_loop(ds, split, options, std::move(enc), std::move(dec), AdamState{}, 0, {});
}

TrainResult resume(const fs::path& run_dir, const data::Dataset& ds,
                   const fmri::SplitPlan& split) {
  const json cfg = io::load_json(run_dir / "config.json");
  TrainOptions opt = options_from_json(cfg.at("train_options"));
  opt.run_dir = run_dir;

  // latest epoch checkpoint
  int latest = -1;
  const fs::path cdir = run_dir / "checkpoints";
  if (fs::is_directory(cdir))
    for (const auto& e : fs::directory_iterator(cdir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("epoch_", 0) == 0)
        latest = std::max(latest, std::stoi(name.substr(6, 3)));
    }
  if (latest < 0) throw DataError("no checkpoints to resume in " + run_dir.string());

  json manifest;
  ParamStore merged = models::load_checkpoint(epoch_path(run_dir, latest), &manifest);
  ParamStore enc, dec;
  AdamState adam;
  split_stores(merged, enc, dec, adam);
  adam.step = manifest.at("adam_step").get<std::int64_t>();

  // replay recorded history so best-epoch tracking carries over
  std::vector<EpochStats> history;
  const fs::path hpath = run_dir / "history.csv";
  if (fs::exists(hpath)) {
    const auto bytes = io::read_file(hpath);
    std::istringstream is(std::string(bytes.begin(), bytes.end()));
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::istringstream ls(line);
      std::string tok;
      EpochStats es;
      auto next = [&]() {
        std::getline(ls, tok, ',');
        return tok;
      };
      es.epoch = std::stoi(next());
      auto read_bd = [&](LossBreakdown& bd) {
        bd.mse_v = std::stod(next());
        bd.cos_dist = std::stod(next());
        bd.encoder_loss = std::stod(next());
        bd.psim = std::stod(next());
        bd.ssim_loss = std::stod(next());
        bd.tv = std::stod(next());
        bd.decoder_loss = std::stod(next());
        bd.combined_loss = std::stod(next());
      };
      read_bd(es.train);
      read_bd(es.val);
      es.val_encoder_corr = std::stod(next());
      if (es.epoch <= latest) history.push_back(es);
    }
  }

  return train_loop(ds, split, opt, std::move(enc), std::move(dec), std::move(adam),
                    latest + 1, std::move(history));
}

double encoder_correlation(const data::Dataset& ds, const data::VoxelView& view,
                           const std::vector<data::SampleRef>& refs,
                           const models::EncoderSpec& spec, ParamStore& params,
                           int batch_size) {
  if (refs.size() < 2) throw DataError("encoder_correlation: need at least 2 samples");
  const std::int64_t vcount = view.count();
  Tensor v_true(Shape{static_cast<std::int64_t>(refs.size()), vcount});
  Tensor v_pred(Shape{static_cast<std::int64_t>(refs.size()), vcount});
  const auto bsz = static_cast<std::size_t>(batch_size);
  for (std::size_t begin = 0; begin < refs.size(); begin += bsz) {
    const std::size_t end = std::min(refs.size(), begin + bsz);
    data::Batch batch = data::assemble_batch(ds, view, refs, begin, end);
    ad::Tape tape;
    BoundParams bp{&tape, &params, false, {}};
    ad::Value out = models::encoder_forward_t(tape, spec, bp, tape.leaf(batch.frames_btchw),
                                              false, 0);
    const Tensor& pred = tape.val(out);
    for (std::int64_t i = 0; i < pred.dim(0); ++i)
      for (std::int64_t j = 0; j < vcount; ++j) {
        v_true[(static_cast<std::int64_t>(begin) + i) * vcount + j] = batch.voxels[i * vcount + j];
        v_pred[(static_cast<std::int64_t>(begin) + i) * vcount + j] = pred[i * vcount + j];
      }
  }
  return stats::evaluate_encoder(v_true, v_pred).mean_r;
}

std::vector<GridCell> grid_search(const std::vector<double>& epsilons,
                                  const std::vector<int>& epoch_grid,
                                  const data::Dataset& ds, const fmri::SplitPlan& split,
                                  TrainOptions base) {
  if (epsilons.empty() || epoch_grid.empty()) throw ConfigError("grid_search: empty grid");
  std::vector<GridCell> cells;
  for (double eps : epsilons)
    for (int epochs : epoch_grid) {
      TrainOptions opt = base;
      opt.run_dir.clear();
      opt.hyper.epsilon = eps;
      opt.hyper.epochs = epochs;
      TrainResult res = train(ds, split, opt);
      GridCell cell;
      cell.epsilon = eps;
      cell.epochs = epochs;
      if (!res.history.empty()) {
        const auto& best =
            res.history[static_cast<std::size_t>(std::max(res.best_epoch, 0))];
        cell.val_encoder_corr = best.val_encoder_corr;
        cell.val_loss = res.best_val_loss;
      }
      cells.push_back(cell);
    }
  std::stable_sort(cells.begin(), cells.end(), [](const GridCell& a, const GridCell& b) {
    return a.val_encoder_corr > b.val_encoder_corr;
  });
  if (!cells.empty()) cells.front().best = true;
  return cells;
}

void write_grid_csv(const fs::path& path, const std::vector<GridCell>& cells) {
  std::ostringstream os;
  os << "epsilon,epochs,val_encoder_corr,val_loss,best\n";
  for (const auto& cell : cells)
    os << io::format_double(cell.epsilon) << "," << cell.epochs << ","
       << io::format_double(cell.val_encoder_corr) << "," << io::format_double(cell.val_loss)
       << "," << (cell.best ? 1 : 0) << "\n";
  const std::string s = os.str();
  io::write_file(path, s.data(), s.size());
}

void write_history_csv(const fs::path& path, const std::vector<EpochStats>& history,
                       TrainMode mode) {
  std::ostringstream os;
  os << "epoch";
  for (const char* scope : {"train", "val"})
    os << "," << scope << "_mse_v," << scope << "_cos_dist," << scope << "_encoder_loss,"
       << scope << "_psim," << scope << "_ssim_loss," << scope << "_tv," << scope
       << "_decoder_loss," << scope << "_combined_loss";
  os << ",val_encoder_corr,mode\n";
  for (const auto& es : history) {
    os << es.epoch;
    for (const LossBreakdown* bd : {&es.train, &es.val})
      os << "," << io::format_double(bd->mse_v) << "," << io::format_double(bd->cos_dist)
         << "," << io::format_double(bd->encoder_loss) << "," << io::format_double(bd->psim)
         << "," << io::format_double(bd->ssim_loss) << "," << io::format_double(bd->tv) << ","
         << io::format_double(bd->decoder_loss) << ","
         << io::format_double(bd->combined_loss);
    os << "," << io::format_double(es.val_encoder_corr) << "," << mode_name(mode) << "\n";
  }
  const std::string s = os.str();
  io::write_file(path, s.data(), s.size());
}

}  // namespace neurocodec::trainer
