#include "neurocodec/dataset.hpp"

#include <algorithm>

#include "neurocodec/codec_models.hpp"
#include "neurocodec/io.hpp"

namespace neurocodec::data {

namespace fs = std::filesystem;

const MovieData& Dataset::movie(const std::string& id) const {
  for (const auto& m : movies)
    if (m.id == id) return m;
  throw DataError("dataset has no movie \"" + id + "\"");
}

int Dataset::frame_size() const {
  if (movies.empty()) throw DataError("empty dataset");
  return static_cast<int>(movies.front().chunks.chunk_shape[2]);
}

std::int64_t Dataset::full_voxels() const { return mask.size(); }

Dataset load_dataset(const fs::path& dir) {
  Dataset ds;
  ds.mask = fmri::read_mask(dir / "mask.json");
  const fs::path movies_dir = dir / "movies";
  if (!fs::is_directory(movies_dir))
    throw DataError("processed dataset lacks movies/: " + dir.string());
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(movies_dir))
    if (e.is_directory()) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& mdir : entries) {
    MovieData m;
    m.chunks = stimulus::read_chunks(mdir);
    fmri::VoxelSeries series = fmri::read_voxel_series(mdir);
    m.id = m.chunks.movie_id;
    if (series.movie_id != m.id)
      throw DataError("movie id mismatch between chunks and voxels in " + mdir.string());
    if (series.data.dim(0) != m.chunks.n_chunks)
      throw DataError("chunk/voxel row mismatch in " + mdir.string());
    if (series.data.dim(1) != ds.mask.size())
      throw DataError("voxel count differs from mask in " + mdir.string());
    m.voxels = std::move(series.data);
    m.delay_applied_tr = series.delay_applied_tr;
    ds.movies.push_back(std::move(m));
  }
  if (ds.movies.empty()) throw DataError("no movies in dataset: " + dir.string());
  return ds;
}

VoxelView make_view(const fmri::VoxelMask& mask, MaskSelection sel) {
  VoxelView v;
  if (sel == MaskSelection::full) {
    v.columns.resize(static_cast<std::size_t>(mask.size()));
    for (std::size_t i = 0; i < v.columns.size(); ++i) v.columns[i] = static_cast<int>(i);
  } else {
    v.columns = mask.selected_indices();
    if (v.columns.empty()) throw DataError("snr_top view selects no voxels");
  }
  return v;
}

std::vector<SampleRef> gather_samples(const Dataset& ds, const fmri::SplitPlan& split,
                                      const std::string& section) {
  std::vector<SampleRef> refs;
  for (std::size_t m = 0; m < ds.movies.size(); ++m) {
    auto it = split.movies.find(ds.movies[m].id);
    if (it == split.movies.end())
      throw DataError("split plan lacks movie " + ds.movies[m].id);
    const std::vector<int>* list = nullptr;
    if (section == "train") list = &it->second.train;
    else if (section == "val") list = &it->second.val;
    else if (section == "test") list = &it->second.test;
    else throw DataError("unknown split section " + section);
    for (int c : *list) {
      if (c < 0 || c >= ds.movies[m].chunks.n_chunks)
        throw DataError("split index out of range for movie " + ds.movies[m].id);
      refs.push_back({static_cast<int>(m), c});
    }
  }
  return refs;
}

Batch assemble_batch(const Dataset& ds, const VoxelView& view,
                     const std::vector<SampleRef>& refs, std::size_t begin, std::size_t end) {
  if (begin >= end || end > refs.size()) throw DataError("assemble_batch: bad range");
  const auto b = static_cast<std::int64_t>(end - begin);
  const auto& shape = ds.movies.front().chunks.chunk_shape;  // [32,3,H,W]
  const std::int64_t t = shape[0], h = shape[2], w = shape[3];
  const std::int64_t vcount = view.count();

  Batch out;
  out.frames_btchw = Tensor(Shape{b, 3, t, h, w});
  out.targets = Tensor(Shape{b, 3, h, w});
  out.voxels = Tensor(Shape{b, vcount});

  for (std::int64_t i = 0; i < b; ++i) {
    const SampleRef ref = refs[begin + static_cast<std::size_t>(i)];
    const auto& movie = ds.movies[static_cast<std::size_t>(ref.movie)];
    const std::int64_t chunk_sz = shape_numel(shape);
    const float* px = movie.chunks.pixels.data() + static_cast<std::int64_t>(ref.chunk) * chunk_sz;
    // [T,C,H,W] -> [C,T,H,W]
    for (std::int64_t ti = 0; ti < t; ++ti)
      for (std::int64_t c = 0; c < 3; ++c) {
        const float* src = px + ((ti * 3 + c) * h) * w;
        double* dst = out.frames_btchw.data() + ((((i * 3 + c) * t) + ti) * h) * w;
        for (std::int64_t k = 0; k < h * w; ++k) dst[k] = static_cast<double>(src[k]);
      }
    const std::int64_t tf = movie.chunks.target_frame_index;
    const float* tgt = px + ((tf * 3 + 0) * h) * w;
    double* dst = out.targets.data() + i * 3 * h * w;
    for (std::int64_t k = 0; k < 3 * h * w; ++k) dst[k] = static_cast<double>(tgt[k]);

    const double* vox = movie.voxels.data() + static_cast<std::int64_t>(ref.chunk) * movie.voxels.dim(1);
    for (std::int64_t k = 0; k < vcount; ++k)
      out.voxels[i * vcount + k] = vox[view.columns[static_cast<std::size_t>(k)]];
  }
  return out;
}

Dataset dataset_from_synth(const synthcortex::SynthDataset& synth, int delay_tr) {
  Dataset ds;
  ds.mask = synth.mask;
  ds.tr_seconds = synth.config.tr_seconds;
  for (const auto& movie : synth.movies) {
    const std::int64_t n = static_cast<std::int64_t>(movie.chunks.size());
    const std::int64_t usable = n - delay_tr;
    if (usable < 5)
      throw DataError("synthetic movie too short for delay alignment: " + movie.id);

    MovieData m;
    m.id = movie.id;
    m.delay_applied_tr = delay_tr;
    m.chunks.movie_id = movie.id;
    m.chunks.n_chunks = usable;
    m.chunks.target_frame_index = movie.chunks.front().target_frame_index;
    m.chunks.chunk_shape = movie.chunks.front().frames.shape();
    const std::int64_t chunk_sz = shape_numel(m.chunks.chunk_shape);
    m.chunks.pixels.resize(static_cast<std::size_t>(usable * chunk_sz));
    for (std::int64_t i = 0; i < usable; ++i) {
      const Tensor& fr = movie.chunks[static_cast<std::size_t>(i)].frames;
      float* dst = m.chunks.pixels.data() + i * chunk_sz;
      for (std::int64_t k = 0; k < chunk_sz; ++k) dst[k] = static_cast<float>(fr[k]);
    }
    Tensor aligned = fmri::align_delay(movie.bold, usable, delay_tr);
    m.voxels = fmri::zscore_voxels(aligned);
    ds.movies.push_back(std::move(m));
  }
  return ds;
}

}  // namespace neurocodec::data
