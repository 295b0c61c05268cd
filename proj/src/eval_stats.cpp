#include "neurocodec/eval_stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

#include "neurocodec/io.hpp"
#include "neurocodec/rng.hpp"

namespace neurocodec::stats {

double pearson(const std::vector<double>& x, const std::vector<double>& y, bool* degenerate) {
  if (x.size() != y.size()) throw DataError("pearson: length mismatch");
  if (x.size() < 2) throw DataError("pearson: need at least 2 samples");
  const auto n = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) {
    if (degenerate) *degenerate = true;
    return 0.0;
  }
  if (degenerate) *degenerate = false;
  return sxy / std::sqrt(sxx * syy);
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of empty vector");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

EncoderEval evaluate_encoder(const Tensor& v_true, const Tensor& v_pred) {
  if (!same_shape(v_true, v_pred) || v_true.ndim() != 2)
    throw DataError("evaluate_encoder: expected matching [T,V]");
  const std::int64_t t = v_true.dim(0), v = v_true.dim(1);
  if (t < 2) throw DataError("evaluate_encoder: need T >= 2");
  EncoderEval out;
  std::vector<double> xt(static_cast<std::size_t>(t)), yt(static_cast<std::size_t>(t));
  for (std::int64_t j = 0; j < v; ++j) {
    for (std::int64_t i = 0; i < t; ++i) {
      xt[static_cast<std::size_t>(i)] = v_true[i * v + j];
      yt[static_cast<std::size_t>(i)] = v_pred[i * v + j];
    }
    bool deg = false;
    out.per_voxel_r.push_back(pearson(xt, yt, &deg));
    if (deg) ++out.degenerate_voxels;
    double q = 0.0;
    for (std::int64_t i = 0; i < t; ++i) {
      const double d = xt[static_cast<std::size_t>(i)] - yt[static_cast<std::size_t>(i)];
      q += d * d;
    }
    out.per_voxel_mse.push_back(q / static_cast<double>(t));
  }
  out.mean_r = std::accumulate(out.per_voxel_r.begin(), out.per_voxel_r.end(), 0.0) /
               static_cast<double>(v);
  out.mse = std::accumulate(out.per_voxel_mse.begin(), out.per_voxel_mse.end(), 0.0) /
            static_cast<double>(v);
  return out;
}

DecoderEval evaluate_decoder(const std::vector<Tensor>& f_true,
                             const std::vector<Tensor>& f_pred,
                             const objectives::SsimParams& sp) {
  if (f_true.size() != f_pred.size() || f_true.empty())
    throw DataError("evaluate_decoder: frame list mismatch");
  DecoderEval out;
  for (std::size_t i = 0; i < f_true.size(); ++i) {
    if (!same_shape(f_true[i], f_pred[i]))
      throw DataError("evaluate_decoder: frame shape mismatch at " + std::to_string(i));
    out.per_frame_ssim.push_back(objectives::ssim(f_true[i], f_pred[i], sp));
    double q = 0.0;
    for (std::int64_t k = 0; k < f_true[i].size(); ++k) {
      const double d = f_true[i][k] - f_pred[i][k];
      q += d * d;
    }
    out.per_frame_mse.push_back(q / static_cast<double>(f_true[i].size()));
  }
  out.mean_ssim = std::accumulate(out.per_frame_ssim.begin(), out.per_frame_ssim.end(), 0.0) /
                  static_cast<double>(out.per_frame_ssim.size());
  out.mse = std::accumulate(out.per_frame_mse.begin(), out.per_frame_mse.end(), 0.0) /
            static_cast<double>(out.per_frame_mse.size());
  return out;
}

std::vector<double> null_pearson(const Tensor& v_true, const Tensor& v_pred, int n_shuffles,
                                 std::uint64_t seed) {
  if (!same_shape(v_true, v_pred) || v_true.ndim() != 2)
    throw DataError("null_pearson: expected matching [T,V]");
  if (n_shuffles < 1) throw DataError("null_pearson: need at least one shuffle");
  const std::int64_t t = v_true.dim(0), v = v_true.dim(1);
  std::vector<double> out;
  std::vector<double> xt(static_cast<std::size_t>(t)), yt(static_cast<std::size_t>(t));
  for (int s = 0; s < n_shuffles; ++s) {
    rng::Stream rs(rng::derive(seed, "null-pearson", static_cast<std::uint64_t>(s)));
    const auto perm = rs.permutation(static_cast<int>(t));
    double acc = 0.0;
    for (std::int64_t j = 0; j < v; ++j) {
      for (std::int64_t i = 0; i < t; ++i) {
        xt[static_cast<std::size_t>(i)] = v_true[i * v + j];
        yt[static_cast<std::size_t>(i)] = v_pred[static_cast<std::int64_t>(perm[static_cast<std::size_t>(i)]) * v + j];
      }
      acc += pearson(xt, yt);
    }
    out.push_back(acc / static_cast<double>(v));
  }
  return out;
}

std::vector<double> null_ssim(const std::vector<Tensor>& f_true,
                              const std::vector<Tensor>& f_pred, int n_shuffles,
                              std::uint64_t seed, const objectives::SsimParams& sp) {
  if (f_true.size() != f_pred.size() || f_true.empty())
    throw DataError("null_ssim: frame list mismatch");
  if (n_shuffles < 1) throw DataError("null_ssim: need at least one shuffle");
  const auto n = static_cast<int>(f_true.size());
  std::vector<double> out;
  for (int s = 0; s < n_shuffles; ++s) {
    rng::Stream rs(rng::derive(seed, "null-ssim", static_cast<std::uint64_t>(s)));
    const auto perm = rs.permutation(n);
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      acc += objectives::ssim(f_true[static_cast<std::size_t>(i)],
                              f_pred[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])], sp);
    out.push_back(acc / static_cast<double>(n));
  }
  return out;
}

// ---- rank statistics ---------------------------------------------------------

namespace {

// Midranks of the pooled sample; ties share the average rank.
std::vector<double> midranks(const std::vector<double>& pooled) {
  const auto n = static_cast<int>(pooled.size());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return pooled[static_cast<std::size_t>(a)] < pooled[static_cast<std::size_t>(b)];
  });
  std::vector<double> rank(static_cast<std::size_t>(n));
  int i = 0;
  while (i < n) {
    int j = i;
    while (j + 1 < n &&
           pooled[static_cast<std::size_t>(order[static_cast<std::size_t>(j + 1)])] ==
               pooled[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])])
      ++j;
    const double mid = (i + j) / 2.0 + 1.0;
    for (int k = i; k <= j; ++k)
      rank[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = mid;
    i = j + 1;
  }
  return rank;
}

double tie_sum(const std::vector<double>& pooled) {
  std::vector<double> sorted = pooled;
  std::sort(sorted.begin(), sorted.end());
  double s = 0.0;
  std::size_t i = 0;
  while (i < sorted.size()) {
    std::size_t j = i;
    while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
    const double t = static_cast<double>(j - i + 1);
    s += t * t * t - t;
    i = j + 1;
  }
  return s;
}

}  // namespace

double mann_whitney_u_stat(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw DataError("mann_whitney: empty sample");
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto rank = midranks(pooled);
  double ra = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ra += rank[i];
  const auto n1 = static_cast<double>(a.size());
  return ra - n1 * (n1 + 1.0) / 2.0;
}

double mann_whitney_exact_p(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n1 = static_cast<int>(a.size());
  const auto n2 = static_cast<int>(b.size());
  if (n1 < 1 || n2 < 1) throw DataError("mann_whitney: empty sample");
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const auto rank = midranks(pooled);

  // scale midranks by 2 so everything is integral
  std::vector<int> r2(rank.size());
  int total_r2 = 0;
  for (std::size_t i = 0; i < rank.size(); ++i) {
    r2[i] = static_cast<int>(std::llround(rank[i] * 2.0));
    total_r2 += r2[i];
  }
  double ra = 0.0;
  for (int i = 0; i < n1; ++i) ra += rank[static_cast<std::size_t>(i)];
  const double u_obs = ra - n1 * (n1 + 1.0) / 2.0;
  const double mu = n1 * static_cast<double>(n2) / 2.0;
  const double dev = std::abs(u_obs - mu);

  // count subsets of size n1 by scaled rank sum
  std::vector<std::vector<double>> f(
      static_cast<std::size_t>(n1) + 1, std::vector<double>(static_cast<std::size_t>(total_r2) + 1, 0.0));
  f[0][0] = 1.0;
  for (std::size_t item = 0; item < r2.size(); ++item) {
    const int r = r2[item];
    const int kmax = std::min<int>(n1, static_cast<int>(item) + 1);
    for (int k = kmax; k >= 1; --k)
      for (int s = total_r2 - r; s >= 0; --s)
        if (f[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(s)] != 0.0)
          f[static_cast<std::size_t>(k)][static_cast<std::size_t>(s + r)] +=
              f[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(s)];
  }
  double hits = 0.0, total = 0.0;
  for (int s = 0; s <= total_r2; ++s) {
    const double count = f[static_cast<std::size_t>(n1)][static_cast<std::size_t>(s)];
    if (count == 0.0) continue;
    total += count;
    const double u = s / 2.0 - n1 * (n1 + 1.0) / 2.0;
    if (std::abs(u - mu) >= dev - 1e-9) hits += count;
  }
  return hits / total;
}

double mann_whitney_normal_p(const std::vector<double>& a, const std::vector<double>& b) {
  const auto n1 = static_cast<double>(a.size());
  const auto n2 = static_cast<double>(b.size());
  if (a.empty() || b.empty()) throw DataError("mann_whitney: empty sample");
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const double n = n1 + n2;
  const double u = mann_whitney_u_stat(a, b);
  const double mu = n1 * n2 / 2.0;
  double var = n1 * n2 / 12.0 * ((n + 1.0) - tie_sum(pooled) / (n * (n - 1.0)));
  if (var <= 0.0) return 1.0;  // all observations tied
  double z = (std::abs(u - mu) - 0.5) / std::sqrt(var);  // continuity correction
  if (z < 0.0) z = 0.0;
  // fourth-moment (Edgeworth) term; U is symmetric and platykurtic, with
  // excess kurtosis -6/5 (n1^2+n2^2+n1n2+n1+n2) / (n1 n2 (n+1)) when ties
  // are absent. Keeps the approximation within 0.02 of the exact tail for
  // group sizes >= 3; it vanishes as the samples grow.
  const double g2 = -1.2 * (n1 * n1 + n2 * n2 + n1 * n2 + n1 + n2) / (n1 * n2 * (n + 1.0));
  const double phi = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  double p = std::erfc(z / std::sqrt(2.0)) + 2.0 * phi * (g2 / 24.0) * (z * z * z - 3.0 * z);
  if (p > 1.0) p = 1.0;
  if (p < 0.0) p = 0.0;
  return p;
}

MannWhitneyResult mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  MannWhitneyResult r;
  r.u = mann_whitney_u_stat(a, b);
  const auto prod = static_cast<std::int64_t>(a.size()) * static_cast<std::int64_t>(b.size());
  r.exact = prod <= 64;
  r.p = r.exact ? mann_whitney_exact_p(a, b) : mann_whitney_normal_p(a, b);
  return r;
}

double cliffs_delta(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw DataError("cliffs_delta: empty sample");
  std::vector<double> bs = b;
  std::sort(bs.begin(), bs.end());
  long long gt = 0, lt = 0;
  for (double av : a) {
    const auto lo = std::lower_bound(bs.begin(), bs.end(), av);
    const auto hi = std::upper_bound(bs.begin(), bs.end(), av);
    gt += lo - bs.begin();                              // b < a
    lt += bs.end() - hi;                                // b > a
  }
  return static_cast<double>(gt - lt) /
         (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

// ---- reporting -----------------------------------------------------------------

NullBlock make_null_block(std::vector<double> per_shuffle, std::uint64_t seed) {
  NullBlock nb;
  nb.per_shuffle = std::move(per_shuffle);
  nb.n_shuffles = static_cast<int>(nb.per_shuffle.size());
  nb.seed = seed;
  if (nb.n_shuffles > 0) {
    nb.mean = std::accumulate(nb.per_shuffle.begin(), nb.per_shuffle.end(), 0.0) /
              static_cast<double>(nb.n_shuffles);
    double q = 0.0;
    for (double v : nb.per_shuffle) q += (v - nb.mean) * (v - nb.mean);
    nb.sd = nb.n_shuffles > 1 ? std::sqrt(q / static_cast<double>(nb.n_shuffles - 1)) : 0.0;
  }
  return nb;
}

MetricBlock make_metric_block(
    std::vector<double> pooled,
    std::vector<std::pair<std::string, std::vector<double>>> per_movie) {
  MetricBlock mb;
  mb.values = std::move(pooled);
  if (!mb.values.empty()) {
    mb.mean = std::accumulate(mb.values.begin(), mb.values.end(), 0.0) /
              static_cast<double>(mb.values.size());
    mb.med = median(mb.values);
  }
  for (auto& [id, values] : per_movie) {
    MovieScores ms;
    ms.movie_id = id;
    ms.n = static_cast<int>(values.size());
    if (!values.empty()) {
      ms.mean = std::accumulate(values.begin(), values.end(), 0.0) /
                static_cast<double>(values.size());
      ms.med = median(values);
    }
    mb.per_movie.push_back(std::move(ms));
  }
  return mb;
}

EvalReport build_report(const std::vector<RunEval>& runs) {
  if (runs.empty()) throw DataError("build_report: need at least one run");
  EvalReport rep;
  rep.runs = runs;
  for (std::size_t i = 0; i < runs.size(); ++i)
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      auto compare = [&](const std::string& metric, const std::vector<double>& a,
                         const std::vector<double>& b) {
        if (a.size() < 2 || b.size() < 2) return;
        Comparison c;
        c.metric = metric;
        c.run_a = runs[i].run_name;
        c.run_b = runs[j].run_name;
        const auto mw = mann_whitney_u(a, b);
        c.u = mw.u;
        c.p = mw.p;
        c.delta = cliffs_delta(a, b);
        c.n1 = static_cast<std::int64_t>(a.size());
        c.n2 = static_cast<std::int64_t>(b.size());
        rep.comparisons.push_back(std::move(c));
      };
      compare("enc_corr", runs[i].enc_corr.values, runs[j].enc_corr.values);
      compare("enc_mse", runs[i].enc_mse.values, runs[j].enc_mse.values);
      if (runs[i].has_decoder && runs[j].has_decoder) {
        compare("dec_ssim", runs[i].dec_ssim.values, runs[j].dec_ssim.values);
        compare("dec_mse", runs[i].dec_mse.values, runs[j].dec_mse.values);
      }
    }
  return rep;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  io::write_file(path, text.data(), text.size());
}

std::string fmt(double v) { return io::format_double(v); }

void metric_rows(std::ostringstream& os, const std::string& run, const std::string& metric,
                 const MetricBlock& mb) {
  os << run << "," << metric << ",pooled," << fmt(mb.mean) << "," << fmt(mb.med) << ","
     << mb.values.size() << "\n";
  for (const auto& ms : mb.per_movie)
    os << run << "," << metric << "," << ms.movie_id << "," << fmt(ms.mean) << ","
       << fmt(ms.med) << "," << ms.n << "\n";
}

}  // namespace

void write_report_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << "run,metric,scope,mean,median,n\n";
  for (const auto& r : report.runs) {
    metric_rows(os, r.run_name, "enc_corr", r.enc_corr);
    metric_rows(os, r.run_name, "enc_mse", r.enc_mse);
    if (r.has_decoder) {
      metric_rows(os, r.run_name, "dec_ssim", r.dec_ssim);
      metric_rows(os, r.run_name, "dec_mse", r.dec_mse);
    }
    if (r.null_corr)
      os << r.run_name << ",enc_corr,null," << fmt(r.null_corr->mean) << ","
         << fmt(median(r.null_corr->per_shuffle)) << "," << r.null_corr->n_shuffles << "\n";
    if (r.null_ssim)
      os << r.run_name << ",dec_ssim,null," << fmt(r.null_ssim->mean) << ","
         << fmt(median(r.null_ssim->per_shuffle)) << "," << r.null_ssim->n_shuffles << "\n";
  }
  write_text(path, os.str());
}

void write_comparisons_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << "metric,run_a,run_b,U,p,cliffs_delta,n1,n2\n";
  for (const auto& c : report.comparisons)
    os << c.metric << "," << c.run_a << "," << c.run_b << "," << fmt(c.u) << "," << fmt(c.p)
       << "," << fmt(c.delta) << "," << c.n1 << "," << c.n2 << "\n";
  write_text(path, os.str());
}

void write_metric_table_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ostringstream os;
  os << "metric";
  for (const auto& r : report.runs) os << "," << r.run_name;
  os << "\n";
  const char* metrics[4] = {"enc_corr", "enc_mse", "dec_ssim", "dec_mse"};
  for (const auto* metric : metrics) {
    os << metric;
    for (const auto& r : report.runs) {
      const std::string m(metric);
      if (m == "enc_corr") os << "," << fmt(r.enc_corr.med);
      else if (m == "enc_mse") os << "," << fmt(r.enc_mse.med);
      else if (m == "dec_ssim") os << (r.has_decoder ? "," + fmt(r.dec_ssim.med) : ",/");
      else os << (r.has_decoder ? "," + fmt(r.dec_mse.med) : ",/");
    }
    os << "\n";
  }
  write_text(path, os.str());
}

void write_performance_svg(const std::filesystem::path& path, const std::string& title,
                           const MetricBlock& metric, const NullBlock* null_block) {
  const int width = 720, height = 420;
  const double ml = 60, mr = 20, mt = 40, mb = 70;
  const double plot_w = width - ml - mr, plot_h = height - mt - mb;

  double lo = metric.mean, hi = metric.mean;
  auto stretch = [&](double v) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  };
  for (const auto& ms : metric.per_movie) stretch(ms.mean);
  stretch(metric.mean);
  if (null_block)
    for (double v : null_block->per_shuffle) stretch(v);
  if (hi - lo < 1e-9) {
    hi += 1.0;
    lo -= 1.0;
  }
  const double pad = 0.08 * (hi - lo);
  lo -= pad;
  hi += pad;

  const std::size_t n_cols = metric.per_movie.size() + 1 + (null_block ? 1 : 0);
  auto xpos = [&](std::size_t col) {
    return ml + plot_w * (static_cast<double>(col) + 0.5) / static_cast<double>(n_cols);
  };
  auto ypos = [&](double v) { return mt + plot_h * (1.0 - (v - lo) / (hi - lo)); };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
     << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">"
     << title << "</text>\n";
  // axes
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\""
     << mt + plot_h << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt + plot_h << "\" x2=\"" << ml + plot_w
     << "\" y2=\"" << mt + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = lo + (hi - lo) * tick / 4.0;
    os << "<text x=\"" << ml - 8 << "\" y=\"" << ypos(v) + 4
       << "\" text-anchor=\"end\" font-size=\"11\">" << fmt(v).substr(0, 7) << "</text>\n";
    os << "<line x1=\"" << ml - 4 << "\" y1=\"" << ypos(v) << "\" x2=\"" << ml << "\" y2=\""
       << ypos(v) << "\" stroke=\"black\"/>\n";
  }

  std::size_t col = 0;
  for (const auto& ms : metric.per_movie) {
    os << "<circle cx=\"" << xpos(col) << "\" cy=\"" << ypos(ms.mean)
       << "\" r=\"4\" fill=\"black\"/>\n";
    os << "<text x=\"" << xpos(col) << "\" y=\"" << mt + plot_h + 16
       << "\" text-anchor=\"middle\" font-size=\"10\" transform=\"rotate(40 " << xpos(col)
       << " " << mt + plot_h + 16 << ")\">" << ms.movie_id << "</text>\n";
    ++col;
  }
  os << "<circle cx=\"" << xpos(col) << "\" cy=\"" << ypos(metric.mean)
     << "\" r=\"5\" fill=\"green\"/>\n";
  os << "<text x=\"" << xpos(col) << "\" y=\"" << mt + plot_h + 16
     << "\" text-anchor=\"middle\" font-size=\"10\">all</text>\n";
  ++col;
  if (null_block) {
    for (double v : null_block->per_shuffle)
      os << "<circle cx=\"" << xpos(col) << "\" cy=\"" << ypos(v)
         << "\" r=\"2\" fill=\"cyan\"/>\n";
    os << "<line x1=\"" << ml << "\" y1=\"" << ypos(null_block->mean) << "\" x2=\""
       << ml + plot_w << "\" y2=\"" << ypos(null_block->mean)
       << "\" stroke=\"cyan\" stroke-dasharray=\"5,4\"/>\n";
    os << "<text x=\"" << xpos(col) << "\" y=\"" << mt + plot_h + 16
       << "\" text-anchor=\"middle\" font-size=\"10\">null</text>\n";
  }
  os << "</svg>\n";
  write_text(path, os.str());
}

}  // namespace neurocodec::stats
