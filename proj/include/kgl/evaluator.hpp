#pragma once

// FPR95 and the evaluation protocol: score every labelled pair of each pack
// (one pack per subset), report per-subset and mean FPR95 in percent.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "kgl/config.hpp"
#include "kgl/data.hpp"

namespace kgl {

enum class Orientation { higher_is_match, lower_is_match };

struct ScoredPairs {
  std::vector<double> scores;
  std::vector<int> labels;
  Orientation orientation = Orientation::higher_is_match;
  std::vector<std::size_t> idx_a, idx_b;  // optional provenance of each score
};

struct Fpr95Result {
  double fpr = 0;
  double threshold = 0;
  std::size_t positives = 0, negatives = 0, accepted_negatives = 0;
};

/// Threshold = score of the ceil(0.95 P)-th best positive; every pair scoring
/// at least as well (ties included) is accepted.
inline Fpr95Result fpr95_detail(const ScoredPairs& sp) {
  if (sp.scores.size() != sp.labels.size()) throw ShapeError("fpr95: scores and labels differ in length");
  const bool higher = sp.orientation == Orientation::higher_is_match;
  std::vector<double> pos;
  std::size_t nneg = 0;
  for (std::size_t i = 0; i < sp.scores.size(); ++i) {
    if (std::isnan(sp.scores[i])) throw NumericError("fpr95: NaN score");
    if (sp.labels[i] == 1)
      pos.push_back(sp.scores[i]);
    else if (sp.labels[i] == 0)
      ++nneg;
    else
      throw DataError("fpr95: labels must be 0 or 1");
  }
  if (pos.empty() || nneg == 0) throw DataError("fpr95 needs at least one positive and one negative pair");
  const std::size_t need = (95 * pos.size() + 99) / 100;
  // Best first.
  if (higher)
    std::sort(pos.begin(), pos.end(), std::greater<>());
  else
    std::sort(pos.begin(), pos.end());
  Fpr95Result r;
  r.threshold = pos[need - 1];
  r.positives = pos.size();
  r.negatives = nneg;
  for (std::size_t i = 0; i < sp.scores.size(); ++i)
    if (sp.labels[i] == 0 && (higher ? sp.scores[i] >= r.threshold : sp.scores[i] <= r.threshold)) ++r.accepted_negatives;
  r.fpr = static_cast<double>(r.accepted_negatives) / static_cast<double>(nneg);
  return r;
}

inline double fpr95(const ScoredPairs& sp) { return fpr95_detail(sp).fpr; }

/// ROC points (fpr, tpr) from the most to the least selective threshold,
/// starting at (0, 0) and ending at (1, 1).
inline std::vector<std::pair<double, double>> roc_curve(const ScoredPairs& sp) {
  const bool higher = sp.orientation == Orientation::higher_is_match;
  std::vector<std::size_t> order(sp.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return higher ? sp.scores[a] > sp.scores[b] : sp.scores[a] < sp.scores[b];
  });
  std::size_t npos = 0, nneg = 0;
  for (int l : sp.labels) (l == 1 ? npos : nneg)++;
  if (npos == 0 || nneg == 0) throw DataError("ROC needs at least one positive and one negative pair");
  std::vector<std::pair<double, double>> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (sp.labels[order[k]] == 1 ? tp : fp)++;
    const bool last_of_tie = k + 1 == order.size() || sp.scores[order[k + 1]] != sp.scores[order[k]];
    if (last_of_tie) pts.emplace_back(static_cast<double>(fp) / nneg, static_cast<double>(tp) / npos);
  }
  return pts;
}

// ---------------------------------------------------------------------------
// Scoring

template <typename T>
struct PatchFeatures {
  Tensor<T> a, b;  // one row per patch index used by the pairs
};

namespace detail {

/// Runs `fn(batch)` over the patches in chunks; returns the stacked rows.
template <typename T, typename F>
Tensor<T> map_patches(const PatchPack& pack, std::size_t batch, bool spectrum_b, F fn) {
  Tensor<T> out;
  std::size_t row = 0;
  for (std::size_t s = 0; s < pack.size(); s += batch) {
    const std::size_t e = std::min(pack.size(), s + batch);
    std::vector<std::size_t> idx(e - s);
    std::iota(idx.begin(), idx.end(), s);
    auto pb = gather_pairs<T>(pack, idx, idx);
    Tensor<T> y = fn(constant(spectrum_b ? pb.b : pb.a));
    if (out.empty()) {
      Shape sh = y.shape();
      sh[0] = pack.size();
      out = Tensor<T>(sh);
    }
    std::copy(y.data(), y.data() + y.size(), out.data() + row * out.row_size());
    row += e - s;
  }
  return out;
}

inline double stable_sigmoid(double z) {
  return z >= 0 ? 1 / (1 + std::exp(-z)) : std::exp(z) / (1 + std::exp(z));
}

}  // namespace detail

/// Scores every labelled pair of `pack`. Metric head: sigmoid of the
/// logit, higher is a match. Descriptor head: descriptor distance, lower is
/// a match.
template <typename T>
ScoredPairs score_pairs(const KglNet<T>& net, const PatchPack& pack, ScoreHead head, std::size_t batch = 256) {
  if (!pack.pairs || pack.pairs->empty())
    throw DataError("pack '" + pack.manifest.name + "' has no evaluation pairs (labels.csv)");
  if (head == ScoreHead::descriptor && !net.has_descriptor())
    throw ConfigError("descriptor head requested but the network has no descriptor branch");
  NoGradGuard ng;
  const auto& pairs = *pack.pairs;
  ScoredPairs sp;
  sp.orientation = head == ScoreHead::metric ? Orientation::higher_is_match : Orientation::lower_is_match;
  for (const auto& p : pairs) {
    sp.labels.push_back(p.label);
    sp.idx_a.push_back(p.idx_a);
    sp.idx_b.push_back(p.idx_b);
  }
  const Slot sa = head == ScoreHead::metric ? kMetricA : kDescA;
  const Slot sb = head == ScoreHead::metric ? kMetricB : kDescB;
  auto run = [&](Slot slot) {
    return [&net, slot, head](Var<T> x) {
      for (const auto& st : net.slots[slot]) x = st->forward(x);
      if (head == ScoreHead::descriptor) x = descriptor_head_forward(x, *net.head);
      return x->value;
    };
  };
  const Tensor<T> fa = detail::map_patches<T>(pack, batch, false, run(sa));
  const Tensor<T> fb = detail::map_patches<T>(pack, batch, true, run(sb));
  const std::size_t rs = fa.row_size();
  if (head == ScoreHead::descriptor) {
    for (const auto& p : pairs) {
      const T* a = fa.data() + p.idx_a * rs;
      const T* b = fb.data() + p.idx_b * rs;
      double s = 0;
      for (std::size_t k = 0; k < rs; ++k) s += (static_cast<double>(a[k]) - b[k]) * (static_cast<double>(a[k]) - b[k]);
      sp.scores.push_back(std::sqrt(s));
    }
    return sp;
  }
  for (std::size_t s = 0; s < pairs.size(); s += batch) {
    const std::size_t e = std::min(pairs.size(), s + batch);
    Shape sh = fa.shape();
    sh[0] = e - s;
    Tensor<T> diff(sh);
    for (std::size_t k = s; k < e; ++k) {
      const T* a = fa.data() + pairs[k].idx_a * rs;
      const T* b = fb.data() + pairs[k].idx_b * rs;
      T* d = diff.data() + (k - s) * rs;
      for (std::size_t q = 0; q < rs; ++q) d[q] = std::abs(a[q] - b[q]);
    }
    const auto z = net.metric_head.forward(ops::flatten(constant(diff)));
    for (std::size_t k = 0; k < e - s; ++k) sp.scores.push_back(detail::stable_sigmoid(static_cast<double>(z->value[k])));
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr int kReportVersion = 1;

struct SubsetResult {
  std::string subset;
  double fpr95 = 0;  // percent
  std::size_t positives = 0, negatives = 0;
  ScoredPairs scored;
};

struct EvalReport {
  std::vector<SubsetResult> subsets;
  double mean = 0;  // percent, arithmetic mean over subsets
  ScoreHead head = ScoreHead::metric;
  std::string checkpoint;
  std::string pack;
  std::string timestamp;

  json to_json() const {
    json j{{"version", kReportVersion}, {"mean", mean},         {"head", to_string(head)},
           {"checkpoint", checkpoint},  {"pack", pack},         {"timestamp", timestamp},
           {"subsets", json::array()},  {"fpr95", json::array()}, {"pairs", json::array()}};
    for (const auto& s : subsets) {
      j["subsets"].push_back(s.subset);
      j["fpr95"].push_back(s.fpr95);
      j["pairs"].push_back({{"positives", s.positives}, {"negatives", s.negatives}});
    }
    return j;
  }
};

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

template <typename T>
EvalReport evaluate(const KglNet<T>& net, const std::vector<PatchPack>& packs, ScoreHead head,
                    std::size_t batch = 256) {
  if (packs.empty()) throw DataError("evaluate: no packs");
  EvalReport r;
  r.head = head;
  r.timestamp = utc_timestamp();
  for (const auto& p : packs) {
    SubsetResult s;
    s.subset = p.subset();
    s.scored = score_pairs(net, p, head, batch);
    const auto d = fpr95_detail(s.scored);
    s.fpr95 = 100.0 * d.fpr;
    s.positives = d.positives;
    s.negatives = d.negatives;
    r.mean += s.fpr95;
    r.subsets.push_back(std::move(s));
  }
  r.mean /= static_cast<double>(r.subsets.size());
  return r;
}

/// Writes report.json, scores.csv (idx_a,idx_b,label,score,subset) and
/// roc.csv (fpr,tpr,subset) into `dir`.
inline void write_report(const EvalReport& r, const fs::path& dir) {
  for (const auto& s : r.subsets)
    if (!std::isfinite(s.fpr95)) throw NumericError("write_report: non-finite FPR95 for " + s.subset);
  std::error_code ec;
  fs::create_directories(dir, ec);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw Error("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("report.json");
    f << r.to_json().dump(2) << "\n";
  }
  {
    auto f = open("scores.csv");
    f << "idx_a,idx_b,label,score,subset\n" << std::setprecision(17);
    for (const auto& s : r.subsets)
      for (std::size_t i = 0; i < s.scored.scores.size(); ++i)
        f << s.scored.idx_a[i] << "," << s.scored.idx_b[i] << "," << s.scored.labels[i] << "," << s.scored.scores[i]
          << "," << s.subset << "\n";
  }
  {
    auto f = open("roc.csv");
    f << "fpr,tpr,subset\n" << std::setprecision(17);
    for (const auto& s : r.subsets)
      for (const auto& [x, y] : roc_curve(s.scored)) f << x << "," << y << "," << s.subset << "\n";
  }
}

/// Summary fields of report.json (scores are not stored there).
inline EvalReport load_report(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read report " + path.string());
  json j;
  try {
    j = json::parse(in);
    EvalReport r;
    r.mean = j.at("mean").get<double>();
    r.head = parse_score_head(j.at("head").get<std::string>());
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.pack = j.at("pack").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::string>();
    const auto names = j.at("subsets").get<std::vector<std::string>>();
    const auto vals = j.at("fpr95").get<std::vector<double>>();
    if (names.size() != vals.size()) throw DataError(path.string() + ": subsets and fpr95 differ in length");
    for (std::size_t i = 0; i < names.size(); ++i) {
      SubsetResult s;
      s.subset = names[i];
      s.fpr95 = vals[i];
      if (j.contains("pairs") && i < j["pairs"].size()) {
        s.positives = j["pairs"][i].at("positives").get<std::size_t>();
        s.negatives = j["pairs"][i].at("negatives").get<std::size_t>();
      }
      r.subsets.push_back(std::move(s));
    }
    return r;
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Image grids of the four judgment categories at the FPR95 threshold:
/// match_accepted, match_rejected, nonmatch_accepted, nonmatch_rejected.
/// Each cell shows the A patch left of the B patch.
template <typename T>
std::vector<fs::path> emit_samples(const KglNet<T>& net, const PatchPack& pack, const fs::path& dir,
                                   ScoreHead head = ScoreHead::metric, std::size_t per_category = 16) {
  const auto sp = score_pairs(net, pack, head);
  const auto d = fpr95_detail(sp);
  const bool higher = sp.orientation == Orientation::higher_is_match;
  std::array<std::vector<std::size_t>, 4> cats;
  for (std::size_t i = 0; i < sp.scores.size(); ++i) {
    const bool accepted = higher ? sp.scores[i] >= d.threshold : sp.scores[i] <= d.threshold;
    const int c = (sp.labels[i] == 1 ? 0 : 2) + (accepted ? 0 : 1);
    if (cats[c].size() < per_category) cats[c].push_back(i);
  }
  static constexpr const char* names[4] = {"match_accepted", "match_rejected", "nonmatch_accepted",
                                           "nonmatch_rejected"};
  fs::create_directories(dir);
  std::vector<fs::path> out;
  constexpr std::size_t cols = 4, cell_w = 128 + 4, cell_h = 64 + 4;
  for (int c = 0; c < 4; ++c) {
    const std::size_t n = std::max<std::size_t>(cats[c].size(), 1);
    const std::size_t rows = (n + cols - 1) / cols;
    GrayImage g{cols * cell_w, rows * cell_h, std::vector<std::uint8_t>(cols * cell_w * rows * cell_h, 255)};
    for (std::size_t k = 0; k < cats[c].size(); ++k) {
      const std::size_t i = cats[c][k];
      const std::size_t ox = (k % cols) * cell_w + 2, oy = (k / cols) * cell_h + 2;
      const auto pa = pack.patch_a(sp.idx_a[i]);
      const auto pb = pack.patch_b(sp.idx_b[i]);
      for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t q = 0; q < 64; ++q) {
          g.pixels[(oy + r) * g.width + ox + q] = pa[r * 64 + q];
          g.pixels[(oy + r) * g.width + ox + 64 + q] = pb[r * 64 + q];
        }
    }
    out.push_back(dir / (std::string(names[c]) + ".png"));
    write_png_gray(out.back(), g);
  }
  return out;
}

}  // namespace kgl
