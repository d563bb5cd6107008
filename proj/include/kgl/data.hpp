#pragma once

// Patch-pair packs: on-disk format, loading, synthetic generation, training
// batch iteration and conversion of external patch folders.
//
// A pack is a directory holding
//   manifest.json   format, name, patch_size, channels, spectra, n_pairs,
//                   split, subset, provenance
//   a.bin, b.bin    n_pairs * 64 * 64 unsigned bytes, row-major
//   labels.csv      optional evaluation list "idx_a,idx_b,label"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "kgl/png_io.hpp"
#include "kgl/tensor.hpp"

namespace kgl {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kPackFormat = "kglnet.patchpack";
inline constexpr int kPackVersion = 1;
inline constexpr std::size_t kPatchBytes = 64 * 64;

/// Pack loading failure. `reason` tells the cases apart.
class PackError : public DataError {
 public:
  enum class Reason { missing_file, bad_magic, bad_manifest, size_mismatch, bad_labels };
  PackError(Reason r, const std::string& what) : DataError(what), reason_(r) {}
  Reason reason() const noexcept { return reason_; }

 private:
  Reason reason_;
};

struct PairLabel {
  std::size_t idx_a = 0, idx_b = 0;
  int label = 0;
  bool operator==(const PairLabel&) const = default;
};

struct PackManifest {
  std::string name = "pack";
  std::size_t patch_size = 64;
  std::size_t channels = 1;
  std::array<std::string, 2> spectra{"A", "B"};
  std::size_t n_pairs = 0;
  std::string split = "train";
  std::string subset;
  json provenance = json::object();

  json to_json() const {
    return json{{"format", kPackFormat}, {"version", kPackVersion}, {"name", name},
                {"patch_size", patch_size},  {"channels", channels},   {"spectra", spectra},
                {"n_pairs", n_pairs},         {"split", split},         {"subset", subset},
                {"provenance", provenance}};
  }
};

struct PatchPack {
  PackManifest manifest;
  std::vector<std::uint8_t> a, b;  // n_pairs * 64 * 64
  std::optional<std::vector<PairLabel>> pairs;

  std::size_t size() const { return manifest.n_pairs; }
  std::span<const std::uint8_t> patch_a(std::size_t i) const { return {a.data() + i * kPatchBytes, kPatchBytes}; }
  std::span<const std::uint8_t> patch_b(std::size_t i) const { return {b.data() + i * kPatchBytes, kPatchBytes}; }
  const std::string& subset() const { return manifest.subset.empty() ? manifest.name : manifest.subset; }

  void validate() const {
    if (manifest.patch_size != 64 || manifest.channels != 1)
      throw PackError(PackError::Reason::bad_manifest, "pack '" + manifest.name + "': only 64x64 single-channel patches are supported");
    if (a.size() != size() * kPatchBytes || b.size() != size() * kPatchBytes)
      throw PackError(PackError::Reason::size_mismatch, "pack '" + manifest.name + "': store sizes do not match n_pairs");
    if (pairs)
      for (const auto& p : *pairs)
        if (p.idx_a >= size() || p.idx_b >= size() || (p.label != 0 && p.label != 1))
          throw PackError(PackError::Reason::bad_labels, "pack '" + manifest.name + "': invalid evaluation pair");
  }
};

/// FNV-1a 64 over a byte range; used for pack digests in manifests and logs.
inline std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (auto c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string pack_digest(const PatchPack& p) {
  std::uint64_t h = fnv1a64(p.a);
  h = fnv1a64(p.b, h);
  if (p.pairs)
    for (const auto& l : *p.pairs) {
      const std::uint64_t v[3] = {l.idx_a, l.idx_b, static_cast<std::uint64_t>(l.label)};
      h = fnv1a64({reinterpret_cast<const std::uint8_t*>(v), sizeof v}, h);
    }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

// ---------------------------------------------------------------------------
// Reading and writing

namespace detail {

inline std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw PackError(PackError::Reason::missing_file, "missing file " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const fs::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("cannot write " + p.string());
}

inline std::vector<PairLabel> parse_labels(std::istream& in, const std::string& where) {
  auto bad = [&](const std::string& why) { return PackError(PackError::Reason::bad_labels, where + ": " + why); };
  std::string line;
  if (!std::getline(in, line)) throw bad("empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "idx_a,idx_b,label") throw bad("expected header 'idx_a,idx_b,label'");
  std::vector<PairLabel> out;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    long long a = -1, b = -1, l = -1;
    char c1 = 0, c2 = 0;
    if (!(ls >> a >> c1 >> b >> c2 >> l) || c1 != ',' || c2 != ',' || a < 0 || b < 0)
      throw bad("malformed line " + std::to_string(lineno));
    if (l != 0 && l != 1) throw bad("label must be 0 or 1 on line " + std::to_string(lineno));
    out.push_back({static_cast<std::size_t>(a), static_cast<std::size_t>(b), static_cast<int>(l)});
  }
  return out;
}

inline std::string format_labels(const std::vector<PairLabel>& pairs) {
  std::string s = "idx_a,idx_b,label\n";
  for (const auto& p : pairs)
    s += std::to_string(p.idx_a) + "," + std::to_string(p.idx_b) + "," + std::to_string(p.label) + "\n";
  return s;
}

}  // namespace detail

inline PatchPack load_patch_pack(const fs::path& dir) {
  using R = PackError::Reason;
  const fs::path mpath = dir / "manifest.json";
  if (!fs::exists(mpath)) throw PackError(R::missing_file, "missing file " + mpath.string());
  json m;
  try {
    std::ifstream in(mpath);
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw PackError(R::bad_manifest, mpath.string() + ": " + e.what());
  }
  if (!m.is_object() || m.value("format", std::string()) != kPackFormat)
    throw PackError(R::bad_magic, mpath.string() + ": not a patch pack (format must be '" + kPackFormat + "')");
  PatchPack p;
  try {
    if (m.at("version").get<int>() != kPackVersion)
      throw PackError(R::bad_manifest, mpath.string() + ": unsupported version " + m.at("version").dump());
    auto& mf = p.manifest;
    mf.name = m.at("name").get<std::string>();
    mf.patch_size = m.at("patch_size").get<std::size_t>();
    mf.channels = m.at("channels").get<std::size_t>();
    mf.spectra = m.at("spectra").get<std::array<std::string, 2>>();
    mf.n_pairs = m.at("n_pairs").get<std::size_t>();
    mf.split = m.at("split").get<std::string>();
    mf.subset = m.value("subset", std::string());
    mf.provenance = m.value("provenance", json::object());
  } catch (const json::exception& e) {
    throw PackError(R::bad_manifest, mpath.string() + ": " + e.what());
  }
  if (p.manifest.patch_size != 64 || p.manifest.channels != 1)
    throw PackError(R::bad_manifest, mpath.string() + ": only patch_size 64 and channels 1 are supported");
  const std::size_t want = p.manifest.n_pairs * kPatchBytes;
  for (auto [store, file] : {std::pair{&p.a, "a.bin"}, std::pair{&p.b, "b.bin"}}) {
    *store = detail::read_bytes(dir / file);
    if (store->size() != want)
      throw PackError(R::size_mismatch, (dir / file).string() + ": " + std::to_string(store->size()) +
                                            " bytes, expected " + std::to_string(want));
  }
  if (fs::exists(dir / "labels.csv")) {
    std::ifstream in(dir / "labels.csv");
    p.pairs = detail::parse_labels(in, (dir / "labels.csv").string());
  }
  p.validate();
  return p;
}

inline void write_patch_pack(const PatchPack& p, const fs::path& dir) {
  p.validate();
  fs::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << p.manifest.to_json().dump(2) << "\n";
    if (!out) throw Error("cannot write " + (dir / "manifest.json").string());
  }
  detail::write_bytes(dir / "a.bin", p.a);
  detail::write_bytes(dir / "b.bin", p.b);
  if (p.pairs) {
    const auto s = detail::format_labels(*p.pairs);
    detail::write_bytes(dir / "labels.csv", {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()});
  } else {
    fs::remove(dir / "labels.csv");
  }
}

/// A single pack, or every pack directly under `dir` (sorted by name).
inline std::vector<PatchPack> load_pack_collection(const fs::path& dir) {
  if (fs::exists(dir / "manifest.json")) return {load_patch_pack(dir)};
  if (!fs::is_directory(dir)) throw PackError(PackError::Reason::missing_file, "no pack at " + dir.string());
  std::vector<fs::path> subs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && fs::exists(e.path() / "manifest.json")) subs.push_back(e.path());
  if (subs.empty()) throw PackError(PackError::Reason::missing_file, "no manifest.json in " + dir.string() + " or its subdirectories");
  std::sort(subs.begin(), subs.end());
  std::vector<PatchPack> out;
  for (const auto& s : subs) out.push_back(load_patch_pack(s));
  return out;
}

/// Seeded list of n positives (i, i) followed by n negatives (i, j != i).
inline std::vector<PairLabel> make_eval_pairs(std::size_t n, std::uint64_t seed) {
  if (n < 2) throw DataError("an evaluation list needs at least 2 pairs");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> d(0, n - 2);
  std::vector<PairLabel> out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) out.push_back({i, i, 1});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = d(rng);
    out.push_back({i, r >= i ? r + 1 : r, 0});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic cross-spectral generator

struct SynthConfig {
  std::size_t n_pairs = 5000;
  int octaves = 4;
  double severity = 0.5;  // strength of the B-spectrum remapping and blur
  double noise = 0.05;    // additive noise on B
  std::uint64_t seed = 0;
  std::size_t crops_per_scene = 32;
  std::size_t scene_size = 192;
  std::string name = "synthetic";
  std::string split = "train";

  void validate() const {
    if (!(severity >= 0 && severity <= 1)) throw ConfigError("synth: severity must be in [0, 1]");
    if (!(noise >= 0 && noise <= 1)) throw ConfigError("synth: noise must be in [0, 1]");
    if (n_pairs < 2) throw ConfigError("synth: n_pairs must be at least 2");
    if (octaves < 1 || octaves > 8) throw ConfigError("synth: octaves must be in [1, 8]");
    if (crops_per_scene < 1) throw ConfigError("synth: crops_per_scene must be positive");
    if (scene_size < 64) throw ConfigError("synth: scene_size must be at least 64");
  }

  json to_json() const {
    return json{{"n_pairs", n_pairs}, {"octaves", octaves}, {"severity", severity}, {"noise", noise}, {"seed", seed},
                {"crops_per_scene", crops_per_scene}, {"scene_size", scene_size}};
  }
};

namespace synth {

inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

using Image = std::vector<double>;  // size * size, values in [0, 1]

inline double smooth(double t) { return t * t * (3 - 2 * t); }

/// Multi-octave value noise plus a few hard-edged shapes, rescaled to [0, 1].
inline Image scene(std::size_t size, int octaves, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  Image img(size * size, 0.0);
  const double base = 24 + 24 * u(rng);
  const double persistence = 0.45 + 0.2 * u(rng);
  double amp = 1;
  for (int o = 0; o < octaves; ++o) {
    const double cell = std::max(2.0, base / std::pow(2.0, o));
    const std::size_t g = static_cast<std::size_t>(std::ceil(size / cell)) + 2;
    std::vector<double> lat(g * g);
    for (auto& v : lat) v = u(rng);
    for (std::size_t y = 0; y < size; ++y) {
      const double fy = y / cell;
      const std::size_t y0 = static_cast<std::size_t>(fy);
      const double ty = smooth(fy - y0);
      for (std::size_t x = 0; x < size; ++x) {
        const double fx = x / cell;
        const std::size_t x0 = static_cast<std::size_t>(fx);
        const double tx = smooth(fx - x0);
        const double top = lat[y0 * g + x0] * (1 - tx) + lat[y0 * g + x0 + 1] * tx;
        const double bot = lat[(y0 + 1) * g + x0] * (1 - tx) + lat[(y0 + 1) * g + x0 + 1] * tx;
        img[y * size + x] += amp * (top * (1 - ty) + bot * ty);
      }
    }
    amp *= persistence;
  }
  const int shapes = 6 + static_cast<int>(u(rng) * 9);
  for (int s = 0; s < shapes; ++s) {
    const double cx = u(rng) * size, cy = u(rng) * size;
    const double r = 6 + u(rng) * 22;
    const double level = u(rng) * 2;
    const double alpha = 0.5 + 0.5 * u(rng);
    const bool disc = u(rng) < 0.5;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        const bool in = disc ? dx * dx + dy * dy <= r * r : std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
        if (in) img[y * size + x] = (1 - alpha) * img[y * size + x] + alpha * level;
      }
  }
  const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
  const double l = *lo, span = std::max(*hi - *lo, 1e-12);
  for (auto& v : img) v = (v - l) / span;
  return img;
}

inline Image gaussian_blur(const Image& img, std::size_t size, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double ks = 0;
  for (int i = -r; i <= r; ++i) ks += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  const int n = static_cast<int>(size);
  auto clampi = [n](int i) { return std::clamp(i, 0, n - 1); };
  Image tmp(img.size()), out(img.size());
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * img[y * n + clampi(x + i)];
      tmp[y * n + x] = s;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double s = 0;
      for (int i = -r; i <= r; ++i) s += k[i + r] * tmp[clampi(y + i) * n + x];
      out[y * n + x] = s;
    }
  return out;
}

/// Second spectrum: Voronoi regions each get a gamma curve, some inverted,
/// blended with the input by `severity`; then blur and additive noise.
inline Image cross_spectral(const Image& a, std::size_t size, double severity, double noise, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> nd(0, 1);
  const int regions = 4 + static_cast<int>(u(rng) * 5);
  struct Region {
    double cx, cy, gamma;
    bool invert;
  };
  std::vector<Region> rs;
  for (int i = 0; i < regions; ++i)
    rs.push_back({u(rng) * size, u(rng) * size, std::exp(0.9 * nd(rng)), u(rng) < 0.35});
  Image b(a.size());
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      std::size_t best = 0;
      double bd = 1e300;
      for (std::size_t i = 0; i < rs.size(); ++i) {
        const double d = (x - rs[i].cx) * (x - rs[i].cx) + (y - rs[i].cy) * (y - rs[i].cy);
        if (d < bd) bd = d, best = i;
      }
      const double v = a[y * size + x];
      const double g = std::pow(v, rs[best].gamma);
      const double f = rs[best].invert ? 1 - g : g;
      b[y * size + x] = (1 - severity) * v + severity * f;
    }
  if (severity > 0) b = gaussian_blur(b, size, 1.5 * severity);
  if (noise > 0)
    for (auto& v : b) v = std::clamp(v + 0.2 * noise * nd(rng), 0.0, 1.0);
  return b;
}

inline std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255)); }

}  // namespace synth

/// Deterministic pack: crops of procedural scenes for spectrum A, the same
/// crops of the remapped scenes for spectrum B. Several crops come from each
/// scene, so batches contain look-alike negatives.
inline PatchPack generate_synthetic(const SynthConfig& cfg) {
  cfg.validate();
  PatchPack p;
  p.manifest.name = cfg.name;
  p.manifest.subset = cfg.name;
  p.manifest.split = cfg.split;
  p.manifest.spectra = {"synthetic_vis", "synthetic_ir"};
  p.manifest.n_pairs = cfg.n_pairs;
  p.manifest.provenance = json{{"generator", "kglnet synthetic"}, {"config", cfg.to_json()}};
  p.a.resize(cfg.n_pairs * kPatchBytes);
  p.b.resize(cfg.n_pairs * kPatchBytes);

  const std::size_t size = cfg.scene_size, span = size - 64;
  const std::size_t scenes = (cfg.n_pairs + cfg.crops_per_scene - 1) / cfg.crops_per_scene;
  std::size_t k = 0;
  for (std::size_t s = 0; s < scenes && k < cfg.n_pairs; ++s) {
    std::mt19937_64 rng(synth::mix(cfg.seed * 0x100000001b3ULL + s));
    const auto a = synth::scene(size, cfg.octaves, rng);
    const auto b = synth::cross_spectral(a, size, cfg.severity, cfg.noise, rng);
    std::uniform_int_distribution<std::size_t> pos(0, span);
    std::vector<std::pair<std::size_t, std::size_t>> taken;
    for (std::size_t c = 0; c < cfg.crops_per_scene && k < cfg.n_pairs; ++c, ++k) {
      std::size_t x = pos(rng), y = pos(rng);
      // Prefer crops at least 12 px apart so near-duplicates stay rare.
      for (int tries = 0; tries < 200; ++tries) {
        const bool clash = std::any_of(taken.begin(), taken.end(), [&](const auto& t) {
          return std::max(x > t.first ? x - t.first : t.first - x, y > t.second ? y - t.second : t.second - y) < 12;
        });
        if (!clash) break;
        x = pos(rng);
        y = pos(rng);
      }
      taken.emplace_back(x, y);
      for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t q = 0; q < 64; ++q) {
          p.a[k * kPatchBytes + r * 64 + q] = synth::quantize(a[(y + r) * size + x + q]);
          p.b[k * kPatchBytes + r * 64 + q] = synth::quantize(b[(y + r) * size + x + q]);
        }
    }
  }
  p.pairs = make_eval_pairs(cfg.n_pairs, synth::mix(cfg.seed ^ 0x5eed));
  return p;
}

// ---------------------------------------------------------------------------
// Batches

template <typename T>
struct PatchPairBatch {
  Tensor<T> a, b;  // [N, 1, 64, 64], values byte / 255
  std::vector<std::size_t> idx_a, idx_b;
};

/// Gathers patches `ia[k]` / `ib[k]` into [N, 1, 64, 64] tensors in [0, 1].
/// `flip[k]` mirrors both patches of entry k horizontally.
template <typename T>
PatchPairBatch<T> gather_pairs(const PatchPack& pack, const std::vector<std::size_t>& ia,
                               const std::vector<std::size_t>& ib, const std::vector<char>& flip = {}) {
  if (ia.size() != ib.size()) throw ShapeError("gather_pairs: index lists differ in length");
  const std::size_t n = ia.size();
  PatchPairBatch<T> out{Tensor<T>({n, 1, 64, 64}), Tensor<T>({n, 1, 64, 64}), ia, ib};
  constexpr T scale = T{1} / T{255};
  for (std::size_t k = 0; k < n; ++k) {
    if (ia[k] >= pack.size() || ib[k] >= pack.size()) throw DataError("gather_pairs: index out of range");
    const bool f = !flip.empty() && flip[k];
    for (auto [src, dst] : {std::pair{pack.patch_a(ia[k]), out.a.data()}, std::pair{pack.patch_b(ib[k]), out.b.data()}}) {
      T* d = dst + k * kPatchBytes;
      for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t q = 0; q < 64; ++q) d[r * 64 + q] = static_cast<T>(src[r * 64 + (f ? 63 - q : q)]) * scale;
    }
  }
  return out;
}

/// One epoch of aligned positive batches in a seeded order; the final short
/// batch is dropped.
class TrainingBatches {
 public:
  TrainingBatches(const PatchPack& pack, std::size_t batch_size, std::uint64_t epoch_seed, bool flip = false)
      : pack_(&pack), batch_(batch_size), seed_(epoch_seed), flip_(flip) {
    if (batch_size < 2) throw ConfigError("batch size must be at least 2");
    if (pack.size() < batch_size)
      throw DataError("pack '" + pack.manifest.name + "' has " + std::to_string(pack.size()) +
                      " pairs, fewer than the batch size " + std::to_string(batch_size));
    order_.resize(pack.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }

  std::size_t size() const { return order_.size() / batch_; }

  std::vector<std::size_t> indices(std::size_t k) const {
    if (k >= size()) throw std::out_of_range("TrainingBatches: batch index");
    return {order_.begin() + static_cast<std::ptrdiff_t>(k * batch_),
            order_.begin() + static_cast<std::ptrdiff_t>((k + 1) * batch_)};
  }

  template <typename T>
  PatchPairBatch<T> get(std::size_t k) const {
    const auto idx = indices(k);
    std::vector<char> flip;
    if (flip_) {
      std::mt19937_64 rng(synth::mix(seed_ + 0x9e37 * (k + 1)));
      std::bernoulli_distribution coin(0.5);
      for (std::size_t i = 0; i < idx.size(); ++i) flip.push_back(coin(rng));
    }
    auto b = gather_pairs<T>(*pack_, idx, idx, flip);
    if (b.idx_a != b.idx_b) throw std::logic_error("training batch contains a mismatched pair");
    return b;
  }

 private:
  const PatchPack* pack_;
  std::size_t batch_;
  std::uint64_t seed_;
  bool flip_;
  std::vector<std::size_t> order_;
};

inline TrainingBatches training_batches(const PatchPack& pack, std::size_t batch_size, std::uint64_t epoch_seed,
                                        bool flip = false) {
  return TrainingBatches(pack, batch_size, epoch_seed, flip);
}

// ---------------------------------------------------------------------------
// External layouts

enum class ExternalLayout { paired_folders, side_by_side };

inline ExternalLayout parse_layout(const std::string& s) {
  if (s == "paired_folders") return ExternalLayout::paired_folders;
  if (s == "side_by_side") return ExternalLayout::side_by_side;
  throw ConfigError("unknown layout '" + s + "' (expected paired_folders or side_by_side)");
}
inline const char* to_string(ExternalLayout l) {
  return l == ExternalLayout::paired_folders ? "paired_folders" : "side_by_side";
}

inline constexpr const char* kLayoutHelp =
    "expected layouts:\n"
    "  paired_folders: <root>[/<subset>]/a/*.png and <root>[/<subset>]/b/*.png, 64x64, matched by file name\n"
    "  side_by_side:   <root>[/<subset>]/*.png, 128x64 images with spectrum A on the left\n"
    "each subset directory may hold labels.csv (idx_a,idx_b,label) indexing the sorted file list";

struct ConvertOptions {
  std::string name;  // defaults to the source directory name
  std::string split = "test";
  std::uint64_t seed = 0;  // negatives for subsets without labels.csv
};

namespace detail {

inline std::vector<fs::path> pngs_in(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline bool is_subset_dir(const fs::path& d, ExternalLayout l) {
  return l == ExternalLayout::paired_folders ? fs::is_directory(d / "a") && fs::is_directory(d / "b")
                                             : !pngs_in(d).empty();
}

inline void append_patch(std::vector<std::uint8_t>& store, const GrayImage& im, std::size_t x0, const fs::path& src) {
  if (im.height != 64 || im.width < x0 + 64) throw DataError(src.string() + ": unexpected image size " +
                                                            std::to_string(im.width) + "x" + std::to_string(im.height));
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t q = 0; q < 64; ++q) store.push_back(im.at(r, x0 + q));
}

inline PatchPack convert_subset(ExternalLayout layout, const fs::path& dir, const std::string& subset,
                                const ConvertOptions& opt, std::uint64_t seed) {
  PatchPack p;
  bool any_color = false;
  auto read = [&](const fs::path& f) {
    bool c = false;
    auto im = read_png_gray(f, &c);
    any_color = any_color || c;
    return im;
  };
  if (layout == ExternalLayout::paired_folders) {
    const auto fa = pngs_in(dir / "a");
    const auto fb = pngs_in(dir / "b");
    if (fa.size() != fb.size()) throw DataError(dir.string() + ": a/ and b/ hold different numbers of PNGs");
    for (std::size_t i = 0; i < fa.size(); ++i) {
      if (fa[i].filename() != fb[i].filename())
        throw DataError(dir.string() + ": no partner for " + fa[i].filename().string() + " in b/");
      const auto ia = read(fa[i]), ib = read(fb[i]);
      if (ia.width != 64) throw DataError(fa[i].string() + ": patches must be 64x64");
      if (ib.width != 64) throw DataError(fb[i].string() + ": patches must be 64x64");
      append_patch(p.a, ia, 0, fa[i]);
      append_patch(p.b, ib, 0, fb[i]);
    }
  } else {
    for (const auto& f : pngs_in(dir)) {
      const auto im = read(f);
      if (im.width != 128) throw DataError(f.string() + ": side-by-side images must be 128x64");
      append_patch(p.a, im, 0, f);
      append_patch(p.b, im, 64, f);
    }
  }
  p.manifest.n_pairs = p.a.size() / kPatchBytes;
  if (p.manifest.n_pairs == 0) throw DataError(dir.string() + ": no patches found\n" + kLayoutHelp);
  p.manifest.name = opt.name.empty() ? subset : opt.name + "/" + subset;
  p.manifest.subset = subset;
  p.manifest.split = opt.split;
  p.manifest.provenance = json{{"source", fs::absolute(dir).string()},
                               {"layout", to_string(layout)},
                               {"converted_from_color", any_color}};
  if (fs::exists(dir / "labels.csv")) {
    std::ifstream in(dir / "labels.csv");
    p.pairs = parse_labels(in, (dir / "labels.csv").string());
    p.manifest.provenance["labels"] = "labels.csv";
  } else if (p.manifest.n_pairs >= 2) {
    p.pairs = make_eval_pairs(p.manifest.n_pairs, seed);
    p.manifest.provenance["labels"] = "generated";
    p.manifest.provenance["negatives_seed"] = seed;
  }
  p.validate();
  return p;
}

}  // namespace detail

/// Converts `src` to one pack per subset. `src` is either a subset directory
/// itself or a root whose subdirectories are subsets.
inline std::vector<PatchPack> convert_external(ExternalLayout layout, const fs::path& src,
                                               const ConvertOptions& opt = {}) {
  if (!fs::is_directory(src)) throw DataError("not a directory: " + src.string());
  std::vector<std::pair<fs::path, std::string>> subsets;
  if (detail::is_subset_dir(src, layout)) {
    subsets.emplace_back(src, fs::absolute(src).lexically_normal().filename().string());
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(src))
      if (e.is_directory() && detail::is_subset_dir(e.path(), layout)) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) subsets.emplace_back(d, d.filename().string());
  }
  if (subsets.empty())
    throw DataError("unrecognized layout under " + src.string() + " for '" + to_string(layout) + "'\n" + kLayoutHelp);
  std::vector<PatchPack> out;
  for (std::size_t i = 0; i < subsets.size(); ++i)
    out.push_back(detail::convert_subset(layout, subsets[i].first, subsets[i].second, opt, synth::mix(opt.seed + i)));
  return out;
}

}  // namespace kgl
