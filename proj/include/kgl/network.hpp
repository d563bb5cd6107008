#pragma once

// The combined descriptor/metric network family. Four extractor slots
// (metric VIS, metric NIR, descriptor VIS, descriptor NIR) each hold eight
// stages; slots that share weights hold the same stage object.

#include <array>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <algorithm>
#include <optional>
#include <unordered_set>
#include <vector>

#include "kgl/blocks.hpp"

namespace kgl {

enum class Structure { Siamese, PseudoSiamese };
enum class Sharing { NS, FS, BS, AS };
enum class Dominant { none, metric, descriptor };
enum class Spectrum { A, B };
enum class Extractor { metric, descriptor };

inline constexpr std::size_t kNumBlocks = 8;
inline constexpr std::size_t kPatchSize = 64;
inline constexpr std::array<std::size_t, kNumBlocks> kBlockChannels{32, 32, 64, 64, 128, 128, 128, 128};
inline constexpr std::array<std::size_t, kNumBlocks> kBlockStrides{1, 1, 2, 1, 2, 1, 2, 1};
inline constexpr std::array<bool, kNumBlocks> kEcaAfter{false, false, false, true, false, false, false, true};
inline constexpr std::array<std::size_t, 3> kMetricWidths{512, 256, 1};

struct ArchitectureConfig {
  std::string preset;  // informational; empty for hand-built configs
  Structure metric_structure = Structure::PseudoSiamese;
  Structure descriptor_structure = Structure::Siamese;
  Sharing sharing = Sharing::BS;
  int shared_layer_count = 4;
  Dominant dominant = Dominant::metric;
  int descriptor_dim = 128;
  bool use_eca = true;
  int eca_kernel = 3;
  /// Only the Pseudo/Siamese metric network; no descriptor extractor or head.
  bool metric_only = false;
  /// Channel multiplier on the backbone widths (1 = full size).
  double width = 1.0;

  void validate() const {
    if (shared_layer_count < 0 || shared_layer_count > static_cast<int>(kNumBlocks))
      throw ConfigError("shared_layer_count must be in [0, 8], got " + std::to_string(shared_layer_count));
    if (descriptor_dim != 64 && descriptor_dim != 128 && descriptor_dim != 256)
      throw ConfigError("descriptor_dim must be 64, 128 or 256, got " + std::to_string(descriptor_dim));
    if (eca_kernel <= 0 || eca_kernel % 2 == 0) throw ConfigError("eca_kernel must be odd and positive");
    if (!(width > 0.0) || width > 4.0) throw ConfigError("width must be in (0, 4]");
    for (std::size_t b = 0; b < kNumBlocks; ++b)
      if (use_eca && kEcaAfter[b] && channels(b) < static_cast<std::size_t>(eca_kernel))
        throw ConfigError("eca_kernel exceeds channel count at block " + std::to_string(b + 1));
  }

  std::size_t channels(std::size_t block) const {
    const auto c = static_cast<std::size_t>(static_cast<double>(kBlockChannels[block]) * width + 0.5);
    return c == 0 ? 1 : c;
  }

  /// Whether block `b` (0-based) of the descriptor extractor is the metric
  /// extractor's block.
  bool block_shared(std::size_t b) const {
    if (metric_only) return false;
    const auto k = static_cast<std::size_t>(shared_layer_count);
    switch (sharing) {
      case Sharing::NS: return false;
      case Sharing::FS: return true;
      case Sharing::BS: return b < k;
      case Sharing::AS: return b >= kNumBlocks - k;
    }
    return false;
  }

  /// Per-spectrum structure of a shared block.
  Structure shared_structure() const {
    return dominant == Dominant::descriptor ? descriptor_structure : metric_structure;
  }
};

inline const char* to_string(Structure s) { return s == Structure::Siamese ? "S" : "PS"; }
inline const char* to_string(Sharing s) {
  switch (s) {
    case Sharing::NS: return "NS";
    case Sharing::FS: return "FS";
    case Sharing::BS: return "BS";
    case Sharing::AS: return "AS";
  }
  return "?";
}
inline const char* to_string(Dominant d) {
  switch (d) {
    case Dominant::none: return "none";
    case Dominant::metric: return "metric";
    case Dominant::descriptor: return "descriptor";
  }
  return "?";
}

inline Structure parse_structure(std::string_view s) {
  if (s == "S" || s == "Siamese") return Structure::Siamese;
  if (s == "PS" || s == "PseudoSiamese") return Structure::PseudoSiamese;
  throw ConfigError("unknown structure '" + std::string(s) + "' (expected S or PS)");
}
inline Sharing parse_sharing(std::string_view s) {
  if (s == "NS") return Sharing::NS;
  if (s == "FS") return Sharing::FS;
  if (s == "BS") return Sharing::BS;
  if (s == "AS") return Sharing::AS;
  throw ConfigError("unknown sharing '" + std::string(s) + "' (expected NS, FS, BS or AS)");
}
inline Dominant parse_dominant(std::string_view s) {
  if (s == "none") return Dominant::none;
  if (s == "metric") return Dominant::metric;
  if (s == "descriptor") return Dominant::descriptor;
  throw ConfigError("unknown dominant branch '" + std::string(s) + "'");
}

/// Names of the twenty combined architectures, in table order.
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names{"A1", "A2", "A3", "A4", "B1", "B2", "B3", "B4", "C1", "C2",
                                              "C3", "C4", "C5", "C6", "D1", "D2", "D3", "D4", "D5", "D6"};
  return names;
}

/// Series letter picks the sharing mode (A none, B full, C front layers,
/// D back layers). Index 1-4 enumerates (metric, descriptor) structures as
/// (S,S), (S,PS), (PS,S), (PS,PS); mixed pairs are metric-dominant. Indices
/// 5 and 6 repeat the mixed pairs with the descriptor dominant.
inline ArchitectureConfig preset(std::string_view name) {
  if (name.size() != 2 || name[0] < 'A' || name[0] > 'D' || name[1] < '1' || name[1] > '6')
    throw ConfigError("unknown architecture preset '" + std::string(name) + "'");
  const char series = name[0];
  const int idx = name[1] - '0';
  if ((series == 'A' || series == 'B') && idx > 4)
    throw ConfigError("unknown architecture preset '" + std::string(name) + "'");

  ArchitectureConfig c;
  c.preset = std::string(name);
  c.sharing = series == 'A' ? Sharing::NS : series == 'B' ? Sharing::FS : series == 'C' ? Sharing::BS : Sharing::AS;
  c.shared_layer_count = series == 'A' ? 0 : series == 'B' ? static_cast<int>(kNumBlocks) : 4;
  constexpr Structure S = Structure::Siamese, PS = Structure::PseudoSiamese;
  static constexpr std::array<std::pair<Structure, Structure>, 6> combos{
      {{S, S}, {S, PS}, {PS, S}, {PS, PS}, {S, PS}, {PS, S}}};
  c.metric_structure = combos[idx - 1].first;
  c.descriptor_structure = combos[idx - 1].second;
  const bool mixed = c.metric_structure != c.descriptor_structure;
  if (idx >= 5)
    c.dominant = Dominant::descriptor;
  else if (mixed && c.sharing != Sharing::NS)
    c.dominant = Dominant::metric;
  else
    c.dominant = Dominant::none;
  return c;
}

/// One backbone stage: a conv block and, at the end of a resolution stage,
/// a channel attention module.
template <typename T>
struct Stage {
  std::string name;
  ConvBlockParams<T> block;
  std::optional<EcaParams<T>> eca;

  Var<T> forward(const Var<T>& x) const {
    Var<T> y = conv_block_forward(x, block);
    return eca ? eca_forward(y, *eca) : y;
  }
  std::vector<Var<T>> parameters() const {
    auto ps = block.parameters();
    if (eca) ps.push_back(eca->weights);
    return ps;
  }
};

enum Slot : std::size_t { kMetricA = 0, kMetricB = 1, kDescA = 2, kDescB = 3 };
inline constexpr std::array<const char*, 4> kSlotNames{"metric.A", "metric.B", "descriptor.A", "descriptor.B"};

template <typename T>
struct FeatureMapBatch {
  Var<T> values;  // [N, C, H, W]
  Spectrum spectrum = Spectrum::A;
  Extractor extractor = Extractor::metric;
};

template <typename T>
struct DescriptorBatch {
  Var<T> values;  // [N, D], unit rows
};

/// Outputs of both extractors for one batch of patch pairs. Descriptor
/// fields are empty for metric-only networks.
template <typename T>
struct Features {
  FeatureMapBatch<T> metric_a, metric_b, descriptor_a, descriptor_b;
  DescriptorBatch<T> desc_a, desc_b;
};

template <typename T>
class KglNet {
 public:
  ArchitectureConfig config;
  /// slots[s][b] is the stage used by slot s at block b.
  std::array<std::vector<std::shared_ptr<Stage<T>>>, 4> slots;
  std::optional<DescriptorHead<T>> head;
  MetricHead<T> metric_head;

  bool has_descriptor() const { return !config.metric_only; }

  /// Parameters of the extractors and the descriptor head, unique and in a
  /// deterministic order.
  std::vector<Var<T>> feature_parameters() const {
    std::vector<Var<T>> out;
    std::unordered_set<const Node<T>*> seen;
    auto add = [&](const Var<T>& v) {
      if (seen.insert(v.get()).second) out.push_back(v);
    };
    for (const auto& slot : slots)
      for (const auto& st : slot)
        for (const auto& p : st->parameters()) add(p);
    if (head)
      for (const auto& p : head->parameters()) add(p);
    return out;
  }

  std::vector<Var<T>> metric_branch_parameters() const { return metric_head.parameters(); }

  std::vector<Var<T>> parameters() const {
    auto ps = feature_parameters();
    for (const auto& p : metric_branch_parameters()) ps.push_back(p);
    return ps;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() const {
    for (const auto& p : parameters()) p->zero_grad();
  }
};

template <typename T>
KglNet<T> build_network(const ArchitectureConfig& config, std::uint64_t seed) {
  config.validate();
  KglNet<T> net;
  net.config = config;
  std::mt19937_64 rng(seed);

  auto make_stage = [&](std::size_t b, const std::string& owner) {
    auto st = std::make_shared<Stage<T>>();
    st->name = "extractor." + owner + ".block" + std::to_string(b + 1);
    const std::size_t in = b == 0 ? 1 : config.channels(b - 1);
    st->block = ConvBlockParams<T>::create(in, config.channels(b), 3, kBlockStrides[b], st->name, rng);
    if (config.use_eca && kEcaAfter[b])
      st->eca = EcaParams<T>::create(static_cast<std::size_t>(config.eca_kernel), st->name + ".eca", rng);
    return st;
  };
  // Returns the (A, B) stage pair for a two-branch extractor of the given structure.
  auto make_pair = [&](std::size_t b, const std::string& owner, Structure s) {
    if (s == Structure::Siamese) {
      auto st = make_stage(b, owner + ".AB");
      return std::pair{st, st};
    }
    return std::pair{make_stage(b, owner + ".A"), make_stage(b, owner + ".B")};
  };

  for (auto& slot : net.slots) slot.resize(config.metric_only ? 0 : kNumBlocks);
  net.slots[kMetricA].resize(kNumBlocks);
  net.slots[kMetricB].resize(kNumBlocks);
  for (std::size_t b = 0; b < kNumBlocks; ++b) {
    if (config.block_shared(b)) {
      auto [a, bb] = make_pair(b, "shared", config.shared_structure());
      net.slots[kMetricA][b] = net.slots[kDescA][b] = a;
      net.slots[kMetricB][b] = net.slots[kDescB][b] = bb;
    } else {
      auto [ma, mb] = make_pair(b, "metric", config.metric_structure);
      net.slots[kMetricA][b] = ma;
      net.slots[kMetricB][b] = mb;
      if (!config.metric_only) {
        auto [da, db] = make_pair(b, "descriptor", config.descriptor_structure);
        net.slots[kDescA][b] = da;
        net.slots[kDescB][b] = db;
      }
    }
  }

  const std::size_t final_c = config.channels(kNumBlocks - 1);
  constexpr std::size_t final_hw = kPatchSize / 8;
  if (!config.metric_only)
    net.head = DescriptorHead<T>::create(final_c, final_hw, static_cast<std::size_t>(config.descriptor_dim),
                                         "descriptor_head", rng);
  net.metric_head = MetricHead<T>::create(final_c * final_hw * final_hw,
                                          std::vector<std::size_t>(kMetricWidths.begin(), kMetricWidths.end()),
                                          "metric_branch", rng);
  return net;
}

inline void validate_patches(const Shape& s, const char* what) {
  if (s.size() != 4 || s[1] != 1 || s[2] != kPatchSize || s[3] != kPatchSize || s[0] == 0)
    throw ShapeError(std::string(what) + ": expected [N x 1 x 64 x 64] patches, got " + shape_str(s));
}

/// Runs both extractors (and the descriptor head) on aligned patch batches.
/// A stage applied twice to the same input node is evaluated once.
template <typename T>
Features<T> extract_features(const KglNet<T>& net, const Var<T>& patches_a, const Var<T>& patches_b) {
  validate_patches(patches_a->value.shape(), "spectrum A patches");
  validate_patches(patches_b->value.shape(), "spectrum B patches");
  require_shape(patches_b->value.shape(), patches_a->value.shape(), "patch batch sizes");

  std::map<std::pair<const Stage<T>*, const Node<T>*>, Var<T>> memo;
  auto run = [&](Slot slot, const Var<T>& input) {
    Var<T> h = input;
    for (const auto& st : net.slots[slot]) {
      auto key = std::pair{st.get(), h.get()};
      auto it = memo.find(key);
      if (it == memo.end()) it = memo.emplace(key, st->forward(h)).first;
      h = it->second;
    }
    return h;
  };

  Features<T> f;
  f.metric_a = {run(kMetricA, patches_a), Spectrum::A, Extractor::metric};
  f.metric_b = {run(kMetricB, patches_b), Spectrum::B, Extractor::metric};
  if (net.has_descriptor()) {
    f.descriptor_a = {run(kDescA, patches_a), Spectrum::A, Extractor::descriptor};
    f.descriptor_b = {run(kDescB, patches_b), Spectrum::B, Extractor::descriptor};
    f.desc_a = {descriptor_head_forward(f.descriptor_a.values, *net.head)};
    f.desc_b = {descriptor_head_forward(f.descriptor_b.values, *net.head)};
  }
  return f;
}

/// Only the metric extractors; used for metric-head scoring.
template <typename T>
std::pair<Var<T>, Var<T>> extract_metric_features(const KglNet<T>& net, const Var<T>& patches_a,
                                                  const Var<T>& patches_b) {
  validate_patches(patches_a->value.shape(), "spectrum A patches");
  validate_patches(patches_b->value.shape(), "spectrum B patches");
  auto run = [&](Slot slot, Var<T> h) {
    for (const auto& st : net.slots[slot]) h = st->forward(h);
    return h;
  };
  return {run(kMetricA, patches_a), run(kMetricB, patches_b)};
}

/// Similarity logits of the metric branch on |a - b|, one per row.
template <typename T>
Var<T> metric_branch_forward(const KglNet<T>& net, const Var<T>& feat_a, const Var<T>& feat_b) {
  require_shape(feat_b->value.shape(), feat_a->value.shape(), "metric branch inputs");
  return net.metric_head.forward(ops::flatten(ops::abs_diff(feat_a, feat_b)));
}

/// Euclidean distance between corresponding rows.
template <typename T>
std::vector<T> descriptor_distance(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a.shape(), 2, "descriptor_distance");
  require_shape(b.shape(), a.shape(), "descriptor_distance");
  std::vector<T> d(a.dim(0));
  for (std::size_t i = 0; i < d.size(); ++i) {
    T ss = 0;
    for (std::size_t k = 0; k < a.dim(1); ++k) {
      const T diff = a.at(i, k) - b.at(i, k);
      ss += diff * diff;
    }
    d[i] = std::sqrt(ss);
  }
  return d;
}

struct AliasGroup {
  std::string stage;               // owning stage name
  std::size_t block = 0;           // 1-based
  std::vector<std::string> slots;  // slots using the stage
  std::size_t parameters = 0;
};

struct SharingReport {
  std::size_t total_parameters = 0;
  std::size_t aliased_parameters = 0;
  /// Stages used by both a metric slot and a descriptor slot.
  std::vector<AliasGroup> aliased;
  /// Stages used by both spectra of the same extractor (Siamese weights).
  std::vector<AliasGroup> siamese;
};

template <typename T>
SharingReport shared_parameter_report(const KglNet<T>& net) {
  SharingReport r;
  r.total_parameters = net.parameter_count();
  for (std::size_t b = 0; b < kNumBlocks; ++b) {
    std::vector<const Stage<T>*> done;
    for (std::size_t s = 0; s < 4; ++s) {
      if (net.slots[s].empty()) continue;
      const Stage<T>* st = net.slots[s][b].get();
      if (std::find(done.begin(), done.end(), st) != done.end()) continue;
      done.push_back(st);
      AliasGroup g{st->name, b + 1, {}, 0};
      bool metric = false, descriptor = false;
      for (std::size_t u = 0; u < 4; ++u) {
        if (net.slots[u].empty() || net.slots[u][b].get() != st) continue;
        g.slots.emplace_back(kSlotNames[u]);
        (u < 2 ? metric : descriptor) = true;
      }
      for (const auto& p : st->parameters()) g.parameters += p->value.size();
      if (metric && descriptor) {
        r.aliased_parameters += g.parameters;
        r.aliased.push_back(g);
      } else if (g.slots.size() > 1) {
        r.siamese.push_back(g);
      }
    }
  }
  return r;
}

}  // namespace kgl
