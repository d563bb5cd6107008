#pragma once

// Training: one optimization step over a batch of aligned pairs, the epoch
// loop with logging, and binary checkpoints.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "kgl/config.hpp"
#include "kgl/data.hpp"
#include "kgl/optim.hpp"

namespace kgl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

/// Adam groups: lr_feature for extractors and the descriptor head,
/// lr_metric_branch for the FC metric branch.
template <typename T>
Adam<T> make_optimizer(const KglNet<T>& net, const TrainConfig& c) {
  return Adam<T>({{"feature", net.feature_parameters(), c.lr_feature},
                  {"metric_branch", net.metric_branch_parameters(), c.lr_metric_branch}});
}

/// Everything a step produces besides the parameter update.
template <typename T>
struct StepTrace {
  LossBreakdown loss;
  std::vector<std::size_t> negatives_a, negatives_b;  // negative pair per positive
  std::vector<std::size_t> hard_indices;              // descriptor mining result (empty without descriptor)
};

/// Forward, losses and backward for one batch; leaves gradients in the
/// parameters. `neg_override` replaces the metric negatives (testing hook).
template <typename T>
StepTrace<T> compute_step_gradients(const KglNet<T>& net, const PatchPairBatch<T>& batch, const TrainConfig& cfg,
                                    std::mt19937_64& rng, long step,
                                    const std::vector<std::size_t>* neg_override = nullptr) {
  const std::size_t n = batch.a.dim(0);
  if (n < 2) throw ShapeError("training step needs at least 2 pairs");
  if (batch.idx_a != batch.idx_b) throw DataError("training batch contains a mismatched pair");
  net.zero_grad();
  auto pa = constant(batch.a);
  auto pb = constant(batch.b);
  StepTrace<T> tr;
  LossTerms<T> terms;
  Var<T> fa, fb;
  NegativePairs neg;
  if (net.has_descriptor()) {
    auto f = extract_features(net, pa, pb);
    const auto m = distance_matrix(f.desc_b.values->value, f.desc_a.values->value);
    tr.hard_indices = hard_negative_indices(m);
    terms.descriptor = descriptor_loss(f.desc_a.values, f.desc_b.values, tr.hard_indices, cfg.descriptor_loss);
    terms.guide_a = feature_guided_loss(f.metric_a.values, f.descriptor_a.values);
    terms.guide_b = feature_guided_loss(f.metric_b.values, f.descriptor_b.values);
    fa = f.metric_a.values;
    fb = f.metric_b.values;
    if (neg_override)
      neg = negatives_from_columns(*neg_override);
    else if (!cfg.use_hnsm)
      neg = negatives_from_columns(random_negative_indices(n, rng));
    else
      neg = cfg.bidirectional_mining ? negatives_bidirectional(m) : negatives_from_columns(tr.hard_indices);
  } else {
    std::tie(fa, fb) = extract_metric_features(net, pa, pb);
    neg = negatives_from_columns(neg_override ? *neg_override : random_negative_indices(n, rng));
  }
  const auto mb = assemble_metric_batch(fa, fb, neg, rng());
  terms.metric = metric_loss(metric_branch_forward(net, mb.feat_a, mb.feat_b), mb.labels);
  LossWeights w = cfg.weights;
  if (!cfg.use_fgl) w.beta = 0;
  auto total = total_loss(terms, w, &tr.loss, step);
  backward(total);
  tr.negatives_a = std::move(neg.a_index);
  tr.negatives_b = std::move(neg.b_index);
  return tr;
}

/// One full step: gradients, optional clipping, finiteness check, Adam update.
template <typename T>
LossBreakdown train_step(const KglNet<T>& net, const PatchPairBatch<T>& batch, const TrainConfig& cfg,
                         std::mt19937_64& rng, Adam<T>& opt, long step = -1) {
  const auto tr = compute_step_gradients(net, batch, cfg, rng, step);
  const auto params = net.parameters();
  const double norm = clip_grad_norm(params, cfg.clip_norm);
  if (!std::isfinite(norm))
    throw DivergenceError("non-finite gradient" + (step >= 0 ? " at step " + std::to_string(step) : std::string()),
                          step, "gradient");
  opt.step();
  return tr.loss;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "KGLCKPT\0" u32 version
//   str config_json
//   i64 epoch  i64 step  str rng_state
//   u32 n_params, each: str name, u32 rank, u64 dims[rank], f32 data[]
//   i64 adam_steps, u32 n_groups, each: str name, f64 lr
//   per parameter (same order): f32 m[], f32 v[]
//   u64 fnv1a64 of all preceding bytes
// Strings are u64 length + bytes; all integers little-endian.

inline constexpr char kCheckpointMagic[8] = {'K', 'G', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  json config;
  long epoch = 0;
  long step = 0;
  std::string rng_state;
  std::vector<std::pair<std::string, Tensor<float>>> params;
  long adam_steps = 0;
  std::vector<std::pair<std::string, double>> group_lrs;
  std::vector<Tensor<float>> adam_m, adam_v;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace ckpt {

class Writer {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename V>
  void pod(V v) {
    raw(&v, sizeof v);
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    raw(s.data(), s.size());
  }
  void floats(const Tensor<float>& t) { raw(t.data(), t.size() * sizeof(float)); }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::vector<std::uint8_t> b, std::string where) : buf_(std::move(b)), where_(std::move(where)) {}
  void raw(void* p, std::size_t n) {
    if (n > buf_.size() - pos_) throw DataError(where_ + ": truncated checkpoint");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename V>
  V pod() {
    V v;
    raw(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > buf_.size() - pos_) throw DataError(where_ + ": truncated checkpoint");
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void floats(Tensor<float>& t) { raw(t.data(), t.size() * sizeof(float)); }
  std::size_t pos() const { return pos_; }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::string where_;
};

template <typename T>
Tensor<float> to_f32(const Tensor<T>& t) {
  Tensor<float> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<float>(t[i]);
  return out;
}

}  // namespace ckpt

template <typename T>
CheckpointData make_checkpoint(const KglNet<T>& net, const Adam<T>& opt, const TrainConfig& cfg, long epoch, long step,
                               const std::mt19937_64& rng) {
  CheckpointData c;
  c.config = to_json(cfg);
  c.epoch = epoch;
  c.step = step;
  std::ostringstream rs;
  rs << rng;
  c.rng_state = rs.str();
  for (const auto& p : net.parameters()) {
    if (c.find(p->name)) throw Error("duplicate parameter name " + p->name);
    c.params.emplace_back(p->name, ckpt::to_f32(p->value));
  }
  c.adam_steps = opt.steps();
  for (const auto& g : opt.groups()) c.group_lrs.emplace_back(g.name, g.lr);
  for (const auto& m : opt.first_moments()) c.adam_m.push_back(ckpt::to_f32(m));
  for (const auto& v : opt.second_moments()) c.adam_v.push_back(ckpt::to_f32(v));
  return c;
}

inline void save_checkpoint(const CheckpointData& c, const fs::path& path) {
  ckpt::Writer w;
  w.raw(kCheckpointMagic, sizeof kCheckpointMagic);
  w.pod<std::uint32_t>(kCheckpointVersion);
  w.str(c.config.dump());
  w.pod<std::int64_t>(c.epoch);
  w.pod<std::int64_t>(c.step);
  w.str(c.rng_state);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.params.size()));
  for (const auto& [name, t] : c.params) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.pod<std::uint64_t>(d);
    w.floats(t);
  }
  w.pod<std::int64_t>(c.adam_steps);
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.group_lrs.size()));
  for (const auto& [name, lr] : c.group_lrs) {
    w.str(name);
    w.pod<double>(lr);
  }
  for (std::size_t i = 0; i < c.adam_m.size(); ++i) {
    w.floats(c.adam_m[i]);
    w.floats(c.adam_v[i]);
  }
  w.pod<std::uint64_t>(fnv1a64(w.bytes()));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  detail::write_bytes(tmp, w.bytes());
  fs::rename(tmp, path);
}

inline CheckpointData load_checkpoint(const fs::path& path) {
  const std::string where = path.string();
  std::vector<std::uint8_t> bytes;
  try {
    bytes = detail::read_bytes(path);
  } catch (const PackError&) {
    throw DataError("cannot read checkpoint " + where);
  }
  if (bytes.size() < sizeof kCheckpointMagic + 12 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw DataError(where + ": not a checkpoint (bad magic)");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != fnv1a64({bytes.data(), bytes.size() - 8})) throw DataError(where + ": checksum mismatch");
  ckpt::Reader r(std::move(bytes), where);
  char magic[8];
  r.raw(magic, 8);
  if (const auto v = r.pod<std::uint32_t>(); v != kCheckpointVersion)
    throw DataError(where + ": unsupported checkpoint version " + std::to_string(v));
  CheckpointData c;
  try {
    c.config = json::parse(r.str());
  } catch (const json::exception& e) {
    throw DataError(where + ": bad config snapshot: " + e.what());
  }
  c.epoch = r.pod<std::int64_t>();
  c.step = r.pod<std::int64_t>();
  c.rng_state = r.str();
  const auto np = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < np; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw DataError(where + ": bad tensor rank for " + name);
    Shape s(rank);
    for (auto& d : s) d = r.pod<std::uint64_t>();
    if (shape_numel(s) > (r.bytes().size() - r.pos()) / sizeof(float))
      throw DataError(where + ": truncated checkpoint");
    Tensor<float> t(s);
    r.floats(t);
    c.params.emplace_back(std::move(name), std::move(t));
  }
  c.adam_steps = r.pod<std::int64_t>();
  const auto ng = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < ng; ++i) {
    std::string name = r.str();
    c.group_lrs.emplace_back(std::move(name), r.pod<double>());
  }
  for (const auto& [name, t] : c.params) {
    Tensor<float> m(t.shape()), v(t.shape());
    r.floats(m);
    r.floats(v);
    c.adam_m.push_back(std::move(m));
    c.adam_v.push_back(std::move(v));
  }
  return c;
}

template <typename T>
void load_parameters(const KglNet<T>& net, const CheckpointData& c) {
  const auto params = net.parameters();
  if (params.size() != c.params.size())
    throw DataError("checkpoint has " + std::to_string(c.params.size()) + " parameters, network has " +
                    std::to_string(params.size()));
  for (const auto& p : params) {
    const auto* t = c.find(p->name);
    if (!t) throw DataError("checkpoint lacks parameter " + p->name);
    if (t->shape() != p->value.shape())
      throw DataError("checkpoint shape mismatch for " + p->name + ": " + shape_str(t->shape()) + " vs " +
                      shape_str(p->value.shape()));
    for (std::size_t i = 0; i < t->size(); ++i) p->value[i] = static_cast<T>((*t)[i]);
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  /// Run directory for train_log.csv and checkpoints/; empty writes nothing.
  fs::path out_dir;
  bool checkpoint_each_epoch = true;
  /// Stop after this many steps in total (negative: no limit).
  long max_steps = -1;
  std::function<void(long step, int epoch, const LossBreakdown&)> on_step;
};

struct TrainResult {
  std::vector<LossBreakdown> history;
  long steps = 0;
  fs::path final_checkpoint;
};

inline std::uint64_t epoch_seed(std::uint64_t seed, long epoch) { return synth::mix(seed * 0x9e3779b97f4a7c15ULL + epoch + 1); }

inline const char* kLogHeader = "step,epoch,lr_feature,lr_metric,L_d,L_m,L_fg_v,L_fg_n,L_total";

template <typename T>
class Trainer {
 public:
  explicit Trainer(TrainConfig cfg)
      : config_(std::move(cfg)),
        net_((config_.validate(), build_network<T>(config_.architecture, config_.seed))),
        opt_(make_optimizer(net_, config_)),
        rng_(synth::mix(config_.seed ^ 0x7261696eULL)) {}

  /// Continues from a checkpoint written by `save`.
  static Trainer resume(const CheckpointData& c) {
    Trainer t(train_config_from_json(c.config));
    load_parameters(t.net_, c);
    t.epoch_ = c.epoch;
    t.step_ = c.step;
    std::istringstream rs(c.rng_state);
    rs >> t.rng_;
    if (!rs) throw DataError("checkpoint has a malformed RNG state");
    t.opt_.set_steps(c.adam_steps);
    auto& m = t.opt_.first_moments();
    auto& v = t.opt_.second_moments();
    if (m.size() != c.adam_m.size()) throw DataError("checkpoint optimizer state does not match the network");
    for (std::size_t i = 0; i < m.size(); ++i) {
      if (m[i].shape() != c.adam_m[i].shape()) throw DataError("checkpoint optimizer state does not match the network");
      for (std::size_t k = 0; k < m[i].size(); ++k) {
        m[i][k] = static_cast<T>(c.adam_m[i][k]);
        v[i][k] = static_cast<T>(c.adam_v[i][k]);
      }
    }
    return t;
  }

  const TrainConfig& config() const { return config_; }
  const KglNet<T>& net() const { return net_; }
  Adam<T>& optimizer() { return opt_; }
  long epoch() const { return epoch_; }
  long step() const { return step_; }

  void apply_schedule(long epoch) {
    const double f = schedule_factor(config_.schedule, static_cast<int>(epoch), config_.epochs);
    opt_.groups()[0].lr = config_.lr_feature * f;
    opt_.groups()[1].lr = config_.lr_metric_branch * f;
  }

  LossBreakdown step(const PatchPairBatch<T>& batch) {
    const auto l = train_step(net_, batch, config_, rng_, opt_, step_);
    ++step_;
    return l;
  }

  CheckpointData checkpoint() const { return make_checkpoint(net_, opt_, config_, epoch_, step_, rng_); }
  void save(const fs::path& path) const { save_checkpoint(checkpoint(), path); }

  /// Runs the remaining epochs over `pack`.
  TrainResult fit(const PatchPack& pack, const TrainOptions& o = {}) {
    TrainResult res;
    std::ofstream log;
    if (!o.out_dir.empty()) {
      fs::create_directories(o.out_dir / "checkpoints");
      const fs::path lp = o.out_dir / "train_log.csv";
      const bool fresh = step_ == 0 || !fs::exists(lp);
      log.open(lp, fresh ? std::ios::trunc : std::ios::app);
      if (!log) throw Error("cannot write " + lp.string());
      if (fresh) log << kLogHeader << "\n";
      log << std::setprecision(9);
    }
    bool stopped = false;
    while (epoch_ < config_.epochs && !stopped) {
      apply_schedule(epoch_);
      const auto batches = training_batches(pack, config_.batch_size, epoch_seed(config_.seed, epoch_), config_.flip);
      // Skip batches a mid-epoch checkpoint already consumed.
      const long done = step_ - epoch_ * static_cast<long>(batches.size());
      const std::size_t first = done > 0 ? std::min<std::size_t>(static_cast<std::size_t>(done), batches.size()) : 0;
      for (std::size_t k = first; k < batches.size(); ++k) {
        if (o.max_steps >= 0 && step_ >= o.max_steps) {
          stopped = true;
          break;
        }
        const long s = step_;
        LossBreakdown l;
        try {
          l = step(batches.get<T>(k));
        } catch (const DivergenceError&) {
          if (log) log.flush();
          throw;
        }
        res.history.push_back(l);
        if (log)
          log << s << "," << epoch_ << "," << opt_.groups()[0].lr << "," << opt_.groups()[1].lr << "," << l.descriptor
              << "," << l.metric << "," << l.guide_a << "," << l.guide_b << "," << l.total << "\n";
        if (o.on_step) o.on_step(s, static_cast<int>(epoch_), l);
      }
      if (stopped) break;
      ++epoch_;
      if (!o.out_dir.empty() && o.checkpoint_each_epoch) {
        std::ostringstream name;
        name << "epoch_" << std::setw(3) << std::setfill('0') << epoch_ << ".ckpt";
        save(o.out_dir / "checkpoints" / name.str());
      }
    }
    res.steps = step_;
    if (!o.out_dir.empty()) {
      res.final_checkpoint = o.out_dir / "checkpoints" / "final.ckpt";
      save(res.final_checkpoint);
    }
    return res;
  }

 private:
  TrainConfig config_;
  KglNet<T> net_;
  Adam<T> opt_;
  std::mt19937_64 rng_;
  long epoch_ = 0;
  long step_ = 0;
};

/// Builds the network from `cfg`, trains on `pack` and returns the trainer.
template <typename T>
Trainer<T> train(const PatchPack& pack, const TrainConfig& cfg, const TrainOptions& o = {},
                 TrainResult* result = nullptr) {
  Trainer<T> t(cfg);
  auto r = t.fit(pack, o);
  if (result) *result = std::move(r);
  return t;
}

/// Network with the parameters of a checkpoint.
template <typename T>
KglNet<T> network_from_checkpoint(const CheckpointData& c) {
  const auto cfg = train_config_from_json(c.config);
  auto net = build_network<T>(cfg.architecture, cfg.seed);
  load_parameters(net, c);
  return net;
}

}  // namespace kgl
