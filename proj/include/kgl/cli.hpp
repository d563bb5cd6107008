#pragma once

// The kglnet command line: train, eval, synth, convert, sweep, ablate and
// inspect. `run` is the whole program; tools/kglnet.cpp only forwards argv.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 data error,
// 4 numeric divergence, 1 anything else. Failures print a one-line JSON
// error document on stderr (and into the run directory when there is one).

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "kgl/evaluator.hpp"
#include "kgl/trainer.hpp"

namespace kgl::cli {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "KGLNET_OUTPUT_ROOT";
inline constexpr const char* kRunManifest = "run.json";

inline json artifact_versions() {
  return json{{"kglnet", kVersion},
              {"checkpoint_format", kCheckpointVersion},
              {"pack_format", kPackVersion},
              {"report_format", kReportVersion}};
}

/// Default parent of run directories: $KGLNET_OUTPUT_ROOT, else ./runs.
inline fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline std::string short_hash(const std::string& s) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0')
     << (fnv1a64({reinterpret_cast<const std::uint8_t*>(s.data()), s.size()}) & 0xffffffffULL);
  return os.str();
}

inline void write_json(const fs::path& p, const json& j) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::trunc);
  f << j.dump(2) << "\n";
  if (!f) throw Error("cannot write " + p.string());
}

inline json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot read config file " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

inline json error_document(const std::string& kind, const std::string& message, int code) {
  return json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}};
}

// ---------------------------------------------------------------------------
// Training flags shared by train, sweep and ablate

struct TrainFlags {
  std::string config;
  std::string arch;
  double width = 1;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::size_t batch_size = 0;
  double lr_feature = 0, lr_metric = 0, alpha = 0, beta = 0;
  std::string schedule, descriptor_loss, head;
  bool no_hnsm = false, no_fgl = false, bidirectional = false, flip = false;
  double clip_norm = 0;
  std::map<std::string, CLI::Option*> opts;

  void add(CLI::App* app, bool with_seed = true) {
    opts["config"] = app->add_option("--config", config, "JSON experiment config; flags override its values");
    opts["arch"] = app->add_option("--arch", arch, "architecture preset (A1..D6)");
    opts["width"] = app->add_option("--width", width, "channel width multiplier")->check(CLI::PositiveNumber);
    if (with_seed) opts["seed"] = app->add_option("--seed", seed, "random seed");
    opts["epochs"] = app->add_option("--epochs", epochs, "training epochs")->check(CLI::NonNegativeNumber);
    opts["batch_size"] = app->add_option("--batch-size", batch_size, "pairs per batch");
    opts["lr_feature"] = app->add_option("--lr-feature", lr_feature, "learning rate of the feature extractors");
    opts["lr_metric"] = app->add_option("--lr-metric", lr_metric, "learning rate of the metric branch");
    opts["alpha"] = app->add_option("--alpha", alpha, "metric loss weight");
    opts["beta"] = app->add_option("--beta", beta, "feature-guided loss weight");
    opts["schedule"] = app->add_option("--schedule", schedule, "none, cosine or simulated_annealing");
    opts["descriptor_loss"] = app->add_option("--descriptor-loss", descriptor_loss, "hardest_triplet or hynet_hybrid");
    opts["head"] = app->add_option("--head", head, "evaluation score head: metric or descriptor");
    opts["no_hnsm"] = app->add_flag("--no-hnsm", no_hnsm, "random negatives for the metric branch");
    opts["no_fgl"] = app->add_flag("--no-fgl", no_fgl, "drop the feature-guided loss");
    opts["bidirectional"] = app->add_flag("--bidirectional-mining", bidirectional, "mine rows and columns");
    opts["flip"] = app->add_flag("--flip", flip, "random horizontal flips");
    opts["clip_norm"] = app->add_option("--clip-norm", clip_norm, "gradient norm clip (0 disables)");
  }

  bool given(const char* k) const {
    auto it = opts.find(k);
    return it != opts.end() && it->second && it->second->count() > 0;
  }

  /// Defaults, then the config file, then flags.
  ExperimentConfig resolve() const {
    ExperimentConfig e;
    if (given("config")) e = experiment_from_json(read_json_file(config));
    auto& t = e.train;
    if (given("arch")) {
      const double w = t.architecture.width;
      t.architecture = preset(arch);
      t.architecture.width = w;
    }
    if (given("width")) t.architecture.width = width;
    if (given("seed")) t.seed = seed;
    if (given("epochs")) t.epochs = epochs;
    if (given("batch_size")) t.batch_size = batch_size;
    if (given("lr_feature")) t.lr_feature = lr_feature;
    if (given("lr_metric")) t.lr_metric_branch = lr_metric;
    if (given("alpha")) t.weights.alpha = alpha;
    if (given("beta")) t.weights.beta = beta;
    if (given("schedule")) t.schedule = parse_schedule(schedule);
    if (given("descriptor_loss")) t.descriptor_loss.kind = parse_descriptor_loss(descriptor_loss);
    if (given("head")) e.head = parse_score_head(head);
    if (given("no_hnsm")) t.use_hnsm = !no_hnsm;
    if (given("no_fgl")) t.use_fgl = !no_fgl;
    if (given("bidirectional")) t.bidirectional_mining = bidirectional;
    if (given("flip")) t.flip = flip;
    if (given("clip_norm")) t.clip_norm = clip_norm;
    e.validate();
    return e;
  }
};

// ---------------------------------------------------------------------------
// Shared run logic

struct RunOutcome {
  double fpr95 = std::numeric_limits<double>::quiet_NaN();  // percent, mean over subsets
  long steps = 0;
  double seconds = 0;
  fs::path checkpoint;
};

/// Manifest contents that identify a run: everything except where it was
/// written, so identical invocations produce identical files.
inline json run_manifest(const std::string& command, const ExperimentConfig& e, const json& extra = json::object()) {
  json cfg = to_json(e);
  cfg.erase("output");
  json m{{"command", command}, {"config", cfg}, {"seed", e.train.seed}, {"versions", artifact_versions()}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  return m;
}

/// Trains on `train_pack`, evaluates on `eval_packs` (if any) and writes
/// everything under `dir`. `log` receives one line per epoch.
inline RunOutcome train_and_evaluate(const ExperimentConfig& e, const PatchPack& train_pack,
                                     const std::vector<PatchPack>& eval_packs, const fs::path& dir, std::ostream& log,
                                     long max_steps = -1) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions o;
  o.out_dir = dir;
  o.max_steps = max_steps;
  double epoch_sum = 0;
  long epoch_n = 0;
  o.on_step = [&](long, int epoch, const LossBreakdown& l) {
    epoch_sum += l.total;
    ++epoch_n;
    const long per_epoch = static_cast<long>(train_pack.size() / e.train.batch_size);
    if (epoch_n == per_epoch) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream line;
      line << "epoch " << epoch + 1 << "/" << e.train.epochs << "  mean L=" << std::setprecision(5)
           << epoch_sum / epoch_n << "  last L_d=" << l.descriptor << " L_m=" << l.metric
           << " L_fg=" << l.guide_a + l.guide_b << "  (" << std::fixed << std::setprecision(1) << s << " s)\n";
      log << line.str() << std::flush;
      epoch_sum = 0;
      epoch_n = 0;
    }
  };
  TrainResult tr;
  auto trainer = train<float>(train_pack, e.train, o, &tr);
  RunOutcome out;
  out.steps = tr.steps;
  out.checkpoint = tr.final_checkpoint;
  if (!eval_packs.empty()) {
    auto r = evaluate(trainer.net(), eval_packs, e.head);
    r.checkpoint = tr.final_checkpoint.string();
    r.pack = e.eval_data;
    write_report(r, dir / "eval");
    out.fpr95 = r.mean;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::ostringstream os;
  os << std::setprecision(6);
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? ";" : "") << v[i];
  return os.str();
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t pos = 0;
      out.push_back(std::stoull(tok, &pos));
      if (pos != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::logic_error&) {
      throw ConfigError("bad seed list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty seed list");
  return out;
}

inline std::vector<std::string> parse_archs(const std::string& s) {
  if (s == "all") return preset_names();
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    preset(tok);
    out.push_back(tok);
  }
  if (out.empty()) throw ConfigError("empty architecture list");
  return out;
}

/// One experiment of a sweep or ablation, repeated over seeds.
struct Variant {
  std::string name;
  ExperimentConfig config;
  json columns;  // extra CSV columns describing the variant
};

struct VariantResult {
  std::vector<double> fpr95;  // per successful seed
  std::vector<std::string> errors;
  double mean() const {
    if (fpr95.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0;
    for (double v : fpr95) s += v;
    return s / static_cast<double>(fpr95.size());
  }
};

/// Runs each variant for each seed, isolating failures. Writes per-run
/// directories and runs.csv under `dir`.
inline std::vector<VariantResult> run_variants(const std::string& command, const std::vector<Variant>& variants,
                                               const std::vector<std::uint64_t>& seeds, const PatchPack& train_pack,
                                               const std::vector<PatchPack>& eval_packs, const fs::path& dir,
                                               std::ostream& log) {
  fs::create_directories(dir);
  std::ofstream runs(dir / "runs.csv", std::ios::trunc);
  runs << "variant,seed,fpr95,steps,seconds,status\n" << std::setprecision(10);
  std::vector<VariantResult> results(variants.size());
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (auto seed : seeds) {
      auto e = variants[v].config;
      e.train.seed = seed;
      const fs::path rd = dir / (variants[v].name + "_seed" + std::to_string(seed));
      log << "[" << command << "] " << variants[v].name << " seed " << seed << "\n";
      try {
        e.validate();
        write_json(rd / kRunManifest, run_manifest(command, e, {{"variant", variants[v].name}}));
        const auto r = train_and_evaluate(e, train_pack, eval_packs, rd, log);
        results[v].fpr95.push_back(r.fpr95);
        runs << variants[v].name << "," << seed << "," << r.fpr95 << "," << r.steps << "," << r.seconds << ",ok\n";
        log << "  FPR95 " << r.fpr95 << " %\n";
      } catch (const Error& ex) {
        results[v].errors.push_back(ex.what());
        write_json(rd / "error.json", error_document(ex.kind(), ex.what(), ex.exit_code()));
        runs << variants[v].name << "," << seed << ",,,," << ex.kind() << "\n";
        log << "  failed (" << ex.kind() << "): " << ex.what() << "\n";
      }
      runs.flush();
    }
  return results;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  std::ostream& out;
  std::ostream& err;
  fs::path run_dir;  // set once known, for error.json
};

inline std::vector<PatchPack> load_eval_packs(const std::string& path) {
  if (path.empty()) return {};
  return load_pack_collection(path);
}

inline PatchPack load_train_pack(const std::string& path) {
  auto packs = load_pack_collection(path);
  if (packs.size() != 1) throw DataError(path + ": training needs a single pack, found " + std::to_string(packs.size()));
  return std::move(packs[0]);
}

struct TrainArgs {
  TrainFlags flags;
  std::string data, eval, out, resume;
  long max_steps = -1;
  bool print_config = false;
};

inline int cmd_train(const TrainArgs& a, CLI::App* app, Context& ctx) {
  ExperimentConfig e;
  std::optional<CheckpointData> resume;
  if (!a.resume.empty()) {
    resume = load_checkpoint(a.resume);
    if (a.flags.given("epochs")) resume->config["epochs"] = a.flags.epochs;
    e.train = train_config_from_json(resume->config);
    if (a.flags.given("head")) e.head = parse_score_head(a.flags.head);
  } else {
    e = a.flags.resolve();
  }
  if (app->count("--data")) e.train_data = a.data;
  if (app->count("--eval")) e.eval_data = a.eval;
  if (e.train_data.empty()) throw ConfigError("train: --data is required (or data.train in --config)");
  if (a.print_config) {
    ctx.out << to_json(e).dump(2) << "\n";
    return 0;
  }
  ctx.run_dir = !a.out.empty() ? fs::path(a.out) : output_root() / ("train_" + short_hash(run_manifest("train", e).dump()));
  e.output = ctx.run_dir.string();

  const auto pack = load_train_pack(e.train_data);
  const auto eval_packs = load_eval_packs(e.eval_data);
  json extra{{"data", {{"train", e.train_data}, {"train_digest", pack_digest(pack)}, {"eval", e.eval_data}}},
             {"max_steps", a.max_steps}};
  if (resume) extra["resumed_from"] = a.resume;
  write_json(ctx.run_dir / kRunManifest, run_manifest("train", e, extra));
  ctx.out << "run directory " << ctx.run_dir.string() << "\n";

  RunOutcome r;
  if (resume) {
    auto t = Trainer<float>::resume(*resume);
    TrainOptions o;
    o.out_dir = ctx.run_dir;
    o.max_steps = a.max_steps;
    const auto tr = t.fit(pack, o);
    r.steps = tr.steps;
    r.checkpoint = tr.final_checkpoint;
    if (!eval_packs.empty()) {
      auto rep = evaluate(t.net(), eval_packs, e.head);
      rep.checkpoint = r.checkpoint.string();
      rep.pack = e.eval_data;
      write_report(rep, ctx.run_dir / "eval");
      r.fpr95 = rep.mean;
    }
  } else {
    r = train_and_evaluate(e, pack, eval_packs, ctx.run_dir, ctx.out, a.max_steps);
  }
  ctx.out << "trained " << r.steps << " steps; checkpoint " << r.checkpoint.string() << "\n";
  if (!eval_packs.empty()) ctx.out << "FPR95 (" << to_string(e.head) << " head): " << r.fpr95 << " %\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, head = "metric", out;
  std::size_t samples = 0;
};

inline int cmd_eval(const EvalArgs& a, Context& ctx) {
  const auto head = parse_score_head(a.head);
  const auto c = load_checkpoint(a.ckpt);
  const auto net = network_from_checkpoint<float>(c);
  const auto packs = load_pack_collection(a.data);
  json m{{"command", "eval"}, {"checkpoint", a.ckpt}, {"data", a.data}, {"head", a.head},
         {"train_config", c.config}, {"versions", artifact_versions()}};
  ctx.run_dir = !a.out.empty() ? fs::path(a.out) : output_root() / ("eval_" + short_hash(m.dump()));
  write_json(ctx.run_dir / kRunManifest, m);
  auto r = evaluate(net, packs, head);
  r.checkpoint = a.ckpt;
  r.pack = a.data;
  write_report(r, ctx.run_dir);
  if (a.samples > 0)
    for (const auto& p : packs) emit_samples(net, p, ctx.run_dir / "samples" / p.subset(), head, a.samples);
  ctx.out << std::left << std::setw(16) << "subset" << "FPR95 (%)\n";
  for (const auto& s : r.subsets) ctx.out << std::setw(16) << s.subset << s.fpr95 << "\n";
  ctx.out << std::setw(16) << "mean" << r.mean << "\n";
  return 0;
}

struct SynthArgs {
  SynthConfig cfg;
  std::string out;
};

inline int cmd_synth(const SynthArgs& a, Context& ctx) {
  if (a.out.empty()) throw ConfigError("synth: --out is required");
  ctx.run_dir = a.out;
  const auto p = generate_synthetic(a.cfg);
  write_patch_pack(p, a.out);
  write_json(fs::path(a.out) / kRunManifest,
             json{{"command", "synth"}, {"config", a.cfg.to_json()}, {"name", a.cfg.name}, {"split", a.cfg.split},
                  {"digest", pack_digest(p)}, {"seed", a.cfg.seed}, {"versions", artifact_versions()}});
  ctx.out << "wrote " << p.size() << " pairs to " << a.out << " (digest " << pack_digest(p) << ")\n";
  return 0;
}

struct ConvertArgs {
  std::string src, layout, out;
  ConvertOptions opt;
};

inline int cmd_convert(const ConvertArgs& a, Context& ctx) {
  const auto layout = parse_layout(a.layout);
  ctx.run_dir = a.out;
  const auto packs = convert_external(layout, a.src, a.opt);
  json m{{"command", "convert"}, {"source", a.src}, {"layout", a.layout}, {"split", a.opt.split},
         {"seed", a.opt.seed}, {"subsets", json::array()}, {"versions", artifact_versions()}};
  for (const auto& p : packs) {
    write_patch_pack(p, fs::path(a.out) / p.subset());
    m["subsets"].push_back({{"subset", p.subset()}, {"n_pairs", p.size()}, {"digest", pack_digest(p)}});
    ctx.out << p.subset() << ": " << p.size() << " pairs\n";
  }
  write_json(fs::path(a.out) / kRunManifest, m);
  return 0;
}

struct SweepArgs {
  TrainFlags flags;
  std::string archs = "all", data, eval, out, seeds = "0";
};

inline int finish_table(const std::vector<VariantResult>& res) {
  for (const auto& r : res)
    if (!r.fpr95.empty()) return 0;
  throw Error("every run failed; see runs.csv");
}

inline int cmd_sweep(const SweepArgs& a, Context& ctx) {
  const auto base = a.flags.resolve();
  const auto archs = parse_archs(a.archs);
  const auto seeds = parse_seeds(a.seeds);
  if (a.eval.empty()) throw ConfigError("sweep: --eval is required");
  const auto pack = load_train_pack(a.data);
  const auto evals = load_eval_packs(a.eval);
  std::vector<Variant> variants;
  for (const auto& name : archs)
    for (bool hnsm : {true, false}) {
      Variant v;
      v.name = name + (hnsm ? "_hnsm" : "_random");
      v.config = base;
      const double w = base.train.architecture.width;
      v.config.train.architecture = preset(name);
      v.config.train.architecture.width = w;
      v.config.train.use_hnsm = hnsm;
      v.config.train_data = a.data;
      v.config.eval_data = a.eval;
      v.columns = {{"preset", name}, {"use_hnsm", hnsm}};
      variants.push_back(std::move(v));
    }
  ctx.run_dir = !a.out.empty() ? fs::path(a.out) : output_root() / ("sweep_" + short_hash(to_json(base).dump() + a.archs + a.seeds));
  write_json(ctx.run_dir / kRunManifest,
             run_manifest("sweep", base, {{"archs", archs}, {"seeds", seeds}, {"data", {{"train", a.data}, {"eval", a.eval}}}}));
  const auto res = run_variants("sweep", variants, seeds, pack, evals, ctx.run_dir, ctx.out);
  std::ofstream csv(ctx.run_dir / "sweep.csv", std::ios::trunc);
  csv << "preset,series,use_hnsm,fpr95_mean,fpr95_seeds,failed\n" << std::setprecision(10);
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& c = variants[i].columns;
    const std::string p = c["preset"];
    csv << p << "," << p[0] << "," << (c["use_hnsm"].get<bool>() ? 1 : 0) << "," << res[i].mean() << ","
        << join_doubles(res[i].fpr95) << "," << res[i].errors.size() << "\n";
  }
  ctx.out << "wrote " << (ctx.run_dir / "sweep.csv").string() << "\n";
  return finish_table(res);
}

struct AblateArgs {
  TrainFlags flags;
  std::string data, eval, out, seeds = "0";
};

/// The four break-down rows: w/o all, +CNA, +CNA+HNSM-M, full.
inline std::vector<Variant> ablation_variants(const ExperimentConfig& base) {
  struct Row {
    const char* name;
    bool cna, hnsm, fgl;
  };
  const Row rows[] = {{"wo_all", false, false, false},
                      {"cna", true, false, false},
                      {"cna_hnsm", true, true, false},
                      {"full", true, true, true}};
  std::vector<Variant> out;
  for (const auto& r : rows) {
    Variant v{r.name, base, {{"cna", r.cna}, {"hnsm_m", r.hnsm}, {"fgl", r.fgl}}};
    auto& t = v.config.train;
    // Without CNA only the Pseudo-Siamese metric network remains.
    t.architecture.metric_only = !r.cna;
    t.use_hnsm = r.hnsm;
    t.use_fgl = r.fgl;
    out.push_back(std::move(v));
  }
  return out;
}

inline int cmd_ablate(const AblateArgs& a, Context& ctx) {
  auto base = a.flags.resolve();
  base.train.use_hnsm = false;  // set per row; keeps the metric_only row valid
  const auto seeds = parse_seeds(a.seeds);
  if (a.eval.empty()) throw ConfigError("ablate: --eval is required");
  const auto pack = load_train_pack(a.data);
  const auto evals = load_eval_packs(a.eval);
  auto variants = ablation_variants(base);
  for (auto& v : variants) {
    v.config.train_data = a.data;
    v.config.eval_data = a.eval;
  }
  ctx.run_dir = !a.out.empty() ? fs::path(a.out) : output_root() / ("ablate_" + short_hash(to_json(base).dump() + a.seeds));
  write_json(ctx.run_dir / kRunManifest,
             run_manifest("ablate", base, {{"seeds", seeds}, {"data", {{"train", a.data}, {"eval", a.eval}}}}));
  const auto res = run_variants("ablate", variants, seeds, pack, evals, ctx.run_dir, ctx.out);
  std::ofstream csv(ctx.run_dir / "ablation.csv", std::ios::trunc);
  csv << "variant,cna,hnsm_m,fgl,fpr95_mean,fpr95_seeds,failed\n" << std::setprecision(10);
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const auto& c = variants[i].columns;
    csv << variants[i].name << "," << c["cna"].get<bool>() << "," << c["hnsm_m"].get<bool>() << ","
        << c["fgl"].get<bool>() << "," << res[i].mean() << "," << join_doubles(res[i].fpr95) << ","
        << res[i].errors.size() << "\n";
  }
  ctx.out << "wrote " << (ctx.run_dir / "ablation.csv").string() << "\n";
  return finish_table(res);
}

struct InspectArgs {
  std::string ckpt, preset;
  double width = 1;
  bool as_json = false;
};

inline std::string millions(std::size_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << n / 1e6;
  return os.str();
}

inline int cmd_inspect(const InspectArgs& a, Context& ctx) {
  if (a.ckpt.empty() == a.preset.empty()) throw ConfigError("inspect: give exactly one of --ckpt or --preset");
  TrainConfig cfg;
  json meta = json::object();
  KglNet<float> net;
  if (!a.ckpt.empty()) {
    const auto c = load_checkpoint(a.ckpt);
    cfg = train_config_from_json(c.config);
    net = network_from_checkpoint<float>(c);
    meta = {{"epoch", c.epoch}, {"step", c.step}};
  } else {
    cfg.architecture = preset(a.preset);
    cfg.architecture.width = a.width;
    net = build_network<float>(cfg.architecture, 0);
  }
  const auto r = shared_parameter_report(net);
  auto group_json = [](const AliasGroup& g) {
    return json{{"stage", g.stage}, {"block", g.block}, {"slots", g.slots}, {"parameters", g.parameters}};
  };
  json j{{"architecture", to_json(cfg.architecture)},
         {"total_parameters", r.total_parameters},
         {"aliased_parameters", r.aliased_parameters},
         {"aliased", json::array()},
         {"siamese", json::array()}};
  for (const auto& g : r.aliased) j["aliased"].push_back(group_json(g));
  for (const auto& g : r.siamese) j["siamese"].push_back(group_json(g));
  if (!meta.empty()) j["checkpoint"] = meta;
  if (a.as_json) {
    ctx.out << j.dump(2) << "\n";
    return 0;
  }
  const auto& arch = cfg.architecture;
  ctx.out << "preset            " << (arch.preset.empty() ? "(custom)" : arch.preset) << "\n"
          << "metric / desc     " << to_string(arch.metric_structure) << " / " << to_string(arch.descriptor_structure)
          << "\n"
          << "sharing           " << to_string(arch.sharing) << " (k=" << arch.shared_layer_count << ")\n"
          << "width             " << arch.width << "\n"
          << "total parameters  " << r.total_parameters << " (" << millions(r.total_parameters) << "M)\n"
          << "aliased           " << r.aliased_parameters << " in " << r.aliased.size() << " stages\n";
  for (const auto& g : r.aliased) {
    ctx.out << "  block " << g.block << "  " << g.stage << "  <-";
    for (const auto& s : g.slots) ctx.out << " " << s;
    ctx.out << "\n";
  }
  if (!meta.empty()) ctx.out << "checkpoint        epoch " << meta["epoch"] << ", step " << meta["step"] << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"KGL-Net cross-spectral patch matching", "kglnet"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "train a network on a patch pack");
  ta.flags.add(train);
  train->add_option("--data", ta.data, "training pack directory");
  train->add_option("--eval", ta.eval, "evaluation pack (or directory of subset packs)");
  train->add_option("--out", ta.out, std::string("run directory (default under $") + kOutputRootEnv + ")");
  train->add_option("--resume", ta.resume, "continue from a checkpoint");
  train->add_option("--max-steps", ta.max_steps, "stop after this many steps in total");
  train->add_flag("--print-config", ta.print_config, "print the resolved configuration and exit");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint (FPR95 per subset)");
  eval->add_option("--ckpt", ea.ckpt, "checkpoint file")->required();
  eval->add_option("--data", ea.data, "pack or directory of subset packs")->required();
  eval->add_option("--head", ea.head, "metric or descriptor");
  eval->add_option("--out", ea.out, "report directory");
  eval->add_option("--samples", ea.samples, "write up to N example pairs per judgment category");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic cross-spectral pack");
  synth->add_option("--out", sa.out, "pack directory")->required();
  synth->add_option("--n", sa.cfg.n_pairs, "number of aligned pairs");
  synth->add_option("--severity", sa.cfg.severity, "spectral remapping strength in [0, 1]");
  synth->add_option("--noise", sa.cfg.noise, "additive noise on spectrum B");
  synth->add_option("--octaves", sa.cfg.octaves, "value-noise octaves");
  synth->add_option("--seed", sa.cfg.seed, "generator seed");
  synth->add_option("--name", sa.cfg.name, "pack name");
  synth->add_option("--split", sa.cfg.split, "train or test");

  ConvertArgs ca;
  auto* convert = app.add_subcommand("convert", "convert PNG patch folders into packs");
  convert->add_option("--src", ca.src, "source directory")->required();
  convert->add_option("--layout", ca.layout, "paired_folders or side_by_side")->required();
  convert->add_option("--out", ca.out, "output directory (one pack per subset)")->required();
  convert->add_option("--name", ca.opt.name, "collection name");
  convert->add_option("--split", ca.opt.split, "split recorded in the manifests");
  convert->add_option("--seed", ca.opt.seed, "seed for generated negatives");
  convert->footer(kLayoutHelp);

  SweepArgs swa;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate presets with and without HNSM-M");
  swa.flags.add(sweep, false);
  sweep->add_option("--archs", swa.archs, "comma-separated presets or 'all'");
  sweep->add_option("--data", swa.data, "training pack")->required();
  sweep->add_option("--eval", swa.eval, "evaluation pack")->required();
  sweep->add_option("--out", swa.out, "sweep directory");
  sweep->add_option("--seeds", swa.seeds, "comma-separated seeds");

  AblateArgs aa;
  auto* ablate = app.add_subcommand("ablate", "break-down ablation: w/o all, +CNA, +HNSM-M, +FGL");
  aa.flags.add(ablate, false);
  ablate->add_option("--data", aa.data, "training pack")->required();
  ablate->add_option("--eval", aa.eval, "evaluation pack")->required();
  ablate->add_option("--out", aa.out, "ablation directory");
  ablate->add_option("--seeds", aa.seeds, "comma-separated seeds");

  InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "parameter and sharing summary");
  inspect->add_option("--ckpt", ia.ckpt, "checkpoint file");
  inspect->add_option("--preset", ia.preset, "inspect a freshly built preset instead");
  inspect->add_option("--width", ia.width, "width multiplier for --preset");
  inspect->add_flag("--json", ia.as_json, "machine-readable output");

  Context ctx{out, err, {}};
  auto fail = [&](const std::string& kind, const std::string& msg, int code, const json& extra = json::object()) {
    auto doc = error_document(kind, msg, code);
    for (const auto& [k, v] : extra.items()) doc["error"][k] = v;
    err << doc.dump() << "\n";
    if (!ctx.run_dir.empty()) {
      std::error_code ec;
      fs::create_directories(ctx.run_dir, ec);
      std::ofstream(ctx.run_dir / "error.json") << doc.dump(2) << "\n";
    }
    return code;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), 2);
  }

  try {
    if (*train) return cmd_train(ta, train, ctx);
    if (*eval) return cmd_eval(ea, ctx);
    if (*synth) return cmd_synth(sa, ctx);
    if (*convert) return cmd_convert(ca, ctx);
    if (*sweep) return cmd_sweep(swa, ctx);
    if (*ablate) return cmd_ablate(aa, ctx);
    if (*inspect) return cmd_inspect(ia, ctx);
  } catch (const DivergenceError& e) {
    return fail(e.kind(), e.what(), e.exit_code(), {{"step", e.step()}, {"component", e.component()}});
  } catch (const Error& e) {
    return fail(e.kind(), e.what(), e.exit_code());
  } catch (const std::exception& e) {
    return fail("internal", e.what(), 1);
  }
  return 2;
}

}  // namespace kgl::cli
