#include "sgdiff/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "sgdiff/eval.hpp"
#include "sgdiff/imageio.hpp"
#include "sgdiff/training.hpp"

namespace sgdiff {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr std::uint64_t kSampleTag = 401;
constexpr std::uint64_t kEvalTag = 402;

struct Common {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c, const RunConfig& defaults) {
  cmd->add_option("--config", c.config_path, "JSON run config; flags override its values");
  cmd->add_option("--out", c.out_dir, "Output directory")->default_str(defaults.output_dir);
  cmd->add_option("--set", c.sets, "Override any config key: dotted.key=JSON value (repeatable)")
      ->default_str("none");
}

// Turns a.b.c=value into {"a": {"b": {"c": value}}}; non-JSON values become strings.
json set_patch(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) value = json{{*it, value}};
  return value;
}

RunConfig resolve(const Common& c) {
  RunConfig cfg;
  if (!c.config_path.empty()) cfg = load_run_config(c.config_path);
  for (const auto& s : c.sets) cfg = run_config_from_json(set_patch(s), cfg);
  if (!c.out_dir.empty()) cfg.output_dir = c.out_dir;
  return cfg;
}

template <typename T>
void override_if(const CLI::Option* opt, T& target, const T& value) {
  if (opt->count() > 0) target = value;
}

// The dataset on disk is authoritative for data.*; the run config adopts it.
Dataset load_data(RunConfig& cfg, const std::string& flag, std::ostream& out) {
  const fs::path dir = flag.empty() ? fs::path(cfg.output_dir) / "data" : fs::path(flag);
  if (!fs::exists(dir / "manifest.csv")) throw ConfigError("no dataset at " + dir.string() + " (run gen-data first)");
  Dataset data = load_dataset(dir);
  if (config_to_json(data.config) != config_to_json(cfg.data.generator)) {
    out << "note: using the data.generator config stored with " << dir.string() << '\n';
  }
  cfg.data.generator = data.config;
  cfg.data.n_train = static_cast<int>(data.train.size());
  cfg.data.n_test = static_cast<int>(data.test.size());
  cfg.validate();
  return data;
}

Checkpoint load_model_checkpoint(const RunConfig& cfg, const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path.string());
  Checkpoint ckpt = load_checkpoint(path);
  const json mine = config_to_json(cfg);
  for (const char* section : {"encoder", "denoiser", "schedule"}) {
    if (!ckpt.config.contains(section) || ckpt.config[section] != mine[section]) {
      throw ConfigError(std::string("run config section '") + section + "' disagrees with checkpoint " + path.string());
    }
  }
  return ckpt;
}

fs::path default_checkpoint(const RunConfig& cfg) {
  const fs::path style = fs::path(cfg.output_dir) / "style.ckpt";
  return fs::exists(style) ? style : fs::path(cfg.output_dir) / "backbone.ckpt";
}

// Centre square crop, nearest-neighbour resize to P x P.
Tensor<float> fit_square(const Tensor<float>& img, int P) {
  const Index h = img.dim(1), w = img.dim(2), side = std::min(h, w);
  const Index oy = (h - side) / 2, ox = (w - side) / 2;
  Tensor<float> out({img.dim(0), P, P});
  for (Index c = 0; c < img.dim(0); ++c)
    for (Index y = 0; y < P; ++y)
      for (Index x = 0; x < P; ++x) {
        const Index sy = oy + (y * side) / P, sx = ox + (x * side) / P;
        out[(c * P + y) * P + x] = img[(c * h + sy) * w + sx];
      }
  return out;
}

void print_progress(std::ostream& out, const char* stage, const TrainLogRow& row, int total,
                    const std::vector<TrainLogRow>& log, int window,
                    std::chrono::steady_clock::time_point start) {
  if (row.step % 100 != 0 && row.step != total) return;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%s step %d/%d total %.5f smoothed %.5f (%.0fs)", stage, row.step, total, row.total,
                smoothed_total(log, log.size() - 1, window), secs);
  out << buf << std::endl;
}

int gen_data(const RunConfig& cfg, std::ostream& out) {
  cfg.validate();
  const fs::path dir = fs::path(cfg.output_dir) / "data";
  fs::remove_all(dir);
  save_dataset(generate_dataset(cfg.data.generator, cfg.data.n_train, cfg.data.n_test), dir);
  save_run_config(cfg, fs::path(cfg.output_dir) / "gen-data.config.json");
  out << "wrote " << cfg.data.n_train << " train + " << cfg.data.n_test << " test examples to " << dir.string() << '\n';
  return kExitOk;
}

int train(RunConfig cfg, const std::string& stage, const std::string& data_dir, const std::string& backbone_path,
          std::ostream& out) {
  cfg.validate();
  const fs::path root(cfg.output_dir);
  Checkpoint backbone;
  if (stage == "style") {
    const fs::path path = backbone_path.empty() ? root / "backbone.ckpt" : fs::path(backbone_path);
    if (!fs::exists(path)) {
      throw ConfigError("train --stage style needs a stage-1 checkpoint; not found: " + path.string());
    }
    backbone = load_checkpoint(path);
  }
  const Dataset data = load_data(cfg, data_dir, out);
  std::vector<TrainLogRow> log;
  const auto start = std::chrono::steady_clock::now();
  const int total = stage == "style" ? cfg.train.style.iterations : cfg.train.backbone.iterations;
  const TrainObserver observer = [&](const TrainLogRow& row) {
    log.push_back(row);
    print_progress(out, stage.c_str(), row, total, log, cfg.train.smoothing_window, start);
  };
  const TrainResult result =
      stage == "style" ? train_style_stage(cfg, data, backbone, observer) : train_backbone(cfg, data, observer);
  save_checkpoint(result.checkpoint, root / (stage + ".ckpt"));
  write_loss_csv(result.log, root / (stage + "_loss.csv"));
  save_run_config(cfg, root / ("train-" + stage + ".config.json"));
  out << "wrote " << (root / (stage + ".ckpt")).string() << '\n';
  return kExitOk;
}

struct SampleArgs {
  std::string text;
  std::string style;
  std::string mask;
  std::string texture;
  std::string checkpoint;
  std::string name = "sample";
  int n = 4;
  bool raw = false;
};

int sample(const RunConfig& cfg, const SampleArgs& a, std::ostream& out, std::ostream& err) {
  cfg.validate();
  const fs::path ckpt_path = a.checkpoint.empty() ? default_checkpoint(cfg) : fs::path(a.checkpoint);
  const Checkpoint ckpt = load_model_checkpoint(cfg, ckpt_path);
  if (a.n < 1) throw ConfigError("--n must be >= 1");
  if (!a.style.empty() && !a.texture.empty()) throw ConfigError("--style and --texture are mutually exclusive");

  const Vocabulary vocab(vocabulary_words(cfg.data.generator));
  std::istringstream words(a.text);
  for (std::string w; words >> w;) {
    if (!vocab.id(w)) err << "warning: word '" << w << "' is not in the vocabulary and is ignored\n";
  }
  const int P = cfg.model.encoder.patch_size;
  const NullConditions nulls = null_conditions(cfg.model.encoder);
  ConditionPair pair = make_condition_pair(tokenize(a.text, vocab, cfg.model.encoder.text_length), nulls.style_patch);
  if (a.text.empty()) pair = with_text_null(pair, nulls);
  if (!a.style.empty()) {
    const Tensor<float> patch = fit_square(read_png(a.style), P);
    if (!a.mask.empty()) {
      const Tensor<float> m = fit_square(read_png(a.mask), P);
      Tensor<float> mask({P, P});
      for (Index i = 0; i < mask.size(); ++i) mask[i] = m[i] > 127.5f ? 1.0f : 0.0f;
      pair.style_patch = mask_background(patch, mask);
    } else {
      pair.style_patch = normalize_image(patch);
    }
  } else if (!a.texture.empty()) {
    std::istringstream t(a.texture);
    std::string color, pattern;
    t >> color >> pattern;
    if (pattern.empty()) pattern = "solid";
    pair.style_patch = normalize_image(texture_patch(cfg.data.generator, color, pattern, P));
  } else {
    pair = with_style_null(pair, nulls);
  }
  const std::vector<ConditionPair> pairs(static_cast<std::size_t>(a.n), pair);
  EvalCounter counter;
  const Tensor<float> images = generate_images(cfg, ckpt.params, pairs, cfg.guidance, cfg.sampler,
                                               CounterRng(cfg.seed).fork(kSampleTag), &counter);
  const fs::path dir = fs::path(cfg.output_dir) / "samples";
  write_png(dir / (a.name + ".png"), tile_images(images, std::min(a.n, 8)));
  if (a.raw) write_raw_floats(dir / (a.name + ".f32"), images);
  save_run_config(cfg, dir / (a.name + ".config.json"));
  out << "wrote " << (dir / (a.name + ".png")).string() << " (" << counter.rows << " model rows)\n";
  return kExitOk;
}

int evaluate(RunConfig cfg, const std::string& checkpoint, const std::string& data_dir, std::ostream& out,
             std::ostream& err) {
  cfg.validate();
  const Checkpoint ckpt = load_model_checkpoint(cfg, checkpoint.empty() ? default_checkpoint(cfg) : fs::path(checkpoint));
  const Dataset data = load_data(cfg, data_dir, out);
  const CsScorer scorer = train_cs_scorer(cfg);
  const FeatureExtractor<float> extractor(cfg.eval.extractor);
  const EvalInputs inputs = eval_inputs(cfg, data.test, cfg.eval.n_samples);
  const Tensor<float> images = generate_images(cfg, ckpt.params, inputs.pairs, cfg.guidance, cfg.sampler,
                                               CounterRng(cfg.seed).fork(kEvalTag));
  const WarningSink warn = [&](const std::string& w) { err << "warning: " << w << '\n'; };
  AblationRow row;
  row.sweep = "none";
  row.s_style = cfg.guidance.s_style;
  row.s_text = cfg.guidance.s_text;
  row.order = cfg.guidance.order;
  row.reference = row.order == GuidanceOrder::StyleFirst && row.s_style == 1.2 && row.s_text == 1.0;
  row.config_hash = config_hash(config_to_json(cfg));
  row.metrics = evaluate_images(cfg, images, inputs, scorer, extractor, warn);
  const fs::path dir = fs::path(cfg.output_dir) / "eval";
  write_metrics_csv({row}, dir / "metrics.csv");
  const json report = {{"fid_like", row.metrics.fid_like},   {"lpips_like", row.metrics.lpips_like},
                       {"cs_like", row.metrics.cs_like},     {"attribute_match", row.metrics.attribute_match},
                       {"n", row.metrics.n},                 {"config_hash", row.config_hash}};
  std::ofstream(dir / "metrics.json") << report.dump(2) << '\n';
  write_png(dir / "samples.png", tile_images(images, 16));
  save_run_config(cfg, dir / "config.json");
  out << report.dump() << '\n';
  return kExitOk;
}

int ablate(RunConfig cfg, const std::string& checkpoint, const std::string& data_dir, std::ostream& out,
           std::ostream& err) {
  cfg.validate();
  const Checkpoint ckpt = load_model_checkpoint(cfg, checkpoint.empty() ? default_checkpoint(cfg) : fs::path(checkpoint));
  const Dataset data = load_data(cfg, data_dir, out);
  const CsScorer scorer = train_cs_scorer(cfg);
  const WarningSink warn = [&](const std::string& w) { err << "warning: " << w << '\n'; };
  std::size_t done = 0;
  const std::size_t total = 4 * cfg.eval.sweep_weights.size();
  const auto rows = ablation_grid(cfg, ckpt.params, data.test, scorer, [&](const AblationRow& r) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "[%zu/%zu] %s s_S=%.2f s_T=%.2f fid %.4f lpips %.5f cs %.2f attr %.3f", ++done, total,
                  to_string(r.order).c_str(), r.s_style, r.s_text, r.metrics.fid_like, r.metrics.lpips_like,
                  r.metrics.cs_like, r.metrics.attribute_match);
    out << buf << std::endl;
  }, warn);
  const fs::path dir = fs::path(cfg.output_dir) / "ablate";
  write_metrics_csv(rows, dir / "metrics.csv");
  write_ablation_plots(rows, dir);
  save_run_config(cfg, dir / "config.json");
  out << "wrote " << rows.size() << " rows to " << (dir / "metrics.csv").string() << '\n';
  return kExitOk;
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  const RunConfig defaults;
  CLI::App app{"Style-and-text guided garment diffusion: data, training, sampling, evaluation"};
  app.name("sgdiff");
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  Common common;

  CLI::App* gen = app.add_subcommand("gen-data", "Render the synthetic garment dataset into <out>/data");
  add_common(gen, common, defaults);
  int n_train = defaults.data.n_train, n_test = defaults.data.n_test;
  std::uint64_t data_seed = defaults.data.generator.seed;
  auto* o_n = gen->add_option("--n", n_train, "Training examples");
  auto* o_ntest = gen->add_option("--n-test", n_test, "Test examples");
  auto* o_dseed = gen->add_option("--seed", data_seed, "Dataset seed (data.generator.seed)");

  CLI::App* tr = app.add_subcommand("train", "Train the backbone (stage 1) or the style branch (stage 2)");
  add_common(tr, common, defaults);
  std::string stage;
  std::string data_dir, backbone_path;
  int iterations = 0, batch = 0;
  double lr = 0;
  std::uint64_t seed = defaults.seed;
  tr->add_option("--stage", stage, "backbone | style")->required()->check(CLI::IsMember({"backbone", "style"}));
  tr->add_option("--data", data_dir, "Dataset directory")->default_str("<out>/data");
  tr->add_option("--backbone", backbone_path, "Stage-1 checkpoint for --stage style")->default_str("<out>/backbone.ckpt");
  auto* o_iters = tr->add_option("--iterations", iterations, "Iterations of the chosen stage")
                      ->default_str(std::to_string(defaults.train.backbone.iterations) + " | " +
                                    std::to_string(defaults.train.style.iterations));
  auto* o_batch = tr->add_option("--batch", batch, "Batch size of the chosen stage")
                      ->default_str(std::to_string(defaults.train.backbone.batch) + " | " +
                                    std::to_string(defaults.train.style.batch));
  auto* o_lr = tr->add_option("--lr", lr, "Learning rate of the chosen stage")->default_str("1e-4 | 1e-5");
  auto* o_tseed = tr->add_option("--seed", seed, "Global seed");

  CLI::App* sm = app.add_subcommand("sample", "Generate images for one text prompt and style patch");
  add_common(sm, common, defaults);
  SampleArgs sa;
  double s_s = defaults.guidance.s_style, s_t = defaults.guidance.s_text;
  std::string order = to_string(defaults.guidance.order);
  int steps = defaults.sampler.steps;
  double eta = defaults.sampler.eta;
  std::string sampler_kind = to_string(defaults.sampler.kind);
  sm->add_option("--text", sa.text, "Prompt, e.g. \"dress red stripes long\"");
  sm->add_option("--style", sa.style, "Style image (PNG); centre-cropped and resized to the patch size");
  sm->add_option("--mask", sa.mask, "Foreground mask PNG for --style (bright = garment)");
  sm->add_option("--texture", sa.texture, "Named synthetic style texture: \"<colour> [pattern]\"");
  sm->add_option("--checkpoint", sa.checkpoint, "Model checkpoint")->default_str("<out>/style.ckpt, else backbone.ckpt");
  sm->add_option("--name", sa.name, "Output file stem under <out>/samples");
  sm->add_option("--n", sa.n, "Images to generate");
  sm->add_flag("--raw", sa.raw, "Also write a raw float32 dump");
  auto* o_ss = sm->add_option("--s-s", s_s, "Style guidance scale");
  auto* o_st = sm->add_option("--s-t", s_t, "Text guidance scale");
  auto* o_order = sm->add_option("--order", order, "Guidance order")->check(CLI::IsMember({"style_first", "text_first"}));
  auto* o_steps = sm->add_option("--steps", steps, "DDIM steps");
  auto* o_eta = sm->add_option("--eta", eta, "DDIM eta");
  auto* o_kind = sm->add_option("--sampler", sampler_kind, "ddim | ddpm")->check(CLI::IsMember({"ddim", "ddpm"}));
  auto* o_sseed = sm->add_option("--seed", seed, "Global seed");

  CLI::App* ev = app.add_subcommand("eval", "Metrics of the guided model on the test split");
  add_common(ev, common, defaults);
  std::string ev_ckpt;
  int ev_n = defaults.eval.n_samples;
  ev->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->default_str("<out>/style.ckpt, else backbone.ckpt");
  ev->add_option("--data", data_dir, "Dataset directory")->default_str("<out>/data");
  auto* o_evn = ev->add_option("--n", ev_n, "Generated images");
  auto* o_evsteps = ev->add_option("--steps", steps, "DDIM steps");
  auto* o_eseed = ev->add_option("--seed", seed, "Global seed");

  CLI::App* ab = app.add_subcommand("ablate", "Guidance-weight sweep over both orders");
  add_common(ab, common, defaults);
  int ab_n = defaults.eval.ablation_samples, ab_steps = defaults.eval.ablation_steps;
  ab->add_option("--checkpoint", ev_ckpt, "Model checkpoint")->default_str("<out>/style.ckpt, else backbone.ckpt");
  ab->add_option("--data", data_dir, "Dataset directory")->default_str("<out>/data");
  auto* o_abn = ab->add_option("--n", ab_n, "Images per grid cell");
  auto* o_absteps = ab->add_option("--steps", ab_steps, "DDIM steps per image");
  auto* o_aseed = ab->add_option("--seed", seed, "Global seed");

  for (CLI::App* cmd : {gen, tr, sm, ev, ab}) {
    for (CLI::Option* opt : cmd->get_options()) {
      if (opt->get_type_size() > 0 && opt->get_default_str().empty() && !opt->get_required()) opt->default_str("none");
    }
  }

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    err << "error: usage: " << one_line(e.what()) << '\n';
    return kExitUsage;
  }

  try {
    RunConfig cfg = resolve(common);
    if (gen->parsed()) {
      override_if(o_n, cfg.data.n_train, n_train);
      override_if(o_ntest, cfg.data.n_test, n_test);
      override_if(o_dseed, cfg.data.generator.seed, data_seed);
      return gen_data(cfg, out);
    }
    if (tr->parsed()) {
      StageConfig& sc = stage == "style" ? cfg.train.style : cfg.train.backbone;
      override_if(o_iters, sc.iterations, iterations);
      override_if(o_batch, sc.batch, batch);
      override_if(o_lr, sc.lr, lr);
      override_if(o_tseed, cfg.seed, seed);
      return train(cfg, stage, data_dir, backbone_path, out);
    }
    if (sm->parsed()) {
      override_if(o_ss, cfg.guidance.s_style, s_s);
      override_if(o_st, cfg.guidance.s_text, s_t);
      if (o_order->count()) cfg.guidance.order = parse_guidance_order(order);
      override_if(o_steps, cfg.sampler.steps, steps);
      override_if(o_eta, cfg.sampler.eta, eta);
      if (o_kind->count()) cfg.sampler.kind = parse_sampler_kind(sampler_kind);
      override_if(o_sseed, cfg.seed, seed);
      return sample(cfg, sa, out, err);
    }
    if (ev->parsed()) {
      override_if(o_evn, cfg.eval.n_samples, ev_n);
      override_if(o_evsteps, cfg.sampler.steps, steps);
      override_if(o_eseed, cfg.seed, seed);
      return evaluate(cfg, ev_ckpt, data_dir, out, err);
    }
    override_if(o_abn, cfg.eval.ablation_samples, ab_n);
    override_if(o_absteps, cfg.eval.ablation_steps, ab_steps);
    override_if(o_aseed, cfg.seed, seed);
    return ablate(cfg, ev_ckpt, data_dir, out, err);
  } catch (const ConfigError& e) {
    err << "error: config: " << one_line(e.what()) << '\n';
    return kExitConfig;
  } catch (const CheckpointError& e) {
    err << "error: checkpoint: " << one_line(e.what()) << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: runtime: " << one_line(e.what()) << '\n';
    return kExitRuntime;
  }
}

}  // namespace sgdiff
