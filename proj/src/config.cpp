#include "sgdiff/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace sgdiff {
namespace {

using nlohmann::json;

std::string schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::Cosine ? "cosine" : "linear"; }

json encode(int v) { return v; }
json encode(std::uint64_t v) { return v; }
json encode(double v) { return v; }
json encode(float v) { return v; }
json encode(bool v) { return v; }
json encode(const std::string& v) { return v; }
json encode(ScheduleKind v) { return schedule_kind_name(v); }
json encode(SamplerKind v) { return to_string(v); }
json encode(GuidanceOrder v) { return to_string(v); }
json encode(const NamedColor& c) { return json{{"name", c.name}, {"rgb", {c.rgb[0], c.rgb[1], c.rgb[2]}}}; }
template <typename T>
json encode(const std::vector<T>& v) {
  json out = json::array();
  for (const auto& x : v) out.push_back(encode(x));
  return out;
}

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw ConfigError("config key '" + key + "' must be " + expected);
}

void decode(const json& j, int& v, const std::string& key) {
  if (!j.is_number_integer()) type_error(key, "an integer");
  v = j.get<int>();
}
void decode(const json& j, std::uint64_t& v, const std::string& key) {
  if (!j.is_number_unsigned()) type_error(key, "a non-negative integer");
  v = j.get<std::uint64_t>();
}
void decode(const json& j, double& v, const std::string& key) {
  if (!j.is_number()) type_error(key, "a number");
  v = j.get<double>();
}
void decode(const json& j, float& v, const std::string& key) {
  if (!j.is_number()) type_error(key, "a number");
  v = j.get<float>();
}
void decode(const json& j, bool& v, const std::string& key) {
  if (!j.is_boolean()) type_error(key, "a boolean");
  v = j.get<bool>();
}
void decode(const json& j, std::string& v, const std::string& key) {
  if (!j.is_string()) type_error(key, "a string");
  v = j.get<std::string>();
}
void decode(const json& j, NamedColor& c, const std::string& key) {
  if (!j.is_object() || !j.contains("name") || !j.contains("rgb") || j.size() != 2) {
    type_error(key, "an object {\"name\", \"rgb\"}");
  }
  decode(j["name"], c.name, key + ".name");
  const json& rgb = j["rgb"];
  if (!rgb.is_array() || rgb.size() != 3) type_error(key + ".rgb", "an array of 3 numbers");
  for (std::size_t i = 0; i < 3; ++i) decode(rgb[i], c.rgb[i], key + ".rgb");
}
template <typename T>
void decode(const json& j, std::vector<T>& v, const std::string& key) {
  if (!j.is_array()) type_error(key, "an array");
  std::vector<T> out(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) decode(j[i], out[i], key + "[" + std::to_string(i) + "]");
  v = std::move(out);
}
void decode(const json& j, ScheduleKind& v, const std::string& key) {
  std::string s;
  decode(j, s, key);
  if (s == "linear") v = ScheduleKind::Linear;
  else if (s == "cosine") v = ScheduleKind::Cosine;
  else type_error(key, "\"linear\" or \"cosine\"");
}
void decode(const json& j, SamplerKind& v, const std::string& key) {
  std::string s;
  decode(j, s, key);
  try {
    v = parse_sampler_kind(s);
  } catch (const std::exception&) {
    type_error(key, "\"ddpm\" or \"ddim\"");
  }
}
void decode(const json& j, GuidanceOrder& v, const std::string& key) {
  std::string s;
  decode(j, s, key);
  try {
    v = parse_guidance_order(s);
  } catch (const std::exception&) {
    type_error(key, "\"style_first\" or \"text_first\"");
  }
}

struct Writer {
  json j = json::object();
  template <typename T>
  void operator()(const char* key, const T& value) {
    j[key] = encode(value);
  }
  template <typename F>
  void section(const char* key, F&& fn) {
    Writer w;
    fn(w);
    j[key] = std::move(w.j);
  }
};

struct Reader {
  Reader(const json& j, std::string prefix) : j(j), prefix(std::move(prefix)) {
    if (!j.is_object()) throw ConfigError("config section '" + (this->prefix.empty() ? "<root>" : this->prefix) + "' must be an object");
  }
  template <typename T>
  void operator()(const char* key, T& value) {
    seen.insert(key);
    if (auto it = j.find(key); it != j.end()) decode(*it, value, prefix + key);
  }
  template <typename F>
  void section(const char* key, F&& fn) {
    seen.insert(key);
    auto it = j.find(key);
    if (it == j.end()) return;
    Reader r(*it, prefix + key + ".");
    fn(r);
    r.finish();
  }
  void finish() const {
    for (const auto& item : j.items()) {
      if (!seen.count(item.key())) throw ConfigError("unknown config key '" + prefix + item.key() + "'");
    }
  }
  const json& j;
  std::string prefix;
  std::set<std::string> seen;
};

template <typename V, typename C>
void visit_generator(V& v, C& c) {
  v("image_size", c.image_size);
  v("patch_size", c.patch_size);
  v("background_raw", c.background_raw);
  v("categories", c.categories);
  v("palette", c.palette);
  v("patterns", c.patterns);
  v("accent_scale", c.accent_scale);
  v("stripe_period_min", c.stripe_period_min);
  v("stripe_period_max", c.stripe_period_max);
  v("check_size_min", c.check_size_min);
  v("check_size_max", c.check_size_max);
  v("dot_spacing_min", c.dot_spacing_min);
  v("dot_spacing_max", c.dot_spacing_max);
  v("seed", c.seed);
}

template <typename V, typename C>
void visit_encoder(V& v, C& c) {
  v("vocab_size", c.vocab_size);
  v("text_length", c.text_length);
  v("width", c.width);
  v("heads", c.heads);
  v("text_layers", c.text_layers);
  v("style_layers", c.style_layers);
  v("mlp_hidden", c.mlp_hidden);
  v("patch_size", c.patch_size);
  v("patch_stride", c.patch_stride);
}

template <typename V, typename C>
void visit_denoiser(V& v, C& c) {
  v("image_size", c.image_size);
  v("channels", c.channels);
  v("base_width", c.base_width);
  v("multipliers", c.multipliers);
  v("res_blocks", c.res_blocks);
  v("groups", c.groups);
  v("sinusoid_width", c.sinusoid_width);
  v("time_width", c.time_width);
  v("cond_width", c.cond_width);
  v("heads", c.heads);
  v("attention_levels", c.attention_levels);
  v("learn_variance", c.learn_variance);
}

template <typename V, typename C>
void visit_stage(V& v, C& c) {
  v("lr", c.lr);
  v("batch", c.batch);
  v("iterations", c.iterations);
}

template <typename V, typename C>
void visit_run(V& v, C& c) {
  v("seed", c.seed);
  v("output_dir", c.output_dir);
  v.section("schedule", [&](auto& s) {
    s("kind", c.schedule.kind);
    s("steps", c.schedule.steps);
    s("beta_start", c.schedule.beta_start);
    s("beta_end", c.schedule.beta_end);
  });
  v.section("encoder", [&](auto& s) { visit_encoder(s, c.model.encoder); });
  v.section("denoiser", [&](auto& s) { visit_denoiser(s, c.model.denoiser); });
  v.section("guidance", [&](auto& s) {
    s("s_style", c.guidance.s_style);
    s("s_text", c.guidance.s_text);
    s("order", c.guidance.order);
  });
  v.section("sampler", [&](auto& s) {
    s("kind", c.sampler.kind);
    s("steps", c.sampler.steps);
    s("eta", c.sampler.eta);
    s("clamp_x0", c.sampler.clamp_x0);
  });
  v.section("data", [&](auto& s) {
    s.section("generator", [&](auto& g) { visit_generator(g, c.data.generator); });
    s("n_train", c.data.n_train);
    s("n_test", c.data.n_test);
    s("mask_targets", c.data.mask_targets);
  });
  v.section("train", [&](auto& s) {
    s.section("backbone", [&](auto& g) { visit_stage(g, c.train.backbone); });
    s.section("style", [&](auto& g) { visit_stage(g, c.train.style); });
    s("p_text_backbone", c.train.p_text_backbone);
    s.section("dropout", [&](auto& g) {
      g("p_text", c.train.dropout.p_text);
      g("p_style", c.train.dropout.p_style);
    });
    s.section("loss", [&](auto& g) {
      g("lambda_simple", c.train.loss.lambda_simple);
      g("lambda_perc", c.train.loss.lambda_perc);
    });
    s.section("adamw", [&](auto& g) {
      g("beta1", c.train.adamw.beta1);
      g("beta2", c.train.adamw.beta2);
      g("eps", c.train.adamw.eps);
      g("weight_decay", c.train.adamw.weight_decay);
    });
    s("smoothing_window", c.train.smoothing_window);
  });
  v.section("eval", [&](auto& s) {
    s.section("extractor", [&](auto& g) {
      g("image_size", c.eval.extractor.image_size);
      g("in_channels", c.eval.extractor.in_channels);
      g("channels", c.eval.extractor.channels);
      g("seed", c.eval.extractor.seed);
    });
    s.section("scorer", [&](auto& g) {
      g("width", c.eval.scorer.width);
      g("iterations", c.eval.scorer.iterations);
      g("batch", c.eval.scorer.batch);
      g("lr", c.eval.scorer.lr);
      g("temperature", c.eval.scorer.temperature);
      g("n_pairs", c.eval.scorer.n_pairs);
    });
    s("n_samples", c.eval.n_samples);
    s("ablation_samples", c.eval.ablation_samples);
    s("ablation_steps", c.eval.ablation_steps);
    s("sweep_weights", c.eval.sweep_weights);
  });
}

}  // namespace

void DataConfig::validate() const {
  generator.validate();
  if (n_train < 1) throw ConfigError("data.n_train must be >= 1");
  if (n_test < 0) throw ConfigError("data.n_test must be >= 0");
}

void AdamWConfig::validate() const {
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("adamw betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("adamw eps must be > 0");
  if (!(weight_decay >= 0)) throw ConfigError("adamw weight_decay must be >= 0");
}

void StageConfig::validate(const char* stage) const {
  const std::string s = stage;
  if (!(lr > 0)) throw ConfigError("train." + s + ".lr must be > 0");
  if (batch < 1) throw ConfigError("train." + s + ".batch must be >= 1");
  if (iterations < 0) throw ConfigError("train." + s + ".iterations must be >= 0");
}

TrainConfig TrainConfig::paper_profile() {
  TrainConfig cfg;
  cfg.backbone.iterations = 235000;
  cfg.style.iterations = 50000;
  return cfg;
}

void TrainConfig::validate() const {
  backbone.validate("backbone");
  style.validate("style");
  if (!(p_text_backbone >= 0 && p_text_backbone <= 1)) throw ConfigError("train.p_text_backbone must lie in [0, 1]");
  dropout.validate();
  loss.validate();
  adamw.validate();
  if (smoothing_window < 1) throw ConfigError("train.smoothing_window must be >= 1");
}

void ScorerConfig::validate() const {
  if (width < 1 || iterations < 1 || batch < 2 || n_pairs < batch) {
    throw ConfigError("eval.scorer needs width >= 1, iterations >= 1, 2 <= batch <= n_pairs");
  }
  if (!(lr > 0) || !(temperature > 0)) throw ConfigError("eval.scorer lr and temperature must be > 0");
}

void EvalConfig::validate() const {
  if (extractor.channels.empty() || extractor.image_size < 1) throw ConfigError("eval.extractor is empty");
  if (extractor.image_size >> (extractor.channels.size() - 1) < 1) {
    throw ConfigError("eval.extractor has more pooling stages than the image allows");
  }
  scorer.validate();
  if (n_samples < 1 || ablation_samples < 1 || ablation_steps < 1) {
    throw ConfigError("eval sample and step counts must be >= 1");
  }
  if (sweep_weights.empty()) throw ConfigError("eval.sweep_weights must be non-empty");
}

ModelConfig RunConfig::default_model() {
  ModelConfig m;
  m.encoder.vocab_size = static_cast<int>(vocabulary_words(GeneratorConfig{}).size()) + 2;
  m.denoiser.learn_variance = true;
  return m;
}

void RunConfig::validate() const {
  const NoiseSchedule sched = make_schedule(schedule);
  model.validate();
  guidance.validate();
  sampler.validate(sched);
  data.validate();
  train.validate();
  eval.validate();
  const int vocab = static_cast<int>(vocabulary_words(data.generator).size()) + 2;
  if (model.encoder.vocab_size != vocab) {
    throw ConfigError("encoder.vocab_size is " + std::to_string(model.encoder.vocab_size) +
                      " but the data vocabulary has " + std::to_string(vocab) + " entries");
  }
  if (model.denoiser.image_size != data.generator.image_size || eval.extractor.image_size != data.generator.image_size) {
    throw ConfigError("denoiser, extractor and generator image sizes must agree");
  }
  if (model.encoder.patch_size != data.generator.patch_size) {
    throw ConfigError("encoder.patch_size must equal data.generator.patch_size");
  }
  if (model.denoiser.channels != 3 || eval.extractor.in_channels != 3) throw ConfigError("images are RGB: channels must be 3");
  if (output_dir.empty()) throw ConfigError("output_dir must be non-empty");
}

json config_to_json(const GeneratorConfig& cfg) {
  Writer w;
  visit_generator(w, cfg);
  return w.j;
}

GeneratorConfig generator_config_from_json(const json& j) {
  GeneratorConfig cfg;
  Reader r(j, "");
  visit_generator(r, cfg);
  r.finish();
  return cfg;
}

json config_to_json(const ModelConfig& cfg) {
  Writer w;
  w.section("encoder", [&](auto& s) { visit_encoder(s, cfg.encoder); });
  w.section("denoiser", [&](auto& s) { visit_denoiser(s, cfg.denoiser); });
  return w.j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  Reader r(j, "");
  r.section("encoder", [&](auto& s) { visit_encoder(s, cfg.encoder); });
  r.section("denoiser", [&](auto& s) { visit_denoiser(s, cfg.denoiser); });
  r.finish();
  return cfg;
}

json config_to_json(const RunConfig& cfg) {
  Writer w;
  visit_run(w, cfg);
  return w.j;
}

RunConfig run_config_from_json(const json& j, RunConfig base) {
  Reader r(j, "");
  visit_run(r, base);
  r.finish();
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << config_to_json(cfg).dump(2) << '\n';
}

std::string config_hash(const json& j) {
  json key = j;
  if (key.is_object()) key.erase("output_dir");
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : key.dump()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace sgdiff
