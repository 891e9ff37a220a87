#include "sgdiff/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sgdiff {
namespace {

constexpr char kMagic[4] = {'S', 'G', 'C', 'K'};
constexpr char kTrailer[4] = {'E', 'N', 'D', '!'};
constexpr std::uint64_t kBackboneTag = 101;
constexpr std::uint64_t kStyleTag = 102;

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    out_.append(reinterpret_cast<const char*>(bytes), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    unsigned char b[sizeof(T)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T value;
    std::memcpy(&value, b, sizeof(T));
    return value;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (n > end_ - pos_) throw CheckpointError(std::string("corrupt checkpoint: truncated while reading ") + what);
  }
  void skip(std::size_t n) {
    need(n, "body");
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

Vocabulary data_vocabulary(const RunConfig& cfg, const Dataset& data) {
  Vocabulary vocab(vocabulary_words(data.config));
  if (vocab.size() != cfg.model.encoder.vocab_size) {
    throw ConfigError("dataset vocabulary has " + std::to_string(vocab.size()) + " entries but encoder.vocab_size is " +
                      std::to_string(cfg.model.encoder.vocab_size));
  }
  if (data.config.image_size != cfg.model.denoiser.image_size || data.config.patch_size != cfg.model.encoder.patch_size) {
    throw ConfigError("dataset image or patch size does not match the model config");
  }
  return vocab;
}

struct Batch {
  Tensor<float> x0, x_t, noise, patches;
  std::vector<int> t, ids;
};

void copy_into(Tensor<float>& dst, Index row, const Tensor<float>& src) {
  dst.vec().segment(row * src.size(), src.size()) = src.vec();
}

Tensor<float> target_image(const RunConfig& cfg, const SynthExample& ex) {
  return cfg.data.mask_targets ? mask_background(ex.image, ex.mask) : normalize_image(ex.image);
}

// Row i: its x0, t, noise, text ids and (optionally) style patch. Draw order
// per row is fixed: t, noise, then whatever `conditions` consumes.
template <typename Conditions>
Batch assemble(const RunConfig& cfg, const NoiseSchedule& sched, const std::vector<const SynthExample*>& rows,
               CounterRng& rng, bool with_patches, Conditions&& conditions) {
  const int S = cfg.model.denoiser.image_size, P = cfg.model.encoder.patch_size, L = cfg.model.encoder.text_length;
  const Index n = static_cast<Index>(rows.size());
  Batch b;
  b.x0 = Tensor<float>({n, 3, S, S});
  b.noise = Tensor<float>({n, 3, S, S});
  if (with_patches) b.patches = Tensor<float>({n, 3, P, P});
  for (Index i = 0; i < n; ++i) {
    const SynthExample& ex = *rows[static_cast<std::size_t>(i)];
    copy_into(b.x0, i, target_image(cfg, ex));
    b.t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps()))));
    copy_into(b.noise, i, Tensor<float>::randn({3, S, S}, rng));
    ConditionPair pair = conditions(ex, rng);
    if (static_cast<int>(pair.text_ids.size()) != L) throw DimensionError("text ids do not match text_length");
    b.ids.insert(b.ids.end(), pair.text_ids.begin(), pair.text_ids.end());
    if (with_patches) copy_into(b.patches, i, pair.style_patch);
  }
  b.x_t = Tensor<float>(b.x0.shape());
  const Index per = 3 * S * S;
  for (Index i = 0; i < n; ++i) {
    const double ab = sched.alpha_bar(b.t[static_cast<std::size_t>(i)]);
    b.x_t.vec().segment(i * per, per) = (std::sqrt(ab) * b.x0.vec().segment(i * per, per).cast<double>() +
                                         std::sqrt(1 - ab) * b.noise.vec().segment(i * per, per).cast<double>())
                                            .cast<float>();
  }
  return b;
}

LossTerms<float> batch_loss(BoundParams<float>& p, const RunConfig& cfg, Conditioning mode, const Batch& b,
                            const NoiseSchedule& sched, const FeatureExtractor<float>& ext) {
  const Tensor<float>* patches = mode == Conditioning::TextStyle ? &b.patches : nullptr;
  DenoiserOutput<float> out =
      model_forward(p, cfg.model, mode, p.tape().constant(b.x_t), b.t, b.ids, patches, sched);
  return total_loss(b.x0, b.x_t, b.noise, b.t, out, cfg.train.loss, sched, ext);
}

TrainLogRow log_row(int step, const LossTerms<float>& terms) {
  return TrainLogRow{step, terms.l_simple, terms.l_vlb, terms.l_perc, static_cast<double>(terms.total.value().item())};
}

std::vector<const SynthExample*> draw_rows(const Dataset& data, int batch, CounterRng& rng) {
  std::vector<const SynthExample*> rows;
  for (int i = 0; i < batch; ++i) rows.push_back(&data.train[rng.below(data.train.size())]);
  return rows;
}

ConditionPair stored_pair(const RunConfig& cfg, const Vocabulary& vocab, const SynthExample& ex) {
  return make_condition_pair(tokenize(describe_text(ex.attributes), vocab, cfg.model.encoder.text_length),
                             mask_background(ex.style.patch, ex.style.mask));
}

}  // namespace

template <typename S>
void adamw_step(ParamStore<S>& params, const std::map<std::string, Tensor<S>>& grads, AdamState<S>& state, double lr,
                const AdamWConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const Tensor<S>& value = params.at(name);
    if (g.shape() != value.shape()) {
      throw DimensionError("gradient of " + name + " has shape " + shape_string(g.shape()) + ", parameter " +
                           shape_string(value.shape()));
    }
    if (!g.vec().allFinite()) throw NumericError("non-finite gradient for parameter " + name);
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads) {
    Tensor<S>& w = params.at(name);
    auto [mit, fresh_m] = state.m.try_emplace(name, Tensor<S>(w.shape()));
    auto [vit, fresh_v] = state.v.try_emplace(name, Tensor<S>(w.shape()));
    auto& m = mit->second.vec();
    auto& v = vit->second.vec();
    m = S(cfg.beta1) * m + S(1 - cfg.beta1) * g.vec();
    v = S(cfg.beta2) * v + S(1 - cfg.beta2) * g.vec().cwiseProduct(g.vec());
    if (cfg.weight_decay != 0.0) w.vec() *= S(1 - lr * cfg.weight_decay);
    w.vec().array() -= S(lr) * (m.array() / S(c1)) / ((v.array() / S(c2)).sqrt() + S(cfg.eps));
  }
}

template void adamw_step<float>(ParamStore<float>&, const std::map<std::string, Tensor<float>>&, AdamState<float>&,
                                double, const AdamWConfig&);
template void adamw_step<double>(ParamStore<double>&, const std::map<std::string, Tensor<double>>&,
                                 AdamState<double>&, double, const AdamWConfig&);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(kMagic, 4);
  w.put<std::uint32_t>(Checkpoint::kVersion);
  w.put_string(ckpt.stage);
  w.put_string(ckpt.config.dump());
  w.put<std::uint64_t>(ckpt.iteration);
  w.put<std::uint64_t>(ckpt.rng_key);
  w.put<std::uint64_t>(ckpt.rng_counter);
  const auto& blobs = ckpt.params.tensors();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(blobs.size()));
  for (const auto& [name, t] : blobs) {
    w.put_string(name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (int a = 0; a < t.rank(); ++a) w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dim(a)));
    for (Index i = 0; i < t.size(); ++i) w.put<float>(t[i]);
  }
  std::string bytes = w.bytes();
  ByteWriter tail;
  tail.put<std::uint64_t>(fnv1a(bytes));
  tail.raw(kTrailer, 4);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.write(tail.bytes().data(), static_cast<std::streamsize>(tail.bytes().size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError("corrupt checkpoint: " + path.string() + " is not a checkpoint file");
  }
  {
    ByteReader head(bytes, bytes.size());
    head.get<std::uint32_t>("magic");
    const auto version = head.get<std::uint32_t>("version");
    if (version != Checkpoint::kVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(Checkpoint::kVersion) + ")");
    }
  }
  if (bytes.size() < 20 || std::memcmp(bytes.data() + bytes.size() - 4, kTrailer, 4) != 0) {
    throw CheckpointError("corrupt checkpoint: " + path.string() + " is truncated");
  }
  const std::size_t body = bytes.size() - 12;
  ByteReader sum(bytes, bytes.size());
  sum.skip(body);
  if (sum.get<std::uint64_t>("checksum") != fnv1a(bytes.substr(0, body))) {
    throw CheckpointError("corrupt checkpoint: checksum mismatch in " + path.string());
  }

  ByteReader r(bytes, body);
  r.get<std::uint32_t>("magic");
  r.get<std::uint32_t>("version");
  Checkpoint ckpt;
  ckpt.stage = r.get_string("stage");
  try {
    ckpt.config = nlohmann::json::parse(r.get_string("config"));
  } catch (const nlohmann::json::parse_error&) {
    throw CheckpointError("corrupt checkpoint: config echo is not JSON");
  }
  ckpt.iteration = r.get<std::uint64_t>("iteration");
  ckpt.rng_key = r.get<std::uint64_t>("rng key");
  ckpt.rng_counter = r.get<std::uint64_t>("rng counter");
  const auto count = r.get<std::uint32_t>("blob count");
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::string name = r.get_string("blob name");
    const auto rank = r.get<std::uint32_t>("blob rank");
    if (rank > 8) throw CheckpointError("corrupt checkpoint: blob " + name + " has rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(r.get<std::uint32_t>("blob shape"));
    r.need(static_cast<std::size_t>(shape_size(shape)) * 4, "blob data");
    Tensor<float> t(shape);
    for (Index i = 0; i < t.size(); ++i) t[i] = r.get<float>("blob data");
    if (ckpt.params.contains(name)) throw CheckpointError("corrupt checkpoint: duplicate blob " + name);
    ckpt.params.add(name, std::move(t));
  }
  if (r.pos() != body) throw CheckpointError("corrupt checkpoint: trailing bytes after the last blob");
  return ckpt;
}

void load_params(const Checkpoint& ckpt, ParamStore<float>& target, std::string_view prefix) {
  for (const auto& name : target.names(prefix)) {
    if (!ckpt.params.contains(name)) throw CheckpointError("checkpoint has no blob " + name);
    const Tensor<float>& src = ckpt.params.at(name);
    Tensor<float>& dst = target.at(name);
    if (src.shape() != dst.shape()) {
      throw CheckpointError("shape mismatch for blob " + name + ": checkpoint " + shape_string(src.shape()) +
                            ", model " + shape_string(dst.shape()));
    }
    dst = src;
  }
}

Checkpoint initial_checkpoint(const RunConfig& cfg) {
  cfg.validate();
  Checkpoint ckpt;
  ckpt.config = config_to_json(cfg);
  ckpt.config.erase("output_dir");
  ckpt.rng_key = cfg.seed;
  init_backbone(ckpt.params, cfg.model, cfg.seed);
  return ckpt;
}

TrainResult train_backbone(const RunConfig& cfg, const Dataset& data, const TrainObserver& observer) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training set is empty");
  const Vocabulary vocab = data_vocabulary(cfg, data);
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const FeatureExtractor<float> ext(cfg.eval.extractor);
  const NullConditions nulls = null_conditions(cfg.model.encoder);
  const StageConfig& stage = cfg.train.backbone;
  const TrainablePredicate trainable = trainable_prefixes({"text.", "unet."});

  TrainResult result;
  result.checkpoint = initial_checkpoint(cfg);
  Checkpoint& ckpt = result.checkpoint;
  ckpt.stage = "backbone";
  AdamState<float> opt;
  const CounterRng root = CounterRng(cfg.seed).fork(kBackboneTag);
  for (int step = 1; step <= stage.iterations; ++step) {
    CounterRng rng = root.fork(static_cast<std::uint64_t>(step));
    const auto rows = draw_rows(data, stage.batch, rng);
    const Batch b = assemble(cfg, sched, rows, rng, false, [&](const SynthExample& ex, CounterRng& r) {
      ConditionPair pair = stored_pair(cfg, vocab, ex);
      if (r.uniform() >= cfg.train.p_text_backbone) pair = with_text_null(pair, nulls);
      return pair;
    });
    Tape<float> tape;
    BoundParams<float> p(tape, ckpt.params, trainable);
    const LossTerms<float> terms = batch_loss(p, cfg, Conditioning::Text, b, sched, ext);
    const TrainLogRow row = log_row(step, terms);
    if (!std::isfinite(row.total)) throw NumericError("backbone loss is not finite at step " + std::to_string(step));
    adamw_step(ckpt.params, p.gradients(terms.total), opt, stage.lr, cfg.train.adamw);
    result.log.push_back(row);
    if (observer) observer(row);
  }
  ckpt.iteration = static_cast<std::uint64_t>(stage.iterations);
  return result;
}

TrainResult train_style_stage(const RunConfig& cfg, const Dataset& data, const Checkpoint& backbone,
                              const TrainObserver& observer) {
  cfg.validate();
  if (data.train.empty()) throw ConfigError("training set is empty");
  if (backbone.stage != "backbone") {
    throw CheckpointError("style stage needs a backbone checkpoint, got stage '" + backbone.stage + "'");
  }
  const Vocabulary vocab = data_vocabulary(cfg, data);
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const FeatureExtractor<float> ext(cfg.eval.extractor);
  const NullConditions nulls = null_conditions(cfg.model.encoder);
  const StageConfig& stage = cfg.train.style;
  const int P = cfg.model.encoder.patch_size;

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  ckpt.stage = "style";
  ckpt.config = config_to_json(cfg);
  ckpt.config.erase("output_dir");
  ckpt.rng_key = cfg.seed;
  init_backbone(ckpt.params, cfg.model, cfg.seed);
  load_params(backbone, ckpt.params);
  for (const auto& name : backbone.params.names()) {
    if (!ckpt.params.contains(name)) throw CheckpointError("checkpoint blob " + name + " is not part of this model");
  }
  init_style_branch(ckpt.params, cfg.model, cfg.seed);

  const auto is_frozen = [](const std::string& name) { return name.rfind("text.", 0) == 0 || name.rfind("unet.", 0) == 0; };
  const TrainablePredicate trainable = trainable_prefixes({"style.", "sca."});
  AdamState<float> opt;
  const CounterRng root = CounterRng(cfg.seed).fork(kStyleTag);
  for (int step = 1; step <= stage.iterations; ++step) {
    CounterRng rng = root.fork(static_cast<std::uint64_t>(step));
    const auto rows = draw_rows(data, stage.batch, rng);
    const Batch b = assemble(cfg, sched, rows, rng, true, [&](const SynthExample& ex, CounterRng& r) {
      const StyleCrop crop = style_crop(ex.image, ex.mask, P, r);
      ConditionPair pair = make_condition_pair(
          tokenize(describe_text(ex.attributes), vocab, cfg.model.encoder.text_length), mask_background(crop.patch, crop.mask));
      return apply_condition_dropout(pair, cfg.train.dropout, r, nulls);
    });
    Tape<float> tape;
    BoundParams<float> p(tape, ckpt.params, trainable);
    const LossTerms<float> terms = batch_loss(p, cfg, Conditioning::TextStyle, b, sched, ext);
    for (const auto& [name, var] : p.bound()) {
      if (is_frozen(name) && var.requires_grad()) throw std::logic_error("frozen parameter " + name + " is on the tape as a variable");
    }
    const TrainLogRow row = log_row(step, terms);
    if (!std::isfinite(row.total)) throw NumericError("style loss is not finite at step " + std::to_string(step));
    const auto grads = p.gradients(terms.total);
    for (const auto& [name, g] : grads) {
      if (is_frozen(name)) throw std::logic_error("frozen parameter " + name + " received a gradient");
    }
    adamw_step(ckpt.params, grads, opt, stage.lr, cfg.train.adamw);
    result.log.push_back(row);
    if (observer) observer(row);
  }
  for (const auto& [name, t] : backbone.params.tensors()) {
    const Tensor<float>& now = ckpt.params.at(name);
    if (std::memcmp(now.data(), t.data(), static_cast<std::size_t>(t.size()) * sizeof(float)) != 0) {
      throw std::logic_error("frozen parameter " + name + " changed during the style stage");
    }
  }
  ckpt.iteration = static_cast<std::uint64_t>(stage.iterations);
  return result;
}

BatchLoss evaluate_loss(const RunConfig& cfg, const ParamStore<float>& params, Conditioning mode,
                        const std::vector<SynthExample>& examples, std::uint64_t seed, bool null_text,
                        bool null_style) {
  if (examples.empty()) throw ConfigError("evaluate_loss needs at least one example");
  Vocabulary vocab(vocabulary_words(cfg.data.generator));
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  const FeatureExtractor<float> ext(cfg.eval.extractor);
  const NullConditions nulls = null_conditions(cfg.model.encoder);
  std::vector<const SynthExample*> rows;
  for (const auto& ex : examples) rows.push_back(&ex);
  CounterRng rng(seed);
  const Batch b = assemble(cfg, sched, rows, rng, mode == Conditioning::TextStyle, [&](const SynthExample& ex, CounterRng&) {
    ConditionPair pair = stored_pair(cfg, vocab, ex);
    if (null_text) pair = with_text_null(pair, nulls);
    if (null_style) pair = with_style_null(pair, nulls);
    return pair;
  });
  BatchLoss out;
  const Index chunk = 16;
  for (Index start = 0; start < static_cast<Index>(rows.size()); start += chunk) {
    const Index n = std::min<Index>(chunk, static_cast<Index>(rows.size()) - start);
    Batch part;
    const Index per_img = b.x0.size() / b.x0.dim(0);
    const Index L = cfg.model.encoder.text_length;
    Shape s = b.x0.shape();
    s[0] = n;
    part.x0 = Tensor<float>(s);
    part.x_t = Tensor<float>(s);
    part.noise = Tensor<float>(s);
    part.x0.vec() = b.x0.vec().segment(start * per_img, n * per_img);
    part.x_t.vec() = b.x_t.vec().segment(start * per_img, n * per_img);
    part.noise.vec() = b.noise.vec().segment(start * per_img, n * per_img);
    part.t.assign(b.t.begin() + start, b.t.begin() + start + n);
    part.ids.assign(b.ids.begin() + start * L, b.ids.begin() + (start + n) * L);
    if (mode == Conditioning::TextStyle) {
      Shape ps = b.patches.shape();
      const Index per_patch = b.patches.size() / ps[0];
      ps[0] = n;
      part.patches = Tensor<float>(ps);
      part.patches.vec() = b.patches.vec().segment(start * per_patch, n * per_patch);
    }
    Tape<float> tape;
    BoundParams<float> p(tape, params);
    const LossTerms<float> terms = batch_loss(p, cfg, mode, part, sched, ext);
    const double w = static_cast<double>(n) / static_cast<double>(rows.size());
    out.l_simple += w * terms.l_simple;
    out.l_vlb += w * terms.l_vlb;
    out.l_perc += w * terms.l_perc;
    out.total += w * terms.total.value().item();
  }
  return out;
}

double smoothed_total(const std::vector<TrainLogRow>& log, std::size_t index, int window) {
  if (index >= log.size()) throw std::out_of_range("smoothed_total: index past the end of the log");
  const std::size_t first = index + 1 >= static_cast<std::size_t>(window) ? index + 1 - static_cast<std::size_t>(window) : 0;
  double sum = 0;
  for (std::size_t i = first; i <= index; ++i) sum += log[i].total;
  return sum / static_cast<double>(index - first + 1);
}

void write_loss_csv(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,l_simple,l_vlb,l_perc,total\n";
  out.precision(9);
  for (const auto& r : log) out << r.step << ',' << r.l_simple << ',' << r.l_vlb << ',' << r.l_perc << ',' << r.total << '\n';
}

}  // namespace sgdiff
