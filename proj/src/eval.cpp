#include "sgdiff/eval.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <stdexcept>

#include "sgdiff/imageio.hpp"
#include "sgdiff/layers.hpp"
#include "sgdiff/training.hpp"

namespace sgdiff {
namespace {

constexpr std::uint64_t kScorerTag = 301;
constexpr std::uint64_t kAblationTag = 302;
constexpr double kFidRegularizer = 1e-6;

void emit(const WarningSink& warn, const std::string& msg) {
  if (warn) warn(msg);
  else std::cerr << "warning: " << msg << '\n';
}

template <typename S>
Matrix<S> psd_sqrt(const Matrix<S>& m) {
  Eigen::SelfAdjointEigenSolver<Matrix<S>> es(m);
  const ColVector<S> root = es.eigenvalues().cwiseMax(S(0)).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

template <typename S>
Matrix<S> covariance(const Matrix<S>& x, const ColVector<S>& mu) {
  const Matrix<S> centered = x.rowwise() - mu.transpose();
  return (centered.transpose() * centered) / S(x.rows() - 1);
}

Tensor<float> rows_of(const Tensor<float>& t, Index start, Index n) {
  Shape s = t.shape();
  const Index per = t.size() / s[0];
  s[0] = n;
  Tensor<float> out(s);
  out.vec() = t.vec().segment(start * per, n * per);
  return out;
}

Tensor<float> cycle_stack(const std::vector<Tensor<float>>& parts) {
  Shape s = parts.front().shape();
  s.insert(s.begin(), static_cast<Index>(parts.size()));
  Tensor<float> out(s);
  const Index per = parts.front().size();
  for (std::size_t i = 0; i < parts.size(); ++i) out.vec().segment(static_cast<Index>(i) * per, per) = parts[i].vec();
  return out;
}

Tensor<float> to_raw(const Tensor<float>& normalized_image) {
  Tensor<float> raw(normalized_image.shape());
  for (Index i = 0; i < raw.size(); ++i) raw[i] = std::clamp(denormalize_pixel(normalized_image[i]), 0.0f, 255.0f);
  return raw;
}

}  // namespace

template <typename S>
double frechet_distance(const ColVector<S>& mu1, const Matrix<S>& s1, const ColVector<S>& mu2, const Matrix<S>& s2) {
  if (mu1.size() != mu2.size() || s1.rows() != mu1.size() || s2.rows() != mu2.size() || s1.cols() != s1.rows() ||
      s2.cols() != s2.rows()) {
    throw DimensionError("frechet_distance: mean and covariance sizes disagree");
  }
  const Matrix<S> r1 = psd_sqrt<S>(s1);
  const Matrix<S> inner = r1 * s2 * r1;
  Eigen::SelfAdjointEigenSolver<Matrix<S>> es((inner + inner.transpose()) / S(2), Eigen::EigenvaluesOnly);
  const double cross = es.eigenvalues().cwiseMax(S(0)).cwiseSqrt().sum();
  return static_cast<double>((mu1 - mu2).squaredNorm() + s1.trace() + s2.trace()) - 2.0 * cross;
}

template <typename S>
double fid_like(const Matrix<S>& gen, const Matrix<S>& ref, const WarningSink& warn) {
  if (gen.cols() != ref.cols()) throw DimensionError("fid_like: feature dimensions differ");
  const Index d = gen.cols();
  if (gen.rows() < 2 * d || ref.rows() < 2 * d) {
    throw ConfigError("fid_like needs at least " + std::to_string(2 * d) + " samples per set, got " +
                      std::to_string(gen.rows()) + " and " + std::to_string(ref.rows()));
  }
  auto fit = [&](const Matrix<S>& x, const char* which) {
    const ColVector<S> mu = x.colwise().mean().transpose();
    Matrix<S> cov = covariance<S>(x, mu);
    Eigen::SelfAdjointEigenSolver<Matrix<S>> es(cov, Eigen::EigenvaluesOnly);
    const S hi = es.eigenvalues().maxCoeff(), lo = es.eigenvalues().minCoeff();
    if (!(lo > S(1e-12) * std::max(hi, S(1e-300)))) {
      emit(warn, std::string("fid_like: ") + which + " covariance is degenerate; adding 1e-06 I");
      cov += Matrix<S>::Identity(d, d) * S(kFidRegularizer);
    }
    return std::pair{mu, cov};
  };
  const auto [m1, c1] = fit(gen, "generated");
  const auto [m2, c2] = fit(ref, "reference");
  return std::max(0.0, frechet_distance<S>(m1, c1, m2, c2));
}

template double frechet_distance<double>(const ColVector<double>&, const Matrix<double>&, const ColVector<double>&,
                                         const Matrix<double>&);
template double frechet_distance<float>(const ColVector<float>&, const Matrix<float>&, const ColVector<float>&,
                                        const Matrix<float>&);
template double fid_like<double>(const Matrix<double>&, const Matrix<double>&, const WarningSink&);
template double fid_like<float>(const Matrix<float>&, const Matrix<float>&, const WarningSink&);

double lpips_like(const Tensor<float>& gen, const Tensor<float>& ref, const FeatureExtractor<float>& extractor) {
  if (gen.shape() != ref.shape()) {
    throw DimensionError("lpips_like: " + shape_string(gen.shape()) + " vs " + shape_string(ref.shape()));
  }
  const Index n = gen.dim(0);
  if (n == 0) throw DimensionError("lpips_like: empty sets");
  double total = 0;
  for (Index start = 0; start < n; start += 32) {
    const Index k = std::min<Index>(32, n - start);
    Tape<float> tape;
    const Var<float> d = l_perceptual(tape.constant(rows_of(gen, start, k)), rows_of(ref, start, k), extractor);
    total += static_cast<double>(d.value().item()) * static_cast<double>(k);
  }
  return total / static_cast<double>(n);
}

Matrix<double> pooled_features(const Tensor<float>& images, const FeatureExtractor<float>& extractor) {
  const Index n = images.dim(0);
  Matrix<double> out;
  for (Index start = 0; start < n; start += 64) {
    const Index k = std::min<Index>(64, n - start);
    const Tensor<float> f = extractor.pooled(rows_of(images, start, k));
    if (out.size() == 0) out.resize(n, f.dim(1));
    for (Index i = 0; i < k; ++i)
      for (Index j = 0; j < f.dim(1); ++j) out(start + i, j) = f[i * f.dim(1) + j];
  }
  return out;
}

double cosine_score(const Tensor<float>& a, const Tensor<float>& b) {
  if (a.shape() != b.shape() || a.rank() != 2 || a.dim(0) == 0) throw DimensionError("cosine_score: shapes differ");
  double sum = 0;
  for (Index i = 0; i < a.dim(0); ++i) {
    const auto ra = a.vec().segment(i * a.dim(1), a.dim(1)).cast<double>();
    const auto rb = b.vec().segment(i * b.dim(1), b.dim(1)).cast<double>();
    const double denom = ra.norm() * rb.norm();
    sum += denom > 0 ? ra.dot(rb) / denom : 0.0;
  }
  return 100.0 * sum / static_cast<double>(a.dim(0));
}

CsScorer::CsScorer(const ScorerConfig& cfg, const ExtractorConfig& extractor, std::vector<std::string> words)
    : cfg_(cfg), extractor_(extractor), vocab_(std::move(words)) {
  cfg_.validate();
}

Tensor<float> CsScorer::image_inputs(const Tensor<float>& images) const {
  const Index n = images.dim(0), S = images.dim(2);
  const Index cells = 4, block = std::max<Index>(1, S / cells);
  const int pooled = extractor_.config().channels.back();
  const Index F = pooled + 3 * cells * cells;
  Tensor<float> out({n, F});
  const Matrix<double> feats = pooled_features(images, extractor_);
  for (Index i = 0; i < n; ++i) {
    for (int j = 0; j < pooled; ++j) out[i * F + j] = static_cast<float>(feats(i, j));
    for (Index c = 0; c < 3; ++c)
      for (Index by = 0; by < cells; ++by)
        for (Index bx = 0; bx < cells; ++bx) {
          double s = 0;
          for (Index y = by * block; y < (by + 1) * block; ++y)
            for (Index x = bx * block; x < (bx + 1) * block; ++x) s += images[((i * 3 + c) * S + y) * S + x];
          out[i * F + pooled + (c * cells + by) * cells + bx] = static_cast<float>(s / static_cast<double>(block * block));
        }
  }
  return out;
}

Tensor<float> CsScorer::text_counts(const std::vector<std::vector<std::string>>& texts) const {
  const Index n = static_cast<Index>(texts.size()), V = vocab_.size();
  Tensor<float> out({n, V});
  for (Index i = 0; i < n; ++i) {
    for (const auto& w : texts[static_cast<std::size_t>(i)]) {
      if (auto id = vocab_.id(w)) out[i * V + *id] += 1.0f;
    }
  }
  return out;
}

Var<float> CsScorer::image_tower(BoundParams<float>& p, const Tensor<float>& inputs) const {
  Var<float> h = layer_norm_layer(p, "scorer.img_ln", p.tape().constant(inputs));
  h = relu(dense(p, "scorer.img1", h));
  return normalize_rows(dense(p, "scorer.img2", h));
}

Var<float> CsScorer::text_tower(BoundParams<float>& p, const Tensor<float>& counts) const {
  return normalize_rows(matmul(p.tape().constant(counts), p("scorer.txt_embed")));
}

std::vector<double> CsScorer::train(const std::vector<SynthExample>& pairs, std::uint64_t seed) {
  if (pairs.size() < static_cast<std::size_t>(cfg_.batch)) throw ConfigError("scorer needs at least one batch of pairs");
  std::vector<Tensor<float>> images;
  std::vector<std::vector<std::string>> texts;
  for (const auto& ex : pairs) {
    images.push_back(normalize_image(ex.image));
    texts.push_back(ex.text);
  }
  const Tensor<float> inputs = image_inputs(cycle_stack(images));
  const Tensor<float> counts = text_counts(texts);
  const Index F = inputs.dim(1), V = counts.dim(1);

  CounterRng init = CounterRng(seed).fork(1);
  params_ = ParamStore<float>();
  init_norm(params_, "scorer.img_ln", F);
  init_linear(params_, "scorer.img1", F, 64, init);
  init_linear(params_, "scorer.img2", 64, cfg_.width, init);
  init_normal(params_, "scorer.txt_embed", {V, cfg_.width}, 1.0, init);

  AdamState<float> opt;
  AdamWConfig adam;
  std::vector<double> losses;
  const CounterRng root = CounterRng(seed).fork(2);
  std::vector<int> labels(static_cast<std::size_t>(cfg_.batch));
  for (int i = 0; i < cfg_.batch; ++i) labels[static_cast<std::size_t>(i)] = i;
  for (int step = 1; step <= cfg_.iterations; ++step) {
    CounterRng rng = root.fork(static_cast<std::uint64_t>(step));
    Tensor<float> bi({cfg_.batch, F}), bc({cfg_.batch, V});
    for (Index r = 0; r < cfg_.batch; ++r) {
      const Index k = static_cast<Index>(rng.below(pairs.size()));
      bi.vec().segment(r * F, F) = inputs.vec().segment(k * F, F);
      bc.vec().segment(r * V, V) = counts.vec().segment(k * V, V);
    }
    Tape<float> tape;
    BoundParams<float> p(tape, params_, [](const std::string&) { return true; });
    const Var<float> logits = scale(matmul(image_tower(p, bi), transpose_last2(text_tower(p, bc))),
                                    static_cast<float>(1.0 / cfg_.temperature));
    const Var<float> loss =
        scale(add(softmax_cross_entropy(logits, labels), softmax_cross_entropy(transpose_last2(logits), labels)), 0.5f);
    losses.push_back(loss.value().item());
    adamw_step(params_, p.gradients(loss), opt, cfg_.lr, adam);
  }
  trained_ = true;
  return losses;
}

Tensor<float> CsScorer::embed_images(const Tensor<float>& images) const {
  if (!trained_) throw std::logic_error("cs_like scorer is not trained");
  Tape<float> tape;
  BoundParams<float> p(tape, params_);
  return image_tower(p, image_inputs(images)).value();
}

Tensor<float> CsScorer::embed_texts(const std::vector<std::vector<std::string>>& texts) const {
  if (!trained_) throw std::logic_error("cs_like scorer is not trained");
  Tape<float> tape;
  BoundParams<float> p(tape, params_);
  return text_tower(p, text_counts(texts)).value();
}

CsScorer train_cs_scorer(const RunConfig& cfg) {
  CsScorer scorer(cfg.eval.scorer, cfg.eval.extractor, vocabulary_words(cfg.data.generator));
  std::vector<SynthExample> pairs;
  const std::uint64_t first = static_cast<std::uint64_t>(cfg.data.n_train) + static_cast<std::uint64_t>(cfg.data.n_test);
  for (int i = 0; i < cfg.eval.scorer.n_pairs; ++i) {
    pairs.push_back(synthesize_example(cfg.data.generator, first + static_cast<std::uint64_t>(i)));
  }
  scorer.train(pairs, CounterRng(cfg.seed).fork(kScorerTag).key());
  return scorer;
}

double cs_like(const Tensor<float>& images, const std::vector<std::vector<std::string>>& texts, const CsScorer& scorer) {
  if (!scorer.trained()) throw std::logic_error("cs_like scorer is not trained");
  if (images.dim(0) != static_cast<Index>(texts.size())) throw DimensionError("cs_like: image and text counts differ");
  return cosine_score(scorer.embed_images(images), scorer.embed_texts(texts));
}

double attribute_match(const Tensor<float>& images, const std::vector<GarmentAttributes>& targets,
                       const GeneratorConfig& gen) {
  if (images.dim(0) != static_cast<Index>(targets.size()) || targets.empty()) {
    throw DimensionError("attribute_match: image and target counts differ");
  }
  double sum = 0;
  for (Index i = 0; i < images.dim(0); ++i) {
    const GarmentAttributes seen = classify_garment(to_raw(rows_of(images, i, 1).reshaped({3, images.dim(2), images.dim(3)})), gen);
    sum += attribute_agreement(seen, targets[static_cast<std::size_t>(i)]);
  }
  return sum / static_cast<double>(targets.size());
}

Rgb mean_foreground_color(const Tensor<float>& img, float background_raw) {
  const Index plane = img.dim(1) * img.dim(2);
  std::array<double, 3> sum{}, all{};
  double count = 0;
  for (Index i = 0; i < plane; ++i) {
    float diff = 0;
    for (int c = 0; c < 3; ++c) {
      diff = std::max(diff, std::abs(img[c * plane + i] - background_raw));
      all[static_cast<std::size_t>(c)] += img[c * plane + i];
    }
    if (diff <= 30.0f) continue;
    count += 1;
    for (int c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += img[c * plane + i];
  }
  Rgb out;
  for (std::size_t c = 0; c < 3; ++c) {
    out[c] = static_cast<float>(count > 0 ? sum[c] / count : all[c] / static_cast<double>(plane));
  }
  return out;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw DimensionError("pearson needs two equal-length series of size >= 2");
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i] / n, my += y[i] / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxx > 0 && syy > 0 ? sxy / std::sqrt(sxx * syy) : 0.0;
}

EvalInputs eval_inputs(const RunConfig& cfg, const std::vector<SynthExample>& test, int n) {
  if (test.empty() || n < 1) throw ConfigError("evaluation needs a non-empty test split and n >= 1");
  const Vocabulary vocab(vocabulary_words(cfg.data.generator));
  EvalInputs in;
  std::vector<Tensor<float>> refs, crops, masks;
  for (int i = 0; i < n; ++i) {
    const SynthExample& ex = test[static_cast<std::size_t>(i) % test.size()];
    in.pairs.push_back(make_condition_pair(tokenize(describe_text(ex.attributes), vocab, cfg.model.encoder.text_length),
                                           mask_background(ex.style.patch, ex.style.mask)));
    in.targets.push_back(ex.attributes);
    in.texts.push_back(ex.text);
    refs.push_back(cfg.data.mask_targets ? mask_background(ex.image, ex.mask) : normalize_image(ex.image));
    crops.push_back(ex.style.patch);
    masks.push_back(ex.style.mask);
  }
  in.reference = cycle_stack(refs);
  in.style_raw = cycle_stack(crops);
  in.style_mask = cycle_stack(masks);
  return in;
}

Conditioning conditioning_for(const ParamStore<float>& params) {
  return params.count("sca.") > 0 ? Conditioning::TextStyle : Conditioning::Text;
}

Tensor<float> generate_images(const RunConfig& cfg, const ParamStore<float>& params,
                              const std::vector<ConditionPair>& pairs, const GuidanceWeights& weights,
                              const SamplerConfig& sampler, const CounterRng& rng, EvalCounter* counter) {
  const NoiseSchedule sched = make_schedule(cfg.schedule);
  sampler.validate(sched);
  weights.validate();
  const Conditioning mode = conditioning_for(params);
  const NullConditions nulls = null_conditions(cfg.model.encoder);
  std::vector<ConditionPair> rows = pairs;
  if (mode == Conditioning::Text) {
    for (auto& p : rows) p = with_style_null(p, nulls);
  }
  const EpsModel<float> model = make_eps_model(params, cfg.model, mode, sched);
  const int S = cfg.model.denoiser.image_size;
  return generate(model, rows, weights, sampler, sched, rng, {3, S, S}, nulls, counter);
}

MetricReport evaluate_images(const RunConfig& cfg, const Tensor<float>& generated, const EvalInputs& inputs,
                             const CsScorer& scorer, const FeatureExtractor<float>& extractor, const WarningSink& warn) {
  MetricReport r;
  r.n = static_cast<int>(generated.dim(0));
  r.fid_like = fid_like<double>(pooled_features(generated, extractor), pooled_features(inputs.reference, extractor), warn);
  r.lpips_like = lpips_like(generated, inputs.reference, extractor);
  r.cs_like = cs_like(generated, inputs.texts, scorer);
  r.attribute_match = attribute_match(generated, inputs.targets, cfg.data.generator);
  return r;
}

std::vector<AblationRow> ablation_grid(const RunConfig& cfg, const ParamStore<float>& params,
                                       const std::vector<SynthExample>& test, const CsScorer& scorer,
                                       const std::function<void(const AblationRow&)>& progress,
                                       const WarningSink& warn) {
  const EvalInputs inputs = eval_inputs(cfg, test, cfg.eval.ablation_samples);
  const FeatureExtractor<float> extractor(cfg.eval.extractor);
  SamplerConfig sampler = cfg.sampler;
  sampler.steps = cfg.eval.ablation_steps;
  const CounterRng rng = CounterRng(cfg.seed).fork(kAblationTag);
  std::vector<AblationRow> rows;
  for (GuidanceOrder order : {GuidanceOrder::StyleFirst, GuidanceOrder::TextFirst}) {
    for (const std::string sweep : {"style", "text"}) {
      for (double w : cfg.eval.sweep_weights) {
        AblationRow row;
        row.sweep = sweep;
        row.order = order;
        row.s_style = sweep == "style" ? w : 1.0;
        row.s_text = sweep == "text" ? w : 1.0;
        row.reference = order == GuidanceOrder::StyleFirst && row.s_style == 1.2 && row.s_text == 1.0;
        RunConfig cell = cfg;
        cell.guidance = GuidanceWeights{row.s_style, row.s_text, order};
        cell.sampler = sampler;
        nlohmann::json key = config_to_json(cell);
        key["n"] = cfg.eval.ablation_samples;
        row.config_hash = config_hash(key);
        const Tensor<float> images = generate_images(cfg, params, inputs.pairs, cell.guidance, sampler, rng);
        row.metrics = evaluate_images(cfg, images, inputs, scorer, extractor, warn);
        rows.push_back(row);
        if (progress) progress(row);
      }
    }
  }
  return rows;
}

void write_metrics_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "config_hash,s_S,s_T,order,fid_like,lpips_like,cs_like,attribute_match,n,sweep,reference\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%s,%.9g,%.9g,%.9g,%.9g,%d,%s,%d\n", r.config_hash.c_str(), r.s_style,
                  r.s_text, to_string(r.order).c_str(), r.metrics.fid_like, r.metrics.lpips_like, r.metrics.cs_like,
                  r.metrics.attribute_match, r.metrics.n, r.sweep.c_str(), r.reference ? 1 : 0);
    out << buf;
  }
}

void write_ablation_plots(const std::vector<AblationRow>& rows, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::vector<std::pair<std::string, double MetricReport::*>> metrics = {
      {"fid_like", &MetricReport::fid_like},
      {"lpips_like", &MetricReport::lpips_like},
      {"cs_like", &MetricReport::cs_like},
      {"attribute_match", &MetricReport::attribute_match},
  };
  const std::vector<Color8> colors = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {148, 103, 189}};
  for (const auto& [name, field] : metrics) {
    std::vector<PlotSeries> series;
    double hx = 0, hy = 0;
    bool have_ref = false;
    for (GuidanceOrder order : {GuidanceOrder::StyleFirst, GuidanceOrder::TextFirst}) {
      for (const std::string sweep : {"style", "text"}) {
        PlotSeries s;
        s.label = std::string(order == GuidanceOrder::StyleFirst ? "SF" : "TF") + (sweep == "style" ? " S_S" : " S_T");
        s.color = colors[series.size()];
        for (const auto& r : rows) {
          if (r.order != order || r.sweep != sweep) continue;
          s.x.push_back(sweep == "style" ? r.s_style : r.s_text);
          s.y.push_back(r.metrics.*field);
          if (r.reference && sweep == "style") hx = r.s_style, hy = r.metrics.*field, have_ref = true;
        }
        series.push_back(std::move(s));
      }
    }
    line_plot(dir / (name + ".png"), name, series, have_ref ? &hx : nullptr, have_ref ? &hy : nullptr);
  }
}

}  // namespace sgdiff
