#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "sgdiff/model.hpp"
#include "sgdiff/pixels.hpp"
#include "support/gradcheck.hpp"

using namespace sgdiff;
using sgdiff::testing::check_param_gradients;

namespace {

Vocabulary test_vocab() { return Vocabulary({"red", "blue", "check", "tank", "dress", "stripes", "long"}); }

ModelConfig small_config(int vocab) {
  ModelConfig cfg;
  cfg.encoder.vocab_size = vocab;
  return cfg;
}

BoundParams<float> frozen(Tape<float>& tape, const ParamStore<float>& store) {
  return BoundParams<float>(tape, store, [](const std::string&) { return false; });
}

// Plain attention over single examples: query rows attend over key rows.
Eigen::MatrixXd attention_oracle(const Eigen::MatrixXd& q, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v) {
  Eigen::MatrixXd out(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<double> w(static_cast<std::size_t>(k.rows()));
    double mx = -1e300, total = 0;
    for (Index j = 0; j < k.rows(); ++j) {
      double dot = 0;
      for (Index c = 0; c < q.cols(); ++c) dot += q(i, c) * k(j, c);
      w[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(q.cols()));
      mx = std::max(mx, w[static_cast<std::size_t>(j)]);
    }
    for (auto& x : w) total += (x = std::exp(x - mx));
    for (Index c = 0; c < v.cols(); ++c) {
      double acc = 0;
      for (Index j = 0; j < k.rows(); ++j) acc += w[static_cast<std::size_t>(j)] / total * v(j, c);
      out(i, c) = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("tokenize") {
  const Vocabulary vocab = test_vocab();
  CHECK(tokenize("", vocab, 4) == std::vector<int>{0, 0, 0, 0});
  const auto ids = tokenize("red check tank", vocab, 5);
  CHECK(ids == std::vector<int>{*vocab.id("red"), *vocab.id("check"), *vocab.id("tank"), 0, 0});
  CHECK(tokenize("Red unknown check", vocab, 3) == std::vector<int>{*vocab.id("red"), *vocab.id("check"), 0});
  const auto cut = tokenize("red blue check tank dress", vocab, 3);
  CHECK(cut == std::vector<int>{*vocab.id("red"), *vocab.id("blue"), *vocab.id("check")});
  // the markers are reserved and never produced by text
  CHECK(tokenize("<pad> <cls>", vocab, 2) == std::vector<int>{0, 0});
}

TEST_CASE("vocabulary file round trip") {
  const Vocabulary vocab = test_vocab();
  CHECK(vocab.token(kPadId) == "<pad>");
  CHECK(vocab.token(kClsId) == "<cls>");
  const auto path = std::filesystem::temp_directory_path() / "sgdiff_vocab_test.txt";
  vocab.save(path);
  const Vocabulary back = Vocabulary::load(path);
  CHECK(back.tokens() == vocab.tokens());
  for (int i = 2; i < vocab.size(); ++i) CHECK(*back.id(vocab.token(i)) == i);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(Vocabulary({"a", "a"}), ConfigError);
}

TEST_CASE("text encoder") {
  const Vocabulary vocab = test_vocab();
  const ModelConfig cfg = small_config(vocab.size());
  ParamStore<float> store;
  CounterRng rng(1);
  init_text_encoder(store, cfg.encoder, rng);
  Tape<float> tape;
  auto p = frozen(tape, store);

  auto ids = tokenize("red check tank", vocab, cfg.encoder.text_length);
  Var<float> f = encode_text(p, cfg.encoder, ids, 1);
  CHECK(f.shape() == Shape{1, 16, 64});
  CHECK(f.value().all_finite());

  auto swapped = ids;
  std::swap(swapped[0], swapped[1]);
  Var<float> g = encode_text(p, cfg.encoder, swapped, 1);
  CHECK((f.value().vec() - g.value().vec()).cwiseAbs().maxCoeff() > 1e-3);

  // Purity: the same ids give the same tokens.
  CHECK(encode_text(p, cfg.encoder, ids, 1).value() == f.value());

  // All-PAD output depends only on the PAD row and positions.
  const std::vector<int> pads(16, kPadId);
  const Tensor<float> before = encode_text(p, cfg.encoder, pads, 1).value();
  ParamStore<float> other = store;
  auto& table = other.at("text.embed");
  for (Index i = 2 * 64; i < table.size(); ++i) table[i] += 3.0f;
  Tape<float> tape2;
  auto p2 = frozen(tape2, other);
  CHECK(encode_text(p2, cfg.encoder, pads, 1).value() == before);

  std::vector<int> bad = ids;
  bad[0] = vocab.size();
  CHECK_THROWS_AS(encode_text(p, cfg.encoder, bad, 1), std::out_of_range);
}

TEST_CASE("style encoder") {
  EncoderConfig enc;
  enc.vocab_size = 4;
  CHECK(enc.style_tokens() == 5);
  EncoderConfig wide = enc;
  wide.patch_size = 16;
  wide.patch_stride = 8;
  CHECK(wide.style_tokens() == 5);
  EncoderConfig bad = enc;
  bad.patch_stride = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  ParamStore<float> store;
  CounterRng rng(2);
  init_style_encoder(store, enc, rng);
  Tape<float> tape;
  auto p = frozen(tape, store);
  CounterRng data(3);
  const auto patch = Tensor<float>::randn({3, 8, 8}, data);
  Var<float> f = encode_style(p, enc, patch);
  CHECK(f.shape() == Shape{1, 5, 64});
  CHECK(encode_style(p, enc, patch).value() == f.value());
  CHECK_THROWS_AS(encode_style(p, enc, Tensor<float>({3, 6, 6})), DimensionError);

  const auto two = stack(std::vector<Tensor<float>>{patch, patch});
  const Tensor<float> both = encode_style(p, enc, two).value();
  CHECK((slice_leading(both, 0, 1).vec() - slice_leading(both, 1, 1).vec()).cwiseAbs().maxCoeff() < 1e-5);

  // Patch rows follow the non-overlapping grid.
  Tensor<double> img({1, 3, 4, 4});
  for (Index i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const auto rows = extract_patches(img, 2);
  CHECK(rows.shape() == Shape{1, 4, 12});
  // patch (0, 1), channel 0, pixel (1, 0) is image pixel (1, 2)
  CHECK(rows[1 * 12 + 2] == img[1 * 4 + 2]);
  // channel 2 of patch (1, 1), pixel (1, 1): image (2, 3, 3)
  CHECK(rows[3 * 12 + 8 + 3] == img[2 * 16 + 3 * 4 + 3]);
}

TEST_CASE("null conditions") {
  EncoderConfig enc;
  enc.vocab_size = 4;
  const auto nulls = null_conditions(enc);
  CHECK(nulls.text_ids == std::vector<int>(16, 0));
  CHECK(nulls.style_patch.shape() == Shape{3, 8, 8});
  CHECK((nulls.style_patch.vec().array() == kBackgroundSentinel).all());
  CHECK(kBackgroundSentinel == -3.0f);
}

TEST_CASE("skip cross-attention examples") {
  // hand-sized instance: L_T=2, L_S=1, d=2, one head, identity projections
  ParamStore<double> store;
  const Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  for (const char* n : {"sca.q.w", "sca.k_text.w", "sca.v_text.w", "sca.k_style.w", "sca.v_style.w", "sca.out.w"}) {
    store.add(n, eye);
  }
  store.add("sca.out.b", Tensor<double>({2}));
  Tape<double> tape;
  BoundParams<double> p(tape, store);
  Tensor<double> ft({1, 2, 2}, {0.5, -1.0, 2.0, 0.25});
  Tensor<double> fs({1, 1, 2}, {1.5, 0.5});
  Var<double> out = sca_fuse(p, tape.constant(ft), tape.constant(fs), 1);

  Eigen::MatrixXd q(2, 2), kv(3, 2), kv_text_first(3, 2);
  q << 0.5, -1.0, 2.0, 0.25;
  kv << 1.5, 0.5, 0.5, -1.0, 2.0, 0.25;
  kv_text_first << 0.5, -1.0, 2.0, 0.25, 1.5, 0.5;
  const Eigen::MatrixXd expected = attention_oracle(q, kv, kv) + q;
  for (Index i = 0; i < 2; ++i)
    for (Index c = 0; c < 2; ++c) CHECK(out.value()[i * 2 + c] == doctest::Approx(expected(i, c)).epsilon(1e-12));
  // Key order is pinned; the result is order-invariant here only because the
  // projections coincide, so check the attention input order through weights.
  const Tensor<double> k_cat = concat(tape.constant(fs), tape.constant(ft), 1).value();
  CHECK(k_cat[0] == 1.5);

  // Single query, single key: output = that value row.
  ParamStore<double> one = store;
  one.at("sca.out.w") = eye;
  Tape<double> t1;
  BoundParams<double> p1(t1, one);
  Tensor<double> q1({1, 1, 2}, {0.7, -0.3});
  // zero text keys cannot be excluded, so use a style-only check via attention directly
  Var<double> a = attention(t1.constant(q1), t1.constant(fs), t1.constant(fs), 1);
  CHECK(a.value()[0] == 1.5);
  CHECK(a.value()[1] == 0.5);
}

TEST_CASE("fusion key order regression") {
  // With distinct style and text value projections, swapping the key order
  // relative to values would change the output; pin the style-first layout.
  ParamStore<double> store;
  CounterRng rng(10);
  for (const char* n : {"sca.q.w", "sca.k_text.w", "sca.v_text.w", "sca.k_style.w", "sca.v_style.w", "sca.out.w"}) {
    store.add(n, Tensor<double>::randn({4, 4}, rng));
  }
  store.add("sca.out.b", Tensor<double>({4}));
  const auto ft = Tensor<double>::randn({1, 3, 4}, rng);
  const auto fs = Tensor<double>::randn({1, 2, 4}, rng);
  Tape<double> tape;
  BoundParams<double> p(tape, store);
  const Tensor<double> out = sca_fuse(p, tape.constant(ft), tape.constant(fs), 1).value();

  auto mat = [](const Tensor<double>& t, Index r, Index c) {
    Eigen::MatrixXd m(r, c);
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) m(i, j) = t[i * c + j];
    return m;
  };
  const Eigen::MatrixXd T = mat(ft, 3, 4), S = mat(fs, 2, 4);
  auto W = [&](const char* n) { return mat(store.at(n), 4, 4); };
  Eigen::MatrixXd k(5, 4), v(5, 4);
  k << S * W("sca.k_style.w"), T * W("sca.k_text.w");
  v << S * W("sca.v_style.w"), T * W("sca.v_text.w");
  const Eigen::MatrixXd expected = attention_oracle(T * W("sca.q.w"), k, v) * W("sca.out.w") + T;
  for (Index i = 0; i < 3; ++i)
    for (Index c = 0; c < 4; ++c) CHECK(out[i * 4 + c] == doctest::Approx(expected(i, c)).epsilon(1e-10));
}

TEST_CASE("fusion identity init and shapes") {
  ParamStore<float> store;
  CounterRng rng(4);
  init_sca(store, 64, rng);
  CounterRng data(5);
  const auto ft = Tensor<float>::randn({2, 16, 64}, data);
  {
    Tape<float> tape;
    auto p = frozen(tape, store);
    for (Index ls : {1, 5, 9}) {
      auto out = sca_fuse(p, tape.constant(ft), tape.constant(Tensor<float>::randn({2, ls, 64}, data)), 4);
      CHECK(out.shape() == Shape{2, 16, 64});
    }
    CHECK_THROWS_AS(sca_fuse(p, tape.constant(ft), tape.constant(Tensor<float>({2, 5, 32})), 4), DimensionError);
    // attention rows sum to one for every head and query
    const auto q = Tensor<float>::randn({2, 16, 64}, data);
    const auto k = Tensor<float>::randn({2, 21, 64}, data);
    const auto w = attention_weights(q, k, 4);
    const auto rows = w.matrix(w.size() / 21, 21);
    CHECK((rows.rowwise().sum().array() - 1.0f).abs().maxCoeff() < 1e-6);
  }
  init_identity(store);
  Tape<float> tape;
  auto p = frozen(tape, store);
  auto out = sca_fuse(p, tape.constant(ft), tape.constant(Tensor<float>::randn({2, 5, 64}, data)), 4);
  CHECK(out.value() == ft);
  CHECK(store.at("sca.q.w").vec().cwiseAbs().maxCoeff() > 0);
}

TEST_CASE("sinusoid and time embedding") {
  const auto s0 = sinusoid_features(0.0, 8);
  for (int i = 0; i < 8; ++i) CHECK(s0[i] == (i % 2 == 0 ? 0.0 : 1.0));

  DenoiserConfig cfg;
  ParamStore<float> store;
  CounterRng rng(6);
  init_denoiser(store, cfg, rng);
  const auto sched = make_schedule(ScheduleConfig::scaled_linear(200));
  Tape<float> tape;
  auto p = frozen(tape, store);
  std::vector<int> ts;
  for (int t = 1; t <= 200; ++t) ts.push_back(t);
  const Tensor<float> emb = time_embed(p, cfg, ts, sched).value();
  CHECK(emb.shape() == Shape{200, cfg.time_width});
  const auto rows = emb.rows_view();
  for (Index i = 1; i < 200; ++i) CHECK((rows.row(i) - rows.row(i - 1)).cwiseAbs().maxCoeff() > 0);
  CHECK_THROWS_AS(time_embed(p, cfg, {0}, sched), std::out_of_range);
  CHECK_THROWS_AS(time_embed(p, cfg, {201}, sched), std::out_of_range);
}

TEST_CASE("denoiser contract") {
  const ModelConfig cfg = small_config(10);
  ParamStore<float> store;
  init_backbone(store, cfg, 7);
  CHECK(store.count("unet.") < 500000);
  const auto sched = make_schedule(ScheduleConfig::scaled_linear(200));
  CounterRng data(8);
  const auto x = Tensor<float>::randn({2, 3, 16, 16}, data);
  const auto cond = Tensor<float>::randn({2, 16, 64}, data);

  Tape<float> tape;
  auto p = frozen(tape, store);
  auto out = predict_eps(p, cfg.denoiser, tape.constant(x), {10, 150}, tape.constant(cond), sched);
  CHECK(out.eps.shape() == Shape{2, 3, 16, 16});
  CHECK(!out.v.valid());
  auto again = predict_eps(p, cfg.denoiser, tape.constant(x), {10, 150}, tape.constant(cond), sched);
  CHECK(again.eps.value() == out.eps.value());
  auto other = predict_eps(p, cfg.denoiser, tape.constant(x), {10, 150},
                           tape.constant(Tensor<float>::randn({2, 16, 64}, data)), sched);
  CHECK((other.eps.value().vec() - out.eps.value().vec()).cwiseAbs().maxCoeff() > 1e-4);

  CHECK_THROWS_AS(predict_eps(p, cfg.denoiser, tape.constant(Tensor<float>({2, 3, 8, 8})), {1, 1},
                              tape.constant(cond), sched),
                  DimensionError);
  CHECK_THROWS_AS(predict_eps(p, cfg.denoiser, tape.constant(x), {1, 1},
                              tape.constant(Tensor<float>({2, 16, 32})), sched),
                  DimensionError);

  ModelConfig var_cfg = cfg;
  var_cfg.denoiser.learn_variance = true;
  ParamStore<float> var_store;
  init_backbone(var_store, var_cfg, 7);
  CHECK(var_store.count("unet.") < 500000);
  Tape<float> t2;
  auto p2 = frozen(t2, var_store);
  auto vout = predict_eps(p2, var_cfg.denoiser, t2.constant(x), {10, 150}, t2.constant(cond), sched);
  CHECK(vout.eps.shape() == Shape{2, 3, 16, 16});
  CHECK(vout.v.shape() == Shape{2, 3, 16, 16});
}

TEST_CASE("warm-start equivalence of the fused pathway") {
  ModelConfig cfg = small_config(10);
  ParamStore<float> store;
  init_backbone(store, cfg, 11);
  init_style_branch(store, cfg, 12);
  const auto sched = make_schedule(ScheduleConfig::scaled_linear(200));
  CounterRng data(13);
  const auto x = Tensor<float>::randn({3, 3, 16, 16}, data);
  const auto patches = Tensor<float>::randn({3, 3, 8, 8}, data);
  std::vector<int> ids(48);
  for (auto& id : ids) id = static_cast<int>(data.below(10));
  Tape<float> tape;
  auto p = frozen(tape, store);
  auto a = model_forward<float>(p, cfg, Conditioning::Text, tape.constant(x), {5, 50, 200}, ids, nullptr, sched);
  auto b = model_forward(p, cfg, Conditioning::TextStyle, tape.constant(x), {5, 50, 200}, ids, &patches, sched);
  CHECK(a.eps.value() == b.eps.value());
}

TEST_CASE("denoiser gradients match finite differences") {
  ModelConfig cfg = small_config(10);
  cfg.denoiser.learn_variance = true;
  ParamStore<float> init;
  init_backbone(init, cfg, 21);
  init_style_branch(init, cfg, 22);
  // a random output projection so the fused pathway carries gradient
  CounterRng rng(23);
  init.at("sca.out.w") = Tensor<float>::randn({64, 64}, rng, 0.1f);
  const ParamStore<double> store = init.cast<double>();

  const auto sched = make_schedule(ScheduleConfig::scaled_linear(200));
  const auto x = Tensor<double>::randn({2, 3, 16, 16}, rng);
  const auto target = Tensor<double>::randn({2, 3, 16, 16}, rng);
  const auto vt = Tensor<double>::randn({2, 3, 16, 16}, rng);
  const auto patches = Tensor<double>::randn({2, 3, 8, 8}, rng);
  std::vector<int> ids(32);
  for (auto& id : ids) id = static_cast<int>(rng.below(10));

  auto build = [&](BoundParams<double>& p) {
    auto out = model_forward(p, cfg, Conditioning::TextStyle, p.tape().constant(x), {3, 120}, ids, &patches, sched);
    Tape<double>& tape = p.tape();
    return add(sum(mul(out.eps, tape.constant(target))), sum(mul(out.v, tape.constant(vt))));
  };
  const auto result = check_param_gradients(build, store, 40, 24);
  INFO(result.worst);
  CHECK(result.max_rel_error < 1e-4);
}
