#include <cmath>

#include "doctest.h"
#include "sgdiff/sampler.hpp"

using namespace sgdiff;
using T = Tensor<double>;

namespace {

NullConditions test_nulls() {
  EncoderConfig enc;
  enc.vocab_size = 8;
  return null_conditions(enc);
}

ConditionPair full_pair() {
  ConditionPair pair = make_condition_pair(std::vector<int>(16, 3), Tensor<float>::full({3, 8, 8}, 0.25f));
  return pair;
}

// Deterministic stand-in: a distinct random response per condition state plus a term in x.
struct MockModel {
  std::map<int, T> responses;

  explicit MockModel(std::uint64_t seed) {
    CounterRng rng(seed);
    for (int state = 0; state < 4; ++state) responses.emplace(state, T::randn({2, 3, 3}, rng));
  }
  static int state(const ConditionPair& p) { return (p.text_null ? 0 : 1) + (p.style_null ? 0 : 2); }

  ModelOutput<double> operator()(const T& x, int, const std::vector<ConditionPair>& rows) const {
    ModelOutput<double> out{T(x.shape()), T(x.shape())};
    const Index inner = x.size() / x.dim(0);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Index off = static_cast<Index>(r) * inner;
      out.eps.vec().segment(off, inner) = responses.at(state(rows[r])).vec() + 0.5 * x.vec().segment(off, inner);
      out.v.vec().segment(off, inner).setConstant(state(rows[r]));
    }
    return out;
  }
  T eps(const T& x, int state_id) const { return T(x.shape(), (responses.at(state_id).vec() + 0.5 * x.vec()).eval()); }
};

constexpr int kNone = 0, kText = 1, kStyle = 2, kBoth = 3;

}  // namespace

TEST_CASE("compose examples") {
  const T u({2}, {0.2, -1.0});
  const T c({2}, {0.5, 3.0});
  CHECK(compose_single(u, c, 1.0) == c);
  CHECK(compose_single(u, c, 0.0) == u);
  CHECK(compose_single(T({1}, {0.2}), T({1}, {0.5}), 2.0)[0] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK_THROWS_AS(compose_single(u, T({3}), 1.0), DimensionError);

  const T e_nn({1}, {0}), e_1n({1}, {1}), e_12({1}, {3});
  CHECK(compose_dual(e_nn, e_1n, e_12, 1.2, 1.0)[0] == doctest::Approx(3.2).epsilon(1e-15));
  CHECK(compose_dual(u, c, T({2}, {7, 8}), 1.0, 1.0) == T({2}, {7, 8}));
  CHECK((compose_dual(u, c, T({2}, {7, 8}), 1.7, 0.0).vec() - compose_single(u, c, 1.7).vec()).cwiseAbs().maxCoeff() <
        1e-12);
  for (int i = 0; i < 50; ++i) {
    CounterRng r(40 + static_cast<std::uint64_t>(i));
    const T a = T::randn({6}, r), b = T::randn({6}, r), e12 = T::randn({6}, r);
    CHECK(compose_dual(a, b, e12, 1.0, 1.0) == e12);
  }
  CHECK_THROWS_AS(compose_dual(u, c, T({3}), 1.0, 1.0), DimensionError);

  CounterRng rng(1);
  for (int i = 0; i < 20; ++i) {
    const T e = T::randn({4}, rng);
    const T out = compose_dual(e, e, e, 3 * rng.uniform(), 3 * rng.uniform());
    CHECK((out.vec() - e.vec()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("condition dropout") {
  const auto nulls = test_nulls();
  const ConditionPair pair = full_pair();
  CounterRng rng(2);
  const auto kept = apply_condition_dropout(pair, {1.0, 1.0}, rng, nulls);
  CHECK(kept.text_ids == pair.text_ids);
  CHECK(kept.style_patch == pair.style_patch);
  CHECK(!kept.text_null);
  CHECK(!kept.style_null);
  const auto dropped = apply_condition_dropout(pair, {0.0, 0.0}, rng, nulls);
  CHECK(dropped.text_null);
  CHECK(dropped.style_null);
  CHECK(dropped.text_ids == nulls.text_ids);
  CHECK(dropped.style_patch == nulls.style_patch);

  const int draws = 100000;
  int text = 0, style = 0, both = 0;
  for (int i = 0; i < draws; ++i) {
    CounterRng draw = CounterRng(77).fork(0, static_cast<std::uint64_t>(i));
    const auto out = apply_condition_dropout(pair, {0.8, 0.8}, draw, nulls);
    text += !out.text_null;
    style += !out.style_null;
    both += !out.text_null && !out.style_null;
  }
  CHECK(text / double(draws) >= 0.78);
  CHECK(text / double(draws) <= 0.82);
  CHECK(style / double(draws) >= 0.78);
  CHECK(style / double(draws) <= 0.82);
  CHECK(std::abs(both / double(draws) - 0.64) <= 0.01);
  CHECK_THROWS_AS((DropoutConfig{1.5, 0.5}.validate()), ConfigError);
}

TEST_CASE("guided estimate follows the reduced order forms") {
  const auto nulls = test_nulls();
  CounterRng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const MockModel mock(100 + static_cast<std::uint64_t>(trial));
    const EpsModel<double> model = std::cref(mock);
    const T x = T::randn({1, 2, 3, 3}, rng);
    const T xi = x.reshaped({2, 3, 3});
    const double s_style = 3 * rng.uniform();

    GuidanceWeights style_first{s_style, 1.0, GuidanceOrder::StyleFirst};
    const T a = guided_eps(x, 10, {full_pair()}, style_first, model, nulls).eps.reshaped({2, 3, 3});
    // eps(c_S, c_T) + (s_S - 1) [eps(c_S, null) - eps(null, null)]
    const T ra(xi.shape(), (mock.eps(xi, kBoth).vec() +
                            (s_style - 1) * (mock.eps(xi, kStyle).vec() - mock.eps(xi, kNone).vec()))
                               .eval());
    CHECK((a.vec() - ra.vec()).cwiseAbs().maxCoeff() <= 1e-6);

    GuidanceWeights text_first{s_style, 1.0, GuidanceOrder::TextFirst};
    const T b = guided_eps(x, 10, {full_pair()}, text_first, model, nulls).eps.reshaped({2, 3, 3});
    // eps(c_T, c_S) + (s_S - 1) [eps(c_T, c_S) - eps(c_T, null)]
    const T rb(xi.shape(), (mock.eps(xi, kBoth).vec() +
                            (s_style - 1) * (mock.eps(xi, kBoth).vec() - mock.eps(xi, kText).vec()))
                               .eval());
    CHECK((b.vec() - rb.vec()).cwiseAbs().maxCoeff() <= 1e-6);

    for (auto order : {GuidanceOrder::StyleFirst, GuidanceOrder::TextFirst}) {
      const T unit = guided_eps(x, 10, {full_pair()}, {1.0, 1.0, order}, model, nulls).eps.reshaped({2, 3, 3});
      CHECK((unit.vec() - mock.eps(xi, kBoth).vec()).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
}

TEST_CASE("guided estimate evaluation counts and null handling") {
  const auto nulls = test_nulls();
  const MockModel mock(5);
  const EpsModel<double> model = std::cref(mock);
  CounterRng rng(6);
  const T x = T::randn({4, 2, 3, 3}, rng);
  std::vector<ConditionPair> pairs = {full_pair(), with_text_null(full_pair(), nulls),
                                      with_style_null(full_pair(), nulls),
                                      with_style_null(with_text_null(full_pair(), nulls), nulls)};
  EvalCounter counter;
  const GuidanceWeights w{1.5, 2.0, GuidanceOrder::StyleFirst};
  const auto out = guided_eps(x, 3, pairs, w, model, nulls, &counter);
  CHECK(counter.rows == 3 + 2 + 2 + 1);
  CHECK(counter.calls == 1);

  auto image = [&](const T& t, Index i) { return slice_leading(t, i, 1).reshaped({2, 3, 3}); };
  const T x1 = image(x, 1), x2 = image(x, 2), x3 = image(x, 3);
  // style only survives: single guidance on s_S
  CHECK((image(out.eps, 1).vec() - compose_single(mock.eps(x1, kNone), mock.eps(x1, kStyle), 1.5).vec())
            .cwiseAbs()
            .maxCoeff() < 1e-12);
  CHECK((image(out.eps, 2).vec() - compose_single(mock.eps(x2, kNone), mock.eps(x2, kText), 2.0).vec())
            .cwiseAbs()
            .maxCoeff() < 1e-12);
  CHECK(image(out.eps, 3) == mock.eps(x3, kNone));
  // variance coefficient from the most conditioned state
  CHECK(out.v[0] == kBoth);
  CHECK(image(out.v, 1)[0] == kStyle);
  CHECK(image(out.v, 3)[0] == kNone);

  for (bool text_null : {false, true})
    for (bool style_null : {false, true}) {
      ConditionPair p = full_pair();
      if (text_null) p = with_text_null(p, nulls);
      if (style_null) p = with_style_null(p, nulls);
      EvalCounter c;
      guided_eps(slice_leading(x, 0, 1), 3, {p}, w, model, nulls, &c);
      CHECK(c.rows == 1 + (!text_null) + (!style_null));
    }
  CHECK_THROWS_AS(guided_eps(x, 3, {full_pair()}, w, model, nulls), DimensionError);
  CHECK_THROWS_AS(guided_eps(x, 3, pairs, GuidanceWeights{-1.0, 1.0}, model, nulls), ConfigError);
}

TEST_CASE("guidance defaults and orders") {
  const GuidanceWeights w;
  CHECK(w.s_style == 1.2);
  CHECK(w.s_text == 1.0);
  CHECK(w.order == GuidanceOrder::StyleFirst);
  CHECK(parse_guidance_order("text_first") == GuidanceOrder::TextFirst);
  CHECK(to_string(GuidanceOrder::StyleFirst) == "style_first");
  CHECK_THROWS_AS(parse_guidance_order("sideways"), ConfigError);
}
