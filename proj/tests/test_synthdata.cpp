#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "doctest.h"
#include "sgdiff/config.hpp"
#include "sgdiff/synthdata.hpp"

using namespace sgdiff;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path scratch(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / ("sgdiff_synth_" + name);
  fs::remove_all(dir);
  return dir;
}

SynthExample first_with(const GeneratorConfig& cfg, const std::string& category, const std::string& pattern = "") {
  for (std::uint64_t s = 0;; ++s) {
    SynthExample ex = synthesize_example(cfg, s);
    if (ex.attributes.category == category && (pattern.empty() || ex.attributes.pattern == pattern)) return ex;
  }
}

}  // namespace

TEST_CASE("synthesis is a pure function of config and seed") {
  GeneratorConfig cfg;
  for (std::uint64_t s : {0ull, 5ull, 123ull}) {
    const SynthExample a = synthesize_example(cfg, s);
    const SynthExample b = synthesize_example(cfg, s);
    CHECK(a.image == b.image);
    CHECK(a.mask == b.mask);
    CHECK(a.style.patch == b.style.patch);
    CHECK(a.text == b.text);
  }
  GeneratorConfig other = cfg;
  other.seed = 1;
  int differ = 0;
  for (std::uint64_t s = 0; s < 20; ++s) differ += !(synthesize_example(cfg, s).image == synthesize_example(other, s).image);
  CHECK(differ > 10);
}

TEST_CASE("masks equal the category template and cover at least a quarter") {
  GeneratorConfig cfg;
  const SynthExample tank = first_with(cfg, "tank");
  const auto tmpl = garment_template("tank", "", cfg.image_size);
  for (std::size_t i = 0; i < tmpl.size(); ++i) REQUIRE(tank.mask[static_cast<Index>(i)] == static_cast<float>(tmpl[i]));

  for (const auto& c : cfg.categories) {
    for (const std::string len : {"long", "short"}) {
      for (int size : {16, 32}) {
        const auto t = garment_template(c, has_length_variant(c) ? len : "", size);
        double fg = 0;
        for (auto v : t) fg += v;
        CHECK_MESSAGE(fg / static_cast<double>(t.size()) >= 0.25, c << " " << len << " " << size);
      }
    }
  }
  for (std::uint64_t s = 0; s < 200; ++s) {
    const SynthExample ex = synthesize_example(cfg, s);
    REQUIRE(ex.mask.vec().mean() >= 0.25f);
    for (Index i = 0; i < ex.mask.size(); ++i) {
      if (ex.mask[i] == 0.0f) REQUIRE(ex.image[i] == cfg.background_raw);
    }
  }
}

TEST_CASE("category frequencies are uniform within three standard errors") {
  GeneratorConfig cfg;
  const int n = 10000;
  std::map<std::string, int> counts;
  for (int s = 0; s < n; ++s) counts[synthesize_example(cfg, static_cast<std::uint64_t>(s)).attributes.category]++;
  const double p = 1.0 / static_cast<double>(cfg.categories.size());
  const double se = std::sqrt(p * (1 - p) / n);
  CHECK(counts.size() == cfg.categories.size());
  for (const auto& [c, k] : counts) CHECK_MESSAGE(std::abs(k / static_cast<double>(n) - p) <= 3 * se, c);
}

TEST_CASE("every category and pattern combination renders") {
  GeneratorConfig cfg;
  std::map<std::string, int> seen;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    const auto a = synthesize_example(cfg, s).attributes;
    seen[a.category + "/" + a.pattern]++;
  }
  CHECK(seen.size() == cfg.categories.size() * cfg.patterns.size());
}

TEST_CASE("style crop postconditions") {
  GeneratorConfig cfg;
  SUBCASE("fully foreground image gives the exact sub-window") {
    CounterRng init(9);
    Tensor<float> img = Tensor<float>::randn({3, 16, 16}, init);
    Tensor<float> mask = Tensor<float>::full({16, 16}, 1.0f);
    CounterRng rng(3);
    const StyleCrop crop = style_crop(img, mask, 8, rng);
    CHECK(crop.coverage == 1.0);
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) REQUIRE(crop.patch[(c * 8 + y) * 8 + x] == img[(c * 16 + crop.y + y) * 16 + crop.x + x]);
  }
  SUBCASE("coverage is at least 95% or maximal") {
    for (std::uint64_t s = 0; s < 300; ++s) {
      const SynthExample ex = synthesize_example(cfg, s);
      double best = 0;
      for (int y = 0; y + 8 <= 16; ++y)
        for (int x = 0; x + 8 <= 16; ++x) {
          double c = 0;
          for (int yy = 0; yy < 8; ++yy)
            for (int xx = 0; xx < 8; ++xx) c += ex.mask[(y + yy) * 16 + x + xx];
          best = std::max(best, c / 64);
        }
      REQUIRE((ex.style.coverage >= 0.95 || ex.style.coverage == doctest::Approx(best)));
    }
  }
  SUBCASE("fallback picks the first maximal window") {
    Tensor<float> img({3, 4, 4});
    Tensor<float> mask({4, 4});
    mask[1 * 4 + 2] = 1.0f;
    CounterRng rng(0);
    const StyleCrop crop = style_crop(img, mask, 2, rng);
    CHECK(crop.coverage == 0.25);
    CHECK(crop.x == 1);
    CHECK(crop.y == 0);
  }
  SUBCASE("striped crops have the garment's mean colour") {
    const SynthExample ex = first_with(cfg, "jacket", "stripes");
    std::array<double, 3> garment{};
    double fg = 0;
    for (Index i = 0; i < 256; ++i) {
      if (ex.mask[i] == 0.0f) continue;
      fg += 1;
      for (int c = 0; c < 3; ++c) garment[static_cast<std::size_t>(c)] += ex.image[c * 256 + i];
    }
    std::array<double, 3> crops{};
    CounterRng rng(77);
    const int n = 1000;
    for (int k = 0; k < n; ++k) {
      const StyleCrop crop = style_crop(ex.image, ex.mask, 8, rng);
      double cfg_fg = 0;
      std::array<double, 3> sum{};
      for (Index i = 0; i < 64; ++i) {
        if (crop.mask[i] == 0.0f) continue;
        cfg_fg += 1;
        for (int c = 0; c < 3; ++c) sum[static_cast<std::size_t>(c)] += crop.patch[c * 64 + i];
      }
      for (int c = 0; c < 3; ++c) crops[static_cast<std::size_t>(c)] += sum[static_cast<std::size_t>(c)] / cfg_fg / n;
    }
    for (int c = 0; c < 3; ++c) {
      const double g = garment[static_cast<std::size_t>(c)] / fg;
      CHECK(std::abs(crops[static_cast<std::size_t>(c)] - g) <= 0.05 * g);
    }
  }
}

TEST_CASE("background masking values") {
  Tensor<float> img({3, 2, 2});
  Tensor<float> mask({2, 2});
  img.vec().setConstant(230.0f);
  img[0] = 255.0f;
  img[1] = 0.0f;
  mask[0] = 1.0f;
  mask[1] = 1.0f;
  const Tensor<float> out = mask_background(img, mask);
  CHECK(out[0] == 1.0f);
  CHECK(out[1] == -1.0f);
  CHECK(out[2] == -3.0f);
  CHECK(out[3] == -3.0f);
  CHECK(out[4 + 2] == -3.0f);

  Tensor<float> none({2, 2});
  const Tensor<float> all = mask_background(img, none);
  for (Index i = 0; i < all.size(); ++i) CHECK(all[i] == kBackgroundSentinel);

  GeneratorConfig cfg;
  const SynthExample ex = synthesize_example(cfg, 4);
  const Tensor<float> norm = mask_background(ex.image, ex.mask);
  for (Index i = 0; i < norm.size(); ++i) REQUIRE((norm[i] == -3.0f || (norm[i] >= -1.0f && norm[i] <= 1.0f)));
  CHECK_THROWS_AS(mask_background(img, Tensor<float>({3, 3})), DimensionError);
}

TEST_CASE("tokens and renders are mutually derivable") {
  GeneratorConfig cfg;
  int wrong = 0;
  for (std::uint64_t s = 0; s < 1000; ++s) {
    const SynthExample ex = synthesize_example(cfg, s);
    REQUIRE(decode_tokens(ex.text, cfg) == ex.attributes);
    const GarmentAttributes seen = classify_garment(ex.image, cfg);
    if (!(seen == ex.attributes)) {
      ++wrong;
      MESSAGE("seed " << s << ": " << describe_text(ex.attributes) << " classified as " << describe_text(seen));
    }
    REQUIRE((attribute_agreement(seen, ex.attributes) == 1.0) == (seen == ex.attributes));
  }
  CHECK(wrong == 0);
  CHECK_THROWS_AS(decode_tokens({"tank", "mauve", "solid"}, cfg), ConfigError);
  CHECK_THROWS_AS(decode_tokens({"tank", "red"}, cfg), ConfigError);
  GarmentAttributes a{"dress", "red", "dots", "long"};
  CHECK(attribute_agreement({"dress", "red", "dots", "short"}, a) == 0.75);
  CHECK(attribute_agreement({"tank", "red", "dots", ""}, {"tshirt", "red", "solid", ""}) == doctest::Approx(1.0 / 3));
}

TEST_CASE("classifier tolerates pixel noise") {
  const GeneratorConfig cfg;
  int exact = 0;
  double agreement = 0;
  const int n = 500;
  for (std::uint64_t s = 0; s < n; ++s) {
    const SynthExample ex = synthesize_example(cfg, 5000 + s);
    CounterRng rng = CounterRng(91).fork(s);
    Tensor<float> noisy = ex.image;
    for (Index i = 0; i < noisy.size(); ++i) noisy[i] = std::clamp(noisy[i] + 20.0f * float(rng.normal()), 0.0f, 255.0f);
    const GarmentAttributes seen = classify_garment(noisy, cfg);
    exact += seen == ex.attributes;
    agreement += attribute_agreement(seen, ex.attributes);
  }
  CHECK(agreement / n >= 0.95);
  CHECK(exact / double(n) >= 0.85);
  MESSAGE("noisy agreement " << agreement / n << ", exact " << exact / double(n));
}

TEST_CASE("vocabulary covers every description") {
  GeneratorConfig cfg;
  Vocabulary vocab(vocabulary_words(cfg));
  for (std::uint64_t s = 0; s < 200; ++s) {
    for (const auto& w : synthesize_example(cfg, s).text) CHECK(vocab.id(w).has_value());
  }
}

TEST_CASE("dataset split, persistence and byte-identical regeneration") {
  GeneratorConfig cfg;
  cfg.seed = 7;
  const Dataset data = generate_dataset(cfg, 12, 4);
  REQUIRE(data.train.size() == 12);
  REQUIRE(data.test.size() == 4);
  CHECK(data.train.back().seed == 11);
  CHECK(data.test.front().seed == 12);

  const fs::path a = scratch("a"), b = scratch("b");
  save_dataset(data, a);
  save_dataset(generate_dataset(cfg, 12, 4), b);
  int files = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    ++files;
    REQUIRE(fs::exists(b / entry.path().filename()));
    CHECK(slurp(entry.path()) == slurp(b / entry.path().filename()));
  }
  CHECK(files == 16 + 3);

  const Dataset back = load_dataset(a);
  REQUIRE(back.train.size() == 12);
  REQUIRE(back.test.size() == 4);
  CHECK(back.config.seed == 7);
  for (std::size_t i = 0; i < 12; ++i) {
    CHECK(back.train[i].image == data.train[i].image);
    CHECK(back.train[i].style.patch == data.train[i].style.patch);
    CHECK(back.train[i].attributes == data.train[i].attributes);
  }
  const std::string manifest = slurp(a / "manifest.csv");
  CHECK(manifest.rfind("seed,category,color,pattern,split", 0) == 0);

  const fs::path rec = a / "example_000000.bin";
  const std::string bytes = slurp(rec);
  std::ofstream(rec, std::ios::binary | std::ios::trunc).write(bytes.data(), 40);
  CHECK_THROWS_WITH_AS(read_example(rec), doctest::Contains("truncated"), std::runtime_error);
  std::ofstream(rec, std::ios::binary | std::ios::trunc) << "JUNKJUNKJUNK";
  CHECK_THROWS_WITH_AS(read_example(rec), doctest::Contains("not an example record"), std::runtime_error);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("generator config validation and JSON round trip") {
  GeneratorConfig cfg;
  cfg.patterns.push_back("paisley");
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  GeneratorConfig ok;
  ok.seed = 42;
  ok.palette.pop_back();
  const GeneratorConfig back = generator_config_from_json(config_to_json(ok));
  CHECK(back.seed == 42);
  CHECK(back.palette.size() == ok.palette.size());
  CHECK(config_to_json(back) == config_to_json(ok));
}
