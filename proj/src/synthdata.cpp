#include "sgdiff/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "sgdiff/config.hpp"

namespace sgdiff {
namespace {

using Point = std::array<double, 2>;

// Silhouettes on a 16 x 16 design grid (x right, y down).
const std::map<std::string, std::vector<Point>>& polygons() {
  static const std::map<std::string, std::vector<Point>> shapes = {
      {"tshirt", {{5, 2}, {11, 2}, {15, 6}, {13, 8}, {12, 7}, {12, 15}, {4, 15}, {4, 7}, {3, 8}, {1, 6}}},
      {"tank", {{4.5, 1.5}, {7, 1.5}, {8, 4}, {9, 1.5}, {11.5, 1.5}, {11.5, 6}, {12.5, 15}, {3.5, 15}, {4.5, 6}}},
      {"dress/long", {{6, 1}, {10, 1}, {10, 6}, {14, 15}, {2, 15}, {6, 6}}},
      {"dress/short", {{5, 1}, {11, 1}, {11, 5}, {14, 12}, {2, 12}, {5, 5}}},
      {"pants", {{3, 1}, {13, 1}, {14, 15}, {9.5, 15}, {8, 6}, {6.5, 15}, {2, 15}}},
      {"skirt/long", {{5, 2}, {11, 2}, {14, 15}, {2, 15}}},
      {"skirt/short", {{5, 3}, {11, 3}, {14, 11}, {2, 11}}},
      {"jacket", {{5, 1}, {11, 1}, {15, 4}, {15, 14}, {12, 14}, {12, 15}, {4, 15}, {4, 14}, {1, 14}, {1, 4}}},
  };
  return shapes;
}

bool inside(const std::vector<Point>& poly, double x, double y) {
  bool in = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const auto& a = poly[i];
    const auto& b = poly[j];
    if ((a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
  }
  return in;
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) throw std::runtime_error("truncated record: " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

void put_tensor(std::ostream& out, const Tensor<float>& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (int a = 0; a < t.rank(); ++a) put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(a)));
  for (Index i = 0; i < t.size(); ++i) put<float>(out, t[i]);
}

Tensor<float> get_tensor(std::istream& in, const std::string& what) {
  const auto rank = get<std::uint32_t>(in, what);
  if (rank > 8) throw std::runtime_error("corrupt record: " + what + " rank " + std::to_string(rank));
  Shape shape;
  for (std::uint32_t a = 0; a < rank; ++a) shape.push_back(get<std::uint32_t>(in, what));
  Tensor<float> t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = get<float>(in, what);
  return t;
}

struct PatternParams {
  int period = 2, check = 2, spacing = 3, off_x = 0, off_y = 0;
};

PatternParams draw_pattern_params(const GeneratorConfig& cfg, CounterRng& rng) {
  auto range = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };
  PatternParams p;
  p.period = range(cfg.stripe_period_min, cfg.stripe_period_max);
  p.check = range(cfg.check_size_min, cfg.check_size_max);
  p.spacing = range(cfg.dot_spacing_min, cfg.dot_spacing_max);
  p.off_x = static_cast<int>(rng.below(8));
  p.off_y = static_cast<int>(rng.below(8));
  return p;
}

// Pattern geometry lives on the 16-pixel design grid and scales with the image.
bool accent_at(const std::string& pattern, const PatternParams& p, int x, int y, int size) {
  const int unit = std::max(1, size / 16);
  const int gx = x / unit + p.off_x, gy = y / unit + p.off_y;
  if (pattern == "stripes") return gy % p.period < p.period / 2;
  if (pattern == "checks") return (gx / p.check + gy / p.check) % 2 == 1;
  if (pattern == "dots") return gx % p.spacing == 0 && gy % p.spacing == 0;
  return false;
}

constexpr char kRecordMagic[4] = {'S', 'G', 'E', 'X'};
constexpr std::uint32_t kRecordVersion = 1;

std::string record_name(std::uint64_t seed) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "example_%06llu.bin", static_cast<unsigned long long>(seed));
  return buf;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (image_size < 4 || image_size % 16 != 0) throw ConfigError("image size must be a positive multiple of 16");
  if (patch_size < 1 || patch_size > image_size) throw ConfigError("patch size must lie in [1, image size]");
  if (categories.empty() || palette.empty() || patterns.empty()) throw ConfigError("generator sets must be non-empty");
  for (const auto& c : categories) {
    if (!polygons().count(c) && !polygons().count(c + "/long")) throw ConfigError("no template for category " + c);
  }
  for (const auto& p : patterns) {
    if (p != "solid" && p != "stripes" && p != "checks" && p != "dots") throw ConfigError("unknown pattern " + p);
  }
  if (stripe_period_min < 2 || stripe_period_max < stripe_period_min || check_size_min < 1 ||
      check_size_max < check_size_min || dot_spacing_min < 2 || dot_spacing_max < dot_spacing_min) {
    throw ConfigError("invalid pattern parameter ranges");
  }
}

bool has_length_variant(const std::string& category) { return polygons().count(category + "/long") != 0; }

std::vector<std::uint8_t> garment_template(const std::string& category, const std::string& length, int size) {
  const std::string key = has_length_variant(category) ? category + "/" + (length.empty() ? "long" : length) : category;
  auto it = polygons().find(key);
  if (it == polygons().end()) throw ConfigError("no template for " + key);
  const double scale = 16.0 / size;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(size * size));
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) mask[static_cast<std::size_t>(y * size + x)] = inside(it->second, (x + 0.5) * scale, (y + 0.5) * scale);
  return mask;
}

std::vector<std::string> describe(const GarmentAttributes& a) {
  std::vector<std::string> out = {a.category, a.color, a.pattern};
  if (!a.length.empty()) out.push_back(a.length);
  return out;
}

std::string describe_text(const GarmentAttributes& a) {
  std::string s;
  for (const auto& w : describe(a)) s += (s.empty() ? "" : " ") + w;
  return s;
}

GarmentAttributes decode_tokens(const std::vector<std::string>& tokens, const GeneratorConfig& cfg) {
  GarmentAttributes a;
  for (const auto& t : tokens) {
    if (std::find(cfg.categories.begin(), cfg.categories.end(), t) != cfg.categories.end()) {
      a.category = t;
    } else if (std::any_of(cfg.palette.begin(), cfg.palette.end(), [&](const NamedColor& c) { return c.name == t; })) {
      a.color = t;
    } else if (std::find(cfg.patterns.begin(), cfg.patterns.end(), t) != cfg.patterns.end()) {
      a.pattern = t;
    } else if (t == "long" || t == "short") {
      a.length = t;
    } else {
      throw ConfigError("token '" + t + "' is not a garment attribute");
    }
  }
  if (a.category.empty() || a.color.empty() || a.pattern.empty()) throw ConfigError("incomplete garment description");
  return a;
}

SynthExample synthesize_example(const GeneratorConfig& cfg, std::uint64_t seed) {
  const int n = cfg.image_size;
  CounterRng rng = CounterRng(cfg.seed).fork(seed);
  SynthExample ex;
  ex.seed = seed;
  auto& a = ex.attributes;
  a.category = cfg.categories[rng.below(cfg.categories.size())];
  if (has_length_variant(a.category)) a.length = rng.below(2) ? "short" : "long";
  const NamedColor& color = cfg.palette[rng.below(cfg.palette.size())];
  a.color = color.name;
  a.pattern = cfg.patterns[rng.below(cfg.patterns.size())];

  const PatternParams pp = draw_pattern_params(cfg, rng);
  const auto shape = garment_template(a.category, a.length, n);
  ex.image = Tensor<float>({3, n, n});
  ex.mask = Tensor<float>({n, n});
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const bool accent = accent_at(a.pattern, pp, x, y, n);
      const bool fg = shape[static_cast<std::size_t>(y * n + x)] != 0;
      ex.mask[y * n + x] = fg ? 1.0f : 0.0f;
      for (int c = 0; c < 3; ++c) {
        const float base = color.rgb[static_cast<std::size_t>(c)];
        ex.image[(c * n + y) * n + x] = fg ? std::round(accent ? base * cfg.accent_scale : base) : cfg.background_raw;
      }
    }
  ex.text = describe(a);
  CounterRng crop_rng = rng.fork(1);
  ex.style = style_crop(ex.image, ex.mask, cfg.patch_size, crop_rng);
  return ex;
}

Tensor<float> texture_patch(const GeneratorConfig& cfg, const std::string& color, const std::string& pattern, int size,
                            std::uint64_t seed) {
  const auto it = std::find_if(cfg.palette.begin(), cfg.palette.end(), [&](const NamedColor& c) { return c.name == color; });
  if (it == cfg.palette.end()) throw ConfigError("unknown colour '" + color + "'");
  if (std::find(cfg.patterns.begin(), cfg.patterns.end(), pattern) == cfg.patterns.end()) {
    throw ConfigError("unknown pattern '" + pattern + "'");
  }
  CounterRng rng(seed);
  const PatternParams pp = draw_pattern_params(cfg, rng);
  Tensor<float> out({3, size, size});
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool accent = accent_at(pattern, pp, x, y, cfg.image_size);
      for (int c = 0; c < 3; ++c) {
        const float base = it->rgb[static_cast<std::size_t>(c)];
        out[(c * size + y) * size + x] = std::round(accent ? base * cfg.accent_scale : base);
      }
    }
  return out;
}

StyleCrop style_crop(const Tensor<float>& image, const Tensor<float>& mask, int P, CounterRng& rng) {
  const int h = static_cast<int>(mask.dim(0)), w = static_cast<int>(mask.dim(1));
  if (P > h || P > w) throw ConfigError("style patch larger than the image");
  auto coverage = [&](int x0, int y0) {
    double s = 0;
    for (int y = y0; y < y0 + P; ++y)
      for (int x = x0; x < x0 + P; ++x) s += mask[y * w + x];
    return s / (P * P);
  };
  int bx = -1, by = -1;
  double best = -1;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const int x = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - P + 1)));
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - P + 1)));
    const double c = coverage(x, y);
    if (c >= 0.95) {
      bx = x, by = y, best = c;
      break;
    }
  }
  if (bx < 0) {
    for (int y = 0; y + P <= h; ++y)
      for (int x = 0; x + P <= w; ++x) {
        const double c = coverage(x, y);
        if (c > best) best = c, bx = x, by = y;
      }
  }
  StyleCrop crop;
  crop.x = bx;
  crop.y = by;
  crop.coverage = best;
  crop.patch = Tensor<float>({3, P, P});
  crop.mask = Tensor<float>({P, P});
  for (int y = 0; y < P; ++y)
    for (int x = 0; x < P; ++x) {
      crop.mask[y * P + x] = mask[(by + y) * w + bx + x];
      for (int c = 0; c < 3; ++c) crop.patch[(c * P + y) * P + x] = image[(c * h + by + y) * w + bx + x];
    }
  return crop;
}

Tensor<float> mask_background(const Tensor<float>& image_raw, const Tensor<float>& mask) {
  if (image_raw.rank() != 3 || mask.rank() != 2 || image_raw.dim(1) != mask.dim(0) || image_raw.dim(2) != mask.dim(1)) {
    throw DimensionError("mask_background: image " + shape_string(image_raw.shape()) + " and mask " +
                         shape_string(mask.shape()) + " are incompatible");
  }
  const Index plane = mask.size();
  Tensor<float> out(image_raw.shape());
  for (Index c = 0; c < image_raw.dim(0); ++c)
    for (Index i = 0; i < plane; ++i) {
      const float raw = mask[i] > 0.5f ? image_raw[c * plane + i] : kMaskedRaw;
      out[c * plane + i] = normalize_pixel(raw);
    }
  return out;
}

Tensor<float> normalize_image(const Tensor<float>& image_raw) {
  Tensor<float> out(image_raw.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = normalize_pixel(image_raw[i]);
  return out;
}

std::vector<std::string> vocabulary_words(const GeneratorConfig& cfg) {
  std::vector<std::string> words = cfg.categories;
  for (const auto& c : cfg.palette) words.push_back(c.name);
  words.insert(words.end(), cfg.patterns.begin(), cfg.patterns.end());
  words.push_back("long");
  words.push_back("short");
  return words;
}

GarmentAttributes classify_garment(const Tensor<float>& img, const GeneratorConfig& cfg) {
  const int n = static_cast<int>(img.dim(1));
  const Index plane = static_cast<Index>(n) * n;
  auto pixel = [&](Index i) { return Rgb{img[i], img[plane + i], img[2 * plane + i]}; };
  auto dist2 = [](const Rgb& a, const Rgb& b) {
    float d = 0;
    for (std::size_t c = 0; c < 3; ++c) d += (a[c] - b[c]) * (a[c] - b[c]);
    return d;
  };
  const Rgb background{cfg.background_raw, cfg.background_raw, cfg.background_raw};

  // Foreground: far from the background colour, then a 3x3 majority vote to
  // drop isolated noisy pixels.
  std::vector<std::uint8_t> raw_fg(static_cast<std::size_t>(plane)), fg(static_cast<std::size_t>(plane));
  for (Index i = 0; i < plane; ++i) raw_fg[static_cast<std::size_t>(i)] = dist2(pixel(i), background) > 45.0f * 45.0f;
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int votes = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && xx >= 0 && yy < n && xx < n) votes += raw_fg[static_cast<std::size_t>(yy * n + xx)];
        }
      fg[static_cast<std::size_t>(y * n + x)] = votes >= 5;
    }

  GarmentAttributes out;
  double best_iou = -1;
  for (const auto& category : cfg.categories) {
    const std::vector<std::string> lengths = has_length_variant(category) ? std::vector<std::string>{"long", "short"}
                                                                          : std::vector<std::string>{""};
    for (const auto& length : lengths) {
      const auto t = garment_template(category, length, n);
      double inter = 0, uni = 0;
      for (std::size_t i = 0; i < t.size(); ++i) {
        inter += t[i] && fg[i];
        uni += t[i] || fg[i];
      }
      const double iou = uni > 0 ? inter / uni : 0;
      if (iou > best_iou) best_iou = iou, out.category = category, out.length = length;
    }
  }

  std::vector<Index> members;
  std::vector<float> fg_lum;
  for (Index i = 0; i < plane; ++i) {
    if (!fg[static_cast<std::size_t>(i)]) continue;
    members.push_back(i);
    const Rgb p = pixel(i);
    fg_lum.push_back(luma(p[0], p[1], p[2]));
  }
  if (members.empty()) {
    out.color = cfg.palette.front().name;
    out.pattern = "solid";
    return out;
  }

  // Colour: the brighter 40% of the garment (accents are darker) vote for
  // their nearest palette entry.
  std::vector<float> sorted = fg_lum;
  std::sort(sorted.begin(), sorted.end());
  const float bright_cut = sorted[static_cast<std::size_t>(0.6 * static_cast<double>(sorted.size() - 1))];
  std::vector<int> votes(cfg.palette.size(), 0);
  for (std::size_t k = 0; k < members.size(); ++k) {
    if (fg_lum[k] < bright_cut) continue;
    const Rgb p = pixel(members[k]);
    std::size_t best = 0;
    for (std::size_t c = 1; c < cfg.palette.size(); ++c) {
      if (dist2(p, cfg.palette[c].rgb) < dist2(p, cfg.palette[best].rgb)) best = c;
    }
    ++votes[best];
  }
  const auto winner = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  out.color = cfg.palette[winner].name;

  // Pattern: a pixel is an accent when it is nearer the darkened base colour.
  const Rgb base = cfg.palette[winner].rgb;
  const Rgb accent{base[0] * cfg.accent_scale, base[1] * cfg.accent_scale, base[2] * cfg.accent_scale};
  double dark = 0, mixed = 0;
  int rows = 0;
  for (int y = 0; y < n; ++y) {
    int count = 0, dark_row = 0;
    for (int x = 0; x < n; ++x) {
      const auto i = static_cast<std::size_t>(y * n + x);
      if (!fg[i]) continue;
      ++count;
      const Rgb p = pixel(static_cast<Index>(i));
      dark_row += dist2(p, accent) < dist2(p, base);
    }
    dark += dark_row;
    if (count >= 3) {
      const double f = static_cast<double>(dark_row) / count;
      mixed += std::min(f, 1.0 - f);
      ++rows;
    }
  }
  const double dark_fraction = dark / static_cast<double>(members.size());
  if (dark_fraction < 0.02) {
    out.pattern = "solid";
  } else if (dark_fraction < 0.22) {
    out.pattern = "dots";
  } else {
    out.pattern = (rows > 0 && mixed / rows > 0.2) ? "checks" : "stripes";
  }
  auto allowed = [&](const std::string& p) { return std::find(cfg.patterns.begin(), cfg.patterns.end(), p) != cfg.patterns.end(); };
  if (!allowed(out.pattern)) out.pattern = cfg.patterns.front();
  return out;
}

double attribute_agreement(const GarmentAttributes& p, const GarmentAttributes& t) {
  double hits = (p.category == t.category) + (p.color == t.color) + (p.pattern == t.pattern);
  double total = 3;
  if (!t.length.empty()) {
    hits += p.length == t.length;
    total += 1;
  }
  return hits / total;
}

Dataset generate_dataset(const GeneratorConfig& cfg, int n_train, int n_test) {
  cfg.validate();
  if (n_train < 0 || n_test < 0) throw ConfigError("dataset sizes must be non-negative");
  Dataset data;
  data.config = cfg;
  for (int i = 0; i < n_train; ++i) data.train.push_back(synthesize_example(cfg, static_cast<std::uint64_t>(i)));
  for (int i = 0; i < n_test; ++i) data.test.push_back(synthesize_example(cfg, static_cast<std::uint64_t>(n_train + i)));
  return data;
}

void write_example(const SynthExample& ex, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kRecordMagic, 4);
  put<std::uint32_t>(out, kRecordVersion);
  put<std::uint64_t>(out, ex.seed);
  const std::string text = describe_text(ex.attributes);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put<std::int32_t>(out, ex.style.x);
  put<std::int32_t>(out, ex.style.y);
  put_tensor(out, ex.image);
  put_tensor(out, ex.mask);
  put_tensor(out, ex.style.patch);
  put_tensor(out, ex.style.mask);
}

SynthExample read_example(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kRecordMagic, 4) != 0) {
    throw std::runtime_error("not an example record: " + path.string());
  }
  const auto version = get<std::uint32_t>(in, path.string());
  if (version != kRecordVersion) throw std::runtime_error("unsupported record version " + std::to_string(version));
  SynthExample ex;
  ex.seed = get<std::uint64_t>(in, path.string());
  const auto len = get<std::uint32_t>(in, path.string());
  if (len > 4096) throw std::runtime_error("corrupt record: " + path.string());
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw std::runtime_error("truncated record: " + path.string());
  std::istringstream words(text);
  for (std::string w; words >> w;) ex.text.push_back(w);
  ex.style.x = get<std::int32_t>(in, path.string());
  ex.style.y = get<std::int32_t>(in, path.string());
  ex.image = get_tensor(in, path.string());
  ex.mask = get_tensor(in, path.string());
  ex.style.patch = get_tensor(in, path.string());
  ex.style.mask = get_tensor(in, path.string());
  ex.style.coverage = ex.style.mask.vec().mean();
  return ex;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv");
  manifest << "seed,category,color,pattern,split,length\n";
  auto emit = [&](const std::vector<SynthExample>& split, const char* name) {
    for (const auto& ex : split) {
      write_example(ex, dir / record_name(ex.seed));
      manifest << ex.seed << ',' << ex.attributes.category << ',' << ex.attributes.color << ','
               << ex.attributes.pattern << ',' << name << ',' << ex.attributes.length << '\n';
    }
  };
  emit(data.train, "train");
  emit(data.test, "test");
  Vocabulary(vocabulary_words(data.config)).save(dir / "vocab.txt");
  std::ofstream gen(dir / "generator.json");
  gen << config_to_json(data.config).dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream gen(dir / "generator.json");
  if (!gen) throw std::runtime_error("dataset " + dir.string() + " has no generator.json");
  Dataset data;
  data.config = generator_config_from_json(nlohmann::json::parse(gen));
  std::ifstream manifest(dir / "manifest.csv");
  if (!manifest) throw std::runtime_error("dataset " + dir.string() + " has no manifest.csv");
  std::string line;
  std::getline(manifest, line);
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string seed, category, color, pattern, split;
    std::getline(fields, seed, ',');
    std::getline(fields, category, ',');
    std::getline(fields, color, ',');
    std::getline(fields, pattern, ',');
    std::getline(fields, split, ',');
    SynthExample ex = read_example(dir / record_name(std::stoull(seed)));
    ex.attributes = decode_tokens(ex.text, data.config);
    if (ex.attributes.category != category || ex.attributes.color != color || ex.attributes.pattern != pattern) {
      throw std::runtime_error("manifest row for seed " + seed + " disagrees with its record");
    }
    (split == "test" ? data.test : data.train).push_back(std::move(ex));
  }
  return data;
}

}  // namespace sgdiff
