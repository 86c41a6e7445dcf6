#include "visreview/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "visreview/error.hpp"
#include "visreview/serialize.hpp"

namespace vr {

namespace {

constexpr std::uint64_t kRawStream = 0x726177;
constexpr std::uint64_t kAugmentStream = 0x617567;
constexpr std::uint64_t kSplitStream = 0x73706c;
constexpr std::uint64_t kDecoyStream = 0x64636f79;

bool inside_shape(std::size_t kind, double u, double v) {
  const double r = std::hypot(u, v);
  switch (kind % 6) {
    case 0: return r < 0.32;
    case 1: return r > 0.2 && r < 0.38;
    case 2: return (std::abs(u) < 0.1 || std::abs(v) < 0.1) && std::abs(u) < 0.4 && std::abs(v) < 0.4;
    case 3: {
      const double m = std::max(std::abs(u), std::abs(v));
      return m > 0.22 && m < 0.38;
    }
    case 4: return std::abs(u - v) < 0.15;
    default: return v > -0.35 && v < 0.3 && std::abs(u) < (v + 0.35) * 0.6;
  }
}

// Horizontal band of rows [y0, y0 + height) spanning the full width.
struct Band {
  std::size_t y0, height;
};

void draw_damage(Tensor& img, double intensity, const Band& q, Rng& rng) {
  if (intensity <= 0.0) return;
  const std::size_t channels = img.dim(0), size = img.dim(1);
  auto at = [&](std::size_t ch, std::size_t y, std::size_t x) -> double& { return img[(ch * size + y) * size + x]; };
  const double side = static_cast<double>(q.height);
  const double width = static_cast<double>(size);

  // brightness shift
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t y = q.y0; y < q.y0 + q.height; ++y)
      for (std::size_t x = 0; x < size; ++x) at(ch, y, x) += 0.2 * intensity;

  // checkered occluder, 2-pixel cells
  const auto patch = static_cast<std::size_t>(std::lround(0.7 * intensity * side));
  if (patch > 0) {
    const std::size_t px = rng.below(size - patch + 1);
    const std::size_t py = q.y0 + rng.below(q.height - patch + 1);
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t y = py; y < py + patch; ++y)
        for (std::size_t x = px; x < px + patch; ++x) at(ch, y, x) = ((y - py) / 2 + (x - px) / 2) % 2 ? 0.9 : 0.1;
  }

  // scratch strokes
  const auto strokes = static_cast<std::size_t>(std::lround(3.0 * intensity));
  for (std::size_t s = 0; s < strokes; ++s) {
    double x = rng.uniform(0.0, width);
    double y = static_cast<double>(q.y0) + rng.uniform(0.0, side);
    const double angle = rng.uniform(0.0, std::numbers::pi);
    const double dx = std::cos(angle) * 0.5, dy = std::sin(angle) * 0.5;
    for (std::size_t step = 0; step < static_cast<std::size_t>(1.4 * side); ++step, x += dx, y += dy) {
      if (x < 0.0 || y < static_cast<double>(q.y0) || x >= width || y >= static_cast<double>(q.y0) + side) break;
      for (std::size_t ch = 0; ch < channels; ++ch) at(ch, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 0.95;
    }
  }

  // additive noise, sigma = 0.3 * intensity
  const double sigma = 0.3 * intensity;
  for (std::size_t ch = 0; ch < channels; ++ch)
    for (std::size_t y = q.y0; y < q.y0 + q.height; ++y)
      for (std::size_t x = 0; x < size; ++x) at(ch, y, x) += sigma * rng.normal();

  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

Band half_band(std::size_t half, std::size_t size) { return {half * (size / 2), size / 2}; }

}  // namespace

void GeneratorConfig::validate() const {
  if (n_classes < 2) fail(ErrorCode::InvalidCounts, "generator needs at least two classes");
  if (per_score < 1) fail(ErrorCode::InvalidCounts, "generator needs at least one image per score");
  if (image_size < 4 || image_size % 2 != 0) fail(ErrorCode::InvalidCounts, "image size must be even and >= 4");
  if (channels == 0) fail(ErrorCode::InvalidCounts, "image needs at least one channel");
  if (score_high <= score_low) fail(ErrorCode::InvalidCounts, "score range must hold at least two values");
}

void to_json(nlohmann::json& j, const GeneratorConfig& c) {
  j = {{"n_classes", c.n_classes}, {"per_score", c.per_score}, {"image_size", c.image_size},
       {"channels", c.channels},   {"augment", c.augment},     {"seed", c.seed},
       {"decoys", c.decoys},       {"score_low", c.score_low}, {"score_high", c.score_high}};
}

void from_json(const nlohmann::json& j, GeneratorConfig& c) {
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.per_score = j.at("per_score").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.augment = j.at("augment").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.decoys = j.at("decoys").get<bool>();
  c.score_low = j.at("score_low").get<int>();
  c.score_high = j.at("score_high").get<int>();
}

double damage_intensity(int score, int score_low, int score_high) {
  if (score < score_low || score > score_high) fail(ErrorCode::LabelOutOfRange, "score outside the scale");
  return static_cast<double>(score_high - score) / static_cast<double>(score_high - score_low);
}

std::size_t cue_half(std::size_t product_class) { return (mix64(product_class ^ 0x637565) >> 29) & 1; }

Tensor render_motif(std::size_t product_class, const GeneratorConfig& config) {
  const std::size_t size = config.image_size, channels = config.channels;
  const double frequency = 2.0 + static_cast<double>((product_class / 6) % 4);
  const double theta = static_cast<double>((product_class * 3) % 8) * std::numbers::pi / 8.0;
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  Tensor img({channels, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) - centre) / static_cast<double>(size);
      const double v = (static_cast<double>(y) - centre) / static_cast<double>(size);
      const double grating = std::sin(2.0 * std::numbers::pi * frequency * (u * std::cos(theta) + v * std::sin(theta)));
      const double value = inside_shape(product_class, u, v) ? 0.6 + 0.25 * grating : 0.2 + 0.1 * grating;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double tint = 1.0 - 0.1 * static_cast<double>((product_class + ch) % 3) * (channels > 1 ? 1.0 : 0.0);
        img[(ch * size + y) * size + x] = value * tint;
      }
    }
  }
  return img;
}

Dataset generate_synthetic(const GeneratorConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.samples.reserve(config.raw_count());
  const Rng base(config.seed, kRawStream);
  const std::size_t levels = config.score_levels();
  std::uint64_t id = 0;
  for (std::size_t c = 0; c < config.n_classes; ++c) {
    const Tensor motif = render_motif(c, config);
    for (std::size_t level = 0; level < levels; ++level) {
      const int score = config.score_low + static_cast<int>(level);
      // Decoy intensities cycle through every score level within a cell so
      // they carry no information about the true score.
      const std::size_t offset = Rng(config.seed, kDecoyStream).split(c * levels + level).below(levels);
      for (std::size_t k = 0; k < config.per_score; ++k, ++id) {
        Rng rng = base.split(id);
        Sample s;
        s.id = id;
        s.parent_id = id;
        s.origin = Origin::raw;
        s.product_class = c;
        s.score = score;
        s.image = motif;
        const std::size_t half = cue_half(c);
        draw_damage(s.image, damage_intensity(score, config.score_low, config.score_high),
                    half_band(half, config.image_size), rng);
        if (config.decoys) {
          const int decoy_score = config.score_low + static_cast<int>((k + offset) % levels);
          draw_damage(s.image, damage_intensity(decoy_score, config.score_low, config.score_high),
                      half_band(1 - half, config.image_size), rng);
        }
        ds.samples.push_back(std::move(s));
      }
    }
  }
  return ds;
}

AugmentParams sample_augment_params(Rng& rng) {
  AugmentParams p;
  p.rotation_deg = rng.uniform(-25.0, 25.0);
  p.shift_x = rng.uniform(-0.1, 0.1);
  p.shift_y = rng.uniform(-0.1, 0.1);
  p.flip = rng.bernoulli(0.5);
  p.brightness = rng.uniform(0.7, 1.3);
  p.zoom = rng.uniform(0.85, 1.15);
  return p;
}

Tensor apply_augmentation(const Tensor& image, const AugmentParams& p) {
  if (image.rank() != 3 || image.dim(1) != image.dim(2)) {
    fail(ErrorCode::NonSquareImage, "augmentation expects a square C x H x H image");
  }
  const std::size_t channels = image.dim(0), size = image.dim(1);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  const double angle = p.rotation_deg * std::numbers::pi / 180.0;
  const double cos_a = std::cos(angle), sin_a = std::sin(angle);
  const double side = static_cast<double>(size);
  auto pixel = [&](std::size_t ch, long y, long x) {
    if (x < 0 || y < 0 || x >= static_cast<long>(size) || y >= static_cast<long>(size)) return 0.0;
    return image[(ch * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x)];
  };
  Tensor out({channels, size, size});
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      // invert shift, zoom, rotation, flip in that order
      double u = (static_cast<double>(x) - centre - p.shift_x * side) / p.zoom;
      double v = (static_cast<double>(y) - centre - p.shift_y * side) / p.zoom;
      const double ru = cos_a * u + sin_a * v;
      const double rv = -sin_a * u + cos_a * v;
      u = p.flip ? -ru : ru;
      v = rv;
      const double sx = u + centre, sy = v + centre;
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      for (std::size_t ch = 0; ch < channels; ++ch) {
        double value = pixel(ch, y0, x0) * (1.0 - ax) * (1.0 - ay);
        if (ax != 0.0) value += pixel(ch, y0, x0 + 1) * ax * (1.0 - ay);
        if (ay != 0.0) value += pixel(ch, y0 + 1, x0) * (1.0 - ax) * ay;
        if (ax != 0.0 && ay != 0.0) value += pixel(ch, y0 + 1, x0 + 1) * ax * ay;
        out[(ch * size + y) * size + x] = std::clamp(value * p.brightness, 0.0, 1.0);
      }
    }
  }
  return out;
}

std::vector<Sample> augment(const Sample& sample, std::size_t count, std::uint64_t seed, std::uint64_t first_id) {
  std::vector<Sample> out;
  out.reserve(count);
  const Rng base(seed, kAugmentStream);
  for (std::size_t j = 0; j < count; ++j) {
    Rng rng = base.split(first_id + j);
    Sample s;
    s.id = first_id + j;
    s.parent_id = sample.parent_id;
    s.origin = Origin::augmented;
    s.product_class = sample.product_class;
    s.score = sample.score;
    s.image = apply_augmentation(sample.image, sample_augment_params(rng));
    out.push_back(std::move(s));
  }
  return out;
}

Dataset build_dataset(const GeneratorConfig& config) {
  Dataset ds = generate_synthetic(config);
  const std::size_t raw = ds.samples.size();
  ds.samples.reserve(raw * (1 + config.augment));
  for (std::size_t i = 0; i < raw; ++i) {
    auto extra = augment(ds.samples[i], config.augment, config.seed, raw + i * config.augment);
    for (auto& s : extra) ds.samples.push_back(std::move(s));
  }
  return ds;
}

DatasetSplit split_dataset(const Dataset& dataset, SplitRatio ratio, std::uint64_t seed) {
  if (ratio.train == 0 || ratio.val == 0) fail(ErrorCode::InvalidArgument, "split ratio parts must be positive");
  if (dataset.samples.empty()) fail(ErrorCode::EmptyDataset, "cannot split an empty dataset");
  std::map<std::pair<std::size_t, int>, std::vector<std::uint64_t>> cells;
  for (const auto& s : dataset.samples) {
    if (s.origin == Origin::raw) cells[{s.product_class, s.score}].push_back(s.id);
  }
  std::map<std::uint64_t, bool> parent_in_val;
  const Rng base(seed, kSplitStream);
  std::uint64_t cell_index = 0;
  for (auto& [key, parents] : cells) {
    Rng rng = base.split(cell_index++);
    rng.shuffle(parents);
    const std::size_t n = parents.size();
    const std::size_t val = (n * ratio.val * 2 + (ratio.train + ratio.val)) / (2 * (ratio.train + ratio.val));
    if (val == 0 || val == n) {
      fail(ErrorCode::TooFewSamples, "cell (class " + std::to_string(key.first) + ", score " +
                                         std::to_string(key.second) + ") has too few raw images to split");
    }
    for (std::size_t i = 0; i < n; ++i) parent_in_val[parents[i]] = i < val;
  }
  DatasetSplit split;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    auto it = parent_in_val.find(dataset.samples[i].parent_id);
    if (it == parent_in_val.end()) fail(ErrorCode::CorruptManifest, "sample references a missing raw parent");
    (it->second ? split.val : split.train).push_back(i);
  }
  return split;
}

std::vector<const Sample*> select(const Dataset& dataset, std::span<const std::size_t> indices) {
  std::vector<const Sample*> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(&dataset.samples.at(i));
  return out;
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create dataset directory " + dir.string());
  std::string blob;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& s : dataset.samples) {
    const std::string bytes = encode_tensor(s.image);
    index.push_back({{"id", s.id},
                     {"class", s.product_class},
                     {"score", s.score},
                     {"origin", s.origin == Origin::raw ? "raw" : "augmented"},
                     {"parent", s.parent_id},
                     {"offset", static_cast<std::uint64_t>(blob.size())},
                     {"length", static_cast<std::uint64_t>(bytes.size())}});
    blob += bytes;
  }
  nlohmann::json manifest = {{"format", "visreview-dataset"},
                             {"version", 1},
                             {"generator", dataset.config},
                             {"sample_count", dataset.samples.size()},
                             {"images_bytes", static_cast<std::uint64_t>(blob.size())},
                             {"images_crc32", crc32(blob)},
                             {"samples", index}};
  write_file(dir / "images.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptManifest, "manifest.json is not valid JSON: " + std::string(e.what()));
  }
  const std::string blob = read_file(dir / "images.bin");
  try {
    if (manifest.at("format") != "visreview-dataset" || manifest.at("version") != 1) {
      fail(ErrorCode::CorruptManifest, "unsupported dataset format");
    }
    if (manifest.at("images_bytes").get<std::uint64_t>() != blob.size()) {
      fail(ErrorCode::CorruptManifest, "images.bin size differs from the manifest");
    }
    if (manifest.at("images_crc32").get<std::uint32_t>() != crc32(blob)) {
      fail(ErrorCode::CorruptManifest, "images.bin checksum mismatch");
    }
    ds.config = manifest.at("generator").get<GeneratorConfig>();
    const auto& entries = manifest.at("samples");
    ds.samples.reserve(entries.size());
    for (const auto& e : entries) {
      Sample s;
      s.id = e.at("id").get<std::uint64_t>();
      s.product_class = e.at("class").get<std::size_t>();
      s.score = e.at("score").get<int>();
      s.origin = e.at("origin").get<std::string>() == "raw" ? Origin::raw : Origin::augmented;
      s.parent_id = e.at("parent").get<std::uint64_t>();
      const auto offset = e.at("offset").get<std::uint64_t>();
      const auto length = e.at("length").get<std::uint64_t>();
      if (offset + length > blob.size()) fail(ErrorCode::CorruptManifest, "sample blob outside images.bin");
      s.image = decode_tensor(std::string_view(blob).substr(offset, length));
      ds.samples.push_back(std::move(s));
    }
    if (manifest.at("sample_count").get<std::size_t>() != ds.samples.size()) {
      fail(ErrorCode::CorruptManifest, "sample count differs from the manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptManifest, "malformed manifest: " + std::string(e.what()));
  }
  return ds;
}

}  // namespace vr
