#include "blto/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "blto/common.hpp"

namespace blto {

namespace fs = std::filesystem;

std::string to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "test") return Split::kTest;
  throw ArgumentError("unknown split '" + s + "' (expected train or test)");
}

LabeledImageSet LabeledImageSet::select(const torch::Tensor& indices) const {
  LabeledImageSet out;
  out.images = images.index_select(0, indices);
  out.labels = labels.index_select(0, indices);
  out.class_names = class_names;
  out.split = split;
  return out;
}

void LabeledImageSet::validate() const {
  if (!images.defined() || !labels.defined()) throw ArgumentError("dataset tensors undefined");
  if (images.dim() != 4) throw ArgumentError("images must be [N, C, H, W]");
  if (labels.dim() != 1) throw ArgumentError("labels must be [N]");
  if (images.size(0) != labels.size(0)) {
    throw ArgumentError("images and labels differ in leading dimension");
  }
  if (images.scalar_type() != torch::kFloat32) throw ArgumentError("images must be float32");
  if (labels.scalar_type() != torch::kInt64) throw ArgumentError("labels must be int64");
  if (size() == 0) return;
  if (images.min().item<float>() < 0.0f || images.max().item<float>() > 1.0f) {
    throw ArgumentError("pixel values outside [0, 1]");
  }
  if (labels.min().item<int64_t>() < 0 || labels.max().item<int64_t>() >= num_classes()) {
    throw ArgumentError("label outside [0, num_classes)");
  }
}

const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names = {"airplane", "automobile", "bird",  "cat",  "deer",
                                                 "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

namespace {

constexpr int64_t kCifarSide = 32;
constexpr int64_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr int64_t kCifarRecord = 1 + kCifarPixels;
constexpr int64_t kCifarBatchRecords = 10000;

fs::path cifar_dir(const fs::path& root) {
  if (fs::exists(root / "test_batch.bin") || fs::exists(root / "data_batch_1.bin")) return root;
  return root / "cifar-10-batches-bin";
}

void read_cifar_batch(const fs::path& file, uint8_t* pixels, int64_t* labels) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError(file.string(), "cannot open CIFAR-10 batch file");
  std::error_code ec;
  auto size = fs::file_size(file, ec);
  if (ec || size != static_cast<uintmax_t>(kCifarRecord * kCifarBatchRecords)) {
    throw IngestionError(file.string(), "unexpected size " + std::to_string(size) + " (expected " +
                                            std::to_string(kCifarRecord * kCifarBatchRecords) + ")");
  }
  std::vector<uint8_t> record(kCifarRecord);
  for (int64_t i = 0; i < kCifarBatchRecords; ++i) {
    if (!in.read(reinterpret_cast<char*>(record.data()), kCifarRecord)) {
      throw IngestionError(file.string(), "truncated record " + std::to_string(i));
    }
    if (record[0] > 9) {
      throw IngestionError(file.string(), "label byte out of range in record " + std::to_string(i));
    }
    labels[i] = record[0];
    std::copy(record.begin() + 1, record.end(), pixels + i * kCifarPixels);
  }
}

}  // namespace

LabeledImageSet load_cifar10(const fs::path& root, Split split) {
  const fs::path dir = cifar_dir(root);
  std::vector<fs::path> files;
  if (split == Split::kTrain) {
    for (int b = 1; b <= 5; ++b) files.push_back(dir / ("data_batch_" + std::to_string(b) + ".bin"));
  } else {
    files.push_back(dir / "test_batch.bin");
  }
  const int64_t n = kCifarBatchRecords * static_cast<int64_t>(files.size());
  auto raw = torch::empty({n, 3, kCifarSide, kCifarSide}, torch::kUInt8);
  auto labels = torch::empty({n}, torch::kInt64);
  for (size_t b = 0; b < files.size(); ++b) {
    read_cifar_batch(files[b], raw.data_ptr<uint8_t>() + b * kCifarBatchRecords * kCifarPixels,
                     labels.data_ptr<int64_t>() + b * kCifarBatchRecords);
  }
  LabeledImageSet out;
  out.images = raw.to(torch::kFloat32).div_(255.0f);
  out.labels = labels;
  out.class_names = cifar10_class_names();
  out.split = split;
  return out;
}

torch::Tensor quantize_8bit(const torch::Tensor& images) {
  return images.mul(255.0f).round_().clamp_(0.0f, 255.0f).div_(255.0f);
}

namespace {

struct ClassStyle {
  int shape;  // 0 disk, 1 square, 2 triangle, 3 cross, 4 ring, 5 diamond
  double hue;
  double stripe_freq;
};

constexpr double kHueJitter = 0.12;
constexpr double kStripeAmplitude = 0.12;
constexpr double kNoiseSigma = 0.04;

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double i = std::floor(h * 6.0);
  const double f = h * 6.0 - i;
  const double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: return {float(v), float(t), float(p)};
    case 1: return {float(q), float(v), float(p)};
    case 2: return {float(p), float(v), float(t)};
    case 3: return {float(p), float(q), float(v)};
    case 4: return {float(t), float(p), float(v)};
    default: return {float(v), float(p), float(q)};
  }
}

// Appearance depends on the class index only, so train and test sets drawn
// with different seeds share class definitions.
ClassStyle class_style(int64_t c) {
  ClassStyle s;
  s.shape = static_cast<int>(c % 6);
  s.hue = std::fmod(0.07 + 0.618033988749895 * static_cast<double>(c), 1.0);
  s.stripe_freq = 2.0 + static_cast<double>(c % 3);
  return s;
}

bool inside_shape(int shape, double dx, double dy, double r) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  switch (shape) {
    case 0: return dx * dx + dy * dy <= r * r;
    case 1: return ax <= 0.8 * r && ay <= 0.8 * r;
    case 2: return dy <= 0.7 * r && dy >= -r + 2.0 * ax;  // apex up
    case 3: return (ax <= 0.3 * r && ay <= r) || (ay <= 0.3 * r && ax <= r);
    case 4: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.45 * r * r;
    }
    default: return ax + ay <= r;
  }
}

}  // namespace

LabeledImageSet make_synthetic_set(int64_t num_classes, int64_t per_class, int64_t image_size,
                                   uint64_t seed, Split split) {
  if (num_classes < 2) throw ArgumentError("num_classes must be >= 2");
  if (per_class < 2) throw ArgumentError("per_class must be >= 2");
  if (image_size < 8) throw ArgumentError("image_size must be >= 8");

  const int64_t n = num_classes * per_class;
  const int64_t side = image_size;
  auto images = torch::empty({n, 3, side, side}, torch::kFloat32);
  auto labels = torch::empty({n}, torch::kInt64);
  float* px = images.data_ptr<float>();
  int64_t* lb = labels.data_ptr<int64_t>();

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);

  std::vector<ClassStyle> styles;
  for (int64_t c = 0; c < num_classes; ++c) styles.push_back(class_style(c));

  // Interleave classes so any prefix is roughly balanced.
  for (int64_t i = 0; i < n; ++i) {
    const int64_t c = i % num_classes;
    const ClassStyle& st = styles[c];
    lb[i] = c;
    const double cx = side * (0.5 + 0.3 * (unit(rng) - 0.5));
    const double cy = side * (0.5 + 0.3 * (unit(rng) - 0.5));
    const double r = side * (0.22 + 0.1 * unit(rng));
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    const double gain = 0.9 + 0.2 * unit(rng);
    // Foreground hue stays near the class hue; background and stripe
    // orientation are nuisance factors shared by all classes.
    const auto fg = hsv_to_rgb(st.hue + kHueJitter * (unit(rng) - 0.5), 0.5 + 0.4 * unit(rng), 0.6 + 0.35 * unit(rng));
    const auto bg = hsv_to_rgb(unit(rng), 0.1 + 0.25 * unit(rng), 0.25 + 0.3 * unit(rng));
    const double angle = std::numbers::pi * unit(rng);
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (int64_t y = 0; y < side; ++y) {
      for (int64_t x = 0; x < side; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / side;
        const double v = (static_cast<double>(y) + 0.5) / side;
        const double stripe =
            kStripeAmplitude * std::sin(2.0 * std::numbers::pi * st.stripe_freq * (u * ca + v * sa) + phase);
        const bool inside = inside_shape(st.shape, x + 0.5 - cx, y + 0.5 - cy, r);
        for (int64_t ch = 0; ch < 3; ++ch) {
          double val = inside ? fg[ch] : bg[ch] + stripe;
          val = val * gain + noise(rng);
          px[((i * 3 + ch) * side + y) * side + x] = static_cast<float>(std::clamp(val, 0.0, 1.0));
        }
      }
    }
  }

  LabeledImageSet out;
  out.images = quantize_8bit(images);
  out.labels = labels;
  for (int64_t c = 0; c < num_classes; ++c) out.class_names.push_back("class" + std::to_string(c));
  out.split = split;
  return out;
}

ReferenceSplit split_reference(const LabeledImageSet& data, int64_t target_class,
                               int64_t reference_count) {
  if (target_class < 0 || target_class >= data.num_classes()) {
    throw ArgumentError("target_class " + std::to_string(target_class) + " out of range");
  }
  if (reference_count < 0) throw ArgumentError("reference_count must be >= 0");
  const auto labels = data.labels.contiguous();
  const int64_t* lb = labels.data_ptr<int64_t>();
  std::vector<int64_t> ref, clean;
  for (int64_t i = 0; i < data.size(); ++i) {
    if (lb[i] == target_class && static_cast<int64_t>(ref.size()) < reference_count) {
      ref.push_back(i);
    } else {
      clean.push_back(i);
    }
  }
  if (static_cast<int64_t>(ref.size()) < reference_count) {
    throw ArgumentError("only " + std::to_string(ref.size()) + " samples of class " +
                        std::to_string(target_class) + ", need " + std::to_string(reference_count));
  }
  ReferenceSplit s;
  s.reference_indices = torch::tensor(ref, torch::kInt64);
  s.clean_indices = torch::tensor(clean, torch::kInt64);
  s.clean_pool = data.select(s.clean_indices);
  s.reference_set = data.select(s.reference_indices);
  s.target_class = target_class;
  s.target_name = data.class_names[target_class];
  return s;
}

int64_t reference_count_for_rate(double rate, int64_t dataset_size) {
  if (rate < 0.0 || rate > 1.0) throw ArgumentError("poisoning rate must lie in [0, 1]");
  return static_cast<int64_t>(std::llround(rate * static_cast<double>(dataset_size)));
}

// ---------------------------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& v, char sep) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out.push_back(sep);
    out += v[i];
  }
  return out;
}

std::vector<std::string> split_on(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  return out;
}

void write_pnm(const fs::path& file, const torch::Tensor& image) {
  // image: [C, H, W] float in [0, 1]
  const int64_t c = image.size(0), h = image.size(1), w = image.size(2);
  auto bytes = image.mul(255.0f).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << (c == 3 ? "P6" : "P5") << "\n" << w << " " << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
  if (!out) throw std::runtime_error("write failed: " + file.string());
}

torch::Tensor read_pnm(const fs::path& file, int64_t& channels) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError(file.string(), "cannot open image");
  std::string magic;
  int64_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if ((magic != "P6" && magic != "P5") || w <= 0 || h <= 0 || maxval != 255) {
    throw IngestionError(file.string(), "not an 8-bit binary PPM/PGM image");
  }
  channels = magic == "P6" ? 3 : 1;
  auto bytes = torch::empty({h, w, channels}, torch::kUInt8);
  if (!in.read(reinterpret_cast<char*>(bytes.data_ptr<uint8_t>()), bytes.numel())) {
    throw IngestionError(file.string(), "truncated pixel data");
  }
  return bytes.permute({2, 0, 1}).to(torch::kFloat32).div_(255.0f).contiguous();
}

}  // namespace

void export_image_dir(const LabeledImageSet& data, const fs::path& dir, const ImageDirHeader& header,
                      const std::vector<bool>& poisoned) {
  if (!poisoned.empty() && static_cast<int64_t>(poisoned.size()) != data.size()) {
    throw ArgumentError("poisoned flag count differs from dataset size");
  }
  fs::create_directories(dir);
  const bool with_poison = !header.attack_kind.empty();
  std::ofstream m(dir / "manifest.tsv");
  if (!m) throw std::runtime_error("cannot write " + (dir / "manifest.tsv").string());
  m << "# format: blto-image-dir 1\n";
  m << "# split: " << to_string(data.split) << "\n";
  m << "# classes: " << join(data.class_names, ',') << "\n";
  if (!header.config_hash.empty()) m << "# config_hash: " << header.config_hash << "\n";
  if (with_poison) {
    m << "# target_class: " << header.target_class << "\n";
    m << "index\tlabel\tfilename\tpoisoned\tattack_kind\tepsilon\tpoisoning_rate\n";
  } else {
    m << "index\tlabel\tfilename\n";
  }
  const auto labels = data.labels.contiguous();
  const int64_t* lb = labels.data_ptr<int64_t>();
  const char* ext = data.channels() == 3 ? ".ppm" : ".pgm";
  char eps_buf[64], rate_buf[64];
  std::snprintf(eps_buf, sizeof(eps_buf), "%.17g", header.epsilon);
  std::snprintf(rate_buf, sizeof(rate_buf), "%.17g", header.poisoning_rate);
  for (int64_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06lld%s", static_cast<long long>(i), ext);
    write_pnm(dir / name, data.images[i]);
    m << i << "\t" << lb[i] << "\t" << name;
    if (with_poison) {
      m << "\t" << (poisoned.empty() ? 0 : int(poisoned[i])) << "\t" << header.attack_kind << "\t"
        << eps_buf << "\t" << rate_buf;
    }
    m << "\n";
  }
  if (!m) throw std::runtime_error("manifest write failed in " + dir.string());
}

ImageDir import_image_dir(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.tsv";
  std::ifstream in(manifest);
  if (!in) throw IngestionError(manifest.string(), "missing manifest");
  ImageDir out;
  std::string line;
  bool header_seen = false;
  bool with_poison = false;
  std::vector<torch::Tensor> images;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto colon = line.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = line.substr(2, colon - 2);
      const std::string value = line.substr(colon + 2);
      if (key == "split") out.header.split = split_from_string(value);
      else if (key == "classes") out.header.class_names = split_on(value, ',');
      else if (key == "config_hash") out.header.config_hash = value;
      else if (key == "target_class") out.header.target_class = std::stoll(value);
      continue;
    }
    if (!header_seen) {
      header_seen = true;
      with_poison = line.find("poisoned") != std::string::npos;
      continue;
    }
    const auto cols = split_on(line, '\t');
    if (cols.size() < 3 || (with_poison && cols.size() < 7)) {
      throw IngestionError(manifest.string(), "malformed row: " + line);
    }
    ManifestRow row;
    row.index = std::stoll(cols[0]);
    row.label = std::stoll(cols[1]);
    row.filename = cols[2];
    if (with_poison) {
      row.poisoned = cols[3] == "1";
      out.header.attack_kind = cols[4];
      out.header.epsilon = std::stod(cols[5]);
      out.header.poisoning_rate = std::stod(cols[6]);
    }
    int64_t channels = 0;
    images.push_back(read_pnm(dir / row.filename, channels));
    out.rows.push_back(row);
  }
  if (!header_seen) throw IngestionError(manifest.string(), "manifest has no column header");
  std::vector<int64_t> labels;
  for (const auto& r : out.rows) labels.push_back(r.label);
  out.data.images = images.empty() ? torch::empty({0, 3, 0, 0}) : torch::stack(images);
  out.data.labels = torch::tensor(labels, torch::kInt64);
  out.data.class_names = out.header.class_names;
  out.data.split = out.header.split;
  return out;
}

}  // namespace blto
