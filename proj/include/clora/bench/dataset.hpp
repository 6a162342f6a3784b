#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "clora/errors.hpp"
#include "clora/fewshot.hpp"
#include "clora/random.hpp"
#include "clora/tensor.hpp"
#include "clora/tokenizer.hpp"

namespace clora::bench {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Split : std::uint8_t { pretrain = 0, task = 1 };

inline std::string_view to_string(Split s) { return s == Split::pretrain ? "pretrain" : "task"; }

/// Synthetic stand-in for an image classification corpus.
///
/// Each class owns a latent prototype. An image renders latent z through a
/// fixed bank of low-frequency cosine patterns plus pixel noise. Images in the
/// `pretrain` split (paired with captions) use z = prototype + noise. Images in
/// the `task` split are shifted: the own prototype is attenuated to
/// `task_signal` and the next class's prototype is mixed in with weight
/// `task_confuser`, so a contrastively pretrained model transfers only partly.
struct SyntheticSpec {
  std::size_t num_classes = 8;
  std::size_t images_per_class = 160;
  double pretrain_fraction = 0.5;
  std::size_t latent_dim = 16;
  double latent_noise = 0.2;
  double pixel_noise = 0.1;
  double min_prototype_distance = 0.5;
  double task_signal = 0.55;
  double task_confuser = 0.45;
  std::size_t image_size = 16;
  std::size_t channels = 1;
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;           // empty: built-in names
  std::vector<std::vector<double>> prototypes;    // empty: sampled from the seed

  void validate() const {
    if (num_classes < 2) throw ConfigError("dataset needs at least 2 classes");
    if (images_per_class < 2) throw ConfigError("dataset needs at least 2 images per class");
    if (!(pretrain_fraction >= 0.0 && pretrain_fraction < 1.0)) throw ConfigError("pretrain_fraction must lie in [0, 1)");
    if (latent_dim == 0) throw ConfigError("latent_dim must be >= 1");
    if (image_size == 0 || channels == 0) throw ConfigError("image size and channels must be >= 1");
    if (latent_noise < 0 || pixel_noise < 0) throw ConfigError("noise levels must be non-negative");
    if (!class_names.empty() && class_names.size() != num_classes) {
      throw ConfigError("class_names lists " + std::to_string(class_names.size()) + " names for " +
                        std::to_string(num_classes) + " classes");
    }
    if (!prototypes.empty()) {
      if (prototypes.size() != num_classes) throw ConfigError("prototype override must list one vector per class");
      for (const auto& p : prototypes)
        if (p.size() != latent_dim) throw ConfigError("prototype override has the wrong latent dimension");
    }
  }

  std::size_t pixels() const { return image_size * image_size * channels; }
  std::size_t pretrain_per_class() const {
    return static_cast<std::size_t>(std::floor(pretrain_fraction * static_cast<double>(images_per_class)));
  }
};

inline json to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},
          {"images_per_class", s.images_per_class},
          {"pretrain_fraction", s.pretrain_fraction},
          {"latent_dim", s.latent_dim},
          {"latent_noise", s.latent_noise},
          {"pixel_noise", s.pixel_noise},
          {"min_prototype_distance", s.min_prototype_distance},
          {"task_signal", s.task_signal},
          {"task_confuser", s.task_confuser},
          {"image_size", s.image_size},
          {"channels", s.channels},
          {"seed", s.seed},
          {"class_names", s.class_names},
          {"prototypes", s.prototypes}};
}

/// Missing keys keep their defaults.
inline SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  try {
    s.num_classes = j.value("num_classes", s.num_classes);
    s.images_per_class = j.value("images_per_class", s.images_per_class);
    s.pretrain_fraction = j.value("pretrain_fraction", s.pretrain_fraction);
    s.latent_dim = j.value("latent_dim", s.latent_dim);
    s.latent_noise = j.value("latent_noise", s.latent_noise);
    s.pixel_noise = j.value("pixel_noise", s.pixel_noise);
    s.min_prototype_distance = j.value("min_prototype_distance", s.min_prototype_distance);
    s.task_signal = j.value("task_signal", s.task_signal);
    s.task_confuser = j.value("task_confuser", s.task_confuser);
    s.image_size = j.value("image_size", s.image_size);
    s.channels = j.value("channels", s.channels);
    s.seed = j.value("seed", s.seed);
    s.class_names = j.value("class_names", s.class_names);
    s.prototypes = j.value("prototypes", s.prototypes);
  } catch (const json::exception& e) {
    throw ConfigError("invalid dataset spec: " + std::string(e.what()));
  }
  return s;
}

inline const std::vector<std::string>& builtin_class_words() {
  static const std::vector<std::string> words = {"circle", "square", "stripe", "cross",  "ring",   "wave",
                                                 "dot",    "grid",   "spiral", "arrow",  "star",   "zigzag",
                                                 "checker", "ripple", "blob",  "lattice"};
  return words;
}

/// Adjectives sampled into captions between the article and "photo"; the
/// empty entry yields the bare prompt template.
inline const std::vector<std::string>& caption_fillers() {
  static const std::vector<std::string> words = {"", "", "good", "bright", "dark", "small", "large", "clean"};
  return words;
}

inline std::string make_caption(const std::string& filler, const std::string& class_name) {
  return filler.empty() ? std::string(prompt_template) + " " + class_name : "a " + filler + " photo of a " + class_name;
}

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<std::string> class_names;
  std::vector<std::string> vocabulary;  // words beyond the special tokens
  Tensor<float> images;                 // [n x pixels]
  std::vector<std::size_t> labels;
  std::vector<Split> splits;
  std::vector<std::string> captions;

  std::size_t size() const noexcept { return labels.size(); }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
      if (splits[i] == s) out.push_back(i);
    return out;
  }

  Vocabulary make_vocabulary() const { return Vocabulary(vocabulary); }

  ImageSet<float> image_set(Split s) const {
    ImageSet<float> all{images, labels};
    const auto idx = indices(s);
    return all.subset(idx);
  }
};

namespace detail {

inline std::vector<std::vector<float>> pattern_bank(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t n = spec.image_size, c = spec.channels;
  std::vector<std::vector<float>> bank(spec.latent_dim, std::vector<float>(spec.pixels()));
  for (auto& pattern : bank) {
    const double fx = static_cast<double>(rng.index(4)), fy = static_cast<double>(rng.index(4));
    const double fx2 = static_cast<double>(1 + rng.index(3)), fy2 = static_cast<double>(rng.index(4));
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi), phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<double> ch_gain(c);
    for (auto& g : ch_gain) g = rng.uniform(0.5, 1.0);
    double sq = 0;
    std::vector<double> vals(spec.pixels());
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) {
        const double u = 2.0 * std::numbers::pi / static_cast<double>(n);
        const double v = std::cos(u * (fx * x + fy * y) + phase) + 0.5 * std::cos(u * (fx2 * x - fy2 * y) + phase2);
        for (std::size_t ch = 0; ch < c; ++ch) {
          vals[(y * n + x) * c + ch] = v * ch_gain[ch];
          sq += vals[(y * n + x) * c + ch] * vals[(y * n + x) * c + ch];
        }
      }
    const double rms = std::sqrt(sq / static_cast<double>(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) pattern[i] = static_cast<float>(vals[i] / rms);
  }
  return bank;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

inline void check_prototypes(const std::vector<std::vector<double>>& protos, double min_dist) {
  for (std::size_t i = 0; i < protos.size(); ++i)
    for (std::size_t j = i + 1; j < protos.size(); ++j) {
      const double d = distance(protos[i], protos[j]);
      if (!(d >= min_dist) || d == 0.0) {
        throw DomainError("classes " + std::to_string(i) + " and " + std::to_string(j) + " have prototypes at distance " +
                          std::to_string(d) + " (minimum " + std::to_string(min_dist) + ")");
      }
    }
}

}  // namespace detail

inline SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, hash_string("synthetic")));
  Rng pattern_rng = rng.fork(1);
  Rng proto_rng = rng.fork(2);
  Rng sample_rng = rng.fork(3);
  const std::size_t k = spec.num_classes, dim = spec.latent_dim, px = spec.pixels();

  SyntheticDataset ds;
  ds.spec = spec;
  if (!spec.class_names.empty()) {
    ds.class_names = spec.class_names;
  } else {
    const auto& words = builtin_class_words();
    for (std::size_t c = 0; c < k; ++c) {
      ds.class_names.push_back(c < words.size() ? words[c] : words[c % words.size()] + std::to_string(c / words.size()));
    }
  }
  {
    std::set<std::string> unique(ds.class_names.begin(), ds.class_names.end());
    if (unique.size() != k) throw ConfigError("class names must be distinct");
  }

  std::vector<std::vector<double>> protos = spec.prototypes;
  if (protos.empty()) {
    // Unit-RMS prototypes; redraw a class until it is far enough from the others.
    for (std::size_t c = 0; c < k; ++c) {
      for (int attempt = 0;; ++attempt) {
        std::vector<double> p(dim);
        for (auto& v : p) v = proto_rng.normal();
        bool ok = true;
        for (const auto& q : protos) ok = ok && detail::distance(p, q) >= spec.min_prototype_distance;
        if (ok) {
          protos.push_back(std::move(p));
          break;
        }
        if (attempt == 1000) throw DomainError("could not place prototypes at the requested minimum distance");
      }
    }
  }
  detail::check_prototypes(protos, spec.min_prototype_distance);

  const auto bank = detail::pattern_bank(spec, pattern_rng);
  const std::size_t n = k * spec.images_per_class, pre = spec.pretrain_per_class();
  ds.images = Tensor<float>({n, px});
  const auto& fillers = caption_fillers();
  const double inv_sqrt_dim = 1.0 / std::sqrt(static_cast<double>(dim));
  std::vector<double> z(dim), pixel(px);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < spec.images_per_class; ++i) {
      const std::size_t row = ds.labels.size();
      const Split split = i < pre ? Split::pretrain : Split::task;
      const auto& own = protos[c];
      const auto& other = protos[(c + 1) % k];
      for (std::size_t j = 0; j < dim; ++j) {
        const double mean = split == Split::pretrain ? own[j] : spec.task_signal * own[j] + spec.task_confuser * other[j];
        z[j] = mean + spec.latent_noise * sample_rng.normal();
      }
      std::fill(pixel.begin(), pixel.end(), 0.0);
      for (std::size_t j = 0; j < dim; ++j)
        for (std::size_t p = 0; p < px; ++p) pixel[p] += z[j] * bank[j][p];
      float* out = ds.images.ptr() + row * px;
      for (std::size_t p = 0; p < px; ++p) {
        out[p] = static_cast<float>(pixel[p] * inv_sqrt_dim + spec.pixel_noise * sample_rng.normal());
      }
      ds.labels.push_back(c);
      ds.splits.push_back(split);
      ds.captions.push_back(make_caption(fillers[sample_rng.index(fillers.size())], ds.class_names[c]));
    }
  }

  std::set<std::string> words;
  for (const auto& w : split_words(prompt_template)) words.insert(w);
  for (const auto& w : fillers)
    if (!w.empty()) words.insert(w);
  for (const auto& name : ds.class_names)
    for (const auto& w : split_words(name)) words.insert(w);
  ds.vocabulary.assign(words.begin(), words.end());
  return ds;
}

/// manifest.json, images.bin (LE float32, image-major), labels.csv, captions.txt.
inline void write_dataset(const SyntheticDataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
  const json manifest = {{"format", "clora-synthetic"},
                         {"version", 1},
                         {"num_images", ds.size()},
                         {"num_classes", ds.class_names.size()},
                         {"class_names", ds.class_names},
                         {"vocabulary", ds.vocabulary},
                         {"image_shape", {ds.spec.image_size, ds.spec.image_size, ds.spec.channels}},
                         {"spec", to_json(ds.spec)}};
  auto open = [&](const char* name, std::ios::openmode mode) {
    std::ofstream f(dir / name, mode | std::ios::trunc);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("manifest.json", std::ios::out);
    f << manifest.dump(2) << '\n';
  }
  {
    auto f = open("images.bin", std::ios::binary);
    std::vector<char> buf(ds.images.size() * 4);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      const auto u = std::bit_cast<std::uint32_t>(ds.images[i]);
      for (int b = 0; b < 4; ++b) buf[4 * i + b] = static_cast<char>((u >> (8 * b)) & 0xFFu);
    }
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("failed writing images.bin");
  }
  {
    auto f = open("labels.csv", std::ios::out);
    f << "index,label,class,split\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
      f << i << ',' << ds.labels[i] << ',' << ds.class_names[ds.labels[i]] << ',' << to_string(ds.splits[i]) << '\n';
    }
  }
  {
    auto f = open("captions.txt", std::ios::out);
    for (const auto& c : ds.captions) f << c << '\n';
  }
}

inline SyntheticDataset read_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("dataset directory " + dir.string() + " does not exist");
  SyntheticDataset ds;
  std::size_t n = 0, px = 0;
  {
    std::ifstream f(dir / "manifest.json");
    if (!f) throw IoError("cannot open " + (dir / "manifest.json").string());
    try {
      const json m = json::parse(f);
      if (m.at("format").get<std::string>() != "clora-synthetic") throw FormatError("not a synthetic dataset manifest");
      ds.spec = synthetic_spec_from_json(m.at("spec"));
      ds.class_names = m.at("class_names").get<std::vector<std::string>>();
      ds.vocabulary = m.at("vocabulary").get<std::vector<std::string>>();
      n = m.at("num_images").get<std::size_t>();
      const auto shape = m.at("image_shape").get<std::vector<std::size_t>>();
      if (shape.size() != 3) throw FormatError("image_shape must have 3 entries");
      px = shape[0] * shape[1] * shape[2];
    } catch (const json::exception& e) {
      throw FormatError("malformed dataset manifest: " + std::string(e.what()));
    }
  }
  {
    std::ifstream f(dir / "images.bin", std::ios::binary);
    if (!f) throw IoError("cannot open " + (dir / "images.bin").string());
    const std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() != n * px * 4) {
      throw FormatError("images.bin holds " + std::to_string(buf.size()) + " bytes, expected " + std::to_string(n * px * 4));
    }
    ds.images = Tensor<float>({n, px}, Tensor<float>::uninitialized);
    for (std::size_t i = 0; i < n * px; ++i) {
      std::uint32_t u = 0;
      for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(buf[4 * i + b])) << (8 * b);
      ds.images[i] = std::bit_cast<float>(u);
    }
  }
  {
    std::ifstream f(dir / "labels.csv");
    if (!f) throw IoError("cannot open " + (dir / "labels.csv").string());
    std::string line;
    std::getline(f, line);
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<std::string> cols;
      std::stringstream ss(line);
      for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
      if (cols.size() != 4) throw FormatError("labels.csv line " + std::to_string(lineno) + ": expected 4 columns");
      std::size_t label = 0;
      try {
        label = std::stoul(cols[1]);
      } catch (const std::exception&) {
        throw FormatError("labels.csv line " + std::to_string(lineno) + ": bad label '" + cols[1] + "'");
      }
      if (label >= ds.class_names.size()) throw FormatError("labels.csv line " + std::to_string(lineno) + ": label out of range");
      if (cols[3] != "pretrain" && cols[3] != "task") {
        throw FormatError("labels.csv line " + std::to_string(lineno) + ": unknown split '" + cols[3] + "'");
      }
      ds.labels.push_back(label);
      ds.splits.push_back(cols[3] == "pretrain" ? Split::pretrain : Split::task);
    }
    if (ds.labels.size() != n) throw FormatError("labels.csv lists " + std::to_string(ds.labels.size()) + " images, manifest " + std::to_string(n));
  }
  {
    std::ifstream f(dir / "captions.txt");
    if (!f) throw IoError("cannot open " + (dir / "captions.txt").string());
    for (std::string line; std::getline(f, line);) ds.captions.push_back(line);
    if (ds.captions.size() != n) throw FormatError("captions.txt has " + std::to_string(ds.captions.size()) + " lines, expected " + std::to_string(n));
  }
  return ds;
}

/// Caption-paired pretraining split, tokenized for `vocab`.
inline PairedDataset<float> pretrain_pairs(const SyntheticDataset& ds, const Vocabulary& vocab, std::size_t max_len) {
  PairedDataset<float> out;
  const auto idx = ds.indices(Split::pretrain);
  out.images = ImageSet<float>{ds.images, ds.labels}.subset(idx).images;
  for (std::size_t i : idx) out.captions.push_back(tokenize_text(ds.captions[i], vocab, max_len));
  return out;
}

}  // namespace clora::bench
