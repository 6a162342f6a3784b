#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "clora/errors.hpp"
#include "clora/model.hpp"
#include "clora/tensor.hpp"

namespace clora {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int checkpoint_version = 1;
inline constexpr const char* checkpoint_format = "clora-tensors";
inline constexpr const char* manifest_file = "manifest.json";
inline constexpr const char* blob_file = "weights.bin";

/// One named tensor as stored on disk (always 32-bit float).
struct TensorRecord {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

/// Directory layout: manifest.json (JSON) + weights.bin (raw little-endian
/// float32, tensors back to back in manifest order, offsets in bytes).
inline void write_tensor_archive(const fs::path& dir, const std::string& kind, const json& meta,
                                 const std::vector<TensorRecord>& tensors) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
  json entries = json::array();
  std::vector<char> blob;
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.data.size()) throw ShapeError("tensor '" + t.name + "' data does not match its shape");
    entries.push_back({{"name", t.name},
                       {"shape", t.shape},
                       {"dtype", "float32"},
                       {"offset", blob.size()},
                       {"nbytes", t.data.size() * 4}});
    for (float f : t.data) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((u >> (8 * b)) & 0xFFu));
    }
  }
  json manifest = {{"format", checkpoint_format},
                   {"version", checkpoint_version},
                   {"kind", kind},
                   {"dtype", "float32"},
                   {"byte_order", "little"},
                   {"blob", blob_file},
                   {"blob_bytes", blob.size()},
                   {"meta", meta},
                   {"tensors", entries}};
  {
    std::ofstream out(dir / blob_file, std::ios::binary | std::ios::trunc);
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("failed writing " + (dir / blob_file).string());
  }
  std::ofstream out(dir / manifest_file, std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + (dir / manifest_file).string());
}

struct TensorArchive {
  std::string kind;
  json meta;
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline TensorArchive read_tensor_archive(const fs::path& dir) {
  std::ifstream mf(dir / manifest_file);
  if (!mf) throw IoError("cannot open " + (dir / manifest_file).string());
  json manifest;
  try {
    manifest = json::parse(mf);
  } catch (const json::exception& e) {
    throw FormatError("manifest is not valid JSON: " + std::string(e.what()));
  }
  TensorArchive ar;
  try {
    if (manifest.at("format").get<std::string>() != checkpoint_format) throw FormatError("unknown checkpoint format");
    const int version = manifest.at("version").get<int>();
    if (version != checkpoint_version) {
      throw FormatError("unsupported checkpoint version " + std::to_string(version));
    }
    if (manifest.at("dtype").get<std::string>() != "float32" || manifest.at("byte_order").get<std::string>() != "little") {
      throw FormatError("checkpoint must be little-endian float32");
    }
    ar.kind = manifest.at("kind").get<std::string>();
    ar.meta = manifest.at("meta");
    std::ifstream bf(dir / manifest.at("blob").get<std::string>(), std::ios::binary);
    if (!bf) throw IoError("cannot open weight blob in " + dir.string());
    const std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    const auto expected = manifest.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected) {
      throw FormatError("weight blob has " + std::to_string(blob.size()) + " bytes, manifest declares " +
                        std::to_string(expected));
    }
    std::size_t cursor = 0;
    for (const auto& e : manifest.at("tensors")) {
      TensorRecord t;
      t.name = e.at("name").get<std::string>();
      t.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "float32") throw FormatError("tensor '" + t.name + "' is not float32");
      if (t.shape.empty() || shape_numel(t.shape) * 4 != nbytes) {
        throw FormatError("tensor '" + t.name + "': shape " + shape_str(t.shape) + " disagrees with " +
                          std::to_string(nbytes) + " bytes");
      }
      if (offset != cursor || offset + nbytes > blob.size()) {
        throw FormatError("tensor '" + t.name + "': byte range [" + std::to_string(offset) + ", " +
                          std::to_string(offset + nbytes) + ") is not contiguous within the blob");
      }
      t.data.resize(nbytes / 4);
      for (std::size_t i = 0; i < t.data.size(); ++i) {
        std::uint32_t u = 0;
        for (int b = 0; b < 4; ++b) u |= std::uint32_t(static_cast<unsigned char>(blob[offset + 4 * i + b])) << (8 * b);
        t.data[i] = std::bit_cast<float>(u);
      }
      cursor += nbytes;
      ar.tensors.push_back(std::move(t));
    }
    if (cursor != blob.size()) throw FormatError("weight blob has trailing bytes not described by the manifest");
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest: " + std::string(e.what()));
  }
  return ar;
}

inline json to_json(const EncoderConfig& e) { return {{"depth", e.depth}, {"width", e.width}, {"heads", e.heads}}; }

inline EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig e;
  e.depth = j.at("depth").get<std::size_t>();
  e.width = j.at("width").get<std::size_t>();
  e.heads = j.at("heads").get<std::size_t>();
  return e;
}

inline json to_json(const ModelConfig& c) {
  return {{"vision", to_json(c.vision)},     {"text", to_json(c.text)},
          {"embed_dim", c.embed_dim},        {"image_size", c.image_size},
          {"patch_size", c.patch_size},      {"channels", c.channels},
          {"max_text_len", c.max_text_len},  {"init_temperature", c.init_temperature}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vision = encoder_config_from_json(j.at("vision"));
  c.text = encoder_config_from_json(j.at("text"));
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.image_size = j.at("image_size").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.max_text_len = j.at("max_text_len").get<std::size_t>();
  c.init_temperature = j.at("init_temperature").get<double>();
  return c;
}

template <std::floating_point T>
TensorRecord to_record(const Parameter<T>& p) {
  return {p.name, p.value.shape(), std::vector<float>(p.value.data().begin(), p.value.data().end())};
}

/// Copies a stored tensor into `p` after checking the shape matches.
template <std::floating_point T>
void assign_record(Parameter<T>& p, const TensorRecord& r) {
  if (r.shape != p.value.shape()) {
    throw FormatError("tensor '" + p.name + "' has shape " + shape_str(r.shape) + " in the checkpoint, expected " +
                      shape_str(p.value.shape()));
  }
  p.value = Tensor<T>(r.shape, std::vector<T>(r.data.begin(), r.data.end()));
}

/// Writes every model parameter in float32. Round-trips bit-exactly for float models.
template <std::floating_point T>
void save_checkpoint(const DualEncoderModel<T>& model, const fs::path& dir) {
  std::vector<TensorRecord> records;
  model.for_each_parameter([&](const Parameter<T>& p) { records.push_back(to_record(p)); });
  json meta = {{"config", to_json(model.config())},
               {"vocabulary", model.vocabulary().words()},
               {"tau", static_cast<double>(model.tau())},
               {"precision", sizeof(T) == 4 ? "float32" : "float64 (stored as float32)"}};
  write_tensor_archive(dir, "model", meta, records);
}

template <std::floating_point T = float>
DualEncoderModel<T> load_checkpoint(const fs::path& dir) {
  TensorArchive ar = read_tensor_archive(dir);
  if (ar.kind != "model") throw FormatError("checkpoint at " + dir.string() + " holds '" + ar.kind + "', not a model");
  DualEncoderModel<T> model;
  try {
    ModelConfig cfg = model_config_from_json(ar.meta.at("config"));
    cfg.validate();
    model = DualEncoderModel<T>::create(cfg, Vocabulary::from_words(ar.meta.at("vocabulary").get<std::vector<std::string>>()), 0);
  } catch (const json::exception& e) {
    throw FormatError("malformed model metadata: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("invalid model config: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("invalid vocabulary: ") + e.what());
  }
  std::size_t used = 0;
  model.for_each_parameter([&](Parameter<T>& p) {
    const TensorRecord* r = ar.find(p.name);
    if (!r) throw FormatError("checkpoint is missing tensor '" + p.name + "'");
    assign_record(p, *r);
    ++used;
  });
  if (used != ar.tensors.size()) throw FormatError("checkpoint contains tensors the model does not define");
  if (!(model.tau() > T(0))) throw FormatError("checkpoint temperature must be positive");
  return model;
}

}  // namespace clora
