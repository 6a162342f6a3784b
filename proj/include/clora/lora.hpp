#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/checkpoint.hpp"
#include "clora/errors.hpp"
#include "clora/model.hpp"
#include "clora/random.hpp"

namespace clora {

enum class LayerSpan { bottom, up, all };
enum class EncoderSet { vision, text, both };

inline std::string_view to_string(LayerSpan s) {
  switch (s) {
    case LayerSpan::bottom: return "bottom";
    case LayerSpan::up: return "up";
    case LayerSpan::all: return "all";
  }
  return "?";
}

inline std::string_view to_string(EncoderSet e) {
  switch (e) {
    case EncoderSet::vision: return "vision";
    case EncoderSet::text: return "text";
    case EncoderSet::both: return "both";
  }
  return "?";
}

inline LayerSpan parse_layer_span(std::string_view s) {
  if (s == "bottom") return LayerSpan::bottom;
  if (s == "up") return LayerSpan::up;
  if (s == "all") return LayerSpan::all;
  throw ConfigError("unknown layer span '" + std::string(s) + "' (expected bottom, up or all)");
}

inline EncoderSet parse_encoder_set(std::string_view s) {
  if (s == "vision") return EncoderSet::vision;
  if (s == "text") return EncoderSet::text;
  if (s == "both") return EncoderSet::both;
  throw ConfigError("unknown encoder set '" + std::string(s) + "' (expected vision, text or both)");
}

inline bool includes(EncoderSet set, EncoderKind e) {
  return set == EncoderSet::both || (set == EncoderSet::vision) == (e == EncoderKind::vision);
}

/// Non-empty subset of {q, k, v, o}, written as letters in canonical order ("qkv").
class MatrixGroup {
 public:
  constexpr MatrixGroup() = default;

  static MatrixGroup parse(std::string_view s) {
    MatrixGroup g;
    for (char c : s) {
      switch (c) {
        case 'q': g.bits_ |= 1u; break;
        case 'k': g.bits_ |= 2u; break;
        case 'v': g.bits_ |= 4u; break;
        case 'o': g.bits_ |= 8u; break;
        default: throw ConfigError("unknown attention matrix '" + std::string(1, c) + "' in group '" + std::string(s) + "'");
      }
    }
    if (g.bits_ == 0) throw ConfigError("matrix group must not be empty");
    return g;
  }

  bool contains(AttnMatrix m) const { return bits_ & (1u << static_cast<unsigned>(m)); }
  bool empty() const { return bits_ == 0; }

  std::size_t size() const {
    std::size_t n = 0;
    for (AttnMatrix m : all_attn_matrices) n += contains(m);
    return n;
  }

  std::string str() const {
    std::string s;
    for (AttnMatrix m : all_attn_matrices)
      if (contains(m)) s += to_char(m);
    return s;
  }

  friend bool operator==(const MatrixGroup&, const MatrixGroup&) = default;

 private:
  unsigned bits_ = 0;
};

/// Where LoRA modules go and how they are shaped. Defaults: {q,k,v}, every
/// layer, both encoders, r = 2, gamma = 1, dropout 0.25.
struct PlacementConfig {
  MatrixGroup group = MatrixGroup::parse("qkv");
  LayerSpan span = LayerSpan::all;
  EncoderSet encoders = EncoderSet::both;
  std::size_t rank = 2;
  double scale = 1.0;
  double dropout = 0.25;

  void validate() const {
    if (group.empty()) throw ConfigError("placement needs at least one attention matrix");
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    if (!(scale >= 0.0)) throw ConfigError("LoRA scale must be non-negative");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("LoRA dropout must lie in [0, 1)");
  }

  /// Compact identifier used in reports; contains no commas.
  std::string digest() const {
    std::string s = "g=" + group.str() + ";r=" + std::to_string(rank) + ";span=" + std::string(to_string(span)) +
                    ";enc=" + std::string(to_string(encoders));
    auto num = [](double v) {
      json j = v;
      return j.dump();
    };
    return s + ";gamma=" + num(scale) + ";p=" + num(dropout);
  }
};

/// Layers [begin, end) covered by a span. Bottom takes ceil(L/2) layers.
inline std::pair<std::size_t, std::size_t> layer_range(LayerSpan span, std::size_t depth) {
  const std::size_t half = (depth + 1) / 2;
  switch (span) {
    case LayerSpan::bottom: return {0, half};
    case LayerSpan::up: return {half, depth};
    case LayerSpan::all: return {0, depth};
  }
  return {0, 0};
}

struct LoraTarget {
  EncoderKind encoder = EncoderKind::vision;
  std::size_t layer = 0;
  AttnMatrix matrix = AttnMatrix::q;

  std::string id() const {
    return std::string(to_string(encoder)) + ".blocks." + std::to_string(layer) + ".attn." + to_char(matrix);
  }

  friend auto operator<=>(const LoraTarget&, const LoraTarget&) = default;
};

/// Every target a placement selects on a model with the given configuration.
inline std::vector<LoraTarget> select_targets(const PlacementConfig& cfg, const ModelConfig& dims) {
  std::vector<LoraTarget> out;
  for (EncoderKind e : {EncoderKind::vision, EncoderKind::text}) {
    if (!includes(cfg.encoders, e)) continue;
    const auto [lo, hi] = layer_range(cfg.span, e == EncoderKind::vision ? dims.vision.depth : dims.text.depth);
    for (std::size_t l = lo; l < hi; ++l)
      for (AttnMatrix m : all_attn_matrices)
        if (cfg.group.contains(m)) out.push_back({e, l, m});
  }
  return out;
}

/// Low-rank delta gamma * B A for a [d1 x d2] weight: A [r x d2], B [d1 x r].
template <std::floating_point T>
struct LoRAModule {
  Parameter<T> A;
  Parameter<T> B;
  std::size_t rank = 0;
  double scale = 1.0;
  double dropout = 0.0;
  LoraTarget target;

  std::size_t d1() const { return B.value.dim(0); }
  std::size_t d2() const { return A.value.dim(1); }
  std::size_t numel() const { return A.numel() + B.numel(); }

  /// Dense gamma * B A, only materialised for merging and tests.
  Tensor<T> delta() const {
    Tensor<T> out({d1(), d2()});
    detail::mat(out).noalias() = static_cast<T>(scale) * (detail::mat(B.value) * detail::mat(A.value));
    return out;
  }
};

/// A ~ U(-sqrt(6/d2), sqrt(6/d2)) (Kaiming-uniform, fan-in d2); B = 0.
template <std::floating_point T>
LoRAModule<T> init_lora(std::size_t d1, std::size_t d2, std::size_t rank, double scale, double dropout,
                        std::uint64_t seed, LoraTarget target = {}) {
  if (rank < 1 || rank > std::min(d1, d2)) {
    throw DomainError("LoRA rank " + std::to_string(rank) + " outside [1, min(" + std::to_string(d1) + ", " +
                      std::to_string(d2) + ")]");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw DomainError("LoRA dropout must lie in [0, 1)");
  LoRAModule<T> m;
  m.rank = rank;
  m.scale = scale;
  m.dropout = dropout;
  m.target = target;
  const double bound = std::sqrt(6.0 / static_cast<double>(d2));
  Rng rng(seed);
  Tensor<T> a({rank, d2});
  for (T& v : a.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  m.A = Parameter<T>(target.id() + ".lora_A", std::move(a), true);
  m.B = Parameter<T>(target.id() + ".lora_B", Tensor<T>({d1, rank}, T(0)), true);
  return m;
}

/// gamma * B (A drop(x)) for row inputs x [n x d2], computed as two rank-r products.
template <std::floating_point T>
Var<T> lora_delta(Tape<T>& tape, LoRAModule<T>& m, Var<T> x, bool training, Rng* rng) {
  if (x.shape().size() != 2 || x.shape()[1] != m.d2()) {
    throw ShapeError("lora: input " + shape_str(x.shape()) + " does not match A " + shape_str(m.A.value.shape()));
  }
  Var<T> in = x;
  if (training && m.dropout > 0.0) {
    if (!rng) throw StateError("lora: training-mode dropout needs a random stream");
    in = dropout(x, m.dropout, true, *rng);
  }
  return scale(linear(linear(in, tape.param(m.A)), tape.param(m.B)), static_cast<T>(m.scale));
}

/// h = W x + gamma B A drop(x), for row inputs x [n x d2] and W [d1 x d2].
template <std::floating_point T>
Var<T> lora_forward(Var<T> w, LoRAModule<T>& m, Var<T> x, bool training, Rng* rng = nullptr) {
  if (w.shape().size() != 2 || w.shape()[0] != m.d1() || w.shape()[1] != m.d2()) {
    throw ShapeError("lora: weight " + shape_str(w.shape()) + " does not match module of " + std::to_string(m.d1()) +
                     "x" + std::to_string(m.d2()));
  }
  return add(linear(x, w), lora_delta(w.tape(), m, x, training, rng));
}

/// Σ over selected matrices of r (d1 + d2).
inline std::size_t trainable_param_count(const PlacementConfig& cfg, const ModelConfig& dims) {
  std::size_t n = 0;
  for (const LoraTarget& t : select_targets(cfg, dims)) {
    const std::size_t d = t.encoder == EncoderKind::vision ? dims.vision.width : dims.text.width;
    n += cfg.rank * (d + d);
  }
  return n;
}

/// A frozen DualEncoderModel plus its LoRA modules. Holds a pointer to the
/// base model, which must outlive this object and stay at the same address.
template <std::floating_point T>
class AdaptedModel {
 public:
  AdaptedModel(const AdaptedModel&) = delete;
  AdaptedModel& operator=(const AdaptedModel&) = delete;
  AdaptedModel(AdaptedModel&& o) noexcept { *this = std::move(o); }
  AdaptedModel& operator=(AdaptedModel&& o) noexcept {
    if (this != &o) {
      release();
      base_ = std::exchange(o.base_, nullptr);
      cfg_ = o.cfg_;
      modules_ = std::move(o.modules_);
      snapshots_ = std::move(o.snapshots_);
      merged_ = o.merged_;
    }
    return *this;
  }
  ~AdaptedModel() { release(); }

  /// Attaches one fresh module per selected target and freezes every base parameter.
  static AdaptedModel inject(DualEncoderModel<T>& base, const PlacementConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (base.adapter_attached()) throw StateError("model already carries LoRA modules; double injection");
    AdaptedModel a;
    const auto targets = select_targets(cfg, base.config());
    for (const LoraTarget& t : targets) {
      const Parameter<T>& w = base.blocks(t.encoder).at(t.layer).weight(t.matrix);
      a.modules_.emplace(t, init_lora<T>(w.value.dim(0), w.value.dim(1), cfg.rank, cfg.scale, cfg.dropout,
                                         derive_seed(seed, hash_string(t.id())), t));
    }
    base.set_trainable(false);
    a.base_ = &base;
    a.cfg_ = cfg;
    base.set_adapter_attached(true);
    return a;
  }

  DualEncoderModel<T>& base() { return *base_; }
  const DualEncoderModel<T>& base() const { return *base_; }
  const PlacementConfig& placement() const noexcept { return cfg_; }
  bool merged() const noexcept { return merged_; }
  bool has_snapshots() const noexcept { return !snapshots_.empty(); }

  std::map<LoraTarget, LoRAModule<T>>& modules() noexcept { return modules_; }
  const std::map<LoraTarget, LoRAModule<T>>& modules() const noexcept { return modules_; }

  LoRAModule<T>* module(const LoraTarget& t) {
    auto it = modules_.find(t);
    return it == modules_.end() ? nullptr : &it->second;
  }

  std::vector<Parameter<T>*> trainable_parameters() {
    std::vector<Parameter<T>*> out;
    for (auto& [t, m] : modules_) {
      out.push_back(&m.A);
      out.push_back(&m.B);
    }
    return out;
  }

  /// Element count of all registered A and B tensors.
  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& [t, m] : modules_) n += m.numel();
    return n;
  }

  /// Forward options routing attention projections through the modules.
  /// After merge() the deltas live in the base weights and no hook is installed.
  ForwardOptions<T> forward_options(bool training = false, Rng* rng = nullptr) {
    ForwardOptions<T> opt;
    opt.training = training;
    opt.rng = rng;
    if (merged_) return opt;
    opt.hook = [this, training, rng](Var<T> input, Var<T> base, EncoderKind e, std::size_t layer, AttnMatrix m) {
      auto it = modules_.find(LoraTarget{e, layer, m});
      if (it == modules_.end()) return base;
      return add(base, lora_delta(base.tape(), it->second, input, training, rng));
    };
    return opt;
  }

  /// W <- W + gamma B A for every module; originals are snapshotted for unmerge().
  DualEncoderModel<T>& merge() {
    if (merged_) throw StateError("LoRA modules are already merged");
    snapshots_.clear();
    for (auto& [t, m] : modules_) {
      Parameter<T>& w = base_->blocks(t.encoder).at(t.layer).weight(t.matrix);
      snapshots_.emplace(t, w.value);
      const Tensor<T> d = m.delta();
      for (std::size_t i = 0; i < d.size(); ++i) w.value[i] += d[i];
    }
    merged_ = true;
    return *base_;
  }

  /// Restores the snapshotted base weights bitwise and re-enables the dynamic path.
  void unmerge() {
    if (!merged_ || snapshots_.empty()) throw StateError("unmerge() without a preceding merge()");
    for (auto& [t, w0] : snapshots_) base_->blocks(t.encoder).at(t.layer).weight(t.matrix).value = w0;
    snapshots_.clear();
    merged_ = false;
  }

  /// Standalone plain model with the deltas folded in; leaves this object untouched.
  DualEncoderModel<T> merged_copy() const {
    DualEncoderModel<T> out = *base_;
    out.set_adapter_attached(false);
    if (!merged_) {
      for (const auto& [t, m] : modules_) {
        Parameter<T>& w = out.blocks(t.encoder).at(t.layer).weight(t.matrix);
        const Tensor<T> d = m.delta();
        for (std::size_t i = 0; i < d.size(); ++i) w.value[i] += d[i];
      }
    }
    return out;
  }

  /// Stores only A/B tensors plus the placement; see load_lora().
  void save(const fs::path& dir) const {
    std::vector<TensorRecord> records;
    for (const auto& [t, m] : modules_) {
      records.push_back(to_record(m.A));
      records.push_back(to_record(m.B));
    }
    json meta = {{"placement",
                  {{"group", cfg_.group.str()},
                   {"span", to_string(cfg_.span)},
                   {"encoders", to_string(cfg_.encoders)},
                   {"rank", cfg_.rank},
                   {"scale", cfg_.scale},
                   {"dropout", cfg_.dropout}}},
                 {"dims", {{"vision", to_json(base_->config().vision)}, {"text", to_json(base_->config().text)}}}};
    write_tensor_archive(dir, "lora", meta, records);
  }

  /// Attaches LoRA deltas saved by save() onto `base` (dims must match).
  static AdaptedModel load(const fs::path& dir, DualEncoderModel<T>& base) {
    TensorArchive ar = read_tensor_archive(dir);
    if (ar.kind != "lora") throw FormatError("checkpoint at " + dir.string() + " holds '" + ar.kind + "', not LoRA deltas");
    PlacementConfig cfg;
    try {
      const json& p = ar.meta.at("placement");
      cfg.group = MatrixGroup::parse(p.at("group").get<std::string>());
      cfg.span = parse_layer_span(p.at("span").get<std::string>());
      cfg.encoders = parse_encoder_set(p.at("encoders").get<std::string>());
      cfg.rank = p.at("rank").get<std::size_t>();
      cfg.scale = p.at("scale").get<double>();
      cfg.dropout = p.at("dropout").get<double>();
      const json& dims = ar.meta.at("dims");
      if (!(encoder_config_from_json(dims.at("vision")) == base.config().vision) ||
          !(encoder_config_from_json(dims.at("text")) == base.config().text)) {
        throw FormatError("LoRA checkpoint dimensions do not match the base model");
      }
    } catch (const json::exception& e) {
      throw FormatError("malformed LoRA metadata: " + std::string(e.what()));
    } catch (const ConfigError& e) {
      throw FormatError(std::string("invalid LoRA placement: ") + e.what());
    }
    AdaptedModel a = inject(base, cfg, 0);
    std::size_t used = 0;
    try {
      for (auto& [t, m] : a.modules_) {
        for (Parameter<T>* p : {&m.A, &m.B}) {
          const TensorRecord* r = ar.find(p->name);
          if (!r) throw FormatError("LoRA checkpoint is missing tensor '" + p->name + "'");
          assign_record(*p, *r);
          ++used;
        }
      }
      if (used != ar.tensors.size()) throw FormatError("LoRA checkpoint contains tensors outside its placement");
    } catch (...) {
      a.release();
      throw;
    }
    return a;
  }

 private:
  AdaptedModel() = default;

  void release() {
    if (base_) {
      base_->set_adapter_attached(false);
      base_ = nullptr;
    }
  }

  DualEncoderModel<T>* base_ = nullptr;
  PlacementConfig cfg_;
  std::map<LoraTarget, LoRAModule<T>> modules_;
  std::map<LoraTarget, Tensor<T>> snapshots_;
  bool merged_ = false;
};

}  // namespace clora
