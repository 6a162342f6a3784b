#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "clora/autodiff.hpp"
#include "clora/model.hpp"
#include "clora/random.hpp"
#include "clora/tensor.hpp"
#include "clora/tokenizer.hpp"

namespace clora::test {

template <std::floating_point T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  Rng rng(seed);
  for (T& v : t.data()) v = static_cast<T>(scale * rng.normal());
  return t;
}

/// Reference product with three plain loops in long double.
template <std::floating_point T>
Tensor<T> naive_matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      long double s = 0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<long double>(a.at(i, p)) * b.at(p, j);
      out.at(i, j) = static_cast<T>(s);
    }
  return out;
}

template <std::floating_point T>
Tensor<T> naive_transpose(const Tensor<T>& a) {
  Tensor<T> out({a.cols(), a.rows()});
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

struct GradCheck {
  double max_rel = 0;
  std::string worst;
};

/// Compares tape gradients of `loss` w.r.t. every trainable parameter with
/// central differences of step h. Relative error |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::vector<Parameter<double>*>& params,
                                 const std::function<Var<double>(Tape<double>&)>& loss, double h = 1e-5,
                                 double floor = 1e-7) {
  for (auto* p : params) {
    if (!p->trainable) throw std::logic_error("check_gradients: '" + p->name + "' is not trainable");
    p->zero_grad();
  }
  {
    Tape<double> tape;
    tape.backward(loss(tape));
  }
  std::vector<Tensor<double>> analytic;
  for (auto* p : params) {
    analytic.push_back(p->grad);
    p->zero_grad();
  }
  auto eval = [&] {
    Tape<double> tape;
    return loss(tape).value()[0];
  };
  GradCheck out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter<double>& p = *params[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double orig = p.value[j];
      p.value[j] = orig + h;
      const double up = eval();
      p.value[j] = orig - h;
      const double down = eval();
      p.value[j] = orig;
      const double num = (up - down) / (2 * h);
      const double a = analytic[i][j];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      if (rel > out.max_rel) {
        out.max_rel = rel;
        out.worst = p.name + "[" + std::to_string(j) + "] analytic " + std::to_string(a) + " numeric " + std::to_string(num);
      }
    }
  }
  return out;
}

inline Vocabulary tiny_vocabulary() {
  return Vocabulary(std::vector<std::string>{"a", "photo", "of", "cat", "dog", "red", "fish", "big", "bird"});
}

/// Depth-1 encoders of the given width, 4x4 images in 2x2 patches.
inline ModelConfig tiny_config(std::size_t width = 8, std::size_t heads = 2, std::size_t depth = 1) {
  ModelConfig c;
  c.vision = {depth, width, heads};
  c.text = {depth, width, heads};
  c.embed_dim = 4;
  c.image_size = 4;
  c.patch_size = 2;
  c.channels = 1;
  c.max_text_len = 8;
  return c;
}

/// Per-test scratch directory, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("clora_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace clora::test
