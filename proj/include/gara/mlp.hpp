// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/errors.hpp"
#include "gara/linalg.hpp"
#include "gara/rng.hpp"

namespace gara {

// Fully connected ReLU network operating on row vectors (1 x in).
// Weights are (out x in); the final layer has no activation.
class Mlp {
 public:
  Mlp() = default;

  // widths = {in, hidden..., out}; He-normal weights, zero biases, final bias `final_bias`.
  Mlp(const std::string& name, const std::vector<std::size_t>& widths, SeededRng& rng,
      double final_bias = 0.0) {
    if (widths.size() < 2) throw ConfigError("Mlp " + name + ": needs at least input and output width");
    for (std::size_t w : widths)
      if (w == 0) throw ConfigError("Mlp " + name + ": zero width layer");
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const std::size_t in = widths[l], out = widths[l + 1];
      Matrix w(out, in);
      const double std = std::sqrt(2.0 / static_cast<double>(in));
      for (auto& v : w.data()) v = sample_normal(rng, 0.0, std);
      const bool last = l + 2 == widths.size();
      weights_.emplace_back(name + ".w" + std::to_string(l), std::move(w));
      biases_.emplace_back(name + ".b" + std::to_string(l), Matrix(1, out, last ? final_bias : 0.0));
    }
  }

  std::size_t depth() const noexcept { return weights_.size(); }
  std::size_t input_width() const { return weights_.front().value.cols(); }
  std::size_t output_width() const { return weights_.back().value.rows(); }

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights_.size(); ++l) n += weights_[l].value.size() + biases_[l].value.size();
    return n;
  }

  ad::Var forward(ad::Tape& tape, const ad::Var& x) {
    check_input(x.value());
    ad::Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = ad::add_row(ad::matmul_nt(h, tape.leaf(weights_[l])), tape.leaf(biases_[l]));
      if (l + 1 < weights_.size()) h = ad::relu(h);
    }
    return h;
  }

  // Plain evaluation without recording.
  Matrix evaluate(const Matrix& x) const {
    check_input(x);
    Matrix h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      Matrix next = matmul_nt(h, weights_[l].value);
      const Matrix& b = biases_[l].value;
      for (std::size_t i = 0; i < next.rows(); ++i)
        for (std::size_t j = 0; j < next.cols(); ++j) {
          next(i, j) += b[j];
          if (l + 1 < weights_.size() && next(i, j) < 0.0) next(i, j) = 0.0;
        }
      h = std::move(next);
    }
    return h;
  }

  // Visits (W0, b0, W1, b1, ...) in checkpoint order.
  template <class F>
  void for_each_param(F&& f) {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      f(weights_[l]);
      f(biases_[l]);
    }
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      f(weights_[l]);
      f(biases_[l]);
    }
  }

  ad::Param& weight(std::size_t l) { return weights_.at(l); }
  ad::Param& bias(std::size_t l) { return biases_.at(l); }
  const ad::Param& bias(std::size_t l) const { return biases_.at(l); }

 private:
  void check_input(const Matrix& x) const {
    if (weights_.empty()) throw UsageError("Mlp: not initialised");
    if (x.rows() != 1 || x.cols() != input_width()) {
      throw ShapeError("Mlp: expected input 1x" + std::to_string(input_width()) + ", got " + x.shape_str());
    }
  }

  std::vector<ad::Param> weights_;
  std::vector<ad::Param> biases_;
};

}  // namespace gara
