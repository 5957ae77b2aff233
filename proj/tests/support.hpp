#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "openvad/autodiff.hpp"
#include "openvad/core.hpp"
#include "openvad/data.hpp"
#include "openvad/model.hpp"
#include "openvad/synthesis.hpp"

namespace testing {

using openvad::Mat;
using openvad::ad::Tape;
using openvad::ad::Var;

inline Mat random_mat(openvad::Rng& rng, int rows, int cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

/// ||a - b|| / (||a|| + ||b||), zero when both vanish.
inline double relative_error(const Mat& a, const Mat& b) {
  const double denom = a.norm() + b.norm();
  return denom == 0.0 ? 0.0 : (a - b).norm() / denom;
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every input. Returns the worst per-input relative error, or
/// with joint set the relative error of the concatenated gradient (inputs whose
/// gradient sits below the finite-difference noise floor then cannot dominate).
inline double gradient_error(const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                             const std::vector<Mat>& inputs, double h = 1e-6, bool joint = false) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& m : inputs) vars.push_back(tape.variable(m));
  Var out = f(tape, vars);
  tape.backward(out);
  double worst = 0.0, diff_sq = 0.0, a_sq = 0.0, n_sq = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Mat analytic = tape.grad(vars[k]);
    Mat numeric(inputs[k].rows(), inputs[k].cols());
    for (Eigen::Index i = 0; i < inputs[k].size(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Mat> shifted = inputs;
        shifted[k].data()[i] += delta;
        Tape t;
        std::vector<Var> vs;
        for (const auto& m : shifted) vs.push_back(t.constant(m));
        return f(t, vs).scalar();
      };
      numeric.data()[i] = (eval(h) - eval(-h)) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(analytic, numeric));
    diff_sq += (analytic - numeric).squaredNorm();
    a_sq += analytic.squaredNorm();
    n_sq += numeric.squaredNorm();
  }
  if (!joint) return worst;
  const double denom = std::sqrt(a_sq) + std::sqrt(n_sq);
  return denom == 0.0 ? 0.0 : std::sqrt(diff_sq) / denom;
}

/// Same check for model parameters: loss(params) is rebuilt on a fresh tape
/// for every perturbation. At most max_coords randomly chosen coordinates per
/// tensor are probed.
inline double parameter_gradient_error(
    openvad::Model& model,
    const std::function<Var(Tape&, const openvad::BoundParameters&)>& loss, int max_coords, openvad::Rng& rng,
    double h = 1e-6) {
  openvad::ParameterSet& params = model.params();
  openvad::ParameterSet grads = params.zeros_like();
  {
    Tape tape;
    openvad::BoundParameters p(tape, params, &grads);
    tape.backward(loss(tape, p));
  }
  auto eval = [&]() {
    Tape t;
    openvad::BoundParameters p(t, params, nullptr);
    return loss(t, p).scalar();
  };
  std::vector<double> analytic, numeric;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Mat& w = params.value(k);
    const Eigen::Index n = w.size();
    std::vector<Eigen::Index> coords;
    if (n <= max_coords) {
      for (Eigen::Index i = 0; i < n; ++i) coords.push_back(i);
    } else {
      for (int c = 0; c < max_coords; ++c) coords.push_back(rng.randint(0, n - 1));
    }
    for (Eigen::Index i : coords) {
      const double orig = w.data()[i];
      w.data()[i] = orig + h;
      const double up = eval();
      w.data()[i] = orig - h;
      const double down = eval();
      w.data()[i] = orig;
      numeric.push_back((up - down) / (2.0 * h));
      analytic.push_back(grads.value(k).data()[i]);
    }
  }
  const Eigen::Map<const Eigen::VectorXd> a(analytic.data(), static_cast<Eigen::Index>(analytic.size()));
  const Eigen::Map<const Eigen::VectorXd> b(numeric.data(), static_cast<Eigen::Index>(numeric.size()));
  const double denom = a.norm() + b.norm();
  return denom == 0.0 ? 0.0 : (a - b).norm() / denom;
}

inline openvad::Config tiny_config() {
  openvad::Config c;
  c.hidden_size = 16;
  c.encoder_layers = 1;
  c.fusion_layers = 1;
  c.conv_kernel = 3;
  c.batch_size = 4;
  c.epochs = 1;
  c.knn_n = 10;
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("openvad_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline openvad::SyntheticSpec small_spec() {
  openvad::SyntheticSpec s;
  s.num_categories = 3;
  s.train_videos = 16;
  s.val_videos = 8;
  s.embed_dim = 8;
  s.min_length = 6;
  s.max_length = 12;
  return s;
}

/// In-memory evaluation videos of one split.
inline std::vector<openvad::TrainingVideo> split_videos(const openvad::SyntheticDataset& ds, openvad::Split split) {
  std::vector<openvad::TrainingVideo> out;
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    if (ds.records[i].split == split) out.push_back({ds.records[i], ds.features[i]});
  }
  return out;
}

}  // namespace testing
