#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "tvq/tensor.hpp"

namespace tvq::test {

// Central finite differences against the analytic gradient, h = 1e-3.
// Returns the worst relative error over all parameter entries, with a 1e-5
// absolute floor (errors below the floor count as zero).
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string where;
};

inline GradCheckResult grad_check(std::vector<Tensor> params,
                                  const std::function<Tensor()>& loss_fn, double h = 1e-3,
                                  double abs_floor = 1e-5) {
  for (auto& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  GradCheckResult res;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<float> analytic = p.grad();
    for (size_t j = 0; j < p.data().size(); ++j) {
      const float orig = p.data()[j];
      p.data()[j] = float(orig + h);
      const double fp = loss_fn().item();
      p.data()[j] = float(orig - h);
      const double fm = loss_fn().item();
      p.data()[j] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[j];
      const double err = std::abs(a - numeric);
      if (err <= abs_floor) continue;
      const double rel = err / std::max({std::abs(a), std::abs(numeric), 1e-12});
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.where = "param " + std::to_string(pi) + " entry " + std::to_string(j) +
                    " analytic " + std::to_string(a) + " numeric " + std::to_string(numeric);
      }
    }
  }
  return res;
}

// Scratch directory unique to a test, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() /
           ("tvq_test_" + tag + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(dir_, ec);
  }
  const std::filesystem::path& path() const { return dir_; }
  std::string file(const std::string& name) const { return (dir_ / name).string(); }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path dir_;
};

}  // namespace tvq::test
