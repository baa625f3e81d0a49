#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ibg {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

// Bad user-supplied configuration (CLI exit code 1).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated operation contract or failed stage (CLI exit code 2).
struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

inline void check_cfg(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

bool all_finite(const Mat& m);
bool all_finite(const Vec& v);

void check_finite(const Mat& m, const std::string& what);
void check_finite(const Vec& v, const std::string& what);

}  // namespace ibg
