#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace ccrs {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Named collection of parameter groups. Ordered by name so that iteration,
/// serialization and random initialization are deterministic.
class ParamSet {
 public:
  using Map = std::map<std::string, Matrix>;

  ParamSet() = default;

  bool contains(const std::string& name) const { return groups_.count(name) != 0; }
  Matrix& at(const std::string& name);
  const Matrix& at(const std::string& name) const;
  void set(const std::string& name, Matrix value) { groups_[name] = std::move(value); }
  void erase(const std::string& name) { groups_.erase(name); }

  std::vector<std::string> names() const;
  std::size_t size() const { return groups_.size(); }
  std::size_t scalar_count() const;

  Map& groups() { return groups_; }
  const Map& groups() const { return groups_; }
  Map::iterator begin() { return groups_.begin(); }
  Map::iterator end() { return groups_.end(); }
  Map::const_iterator begin() const { return groups_.begin(); }
  Map::const_iterator end() const { return groups_.end(); }

  /// Same names and shapes, all zeros.
  ParamSet zeros_like() const;
  /// Restrict to a set of names; missing names are an error.
  ParamSet subset(const std::set<std::string>& names) const;

  /// this += alpha * other, over the names of `other` (or only `restrict_to`).
  void axpy(double alpha, const ParamSet& other);
  void axpy(double alpha, const ParamSet& other, const std::set<std::string>& restrict_to);
  void scale(double alpha);

  bool all_finite() const;
  double max_abs() const;
  double dot(const ParamSet& other) const;
  /// Structural equality plus exact value equality.
  bool identical(const ParamSet& other) const;

 private:
  Map groups_;
};

/// Glorot/Xavier uniform initialization with limit sqrt(6 / (fan_in + fan_out)).
Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);
Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out,
                      std::mt19937_64& rng);

/// Numerically stable softmax of a vector.
Vector softmax(const Vector& logits);

}  // namespace ccrs
