#include "ccrs/tensor.hpp"

#include <cmath>
#include <stdexcept>

namespace ccrs {

Matrix& ParamSet::at(const std::string& name) {
  auto it = groups_.find(name);
  if (it == groups_.end()) throw std::out_of_range("unknown parameter group: " + name);
  return it->second;
}

const Matrix& ParamSet::at(const std::string& name) const {
  auto it = groups_.find(name);
  if (it == groups_.end()) throw std::out_of_range("unknown parameter group: " + name);
  return it->second;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(groups_.size());
  for (const auto& [name, _] : groups_) out.push_back(name);
  return out;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : groups_) n += static_cast<std::size_t>(m.size());
  return n;
}

ParamSet ParamSet::zeros_like() const {
  ParamSet out;
  for (const auto& [name, m] : groups_) out.set(name, Matrix::Zero(m.rows(), m.cols()));
  return out;
}

ParamSet ParamSet::subset(const std::set<std::string>& names) const {
  ParamSet out;
  for (const auto& name : names) out.set(name, at(name));
  return out;
}

void ParamSet::axpy(double alpha, const ParamSet& other) {
  for (const auto& [name, m] : other.groups_) {
    Matrix& mine = at(name);
    if (mine.rows() != m.rows() || mine.cols() != m.cols())
      throw std::invalid_argument("shape mismatch in axpy for group " + name);
    mine += alpha * m;
  }
}

void ParamSet::axpy(double alpha, const ParamSet& other, const std::set<std::string>& restrict_to) {
  for (const auto& name : restrict_to) {
    if (!other.contains(name)) continue;
    at(name) += alpha * other.at(name);
  }
}

void ParamSet::scale(double alpha) {
  for (auto& [_, m] : groups_) m *= alpha;
}

bool ParamSet::all_finite() const {
  for (const auto& [_, m] : groups_)
    if (!m.allFinite()) return false;
  return true;
}

double ParamSet::max_abs() const {
  double best = 0.0;
  for (const auto& [_, m] : groups_)
    if (m.size() > 0) best = std::max(best, m.cwiseAbs().maxCoeff());
  return best;
}

double ParamSet::dot(const ParamSet& other) const {
  double s = 0.0;
  for (const auto& [name, m] : groups_) {
    if (!other.contains(name)) continue;
    s += m.cwiseProduct(other.at(name)).sum();
  }
  return s;
}

bool ParamSet::identical(const ParamSet& other) const {
  if (groups_.size() != other.groups_.size()) return false;
  for (const auto& [name, m] : groups_) {
    auto it = other.groups_.find(name);
    if (it == other.groups_.end()) return false;
    const Matrix& o = it->second;
    if (o.rows() != m.rows() || o.cols() != m.cols()) return false;
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (m.data()[i] != o.data()[i]) return false;
  }
  return true;
}

Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, double fan_out,
                      std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix m(rows, cols);
  // Fill in row-major order so the draw sequence does not depend on storage order.
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = dist(rng);
  return m;
}

Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  return glorot_uniform(rows, cols, static_cast<double>(cols), static_cast<double>(rows), rng);
}

Vector softmax(const Vector& logits) {
  if (logits.size() == 0) return logits;
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

}  // namespace ccrs
