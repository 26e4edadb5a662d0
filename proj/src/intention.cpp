#include "ccrs/intention.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace ccrs::intention {

Vector attn_pool(const Matrix& X, const AttentionPool& pool) {
  if (X.rows() == 0) throw std::invalid_argument("attn_pool needs at least one row");
  if (X.cols() != pool.W1.cols()) throw std::invalid_argument("attn_pool: dimension mismatch");
  const Matrix hidden = (X * pool.W1.transpose()).array().tanh().matrix();
  const Vector logits = hidden * pool.w2.transpose();
  return softmax(logits);
}

Vector turn_importance(const std::vector<corpus::Mention>& mentions, const Matrix& turn_table,
                       const AttentionPool& pool) {
  if (mentions.empty()) throw std::invalid_argument("turn_importance needs at least one mention");
  Matrix O(static_cast<Eigen::Index>(mentions.size()), turn_table.cols());
  for (std::size_t i = 0; i < mentions.size(); ++i) {
    const int turn = mentions[i].turn;
    if (turn < 0) throw std::out_of_range("negative turn index");
    const auto row = std::min<Eigen::Index>(turn, turn_table.rows() - 1);
    O.row(static_cast<Eigen::Index>(i)) = turn_table.row(row);
  }
  return attn_pool(O, pool);
}

Vector user_intention(const Matrix& H_u, const Vector& mu_o, const Vector& mu_r) {
  if (mu_o.size() != H_u.rows() || mu_r.size() != H_u.rows())
    throw std::invalid_argument("user_intention: weight length does not match mention count");
  return (0.5 * (mu_r + mu_o).transpose() * H_u).transpose();
}

int ItemIndex::position(int entity_id) const {
  auto it = std::lower_bound(item_ids.begin(), item_ids.end(), entity_id);
  if (it == item_ids.end() || *it != entity_id) return -1;
  return static_cast<int>(it - item_ids.begin());
}

Vector item_distribution(const Vector& p_u, const ItemIndex& index) {
  if (index.size() == 0) throw std::invalid_argument("empty item index");
  if (p_u.size() != index.reps.cols()) throw std::invalid_argument("intention width does not match item index");
  return softmax(index.reps * p_u);
}

std::vector<ScoredItem> recommend(const Vector& p_u, const ItemIndex& index, std::size_t k,
                                  const std::set<int>& exclude) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  const Vector probs = item_distribution(p_u, index);
  std::vector<ScoredItem> pool;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (exclude.count(index.item_ids[i])) continue;
    pool.push_back(ScoredItem{index.item_ids[i], probs(static_cast<Eigen::Index>(i))});
  }
  std::sort(pool.begin(), pool.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    return a.item_id < b.item_id;
  });
  if (pool.size() > k) pool.resize(k);
  return pool;
}

double rec_loss(const std::vector<std::vector<LabeledDistribution>>& per_user) {
  double total = 0.0;
  std::size_t users = 0;
  for (const auto& labels : per_user) {
    if (labels.empty()) continue;
    double s = 0.0;
    for (const auto& l : labels) {
      if (l.gold < 0 || l.gold >= l.p_rec.size()) throw std::out_of_range("gold item not in distribution");
      s += -std::log(std::max(l.p_rec(l.gold), 1e-12));
    }
    total += s / static_cast<double>(labels.size());
    ++users;
  }
  return users == 0 ? 0.0 : total / static_cast<double>(users);
}

nlohmann::json ranked_to_json(const std::vector<ScoredItem>& items, const std::vector<std::string>* names) {
  nlohmann::json out = nlohmann::json::array();
  int rank = 1;
  for (const auto& it : items) {
    nlohmann::json j;
    if (names != nullptr)
      j["item_id"] = names->at(static_cast<std::size_t>(it.item_id));
    else
      j["item_id"] = it.item_id;
    j["score"] = it.probability;
    j["rank"] = rank++;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace ccrs::intention
