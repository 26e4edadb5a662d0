#pragma once

#include "ccrs/corpus.hpp"
#include "ccrs/tensor.hpp"

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs::intention {

/// Additive attention pool: softmax(w2 . tanh(W1 x_j)) over the rows x_j.
struct AttentionPool {
  Eigen::Ref<const Matrix> W1;  // d x d
  Eigen::Ref<const Matrix> w2;  // 1 x d
};

/// Weights over the n rows of X (n x d). Throws on n = 0.
Vector attn_pool(const Matrix& X, const AttentionPool& pool);

/// mu^o: attention over turn embeddings; turn ids past the table clamp to the last row.
Vector turn_importance(const std::vector<corpus::Mention>& mentions, const Matrix& turn_table,
                       const AttentionPool& pool);

/// p_u = 1/2 (mu^r + mu^o) H_u.
Vector user_intention(const Matrix& H_u, const Vector& mu_o, const Vector& mu_r);

struct ItemIndex {
  std::vector<int> item_ids;  // ascending entity ids
  Matrix reps;                // one row per item

  std::size_t size() const { return item_ids.size(); }
  /// Row of an entity id, or -1.
  int position(int entity_id) const;
};

struct ScoredItem {
  int item_id = 0;
  double probability = 0.0;
};

/// Softmax over every item of p_u . h(item); excluded items removed after the
/// softmax; top-k by probability with ties broken by ascending id.
std::vector<ScoredItem> recommend(const Vector& p_u, const ItemIndex& index, std::size_t k,
                                  const std::set<int>& exclude = {});

/// Full-index probabilities (before exclusion).
Vector item_distribution(const Vector& p_u, const ItemIndex& index);

struct LabeledDistribution {
  Vector p_rec;
  int gold = 0;  // position in the distribution
};

/// Mean over users of the mean over that user's labels of -log p(gold),
/// with the gold probability clamped at 1e-12.
double rec_loss(const std::vector<std::vector<LabeledDistribution>>& per_user);

/// [{item_id, score, rank}] with 1-based ranks; `names` maps ids to strings
/// when provided.
nlohmann::json ranked_to_json(const std::vector<ScoredItem>& items,
                              const std::vector<std::string>* names = nullptr);

}  // namespace ccrs::intention
