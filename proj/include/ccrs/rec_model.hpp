#pragma once

// Recommendation side: user-conditioned entity encoder followed by turn and
// self-importance pooling over the mentioned entities. All parameter groups
// live under the "rec." prefix.

#include "ccrs/autograd.hpp"
#include "ccrs/corpus.hpp"
#include "ccrs/graph_encoder.hpp"
#include "ccrs/intention.hpp"
#include "ccrs/metrics.hpp"
#include "ccrs/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs {

/// Scalar objective plus gradients for every group of the parameter set.
struct LossGrad {
  double loss = 0.0;
  ParamSet grads;
  /// Number of labels that contributed (0 means the loss is undefined).
  std::size_t count = 0;
};

}  // namespace ccrs

namespace ccrs::rec {

inline const std::string kPrefix = "rec.";

struct RecConfig {
  graph::EncoderConfig encoder;
  int max_turns = 64;
  corpus::HistoryOptions history;

  nlohmann::json to_json() const;
  static RecConfig from_json(const nlohmann::json& j);
};

/// One prediction point: entity history before `turn` and the gold item.
struct Label {
  std::vector<int> entities;
  std::vector<int> turns;
  int gold_entity = 0;
};

/// Labels of one user's conversations, ordered by (conversation, turn).
std::vector<Label> make_labels(const std::vector<corpus::Conversation>& convs, const corpus::KnowledgeGraph& kg,
                               const corpus::HistoryOptions& opts);

/// Intention diagnostics for one context.
struct Intention {
  Vector p_u;
  Vector mu_o;
  Vector mu_r;
  std::vector<int> entities;
};

class RecModel {
 public:
  RecModel(corpus::KnowledgeGraph kg, std::vector<std::string> users, RecConfig cfg);

  const corpus::KnowledgeGraph& kg() const { return kg_; }
  const corpus::GraphIndex& graph() const { return graph_; }
  const RecConfig& config() const { return cfg_; }
  const std::vector<std::string>& users() const { return users_; }
  const std::vector<int>& item_ids() const { return items_; }

  /// Row of a training user in the user table, or -1 (mean-user fallback).
  int user_index(const std::string& user_id) const;

  ParamSet init_params(std::uint64_t seed) const;
  /// Shape check against the configuration; throws std::invalid_argument.
  void check_params(const ParamSet& params) const;
  /// Copy of `params` with one extra user row holding the mean of the table.
  /// Returns the new row index through `row`.
  static ParamSet with_mean_user(const ParamSet& params, int& row);

  /// 1 x d_u user row on the tape; row -1 averages the table.
  ag::Var user_row(ag::Tape& tape, const ParamSet& params, int row) const;
  /// Entity representations (num_entities x d) for one user.
  ag::Var encode(ag::Tape& tape, const ParamSet& params, int row) const;
  /// p_u (1 x d) on the tape. Returns a zero constant for an empty history.
  ag::Var intention(ag::Tape& tape, const ParamSet& params, const ag::Var& H, const std::vector<int>& entities,
                    const std::vector<int>& turns, ag::Var* mu_o = nullptr, ag::Var* mu_r = nullptr) const;

  /// Mean negative log-likelihood over a user's labels (gold probability
  /// clamped at 1e-12).
  ag::Var loss(ag::Tape& tape, const ParamSet& params, int row, const std::vector<Label>& labels) const;
  LossGrad loss_and_grad(const ParamSet& params, int row, const std::vector<Label>& labels) const;
  double loss_value(const ParamSet& params, int row, const std::vector<Label>& labels) const;

  /// Full ranking of items for every label.
  std::vector<metrics::RankedResult> rank_labels(const ParamSet& params, int row,
                                                 const std::vector<Label>& labels) const;

  /// Inference for a single context.
  Intention infer(const ParamSet& params, int row, const std::vector<int>& entities,
                  const std::vector<int>& turns, intention::ItemIndex* index = nullptr) const;
  intention::ItemIndex item_index(const ParamSet& params, int row) const;
  Matrix entity_reps(const ParamSet& params, int row) const;

 private:
  int clamp_turn(int turn) const;

  corpus::KnowledgeGraph kg_;
  corpus::GraphIndex graph_;
  std::vector<std::string> users_;
  std::map<std::string, int> user_rows_;
  std::vector<int> items_;
  RecConfig cfg_;
};

}  // namespace ccrs::rec
