#include "ccrs/rec_model.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace ccrs::rec {

using ag::Var;

nlohmann::json RecConfig::to_json() const {
  return {{"dim", encoder.dim},
          {"heads", encoder.heads},
          {"layers", encoder.layers},
          {"user_dim", encoder.user_dim},
          {"scale_by_full_dim", encoder.scale_by_full_dim},
          {"max_turns", max_turns},
          {"history_seeker", history.seeker},
          {"history_recommender", history.recommender},
          {"history_max_length", history.max_length}};
}

RecConfig RecConfig::from_json(const nlohmann::json& j) {
  RecConfig c;
  c.encoder.dim = j.value("dim", c.encoder.dim);
  c.encoder.heads = j.value("heads", c.encoder.heads);
  c.encoder.layers = j.value("layers", c.encoder.layers);
  c.encoder.user_dim = j.value("user_dim", c.encoder.dim);
  c.encoder.scale_by_full_dim = j.value("scale_by_full_dim", c.encoder.scale_by_full_dim);
  c.max_turns = j.value("max_turns", c.max_turns);
  c.history.seeker = j.value("history_seeker", c.history.seeker);
  c.history.recommender = j.value("history_recommender", c.history.recommender);
  c.history.max_length = j.value("history_max_length", c.history.max_length);
  c.encoder.validate();
  if (c.max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
  return c;
}

std::vector<Label> make_labels(const std::vector<corpus::Conversation>& convs, const corpus::KnowledgeGraph& kg,
                               const corpus::HistoryOptions& opts) {
  std::vector<Label> out;
  for (const auto& conv : convs) {
    for (const auto& target : conv.targets) {
      Label l;
      l.gold_entity = kg.entity(target.item);
      for (const auto& m : corpus::mention_history(conv, target.turn, opts)) {
        l.entities.push_back(kg.entity(m.entity));
        l.turns.push_back(m.turn);
      }
      out.push_back(std::move(l));
    }
  }
  return out;
}

RecModel::RecModel(corpus::KnowledgeGraph kg, std::vector<std::string> users, RecConfig cfg)
    : kg_(std::move(kg)), users_(std::move(users)), cfg_(cfg) {
  cfg_.encoder.validate();
  if (cfg_.max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
  graph_ = corpus::build_graph_index(kg_);
  for (std::size_t i = 0; i < users_.size(); ++i) {
    if (!user_rows_.emplace(users_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("duplicate user id: " + users_[i]);
  }
  items_ = kg_.items();
  if (items_.empty()) throw std::invalid_argument("knowledge graph has no item entities");
}

int RecModel::user_index(const std::string& user_id) const {
  auto it = user_rows_.find(user_id);
  return it == user_rows_.end() ? -1 : it->second;
}

ParamSet RecModel::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  const int d = cfg_.encoder.dim;
  ParamSet p;
  p.set(kPrefix + "entity_emb", glorot_uniform(graph_.num_entities, d, rng));
  p.set(kPrefix + "user_emb", glorot_uniform(static_cast<Eigen::Index>(users_.size()), cfg_.encoder.user_dim, rng));
  for (int l = 0; l < cfg_.encoder.layers; ++l)
    graph::init_layer_params(p, kPrefix, l, cfg_.encoder, graph_.num_relations(), rng);
  p.set(kPrefix + "turn_emb", glorot_uniform(cfg_.max_turns, d, rng));
  for (const char* pool : {"turn_pool", "entity_pool"}) {
    p.set(kPrefix + pool + ".W1", glorot_uniform(d, d, rng));
    p.set(kPrefix + pool + ".w2", glorot_uniform(1, d, rng));
  }
  return p;
}

void RecModel::check_params(const ParamSet& params) const {
  const ParamSet ref = init_params(0);
  for (const auto& [name, m] : ref) {
    if (!params.contains(name)) throw std::invalid_argument("missing parameter group " + name);
    const Matrix& got = params.at(name);
    const bool user_table = name == kPrefix + "user_emb";
    if (got.cols() != m.cols() || (user_table ? got.rows() < m.rows() : got.rows() != m.rows()))
      throw std::invalid_argument("shape mismatch for " + name + ": expected " + std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) + ", got " + std::to_string(got.rows()) + "x" +
                                  std::to_string(got.cols()));
  }
}

ParamSet RecModel::with_mean_user(const ParamSet& params, int& row) {
  ParamSet out = params;
  const Matrix& U = params.at(kPrefix + "user_emb");
  Matrix grown(U.rows() + 1, U.cols());
  grown.topRows(U.rows()) = U;
  grown.row(U.rows()) = U.rows() > 0 ? RowVector(U.colwise().mean()) : RowVector::Zero(U.cols());
  out.set(kPrefix + "user_emb", std::move(grown));
  row = static_cast<int>(U.rows());
  return out;
}

Var RecModel::user_row(ag::Tape& tape, const ParamSet& params, int row) const {
  Var U = tape.param(params, kPrefix + "user_emb");
  if (row >= 0) {
    if (row >= U.rows()) throw std::out_of_range("user row out of range");
    return ag::gather_rows(U, {row});
  }
  if (U.rows() == 0) return tape.constant(Matrix::Zero(1, U.cols()));
  return ag::matmul(tape.constant(Matrix::Constant(1, U.rows(), 1.0 / static_cast<double>(U.rows()))), U);
}

Var RecModel::encode(ag::Tape& tape, const ParamSet& params, int row) const {
  return graph::encode_entities(tape, graph_, user_row(tape, params, row), params, kPrefix, cfg_.encoder);
}

int RecModel::clamp_turn(int turn) const {
  if (turn < 0) throw std::out_of_range("negative turn index");
  return std::min(turn, cfg_.max_turns - 1);
}

namespace {

/// n x 1 column of pool weights over the rows of X.
Var pool_weights(ag::Tape& tape, const ParamSet& params, const std::string& name, const Var& X) {
  Var W1 = tape.param(params, kPrefix + name + ".W1");
  Var w2 = tape.param(params, kPrefix + name + ".w2");
  Var scores = ag::matmul(ag::tanh(ag::matmul(X, ag::transpose(W1))), ag::transpose(w2));
  return ag::transpose(ag::softmax_rows(ag::transpose(scores)));
}

}  // namespace

Var RecModel::intention(ag::Tape& tape, const ParamSet& params, const Var& H, const std::vector<int>& entities,
                        const std::vector<int>& turns, Var* mu_o, Var* mu_r) const {
  if (entities.size() != turns.size()) throw std::invalid_argument("entity and turn lists differ in length");
  if (entities.empty()) return tape.constant(Matrix::Zero(1, H.cols()));
  for (int e : entities)
    if (e < 0 || e >= graph_.num_entities) throw std::out_of_range("mention entity out of range");
  std::vector<int> clamped(turns.size());
  std::transform(turns.begin(), turns.end(), clamped.begin(), [this](int t) { return clamp_turn(t); });
  Var H_u = ag::gather_rows(H, entities);
  Var O = ag::gather_rows(tape.param(params, kPrefix + "turn_emb"), clamped);
  Var wo = pool_weights(tape, params, "turn_pool", O);
  Var wr = pool_weights(tape, params, "entity_pool", H_u);
  if (mu_o != nullptr) *mu_o = wo;
  if (mu_r != nullptr) *mu_r = wr;
  return ag::scale(ag::matmul(ag::transpose(ag::add(wo, wr)), H_u), 0.5);
}

Var RecModel::loss(ag::Tape& tape, const ParamSet& params, int row, const std::vector<Label>& labels) const {
  if (labels.empty()) throw std::invalid_argument("rec loss needs at least one label");
  Var H = encode(tape, params, row);
  std::vector<Var> rows;
  std::vector<int> gold;
  for (const auto& l : labels) {
    rows.push_back(intention(tape, params, H, l.entities, l.turns));
    auto it = std::lower_bound(items_.begin(), items_.end(), l.gold_entity);
    if (it == items_.end() || *it != l.gold_entity)
      throw std::invalid_argument("gold entity is not an item: " + kg_.entity_name(l.gold_entity));
    gold.push_back(static_cast<int>(it - items_.begin()));
  }
  Var P = ag::concat_rows(rows);
  Var logits = ag::matmul(P, ag::transpose(ag::gather_rows(H, items_)));
  return ag::mean(ag::pick_nll(ag::log_softmax_rows(logits), gold, 1e-12));
}

LossGrad RecModel::loss_and_grad(const ParamSet& params, int row, const std::vector<Label>& labels) const {
  LossGrad out;
  if (labels.empty()) {
    out.grads = params.zeros_like();
    return out;
  }
  ag::Tape tape;
  Var L = loss(tape, params, row, labels);
  tape.backward(L);
  out.loss = L.scalar();
  out.grads = tape.param_grads(params);
  out.count = labels.size();
  return out;
}

double RecModel::loss_value(const ParamSet& params, int row, const std::vector<Label>& labels) const {
  ag::Tape tape(false);
  return loss(tape, params, row, labels).scalar();
}

std::vector<metrics::RankedResult> RecModel::rank_labels(const ParamSet& params, int row,
                                                         const std::vector<Label>& labels) const {
  std::vector<metrics::RankedResult> out;
  if (labels.empty()) return out;
  ag::Tape tape(false);
  Var H = encode(tape, params, row);
  intention::ItemIndex index;
  index.item_ids = items_;
  index.reps = ag::gather_rows(H, items_).value();
  for (const auto& l : labels) {
    const Matrix p = intention(tape, params, H, l.entities, l.turns).value();
    const auto ranked = intention::recommend(p.row(0).transpose(), index, items_.size());
    metrics::RankedResult r;
    r.gold = l.gold_entity;
    for (const auto& s : ranked) r.candidates.push_back(s.item_id);
    out.push_back(std::move(r));
  }
  return out;
}

Intention RecModel::infer(const ParamSet& params, int row, const std::vector<int>& entities,
                          const std::vector<int>& turns, intention::ItemIndex* index) const {
  ag::Tape tape(false);
  Var H = encode(tape, params, row);
  Var mu_o, mu_r;
  Var p = intention(tape, params, H, entities, turns, &mu_o, &mu_r);
  Intention out;
  out.p_u = p.value().row(0).transpose();
  out.entities = entities;
  if (!entities.empty()) {
    out.mu_o = mu_o.value().col(0);
    out.mu_r = mu_r.value().col(0);
  }
  if (index != nullptr) {
    index->item_ids = items_;
    index->reps = ag::gather_rows(H, items_).value();
  }
  return out;
}

intention::ItemIndex RecModel::item_index(const ParamSet& params, int row) const {
  intention::ItemIndex index;
  index.item_ids = items_;
  index.reps = entity_reps(params, row)(items_, Eigen::all);
  return index;
}

Matrix RecModel::entity_reps(const ParamSet& params, int row) const {
  ag::Tape tape(false);
  return encode(tape, params, row).value();
}

}  // namespace ccrs::rec
