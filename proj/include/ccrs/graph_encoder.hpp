#pragma once

// User-conditioned relation attention over the knowledge graph.
//
// Parameter layout for one layer with model width d, k heads, head width
// dk = d / k, and R extended relations:
//   W_T, W_S, W_M : d x d   rows [i*dk, (i+1)*dk) hold head i's projection
//   W_A           : d x d   aggregation matrix
//   W_u           : dk^2 x d_u
//   A, M          : dk^2 x (R*k); column r*k + i is the row-major flattening
//                   of the dk x dk matrix for relation r, head i

#include "ccrs/autograd.hpp"
#include "ccrs/corpus.hpp"
#include "ccrs/tensor.hpp"

#include <string>
#include <vector>

namespace ccrs::graph {

struct EncoderConfig {
  int dim = 128;
  int heads = 4;
  int layers = 1;
  int user_dim = 128;
  /// Divide attention logits by sqrt(d) (true) or sqrt(d / k) (false).
  bool scale_by_full_dim = true;

  int head_dim() const { return dim / heads; }
  void validate() const;
};

/// Non-owning view over one layer's parameter matrices.
struct LayerView {
  Eigen::Ref<const Matrix> W_T;
  Eigen::Ref<const Matrix> W_S;
  Eigen::Ref<const Matrix> W_M;
  Eigen::Ref<const Matrix> W_A;
  Eigen::Ref<const Matrix> W_u;
  Eigen::Ref<const Matrix> A;
  Eigen::Ref<const Matrix> M;
  int heads;
  bool scale_by_full_dim = true;

  int dim() const { return static_cast<int>(W_T.rows()); }
  int head_dim() const { return dim() / heads; }
  int num_relations() const { return static_cast<int>(A.cols()) / heads; }
  double logit_scale() const;
  /// dk x dk matrix A^i_r (or M^i_r) reassembled from its flattened column.
  Matrix relation_matrix(int relation, int head) const;
  Matrix message_matrix(int relation, int head) const;
};

std::string layer_prefix(int layer);
/// Group names "<prefix>layer<l>.<W_T|W_S|W_M|W_A|W_u|A|M>".
std::vector<std::string> layer_param_names(const std::string& prefix, int layer);
LayerView layer_view(const ParamSet& params, const std::string& prefix, int layer, const EncoderConfig& cfg);
void init_layer_params(ParamSet& params, const std::string& prefix, int layer, const EncoderConfig& cfg,
                       int num_relations, std::mt19937_64& rng);

enum class Role { target, source };

/// k vectors of length d/k: W^T_i h (target role) or W^S_i h (source role).
std::vector<Vector> project_heads(const Vector& h, Role role, const LayerView& layer);

/// gamma = Vec(A^i_r) . (W_u u) with Vec the row-major flattening.
double relation_user_affinity(int relation, const Vector& user_vec, int head, const LayerView& layer);

/// g_i = S_i(e')^T A^i_r T_i(e) * gamma / sqrt(d).
double attention_logit(const Vector& h_target, const Vector& h_source, int relation, const Vector& user_vec,
                       int head, const LayerView& layer);

/// Head-wise softmax over the incoming edges of `entity`. Row j corresponds to
/// graph.edges[graph.offsets[entity] + j]; column i is head i.
Matrix neighbor_attention(int entity, const Vector& user_vec, const LayerView& layer, const corpus::GraphIndex& graph,
                          const Matrix& h_prev);

/// F(e') = concat_i M^i_r W^M_i h(e').
Vector message(const Vector& h_source, int relation, const LayerView& layer);

/// h^l(e) = GELU(W^A sum_{e'} G(e') . F(e')) + h^{l-1}(e), head-wise weighting.
Vector aggregate_and_update(int entity, const Vector& user_vec, const LayerView& layer,
                            const corpus::GraphIndex& graph, const Matrix& h_prev);

/// Full-graph forward of one layer (vectorized); rows of h_prev are entities.
Matrix layer_forward(const LayerView& layer, const corpus::GraphIndex& graph, const Matrix& h_prev,
                     const Vector& user_vec);

/// Applies the layer stack to every entity. `params` must hold the entity
/// table under "<prefix>entity_emb" and the layer groups.
Matrix encode_entities(const corpus::GraphIndex& graph, const Vector& user_vec, const ParamSet& params,
                       const std::string& prefix, const EncoderConfig& cfg);

/// Differentiable layer; `user_row` is a 1 x d_u row.
struct LayerVars {
  ag::Var W_T, W_S, W_M, W_A, W_u, A, M;
};
LayerVars bind_layer(ag::Tape& tape, const ParamSet& params, const std::string& prefix, int layer);
ag::Var relation_attention_layer(const LayerVars& vars, const corpus::GraphIndex& graph, const ag::Var& h_prev,
                                 const ag::Var& user_row, int heads, bool scale_by_full_dim);

ag::Var encode_entities(ag::Tape& tape, const corpus::GraphIndex& graph, const ag::Var& user_row,
                        const ParamSet& params, const std::string& prefix, const EncoderConfig& cfg);

}  // namespace ccrs::graph
