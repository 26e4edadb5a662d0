#include "ccrs/graph_encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace ccrs::graph {

namespace {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMajorMap = Eigen::Map<const RowMajorMatrix>;

ConstRowMajorMap flat_view(const Eigen::Ref<const Matrix>& flat, int column, int dk) {
  return ConstRowMajorMap(flat.col(column).data(), dk, dk);
}

// Forward intermediates of one layer, reused by the backward pass.
struct LayerCache {
  Matrix T, S, Mp;     // N x d head projections (target, source, message input)
  Vector z;            // W_u u, length dk^2
  Matrix gamma;        // R x k relation-user affinities
  Matrix bilinear;     // E x k  S^T A T
  Matrix alpha;        // E x k  attention weights
  Matrix msg;          // E x d  per-edge messages F(e')
  Matrix hstar;        // N x d  aggregated messages
  Matrix pre;          // N x d  W_A hstar (row form)
  Matrix out;          // N x d
};

LayerCache run_layer(const LayerView& L, const corpus::GraphIndex& g, const Matrix& H, const Vector& u) {
  const int d = L.dim(), k = L.heads, dk = L.head_dim();
  const int R = L.num_relations();
  if (H.cols() != d) throw std::invalid_argument("entity representation width does not match layer");
  if (u.size() != L.W_u.cols()) throw std::invalid_argument("user vector width does not match W_u");
  if (g.num_relations() != R) throw std::invalid_argument("graph relation count does not match layer");
  const double s = L.logit_scale();
  const auto E = static_cast<Eigen::Index>(g.edges.size());

  LayerCache c;
  c.T = H * L.W_T.transpose();
  c.S = H * L.W_S.transpose();
  c.Mp = H * L.W_M.transpose();
  c.z = L.W_u * u;
  c.gamma = Matrix(R, k);
  for (int r = 0; r < R; ++r)
    for (int i = 0; i < k; ++i) c.gamma(r, i) = L.A.col(r * k + i).dot(c.z);

  c.bilinear = Matrix(E, k);
  c.alpha = Matrix(E, k);
  c.msg = Matrix(E, d);
  Matrix logits(E, k);
  for (Eigen::Index j = 0; j < E; ++j) {
    const corpus::Edge& e = g.edges[static_cast<std::size_t>(j)];
    for (int i = 0; i < k; ++i) {
      const auto A = flat_view(L.A, e.relation * k + i, dk);
      const auto M = flat_view(L.M, e.relation * k + i, dk);
      const Vector t = c.T.row(e.target).segment(i * dk, dk).transpose();
      const Vector sv = c.S.row(e.source).segment(i * dk, dk).transpose();
      c.bilinear(j, i) = sv.dot(A * t);
      logits(j, i) = c.bilinear(j, i) * c.gamma(e.relation, i) / s;
      c.msg.row(j).segment(i * dk, dk) = (M * c.Mp.row(e.source).segment(i * dk, dk).transpose()).transpose();
    }
  }
  for (int ent = 0; ent < g.num_entities; ++ent) {
    const int b = g.offsets[static_cast<std::size_t>(ent)], n = g.offsets[static_cast<std::size_t>(ent) + 1] - b;
    if (n == 0) continue;
    for (int i = 0; i < k; ++i) {
      Vector col = logits.col(i).segment(b, n);
      c.alpha.col(i).segment(b, n) = softmax(col);
    }
  }
  c.hstar = Matrix::Zero(H.rows(), d);
  for (Eigen::Index j = 0; j < E; ++j) {
    const corpus::Edge& e = g.edges[static_cast<std::size_t>(j)];
    for (int i = 0; i < k; ++i)
      c.hstar.row(e.target).segment(i * dk, dk) += c.alpha(j, i) * c.msg.row(j).segment(i * dk, dk);
  }
  c.pre = c.hstar * L.W_A.transpose();
  c.out = ag::gelu_value(c.pre) + H;
  return c;
}

}  // namespace

void EncoderConfig::validate() const {
  if (dim <= 0 || heads <= 0 || layers < 1 || user_dim <= 0)
    throw std::invalid_argument("encoder dimensions must be positive and layers >= 1");
  if (dim % heads != 0) throw std::invalid_argument("entity dimension must be divisible by the head count");
}

double LayerView::logit_scale() const {
  return std::sqrt(static_cast<double>(scale_by_full_dim ? dim() : head_dim()));
}

Matrix LayerView::relation_matrix(int relation, int head) const {
  if (relation < 0 || relation >= num_relations()) throw std::out_of_range("unknown relation id");
  return flat_view(A, relation * heads + head, head_dim());
}

Matrix LayerView::message_matrix(int relation, int head) const {
  if (relation < 0 || relation >= num_relations()) throw std::out_of_range("unknown relation id");
  return flat_view(M, relation * heads + head, head_dim());
}

std::string layer_prefix(int layer) { return "layer" + std::to_string(layer) + "."; }

std::vector<std::string> layer_param_names(const std::string& prefix, int layer) {
  const std::string p = prefix + layer_prefix(layer);
  return {p + "W_T", p + "W_S", p + "W_M", p + "W_A", p + "W_u", p + "A", p + "M"};
}

LayerView layer_view(const ParamSet& params, const std::string& prefix, int layer, const EncoderConfig& cfg) {
  const std::string p = prefix + layer_prefix(layer);
  return LayerView{params.at(p + "W_T"), params.at(p + "W_S"), params.at(p + "W_M"), params.at(p + "W_A"),
                   params.at(p + "W_u"), params.at(p + "A"),   params.at(p + "M"),   cfg.heads,
                   cfg.scale_by_full_dim};
}

void init_layer_params(ParamSet& params, const std::string& prefix, int layer, const EncoderConfig& cfg,
                       int num_relations, std::mt19937_64& rng) {
  cfg.validate();
  const int d = cfg.dim, k = cfg.heads, dk = cfg.head_dim();
  const std::string p = prefix + layer_prefix(layer);
  // Each head block is initialized with its own (dk x d) fan.
  auto headwise = [&](void) {
    Matrix w(d, d);
    for (int i = 0; i < k; ++i) w.middleRows(i * dk, dk) = glorot_uniform(dk, d, rng);
    return w;
  };
  params.set(p + "W_T", headwise());
  params.set(p + "W_S", headwise());
  params.set(p + "W_M", headwise());
  params.set(p + "W_A", glorot_uniform(d, d, rng));
  params.set(p + "W_u", glorot_uniform(dk * dk, cfg.user_dim, rng));
  Matrix A(dk * dk, num_relations * k), M(dk * dk, num_relations * k);
  for (int c = 0; c < num_relations * k; ++c) {
    Matrix a = glorot_uniform(dk, dk, rng);
    for (int r = 0; r < dk; ++r)
      for (int q = 0; q < dk; ++q) A(r * dk + q, c) = a(r, q);
  }
  for (int c = 0; c < num_relations * k; ++c) {
    Matrix m = glorot_uniform(dk, dk, rng);
    for (int r = 0; r < dk; ++r)
      for (int q = 0; q < dk; ++q) M(r * dk + q, c) = m(r, q);
  }
  params.set(p + "A", std::move(A));
  params.set(p + "M", std::move(M));
}

std::vector<Vector> project_heads(const Vector& h, Role role, const LayerView& layer) {
  if (h.size() != layer.dim()) throw std::invalid_argument("project_heads: dimension mismatch");
  const auto& W = role == Role::target ? layer.W_T : layer.W_S;
  const int dk = layer.head_dim();
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(layer.heads));
  for (int i = 0; i < layer.heads; ++i) out.push_back(W.middleRows(i * dk, dk) * h);
  return out;
}

double relation_user_affinity(int relation, const Vector& user_vec, int head, const LayerView& layer) {
  if (relation < 0 || relation >= layer.num_relations()) throw std::out_of_range("unknown relation id");
  if (head < 0 || head >= layer.heads) throw std::out_of_range("head index out of range");
  if (user_vec.size() != layer.W_u.cols()) throw std::invalid_argument("user vector width mismatch");
  return layer.A.col(relation * layer.heads + head).dot(layer.W_u * user_vec);
}

double attention_logit(const Vector& h_target, const Vector& h_source, int relation, const Vector& user_vec,
                       int head, const LayerView& layer) {
  const Vector t = project_heads(h_target, Role::target, layer)[static_cast<std::size_t>(head)];
  const Vector s = project_heads(h_source, Role::source, layer)[static_cast<std::size_t>(head)];
  const double gamma = relation_user_affinity(relation, user_vec, head, layer);
  return s.dot(layer.relation_matrix(relation, head) * t) * gamma / layer.logit_scale();
}

Matrix neighbor_attention(int entity, const Vector& user_vec, const LayerView& layer, const corpus::GraphIndex& graph,
                          const Matrix& h_prev) {
  const int b = graph.offsets.at(static_cast<std::size_t>(entity));
  const int n = graph.offsets.at(static_cast<std::size_t>(entity) + 1) - b;
  if (n == 0) throw std::logic_error("entity has no incoming edges");
  Matrix out(n, layer.heads);
  for (int i = 0; i < layer.heads; ++i) {
    Vector logits(n);
    for (int j = 0; j < n; ++j) {
      const corpus::Edge& e = graph.edges[static_cast<std::size_t>(b + j)];
      logits(j) = attention_logit(h_prev.row(e.target).transpose(), h_prev.row(e.source).transpose(), e.relation,
                                  user_vec, i, layer);
    }
    out.col(i) = softmax(logits);
  }
  return out;
}

Vector message(const Vector& h_source, int relation, const LayerView& layer) {
  if (h_source.size() != layer.dim()) throw std::invalid_argument("message: dimension mismatch");
  const int dk = layer.head_dim();
  Vector out(layer.dim());
  for (int i = 0; i < layer.heads; ++i)
    out.segment(i * dk, dk) = layer.message_matrix(relation, i) * (layer.W_M.middleRows(i * dk, dk) * h_source);
  return out;
}

Vector aggregate_and_update(int entity, const Vector& user_vec, const LayerView& layer,
                            const corpus::GraphIndex& graph, const Matrix& h_prev) {
  const int dk = layer.head_dim();
  const Matrix G = neighbor_attention(entity, user_vec, layer, graph, h_prev);
  const int b = graph.offsets[static_cast<std::size_t>(entity)];
  Vector hstar = Vector::Zero(layer.dim());
  for (Eigen::Index j = 0; j < G.rows(); ++j) {
    const corpus::Edge& e = graph.edges[static_cast<std::size_t>(b + j)];
    const Vector F = message(h_prev.row(e.source).transpose(), e.relation, layer);
    for (int i = 0; i < layer.heads; ++i) hstar.segment(i * dk, dk) += G(j, i) * F.segment(i * dk, dk);
  }
  return ag::gelu_value(Matrix(layer.W_A * hstar)) + h_prev.row(entity).transpose();
}

Matrix layer_forward(const LayerView& layer, const corpus::GraphIndex& graph, const Matrix& h_prev,
                     const Vector& user_vec) {
  return run_layer(layer, graph, h_prev, user_vec).out;
}

Matrix encode_entities(const corpus::GraphIndex& graph, const Vector& user_vec, const ParamSet& params,
                       const std::string& prefix, const EncoderConfig& cfg) {
  Matrix H = params.at(prefix + "entity_emb");
  if (H.rows() != graph.num_entities) throw std::invalid_argument("entity table rows do not match the graph");
  for (int l = 0; l < cfg.layers; ++l) H = layer_forward(layer_view(params, prefix, l, cfg), graph, H, user_vec);
  return H;
}

LayerVars bind_layer(ag::Tape& tape, const ParamSet& params, const std::string& prefix, int layer) {
  const auto n = layer_param_names(prefix, layer);
  return LayerVars{tape.param(params, n[0]), tape.param(params, n[1]), tape.param(params, n[2]),
                   tape.param(params, n[3]), tape.param(params, n[4]), tape.param(params, n[5]),
                   tape.param(params, n[6])};
}

ag::Var relation_attention_layer(const LayerVars& v, const corpus::GraphIndex& graph, const ag::Var& h_prev,
                                 const ag::Var& user_row, int heads, bool scale_by_full_dim) {
  const LayerView L{v.W_T.value(), v.W_S.value(), v.W_M.value(), v.W_A.value(),
                    v.W_u.value(), v.A.value(),   v.M.value(),   heads, scale_by_full_dim};
  const Vector u = user_row.value().transpose();
  auto cache = std::make_shared<LayerCache>(run_layer(L, graph, h_prev.value(), u));
  Matrix out = cache->out;
  const corpus::GraphIndex* g = &graph;
  return h_prev.tape()->record(
      std::move(out), {h_prev, user_row, v.W_T, v.W_S, v.W_M, v.W_A, v.W_u, v.A, v.M},
      [v, h_prev, user_row, cache, g, heads, scale_by_full_dim](ag::Tape& t, const Matrix& G) {
        const LayerView L{v.W_T.value(), v.W_S.value(), v.W_M.value(), v.W_A.value(),
                          v.W_u.value(), v.A.value(),   v.M.value(),   heads, scale_by_full_dim};
        const int d = L.dim(), k = heads, dk = L.head_dim(), R = L.num_relations();
        const double s = L.logit_scale();
        const LayerCache& c = *cache;
        const Matrix& H = h_prev.value();
        const auto E = static_cast<Eigen::Index>(g->edges.size());

        Matrix dH = G;
        const Matrix dP = G.cwiseProduct(c.pre.unaryExpr([](double x) { return ag::gelu_grad(x); }));
        const Matrix dW_A = dP.transpose() * c.hstar;
        const Matrix dHstar = dP * L.W_A;

        Matrix dT = Matrix::Zero(H.rows(), d), dS = Matrix::Zero(H.rows(), d), dMp = Matrix::Zero(H.rows(), d);
        Matrix dA = Matrix::Zero(dk * dk, R * k), dM = Matrix::Zero(dk * dk, R * k);
        Matrix dGamma = Matrix::Zero(R, k);
        Matrix dAlpha(E, k);

        for (Eigen::Index j = 0; j < E; ++j) {
          const corpus::Edge& e = g->edges[static_cast<std::size_t>(j)];
          for (int i = 0; i < k; ++i) {
            const auto seg = dHstar.row(e.target).segment(i * dk, dk);
            dAlpha(j, i) = seg.dot(c.msg.row(j).segment(i * dk, dk));
            const RowVector dmsg = c.alpha(j, i) * seg;
            const auto Mri = flat_view(L.M, e.relation * k + i, dk);
            const RowVector mp = c.Mp.row(e.source).segment(i * dk, dk);
            // dM_ri += dmsg^T mp, stored row-major in the flattened column.
            RowMajorMatrix outer = dmsg.transpose() * mp;
            dM.col(e.relation * k + i) += Eigen::Map<const Vector>(outer.data(), dk * dk);
            dMp.row(e.source).segment(i * dk, dk) += dmsg * Mri;
          }
        }
        for (int ent = 0; ent < g->num_entities; ++ent) {
          const int b = g->offsets[static_cast<std::size_t>(ent)];
          const int n = g->offsets[static_cast<std::size_t>(ent) + 1] - b;
          for (int i = 0; i < k; ++i) {
            double dot = 0.0;
            for (int q = 0; q < n; ++q) dot += c.alpha(b + q, i) * dAlpha(b + q, i);
            for (int q = 0; q < n; ++q) {
              const Eigen::Index j = b + q;
              const corpus::Edge& e = g->edges[static_cast<std::size_t>(j)];
              const double dlogit = c.alpha(j, i) * (dAlpha(j, i) - dot);
              if (dlogit == 0.0) continue;
              const double gamma = c.gamma(e.relation, i);
              const double dbil = dlogit * gamma / s;
              dGamma(e.relation, i) += dlogit * c.bilinear(j, i) / s;
              const auto Ari = flat_view(L.A, e.relation * k + i, dk);
              const RowVector tv = c.T.row(e.target).segment(i * dk, dk);
              const RowVector sv = c.S.row(e.source).segment(i * dk, dk);
              dS.row(e.source).segment(i * dk, dk) += dbil * (Ari * tv.transpose()).transpose();
              dT.row(e.target).segment(i * dk, dk) += dbil * (sv * Ari);
              RowMajorMatrix outer = dbil * (sv.transpose() * tv);
              dA.col(e.relation * k + i) += Eigen::Map<const Vector>(outer.data(), dk * dk);
            }
          }
        }
        Vector dz = Vector::Zero(dk * dk);
        for (int r = 0; r < R; ++r)
          for (int i = 0; i < k; ++i) {
            if (dGamma(r, i) == 0.0) continue;
            dA.col(r * k + i) += dGamma(r, i) * c.z;
            dz += dGamma(r, i) * L.A.col(r * k + i);
          }
        const Vector u = user_row.value().transpose();
        t.accumulate(v.W_u, dz * u.transpose());
        t.accumulate(user_row, (L.W_u.transpose() * dz).transpose());
        t.accumulate(v.W_A, dW_A);
        t.accumulate(v.A, dA);
        t.accumulate(v.M, dM);
        t.accumulate(v.W_T, dT.transpose() * H);
        t.accumulate(v.W_S, dS.transpose() * H);
        t.accumulate(v.W_M, dMp.transpose() * H);
        dH += dT * L.W_T + dS * L.W_S + dMp * L.W_M;
        t.accumulate(h_prev, dH);
      });
}

ag::Var encode_entities(ag::Tape& tape, const corpus::GraphIndex& graph, const ag::Var& user_row,
                        const ParamSet& params, const std::string& prefix, const EncoderConfig& cfg) {
  ag::Var H = tape.param(params, prefix + "entity_emb");
  if (H.rows() != graph.num_entities) throw std::invalid_argument("entity table rows do not match the graph");
  for (int l = 0; l < cfg.layers; ++l)
    H = relation_attention_layer(bind_layer(tape, params, prefix, l), graph, H, user_row, cfg.heads,
                                 cfg.scale_by_full_dim);
  return H;
}

}  // namespace ccrs::graph
