#include "ccrs/dialogue.hpp"

#include "ccrs/log.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace ccrs::dial {

using ag::Var;
using corpus::Vocabulary;

void DialConfig::validate() const {
  if (model_dim < 1 || heads < 1 || model_dim % heads != 0)
    throw std::invalid_argument("model_dim must be a positive multiple of heads");
  if (layers < 1 || ffn_dim < 1 || max_len < 2 || rec_dim < 1) throw std::invalid_argument("invalid dialogue dims");
  if (styles < 1) throw std::invalid_argument("styles must be >= 1");
}

nlohmann::json DialConfig::to_json() const {
  return {{"model_dim", model_dim}, {"layers", layers},           {"heads", heads},
          {"ffn_dim", ffn_dim},     {"max_len", max_len},         {"rec_dim", rec_dim},
          {"styles", styles},       {"style_hidden", style_hidden}, {"style_softmax", style_softmax},
          {"backprop_into_rec", backprop_into_rec}};
}

DialConfig DialConfig::from_json(const nlohmann::json& j) {
  DialConfig c;
  c.model_dim = j.value("model_dim", c.model_dim);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.max_len = j.value("max_len", c.max_len);
  c.rec_dim = j.value("rec_dim", c.rec_dim);
  c.styles = j.value("styles", c.styles);
  c.style_hidden = j.value("style_hidden", c.style_hidden);
  c.style_softmax = j.value("style_softmax", c.style_softmax);
  c.backprop_into_rec = j.value("backprop_into_rec", c.backprop_into_rec);
  c.validate();
  return c;
}

std::vector<Example> make_examples(const corpus::Conversation& conv, const corpus::KnowledgeGraph& kg,
                                   const Vocabulary& vocab, const IntentionFn& intention,
                                   const corpus::HistoryOptions& history) {
  const corpus::Conversation masked = corpus::mask_items(conv, vocab);
  std::vector<Example> out;
  std::vector<int> context;
  for (std::size_t i = 0; i < conv.utterances.size(); ++i) {
    const auto& raw = conv.utterances[i];
    const auto& utt = masked.utterances[i];
    if (raw.gold && !utt.tokens.empty()) {
      Example ex;
      ex.context = context;
      ex.response = vocab.encode(utt.tokens);
      ex.reference = raw.tokens;
      ex.p_u = intention(conv, raw.turn);
      for (const auto& m : corpus::mention_history(conv, raw.turn, history)) {
        const int id = kg.entity(m.entity);
        ex.entities.push_back(id);
        ex.turns.push_back(m.turn);
        if (kg.is_item(id)) ex.seen_items.push_back(id);
      }
      out.push_back(std::move(ex));
    }
    const auto ids = vocab.encode(utt.tokens);
    context.insert(context.end(), ids.begin(), ids.end());
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<corpus::Conversation>& convs, const corpus::KnowledgeGraph& kg) {
  const Vocabulary base;
  std::vector<corpus::Conversation> masked;
  masked.reserve(convs.size());
  for (const auto& c : convs) masked.push_back(corpus::mask_items(c, base));
  Vocabulary vocab = Vocabulary::build(masked);
  std::set<std::string> extra;
  for (const auto& name : kg.entity_names())
    for (const auto& t : corpus::entity_surface(name)) extra.insert(t);
  for (const auto& t : extra) vocab.add(t);
  return vocab;
}

Matrix positional_encoding(int length, int dim) {
  Matrix pe(length, dim);
  for (int pos = 0; pos < length; ++pos)
    for (int i = 0; i < dim; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / dim);
      pe(pos, i) = i % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

DialModel::DialModel(DialConfig cfg, std::size_t vocab_size) : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size_ <= static_cast<std::size_t>(Vocabulary::kItemSlot))
    throw std::invalid_argument("vocabulary is missing reserved tokens");
}

namespace {

void init_attention(ParamSet& p, const std::string& prefix, int m, std::mt19937_64& rng) {
  for (const char* w : {"Wq", "Wk", "Wv", "Wo"}) p.set(prefix + w, glorot_uniform(m, m, rng));
  for (const char* b : {"bq", "bk", "bv", "bo"}) p.set(prefix + b, Matrix::Zero(1, m));
}

void init_norm(ParamSet& p, const std::string& prefix, int m) {
  p.set(prefix + "g", Matrix::Ones(1, m));
  p.set(prefix + "b", Matrix::Zero(1, m));
}

void init_ffn(ParamSet& p, const std::string& prefix, int m, int f, std::mt19937_64& rng) {
  p.set(prefix + "W1", glorot_uniform(m, f, rng));
  p.set(prefix + "b1", Matrix::Zero(1, f));
  p.set(prefix + "W2", glorot_uniform(f, m, rng));
  p.set(prefix + "b2", Matrix::Zero(1, m));
}

std::string enc_layer(int l) { return kPrefix + "enc.l" + std::to_string(l) + "."; }
std::string dec_layer(int l) { return kPrefix + "dec.l" + std::to_string(l) + "."; }

}  // namespace

ParamSet DialModel::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  const int m = cfg_.model_dim, f = cfg_.ffn_dim, d = cfg_.rec_dim, h = cfg_.hidden();
  const auto V = static_cast<Eigen::Index>(vocab_size_);
  ParamSet p;
  p.set(kPrefix + "enc.emb", glorot_uniform(V, m, rng));
  p.set(kPrefix + "dec.emb", glorot_uniform(V, m, rng));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string e = enc_layer(l);
    init_attention(p, e + "self.", m, rng);
    init_norm(p, e + "ln1.", m);
    init_ffn(p, e + "ffn.", m, f, rng);
    init_norm(p, e + "ln2.", m);
    const std::string x = dec_layer(l);
    init_attention(p, x + "self.", m, rng);
    init_norm(p, x + "ln1.", m);
    init_attention(p, x + "cross.", m, rng);
    init_norm(p, x + "ln2.", m);
    init_ffn(p, x + "ffn.", m, f, rng);
    init_norm(p, x + "ln3.", m);
  }
  p.set(kPrefix + "gen.W", glorot_uniform(m, V, rng));
  p.set(kPrefix + "gen.b", Matrix::Zero(1, V));
  p.set(kPrefix + "style.L", glorot_uniform(d, cfg_.styles, rng));
  p.set(kPrefix + "style.WC", glorot_uniform(d, d, rng));
  p.set(kPrefix + "style.F.W1", glorot_uniform(d, h, rng));
  p.set(kPrefix + "style.F.b1", Matrix::Zero(1, h));
  p.set(kPrefix + "style.F.W2", glorot_uniform(h, V, rng));
  p.set(kPrefix + "style.F.b2", Matrix::Zero(1, V));
  return p;
}

void DialModel::check_params(const ParamSet& params) const {
  const ParamSet ref = init_params(0);
  for (const auto& [name, m] : ref) {
    if (!params.contains(name)) throw std::invalid_argument("missing parameter group " + name);
    const Matrix& got = params.at(name);
    if (got.rows() != m.rows() || got.cols() != m.cols())
      throw std::invalid_argument("shape mismatch for " + name + ": expected " + std::to_string(m.rows()) + "x" +
                                  std::to_string(m.cols()) + ", got " + std::to_string(got.rows()) + "x" +
                                  std::to_string(got.cols()));
  }
}

std::vector<int> DialModel::clip_context(const std::vector<int>& ids) const {
  if (ids.empty()) return {Vocabulary::kStart};
  const auto n = static_cast<std::size_t>(cfg_.max_len);
  if (ids.size() <= n) return ids;
  return std::vector<int>(ids.end() - static_cast<std::ptrdiff_t>(n), ids.end());
}

Var DialModel::embed(ag::Tape& tape, const ParamSet& params, const std::string& table,
                     const std::vector<int>& ids) const {
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) throw std::out_of_range("token id out of range");
  Var x = ag::scale(ag::gather_rows(tape.param(params, table), ids), std::sqrt(static_cast<double>(cfg_.model_dim)));
  return ag::add_const(x, positional_encoding(static_cast<int>(ids.size()), cfg_.model_dim));
}

Var DialModel::attention(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const Var& xq,
                         const Var& xkv, const Matrix* mask) const {
  auto P = [&](const char* n) { return tape.param(params, prefix + n); };
  Var Q = ag::add_row(ag::matmul(xq, P("Wq")), P("bq"));
  Var K = ag::add_row(ag::matmul(xkv, P("Wk")), P("bk"));
  Var V = ag::add_row(ag::matmul(xkv, P("Wv")), P("bv"));
  const int dh = cfg_.model_dim / cfg_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  for (int h = 0; h < cfg_.heads; ++h) {
    Var q = ag::slice_cols(Q, h * dh, dh);
    Var k = ag::slice_cols(K, h * dh, dh);
    Var v = ag::slice_cols(V, h * dh, dh);
    Var s = ag::scale(ag::matmul(q, ag::transpose(k)), scale);
    if (mask != nullptr) s = ag::add_const(s, *mask);
    heads.push_back(ag::matmul(ag::softmax_rows(s), v));
  }
  Var cat = heads.size() == 1 ? heads.front() : ag::concat_cols(heads);
  return ag::add_row(ag::matmul(cat, P("Wo")), P("bo"));
}

Var DialModel::feed_forward(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const Var& x) const {
  auto P = [&](const char* n) { return tape.param(params, prefix + n); };
  Var h = ag::relu(ag::add_row(ag::matmul(x, P("W1")), P("b1")));
  return ag::add_row(ag::matmul(h, P("W2")), P("b2"));
}

Var DialModel::norm(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const Var& x) const {
  return ag::layer_norm_rows(x, tape.param(params, prefix + "g"), tape.param(params, prefix + "b"));
}

Var DialModel::encode_context(ag::Tape& tape, const ParamSet& params, const std::vector<int>& ids) const {
  Var x = embed(tape, params, kPrefix + "enc.emb", clip_context(ids));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string e = enc_layer(l);
    x = norm(tape, params, e + "ln1.", ag::add(x, attention(tape, params, e + "self.", x, x, nullptr)));
    x = norm(tape, params, e + "ln2.", ag::add(x, feed_forward(tape, params, e + "ffn.", x)));
  }
  return x;
}

Var DialModel::decode(ag::Tape& tape, const ParamSet& params, const std::vector<int>& inputs,
                      const Var& memory) const {
  if (inputs.empty()) throw std::invalid_argument("decoder needs at least one input token");
  const auto T = static_cast<Eigen::Index>(inputs.size());
  Matrix causal = Matrix::Zero(T, T);
  for (Eigen::Index i = 0; i < T; ++i)
    for (Eigen::Index j = i + 1; j < T; ++j) causal(i, j) = -1e9;
  Var x = embed(tape, params, kPrefix + "dec.emb", inputs);
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string d = dec_layer(l);
    x = norm(tape, params, d + "ln1.", ag::add(x, attention(tape, params, d + "self.", x, x, &causal)));
    x = norm(tape, params, d + "ln2.", ag::add(x, attention(tape, params, d + "cross.", x, memory, nullptr)));
    x = norm(tape, params, d + "ln3.", ag::add(x, feed_forward(tape, params, d + "ffn.", x)));
  }
  return x;
}

Var DialModel::style_weights(ag::Tape& tape, const ParamSet& params, const Var& p_u) const {
  if (p_u.rows() != 1 || p_u.cols() != cfg_.rec_dim) throw std::invalid_argument("p_u width does not match rec_dim");
  Var logits = ag::matmul(ag::matmul(p_u, tape.param(params, kPrefix + "style.WC")),
                          tape.param(params, kPrefix + "style.L"));
  return cfg_.style_softmax ? ag::softmax_rows(logits) : logits;
}

Var DialModel::style_bias(ag::Tape& tape, const ParamSet& params, const Var& mu) const {
  auto P = [&](const char* n) { return tape.param(params, kPrefix + "style." + n); };
  Var g = ag::matmul(mu, ag::transpose(P("L")));
  Var h = ag::gelu(ag::add_row(ag::matmul(g, P("F.W1")), P("F.b1")));
  return ag::add_row(ag::matmul(h, P("F.W2")), P("F.b2"));
}

Var DialModel::vocab_log_probs(ag::Tape& tape, const ParamSet& params, const Var& q, const Var& bias) const {
  Var logits = ag::add_row(ag::matmul(q, tape.param(params, kPrefix + "gen.W")), tape.param(params, kPrefix + "gen.b"));
  return ag::log_softmax_rows(ag::add_row(logits, bias));
}

Var DialModel::example_loss(ag::Tape& tape, const ParamSet& params, const Example& ex, const Var& p_u) const {
  std::vector<int> inputs{Vocabulary::kStart};
  std::vector<int> targets;
  const auto limit = static_cast<std::size_t>(cfg_.max_len - 1);
  const std::size_t n = std::min(ex.response.size(), limit);
  inputs.insert(inputs.end(), ex.response.begin(), ex.response.begin() + static_cast<std::ptrdiff_t>(n));
  targets.assign(ex.response.begin(), ex.response.begin() + static_cast<std::ptrdiff_t>(n));
  targets.push_back(Vocabulary::kEnd);
  Var memory = encode_context(tape, params, ex.context);
  Var q = decode(tape, params, inputs, memory);
  Var bias = style_bias(tape, params, style_weights(tape, params, p_u));
  return ag::mean(ag::pick_nll(vocab_log_probs(tape, params, q, bias), targets));
}

Var DialModel::loss(ag::Tape& tape, const ParamSet& params, const std::vector<Example>& examples,
                    const RecBinding* rec) const {
  if (examples.empty()) throw std::invalid_argument("dialogue loss needs at least one example");
  const bool through_rec = cfg_.backprop_into_rec && rec != nullptr && rec->model != nullptr;
  Var H;
  if (through_rec) H = rec->model->encode(tape, params, rec->row);
  Var total;
  for (const auto& ex : examples) {
    Var p_u = through_rec ? rec->model->intention(tape, params, H, ex.entities, ex.turns)
                          : tape.constant(ex.p_u.transpose());
    Var l = example_loss(tape, params, ex, p_u);
    total = total.valid() ? ag::add(total, l) : l;
  }
  return ag::scale(total, 1.0 / static_cast<double>(examples.size()));
}

LossGrad DialModel::loss_and_grad(const ParamSet& params, const std::vector<Example>& examples,
                                  const RecBinding* rec) const {
  LossGrad out;
  if (examples.empty()) {
    out.grads = params.zeros_like();
    return out;
  }
  ag::Tape tape;
  Var L = loss(tape, params, examples, rec);
  tape.backward(L);
  out.loss = L.scalar();
  out.grads = tape.param_grads(params);
  out.count = examples.size();
  return out;
}

double DialModel::loss_value(const ParamSet& params, const std::vector<Example>& examples) const {
  ag::Tape tape(false);
  return loss(tape, params, examples).scalar();
}

ModelStepper::ModelStepper(const DialModel& model, const ParamSet& params, const std::vector<int>& context,
                           const Vector& p_u)
    : model_(model), params_(params) {
  ag::Tape tape(false);
  memory_ = model.encode_context(tape, params, context).value();
  Var mu = model.style_weights(tape, params, tape.constant(p_u.transpose()));
  mu_ = mu.value().row(0).transpose();
  bias_ = model.style_bias(tape, params, mu).value();
}

Vector ModelStepper::log_probs(const std::vector<int>& prefix) {
  ag::Tape tape(false);
  std::vector<int> inputs{Vocabulary::kStart};
  inputs.insert(inputs.end(), prefix.begin(), prefix.end());
  Var q = model_.decode(tape, params_, inputs, tape.constant(memory_));
  Var last = ag::slice_rows(q, q.rows() - 1, 1);
  return model_.vocab_log_probs(tape, params_, last, tape.constant(bias_)).value().row(0).transpose();
}

namespace {

Vector masked_log_probs(DecoderStepper& stepper, const std::vector<int>& prefix) {
  Vector lp = stepper.log_probs(prefix);
  if (lp.size() <= Vocabulary::kItemSlot) throw std::invalid_argument("decoder output is smaller than the vocabulary");
  lp(Vocabulary::kPad) = -std::numeric_limits<double>::infinity();
  lp(Vocabulary::kStart) = -std::numeric_limits<double>::infinity();
  return lp;
}

/// Indices of the n largest entries, ties broken by lower index.
std::vector<int> top_n(const Vector& v, int n) {
  std::vector<int> idx(static_cast<std::size_t>(v.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const auto k = std::min<std::size_t>(static_cast<std::size_t>(n), idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&v](int a, int b) { return v(a) != v(b) ? v(a) > v(b) : a < b; });
  idx.resize(k);
  return idx;
}

nlohmann::json trace_step(const Vector& lp, const Vocabulary& vocab) {
  nlohmann::json step = nlohmann::json::array();
  for (int id : top_n(lp, 5)) step.push_back({{"token", vocab.token(id)}, {"prob", std::exp(lp(id))}});
  return step;
}

struct Hypothesis {
  std::vector<int> tokens;
  double logp = 0.0;
  std::vector<nlohmann::json> steps;
};

}  // namespace

Generation generate(DecoderStepper& stepper, const Vocabulary& vocab, const corpus::KnowledgeGraph* kg,
                    const SlotFiller& filler, const std::set<int>& seen, const DecodeOptions& opts) {
  if (opts.max_len < 1) throw std::invalid_argument("max_len must be >= 1");
  Generation gen;
  gen.style_weights = stepper.style_weights();
  Hypothesis best;
  if (opts.strategy == Strategy::greedy) {
    bool ended = false;
    while (static_cast<int>(best.tokens.size()) < opts.max_len) {
      const Vector lp = masked_log_probs(stepper, best.tokens);
      if (opts.trace) best.steps.push_back(trace_step(lp, vocab));
      const int next = top_n(lp, 1).front();
      if (next == Vocabulary::kEnd) {
        ended = true;
        break;
      }
      best.tokens.push_back(next);
      best.logp += lp(next);
    }
    gen.truncated = !ended;
  } else {
    const int width = std::max(1, opts.beam_width);
    auto normalized = [&opts](const Hypothesis& h, std::size_t len) {
      return h.logp / std::pow(static_cast<double>(std::max<std::size_t>(len, 1)), opts.length_alpha);
    };
    std::vector<Hypothesis> beams{Hypothesis{}};
    std::vector<std::pair<double, Hypothesis>> finished;
    for (int step = 0; step < opts.max_len && !beams.empty(); ++step) {
      std::vector<Hypothesis> candidates;
      for (const auto& h : beams) {
        const Vector lp = masked_log_probs(stepper, h.tokens);
        for (int id : top_n(lp, width)) {
          Hypothesis c = h;
          if (opts.trace) c.steps.push_back(trace_step(lp, vocab));
          c.logp += lp(id);
          if (id == Vocabulary::kEnd) {
            finished.emplace_back(normalized(c, c.tokens.size() + 1), std::move(c));
          } else {
            c.tokens.push_back(id);
            candidates.push_back(std::move(c));
          }
        }
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Hypothesis& a, const Hypothesis& b) { return a.logp > b.logp; });
      if (candidates.size() > static_cast<std::size_t>(width)) candidates.resize(static_cast<std::size_t>(width));
      beams = std::move(candidates);
      if (finished.size() >= static_cast<std::size_t>(width)) break;
    }
    if (!finished.empty()) {
      auto it = std::max_element(finished.begin(), finished.end(),
                                 [](const auto& a, const auto& b) { return a.first < b.first; });
      best = it->second;
    } else {
      best = beams.front();
      gen.truncated = true;
    }
  }
  gen.token_ids = best.tokens;
  gen.steps = best.steps;
  std::set<int> exclude = seen;
  for (int id : best.tokens) {
    if (id != Vocabulary::kItemSlot) {
      gen.words.push_back(vocab.token(id));
      continue;
    }
    const std::optional<int> item = filler ? filler(exclude) : std::nullopt;
    if (!item) {
      log::warn("generate: no unseen item left for an item slot");
      continue;
    }
    exclude.insert(*item);
    gen.items.push_back(*item);
    if (kg != nullptr) {
      for (const auto& w : corpus::entity_surface(kg->entity_name(*item))) gen.words.push_back(w);
    } else {
      gen.words.push_back(std::to_string(*item));
    }
  }
  return gen;
}

nlohmann::json to_json(const Generation& g, const corpus::KnowledgeGraph* kg) {
  nlohmann::json j;
  j["tokens"] = g.words;
  j["text"] = g.text();
  j["truncated"] = g.truncated;
  j["style_weights"] = std::vector<double>(g.style_weights.data(), g.style_weights.data() + g.style_weights.size());
  nlohmann::json items = nlohmann::json::array();
  for (int id : g.items) items.push_back(kg != nullptr ? nlohmann::json(kg->entity_name(id)) : nlohmann::json(id));
  j["items"] = items;
  if (!g.steps.empty()) j["steps"] = g.steps;
  return j;
}

}  // namespace ccrs::dial
