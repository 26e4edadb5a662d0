#pragma once

// Transformer encoder-decoder response generator with a style bank that adds
// a context-dependent bias to the output vocabulary logits. Parameter groups
// live under "dial."; weight matrices are stored input x output and applied
// as x W + b on row vectors.

#include "ccrs/autograd.hpp"
#include "ccrs/corpus.hpp"
#include "ccrs/rec_model.hpp"
#include "ccrs/tensor.hpp"

#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs::dial {

inline const std::string kPrefix = "dial.";

struct DialConfig {
  int model_dim = 300;
  int layers = 2;
  int heads = 4;
  int ffn_dim = 600;
  int max_len = 256;
  int rec_dim = 128;  // width of p_u
  int styles = 4;
  int style_hidden = 0;  // 0 means 2 * rec_dim
  bool style_softmax = true;
  bool backprop_into_rec = false;

  int hidden() const { return style_hidden > 0 ? style_hidden : 2 * rec_dim; }
  void validate() const;
  nlohmann::json to_json() const;
  static DialConfig from_json(const nlohmann::json& j);
};

/// One gold response with its encoder context and the user intention at
/// that point of the conversation.
struct Example {
  std::vector<int> context;
  std::vector<int> response;
  Vector p_u;
  std::vector<int> entities;  // mention history, used when gradients flow into the recommender
  std::vector<int> turns;
  std::vector<std::string> reference;  // unmasked reference tokens
  std::vector<int> seen_items;         // items mentioned before the response
};

/// Intention for a conversation prefix: (conversation, turn) -> p_u.
using IntentionFn = std::function<Vector(const corpus::Conversation&, int turn)>;

/// Examples for every gold utterance. `conv` is the raw conversation; the
/// encoder and decoder see the item-masked text.
std::vector<Example> make_examples(const corpus::Conversation& conv, const corpus::KnowledgeGraph& kg,
                                   const corpus::Vocabulary& vocab, const IntentionFn& intention,
                                   const corpus::HistoryOptions& history);

/// Vocabulary over the masked conversations plus the surface tokens of every
/// entity name.
corpus::Vocabulary build_vocabulary(const std::vector<corpus::Conversation>& convs, const corpus::KnowledgeGraph& kg);

/// Sinusoidal position table (rows are positions).
Matrix positional_encoding(int length, int dim);

/// Recommender handle for gradients that flow into p_u.
struct RecBinding {
  const rec::RecModel* model = nullptr;
  int row = -1;
};

class DialModel {
 public:
  DialModel(DialConfig cfg, std::size_t vocab_size);

  const DialConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }

  ParamSet init_params(std::uint64_t seed) const;
  void check_params(const ParamSet& params) const;

  /// Left-truncated to max_len; an empty context becomes the start token.
  std::vector<int> clip_context(const std::vector<int>& ids) const;

  ag::Var encode_context(ag::Tape& tape, const ParamSet& params, const std::vector<int>& ids) const;
  /// Decoder states for input tokens (T x d_m) attending to `memory`.
  ag::Var decode(ag::Tape& tape, const ParamSet& params, const std::vector<int>& inputs, const ag::Var& memory) const;

  /// mu^m (1 x n_s) for a 1 x d intention row.
  ag::Var style_weights(ag::Tape& tape, const ParamSet& params, const ag::Var& p_u) const;
  /// F(mu^m L^T), a 1 x |V| row.
  ag::Var style_bias(ag::Tape& tape, const ParamSet& params, const ag::Var& mu) const;
  /// log p_dial rows for decoder states q (T x d_m) and a 1 x |V| bias.
  ag::Var vocab_log_probs(ag::Tape& tape, const ParamSet& params, const ag::Var& q, const ag::Var& bias) const;

  /// Per-token mean NLL of one example under teacher forcing.
  ag::Var example_loss(ag::Tape& tape, const ParamSet& params, const Example& ex, const ag::Var& p_u) const;
  /// Mean over examples of example_loss.
  ag::Var loss(ag::Tape& tape, const ParamSet& params, const std::vector<Example>& examples,
               const RecBinding* rec = nullptr) const;
  LossGrad loss_and_grad(const ParamSet& params, const std::vector<Example>& examples,
                         const RecBinding* rec = nullptr) const;
  double loss_value(const ParamSet& params, const std::vector<Example>& examples) const;

 private:
  ag::Var attention(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const ag::Var& xq,
                    const ag::Var& xkv, const Matrix* mask) const;
  ag::Var feed_forward(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const ag::Var& x) const;
  ag::Var norm(ag::Tape& tape, const ParamSet& params, const std::string& prefix, const ag::Var& x) const;
  ag::Var embed(ag::Tape& tape, const ParamSet& params, const std::string& table, const std::vector<int>& ids) const;

  DialConfig cfg_;
  std::size_t vocab_size_;
};

/// Next-token log-probabilities given the tokens emitted so far.
class DecoderStepper {
 public:
  virtual ~DecoderStepper() = default;
  virtual Vector log_probs(const std::vector<int>& prefix) = 0;
  /// Style weights in effect for this decode (empty if none).
  virtual Vector style_weights() const { return {}; }
};

/// Stepper over a trained model; the encoder memory and style bias are
/// computed once at construction.
class ModelStepper : public DecoderStepper {
 public:
  ModelStepper(const DialModel& model, const ParamSet& params, const std::vector<int>& context, const Vector& p_u);
  Vector log_probs(const std::vector<int>& prefix) override;
  Vector style_weights() const override { return mu_; }

 private:
  const DialModel& model_;
  const ParamSet& params_;
  Matrix memory_;
  Matrix bias_;
  Vector mu_;
};

enum class Strategy { greedy, beam };

struct DecodeOptions {
  Strategy strategy = Strategy::greedy;
  int beam_width = 3;
  double length_alpha = 0.75;
  int max_len = 40;
  bool trace = false;  // record per-step top-5 probabilities
};

/// Top-1 unseen item for a slot, or nothing if every item is excluded.
using SlotFiller = std::function<std::optional<int>(const std::set<int>& exclude)>;

struct Generation {
  std::vector<int> token_ids;           // raw decoder output, end token excluded
  std::vector<std::string> words;       // after slot substitution
  std::vector<int> items;               // substituted item entity ids, in order
  bool truncated = false;
  Vector style_weights;
  std::vector<nlohmann::json> steps;    // per-step top-5 when traced

  std::string text() const { return corpus::detokenize(words); }
};

Generation generate(DecoderStepper& stepper, const corpus::Vocabulary& vocab, const corpus::KnowledgeGraph* kg,
                    const SlotFiller& filler, const std::set<int>& seen, const DecodeOptions& opts);

nlohmann::json to_json(const Generation& g, const corpus::KnowledgeGraph* kg = nullptr);

}  // namespace ccrs::dial
