#pragma once

// Per-user inner adaptation and global meta-updates over named parameter
// groups. The trainer is agnostic to the model: every user task supplies
// closures that evaluate a loss and its gradients at a given parameter set.

#include "ccrs/rec_model.hpp"
#include "ccrs/tensor.hpp"

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs::meta {

using LossFn = std::function<LossGrad(const ParamSet&)>;

enum class Part { rec, dial };
std::string to_string(Part p);
Part part_from_string(const std::string& s);

struct ParamPartition {
  std::set<std::string> inner;
  std::set<std::string> outer;

  /// inner and outer must be disjoint and cover exactly the groups of `params`.
  void validate(const ParamSet& params) const;
};

/// Default split of a part's groups. Overrides list group names to move
/// into the inner set ("inner") or the outer set ("outer"); naming a group
/// the part does not own is an error.
ParamPartition partition_params(Part part, const ParamSet& params, const nlohmann::json& overrides = nullptr);

enum class Optimizer { adam, sgd };

struct MetaConfig {
  double beta = 0.006;  // inner learning rate
  double nu = 0.003;    // outer learning rate
  double clip_min = 0.0;
  double clip_max = 0.1;
  int inner_steps = 1;
  bool first_order = true;
  int batch_users = 4;
  Optimizer optimizer = Optimizer::adam;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Step for finite-difference Hessian-vector products (second order only).
  double hvp_eps = 1e-5;

  static MetaConfig defaults(Part part);
  void validate() const;
  nlohmann::json to_json() const;
  /// Missing keys keep the values of `base`.
  static MetaConfig from_json(const nlohmann::json& j, const MetaConfig& base);
};

/// One user's data, exposed as loss closures.
struct MetaTask {
  std::string user_id;
  LossFn support;  // may be empty, meaning no support data
  LossFn query;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& user)
      : std::runtime_error("non-finite gradient for user " + user), user_(user) {}
  const std::string& user() const { return user_; }

 private:
  std::string user_;
};

/// phi = theta with `steps` plain gradient steps of size beta on the inner
/// groups. A missing support closure or a loss with no labels returns theta.
ParamSet inner_adapt(const ParamSet& theta, const LossFn& support, const std::set<std::string>& inner,
                     double beta, int steps);

/// Elementwise magnitude clamp into [lo, hi]; zeros stay zero.
void clip_elementwise(ParamSet& g, double lo, double hi);

class GlobalOptimizer {
 public:
  explicit GlobalOptimizer(const MetaConfig& cfg) : cfg_(cfg) {}
  void apply(ParamSet& theta, const ParamSet& grad);
  long steps() const { return t_; }

 private:
  MetaConfig cfg_;
  ParamSet m_, v_;
  long t_ = 0;
};

struct MetaStepReport {
  /// Gradient handed to the optimizer (after clipping).
  ParamSet applied;
  /// Sum over users before clipping.
  ParamSet accumulated;
  double support_loss = 0.0;
  double query_loss = 0.0;
  std::size_t users = 0;
};

/// One global update over a batch of users.
MetaStepReport meta_step(ParamSet& theta, const std::vector<MetaTask>& batch, const ParamPartition& partition,
                         const MetaConfig& cfg, GlobalOptimizer& optimizer);

/// Gradient of the query loss at phi(theta) w.r.t. theta, including the
/// inner-step Jacobian when second order is requested. `first_support` may
/// carry the support loss already evaluated at theta.
LossGrad query_gradient(const ParamSet& theta, const MetaTask& task, const ParamPartition& partition,
                        const MetaConfig& cfg, const LossGrad* first_support = nullptr);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_metric = 0.0;
  double wall_time = 0.0;
  nlohmann::json to_json() const;
};

struct TrainOptions {
  int max_epochs = 50;
  int patience = 5;
  /// True when a larger validation metric is better.
  bool maximize = true;
  std::uint64_t seed = 17;
  /// Called after every epoch (e.g. to append to a history file).
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  ParamSet best;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  bool early_stopped = false;
};

/// Epochs of meta_step over shuffled user batches with early stopping on
/// `validate(theta)`. The returned parameters are those of the best epoch.
TrainResult train_loop(const ParamSet& init, const std::vector<MetaTask>& tasks, const ParamPartition& partition,
                       const MetaConfig& cfg, const TrainOptions& opts,
                       const std::function<double(const ParamSet&)>& validate);

}  // namespace ccrs::meta
