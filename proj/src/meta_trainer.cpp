#include "ccrs/meta_trainer.hpp"

#include "ccrs/log.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>

namespace ccrs::meta {

std::string to_string(Part p) { return p == Part::rec ? "rec" : "dial"; }

Part part_from_string(const std::string& s) {
  if (s == "rec") return Part::rec;
  if (s == "dial") return Part::dial;
  throw std::invalid_argument("unknown part '" + s + "' (expected rec or dial)");
}

void ParamPartition::validate(const ParamSet& params) const {
  for (const auto& name : inner)
    if (outer.count(name)) throw std::invalid_argument("group in both inner and outer sets: " + name);
  for (const auto& set : {inner, outer})
    for (const auto& name : set)
      if (!params.contains(name)) throw std::invalid_argument("partition names unknown group: " + name);
  for (const auto& [name, _] : params)
    if (!inner.count(name) && !outer.count(name)) throw std::invalid_argument("group not partitioned: " + name);
}

namespace {

bool default_inner(Part part, const std::string& name) {
  if (part == Part::rec) return name == "rec.entity_emb" || name == "rec.user_emb";
  return name == "dial.enc.emb" || name.rfind("dial.style.", 0) == 0;
}

std::string part_prefix(Part part) { return part == Part::rec ? "rec." : "dial."; }

}  // namespace

ParamPartition partition_params(Part part, const ParamSet& params, const nlohmann::json& overrides) {
  ParamPartition p;
  const std::string prefix = part_prefix(part);
  for (const auto& [name, _] : params) {
    if (name.rfind(prefix, 0) != 0) {
      // Groups owned by the other part are never adapted per user.
      p.outer.insert(name);
      continue;
    }
    (default_inner(part, name) ? p.inner : p.outer).insert(name);
  }
  if (!overrides.is_null()) {
    if (!overrides.is_object()) throw std::invalid_argument("partition override must be a JSON object");
    if (overrides.value("swap", false)) {
      std::set<std::string> own_inner, own_outer;
      for (const auto& n : p.inner) own_outer.insert(n);
      for (const auto& n : p.outer)
        (n.rfind(prefix, 0) == 0 ? own_inner : own_outer).insert(n);
      p.inner = own_inner;
      p.outer = own_outer;
    }
    for (const char* key : {"inner", "outer"}) {
      if (!overrides.contains(key)) continue;
      for (const auto& item : overrides.at(key)) {
        const std::string name = item.get<std::string>();
        if (!params.contains(name) || name.rfind(prefix, 0) != 0)
          throw std::invalid_argument("partition override names unknown group: " + name);
        p.inner.erase(name);
        p.outer.erase(name);
        (std::string(key) == "inner" ? p.inner : p.outer).insert(name);
      }
    }
  }
  p.validate(params);
  return p;
}

MetaConfig MetaConfig::defaults(Part part) {
  MetaConfig c;
  if (part == Part::dial) {
    c.beta = 0.0003;
    c.nu = 0.001;
  }
  return c;
}

void MetaConfig::validate() const {
  if (!(beta >= 0.0) || !(nu > 0.0)) throw std::invalid_argument("learning rates must be beta >= 0 and nu > 0");
  if (!(clip_min >= 0.0) || !(clip_max >= clip_min)) throw std::invalid_argument("need 0 <= clip_min <= clip_max");
  if (inner_steps < 0) throw std::invalid_argument("inner_steps must be >= 0");
  if (batch_users < 1) throw std::invalid_argument("batch_users must be >= 1");
  if (!(hvp_eps > 0.0)) throw std::invalid_argument("hvp_eps must be > 0");
}

nlohmann::json MetaConfig::to_json() const {
  return {{"beta", beta},
          {"nu", nu},
          {"clip_min", clip_min},
          {"clip_max", clip_max},
          {"inner_steps", inner_steps},
          {"first_order", first_order},
          {"batch_users", batch_users},
          {"optimizer", optimizer == Optimizer::adam ? "adam" : "sgd"},
          {"adam_beta1", adam_beta1},
          {"adam_beta2", adam_beta2},
          {"adam_eps", adam_eps},
          {"hvp_eps", hvp_eps}};
}

MetaConfig MetaConfig::from_json(const nlohmann::json& j, const MetaConfig& base) {
  MetaConfig c = base;
  c.beta = j.value("beta", c.beta);
  c.nu = j.value("nu", c.nu);
  c.clip_min = j.value("clip_min", c.clip_min);
  c.clip_max = j.value("clip_max", c.clip_max);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  c.first_order = j.value("first_order", c.first_order);
  c.batch_users = j.value("batch_users", c.batch_users);
  if (j.contains("optimizer")) {
    const std::string o = j.at("optimizer").get<std::string>();
    if (o == "adam")
      c.optimizer = Optimizer::adam;
    else if (o == "sgd")
      c.optimizer = Optimizer::sgd;
    else
      throw std::invalid_argument("unknown optimizer " + o);
  }
  c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
  c.adam_eps = j.value("adam_eps", c.adam_eps);
  c.hvp_eps = j.value("hvp_eps", c.hvp_eps);
  c.validate();
  return c;
}

ParamSet inner_adapt(const ParamSet& theta, const LossFn& support, const std::set<std::string>& inner, double beta,
                     int steps) {
  ParamSet phi = theta;
  if (!support || steps <= 0 || beta == 0.0) return phi;
  for (int s = 0; s < steps; ++s) {
    const LossGrad lg = support(phi);
    if (lg.count == 0) {
      log::debug("inner_adapt: empty support set, parameters left unadapted");
      return phi;
    }
    phi.axpy(-beta, lg.grads, inner);
  }
  return phi;
}

void clip_elementwise(ParamSet& g, double lo, double hi) {
  for (auto& [_, m] : g)
    m = m.unaryExpr([lo, hi](double x) {
      if (x == 0.0) return 0.0;
      const double mag = std::clamp(std::abs(x), lo, hi);
      return x > 0.0 ? mag : -mag;
    });
}

void GlobalOptimizer::apply(ParamSet& theta, const ParamSet& grad) {
  ++t_;
  if (cfg_.optimizer == Optimizer::sgd) {
    theta.axpy(-cfg_.nu, grad);
    return;
  }
  const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (const auto& [name, g] : grad) {
    if (!m_.contains(name)) {
      m_.set(name, Matrix::Zero(g.rows(), g.cols()));
      v_.set(name, Matrix::Zero(g.rows(), g.cols()));
    }
    Matrix& m = m_.at(name);
    Matrix& v = v_.at(name);
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    theta.at(name).array() -= cfg_.nu * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.adam_eps);
  }
}

namespace {

ParamSet restrict_to(const ParamSet& g, const std::set<std::string>& names) {
  ParamSet out = g.zeros_like();
  for (const auto& n : names)
    if (g.contains(n)) out.at(n) = g.at(n);
  return out;
}

double norm(const ParamSet& g) { return std::sqrt(g.dot(g)); }

}  // namespace

LossGrad query_gradient(const ParamSet& theta, const MetaTask& task, const ParamPartition& partition,
                        const MetaConfig& cfg, const LossGrad* first_support) {
  std::vector<ParamSet> trajectory{theta};
  bool adapted = task.support && cfg.beta != 0.0;
  for (int s = 0; adapted && s < cfg.inner_steps; ++s) {
    const LossGrad lg = s == 0 && first_support != nullptr ? *first_support : task.support(trajectory.back());
    if (lg.count == 0) {
      adapted = false;
      trajectory.resize(1);
      break;
    }
    ParamSet next = trajectory.back();
    next.axpy(-cfg.beta, lg.grads, partition.inner);
    trajectory.push_back(std::move(next));
  }
  LossGrad q = task.query(trajectory.back());
  if (q.count == 0) q.grads = theta.zeros_like();
  if (cfg.first_order || !adapted) return q;
  // Pull the query gradient back through each inner step:
  // v <- v - beta * H(phi_s) * (v restricted to the inner groups).
  ParamSet v = q.grads;
  for (int s = static_cast<int>(trajectory.size()) - 2; s >= 0; --s) {
    const ParamSet u = restrict_to(v, partition.inner);
    const double n = norm(u);
    if (n == 0.0) continue;
    const double r = cfg.hvp_eps / n;
    ParamSet plus = trajectory[static_cast<std::size_t>(s)], minus = plus;
    plus.axpy(r, u);
    minus.axpy(-r, u);
    ParamSet hu = task.support(plus).grads;
    hu.axpy(-1.0, task.support(minus).grads);
    v.axpy(-cfg.beta / (2.0 * r), hu);
  }
  q.grads = std::move(v);
  return q;
}

MetaStepReport meta_step(ParamSet& theta, const std::vector<MetaTask>& batch, const ParamPartition& partition,
                         const MetaConfig& cfg, GlobalOptimizer& optimizer) {
  cfg.validate();
  MetaStepReport report;
  report.accumulated = theta.zeros_like();
  for (const auto& task : batch) {
    ParamSet user_grad = theta.zeros_like();
    LossGrad l1;
    if (task.support) {
      l1 = task.support(theta);
      if (l1.count > 0) {
        user_grad.axpy(1.0, l1.grads);
        report.support_loss += l1.loss;
      }
    }
    const LossGrad l2 = query_gradient(theta, task, partition, cfg, task.support ? &l1 : nullptr);
    if (l2.count > 0) {
      user_grad.axpy(1.0, l2.grads);
      report.query_loss += l2.loss;
    }
    if (!user_grad.all_finite()) throw NonFiniteGradient(task.user_id);
    report.accumulated.axpy(1.0, user_grad);
    ++report.users;
  }
  report.applied = report.accumulated;
  clip_elementwise(report.applied, cfg.clip_min, cfg.clip_max);
  optimizer.apply(theta, report.applied);
  return report;
}

nlohmann::json EpochRecord::to_json() const {
  return {{"epoch", epoch}, {"train_loss", train_loss}, {"valid_metric", valid_metric}, {"wall_time", wall_time}};
}

TrainResult train_loop(const ParamSet& init, const std::vector<MetaTask>& tasks, const ParamPartition& partition,
                       const MetaConfig& cfg, const TrainOptions& opts,
                       const std::function<double(const ParamSet&)>& validate) {
  cfg.validate();
  if (tasks.empty()) throw std::invalid_argument("no training users");
  partition.validate(init);
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(opts.seed);
  GlobalOptimizer optimizer(cfg);
  TrainResult result;
  ParamSet theta = init;
  result.best = init;
  const bool maximize = validate ? opts.maximize : false;
  double best = maximize ? -INFINITY : INFINITY;
  double best_train = INFINITY;
  int bad_epochs = 0;
  std::vector<std::size_t> order(tasks.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= opts.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t users = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_users)) {
      std::vector<MetaTask> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_users)); ++i)
        batch.push_back(tasks[order[i]]);
      const MetaStepReport r = meta_step(theta, batch, partition, cfg, optimizer);
      loss_sum += r.query_loss;
      users += r.users;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = users ? loss_sum / static_cast<double>(users) : 0.0;
    rec.valid_metric = validate ? validate(theta) : rec.train_loss;
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.history.push_back(rec);
    if (opts.on_epoch) opts.on_epoch(rec);
    log::info("epoch " + std::to_string(epoch) + " train_loss " + std::to_string(rec.train_loss) + " valid " +
              std::to_string(rec.valid_metric));

    // A tied validation metric still counts when the training loss went down;
    // saturated metrics such as HR@50 on a small catalogue tie every epoch.
    const bool tied = rec.valid_metric == best && rec.train_loss < best_train;
    const bool improved = (maximize ? rec.valid_metric > best : rec.valid_metric < best) || tied;
    if (improved) {
      best = rec.valid_metric;
      best_train = rec.train_loss;
      result.best = theta;
      result.best_epoch = epoch;
      bad_epochs = 0;
    } else if (++bad_epochs >= opts.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace ccrs::meta
