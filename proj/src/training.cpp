#include "ccrs/training.hpp"

#include "ccrs/log.hpp"

#include <map>
#include <memory>

namespace ccrs::train {

std::vector<RecUserData> rec_user_data(const rec::RecModel& model, const std::vector<corpus::Episode>& episodes) {
  std::vector<RecUserData> out;
  for (const auto& ep : episodes) {
    RecUserData u;
    u.user_id = ep.user_id;
    u.row = model.user_index(ep.user_id);
    u.support = rec::make_labels(ep.support, model.kg(), model.config().history);
    u.query = rec::make_labels(ep.query, model.kg(), model.config().history);
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<meta::MetaTask> rec_tasks(const rec::RecModel& model, const std::vector<RecUserData>& users) {
  std::vector<meta::MetaTask> tasks;
  for (const auto& u : users) {
    if (u.row < 0) continue;
    meta::MetaTask t;
    t.user_id = u.user_id;
    const int row = u.row;
    if (!u.support.empty())
      t.support = [&model, row, labels = u.support](const ParamSet& p) { return model.loss_and_grad(p, row, labels); };
    t.query = [&model, row, labels = u.query](const ParamSet& p) { return model.loss_and_grad(p, row, labels); };
    tasks.push_back(std::move(t));
  }
  return tasks;
}

metrics::Report user_mean_report(const std::vector<UserEvaluation>& users, const std::vector<std::size_t>& ks) {
  metrics::Report mean;
  std::size_t n = 0;
  for (const auto& u : users) {
    if (u.results.empty()) continue;
    for (const auto& [k, v] : metrics::ranking_report(u.results, ks)) mean[k] += v;
    ++n;
  }
  if (n == 0) return metrics::ranking_report({}, ks);
  for (auto& [_, v] : mean) v /= static_cast<double>(n);
  return mean;
}

MetaTestResult rec_meta_test(const rec::RecModel& model, const ParamSet& theta, const std::vector<RecUserData>& users,
                             const meta::ParamPartition& partition, const meta::MetaConfig& cfg, bool adapt,
                             const std::vector<std::size_t>& ks) {
  MetaTestResult out;
  for (const auto& u : users) {
    UserEvaluation ev;
    ev.user_id = u.user_id;
    int row = u.row;
    ParamSet base = row >= 0 ? theta : rec::RecModel::with_mean_user(theta, row);
    ParamSet phi = base;
    if (adapt && !u.support.empty()) {
      const meta::LossFn support = [&model, row, &u](const ParamSet& p) {
        return model.loss_and_grad(p, row, u.support);
      };
      phi = meta::inner_adapt(base, support, partition.inner, cfg.beta, cfg.inner_steps);
      ev.support_loss_before = model.loss_value(base, row, u.support);
      ev.support_loss_after = model.loss_value(phi, row, u.support);
      ev.adapted = true;
    }
    ev.results = model.rank_labels(phi, row, u.query);
    out.users.push_back(std::move(ev));
  }
  out.report = user_mean_report(out.users, ks);
  return out;
}

std::vector<metrics::RankedResult> rec_rank_all(const rec::RecModel& model, const ParamSet& theta,
                                                const std::vector<corpus::Conversation>& convs) {
  std::map<std::string, std::vector<corpus::Conversation>> by_user;
  for (const auto& c : convs) by_user[c.user_id].push_back(c);
  std::vector<metrics::RankedResult> out;
  for (const auto& [user, list] : by_user) {
    int row = model.user_index(user);
    const ParamSet p = row >= 0 ? theta : rec::RecModel::with_mean_user(theta, row);
    auto r = model.rank_labels(p, row, rec::make_labels(list, model.kg(), model.config().history));
    out.insert(out.end(), r.begin(), r.end());
  }
  return out;
}

dial::IntentionFn rec_intention(const rec::RecModel& model, const ParamSet& rec_theta) {
  int mean_row = -1;
  auto with_mean = std::make_shared<ParamSet>(rec::RecModel::with_mean_user(rec_theta, mean_row));
  return [&model, &rec_theta, with_mean, mean_row](const corpus::Conversation& conv, int turn) {
    std::vector<int> entities, turns;
    for (const auto& m : corpus::mention_history(conv, turn, model.config().history)) {
      entities.push_back(model.kg().entity(m.entity));
      turns.push_back(m.turn);
    }
    const int row = model.user_index(conv.user_id);
    if (row >= 0) return model.infer(rec_theta, row, entities, turns).p_u;
    return model.infer(*with_mean, mean_row, entities, turns).p_u;
  };
}

dial::IntentionFn rec_intention_for(const rec::RecModel& model, const ParamSet& params, int row) {
  return [&model, &params, row](const corpus::Conversation& conv, int turn) {
    std::vector<int> entities, turns;
    for (const auto& m : corpus::mention_history(conv, turn, model.config().history)) {
      entities.push_back(model.kg().entity(m.entity));
      turns.push_back(m.turn);
    }
    return model.infer(params, row, entities, turns).p_u;
  };
}

std::vector<DialUserData> dial_user_data(const rec::RecModel& rec_model, const ParamSet& rec_theta,
                                         const corpus::Vocabulary& vocab,
                                         const std::vector<corpus::Episode>& episodes) {
  const dial::IntentionFn intention = rec_intention(rec_model, rec_theta);
  std::vector<DialUserData> out;
  for (const auto& ep : episodes) {
    DialUserData u;
    u.user_id = ep.user_id;
    u.rec_row = rec_model.user_index(ep.user_id);
    for (const auto& c : ep.support) {
      auto ex = dial::make_examples(c, rec_model.kg(), vocab, intention, rec_model.config().history);
      u.support.insert(u.support.end(), ex.begin(), ex.end());
    }
    for (const auto& c : ep.query) {
      auto ex = dial::make_examples(c, rec_model.kg(), vocab, intention, rec_model.config().history);
      u.query.insert(u.query.end(), ex.begin(), ex.end());
    }
    out.push_back(std::move(u));
  }
  return out;
}

std::vector<meta::MetaTask> dial_tasks(const dial::DialModel& model, const std::vector<DialUserData>& users,
                                       const rec::RecModel* rec) {
  std::vector<meta::MetaTask> tasks;
  for (const auto& u : users) {
    if (u.query.empty()) {
      log::warn("user " + u.user_id + " has no gold responses, skipped");
      continue;
    }
    const bool through_rec = rec != nullptr && model.config().backprop_into_rec;
    if (through_rec && u.rec_row < 0) continue;
    const dial::RecBinding binding{rec, u.rec_row};
    meta::MetaTask t;
    t.user_id = u.user_id;
    auto make = [&model, through_rec, binding](std::vector<dial::Example> ex) -> meta::LossFn {
      return [&model, through_rec, binding, ex = std::move(ex)](const ParamSet& p) {
        return model.loss_and_grad(p, ex, through_rec ? &binding : nullptr);
      };
    };
    if (!u.support.empty()) t.support = make(u.support);
    t.query = make(u.query);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

DialTestResult dial_meta_test(const dial::DialModel& model, const ParamSet& theta, const std::vector<DialUserData>& users,
                              const meta::ParamPartition& partition, const meta::MetaConfig& cfg,
                              const rec::RecModel& rec_model, const ParamSet& rec_theta,
                              const corpus::Vocabulary& vocab, const DialTestOptions& opts) {
  DialTestResult out;
  std::size_t scored_users = 0;
  for (const auto& u : users) {
    if (u.query.empty()) continue;
    ParamSet phi = theta;
    if (opts.adapt && !u.support.empty()) {
      const meta::LossFn support = [&model, &u](const ParamSet& p) { return model.loss_and_grad(p, u.support); };
      phi = meta::inner_adapt(theta, support, partition.inner, cfg.beta, cfg.inner_steps);
    }
    out.query_loss += model.loss_value(phi, u.query);
    ++scored_users;
    int row = u.rec_row;
    const ParamSet rec_params = row >= 0 ? rec_theta : rec::RecModel::with_mean_user(rec_theta, row);
    const intention::ItemIndex index = rec_model.item_index(rec_params, row);
    std::size_t n = 0;
    for (const auto& ex : u.query) {
      if (opts.max_per_user > 0 && n++ >= opts.max_per_user) break;
      dial::ModelStepper stepper(model, phi, ex.context, ex.p_u);
      const dial::SlotFiller filler = [&index, &ex](const std::set<int>& exclude) -> std::optional<int> {
        const auto top = intention::recommend(ex.p_u, index, 1, exclude);
        if (top.empty()) return std::nullopt;
        return top.front().item_id;
      };
      const std::set<int> seen(ex.seen_items.begin(), ex.seen_items.end());
      const dial::Generation g = dial::generate(stepper, vocab, &rec_model.kg(), filler, seen, opts.decode);
      out.candidates.push_back(g.words);
      out.references.push_back(ex.reference);
    }
  }
  if (scored_users > 0) out.query_loss /= static_cast<double>(scored_users);
  out.report = metrics::generation_report(out.candidates, out.references);
  return out;
}

}  // namespace ccrs::train
