#pragma once

// Glue between the models and the meta-trainer: episode construction,
// user tasks, staged training and meta-test evaluation.

#include "ccrs/corpus.hpp"
#include "ccrs/dialogue.hpp"
#include "ccrs/meta_trainer.hpp"
#include "ccrs/metrics.hpp"
#include "ccrs/rec_model.hpp"

#include <string>
#include <vector>

namespace ccrs::train {

struct RecUserData {
  std::string user_id;
  int row = -1;  // user table row; -1 for users outside the table
  std::vector<rec::Label> support;
  std::vector<rec::Label> query;
};

std::vector<RecUserData> rec_user_data(const rec::RecModel& model, const std::vector<corpus::Episode>& episodes);

/// Tasks for users that own a row of the user table.
std::vector<meta::MetaTask> rec_tasks(const rec::RecModel& model, const std::vector<RecUserData>& users);

struct UserEvaluation {
  std::string user_id;
  std::vector<metrics::RankedResult> results;
  double support_loss_before = 0.0;
  double support_loss_after = 0.0;
  bool adapted = false;
};

struct MetaTestResult {
  std::vector<UserEvaluation> users;
  /// Mean over users of each user's ranking metrics.
  metrics::Report report;
};

/// Mean over users of a per-user ranking report.
metrics::Report user_mean_report(const std::vector<UserEvaluation>& users, const std::vector<std::size_t>& ks);

/// Inner-adapts a copy of theta on each user's support set and ranks the
/// query labels. Users outside the table start from the mean user row.
/// theta itself is never modified.
MetaTestResult rec_meta_test(const rec::RecModel& model, const ParamSet& theta, const std::vector<RecUserData>& users,
                             const meta::ParamPartition& partition, const meta::MetaConfig& cfg, bool adapt,
                             const std::vector<std::size_t>& ks = {10, 50});

/// Ranks every label of the given conversations with the unadapted theta
/// and each user's own row.
std::vector<metrics::RankedResult> rec_rank_all(const rec::RecModel& model, const ParamSet& theta,
                                                const std::vector<corpus::Conversation>& convs);

/// p_u for a conversation prefix under a trained recommender. Users
/// outside the table use the mean user row.
dial::IntentionFn rec_intention(const rec::RecModel& model, const ParamSet& rec_theta);

/// p_u under fixed parameters and a fixed user row. Both `model` and
/// `params` must outlive the returned function.
dial::IntentionFn rec_intention_for(const rec::RecModel& model, const ParamSet& params, int row);

struct DialUserData {
  std::string user_id;
  int rec_row = -1;
  std::vector<dial::Example> support;
  std::vector<dial::Example> query;
};

std::vector<DialUserData> dial_user_data(const rec::RecModel& rec_model, const ParamSet& rec_theta,
                                         const corpus::Vocabulary& vocab,
                                         const std::vector<corpus::Episode>& episodes);

/// Dialogue tasks for every user with query examples. With `rec` set and
/// backprop_into_rec enabled, gradients also flow into the rec groups held in
/// the same parameter set.
std::vector<meta::MetaTask> dial_tasks(const dial::DialModel& model, const std::vector<DialUserData>& users,
                                       const rec::RecModel* rec = nullptr);

struct DialTestResult {
  std::vector<metrics::Sentence> candidates;
  std::vector<metrics::Sentence> references;
  double query_loss = 0.0;  // mean over users
  metrics::Report report;   // BLEU, F1, Dist-2/3/4
};

struct DialTestOptions {
  bool adapt = true;
  dial::DecodeOptions decode;
  /// Limit on generated responses per user (0 = all query examples).
  std::size_t max_per_user = 0;
};

/// Adapts a copy of the dialogue parameters per user on the support set and
/// generates every query response; item slots are filled by the recommender.
DialTestResult dial_meta_test(const dial::DialModel& model, const ParamSet& theta, const std::vector<DialUserData>& users,
                              const meta::ParamPartition& partition, const meta::MetaConfig& cfg,
                              const rec::RecModel& rec_model, const ParamSet& rec_theta,
                              const corpus::Vocabulary& vocab, const DialTestOptions& opts);

}  // namespace ccrs::train
