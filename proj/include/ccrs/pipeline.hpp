#pragma once

// End-to-end stages behind the command-line tool: prepare a corpus, train the
// two parts in order, evaluate, and load a servable system.
//
// Directory layout under `out_dir`:
//   data/      prepared corpus (kg.tsv, items.txt, {train,valid,test}.jsonl,
//              episodes.json, vocab.json, manifest.json)
//   rec/       recommender checkpoint, rec_history.jsonl next to it
//   dial/      dialogue checkpoint, dial_history.jsonl next to it
//   report.json

#include "ccrs/corpus.hpp"
#include "ccrs/dialogue.hpp"
#include "ccrs/meta_trainer.hpp"
#include "ccrs/metrics.hpp"
#include "ccrs/rec_model.hpp"
#include "ccrs/system.hpp"

#include <memory>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace ccrs::pipeline {

/// Bad or missing user input (exit code 2).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unusable environment such as an unwritable directory or a busy port (exit code 3).
class EnvironmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  /// Raw inputs. Relative file names resolve against input_dir.
  std::string input_dir = "data";
  std::string kg_file = "kg.tsv";
  std::string items_file = "items.txt";
  std::string conversations_file = "conversations.jsonl";
  bool synthetic = false;
  corpus::SyntheticSpec synthetic_spec;

  std::string out_dir = "runs";
  std::uint64_t seed = 17;
  int hops = 1;
  corpus::SplitRatios ratios;
  /// Adds the test users' support conversations to the training split.
  bool add_test_support = false;

  rec::RecConfig rec;
  dial::DialConfig dial;
  meta::MetaConfig rec_meta = meta::MetaConfig::defaults(meta::Part::rec);
  meta::MetaConfig dial_meta = meta::MetaConfig::defaults(meta::Part::dial);
  nlohmann::json rec_partition;   // partition overrides, null for the default split
  nlohmann::json dial_partition;
  int rec_epochs = 50;
  int dial_epochs = 50;
  int patience = 5;

  dial::DecodeOptions decode;
  /// Generated responses per test user during evaluation (0 = all).
  std::size_t max_generations_per_user = 0;

  std::string data_dir() const;
  std::string rec_dir() const;
  std::string dial_dir() const;

  nlohmann::json to_json() const;
  /// Fields absent from `j` keep the values of `base`. Unknown keys are errors.
  static RunConfig from_json(const nlohmann::json& j, const RunConfig& base);
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path, const RunConfig& base);
  void validate() const;
};

struct Prepared {
  corpus::KnowledgeGraph kg;
  corpus::Splits splits;
  std::vector<corpus::Episode> train_episodes;
  std::vector<corpus::Episode> valid_episodes;
  std::vector<corpus::Episode> test_episodes;
  corpus::Vocabulary vocab;
  nlohmann::json manifest;

  /// Sorted user ids of the training split; rows of the user table.
  std::vector<std::string> train_users() const;
};

/// Loads or generates the corpus, extracts the mentioned-entity subgraph,
/// splits by user, builds episodes and writes everything to data_dir().
nlohmann::json prepare(const RunConfig& cfg);
Prepared load_prepared(const RunConfig& cfg);

struct TrainSummary {
  std::vector<meta::EpochRecord> history;
  int best_epoch = -1;
  bool early_stopped = false;
  std::string checksum;
};

TrainSummary train_rec(const RunConfig& cfg);
/// Requires a recommender checkpoint.
TrainSummary train_dial(const RunConfig& cfg);

struct Evaluation {
  metrics::Report metrics;  // HR/MRR/NDCG @10 and @50, BLEU, F1, Dist-2/3/4
  nlohmann::json report;    // metrics plus annotations
};

/// Meta-test over the test split. Writes report.json (and report.csv when
/// `csv` is set) under out_dir.
Evaluation evaluate(const RunConfig& cfg, bool adapt, bool csv = false);

/// Both checkpoints plus the prepared corpus, ready for serving.
std::shared_ptr<System> load_system(const RunConfig& cfg);

}  // namespace ccrs::pipeline
