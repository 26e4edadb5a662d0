#pragma once

// A fully loaded model pair plus everything needed to serve it.

#include "ccrs/corpus.hpp"
#include "ccrs/dialogue.hpp"
#include "ccrs/meta_trainer.hpp"
#include "ccrs/rec_model.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs {

struct System {
  std::unique_ptr<rec::RecModel> rec;
  ParamSet rec_theta;
  std::unique_ptr<dial::DialModel> dial;
  ParamSet dial_theta;
  corpus::Vocabulary vocab;
  meta::MetaConfig rec_meta;
  meta::MetaConfig dial_meta;
  meta::ParamPartition rec_partition;
  meta::ParamPartition dial_partition;
  /// Support conversations available for per-user adaptation.
  std::map<std::string, std::vector<corpus::Conversation>> support;
  std::string checksum;
  nlohmann::json summary;

  const corpus::KnowledgeGraph& kg() const { return rec->kg(); }
};

/// Small synthetic system with untrained (seeded random) weights, for demos
/// and contract tests.
std::shared_ptr<System> make_stub_system(std::uint64_t seed = 17, int dim = 16);

}  // namespace ccrs
