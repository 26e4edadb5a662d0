#include "ccrs/system.hpp"

#include "ccrs/checkpoint.hpp"

#include <set>

namespace ccrs {

std::shared_ptr<System> make_stub_system(std::uint64_t seed, int dim) {
  corpus::SyntheticSpec spec;
  spec.n_users = 6;
  spec.n_items = 12;
  spec.convs_per_user = 2;
  spec.seed = seed;
  const corpus::SyntheticCorpus data = corpus::generate_synthetic_corpus(spec);

  std::set<std::string> user_set;
  for (const auto& c : data.conversations) user_set.insert(c.user_id);

  rec::RecConfig rc;
  rc.encoder.dim = dim;
  rc.encoder.user_dim = dim;
  rc.encoder.heads = 2;

  auto sys = std::make_shared<System>();
  sys->rec = std::make_unique<rec::RecModel>(data.kg, std::vector<std::string>(user_set.begin(), user_set.end()), rc);
  sys->rec_theta = sys->rec->init_params(seed);

  dial::DialConfig dc;
  dc.model_dim = dim;
  dc.layers = 1;
  dc.heads = 2;
  dc.ffn_dim = 2 * dim;
  dc.max_len = 64;
  dc.rec_dim = dim;
  dc.styles = 2;
  sys->vocab = dial::build_vocabulary(data.conversations, data.kg);
  sys->dial = std::make_unique<dial::DialModel>(dc, sys->vocab.size());
  sys->dial_theta = sys->dial->init_params(seed + 1);

  sys->rec_meta = meta::MetaConfig::defaults(meta::Part::rec);
  sys->dial_meta = meta::MetaConfig::defaults(meta::Part::dial);
  sys->rec_partition = meta::partition_params(meta::Part::rec, sys->rec_theta);
  sys->dial_partition = meta::partition_params(meta::Part::dial, sys->dial_theta);

  for (const auto& ep : corpus::make_episodes(data.conversations, seed)) sys->support[ep.user_id] = ep.support;

  sys->checksum = ckpt::checksum(sys->rec_theta) + ":" + ckpt::checksum(sys->dial_theta);
  sys->summary = {{"kind", "stub"},
                  {"seed", seed},
                  {"rec", rc.to_json()},
                  {"dial", dc.to_json()},
                  {"entities", data.kg.num_entities()},
                  {"vocab", sys->vocab.size()}};
  return sys;
}

}  // namespace ccrs
