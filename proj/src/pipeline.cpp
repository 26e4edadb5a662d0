#include "ccrs/pipeline.hpp"

#include "ccrs/checkpoint.hpp"
#include "ccrs/log.hpp"
#include "ccrs/training.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fs = std::filesystem;

namespace ccrs::pipeline {

namespace {

nlohmann::json spec_to_json(const corpus::SyntheticSpec& s) {
  return {{"n_users", s.n_users},         {"n_items", s.n_items}, {"n_relations", s.n_relations},
          {"topics", s.topics},           {"seed", s.seed},       {"convs_per_user", s.convs_per_user},
          {"favorite_topic_prob", s.favorite_topic_prob}};
}

corpus::SyntheticSpec spec_from_json(const nlohmann::json& j) {
  corpus::SyntheticSpec s;
  s.n_users = j.at("n_users");
  s.n_items = j.at("n_items");
  s.n_relations = j.at("n_relations");
  s.topics = j.at("topics");
  s.seed = j.at("seed");
  s.convs_per_user = j.at("convs_per_user");
  s.favorite_topic_prob = j.at("favorite_topic_prob");
  return s;
}

nlohmann::json decode_to_json(const dial::DecodeOptions& d) {
  return {{"strategy", d.strategy == dial::Strategy::beam ? "beam" : "greedy"},
          {"beam_width", d.beam_width},
          {"length_alpha", d.length_alpha},
          {"max_len", d.max_len}};
}

dial::DecodeOptions decode_from_json(const nlohmann::json& j) {
  dial::DecodeOptions d;
  const std::string s = j.at("strategy");
  if (s == "greedy")
    d.strategy = dial::Strategy::greedy;
  else if (s == "beam")
    d.strategy = dial::Strategy::beam;
  else
    throw InputError("unknown decode strategy: " + s);
  d.beam_width = j.at("beam_width");
  d.length_alpha = j.at("length_alpha");
  d.max_len = j.at("max_len");
  return d;
}

void check_keys(const nlohmann::json& patch, const nlohmann::json& known, const std::string& path) {
  for (const auto& [key, value] : patch.items()) {
    if (!known.contains(key)) throw InputError("unknown config key: " + path + key);
    if (value.is_object() && known.at(key).is_object()) check_keys(value, known.at(key), path + key + ".");
  }
}

std::string resolve(const std::string& dir, const std::string& file) {
  if (file.empty()) return file;
  const fs::path p(file);
  return p.is_absolute() ? file : (fs::path(dir) / p).string();
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw EnvironmentError("cannot write " + tmp.string());
    out << text;
    if (!out) throw EnvironmentError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw EnvironmentError("cannot create directory " + dir.string());
}

std::string conversations_text(const std::vector<corpus::Conversation>& convs) {
  std::ostringstream ss;
  corpus::write_conversations(ss, convs);
  return ss.str();
}

nlohmann::json episodes_json(const std::vector<corpus::Episode>& eps) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& ep : eps) {
    nlohmann::json s = nlohmann::json::array(), q = nlohmann::json::array();
    for (const auto& c : ep.support) s.push_back(c.conv_id);
    for (const auto& c : ep.query) q.push_back(c.conv_id);
    out.push_back({{"user_id", ep.user_id}, {"support", s}, {"query", q}});
  }
  return out;
}

std::vector<corpus::Episode> episodes_from_json(const nlohmann::json& j, const std::vector<corpus::Conversation>& convs) {
  std::map<std::string, const corpus::Conversation*> by_id;
  for (const auto& c : convs) by_id[c.conv_id] = &c;
  auto lookup = [&](const std::string& id) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw InputError("episode references unknown conversation " + id);
    return *it->second;
  };
  std::vector<corpus::Episode> out;
  for (const auto& e : j) {
    corpus::Episode ep;
    ep.user_id = e.at("user_id");
    for (const auto& id : e.at("support")) ep.support.push_back(lookup(id));
    for (const auto& id : e.at("query")) ep.query.push_back(lookup(id));
    out.push_back(std::move(ep));
  }
  return out;
}

void append_history(const fs::path& path, const meta::EpochRecord& r) {
  std::ofstream out(path, std::ios::app);
  out << r.to_json().dump() << "\n";
}

std::map<std::string, std::vector<corpus::Conversation>> support_map(const Prepared& data) {
  std::map<std::string, std::vector<corpus::Conversation>> out;
  for (const auto* eps : {&data.train_episodes, &data.valid_episodes, &data.test_episodes})
    for (const auto& ep : *eps)
      if (!ep.support.empty()) out[ep.user_id] = ep.support;
  return out;
}

struct RecState {
  std::unique_ptr<rec::RecModel> model;
  ParamSet theta;
  nlohmann::json meta;
};

RecState load_rec(const RunConfig& cfg, const Prepared& data) {
  if (!ckpt::exists(cfg.rec_dir()))
    throw InputError("no recommender checkpoint in " + cfg.rec_dir() + "; run `train --part rec` first");
  ckpt::Checkpoint c = ckpt::load(cfg.rec_dir());
  RecState s;
  s.meta = c.meta;
  s.model = std::make_unique<rec::RecModel>(data.kg, c.meta.at("users").get<std::vector<std::string>>(),
                                            rec::RecConfig::from_json(c.meta.at("config")));
  s.model->check_params(c.params);
  s.theta = std::move(c.params);
  return s;
}

}  // namespace

std::string RunConfig::data_dir() const { return (fs::path(out_dir) / "data").string(); }
std::string RunConfig::rec_dir() const { return (fs::path(out_dir) / "rec").string(); }
std::string RunConfig::dial_dir() const { return (fs::path(out_dir) / "dial").string(); }

nlohmann::json RunConfig::to_json() const {
  return {{"input_dir", input_dir},
          {"kg_file", kg_file},
          {"items_file", items_file},
          {"conversations_file", conversations_file},
          {"synthetic", synthetic},
          {"synthetic_spec", spec_to_json(synthetic_spec)},
          {"out_dir", out_dir},
          {"seed", seed},
          {"hops", hops},
          {"ratios", {{"train", ratios.train}, {"valid", ratios.valid}, {"test", ratios.test}}},
          {"add_test_support", add_test_support},
          {"rec", rec.to_json()},
          {"dial", dial.to_json()},
          {"rec_meta", rec_meta.to_json()},
          {"dial_meta", dial_meta.to_json()},
          {"rec_partition", rec_partition},
          {"dial_partition", dial_partition},
          {"rec_epochs", rec_epochs},
          {"dial_epochs", dial_epochs},
          {"patience", patience},
          {"decode", decode_to_json(decode)},
          {"max_generations_per_user", max_generations_per_user}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j, const RunConfig& base) {
  if (!j.is_object()) throw InputError("config must be a JSON object");
  nlohmann::json merged = base.to_json();
  nlohmann::json known = merged;
  known.erase("rec_partition");
  known.erase("dial_partition");
  for (const auto& [key, _] : j.items())
    if (key != "rec_partition" && key != "dial_partition" && !known.contains(key))
      throw InputError("unknown config key: " + key);
  nlohmann::json checked = j;
  checked.erase("rec_partition");
  checked.erase("dial_partition");
  check_keys(checked, known, "");
  merged.merge_patch(j);
  // merge_patch drops keys set to null; partitions may legitimately be null.
  for (const char* key : {"rec_partition", "dial_partition"})
    if (!merged.contains(key)) merged[key] = nullptr;
  try {
    RunConfig c;
    c.input_dir = merged.at("input_dir");
    c.kg_file = merged.at("kg_file");
    c.items_file = merged.at("items_file");
    c.conversations_file = merged.at("conversations_file");
    c.synthetic = merged.at("synthetic");
    c.synthetic_spec = spec_from_json(merged.at("synthetic_spec"));
    c.out_dir = merged.at("out_dir");
    c.seed = merged.at("seed");
    c.hops = merged.at("hops");
    c.ratios.train = merged.at("ratios").at("train");
    c.ratios.valid = merged.at("ratios").at("valid");
    c.ratios.test = merged.at("ratios").at("test");
    c.add_test_support = merged.at("add_test_support");
    c.rec = rec::RecConfig::from_json(merged.at("rec"));
    c.dial = dial::DialConfig::from_json(merged.at("dial"));
    c.rec_meta = meta::MetaConfig::from_json(merged.at("rec_meta"), base.rec_meta);
    c.dial_meta = meta::MetaConfig::from_json(merged.at("dial_meta"), base.dial_meta);
    c.rec_partition = merged.at("rec_partition");
    c.dial_partition = merged.at("dial_partition");
    c.rec_epochs = merged.at("rec_epochs");
    c.dial_epochs = merged.at("dial_epochs");
    c.patience = merged.at("patience");
    c.decode = decode_from_json(merged.at("decode"));
    c.max_generations_per_user = merged.at("max_generations_per_user");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("invalid config: ") + e.what());
  }
}

RunConfig RunConfig::from_json(const nlohmann::json& j) { return from_json(j, RunConfig{}); }

RunConfig RunConfig::from_file(const std::string& path, const RunConfig& base) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError(path + ": " + e.what());
  }
  return from_json(j, base);
}

void RunConfig::validate() const {
  try {
    rec.encoder.validate();
    dial.validate();
    rec_meta.validate();
    dial_meta.validate();
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  if (hops < 0) throw InputError("hops must be >= 0");
  if (rec_epochs < 0 || dial_epochs < 0 || patience < 1) throw InputError("epochs must be >= 0 and patience >= 1");
  if (ratios.train < 0 || ratios.valid < 0 || ratios.test < 0 ||
      std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
    throw InputError("split ratios must be non-negative and sum to 1");
  if (dial.rec_dim != rec.encoder.dim) throw InputError("dial.rec_dim must equal rec encoder dim");
}

std::vector<std::string> Prepared::train_users() const {
  std::set<std::string> users;
  for (const auto& c : splits.train) users.insert(c.user_id);
  return {users.begin(), users.end()};
}

nlohmann::json prepare(const RunConfig& cfg) {
  cfg.validate();
  corpus::KnowledgeGraph full;
  std::vector<corpus::Conversation> convs;
  if (cfg.synthetic) {
    corpus::SyntheticSpec spec = cfg.synthetic_spec;
    spec.seed = cfg.seed;
    corpus::SyntheticCorpus sc = corpus::generate_synthetic_corpus(spec);
    full = std::move(sc.kg);
    convs = std::move(sc.conversations);
  } else {
    const std::string kg_path = resolve(cfg.input_dir, cfg.kg_file);
    const std::string items_path = resolve(cfg.input_dir, cfg.items_file);
    const std::string conv_path = resolve(cfg.input_dir, cfg.conversations_file);
    for (const auto& p : {kg_path, conv_path})
      if (!fs::exists(p)) throw InputError("missing file: " + p);
    if (!cfg.items_file.empty() && !fs::exists(items_path)) throw InputError("missing file: " + items_path);
    try {
      full = corpus::load_kg_files(kg_path, cfg.items_file.empty() ? "" : items_path);
      convs = corpus::read_conversations_file(conv_path);
    } catch (const corpus::ParseError& e) {
      throw InputError(e.what());
    }
  }

  std::set<std::string> seeds;
  for (const auto& c : convs) {
    for (const auto& m : c.mentions) seeds.insert(m.entity);
    for (const auto& t : c.targets) seeds.insert(t.item);
  }
  corpus::KnowledgeGraph kg = corpus::extract_subgraph(full, seeds, cfg.hops);
  std::size_t slots = 0;
  corpus::Vocabulary slot_vocab;
  for (const auto& c : convs) {
    try {
      corpus::validate(c, kg);
    } catch (const std::invalid_argument& e) {
      throw InputError("conversation " + c.conv_id + ": " + e.what());
    }
    for (const auto& u : corpus::mask_items(c, slot_vocab).utterances)
      slots += static_cast<std::size_t>(std::count(u.tokens.begin(), u.tokens.end(), slot_vocab.slot_token()));
  }

  corpus::Splits splits = corpus::split_by_user(convs, cfg.ratios, cfg.seed);
  auto test_eps = corpus::make_episodes(splits.test, cfg.seed);
  if (cfg.add_test_support)
    for (const auto& ep : test_eps) splits.train.insert(splits.train.end(), ep.support.begin(), ep.support.end());
  const auto train_eps = corpus::make_episodes(splits.train, cfg.seed);
  const auto valid_eps = corpus::make_episodes(splits.valid, cfg.seed);
  const corpus::Vocabulary vocab = dial::build_vocabulary(splits.train, kg);

  const fs::path dir = cfg.data_dir();
  ensure_dir(dir);
  std::ostringstream triples, items;
  kg.write_tsv(triples, items);
  write_text(dir / "kg.tsv", triples.str());
  write_text(dir / "items.txt", items.str());
  write_text(dir / "train.jsonl", conversations_text(splits.train));
  write_text(dir / "valid.jsonl", conversations_text(splits.valid));
  write_text(dir / "test.jsonl", conversations_text(splits.test));
  write_text(dir / "episodes.json", nlohmann::json{{"train", episodes_json(train_eps)},
                                                   {"valid", episodes_json(valid_eps)},
                                                   {"test", episodes_json(test_eps)}}
                                        .dump(1) +
                                        "\n");
  write_text(dir / "vocab.json", vocab.to_json().dump() + "\n");

  nlohmann::json manifest = corpus::split_manifest(splits, cfg.ratios, cfg.seed);
  manifest["seed"] = cfg.seed;
  manifest["source"] = cfg.synthetic ? "synthetic" : "files";
  manifest["hops"] = cfg.hops;
  manifest["add_test_support"] = cfg.add_test_support;
  manifest["entities"] = kg.num_entities();
  manifest["relations"] = kg.num_relations();
  manifest["triples"] = kg.triples().size();
  manifest["items"] = kg.items().size();
  manifest["masked_slots"] = slots;
  manifest["vocab_size"] = vocab.size();
  manifest["conversations"] = {
      {"train", splits.train.size()}, {"valid", splits.valid.size()}, {"test", splits.test.size()}};
  write_text(dir / "manifest.json", manifest.dump(1) + "\n");
  log::info("prepared " + std::to_string(convs.size()) + " conversations into " + dir.string());
  return manifest;
}

Prepared load_prepared(const RunConfig& cfg) {
  const fs::path dir = cfg.data_dir();
  if (!fs::exists(dir / "manifest.json")) throw InputError("no prepared data in " + dir.string() + "; run `prepare`");
  Prepared p;
  try {
    p.kg = corpus::load_kg_files((dir / "kg.tsv").string(), (dir / "items.txt").string());
    p.splits.train = corpus::read_conversations_file((dir / "train.jsonl").string());
    p.splits.valid = corpus::read_conversations_file((dir / "valid.jsonl").string());
    p.splits.test = corpus::read_conversations_file((dir / "test.jsonl").string());
  } catch (const corpus::ParseError& e) {
    throw InputError(e.what());
  }
  p.manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
  const nlohmann::json eps = nlohmann::json::parse(read_text(dir / "episodes.json"));
  p.train_episodes = episodes_from_json(eps.at("train"), p.splits.train);
  p.valid_episodes = episodes_from_json(eps.at("valid"), p.splits.valid);
  p.test_episodes = episodes_from_json(eps.at("test"), p.splits.test);
  p.vocab = corpus::Vocabulary::from_json(nlohmann::json::parse(read_text(dir / "vocab.json")));
  const std::pair<const std::vector<corpus::Conversation>*, const char*> named[] = {
      {&p.splits.train, "train"}, {&p.splits.valid, "valid"}, {&p.splits.test, "test"}};
  for (const auto& [split, name] : named)
    for (const auto& c : *split) p.splits.user_split[c.user_id] = name;
  return p;
}

TrainSummary train_rec(const RunConfig& cfg) {
  cfg.validate();
  const Prepared data = load_prepared(cfg);
  rec::RecModel model(data.kg, data.train_users(), cfg.rec);
  const ParamSet init = model.init_params(cfg.seed);
  meta::ParamPartition partition;
  try {
    partition = meta::partition_params(meta::Part::rec, init, cfg.rec_partition);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  const auto train_users = train::rec_user_data(model, data.train_episodes);
  const auto valid_users = train::rec_user_data(model, data.valid_episodes);
  const auto tasks = train::rec_tasks(model, train_users);
  if (tasks.empty()) throw InputError("training split has no users");

  ensure_dir(cfg.out_dir);
  const fs::path history_path = fs::path(cfg.out_dir) / "rec_history.jsonl";
  write_text(history_path, "");
  meta::TrainOptions opts;
  opts.max_epochs = cfg.rec_epochs;
  opts.patience = cfg.patience;
  opts.maximize = true;
  opts.seed = cfg.seed;
  opts.on_epoch = [&](const meta::EpochRecord& r) { append_history(history_path, r); };
  std::function<double(const ParamSet&)> validate;
  if (!valid_users.empty())
    validate = [&](const ParamSet& theta) {
      return train::rec_meta_test(model, theta, valid_users, partition, cfg.rec_meta, true, {50}).report.at("HR@50");
    };
  else
    log::warn("validation split is empty; early stopping follows the training loss");
  const meta::TrainResult result = meta::train_loop(init, tasks, partition, cfg.rec_meta, opts, validate);

  nlohmann::json meta{{"part", "rec"},
                      {"seed", cfg.seed},
                      {"config", cfg.rec.to_json()},
                      {"meta_config", cfg.rec_meta.to_json()},
                      {"users", data.train_users()},
                      {"best_epoch", result.best_epoch},
                      {"epochs", result.history.size()}};
  ckpt::save(cfg.rec_dir(), result.best, meta);
  return TrainSummary{result.history, result.best_epoch, result.early_stopped, ckpt::checksum(result.best)};
}

TrainSummary train_dial(const RunConfig& cfg) {
  cfg.validate();
  const Prepared data = load_prepared(cfg);
  const RecState rs = load_rec(cfg, data);
  dial::DialModel model(cfg.dial, data.vocab.size());
  ParamSet init = model.init_params(cfg.seed);
  const bool through_rec = cfg.dial.backprop_into_rec;
  if (through_rec)
    for (const auto& [name, m] : rs.theta) init.set(name, m);
  meta::ParamPartition partition;
  try {
    partition = meta::partition_params(meta::Part::dial, init, cfg.dial_partition);
  } catch (const std::invalid_argument& e) {
    throw InputError(e.what());
  }
  const auto train_users = train::dial_user_data(*rs.model, rs.theta, data.vocab, data.train_episodes);
  const auto valid_users = train::dial_user_data(*rs.model, rs.theta, data.vocab, data.valid_episodes);
  const auto tasks = train::dial_tasks(model, train_users, through_rec ? rs.model.get() : nullptr);
  if (tasks.empty()) throw InputError("training split has no dialogue examples");

  ensure_dir(cfg.out_dir);
  const fs::path history_path = fs::path(cfg.out_dir) / "dial_history.jsonl";
  write_text(history_path, "");
  meta::TrainOptions opts;
  opts.max_epochs = cfg.dial_epochs;
  opts.patience = cfg.patience;
  opts.maximize = false;
  opts.seed = cfg.seed;
  opts.on_epoch = [&](const meta::EpochRecord& r) { append_history(history_path, r); };
  std::function<double(const ParamSet&)> validate;
  bool any_valid = false;
  for (const auto& u : valid_users) any_valid = any_valid || !u.query.empty();
  if (any_valid)
    validate = [&](const ParamSet& theta) {
      double total = 0.0;
      std::size_t n = 0;
      for (const auto& u : valid_users) {
        if (u.query.empty()) continue;
        const meta::LossFn support = [&model, &u](const ParamSet& p) { return model.loss_and_grad(p, u.support); };
        const ParamSet phi = u.support.empty() ? theta
                                               : meta::inner_adapt(theta, support, partition.inner,
                                                                   cfg.dial_meta.beta, cfg.dial_meta.inner_steps);
        total += model.loss_value(phi, u.query);
        ++n;
      }
      return total / static_cast<double>(n);
    };
  else
    log::warn("validation split has no dialogue examples; early stopping follows the training loss");
  const meta::TrainResult result = meta::train_loop(init, tasks, partition, cfg.dial_meta, opts, validate);

  nlohmann::json meta{{"part", "dial"},
                      {"seed", cfg.seed},
                      {"config", cfg.dial.to_json()},
                      {"meta_config", cfg.dial_meta.to_json()},
                      {"vocab_size", data.vocab.size()},
                      {"rec_checksum", ckpt::checksum(rs.theta)},
                      {"best_epoch", result.best_epoch},
                      {"epochs", result.history.size()}};
  ckpt::save(cfg.dial_dir(), result.best, meta);
  return TrainSummary{result.history, result.best_epoch, result.early_stopped, ckpt::checksum(result.best)};
}

std::shared_ptr<System> load_system(const RunConfig& cfg) {
  const Prepared data = load_prepared(cfg);
  RecState rs = load_rec(cfg, data);
  if (!ckpt::exists(cfg.dial_dir()))
    throw InputError("no dialogue checkpoint in " + cfg.dial_dir() + "; run `train --part dial` first");
  ckpt::Checkpoint dc = ckpt::load(cfg.dial_dir());
  const dial::DialConfig dial_cfg = dial::DialConfig::from_json(dc.meta.at("config"));
  if (dc.meta.at("vocab_size").get<std::size_t>() != data.vocab.size())
    throw InputError("dialogue checkpoint vocabulary does not match the prepared data");

  auto sys = std::make_shared<System>();
  // Rec groups trained jointly with the dialogue part supersede the rec checkpoint.
  for (const auto& name : dc.params.names())
    if (name.rfind(rec::kPrefix, 0) == 0) {
      rs.theta.set(name, dc.params.at(name));
      dc.params.erase(name);
    }
  sys->dial = std::make_unique<dial::DialModel>(dial_cfg, data.vocab.size());
  sys->dial->check_params(dc.params);
  sys->rec = std::move(rs.model);
  sys->rec_theta = std::move(rs.theta);
  sys->dial_theta = std::move(dc.params);
  sys->vocab = data.vocab;
  sys->rec_meta = meta::MetaConfig::from_json(rs.meta.at("meta_config"), cfg.rec_meta);
  sys->dial_meta = meta::MetaConfig::from_json(dc.meta.at("meta_config"), cfg.dial_meta);
  sys->rec_partition = meta::partition_params(meta::Part::rec, sys->rec_theta, cfg.rec_partition);
  sys->dial_partition = meta::partition_params(meta::Part::dial, sys->dial_theta, cfg.dial_partition);
  sys->support = support_map(data);
  sys->checksum = ckpt::checksum(sys->rec_theta) + ":" + ckpt::checksum(sys->dial_theta);
  sys->summary = {{"kind", "checkpoint"},
                  {"seed", cfg.seed},
                  {"rec", sys->rec->config().to_json()},
                  {"dial", dial_cfg.to_json()},
                  {"entities", data.kg.num_entities()},
                  {"vocab", data.vocab.size()}};
  return sys;
}

Evaluation evaluate(const RunConfig& cfg, bool adapt, bool csv) {
  const auto sys = load_system(cfg);
  const Prepared data = load_prepared(cfg);
  const auto rec_users = train::rec_user_data(*sys->rec, data.test_episodes);
  const auto rec_result =
      train::rec_meta_test(*sys->rec, sys->rec_theta, rec_users, sys->rec_partition, sys->rec_meta, adapt, {10, 50});
  const auto dial_users = train::dial_user_data(*sys->rec, sys->rec_theta, sys->vocab, data.test_episodes);
  train::DialTestOptions opts;
  opts.adapt = adapt;
  opts.decode = cfg.decode;
  opts.max_per_user = cfg.max_generations_per_user;
  const auto dial_result = train::dial_meta_test(*sys->dial, sys->dial_theta, dial_users, sys->dial_partition,
                                                 sys->dial_meta, *sys->rec, sys->rec_theta, sys->vocab, opts);
  Evaluation ev;
  ev.metrics = rec_result.report;
  for (const auto& [k, v] : dial_result.report) ev.metrics[k] = v;
  ev.report = {{"metrics", metrics::report_to_json(ev.metrics)},
               {"k", {10, 50}},
               {"n_users", rec_users.size()},
               {"n_responses", dial_result.candidates.size()},
               {"adapt", adapt},
               {"seed", cfg.seed},
               {"checksum", sys->checksum}};
  ensure_dir(cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "report.json", ev.report.dump(2) + "\n");
  if (csv) write_text(fs::path(cfg.out_dir) / "report.csv", metrics::report_to_csv(ev.metrics));
  return ev;
}

}  // namespace ccrs::pipeline
