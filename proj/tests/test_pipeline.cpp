#include "ccrs/checkpoint.hpp"
#include "ccrs/log.hpp"
#include "ccrs/pipeline.hpp"
#include "ccrs/training.hpp"

#include "support.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace ccrs;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("ccrs_it_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

pipeline::RunConfig small_config(const fs::path& out) {
  pipeline::RunConfig cfg;
  cfg.synthetic = true;
  cfg.synthetic_spec.n_users = 10;
  cfg.synthetic_spec.n_items = 12;
  cfg.synthetic_spec.convs_per_user = 4;
  cfg.out_dir = out.string();
  cfg.rec.encoder.dim = 8;
  cfg.rec.encoder.heads = 2;
  cfg.rec.encoder.user_dim = 8;
  cfg.rec.max_turns = 16;
  cfg.dial.model_dim = 8;
  cfg.dial.layers = 1;
  cfg.dial.heads = 2;
  cfg.dial.ffn_dim = 16;
  cfg.dial.max_len = 64;
  cfg.dial.rec_dim = 8;
  cfg.dial.styles = 2;
  cfg.rec_epochs = 2;
  cfg.dial_epochs = 2;
  cfg.decode.max_len = 8;
  cfg.max_generations_per_user = 1;
  return cfg;
}

/// One trained run shared by the read-only cases.
const pipeline::RunConfig& trained() {
  static const pipeline::RunConfig cfg = [] {
    log::set_level(log::Level::warn);
    const auto c = small_config(scratch("trained"));
    pipeline::prepare(c);
    pipeline::train_rec(c);
    pipeline::train_dial(c);
    return c;
  }();
  return cfg;
}

ParamSet sample_params() {
  std::mt19937_64 rng(3);
  ParamSet p;
  p.set("a.x", testing::random_matrix(3, 4, rng, 1.0));
  p.set("b", testing::random_matrix(1, 1, rng, 1.0));
  p.set("c/weird name", testing::random_matrix(2, 5, rng, 1.0));
  return p;
}

}  // namespace

TEST_SUITE("integration") {

TEST_CASE("checkpoint round trip preserves every bit and the checksum") {
  const fs::path dir = scratch("ckpt");
  const ParamSet p = sample_params();
  CHECK_FALSE(ckpt::exists(dir.string()));
  ckpt::save(dir.string(), p, {{"tag", 7}});
  CHECK(ckpt::exists(dir.string()));
  const auto back = ckpt::load(dir.string());
  CHECK(back.params.identical(p));
  CHECK(back.meta.at("tag") == 7);
  CHECK(ckpt::checksum(back.params) == ckpt::checksum(p));

  ParamSet q = p;
  q.at("b")(0, 0) += 1e-12;
  CHECK(ckpt::checksum(q) != ckpt::checksum(p));
  ParamSet r = p;
  r.set("b", Matrix::Zero(1, 1));
  r.at("b")(0, 0) = p.at("b")(0, 0);
  CHECK(ckpt::checksum(r) == ckpt::checksum(p));
}

TEST_CASE("damaged checkpoints are rejected") {
  const ParamSet p = sample_params();
  {
    const fs::path dir = scratch("ckpt_missing");
    ckpt::save(dir.string(), p, {});
    fs::remove(dir / "b.bin");
    CHECK_THROWS_AS(ckpt::load(dir.string()), std::runtime_error);
  }
  {
    const fs::path dir = scratch("ckpt_short");
    ckpt::save(dir.string(), p, {});
    fs::resize_file(dir / "a.x.bin", 8);
    CHECK_THROWS_AS(ckpt::load(dir.string()), std::runtime_error);
  }
  {
    const fs::path dir = scratch("ckpt_flip");
    ckpt::save(dir.string(), p, {});
    std::fstream f(dir / "a.x.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put('\x5a');
    f.close();
    CHECK_THROWS_AS(ckpt::load(dir.string()), std::runtime_error);
  }
  {
    const fs::path dir = scratch("ckpt_manifest");
    ckpt::save(dir.string(), p, {});
    std::ofstream(dir / "manifest.json") << "{not json";
    CHECK_THROWS_AS(ckpt::load(dir.string()), std::runtime_error);
  }
  CHECK_THROWS_AS(ckpt::load(scratch("ckpt_empty").string()), std::runtime_error);
}

TEST_CASE("prepare is deterministic and splits users by conversation share") {
  log::set_level(log::Level::warn);
  const auto a = small_config(scratch("prep_a"));
  const auto b = small_config(scratch("prep_b"));
  const auto manifest = pipeline::prepare(a);
  pipeline::prepare(b);
  for (const char* f : {"kg.tsv", "items.txt", "train.jsonl", "valid.jsonl", "test.jsonl", "episodes.json",
                        "vocab.json", "manifest.json"}) {
    INFO(f);
    CHECK(slurp(fs::path(a.data_dir()) / f) == slurp(fs::path(b.data_dir()) / f));
  }
  std::map<std::string, int> per_split;
  for (const auto& [user, split] : manifest.at("users").items()) ++per_split[split.get<std::string>()];
  // Ten users with four conversations each at 8:1:1.
  CHECK(per_split["train"] == 8);
  CHECK(per_split["valid"] == 1);
  CHECK(per_split["test"] == 1);
  CHECK(manifest.at("counts").at("train") == 32);

  auto c = small_config(scratch("prep_c"));
  c.ratios = {0.6, 0.2, 0.2};
  pipeline::prepare(c);
  const auto data = pipeline::load_prepared(c);
  CHECK(data.train_users().size() == 6);
  CHECK(data.train_episodes.size() == 6);
  CHECK(data.valid_episodes.size() == 2);
  CHECK(data.test_episodes.size() == 2);
  for (const auto& ep : data.test_episodes) {
    CHECK(ep.query.size() == 2);
    CHECK(ep.support.size() == 2);
    CHECK(data.splits.user_split.at(ep.user_id) == "test");
  }
  CHECK(pipeline::load_prepared(a).vocab.size() == manifest.at("vocab_size"));
}

TEST_CASE("stages enforce their order") {
  log::set_level(log::Level::warn);
  const auto cfg = small_config(scratch("order"));
  CHECK_THROWS_AS(pipeline::train_rec(cfg), pipeline::InputError);
  pipeline::prepare(cfg);
  CHECK_THROWS_AS(pipeline::train_dial(cfg), pipeline::InputError);
  CHECK_THROWS_AS(pipeline::load_system(cfg), pipeline::InputError);
  CHECK_THROWS_AS(pipeline::evaluate(cfg, true), pipeline::InputError);
}

TEST_CASE("configuration errors are input errors") {
  CHECK_THROWS_AS(pipeline::RunConfig::from_json({{"bogus", 1}}), pipeline::InputError);
  CHECK_THROWS_AS(pipeline::RunConfig::from_json({{"rec", {{"bogus", 1}}}}), pipeline::InputError);
  CHECK_THROWS_AS(pipeline::RunConfig::from_json(nlohmann::json::array()), pipeline::InputError);
  CHECK_THROWS_AS(pipeline::RunConfig::from_json({{"seed", "x"}}), pipeline::InputError);

  auto cfg = small_config(scratch("cfg"));
  CHECK_NOTHROW(cfg.validate());
  auto mismatch = cfg;
  mismatch.dial.rec_dim = 16;
  CHECK_THROWS_AS(mismatch.validate(), pipeline::InputError);
  auto ratios = cfg;
  ratios.ratios.test = 0.5;
  CHECK_THROWS_AS(ratios.validate(), pipeline::InputError);
  auto heads = cfg;
  heads.rec.encoder.heads = 3;
  CHECK_THROWS_AS(heads.validate(), pipeline::InputError);

  const auto round = pipeline::RunConfig::from_json(cfg.to_json());
  CHECK(round.to_json() == cfg.to_json());
  const auto patched = pipeline::RunConfig::from_json({{"rec_epochs", 9}, {"rec", {{"dim", 8}}}}, cfg);
  CHECK(patched.rec_epochs == 9);
  CHECK(patched.dial_epochs == cfg.dial_epochs);
}

TEST_CASE("training writes checkpoints, histories and a loadable system") {
  const auto& cfg = trained();
  CHECK(ckpt::exists(cfg.rec_dir()));
  CHECK(ckpt::exists(cfg.dial_dir()));
  std::ifstream hist(fs::path(cfg.out_dir) / "rec_history.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(hist, line)) ++lines;
  CHECK(lines == cfg.rec_epochs);

  const auto sys = pipeline::load_system(cfg);
  const auto rec_ck = ckpt::load(cfg.rec_dir());
  const auto dial_ck = ckpt::load(cfg.dial_dir());
  CHECK(sys->checksum == ckpt::checksum(rec_ck.params) + ":" + ckpt::checksum(dial_ck.params));
  CHECK(dial_ck.meta.at("rec_checksum") == ckpt::checksum(rec_ck.params));
  CHECK(sys->rec_theta.identical(rec_ck.params));
}

TEST_CASE("evaluation reports every metric and equals the direct library calls") {
  const auto& cfg = trained();
  const auto ev = pipeline::evaluate(cfg, true, true);
  for (const char* key : {"HR@10", "HR@50", "MRR@10", "MRR@50", "NDCG@10", "NDCG@50", "BLEU", "F1", "Dist-2",
                          "Dist-3", "Dist-4"}) {
    INFO(key);
    REQUIRE(ev.metrics.count(key) == 1);
    CHECK(ev.metrics.at(key) >= 0.0);
    CHECK(ev.metrics.at(key) <= 1.0);
  }
  CHECK(ev.metrics.size() == 11);
  CHECK(fs::exists(fs::path(cfg.out_dir) / "report.json"));
  CHECK(fs::exists(fs::path(cfg.out_dir) / "report.csv"));
  CHECK(nlohmann::json::parse(slurp(fs::path(cfg.out_dir) / "report.json")) == ev.report);

  const auto sys = pipeline::load_system(cfg);
  const auto data = pipeline::load_prepared(cfg);
  const ParamSet before = sys->rec_theta;
  const auto users = train::rec_user_data(*sys->rec, data.test_episodes);
  const auto direct = train::rec_meta_test(*sys->rec, sys->rec_theta, users, sys->rec_partition, sys->rec_meta, true);
  CHECK(sys->rec_theta.identical(before));
  for (const auto& [k, v] : direct.report) CHECK(ev.metrics.at(k) == v);

  const auto again = pipeline::evaluate(cfg, true);
  CHECK(again.metrics == ev.metrics);
  const auto plain = pipeline::evaluate(cfg, false);
  CHECK(plain.report.at("adapt") == false);
  CHECK(plain.metrics.size() == 11);
}

}  // TEST_SUITE
