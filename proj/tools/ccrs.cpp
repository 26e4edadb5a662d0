// ccrs: prepare, train, evaluate, chat and serve from one binary.

#include "ccrs/checkpoint.hpp"
#include "ccrs/log.hpp"
#include "ccrs/pipeline.hpp"
#include "ccrs/service.hpp"
#include "ccrs/system.hpp"

#include <CLI11.hpp>
#include <httplib.h>

#include <algorithm>
#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <pthread.h>
#include <sstream>
#include <thread>

using namespace ccrs;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool quiet = false;
  bool verbose = false;
};

pipeline::RunConfig run_config(const Common& c) {
  pipeline::RunConfig base;
  if (const char* env = std::getenv("CCRS_DATA_DIR")) base.input_dir = env;
  pipeline::RunConfig cfg = c.config.empty() ? base : pipeline::RunConfig::from_file(c.config, base);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

void apply_log_level(const Common& c) {
  if (c.quiet) log::set_level(log::Level::warn);
  if (c.verbose) log::set_level(log::Level::debug);
}

corpus::SplitRatios parse_ratios(const std::string& s) {
  std::vector<double> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, '/')) {
    try {
      parts.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw pipeline::InputError("bad ratio value: " + item);
    }
  }
  if (parts.size() != 3) throw pipeline::InputError("ratios must look like 0.8/0.1/0.1");
  return {parts[0], parts[1], parts[2]};
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

/// Up to five entity names closest to `query`: substring hits first, then by edit distance.
std::vector<std::string> near_matches(const corpus::KnowledgeGraph& kg, const std::string& query) {
  const std::string q = lower(query);
  std::vector<std::pair<std::size_t, std::string>> scored;
  for (const auto& name : kg.entity_names()) {
    const std::string n = lower(name);
    const std::size_t d = n.find(q) != std::string::npos ? 0 : edit_distance(q, n);
    scored.emplace_back(d, name);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < scored.size() && i < 5; ++i) out.push_back(scored[i].second);
  return out;
}

std::shared_ptr<System> load_or_stub(const pipeline::RunConfig& cfg, bool stub) {
  if (stub) return make_stub_system(cfg.seed);
  return pipeline::load_system(cfg);
}

int cmd_prepare(const Common& common, bool synthetic, const std::string& ratios, std::optional<int> hops,
                const std::string& input_dir) {
  pipeline::RunConfig cfg = run_config(common);
  if (synthetic) cfg.synthetic = true;
  if (!ratios.empty()) cfg.ratios = parse_ratios(ratios);
  if (hops) cfg.hops = *hops;
  if (!input_dir.empty()) cfg.input_dir = input_dir;
  const nlohmann::json manifest = pipeline::prepare(cfg);
  std::cout << manifest.at("conversations").dump() << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& part, std::optional<bool> first_order,
              std::optional<int> epochs) {
  pipeline::RunConfig cfg = run_config(common);
  const meta::Part p = meta::part_from_string(part);
  meta::MetaConfig& mc = p == meta::Part::rec ? cfg.rec_meta : cfg.dial_meta;
  if (first_order) mc.first_order = *first_order;
  if (epochs) (p == meta::Part::rec ? cfg.rec_epochs : cfg.dial_epochs) = *epochs;
  const pipeline::TrainSummary s = p == meta::Part::rec ? pipeline::train_rec(cfg) : pipeline::train_dial(cfg);
  std::cout << nlohmann::json{{"part", part},
                              {"epochs", s.history.size()},
                              {"best_epoch", s.best_epoch},
                              {"early_stopped", s.early_stopped},
                              {"first_order", mc.first_order},
                              {"checksum", s.checksum}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_evaluate(const Common& common, bool no_adapt, bool csv) {
  const pipeline::RunConfig cfg = run_config(common);
  const pipeline::Evaluation ev = pipeline::evaluate(cfg, !no_adapt, csv);
  std::cout << ev.report.dump(2) << "\n";
  return 0;
}

std::string format_weights(const Vector& v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(3);
  for (Eigen::Index i = 0; i < v.size(); ++i) ss << (i ? " " : "") << v(i);
  return ss.str();
}

int cmd_chat(const Common& common, const std::string& user, bool adapt, const std::string& log_path, bool stub,
             std::size_t k) {
  const pipeline::RunConfig cfg = run_config(common);
  auto sys = load_or_stub(cfg, stub);
  service::ServiceConfig sc;
  sc.default_k = k;
  sc.decode = cfg.decode;
  service::ChatService svc(sys, sc);
  const service::SessionInfo info = svc.create_session(user, adapt);
  if (!info.warning.empty()) std::cout << "warning: " << info.warning << "\n";
  std::cout << "session " << info.session_id << " (type /entity <name> to tag, /quit to leave)\n";
  std::vector<std::string> pending;
  std::string line;
  auto save = [&] {
    if (log_path.empty()) return;
    std::ofstream out(log_path);
    if (!out) throw pipeline::EnvironmentError("cannot write " + log_path);
    out << nlohmann::json{{"session_id", info.session_id}, {"user_id", info.user_id},
                          {"transcript", svc.transcript(info.session_id)}}
               .dump(2)
        << "\n";
  };
  while (true) {
    std::cout << "> " << std::flush;
    if (!std::getline(std::cin, line)) break;
    if (line == "/quit") break;
    if (line.rfind("/entity", 0) == 0) {
      std::string name = line.substr(7);
      name.erase(0, name.find_first_not_of(' '));
      if (sys->kg().find_entity(name)) {
        pending.push_back(name);
        std::cout << "tagged " << name << "\n";
      } else {
        std::cout << "unknown entity '" << name << "'; near matches:";
        for (const auto& m : near_matches(sys->kg(), name)) std::cout << " " << m;
        std::cout << "\n";
      }
      continue;
    }
    if (line.empty()) continue;
    const service::ChatResponse r = svc.post_message(info.session_id, line, pending);
    pending.clear();
    std::cout << "system: " << r.text << "\n";
    std::cout << "items:";
    for (const auto& it : r.items) std::cout << " " << it.name << " (" << std::setprecision(3) << it.score << ")";
    std::cout << "\nstyles: " << format_weights(r.style_weights) << "\n";
  }
  save();
  return 0;
}

int cmd_serve(const Common& common, const std::string& host, int port, bool stub, const std::string& cors,
              const std::string& session_logs) {
  const pipeline::RunConfig cfg = run_config(common);
  // Block termination signals before any thread starts so only the watcher receives them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  auto sys = load_or_stub(cfg, stub);
  service::ServiceConfig sc;
  sc.decode = cfg.decode;
  sc.cors_origin = cors;
  sc.session_log_dir = session_logs;
  service::ChatService svc(sys, sc);
  httplib::Server server;
  // httplib's default enables SO_REUSEPORT, which lets a second server share a busy port.
  server.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  service::register_routes(server, svc);
  if (!server.bind_to_port(host, port))
    throw pipeline::EnvironmentError("cannot bind " + host + ":" + std::to_string(port));
  std::thread watcher([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    log::info("received signal " + std::to_string(sig) + ", shutting down");
    server.stop();
  });
  watcher.detach();
  log::info("serving on http://" + host + ":" + std::to_string(port));
  server.listen_after_bind();
  log::info("shutdown complete");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Meta-learned conversational recommender"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--config", common.config, "JSON run configuration");
  app.add_option("--seed", common.seed, "Random seed (default 17)");
  app.add_option("--out", common.out, "Output directory");
  app.add_flag("-q,--quiet", common.quiet, "Only warnings and errors");
  app.add_flag("-v,--verbose", common.verbose, "Debug logging");

  auto* prepare = app.add_subcommand("prepare", "Build splits and episodes");
  bool synthetic = false;
  std::string ratios, input_dir;
  std::optional<int> hops;
  prepare->add_flag("--synthetic", synthetic, "Generate the synthetic corpus");
  prepare->add_option("--ratios", ratios, "train/valid/test fractions, e.g. 0.8/0.1/0.1");
  prepare->add_option("--hops", hops, "Subgraph radius around mentioned entities");
  prepare->add_option("--input-dir", input_dir, "Directory with kg.tsv, items.txt, conversations.jsonl");

  auto* train = app.add_subcommand("train", "Meta-train one part");
  std::string part;
  std::optional<bool> first_order;
  std::optional<int> epochs;
  train->add_option("--part", part, "rec or dial")->required()->check(CLI::IsMember({"rec", "dial"}));
  train->add_option("--first-order", first_order, "false enables the second-order update");
  train->add_option("--epochs", epochs, "Maximum epochs");

  auto* evaluate = app.add_subcommand("evaluate", "Meta-test on the test split");
  bool no_adapt = false, csv = false;
  evaluate->add_flag("--no-adapt", no_adapt, "Skip per-user adaptation");
  evaluate->add_flag("--csv", csv, "Also write report.csv");

  auto* chat = app.add_subcommand("chat", "Interactive terminal chat");
  std::string user = "anonymous", log_path;
  bool adapt = false, stub = false;
  std::size_t k = 5;
  chat->add_option("--user", user, "User id");
  chat->add_flag("--adapt", adapt, "Adapt to the user's support conversations");
  chat->add_option("--log", log_path, "Save the transcript here on exit");
  chat->add_flag("--stub", stub, "Use an untrained stub model");
  chat->add_option("-k", k, "Recommendations per turn")->check(CLI::PositiveNumber);

  auto* serve = app.add_subcommand("serve", "HTTP service");
  std::string host = "127.0.0.1", cors = "*", session_logs;
  int port = 8080;
  bool serve_stub = false;
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--port", port, "Port")->check(CLI::Range(0, 65535));
  serve->add_flag("--stub", serve_stub, "Use an untrained stub model");
  serve->add_option("--cors-origin", cors, "Allowed cross-origin requester (empty disables)");
  serve->add_option("--session-log-dir", session_logs, "Per-session JSON-lines transcripts");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  apply_log_level(common);
  try {
    if (*prepare) return cmd_prepare(common, synthetic, ratios, hops, input_dir);
    if (*train) return cmd_train(common, part, first_order, epochs);
    if (*evaluate) return cmd_evaluate(common, no_adapt, csv);
    if (*chat) return cmd_chat(common, user, adapt, log_path, stub, k);
    if (*serve) return cmd_serve(common, host, port, serve_stub, cors, session_logs);
  } catch (const pipeline::InputError& e) {
    log::error(e.what());
    return 2;
  } catch (const pipeline::EnvironmentError& e) {
    log::error(e.what());
    return 3;
  } catch (const service::ServiceError& e) {
    log::error(e.what());
    return e.status() >= 500 ? 3 : 2;
  } catch (const std::exception& e) {
    log::error(std::string("unexpected failure: ") + e.what());
    return 1;
  }
  return 1;
}
