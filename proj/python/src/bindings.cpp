#include "ccrs/corpus.hpp"
#include "ccrs/log.hpp"
#include "ccrs/meta_trainer.hpp"
#include "ccrs/metrics.hpp"
#include "ccrs/pipeline.hpp"
#include "ccrs/service.hpp"
#include "ccrs/system.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

namespace py = pybind11;
using namespace ccrs;

namespace {

// JSON crosses the boundary as text; the Python side sees plain dicts and lists.
py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ParamSet to_params(const std::map<std::string, Matrix>& groups) {
  ParamSet p;
  for (const auto& [name, m] : groups) p.set(name, m);
  return p;
}

std::map<std::string, Matrix> from_params(const ParamSet& p) {
  std::map<std::string, Matrix> out;
  for (const auto& [name, m] : p) out[name] = m;
  return out;
}

std::vector<metrics::RankedResult> ranked(const std::vector<std::pair<std::vector<int>, int>>& results) {
  std::vector<metrics::RankedResult> out;
  for (const auto& [candidates, gold] : results) out.push_back({candidates, gold});
  return out;
}

pipeline::RunConfig run_config(const py::object& cfg) {
  return cfg.is_none() ? pipeline::RunConfig{} : pipeline::RunConfig::from_json(from_py(cfg));
}

nlohmann::json summary_json(const pipeline::TrainSummary& s) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& r : s.history) history.push_back(r.to_json());
  return {{"history", history}, {"best_epoch", s.best_epoch}, {"early_stopped", s.early_stopped},
          {"checksum", s.checksum}};
}

nlohmann::json items_json(const std::vector<service::RecommendedItem>& items) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& it : items) out.push_back({{"item_id", it.name}, {"entity", it.entity}, {"score", it.score}});
  return out;
}

/// Chat service plus the system it serves.
class Chat {
 public:
  explicit Chat(std::shared_ptr<System> sys, service::ServiceConfig cfg) : sys_(std::move(sys)), svc_(sys_, cfg) {}

  py::dict create_session(const std::string& user, bool adapt) {
    const auto info = svc_.create_session(user, adapt);
    py::dict d;
    d["session_id"] = info.session_id;
    d["user_id"] = info.user_id;
    d["adapted"] = info.adapted;
    d["warning"] = info.warning;
    return d;
  }
  py::object post_message(const std::string& session, const std::string& text, const std::vector<std::string>& ents) {
    return to_py(svc_.post_message(session, text, ents).to_json());
  }
  py::object recommendations(const std::string& session, std::size_t k) {
    return to_py(items_json(svc_.get_recommendations(session, k)));
  }
  py::object transcript(const std::string& session) const { return to_py(svc_.transcript(session)); }
  py::object health() const { return to_py(svc_.health()); }
  std::vector<std::string> search(const std::string& prefix, std::size_t limit) const {
    return svc_.search_entities(prefix, limit);
  }

  /// p_u, mu^o and mu^r for a mention history under the unadapted weights.
  py::dict intention(const std::vector<std::string>& entities, const std::vector<int>& turns,
                     const std::string& user) const {
    if (entities.size() != turns.size()) throw std::invalid_argument("entities and turns differ in length");
    std::vector<int> ids;
    for (const auto& e : entities) ids.push_back(sys_->kg().entity(e));
    int row = sys_->rec->user_index(user);
    ParamSet params = sys_->rec_theta;
    if (row < 0) params = rec::RecModel::with_mean_user(sys_->rec_theta, row);
    const auto it = sys_->rec->infer(params, row, ids, turns);
    py::dict d;
    d["p_u"] = it.p_u;
    d["turn_weights"] = it.mu_o;
    d["entity_weights"] = it.mu_r;
    return d;
  }
  std::string checksum() const { return sys_->checksum; }

 private:
  std::shared_ptr<System> sys_;
  service::ChatService svc_;
};

service::ServiceConfig service_config(int max_len, bool exclude_seen) {
  service::ServiceConfig sc;
  sc.decode.max_len = max_len;
  sc.exclude_seen = exclude_seen;
  return sc;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Meta-learned conversational recommender";

  py::register_exception<pipeline::InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<pipeline::EnvironmentError>(m, "EnvironmentError", PyExc_OSError);
  static py::exception<service::ServiceError> service_error(m, "ServiceError", PyExc_RuntimeError);
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const service::ServiceError& e) {
      py::set_error(service_error, (e.code() + ": " + e.what()).c_str());
    }
  });

  m.def("set_log_level", [](const std::string& level) {
    static const std::map<std::string, log::Level> levels = {{"debug", log::Level::debug}, {"info", log::Level::info},
                                                             {"warn", log::Level::warn},   {"error", log::Level::error},
                                                             {"off", log::Level::off}};
    log::set_level(levels.at(level));
  });

  m.def(
      "synthetic_corpus",
      [](int n_users, int n_items, int topics, std::uint64_t seed, int convs_per_user) {
        corpus::SyntheticSpec spec;
        spec.n_users = n_users;
        spec.n_items = n_items;
        spec.topics = topics;
        spec.seed = seed;
        spec.convs_per_user = convs_per_user;
        const auto sc = corpus::generate_synthetic_corpus(spec);
        nlohmann::json convs = nlohmann::json::array(), triples = nlohmann::json::array();
        for (const auto& c : sc.conversations) convs.push_back(corpus::to_json(c));
        for (const auto& t : sc.kg.triples())
          triples.push_back({sc.kg.entity_name(t.head), sc.kg.relation_name(t.relation), sc.kg.entity_name(t.tail)});
        return to_py({{"conversations", convs}, {"triples", triples}, {"topics", sc.topic_entities}});
      },
      py::arg("n_users") = 20, py::arg("n_items") = 40, py::arg("topics") = 2, py::arg("seed") = 17,
      py::arg("convs_per_user") = 6);

  m.def("hit_rate", [](const std::vector<std::pair<std::vector<int>, int>>& r, std::size_t k) {
    return metrics::hit_rate(ranked(r), k);
  });
  m.def("mrr", [](const std::vector<std::pair<std::vector<int>, int>>& r, std::size_t k) {
    return metrics::mrr(ranked(r), k);
  });
  m.def("ndcg", [](const std::vector<std::pair<std::vector<int>, int>>& r, std::size_t k) {
    return metrics::ndcg(ranked(r), k);
  });
  m.def("distinct_n", &metrics::distinct_n, py::arg("sentences"), py::arg("n"));
  m.def("token_f1",
        py::overload_cast<const std::vector<metrics::Sentence>&, const std::vector<metrics::Sentence>&>(
            &metrics::token_f1),
        py::arg("candidates"), py::arg("references"));
  m.def("bleu", &metrics::bleu, py::arg("candidates"), py::arg("references"), py::arg("max_n") = 4);

  m.def(
      "inner_adapt",
      [](const std::map<std::string, Matrix>& theta, const py::function& loss, const std::set<std::string>& inner,
         double beta, int steps) {
        const meta::LossFn fn = [&loss](const ParamSet& p) {
          const auto out = loss(from_params(p)).cast<std::pair<double, std::map<std::string, Matrix>>>();
          return LossGrad{out.first, to_params(out.second), 1};
        };
        return from_params(meta::inner_adapt(to_params(theta), fn, inner, beta, steps));
      },
      py::arg("theta"), py::arg("loss"), py::arg("inner"), py::arg("beta"), py::arg("steps") = 1,
      "theta after `steps` gradient steps on the inner groups; `loss` maps params to (value, grads).");
  m.def(
      "clip_elementwise",
      [](const std::map<std::string, Matrix>& g, double lo, double hi) {
        ParamSet p = to_params(g);
        meta::clip_elementwise(p, lo, hi);
        return from_params(p);
      },
      py::arg("grads"), py::arg("lo"), py::arg("hi"));

  m.def("default_config", [] { return to_py(pipeline::RunConfig{}.to_json()); });
  m.def("prepare", [](const py::object& cfg) { return to_py(pipeline::prepare(run_config(cfg))); });
  m.def("train", [](const py::object& cfg, const std::string& part) {
    const auto c = run_config(cfg);
    return to_py(summary_json(meta::part_from_string(part) == meta::Part::rec ? pipeline::train_rec(c)
                                                                              : pipeline::train_dial(c)));
  });
  m.def(
      "evaluate",
      [](const py::object& cfg, bool adapt) { return to_py(pipeline::evaluate(run_config(cfg), adapt).report); },
      py::arg("config"), py::arg("adapt") = true);

  py::class_<Chat>(m, "ChatService")
      .def_static(
          "stub",
          [](std::uint64_t seed, int dim, int max_len, bool exclude_seen) {
            return std::make_unique<Chat>(make_stub_system(seed, dim), service_config(max_len, exclude_seen));
          },
          py::arg("seed") = 17, py::arg("dim") = 16, py::arg("max_len") = 40, py::arg("exclude_seen") = true)
      .def_static(
          "from_run",
          [](const py::object& cfg, bool exclude_seen) {
            const auto c = run_config(cfg);
            return std::make_unique<Chat>(pipeline::load_system(c), service_config(c.decode.max_len, exclude_seen));
          },
          py::arg("config"), py::arg("exclude_seen") = true)
      .def("create_session", &Chat::create_session, py::arg("user_id") = "anonymous", py::arg("adapt") = false)
      .def("post_message", &Chat::post_message, py::arg("session_id"), py::arg("text"),
           py::arg("entities") = std::vector<std::string>{})
      .def("recommendations", &Chat::recommendations, py::arg("session_id"), py::arg("k") = 5)
      .def("transcript", &Chat::transcript)
      .def("health", &Chat::health)
      .def("search_entities", &Chat::search, py::arg("prefix"), py::arg("limit") = 20)
      .def("intention", &Chat::intention, py::arg("entities"), py::arg("turns"), py::arg("user_id") = "")
      .def_property_readonly("checksum", &Chat::checksum);
}
