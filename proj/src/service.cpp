#include "ccrs/service.hpp"

#include "ccrs/log.hpp"
#include "ccrs/training.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace ccrs::service {

using corpus::Mention;
using corpus::Speaker;
using corpus::Utterance;

namespace {

std::vector<double> to_vec(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

nlohmann::json ChatResponse::to_json() const {
  nlohmann::json items_json = nlohmann::json::array();
  for (const auto& it : items) items_json.push_back({{"item_id", it.name}, {"name", corpus::detokenize(corpus::entity_surface(it.name))}, {"score", it.score}});
  nlohmann::json j;
  j["session_id"] = session_id;
  j["text"] = text;
  j["items"] = items_json;
  j["style_weights"] = to_vec(style_weights);
  j["filled_items"] = filled_items;
  j["truncated"] = truncated;
  j["diagnostics"] = {{"turn_weights", to_vec(turn_weights)},
                      {"entity_weights", to_vec(entity_weights)},
                      {"entities", entities},
                      {"turns", entity_turns}};
  return j;
}

struct ChatService::Session {
  std::mutex mu;
  std::string id;
  std::string user_id;
  int row = -1;
  bool adapted = false;
  std::string warning;
  std::shared_ptr<const ParamSet> rec_params;
  std::shared_ptr<const ParamSet> dial_params;
  std::vector<Utterance> transcript;
  std::vector<Mention> mentions;
  std::set<int> recommended;
  bool has_state = false;
  rec::Intention state;
  intention::ItemIndex index;
};

ChatService::ChatService(std::shared_ptr<const System> system, ServiceConfig cfg)
    : system_(std::move(system)), cfg_(std::move(cfg)) {
  if (cfg_.default_k < 1) throw std::invalid_argument("default_k must be >= 1");
  if (!cfg_.session_log_dir.empty()) std::filesystem::create_directories(cfg_.session_log_dir);
}

ChatService::~ChatService() = default;

std::shared_ptr<ChatService::Session> ChatService::find(const std::string& id) const {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw ServiceError(404, "session_not_found", "no session " + id);
  return it->second;
}

SessionInfo ChatService::create_session(const std::string& user_id, bool adapt) {
  if (!system_) throw ServiceError(503, "model_unavailable", "no model is loaded");
  auto s = std::make_shared<Session>();
  s->user_id = user_id.empty() ? "anonymous" : user_id;
  s->row = system_->rec->user_index(s->user_id);
  s->rec_params = std::shared_ptr<const ParamSet>(system_, &system_->rec_theta);
  s->dial_params = std::shared_ptr<const ParamSet>(system_, &system_->dial_theta);
  if (adapt) {
    auto sup = system_->support.find(s->user_id);
    if (sup == system_->support.end() || sup->second.empty()) {
      s->warning = "no support data for user " + s->user_id + "; session is unadapted";
      log::warn(s->warning);
    } else {
      int row = s->row;
      ParamSet rec_base = row >= 0 ? system_->rec_theta : rec::RecModel::with_mean_user(system_->rec_theta, row);
      const auto labels = rec::make_labels(sup->second, system_->kg(), system_->rec->config().history);
      const rec::RecModel& model = *system_->rec;
      auto rec_phi = std::make_shared<ParamSet>(meta::inner_adapt(
          rec_base, [&](const ParamSet& p) { return model.loss_and_grad(p, row, labels); },
          system_->rec_partition.inner, system_->rec_meta.beta, system_->rec_meta.inner_steps));
      s->row = row;
      s->rec_params = rec_phi;
      const dial::IntentionFn intention = train::rec_intention_for(model, *rec_phi, row);
      std::vector<dial::Example> examples;
      for (const auto& c : sup->second) {
        auto ex = dial::make_examples(c, system_->kg(), system_->vocab, intention, model.config().history);
        examples.insert(examples.end(), ex.begin(), ex.end());
      }
      const dial::DialModel& dm = *system_->dial;
      s->dial_params = std::make_shared<ParamSet>(meta::inner_adapt(
          system_->dial_theta, [&](const ParamSet& p) { return dm.loss_and_grad(p, examples); },
          system_->dial_partition.inner, system_->dial_meta.beta, system_->dial_meta.inner_steps));
      s->adapted = true;
    }
  }
  std::ostringstream id;
  id << "s" << std::setw(6) << std::setfill('0') << next_id_.fetch_add(1);
  s->id = id.str();
  {
    std::unique_lock lock(sessions_mutex_);
    sessions_[s->id] = s;
  }
  return SessionInfo{s->id, s->user_id, s->adapted, s->warning};
}

std::vector<std::string> ChatService::match_entities(const std::string& text) const {
  std::vector<std::string> out;
  if (!system_) return out;
  const auto tokens = corpus::tokenize(text);
  const auto& kg = system_->kg();
  std::set<std::string> found;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (const auto& name : kg.entity_names()) {
      const auto surface = corpus::entity_surface(name);
      if (surface.empty() || i + surface.size() > tokens.size()) continue;
      if (std::equal(surface.begin(), surface.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i)) &&
          found.insert(name).second)
        out.push_back(name);
    }
  }
  return out;
}

std::vector<RecommendedItem> ChatService::top_items(const Session& s, std::size_t k,
                                                    const std::set<int>& exclude) const {
  std::vector<RecommendedItem> out;
  for (const auto& it : intention::recommend(s.state.p_u, s.index, k, exclude))
    out.push_back(RecommendedItem{it.item_id, system_->kg().entity_name(it.item_id), it.probability});
  return out;
}

namespace {

std::set<int> seen_items(const std::vector<Mention>& mentions, const corpus::KnowledgeGraph& kg) {
  std::set<int> out;
  for (const auto& m : mentions)
    if (m.is_item) out.insert(kg.entity(m.entity));
  return out;
}

}  // namespace

ChatResponse ChatService::post_message(const std::string& session_id, const std::string& text,
                                       const std::vector<std::string>& entities) {
  if (!system_) throw ServiceError(503, "model_unavailable", "no model is loaded");
  auto s = find(session_id);
  std::lock_guard lock(s->mu);
  const auto& kg = system_->kg();
  for (const auto& e : entities)
    if (!kg.find_entity(e)) throw ServiceError(400, "unknown_entity", e);

  const int user_turn = static_cast<int>(s->transcript.size());
  Utterance u;
  u.speaker = Speaker::seeker;
  u.turn = user_turn;
  u.text = text;
  u.tokens = corpus::tokenize(text);
  s->transcript.push_back(u);
  log_utterance(*s, u);

  std::vector<std::string> linked = entities;
  for (const auto& e : match_entities(text))
    if (std::find(linked.begin(), linked.end(), e) == linked.end()) linked.push_back(e);
  for (const auto& e : linked) {
    const int id = kg.entity(e);
    s->mentions.push_back(Mention{e, user_turn, kg.is_item(id)});
  }

  const auto& model = *system_->rec;
  corpus::Conversation conv;
  conv.user_id = s->user_id;
  conv.utterances = s->transcript;
  conv.mentions = s->mentions;
  std::vector<int> ids, turns;
  for (const auto& m : corpus::mention_history(conv, user_turn + 1, model.config().history)) {
    ids.push_back(kg.entity(m.entity));
    turns.push_back(m.turn);
  }
  s->state = model.infer(*s->rec_params, s->row, ids, turns, &s->index);
  s->has_state = true;

  std::set<int> exclude;
  if (cfg_.exclude_seen) {
    exclude = seen_items(s->mentions, kg);
    exclude.insert(s->recommended.begin(), s->recommended.end());
  }
  ChatResponse resp;
  resp.session_id = s->id;
  resp.items = top_items(*s, cfg_.default_k, exclude);

  const corpus::Conversation masked = corpus::mask_items(conv, system_->vocab);
  std::vector<int> context;
  for (const auto& utt : masked.utterances) {
    const auto enc = system_->vocab.encode(utt.tokens);
    context.insert(context.end(), enc.begin(), enc.end());
  }
  dial::ModelStepper stepper(*system_->dial, *s->dial_params, context, s->state.p_u);
  const Session& cs = *s;
  const dial::SlotFiller filler = [&cs](const std::set<int>& ex) -> std::optional<int> {
    const auto top = intention::recommend(cs.state.p_u, cs.index, 1, ex);
    if (top.empty()) return std::nullopt;
    return top.front().item_id;
  };
  const dial::Generation g = dial::generate(stepper, system_->vocab, &kg, filler, exclude, cfg_.decode);

  Utterance reply;
  reply.speaker = Speaker::recommender;
  reply.turn = user_turn + 1;
  reply.tokens = g.words;
  reply.text = g.text();
  s->transcript.push_back(reply);
  log_utterance(*s, reply);
  for (int item : g.items) {
    s->mentions.push_back(Mention{kg.entity_name(item), reply.turn, true});
    s->recommended.insert(item);
    resp.filled_items.push_back(kg.entity_name(item));
  }

  resp.text = reply.text;
  resp.truncated = g.truncated;
  resp.style_weights = g.style_weights;
  resp.turn_weights = s->state.mu_o;
  resp.entity_weights = s->state.mu_r;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    resp.entities.push_back(kg.entity_name(ids[i]));
    resp.entity_turns.push_back(turns[i]);
  }
  return resp;
}

std::vector<RecommendedItem> ChatService::get_recommendations(const std::string& session_id, std::size_t k) {
  if (!system_) throw ServiceError(503, "model_unavailable", "no model is loaded");
  if (k < 1) throw ServiceError(400, "bad_request", "k must be >= 1");
  auto s = find(session_id);
  std::lock_guard lock(s->mu);
  if (!s->has_state) {
    s->state = system_->rec->infer(*s->rec_params, s->row, {}, {}, &s->index);
    s->has_state = true;
  }
  std::set<int> exclude;
  if (cfg_.exclude_seen) {
    exclude = seen_items(s->mentions, system_->kg());
    exclude.insert(s->recommended.begin(), s->recommended.end());
  }
  auto items = top_items(*s, k, exclude);
  if (cfg_.exclude_seen)
    for (const auto& it : items) s->recommended.insert(it.entity);
  return items;
}

nlohmann::json ChatService::transcript(const std::string& session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mu);
  nlohmann::json out = nlohmann::json::array();
  for (const auto& u : s->transcript)
    out.push_back({{"speaker", corpus::to_string(u.speaker)}, {"turn", u.turn}, {"text", u.text}});
  return out;
}

nlohmann::json ChatService::health() const {
  nlohmann::json j;
  j["status"] = system_ ? "ok" : "degraded";
  j["checksum"] = system_ ? system_->checksum : "";
  j["config"] = system_ ? system_->summary : nlohmann::json::object();
  std::shared_lock lock(sessions_mutex_);
  j["sessions"] = sessions_.size();
  return j;
}

std::vector<std::string> ChatService::search_entities(const std::string& prefix, std::size_t limit) const {
  std::vector<std::string> out;
  if (!system_ || prefix.empty()) return out;
  const std::string p = lower(prefix);
  for (const auto& name : system_->kg().entity_names())
    if (lower(name).rfind(p, 0) == 0) out.push_back(name);
  std::sort(out.begin(), out.end());
  if (out.size() > limit) out.resize(limit);
  return out;
}

void ChatService::log_utterance(const Session& s, const Utterance& u) const {
  if (cfg_.session_log_dir.empty()) return;
  std::ofstream out(std::filesystem::path(cfg_.session_log_dir) / (s.id + ".jsonl"), std::ios::app);
  out << nlohmann::json{{"session_id", s.id}, {"user_id", s.user_id}, {"speaker", corpus::to_string(u.speaker)},
                        {"turn", u.turn}, {"text", u.text}}
             .dump()
      << "\n";
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& detail) {
  send_json(res, status, {{"error", code}, {"detail", detail}});
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const ServiceError& e) {
    send_error(res, e.status(), e.code(), e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::invalid_argument& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal_error", e.what());
  }
}

nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  nlohmann::json j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw ServiceError(400, "bad_request", "request body must be a JSON object");
  return j;
}

}  // namespace

void register_routes(httplib::Server& server, ChatService& service) {
  const std::string origin = service.config().cors_origin;
  server.set_post_routing_handler([origin](const httplib::Request&, httplib::Response& res) {
    if (origin.empty()) return;
    res.set_header("Access-Control-Allow-Origin", origin);
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
  });
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Post("/api/sessions", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = parse_body(req);
      const auto info = service.create_session(body.value("user_id", std::string("anonymous")),
                                               body.value("adapt", false));
      nlohmann::json out{{"session_id", info.session_id}, {"user_id", info.user_id}, {"adapted", info.adapted}};
      if (!info.warning.empty()) out["warning"] = info.warning;
      send_json(res, 201, out);
    });
  });

  server.Post(R"(/api/sessions/([^/]+)/messages)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = parse_body(req);
      if (!body.contains("text") || !body.at("text").is_string())
        throw ServiceError(400, "bad_request", "field 'text' (string) is required");
      std::vector<std::string> entities;
      if (body.contains("entities")) entities = body.at("entities").get<std::vector<std::string>>();
      send_json(res, 200, service.post_message(req.matches[1], body.at("text"), entities).to_json());
    });
  });

  server.Get(R"(/api/sessions/([^/]+)/recommendations)", [&service](const httplib::Request& req,
                                                                    httplib::Response& res) {
    guarded(res, [&] {
      std::size_t k = service.config().default_k;
      if (req.has_param("k")) {
        const std::string raw = req.get_param_value("k");
        if (raw.empty() || !std::all_of(raw.begin(), raw.end(), ::isdigit) || raw.size() > 6)
          throw ServiceError(400, "bad_request", "k must be a positive integer");
        k = static_cast<std::size_t>(std::stoul(raw));
      }
      const std::string id = req.matches[1];
      nlohmann::json items = nlohmann::json::array();
      int rank = 1;
      for (const auto& it : service.get_recommendations(id, k))
        items.push_back({{"item_id", it.name},
                         {"name", corpus::detokenize(corpus::entity_surface(it.name))},
                         {"score", it.score},
                         {"rank", rank++}});
      send_json(res, 200, {{"session_id", id}, {"items", items}});
    });
  });

  server.Get(R"(/api/sessions/([^/]+)/transcript)", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      send_json(res, 200, {{"session_id", id}, {"transcript", service.transcript(id)}});
    });
  });

  server.Get("/api/health", [&service](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, service.health()); });
  });

  server.Get("/api/entities", [&service](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string prefix = req.has_param("prefix") ? req.get_param_value("prefix") : "";
      send_json(res, 200, {{"entities", service.search_entities(prefix)}});
    });
  });
}

}  // namespace ccrs::service
