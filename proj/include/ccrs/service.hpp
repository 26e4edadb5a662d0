#pragma once

// Session-scoped chat service over a read-only System, plus its HTTP front.

#include "ccrs/dialogue.hpp"
#include "ccrs/intention.hpp"
#include "ccrs/system.hpp"

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace httplib {
class Server;
}

namespace ccrs::service {

/// Error with an HTTP status and a short machine-readable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& detail)
      : std::runtime_error(detail), status_(status), code_(std::move(code)) {}
  int status() const { return status_; }
  const std::string& code() const { return code_; }

 private:
  int status_;
  std::string code_;
};

struct ServiceConfig {
  std::size_t default_k = 5;
  /// Drop items the user mentioned or was already recommended.
  bool exclude_seen = true;
  dial::DecodeOptions decode;
  std::string cors_origin = "*";
  /// Per-session JSON-lines transcript logs are written here when set.
  std::string session_log_dir;
};

struct RecommendedItem {
  int entity = 0;
  std::string name;
  double score = 0.0;
};

struct ChatResponse {
  std::string session_id;
  std::string text;
  std::vector<RecommendedItem> items;
  Vector style_weights;
  Vector turn_weights;    // mu^o
  Vector entity_weights;  // mu^r
  std::vector<std::string> entities;  // aligned with the weights
  std::vector<int> entity_turns;
  std::vector<std::string> filled_items;
  bool truncated = false;

  nlohmann::json to_json() const;
};

struct SessionInfo {
  std::string session_id;
  std::string user_id;
  bool adapted = false;
  std::string warning;
};

class ChatService {
 public:
  /// `system` may be null, in which case the service reports "degraded".
  ChatService(std::shared_ptr<const System> system, ServiceConfig cfg = {});
  ~ChatService();

  SessionInfo create_session(const std::string& user_id, bool adapt);
  ChatResponse post_message(const std::string& session_id, const std::string& text,
                            const std::vector<std::string>& entities = {});
  std::vector<RecommendedItem> get_recommendations(const std::string& session_id, std::size_t k);
  nlohmann::json transcript(const std::string& session_id) const;
  nlohmann::json health() const;
  /// Entity names starting with `prefix` (case-insensitive), sorted, capped.
  std::vector<std::string> search_entities(const std::string& prefix, std::size_t limit = 20) const;
  /// Entities whose surface tokens occur as a contiguous span of `text`.
  std::vector<std::string> match_entities(const std::string& text) const;

  const ServiceConfig& config() const { return cfg_; }
  bool loaded() const { return system_ != nullptr; }

 private:
  struct Session;
  std::shared_ptr<Session> find(const std::string& id) const;
  std::vector<RecommendedItem> top_items(const Session& s, std::size_t k, const std::set<int>& exclude) const;
  void log_utterance(const Session& s, const corpus::Utterance& u) const;

  std::shared_ptr<const System> system_;
  ServiceConfig cfg_;
  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<std::uint64_t> next_id_{1};
};

/// Binds the service API onto an httplib server.
void register_routes(httplib::Server& server, ChatService& service);

}  // namespace ccrs::service
