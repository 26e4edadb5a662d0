#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs::corpus {

/// Input error carrying the 1-based line number of the offending record.
class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct Triple {
  int head = 0;
  int relation = 0;
  int tail = 0;
  auto operator<=>(const Triple&) const = default;
};

/// Entity/relation vocabularies plus deduplicated directed typed triples.
/// Entities and relations are addressed by dense indices; names are the
/// stable identifiers used in files and conversations.
class KnowledgeGraph {
 public:
  int add_entity(const std::string& name, bool is_item = false);
  int add_relation(const std::string& name);
  /// Adds (head, relation, tail) by name, creating entities/relations as needed.
  /// Returns false if the triple already existed.
  bool add_triple(const std::string& head, const std::string& relation, const std::string& tail);
  bool add_triple(const Triple& t);
  void set_item(int entity, bool is_item);

  std::size_t num_entities() const { return entity_names_.size(); }
  std::size_t num_relations() const { return relation_names_.size(); }
  const std::vector<Triple>& triples() const { return triples_; }

  std::optional<int> find_entity(const std::string& name) const;
  std::optional<int> find_relation(const std::string& name) const;
  int entity(const std::string& name) const;
  const std::string& entity_name(int id) const { return entity_names_.at(static_cast<std::size_t>(id)); }
  const std::string& relation_name(int id) const { return relation_names_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& entity_names() const { return entity_names_; }
  const std::vector<std::string>& relation_names() const { return relation_names_; }

  bool is_item(int entity) const { return item_flags_.at(static_cast<std::size_t>(entity)) != 0; }
  /// Item entity indices in ascending order.
  std::vector<int> items() const;

  void write_tsv(std::ostream& triples_out, std::ostream& items_out) const;

 private:
  std::vector<std::string> entity_names_;
  std::unordered_map<std::string, int> entity_index_;
  std::vector<std::string> relation_names_;
  std::unordered_map<std::string, int> relation_index_;
  std::vector<Triple> triples_;
  std::set<Triple> triple_set_;
  std::vector<char> item_flags_;
};

/// `head \t relation \t tail` lines; optional item-marker stream with one
/// entity name per line. Blank lines are skipped.
KnowledgeGraph load_kg(std::istream& triples, std::istream* item_markers = nullptr);
KnowledgeGraph load_kg_files(const std::string& triples_path, const std::string& items_path = "");

/// Induced subgraph on every entity within `hops` undirected edges of a seed.
KnowledgeGraph extract_subgraph(const KnowledgeGraph& kg, const std::set<std::string>& seeds, int hops);

/// Neighbor view used by the entity encoder. Relation ids are extended:
/// [0, R) original (neighbor is the tail of an outgoing triple),
/// [R, 2R) inverse (neighbor is the head of an incoming triple),
/// 2R the reserved self-loop relation.
struct Edge {
  int target = 0;    // entity being updated
  int source = 0;    // neighbor whose message is aggregated
  int relation = 0;  // extended relation id
  auto operator<=>(const Edge&) const = default;
};

struct GraphIndex {
  int num_entities = 0;
  int num_base_relations = 0;
  /// Sorted by (target, relation, source); every entity has its self edge.
  std::vector<Edge> edges;
  /// edges[offsets[e] .. offsets[e+1]) are the incoming edges of e.
  std::vector<int> offsets;

  int num_relations() const { return 2 * num_base_relations + 1; }
  int self_relation() const { return 2 * num_base_relations; }
  int inverse_of(int relation) const { return relation + num_base_relations; }
  std::vector<std::string> relation_names(const KnowledgeGraph& kg) const;
};

GraphIndex build_graph_index(const KnowledgeGraph& kg);

enum class Speaker { seeker, recommender };

std::string to_string(Speaker s);
Speaker speaker_from_string(const std::string& s);

struct Utterance {
  Speaker speaker = Speaker::seeker;
  int turn = 0;
  std::string text;
  std::vector<std::string> tokens;
  bool gold = false;
};

struct Mention {
  std::string entity;
  int turn = 0;
  bool is_item = false;
  bool operator==(const Mention&) const = default;
};

struct Target {
  int turn = 0;
  std::string item;
  bool operator==(const Target&) const = default;
};

struct Conversation {
  std::string conv_id;
  std::string user_id;
  std::vector<Utterance> utterances;
  std::vector<Mention> mentions;
  std::vector<Target> targets;

  int last_turn() const { return utterances.empty() ? -1 : utterances.back().turn; }
  const Utterance* utterance_at(int turn) const;
};

/// Checks the structural invariants against a graph; throws std::invalid_argument.
void validate(const Conversation& conv, const KnowledgeGraph& kg);

struct Episode {
  std::string user_id;
  std::vector<Conversation> support;
  std::vector<Conversation> query;
};

/// Lower-cased whitespace tokenization with punctuation split off.
std::vector<std::string> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::string>& tokens);
/// Surface tokens of an entity name ("Leonardo_DiCaprio" -> leonardo dicaprio).
std::vector<std::string> entity_surface(const std::string& entity_name);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kUnknown = 3;
  static constexpr int kItemSlot = 4;
  static constexpr std::array<const char*, 5> kReserved = {"__pad__", "__start__", "__end__", "__unk__",
                                                           "__item__"};

  Vocabulary();
  /// Adds every token of every utterance (sorted, so the result is order independent).
  static Vocabulary build(const std::vector<Conversation>& convs, std::size_t min_count = 1);

  int add(const std::string& token);
  int id(const std::string& token) const;  // unknown-word id if absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::string& slot_token() const { return tokens_[kItemSlot]; }

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Replaces each item mention's surface span in recommender utterances with
/// one item-slot token. Mentions are untouched.
Conversation mask_items(const Conversation& conv, const Vocabulary& vocab);

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

struct Splits {
  std::vector<Conversation> train;
  std::vector<Conversation> valid;
  std::vector<Conversation> test;
  std::map<std::string, std::string> user_split;  // user_id -> "train"|"valid"|"test"
};

Splits split_by_user(const std::vector<Conversation>& convs, const SplitRatios& ratios, std::uint64_t seed);

nlohmann::json split_manifest(const Splits& splits, const SplitRatios& ratios, std::uint64_t seed);

/// query = ceil(n/2) conversations, support = the rest; shuffled under seed.
Episode make_episode(const std::vector<Conversation>& user_convs, std::uint64_t seed);
/// One episode per user, ordered by user id.
std::vector<Episode> make_episodes(const std::vector<Conversation>& convs, std::uint64_t seed);

struct HistoryOptions {
  bool seeker = true;
  bool recommender = true;
  std::size_t max_length = 50;  // most recent kept
};

/// Mentions strictly before `turn`, in (turn, occurrence) order.
std::vector<Mention> mention_history(const Conversation& conv, int turn, const HistoryOptions& opts = {});

struct SyntheticSpec {
  int n_users = 20;
  int n_items = 40;
  int n_relations = 3;  // genre plus (n_relations - 1) attribute relations
  int topics = 2;
  std::uint64_t seed = 17;
  int convs_per_user = 6;
  double favorite_topic_prob = 0.8;
};

struct SyntheticCorpus {
  KnowledgeGraph kg;
  std::vector<Conversation> conversations;
  /// topic entity name for each topic index
  std::vector<std::string> topic_entities;
};

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec);

// JSON-lines conversation I/O.
nlohmann::json to_json(const Conversation& conv);
Conversation conversation_from_json(const nlohmann::json& j);
std::vector<Conversation> read_conversations(std::istream& in);
std::vector<Conversation> read_conversations_file(const std::string& path);
void write_conversations(std::ostream& out, const std::vector<Conversation>& convs);

/// Stable 64-bit FNV-1a hash, used to derive per-user seeds.
std::uint64_t stable_hash(const std::string& s);

}  // namespace ccrs::corpus
