#include "ccrs/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <deque>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

namespace ccrs::corpus {

using nlohmann::json;

int KnowledgeGraph::add_entity(const std::string& name, bool is_item) {
  auto it = entity_index_.find(name);
  if (it != entity_index_.end()) {
    if (is_item) item_flags_[static_cast<std::size_t>(it->second)] = 1;
    return it->second;
  }
  const int id = static_cast<int>(entity_names_.size());
  entity_names_.push_back(name);
  entity_index_.emplace(name, id);
  item_flags_.push_back(is_item ? 1 : 0);
  return id;
}

int KnowledgeGraph::add_relation(const std::string& name) {
  auto it = relation_index_.find(name);
  if (it != relation_index_.end()) return it->second;
  const int id = static_cast<int>(relation_names_.size());
  relation_names_.push_back(name);
  relation_index_.emplace(name, id);
  return id;
}

bool KnowledgeGraph::add_triple(const std::string& head, const std::string& relation,
                                const std::string& tail) {
  const int h = add_entity(head);
  const int r = add_relation(relation);
  const int t = add_entity(tail);
  return add_triple(Triple{h, r, t});
}

bool KnowledgeGraph::add_triple(const Triple& t) {
  if (t.head < 0 || t.head >= static_cast<int>(num_entities()) || t.tail < 0 ||
      t.tail >= static_cast<int>(num_entities()) || t.relation < 0 ||
      t.relation >= static_cast<int>(num_relations()))
    throw std::out_of_range("triple references an unknown entity or relation");
  if (!triple_set_.insert(t).second) return false;
  triples_.push_back(t);
  return true;
}

void KnowledgeGraph::set_item(int entity, bool is_item) {
  item_flags_.at(static_cast<std::size_t>(entity)) = is_item ? 1 : 0;
}

std::optional<int> KnowledgeGraph::find_entity(const std::string& name) const {
  auto it = entity_index_.find(name);
  if (it == entity_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> KnowledgeGraph::find_relation(const std::string& name) const {
  auto it = relation_index_.find(name);
  if (it == relation_index_.end()) return std::nullopt;
  return it->second;
}

int KnowledgeGraph::entity(const std::string& name) const {
  auto id = find_entity(name);
  if (!id) throw std::invalid_argument("unknown entity: " + name);
  return *id;
}

std::vector<int> KnowledgeGraph::items() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < item_flags_.size(); ++i)
    if (item_flags_[i]) out.push_back(static_cast<int>(i));
  return out;
}

void KnowledgeGraph::write_tsv(std::ostream& triples_out, std::ostream& items_out) const {
  for (const Triple& t : triples_)
    triples_out << entity_name(t.head) << '\t' << relation_name(t.relation) << '\t' << entity_name(t.tail)
                << '\n';
  for (int e : items()) items_out << entity_name(e) << '\n';
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, '\t')) out.push_back(trim(field));
  return out;
}

}  // namespace

KnowledgeGraph load_kg(std::istream& triples, std::istream* item_markers) {
  KnowledgeGraph kg;
  std::string line;
  std::size_t lineno = 0, records = 0;
  while (std::getline(triples, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_tabs(line);
    if (fields.size() != 3)
      throw ParseError(lineno, "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    for (const auto& f : fields)
      if (f.empty()) throw ParseError(lineno, "empty field");
    kg.add_triple(fields[0], fields[1], fields[2]);
    ++records;
  }
  if (records == 0) throw std::invalid_argument("knowledge graph file contains no triples");
  if (item_markers != nullptr) {
    lineno = 0;
    while (std::getline(*item_markers, line)) {
      ++lineno;
      const std::string name = trim(line);
      if (name.empty()) continue;
      auto id = kg.find_entity(name);
      if (!id) throw ParseError(lineno, "item marker references unknown entity: " + name);
      kg.set_item(*id, true);
    }
  }
  return kg;
}

KnowledgeGraph load_kg_files(const std::string& triples_path, const std::string& items_path) {
  std::ifstream tin(triples_path);
  if (!tin) throw std::runtime_error("cannot open knowledge graph file: " + triples_path);
  if (items_path.empty()) return load_kg(tin);
  std::ifstream iin(items_path);
  if (!iin) throw std::runtime_error("cannot open item marker file: " + items_path);
  return load_kg(tin, &iin);
}

KnowledgeGraph extract_subgraph(const KnowledgeGraph& kg, const std::set<std::string>& seeds, int hops) {
  if (hops < 0) throw std::invalid_argument("hops must be non-negative");
  const std::size_t n = kg.num_entities();
  std::vector<std::vector<int>> undirected(n);
  for (const Triple& t : kg.triples()) {
    undirected[static_cast<std::size_t>(t.head)].push_back(t.tail);
    undirected[static_cast<std::size_t>(t.tail)].push_back(t.head);
  }
  std::vector<int> dist(n, -1);
  std::deque<int> frontier;
  for (const auto& s : seeds) {
    auto id = kg.find_entity(s);
    if (!id) throw std::invalid_argument("seed entity not in graph: " + s);
    if (dist[static_cast<std::size_t>(*id)] < 0) {
      dist[static_cast<std::size_t>(*id)] = 0;
      frontier.push_back(*id);
    }
  }
  while (!frontier.empty()) {
    const int e = frontier.front();
    frontier.pop_front();
    if (dist[static_cast<std::size_t>(e)] >= hops) continue;
    for (int nb : undirected[static_cast<std::size_t>(e)]) {
      if (dist[static_cast<std::size_t>(nb)] >= 0) continue;
      dist[static_cast<std::size_t>(nb)] = dist[static_cast<std::size_t>(e)] + 1;
      frontier.push_back(nb);
    }
  }
  KnowledgeGraph out;
  // Keep the original entity order so indices are stable under identical input.
  for (std::size_t e = 0; e < n; ++e)
    if (dist[e] >= 0) out.add_entity(kg.entity_name(static_cast<int>(e)), kg.is_item(static_cast<int>(e)));
  for (std::size_t r = 0; r < kg.num_relations(); ++r) out.add_relation(kg.relation_name(static_cast<int>(r)));
  for (const Triple& t : kg.triples()) {
    if (dist[static_cast<std::size_t>(t.head)] < 0 || dist[static_cast<std::size_t>(t.tail)] < 0) continue;
    out.add_triple(Triple{out.entity(kg.entity_name(t.head)), t.relation, out.entity(kg.entity_name(t.tail))});
  }
  return out;
}

GraphIndex build_graph_index(const KnowledgeGraph& kg) {
  GraphIndex g;
  g.num_entities = static_cast<int>(kg.num_entities());
  g.num_base_relations = static_cast<int>(kg.num_relations());
  g.edges.reserve(kg.triples().size() * 2 + kg.num_entities());
  for (const Triple& t : kg.triples()) {
    g.edges.push_back(Edge{t.head, t.tail, t.relation});
    g.edges.push_back(Edge{t.tail, t.head, g.inverse_of(t.relation)});
  }
  for (int e = 0; e < g.num_entities; ++e) g.edges.push_back(Edge{e, e, g.self_relation()});
  std::sort(g.edges.begin(), g.edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.target, a.relation, a.source) < std::tie(b.target, b.relation, b.source);
  });
  g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
  g.offsets.assign(static_cast<std::size_t>(g.num_entities) + 1, 0);
  for (const Edge& e : g.edges) ++g.offsets[static_cast<std::size_t>(e.target) + 1];
  for (std::size_t i = 1; i < g.offsets.size(); ++i) g.offsets[i] += g.offsets[i - 1];
  return g;
}

std::vector<std::string> GraphIndex::relation_names(const KnowledgeGraph& kg) const {
  std::vector<std::string> out;
  for (int r = 0; r < num_base_relations; ++r) out.push_back(kg.relation_name(r));
  for (int r = 0; r < num_base_relations; ++r) out.push_back(kg.relation_name(r) + "^-1");
  out.push_back("self");
  return out;
}

std::string to_string(Speaker s) { return s == Speaker::seeker ? "seeker" : "recommender"; }

Speaker speaker_from_string(const std::string& s) {
  if (s == "seeker" || s == "user") return Speaker::seeker;
  if (s == "recommender" || s == "system") return Speaker::recommender;
  throw std::invalid_argument("unknown speaker: " + s);
}

const Utterance* Conversation::utterance_at(int turn) const {
  for (const auto& u : utterances)
    if (u.turn == turn) return &u;
  return nullptr;
}

void validate(const Conversation& conv, const KnowledgeGraph& kg) {
  int prev = -1;
  for (const auto& u : conv.utterances) {
    if (u.turn <= prev) throw std::invalid_argument(conv.conv_id + ": turn indices must strictly increase");
    if (u.tokens.empty()) throw std::invalid_argument(conv.conv_id + ": empty utterance at turn " +
                                                      std::to_string(u.turn));
    prev = u.turn;
  }
  int last = -1;
  for (const auto& m : conv.mentions) {
    if (m.turn < last) throw std::invalid_argument(conv.conv_id + ": mentions not sorted by turn");
    last = m.turn;
    if (!kg.find_entity(m.entity)) throw std::invalid_argument(conv.conv_id + ": unknown entity " + m.entity);
    if (conv.utterance_at(m.turn) == nullptr)
      throw std::invalid_argument(conv.conv_id + ": mention at missing turn " + std::to_string(m.turn));
  }
  for (const auto& t : conv.targets) {
    auto id = kg.find_entity(t.item);
    if (!id || !kg.is_item(*id)) throw std::invalid_argument(conv.conv_id + ": target is not an item: " + t.item);
  }
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(cur);
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c) && ch != '_' && ch != '\'' && ch != '-' && ch != ':') {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return out;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (const auto& t : tokens) {
    const bool punct = t.size() == 1 && std::ispunct(static_cast<unsigned char>(t[0]));
    if (!out.empty() && !punct) out.push_back(' ');
    out += t;
  }
  return out;
}

std::vector<std::string> entity_surface(const std::string& entity_name) {
  std::string s = entity_name;
  // Drop a namespace prefix such as "dbr:" and angle brackets.
  if (!s.empty() && s.front() == '<' && s.back() == '>') s = s.substr(1, s.size() - 2);
  if (auto slash = s.find_last_of('/'); slash != std::string::npos) s = s.substr(slash + 1);
  if (auto colon = s.find(':'); colon != std::string::npos && colon + 1 < s.size()) s = s.substr(colon + 1);
  std::replace(s.begin(), s.end(), '_', ' ');
  return tokenize(s);
}

Vocabulary::Vocabulary() {
  for (const char* t : kReserved) add(t);
}

Vocabulary Vocabulary::build(const std::vector<Conversation>& convs, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& c : convs)
    for (const auto& u : c.utterances)
      for (const auto& t : u.tokens) ++counts[t];
  Vocabulary v;
  for (const auto& [tok, n] : counts)
    if (n >= min_count) v.add(tok);
  return v;
}

int Vocabulary::add(const std::string& token) {
  auto it = index_.find(token);
  if (it != index_.end()) return it->second;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnknown : it->second;
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(token(i));
  return out;
}

json Vocabulary::to_json() const { return json(tokens_); }

Vocabulary Vocabulary::from_json(const json& j) {
  auto toks = j.get<std::vector<std::string>>();
  if (toks.size() < kReserved.size()) throw std::invalid_argument("vocabulary missing reserved tokens");
  for (std::size_t i = 0; i < kReserved.size(); ++i)
    if (toks[i] != kReserved[i]) throw std::invalid_argument("vocabulary reserved token mismatch");
  Vocabulary v;
  for (std::size_t i = kReserved.size(); i < toks.size(); ++i)
    if (v.add(toks[i]) != static_cast<int>(i)) throw std::invalid_argument("duplicate vocabulary token");
  return v;
}

Conversation mask_items(const Conversation& conv, const Vocabulary& vocab) {
  Conversation out = conv;
  const std::string& slot = vocab.slot_token();
  for (auto& u : out.utterances) {
    if (u.speaker != Speaker::recommender) continue;
    for (const auto& m : conv.mentions) {
      if (!m.is_item || m.turn != u.turn) continue;
      const auto span = entity_surface(m.entity);
      if (span.empty()) continue;
      std::vector<std::string> masked;
      masked.reserve(u.tokens.size());
      std::size_t i = 0;
      while (i < u.tokens.size()) {
        if (i + span.size() <= u.tokens.size() &&
            std::equal(span.begin(), span.end(), u.tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
          masked.push_back(slot);
          i += span.size();
        } else {
          masked.push_back(u.tokens[i++]);
        }
      }
      u.tokens = std::move(masked);
    }
    u.text = detokenize(u.tokens);
  }
  return out;
}

std::uint64_t stable_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

Splits split_by_user(const std::vector<Conversation>& convs, const SplitRatios& ratios, std::uint64_t seed) {
  const std::array<double, 3> r = {ratios.train, ratios.valid, ratios.test};
  for (double x : r)
    if (x < 0) throw std::invalid_argument("split ratios must be non-negative");
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");

  std::map<std::string, std::vector<const Conversation*>> by_user;
  for (const auto& c : convs) by_user[c.user_id].push_back(&c);
  std::vector<std::string> users;
  for (const auto& [u, _] : by_user) users.push_back(u);

  Splits out;
  auto place = [&](const std::string& user, int split) {
    static constexpr std::array<const char*, 3> names = {"train", "valid", "test"};
    out.user_split[user] = names[static_cast<std::size_t>(split)];
  };

  int nonempty = 0;
  for (double x : r) nonempty += x > 0 ? 1 : 0;
  if (users.size() == 1) {
    place(users.front(), 0);
  } else {
    if (static_cast<int>(users.size()) < nonempty)
      throw std::invalid_argument("fewer users (" + std::to_string(users.size()) + ") than non-empty splits (" +
                                  std::to_string(nonempty) + ")");
    std::mt19937_64 rng(seed);
    std::shuffle(users.begin(), users.end(), rng);
    const double total = static_cast<double>(convs.size());
    std::array<double, 3> assigned = {0, 0, 0};
    std::array<std::vector<std::string>, 3> members;
    for (const auto& u : users) {
      int best = -1;
      double best_deficit = -1e300;
      for (int s = 0; s < 3; ++s) {
        if (r[static_cast<std::size_t>(s)] <= 0) continue;
        const double deficit = r[static_cast<std::size_t>(s)] * total - assigned[static_cast<std::size_t>(s)];
        if (deficit > best_deficit) {
          best_deficit = deficit;
          best = s;
        }
      }
      assigned[static_cast<std::size_t>(best)] += static_cast<double>(by_user[u].size());
      members[static_cast<std::size_t>(best)].push_back(u);
    }
    // Every split with a positive ratio receives at least one user.
    for (int s = 1; s < 3; ++s) {
      if (r[static_cast<std::size_t>(s)] <= 0 || !members[static_cast<std::size_t>(s)].empty()) continue;
      for (int donor = 0; donor < 3; ++donor) {
        if (members[static_cast<std::size_t>(donor)].size() > 1) {
          members[static_cast<std::size_t>(s)].push_back(members[static_cast<std::size_t>(donor)].back());
          members[static_cast<std::size_t>(donor)].pop_back();
          break;
        }
      }
    }
    for (int s = 0; s < 3; ++s)
      for (const auto& u : members[static_cast<std::size_t>(s)]) place(u, s);
  }

  for (const auto& c : convs) {
    const std::string& split = out.user_split.at(c.user_id);
    if (split == "train")
      out.train.push_back(c);
    else if (split == "valid")
      out.valid.push_back(c);
    else
      out.test.push_back(c);
  }
  return out;
}

json split_manifest(const Splits& splits, const SplitRatios& ratios, std::uint64_t seed) {
  json j;
  j["seed"] = seed;
  j["ratios"] = {{"train", ratios.train}, {"valid", ratios.valid}, {"test", ratios.test}};
  j["users"] = splits.user_split;
  j["counts"] = {{"train", splits.train.size()}, {"valid", splits.valid.size()}, {"test", splits.test.size()}};
  return j;
}

Episode make_episode(const std::vector<Conversation>& user_convs, std::uint64_t seed) {
  if (user_convs.empty()) throw std::invalid_argument("make_episode needs at least one conversation");
  Episode ep;
  ep.user_id = user_convs.front().user_id;
  for (const auto& c : user_convs)
    if (c.user_id != ep.user_id) throw std::invalid_argument("make_episode: mixed user ids");
  std::vector<std::size_t> order(user_convs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ stable_hash(ep.user_id));
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t n_query = (user_convs.size() + 1) / 2;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i < n_query)
      ep.query.push_back(user_convs[order[i]]);
    else
      ep.support.push_back(user_convs[order[i]]);
  }
  return ep;
}

std::vector<Episode> make_episodes(const std::vector<Conversation>& convs, std::uint64_t seed) {
  std::map<std::string, std::vector<Conversation>> by_user;
  for (const auto& c : convs) by_user[c.user_id].push_back(c);
  std::vector<Episode> out;
  for (const auto& [_, cs] : by_user) out.push_back(make_episode(cs, seed));
  return out;
}

std::vector<Mention> mention_history(const Conversation& conv, int turn, const HistoryOptions& opts) {
  std::vector<Mention> out;
  for (const auto& m : conv.mentions) {
    if (m.turn >= turn) continue;
    const Utterance* u = conv.utterance_at(m.turn);
    const bool from_seeker = u == nullptr || u->speaker == Speaker::seeker;
    if (from_seeker ? !opts.seeker : !opts.recommender) continue;
    out.push_back(m);
  }
  std::stable_sort(out.begin(), out.end(), [](const Mention& a, const Mention& b) { return a.turn < b.turn; });
  if (opts.max_length > 0 && out.size() > opts.max_length)
    out.erase(out.begin(), out.end() - static_cast<std::ptrdiff_t>(opts.max_length));
  return out;
}

json to_json(const Conversation& conv) {
  json j;
  j["conv_id"] = conv.conv_id;
  j["user_id"] = conv.user_id;
  j["utterances"] = json::array();
  for (const auto& u : conv.utterances)
    j["utterances"].push_back(
        {{"speaker", to_string(u.speaker)}, {"turn", u.turn}, {"text", u.text}, {"tokens", u.tokens}, {"gold", u.gold}});
  j["mentions"] = json::array();
  for (const auto& m : conv.mentions)
    j["mentions"].push_back({{"entity", m.entity}, {"turn", m.turn}, {"is_item", m.is_item}});
  j["targets"] = json::array();
  for (const auto& t : conv.targets) j["targets"].push_back({{"turn", t.turn}, {"item", t.item}});
  return j;
}

Conversation conversation_from_json(const json& j) {
  Conversation c;
  c.conv_id = j.at("conv_id").get<std::string>();
  c.user_id = j.at("user_id").get<std::string>();
  for (const auto& ju : j.at("utterances")) {
    Utterance u;
    u.speaker = speaker_from_string(ju.at("speaker").get<std::string>());
    u.turn = ju.at("turn").get<int>();
    u.text = ju.value("text", std::string());
    if (ju.contains("tokens"))
      u.tokens = ju.at("tokens").get<std::vector<std::string>>();
    else
      u.tokens = tokenize(u.text);
    u.gold = ju.value("gold", u.speaker == Speaker::recommender);
    c.utterances.push_back(std::move(u));
  }
  if (j.contains("mentions"))
    for (const auto& jm : j.at("mentions"))
      c.mentions.push_back(Mention{jm.at("entity").get<std::string>(), jm.at("turn").get<int>(),
                                   jm.value("is_item", false)});
  if (j.contains("targets"))
    for (const auto& jt : j.at("targets"))
      c.targets.push_back(Target{jt.at("turn").get<int>(), jt.at("item").get<std::string>()});
  std::stable_sort(c.mentions.begin(), c.mentions.end(),
                   [](const Mention& a, const Mention& b) { return a.turn < b.turn; });
  // Multiple targets are ordered by turn.
  std::stable_sort(c.targets.begin(), c.targets.end(),
                   [](const Target& a, const Target& b) { return a.turn < b.turn; });
  return c;
}

std::vector<Conversation> read_conversations(std::istream& in) {
  std::vector<Conversation> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(conversation_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(lineno, e.what());
    } catch (const std::invalid_argument& e) {
      throw ParseError(lineno, e.what());
    }
  }
  return out;
}

std::vector<Conversation> read_conversations_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open conversations file: " + path);
  return read_conversations(in);
}

void write_conversations(std::ostream& out, const std::vector<Conversation>& convs) {
  for (const auto& c : convs) out << to_json(c).dump() << '\n';
}

}  // namespace ccrs::corpus
