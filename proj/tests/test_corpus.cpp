#include "ccrs/corpus.hpp"

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <sstream>

using namespace ccrs;
using namespace ccrs::corpus;

namespace {

KnowledgeGraph kg_from(const std::string& text, const std::string& items = "") {
  std::istringstream t(text), i(items);
  return load_kg(t, items.empty() ? nullptr : &i);
}

Conversation with_mentions(Conversation c, std::vector<Mention> m) {
  c.mentions = std::move(m);
  return c;
}

std::multiset<std::string> conv_ids(const std::vector<Conversation>& convs) {
  std::multiset<std::string> out;
  for (const auto& c : convs) out.insert(c.conv_id);
  return out;
}

}  // namespace

TEST_SUITE("equation") {

TEST_CASE("load_kg parses a single triple") {
  const auto kg = kg_from("A\tr\tB\n");
  CHECK(kg.num_entities() == 2);
  CHECK(kg.num_relations() == 1);
  CHECK(kg.triples().size() == 1);
}

TEST_CASE("load_kg drops duplicate triples") {
  const auto kg = kg_from("A\tr\tB\nA\tr\tB\n");
  CHECK(kg.triples().size() == 1);
}

TEST_CASE("load_kg reports the malformed line") {
  try {
    kg_from("A\tr\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 1);
  }
  try {
    kg_from("A\tr\tB\n\nC\tr\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("load_kg rejects empty input and unknown item markers") {
  CHECK_THROWS(kg_from(""));
  CHECK_THROWS_AS(kg_from("A\tr\tB\n", "Z\n"), ParseError);
  const auto kg = kg_from("A\tr\tB\n", "B\n");
  CHECK(kg.is_item(kg.entity("B")));
  CHECK_FALSE(kg.is_item(kg.entity("A")));
}

TEST_CASE("extract_subgraph with zero hops keeps seeds and their triples") {
  const auto kg = kg_from("A\tr\tB\nB\tr\tC\nC\ts\tA\nC\tr\tD\n");
  const auto sub = extract_subgraph(kg, {"A", "C"}, 0);
  CHECK(sub.num_entities() == 2);
  REQUIRE(sub.triples().size() == 1);
  CHECK(sub.entity_name(sub.triples()[0].head) == "C");
  CHECK(sub.entity_name(sub.triples()[0].tail) == "A");
}

TEST_CASE("extract_subgraph matches breadth-first search") {
  const auto chain = kg_from("A\tr\tB\nB\tr\tC\n");
  const auto sub = extract_subgraph(chain, {"A"}, 1);
  std::set<std::string> names(sub.entity_names().begin(), sub.entity_names().end());
  CHECK(names == std::set<std::string>{"A", "B"});

  SyntheticSpec spec;
  spec.n_users = 3;
  spec.n_items = 10;
  const auto sc = generate_synthetic_corpus(spec);
  for (int hops = 0; hops <= 3; ++hops) {
    const std::set<std::string> seeds = {"movie0", "movie3"};
    const auto s = extract_subgraph(sc.kg, seeds, hops);
    std::set<std::string> got(s.entity_names().begin(), s.entity_names().end());
    CHECK(got == testing::bfs(sc.kg, seeds, hops));
  }
}

TEST_CASE("extract_subgraph on every entity is the identity") {
  const auto kg = kg_from("A\tr\tB\nB\tr\tC\nC\ts\tA\n", "B\n");
  const std::set<std::string> all(kg.entity_names().begin(), kg.entity_names().end());
  const auto sub = extract_subgraph(kg, all, 2);
  CHECK(sub.num_entities() == kg.num_entities());
  std::set<std::tuple<std::string, std::string, std::string>> a, b;
  for (const auto& t : kg.triples())
    a.emplace(kg.entity_name(t.head), kg.relation_name(t.relation), kg.entity_name(t.tail));
  for (const auto& t : sub.triples())
    b.emplace(sub.entity_name(t.head), sub.relation_name(t.relation), sub.entity_name(t.tail));
  CHECK(a == b);
  CHECK(sub.is_item(sub.entity("B")));
}

TEST_CASE("extract_subgraph rejects unknown seeds") {
  const auto kg = kg_from("A\tr\tB\n");
  CHECK_THROWS_WITH_AS(extract_subgraph(kg, {"Q"}, 1), doctest::Contains("Q"), std::invalid_argument);
}

TEST_CASE("subgraph triples are a subset of the input") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  std::set<std::tuple<std::string, std::string, std::string>> all;
  for (const auto& t : sc.kg.triples())
    all.emplace(sc.kg.entity_name(t.head), sc.kg.relation_name(t.relation), sc.kg.entity_name(t.tail));
  const auto sub = extract_subgraph(sc.kg, {"movie5"}, 1);
  for (const auto& t : sub.triples())
    CHECK(all.count({sub.entity_name(t.head), sub.relation_name(t.relation), sub.entity_name(t.tail)}) == 1);
}

TEST_CASE("every entity has a self edge in the graph index") {
  const auto kg = kg_from("A\tr\tB\n", "");
  const auto g = build_graph_index(kg);
  CHECK(g.num_relations() == 3);
  for (int e = 0; e < g.num_entities; ++e) {
    bool self = false;
    for (int j = g.offsets[static_cast<std::size_t>(e)]; j < g.offsets[static_cast<std::size_t>(e) + 1]; ++j) {
      const auto& edge = g.edges[static_cast<std::size_t>(j)];
      CHECK(edge.target == e);
      self = self || (edge.relation == g.self_relation() && edge.source == e);
    }
    CHECK(self);
  }
  // A receives B via the original relation, B receives A via the inverse.
  int inverse_edges = 0;
  for (const auto& edge : g.edges)
    if (edge.relation == g.inverse_of(0)) {
      ++inverse_edges;
      CHECK(edge.target == kg.entity("B"));
      CHECK(edge.source == kg.entity("A"));
    }
  CHECK(inverse_edges == 1);
}

TEST_CASE("mask_items replaces recommender item spans with one slot token") {
  const auto kg = kg_from("Titanic\tgenre\tRomance\nAvatar\tgenre\tScifi\n", "Titanic\nAvatar\n");
  Vocabulary vocab;
  auto c = testing::make_conversation("c", "u", {"hi", "watch Titanic"});
  c = with_mentions(c, {{"Titanic", 1, true}});
  const auto m = mask_items(c, vocab);
  CHECK(m.utterances[1].tokens == std::vector<std::string>{"watch", vocab.slot_token()});
  CHECK(m.mentions == c.mentions);

  auto two = testing::make_conversation("c2", "u", {"hi", "Titanic or Avatar ?"});
  two = with_mentions(two, {{"Titanic", 1, true}, {"Avatar", 1, true}});
  const auto mt = mask_items(two, vocab);
  CHECK(std::count(mt.utterances[1].tokens.begin(), mt.utterances[1].tokens.end(), vocab.slot_token()) == 2);
  CHECK(mt.utterances[1].tokens.size() == 4);

  auto none = testing::make_conversation("c3", "u", {"hello there", "hi"});
  const auto mn = mask_items(none, vocab);
  CHECK(mn.utterances[0].tokens == none.utterances[0].tokens);
  CHECK(mn.utterances[1].tokens == none.utterances[1].tokens);
}

TEST_CASE("mask_items is idempotent") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  Vocabulary vocab;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto once = mask_items(sc.conversations[i], vocab);
    const auto twice = mask_items(once, vocab);
    for (std::size_t u = 0; u < once.utterances.size(); ++u)
      CHECK(once.utterances[u].tokens == twice.utterances[u].tokens);
  }
}

TEST_CASE("vocabulary reserves distinct ids and is bijective") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  const auto v = Vocabulary::build(sc.conversations);
  std::set<int> reserved = {Vocabulary::kPad, Vocabulary::kStart, Vocabulary::kEnd, Vocabulary::kUnknown,
                            Vocabulary::kItemSlot};
  CHECK(reserved.size() == 5);
  std::set<std::string> tokens;
  for (std::size_t i = 0; i < v.size(); ++i) {
    tokens.insert(v.token(static_cast<int>(i)));
    CHECK(v.id(v.token(static_cast<int>(i))) == static_cast<int>(i));
  }
  CHECK(tokens.size() == v.size());
  CHECK(v.id("never-seen-token") == Vocabulary::kUnknown);
  const auto back = Vocabulary::from_json(v.to_json());
  CHECK(back.size() == v.size());
}

TEST_CASE("split_by_user defaults and determinism") {
  SplitRatios r;
  CHECK(r.train == doctest::Approx(0.8));
  CHECK(r.valid == doctest::Approx(0.1));
  CHECK(r.test == doctest::Approx(0.1));
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  const auto a = split_by_user(sc.conversations, r, 17);
  const auto b = split_by_user(sc.conversations, r, 17);
  CHECK(a.user_split == b.user_split);
  CHECK(conv_ids(a.train) == conv_ids(b.train));
}

TEST_CASE("split_by_user with one user puts everything in train") {
  std::vector<Conversation> convs;
  for (int i = 0; i < 3; ++i) convs.push_back(testing::make_conversation("c" + std::to_string(i), "solo", {"hi"}));
  const auto s = split_by_user(convs, {}, 3);
  CHECK(s.train.size() == 3);
  CHECK(s.valid.empty());
  CHECK(s.test.empty());
}

TEST_CASE("split_by_user errors with fewer users than non-empty splits") {
  std::vector<Conversation> convs = {testing::make_conversation("a", "u1", {"hi"}),
                                     testing::make_conversation("b", "u2", {"hi"})};
  CHECK_THROWS_AS(split_by_user(convs, {}, 1), std::invalid_argument);
  CHECK_THROWS_AS(split_by_user(convs, {0.5, 0.5, 0.1}, 1), std::invalid_argument);
}

TEST_CASE("split partition keeps users whole") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  for (std::uint64_t seed : {1u, 2u, 17u}) {
    const auto s = split_by_user(sc.conversations, {0.6, 0.2, 0.2}, seed);
    std::map<std::string, std::set<int>> where;
    std::multiset<std::string> all;
    int idx = 0;
    for (const auto* split : {&s.train, &s.valid, &s.test}) {
      for (const auto& c : *split) {
        where[c.user_id].insert(idx);
        all.insert(c.conv_id);
      }
      ++idx;
    }
    CHECK(all == conv_ids(sc.conversations));
    for (const auto& [_, splits] : where) CHECK(splits.size() == 1);
    // Counts track the requested fractions to within one user's conversations.
    const double n = static_cast<double>(sc.conversations.size());
    CHECK(std::abs(static_cast<double>(s.train.size()) - 0.6 * n) <= 6);
    CHECK(std::abs(static_cast<double>(s.test.size()) - 0.2 * n) <= 6);
  }
}

TEST_CASE("make_episode sizes follow the ceiling rule") {
  auto convs = [](int n) {
    std::vector<Conversation> out;
    for (int i = 0; i < n; ++i) out.push_back(testing::make_conversation("c" + std::to_string(i), "u", {"hi"}));
    return out;
  };
  const auto e4 = make_episode(convs(4), 1);
  CHECK(e4.support.size() == 2);
  CHECK(e4.query.size() == 2);
  const auto e1 = make_episode(convs(1), 1);
  CHECK(e1.support.empty());
  CHECK(e1.query.size() == 1);
  const auto e3 = make_episode(convs(3), 1);
  CHECK(e3.support.size() == 1);
  CHECK(e3.query.size() == 2);
  for (int n = 1; n <= 7; ++n) {
    const auto in = convs(n);
    const auto ep = make_episode(in, 9);
    std::vector<Conversation> both = ep.support;
    both.insert(both.end(), ep.query.begin(), ep.query.end());
    CHECK(conv_ids(both) == conv_ids(in));
    CHECK(conv_ids(make_episode(in, 9).query) == conv_ids(ep.query));
  }
}

TEST_CASE("mention_history filters by turn") {
  auto c = testing::make_conversation("c", "u", {"a", "b", "c", "d", "e", "f"});
  c = with_mentions(c, {{"x", 1, false}, {"y", 3, false}, {"z", 5, true}});
  CHECK(mention_history(c, 0).empty());
  const auto h4 = mention_history(c, 4);
  REQUIRE(h4.size() == 2);
  CHECK(h4[0].turn == 1);
  CHECK(h4[1].turn == 3);
  CHECK(mention_history(c, c.last_turn() + 1).size() == 3);
  for (int t = 0; t <= c.last_turn(); ++t) {
    const auto a = mention_history(c, t), b = mention_history(c, t + 1);
    REQUIRE(a.size() <= b.size());
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("mention_history honours speaker flags and the length cap") {
  auto c = testing::make_conversation("c", "u", {"a", "b", "c", "d"});
  c = with_mentions(c, {{"x", 0, false}, {"y", 1, false}, {"z", 2, false}, {"w", 3, false}});
  HistoryOptions seeker_only;
  seeker_only.recommender = false;
  const auto h = mention_history(c, 4, seeker_only);
  REQUIRE(h.size() == 2);
  CHECK(h[0].entity == "x");
  CHECK(h[1].entity == "z");
  HistoryOptions capped;
  capped.max_length = 2;
  const auto hc = mention_history(c, 4, capped);
  REQUIRE(hc.size() == 2);
  CHECK(hc[0].entity == "z");
  CHECK(hc[1].entity == "w");
}

TEST_CASE("synthetic corpus schema") {
  SyntheticSpec spec;
  spec.n_users = 2;
  spec.n_items = 4;
  const auto sc = generate_synthetic_corpus(spec);
  std::set<std::string> users;
  for (const auto& c : sc.conversations) {
    users.insert(c.user_id);
    REQUIRE_FALSE(c.targets.empty());
    for (const auto& t : c.targets) CHECK(sc.kg.is_item(sc.kg.entity(t.item)));
    CHECK_NOTHROW(validate(c, sc.kg));
  }
  CHECK(users.size() == 2);
}

TEST_CASE("synthetic corpus is byte-identical under a fixed seed") {
  auto dump = [](const SyntheticCorpus& sc) {
    std::ostringstream a, b, c;
    sc.kg.write_tsv(a, b);
    write_conversations(c, sc.conversations);
    return a.str() + b.str() + c.str();
  };
  CHECK(dump(generate_synthetic_corpus(SyntheticSpec{})) == dump(generate_synthetic_corpus(SyntheticSpec{})));
  SyntheticSpec other;
  other.seed = 18;
  CHECK(dump(generate_synthetic_corpus(SyntheticSpec{})) != dump(generate_synthetic_corpus(other)));
}

TEST_CASE("each synthetic item is reachable from exactly one topic") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  REQUIRE(sc.topic_entities.size() == 2);
  std::vector<std::set<std::string>> reach;
  for (const auto& t : sc.topic_entities)
    reach.push_back(testing::bfs(sc.kg, {t}, static_cast<int>(sc.kg.num_entities())));
  for (int item : sc.kg.items()) {
    int n = 0;
    for (const auto& r : reach) n += r.count(sc.kg.entity_name(item)) ? 1 : 0;
    CHECK(n == 1);
  }
}

TEST_CASE("conversation JSON lines round trip") {
  const auto sc = generate_synthetic_corpus(SyntheticSpec{});
  std::stringstream ss;
  write_conversations(ss, sc.conversations);
  const auto back = read_conversations(ss);
  REQUIRE(back.size() == sc.conversations.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].conv_id == sc.conversations[i].conv_id);
    CHECK(back[i].mentions == sc.conversations[i].mentions);
    CHECK(back[i].targets == sc.conversations[i].targets);
  }
  std::istringstream bad("{\"conv_id\": 1}\n");
  CHECK_THROWS_AS(read_conversations(bad), ParseError);
}

}  // TEST_SUITE
