#include "ccrs/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ccrs::corpus {

namespace {

struct TopicStyle {
  const char* name;
  const char* pitch;
  const char* closing;
};

constexpr TopicStyle kStyles[] = {
    {"horror", "it is so scary , i would not watch it alone at night !", "sleep with the lights on !"},
    {"romance", "it is a touching love story with a happy ending .", "bring some tissues , it is a tear jerker !"},
    {"comedy", "it is hilarious , you will laugh all night .", "enjoy the laughs !"},
    {"action", "it is full of explosions and fast chases !", "hold on to your seat !"},
    {"scifi", "it has amazing space battles and robots .", "may the stars guide you !"},
    {"drama", "it is a powerful and moving story .", "it will make you think ."},
    {"thriller", "it keeps you guessing until the very end .", "watch it with the door locked ."},
    {"animation", "it is colorful and fun for the whole family .", "grab some popcorn for the kids !"},
};
constexpr int kNumStyles = static_cast<int>(sizeof(kStyles) / sizeof(kStyles[0]));

struct AttributeRelation {
  const char* relation;
  const char* prefix;
};

constexpr AttributeRelation kAttributes[] = {
    {"starring", "actor"}, {"directed_by", "director"}, {"written_by", "writer"},
    {"produced_by", "producer"}, {"music_by", "composer"},
};
constexpr int kNumAttributes = static_cast<int>(sizeof(kAttributes) / sizeof(kAttributes[0]));

std::string topic_name(int t) {
  return t < kNumStyles ? std::string(kStyles[t].name) : "topic" + std::to_string(t);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

Utterance make_utterance(Speaker s, int turn, const std::string& text) {
  Utterance u;
  u.speaker = s;
  u.turn = turn;
  u.text = text;
  u.tokens = tokenize(text);
  u.gold = s == Speaker::recommender;
  return u;
}

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const SyntheticSpec& spec) {
  if (spec.n_users < 1 || spec.n_items < 1 || spec.n_relations < 1 || spec.topics < 1 || spec.convs_per_user < 1)
    throw std::invalid_argument("synthetic corpus counts must be >= 1");
  const int n_attr = std::min(spec.n_relations - 1, kNumAttributes);
  std::mt19937_64 rng(spec.seed);
  SyntheticCorpus out;
  KnowledgeGraph& kg = out.kg;

  for (int t = 0; t < spec.topics; ++t) {
    out.topic_entities.push_back(topic_name(t));
    kg.add_entity(topic_name(t));
  }
  kg.add_relation("genre");
  for (int a = 0; a < n_attr; ++a) kg.add_relation(kAttributes[a].relation);

  // Items are dealt round-robin to topics. Within a topic, the attribute
  // values are the mixed-radix digits of the item's rank, so every item has a
  // unique attribute combination.
  std::vector<int> per_topic(static_cast<std::size_t>(spec.topics), 0);
  for (int i = 0; i < spec.n_items; ++i) ++per_topic[static_cast<std::size_t>(i % spec.topics)];
  std::vector<int> radix(static_cast<std::size_t>(spec.topics), 1);
  for (int t = 0; t < spec.topics && n_attr > 0; ++t) {
    const double n_t = per_topic[static_cast<std::size_t>(t)];
    int base = static_cast<int>(std::ceil(std::pow(n_t, 1.0 / n_attr) - 1e-9));
    radix[static_cast<std::size_t>(t)] = std::max(base, 1);
  }
  int attr_counter = 0;
  // attr_entity[t][a][v] -> entity name
  std::vector<std::vector<std::vector<std::string>>> attr_entity(static_cast<std::size_t>(spec.topics));
  for (int t = 0; t < spec.topics; ++t) {
    attr_entity[static_cast<std::size_t>(t)].resize(static_cast<std::size_t>(n_attr));
    for (int a = 0; a < n_attr; ++a) {
      const int radix_t = radix[static_cast<std::size_t>(t)];
      // Only as many values as the digit actually takes.
      long long span = 1;
      for (int b = 0; b < a; ++b) span *= radix_t;
      const long long max_rank = per_topic[static_cast<std::size_t>(t)] - 1;
      const int values = static_cast<int>(std::min<long long>(radix_t, max_rank / span + 1));
      for (int v = 0; v < values; ++v) {
        std::string name = std::string(kAttributes[a].prefix) + std::to_string(attr_counter++);
        kg.add_entity(name);
        attr_entity[static_cast<std::size_t>(t)][static_cast<std::size_t>(a)].push_back(name);
      }
    }
  }

  struct ItemInfo {
    std::string name;
    int topic;
    std::vector<std::string> attrs;
  };
  std::vector<ItemInfo> items;
  std::vector<std::vector<int>> topic_items(static_cast<std::size_t>(spec.topics));
  std::vector<int> rank_in_topic(static_cast<std::size_t>(spec.topics), 0);
  for (int i = 0; i < spec.n_items; ++i) {
    ItemInfo info;
    info.name = "movie" + std::to_string(i);
    info.topic = i % spec.topics;
    int rank = rank_in_topic[static_cast<std::size_t>(info.topic)]++;
    kg.add_entity(info.name, true);
    kg.add_triple(info.name, "genre", topic_name(info.topic));
    for (int a = 0; a < n_attr; ++a) {
      const int radix_t = radix[static_cast<std::size_t>(info.topic)];
      const int digit = rank % radix_t;
      rank /= radix_t;
      const auto& name = attr_entity[static_cast<std::size_t>(info.topic)][static_cast<std::size_t>(a)]
                                    [static_cast<std::size_t>(digit)];
      kg.add_triple(info.name, kAttributes[a].relation, name);
      info.attrs.push_back(name);
    }
    topic_items[static_cast<std::size_t>(info.topic)].push_back(i);
    items.push_back(std::move(info));
  }

  // Items are dealt round-robin, so only the first min(topics, items) topics own items.
  const int active_topics = std::min(spec.topics, spec.n_items);
  for (int u = 0; u < spec.n_users; ++u) {
    const std::string user = "user" + std::to_string(u);
    const int favorite = u % active_topics;
    // Users differ in which attribute they bring up first.
    std::vector<int> attr_order(static_cast<std::size_t>(n_attr));
    for (int a = 0; a < n_attr; ++a) attr_order[static_cast<std::size_t>(a)] = a;
    std::shuffle(attr_order.begin(), attr_order.end(), rng);

    for (int c = 0; c < spec.convs_per_user; ++c) {
      int topic = favorite;
      if (active_topics > 1 && std::uniform_real_distribution<double>(0, 1)(rng) >= spec.favorite_topic_prob) {
        topic = uniform_int(rng, 0, active_topics - 2);
        if (topic >= favorite) ++topic;
      }
      const auto& pool = topic_items[static_cast<std::size_t>(topic)];
      const int target_index = pool[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pool.size()) - 1))];
      const ItemInfo& target = items[static_cast<std::size_t>(target_index)];
      const ItemInfo* noise = nullptr;
      if (spec.n_items > 1) {
        int k = uniform_int(rng, 0, spec.n_items - 2);
        if (k >= target_index) ++k;
        noise = &items[static_cast<std::size_t>(k)];
      }
      const TopicStyle& style = kStyles[target.topic % kNumStyles];
      const std::string tname = topic_name(target.topic);

      Conversation conv;
      conv.conv_id = user + "_c" + std::to_string(c);
      conv.user_id = user;
      int turn = 0;
      if (noise != nullptr) {
        conv.utterances.push_back(make_utterance(Speaker::seeker, turn, "hi ! i watched " + noise->name + " last week ."));
        conv.mentions.push_back(Mention{noise->name, turn, true});
      } else {
        conv.utterances.push_back(make_utterance(Speaker::seeker, turn, "hi !"));
      }
      ++turn;
      conv.utterances.push_back(make_utterance(Speaker::recommender, turn++, "hello ! what kind of movies do you like ?"));
      conv.utterances.push_back(make_utterance(Speaker::seeker, turn, "i am in the mood for " + tname + " movies ."));
      conv.mentions.push_back(Mention{tname, turn, false});
      ++turn;
      conv.utterances.push_back(
          make_utterance(Speaker::recommender, turn++, "great choice ! who do you like to watch ?"));
      if (n_attr > 0) {
        std::string text = "i really like";
        for (std::size_t k = 0; k < attr_order.size(); ++k) {
          const auto& name = target.attrs[static_cast<std::size_t>(attr_order[k])];
          text += (k == 0 ? " " : " and ") + name;
        }
        conv.utterances.push_back(make_utterance(Speaker::seeker, turn, text + " ."));
        for (int a : attr_order) conv.mentions.push_back(Mention{target.attrs[static_cast<std::size_t>(a)], turn, false});
      } else {
        conv.utterances.push_back(make_utterance(Speaker::seeker, turn, "anything good is fine ."));
      }
      ++turn;
      conv.utterances.push_back(
          make_utterance(Speaker::recommender, turn, "you should watch " + target.name + " , " + style.pitch));
      conv.mentions.push_back(Mention{target.name, turn, true});
      conv.targets.push_back(Target{turn, target.name});
      ++turn;
      conv.utterances.push_back(make_utterance(Speaker::seeker, turn++, "thanks , i will check it out ."));
      conv.utterances.push_back(make_utterance(Speaker::recommender, turn++, style.closing));
      out.conversations.push_back(std::move(conv));
    }
  }
  return out;
}

}  // namespace ccrs::corpus
