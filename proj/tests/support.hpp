#pragma once

// Test-side helpers: finite-difference gradient checks, brute-force oracles
// and small fixtures. Nothing here calls the library code it is used to check.

#include "ccrs/corpus.hpp"
#include "ccrs/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace ccrs::testing {

struct GradReport {
  double max_rel = 0.0;
  std::string worst_group;
  std::size_t checked = 0;
};

/// Central differences on every entry of the listed groups (all groups if
/// empty). Relative error per entry is |a - n| / max(|a|, |n|, floor).
inline GradReport fd_check(const ParamSet& params, const ParamSet& analytic,
                           const std::function<double(const ParamSet&)>& loss, double eps = 1e-4,
                           const std::vector<std::string>& groups = {}, double floor = 1e-6,
                           std::size_t max_entries_per_group = 0, std::uint64_t seed = 5) {
  GradReport rep;
  ParamSet p = params;
  std::mt19937_64 rng(seed);
  const std::vector<std::string> names = groups.empty() ? params.names() : groups;
  for (const auto& name : names) {
    Matrix& m = p.at(name);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    if (max_entries_per_group > 0 && idx.size() > max_entries_per_group) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_entries_per_group);
    }
    for (Eigen::Index i : idx) {
      const double orig = m.data()[i];
      m.data()[i] = orig + eps;
      const double up = loss(p);
      m.data()[i] = orig - eps;
      const double down = loss(p);
      m.data()[i] = orig;
      const double num = (up - down) / (2.0 * eps);
      const double ana = analytic.at(name).data()[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > rep.max_rel) {
        rep.max_rel = rel;
        rep.worst_group = name;
      }
      ++rep.checked;
    }
  }
  return rep;
}

/// exp(x_i) / sum_j exp(x_j), computed naively in long double.
inline std::vector<double> naive_softmax(const std::vector<double>& x) {
  long double z = 0;
  for (double v : x) z += std::exp(static_cast<long double>(v));
  std::vector<double> out;
  for (double v : x) out.push_back(static_cast<double>(std::exp(static_cast<long double>(v)) / z));
  return out;
}

/// 1-based rank of `gold` found by scanning the candidate list.
inline std::size_t scan_rank(const std::vector<int>& ranked, int gold) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i] == gold) return i + 1;
  return ranked.size() + 1;
}

/// Entities reachable from `start` within `hops` undirected edges, by BFS.
inline std::set<std::string> bfs(const corpus::KnowledgeGraph& kg, const std::set<std::string>& start, int hops) {
  std::map<std::string, std::set<std::string>> adj;
  for (const auto& t : kg.triples()) {
    adj[kg.entity_name(t.head)].insert(kg.entity_name(t.tail));
    adj[kg.entity_name(t.tail)].insert(kg.entity_name(t.head));
  }
  std::set<std::string> seen = start, frontier = start;
  for (int h = 0; h < hops; ++h) {
    std::set<std::string> next;
    for (const auto& e : frontier)
      for (const auto& n : adj[e])
        if (seen.insert(n).second) next.insert(n);
    frontier = next;
  }
  return seen;
}

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

/// Seeker/recommender conversation with one utterance per turn.
inline corpus::Conversation make_conversation(const std::string& id, const std::string& user,
                                              const std::vector<std::string>& texts) {
  corpus::Conversation c;
  c.conv_id = id;
  c.user_id = user;
  for (std::size_t t = 0; t < texts.size(); ++t) {
    corpus::Utterance u;
    u.speaker = t % 2 == 0 ? corpus::Speaker::seeker : corpus::Speaker::recommender;
    u.turn = static_cast<int>(t);
    u.text = texts[t];
    u.tokens = corpus::tokenize(texts[t]);
    u.gold = u.speaker == corpus::Speaker::recommender;
    c.utterances.push_back(u);
  }
  return c;
}

}  // namespace ccrs::testing
