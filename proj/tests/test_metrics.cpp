#include "ccrs/metrics.hpp"

#include "support.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace ccrs;
using namespace ccrs::metrics;

namespace {

Sentence words(const std::string& s) {
  Sentence out;
  std::string cur;
  for (char c : s) {
    if (c == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

/// Gold rank from raw scores: one plus the number of items ranked above it
/// (higher score, ties to the lower id).
std::size_t rank_by_count(const std::vector<double>& scores, int gold) {
  std::size_t above = 0;
  for (int i = 0; i < static_cast<int>(scores.size()); ++i) {
    const double s = scores[static_cast<std::size_t>(i)], g = scores[static_cast<std::size_t>(gold)];
    if (s > g || (s == g && i < gold)) ++above;
  }
  return above + 1;
}

}  // namespace

TEST_SUITE("metric_oracle") {

TEST_CASE("ranking metrics equal a brute-force oracle on 1000 random instances") {
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> n_items(1, 60), n_results(1, 15), k_dist(1, 60), coarse(0, 5);
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t k = static_cast<std::size_t>(k_dist(rng));
    std::vector<RankedResult> results;
    std::vector<std::size_t> ranks;
    const int m = n_results(rng);
    for (int r = 0; r < m; ++r) {
      const int n = n_items(rng);
      // Coarse scores make ties common.
      std::vector<double> scores(static_cast<std::size_t>(n));
      for (auto& s : scores) s = coarse(rng);
      const int gold = std::uniform_int_distribution<int>(0, n - 1)(rng);
      std::vector<int> order(static_cast<std::size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
      });
      // Occasionally the gold item is missing from a truncated list.
      if (inst % 7 == 0 && order.size() > 1) order.resize(order.size() / 2);
      results.push_back(RankedResult{order, gold});
      const std::size_t rk = rank_by_count(scores, gold);
      ranks.push_back(rk <= order.size() ? rk : 0);
    }
    double hr = 0.0, rr = 0.0, dcg = 0.0;
    for (std::size_t i = 0; i < ranks.size(); ++i) {
      const std::size_t rk = ranks[i];
      CHECK(rk == results[i].rank());
      if (rk < 1 || rk > k) continue;
      hr += 1.0;
      rr += 1.0 / static_cast<double>(rk);
      dcg += 1.0 / std::log2(static_cast<double>(rk) + 1.0);
    }
    const double n = static_cast<double>(ranks.size());
    CHECK(hit_rate(results, k) == hr / n);
    CHECK(mrr(results, k) == rr / n);
    CHECK(ndcg(results, k) == dcg / n);
  }
}

TEST_CASE("ranking metric bounds and monotonicity") {
  std::mt19937_64 rng(5);
  for (int inst = 0; inst < 200; ++inst) {
    std::vector<RankedResult> results;
    for (int r = 0; r < 10; ++r) {
      std::vector<int> order(30);
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), rng);
      results.push_back(RankedResult{order, std::uniform_int_distribution<int>(0, 29)(rng)});
    }
    for (std::size_t k = 1; k < 30; ++k) {
      CHECK(hit_rate(results, k) <= hit_rate(results, k + 1));
      CHECK(mrr(results, k) <= ndcg(results, k));
      CHECK(ndcg(results, k) <= hit_rate(results, k));
    }
    CHECK(hit_rate(results, 30) == 1.0);
  }
}

TEST_CASE("ranking metric hand values") {
  const std::vector<RankedResult> rs = {{{5, 3, 9}, 3}, {{1, 2}, 7}, {{4}, 4}};
  CHECK(rs[0].rank() == 2);
  CHECK(rs[1].rank() == 0);
  CHECK(hit_rate(rs, 1) == doctest::Approx(1.0 / 3.0));
  CHECK(hit_rate(rs, 2) == doctest::Approx(2.0 / 3.0));
  CHECK(mrr(rs, 10) == doctest::Approx((0.5 + 1.0) / 3.0));
  CHECK(ndcg(rs, 10) == doctest::Approx((1.0 / std::log2(3.0) + 1.0) / 3.0));
  CHECK(hit_rate({}, 5) == 0.0);
  CHECK_THROWS(hit_rate(rs, 0));
  const auto rep = ranking_report(rs, {1, 10});
  CHECK(rep.size() == 6);
  CHECK(rep.at("HR@10") == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("distinct_n hand counts") {
  // bigrams: (a b) (b a) (a b) | (a b) (b c): 5 total, 3 distinct
  CHECK(distinct_n({words("a b a b"), words("a b c")}, 2) == doctest::Approx(3.0 / 5.0));
  // trigrams: (a b a) (b a b) | (a b c): 3 total, 3 distinct
  CHECK(distinct_n({words("a b a b"), words("a b c")}, 3) == doctest::Approx(1.0));
  // unigrams: a b a b a b c -> 7 total, 3 distinct
  CHECK(distinct_n({words("a b a b"), words("a b c")}, 1) == doctest::Approx(3.0 / 7.0));
  CHECK(distinct_n({words("x x x x")}, 2) == doctest::Approx(1.0 / 3.0));
  CHECK(distinct_n({words("a b")}, 3) == 0.0);
  CHECK(distinct_n({}, 2) == 0.0);
  CHECK_THROWS(distinct_n({words("a")}, 0));
}

TEST_CASE("token_f1 hand counts") {
  // overlap {the, cat}: p = 2/3, r = 2/4, f1 = 4/7
  CHECK(token_f1(words("the cat sat"), words("the black cat ran")) == doctest::Approx(4.0 / 7.0));
  // multiset clipping: "a a a" vs "a b" -> overlap 1, p = 1/3, r = 1/2, f1 = 0.4
  CHECK(token_f1(words("a a a"), words("a b")) == doctest::Approx(0.4));
  CHECK(token_f1(words("x y"), words("y x")) == 1.0);
  CHECK(token_f1(words("x"), words("y")) == 0.0);
  CHECK(token_f1(Sentence{}, words("y")) == 0.0);
  CHECK(token_f1(Sentence{}, Sentence{}) == 1.0);
  CHECK(token_f1({words("x"), words("a a a")}, {words("x"), words("a b")}) == doctest::Approx((1.0 + 0.4) / 2.0));
  CHECK_THROWS(token_f1(std::vector<Sentence>{words("x")}, std::vector<Sentence>{}));
}

TEST_CASE("bleu hand values") {
  CHECK(bleu({words("a b c d")}, {words("a b c d")}) == doctest::Approx(1.0));
  // p1 = 3/4, p2 = (2+1)/(3+1), p3 = (1+1)/(2+1), p4 = (0+1)/(1+1)
  const double expect = std::pow(0.75 * 0.75 * (2.0 / 3.0) * 0.5, 0.25);
  CHECK(bleu({words("a b c d")}, {words("a b c e")}) == doctest::Approx(expect).epsilon(1e-12));
  // Brevity: 2-token candidate against a 4-token reference.
  const double p = 1.0 * (2.0 / 2.0) * (1.0 / 1.0) * (1.0 / 1.0);
  CHECK(bleu({words("a b")}, {words("a b c d")}) == doctest::Approx(std::exp(1.0 - 2.0) * std::pow(p, 0.25)));
  CHECK(bleu({words("x y")}, {words("a b")}) == 0.0);
  CHECK(bleu({}, {}) == 0.0);
  CHECK_THROWS(bleu(std::vector<Sentence>{words("a")}, std::vector<Sentence>{}));
  const auto rep = generation_report({words("a b c")}, {words("a b c")});
  CHECK(rep.size() == 5);
  CHECK(rep.at("Dist-2") == doctest::Approx(1.0));
}

TEST_CASE("report serialization") {
  const Report r = {{"HR@10", 0.5}, {"BLEU", 0.25}};
  const auto j = report_to_json(r);
  CHECK(j["HR@10"] == 0.5);
  CHECK(report_to_csv(r) == "metric,value\nBLEU,0.25\nHR@10,0.5\n");
}

}  // TEST_SUITE
