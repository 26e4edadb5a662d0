#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ccrs::metrics {

/// Candidates in ranked order (best first) and the single gold item.
struct RankedResult {
  std::vector<int> candidates;
  int gold = 0;

  /// 1-based rank of the gold item; 0 if it is not among the candidates.
  std::size_t rank() const;
};

double hit_rate(const std::vector<RankedResult>& results, std::size_t k);
double mrr(const std::vector<RankedResult>& results, std::size_t k);
double ndcg(const std::vector<RankedResult>& results, std::size_t k);

using Sentence = std::vector<std::string>;

/// Corpus BLEU with uniform weights up to max_n, brevity penalty, and add-one
/// smoothing of the n-gram counts for n >= 2.
double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int max_n = 4);

/// Harmonic mean of token-multiset precision and recall.
double token_f1(const Sentence& candidate, const Sentence& reference);
/// Mean of token_f1 over aligned pairs.
double token_f1(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references);

/// Distinct n-grams over total n-grams, pooled over the corpus.
double distinct_n(const std::vector<Sentence>& corpus, int n);

/// Flat metric report, e.g. {"HR@10": 0.5, ...}.
using Report = std::map<std::string, double>;

nlohmann::json report_to_json(const Report& report);
std::string report_to_csv(const Report& report);

Report ranking_report(const std::vector<RankedResult>& results, const std::vector<std::size_t>& ks = {10, 50});
Report generation_report(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references);

}  // namespace ccrs::metrics
