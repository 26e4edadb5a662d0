#include "ccrs/metrics.hpp"

#include "ccrs/log.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ccrs::metrics {

std::size_t RankedResult::rank() const {
  auto it = std::find(candidates.begin(), candidates.end(), gold);
  return it == candidates.end() ? 0 : static_cast<std::size_t>(it - candidates.begin()) + 1;
}

namespace {

template <typename Gain>
double mean_gain(const std::vector<RankedResult>& results, std::size_t k, Gain gain) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (results.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : results) {
    const std::size_t rank = r.rank();
    if (rank >= 1 && rank <= k) s += gain(rank);
  }
  return s / static_cast<double>(results.size());
}

using NgramCounts = std::map<Sentence, std::size_t>;

NgramCounts ngrams(const Sentence& s, int n) {
  NgramCounts out;
  const auto un = static_cast<std::size_t>(n);
  if (s.size() < un) return out;
  for (std::size_t i = 0; i + un <= s.size(); ++i)
    ++out[Sentence(s.begin() + static_cast<std::ptrdiff_t>(i), s.begin() + static_cast<std::ptrdiff_t>(i + un))];
  return out;
}

}  // namespace

double hit_rate(const std::vector<RankedResult>& results, std::size_t k) {
  return mean_gain(results, k, [](std::size_t) { return 1.0; });
}

double mrr(const std::vector<RankedResult>& results, std::size_t k) {
  return mean_gain(results, k, [](std::size_t rank) { return 1.0 / static_cast<double>(rank); });
}

double ndcg(const std::vector<RankedResult>& results, std::size_t k) {
  return mean_gain(results, k, [](std::size_t rank) { return 1.0 / std::log2(static_cast<double>(rank) + 1.0); });
}

double bleu(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references, int max_n) {
  if (candidates.size() != references.size()) throw std::invalid_argument("bleu: candidate/reference count mismatch");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  if (candidates.empty()) {
    log::warn("bleu: empty candidate corpus, returning 0");
    return 0.0;
  }
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0), totals(static_cast<std::size_t>(max_n), 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<double>(candidates[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto c = ngrams(candidates[i], n);
      const auto r = ngrams(references[i], n);
      for (const auto& [g, cnt] : c) {
        auto it = r.find(g);
        const std::size_t clip = it == r.end() ? 0 : std::min(cnt, it->second);
        matches[static_cast<std::size_t>(n - 1)] += static_cast<double>(clip);
        totals[static_cast<std::size_t>(n - 1)] += static_cast<double>(cnt);
      }
    }
  }
  if (cand_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    double m = matches[static_cast<std::size_t>(n - 1)], t = totals[static_cast<std::size_t>(n - 1)];
    if (n >= 2) {
      m += 1.0;
      t += 1.0;
    }
    if (m == 0.0 || t == 0.0) return 0.0;
    log_p += std::log(m / t) / static_cast<double>(max_n);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_p);
}

double token_f1(const Sentence& candidate, const Sentence& reference) {
  if (candidate.empty() || reference.empty()) return candidate.empty() && reference.empty() ? 1.0 : 0.0;
  std::map<std::string, std::size_t> ref_counts;
  for (const auto& t : reference) ++ref_counts[t];
  std::size_t overlap = 0;
  for (const auto& t : candidate) {
    auto it = ref_counts.find(t);
    if (it != ref_counts.end() && it->second > 0) {
      ++overlap;
      --it->second;
    }
  }
  if (overlap == 0) return 0.0;
  const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size());
  const double r = static_cast<double>(overlap) / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

double token_f1(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references) {
  if (candidates.size() != references.size()) throw std::invalid_argument("token_f1: count mismatch");
  if (candidates.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) s += token_f1(candidates[i], references[i]);
  return s / static_cast<double>(candidates.size());
}

double distinct_n(const std::vector<Sentence>& corpus, int n) {
  if (n < 1) throw std::invalid_argument("distinct_n: n must be >= 1");
  NgramCounts all;
  std::size_t total = 0;
  for (const auto& s : corpus)
    for (const auto& [g, cnt] : ngrams(s, n)) {
      all[g] += cnt;
      total += cnt;
    }
  if (total == 0) {
    log::warn("distinct_n: no sentence has " + std::to_string(n) + " tokens, returning 0");
    return 0.0;
  }
  return static_cast<double>(all.size()) / static_cast<double>(total);
}

nlohmann::json report_to_json(const Report& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : report) j[k] = v;
  return j;
}

std::string report_to_csv(const Report& report) {
  std::ostringstream out;
  out << "metric,value\n";
  out.precision(10);
  for (const auto& [k, v] : report) out << k << ',' << v << '\n';
  return out.str();
}

Report ranking_report(const std::vector<RankedResult>& results, const std::vector<std::size_t>& ks) {
  Report r;
  for (std::size_t k : ks) {
    const std::string suffix = "@" + std::to_string(k);
    r["HR" + suffix] = hit_rate(results, k);
    r["MRR" + suffix] = mrr(results, k);
    r["NDCG" + suffix] = ndcg(results, k);
  }
  return r;
}

Report generation_report(const std::vector<Sentence>& candidates, const std::vector<Sentence>& references) {
  Report r;
  r["BLEU"] = bleu(candidates, references);
  r["F1"] = token_f1(candidates, references);
  for (int n = 2; n <= 4; ++n) r["Dist-" + std::to_string(n)] = distinct_n(candidates, n);
  return r;
}

}  // namespace ccrs::metrics
