#include "aspectrec/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace aspectrec {

ExtractionMetrics precision_recall_f1(const std::vector<std::string>& pred,
                                      const std::vector<std::string>& truth) {
  if (pred.empty()) throw EvalError("precision_recall_f1: empty prediction");
  if (truth.empty()) throw EvalError("precision_recall_f1: empty truth");
  std::unordered_set<std::string> truth_set(truth.begin(), truth.end());
  std::size_t hits = 0;
  std::unordered_set<std::string> seen;
  for (const std::string& p : pred)
    if (seen.insert(p).second && truth_set.count(p)) ++hits;
  ExtractionMetrics m;
  m.precision_at_k = static_cast<double>(hits) / static_cast<double>(pred.size());
  m.recall_at_k = static_cast<double>(hits) / static_cast<double>(truth_set.size());
  m.f1 = (m.precision_at_k + m.recall_at_k) > 0
             ? 2.0 * m.precision_at_k * m.recall_at_k /
                   (m.precision_at_k + m.recall_at_k)
             : 0.0;
  return m;
}

std::pair<double, double> rmse_mae(
    const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.empty()) throw EvalError("rmse_mae: empty sample");
  double sq = 0.0, ab = 0.0;
  for (const auto& [y, yhat] : pairs) {
    const double d = y - yhat;
    sq += d * d;
    ab += std::abs(d);
  }
  const double n = static_cast<double>(pairs.size());
  return {std::sqrt(sq / n), ab / n};
}

double auc(const std::vector<std::pair<double, double>>& rating_score_pairs) {
  if (rating_score_pairs.empty()) throw EvalError("auc: empty sample");
  // rank-based Mann-Whitney with average ranks for tied scores
  std::vector<std::pair<double, bool>> scored;  // (score, is_positive)
  std::size_t n_pos = 0;
  for (const auto& [raw, score] : rating_score_pairs) {
    const bool pos = raw >= 4.0;
    n_pos += pos ? 1 : 0;
    scored.emplace_back(score, pos);
  }
  const std::size_t n = scored.size();
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw EvalError("AUC undefined: single-class sample");
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scored[j].first == scored[i].first) ++j;
    const double avg_rank = 0.5 * (static_cast<double>(i + 1) +
                                   static_cast<double>(j));  // 1-based
    for (std::size_t k = i; k < j; ++k)
      if (scored[k].second) rank_sum_pos += avg_rank;
    i = j;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

RunAggregate aggregate_runs(const std::vector<MetricSet>& runs) {
  if (runs.size() < 2) throw EvalError("aggregate_runs: need at least 2 runs");
  RunAggregate agg;
  agg.n_runs = runs.size();
  for (const auto& [name, first_value] : runs.front()) {
    double sum = 0.0;
    for (const MetricSet& r : runs) {
      auto it = r.find(name);
      if (it == r.end())
        throw EvalError("aggregate_runs: metric '" + name +
                        "' missing from a run");
      sum += it->second;
    }
    const double mean = sum / static_cast<double>(runs.size());
    double sq = 0.0;
    for (const MetricSet& r : runs) {
      const double d = r.at(name) - mean;
      sq += d * d;
    }
    MeanStd ms;
    ms.mean = mean;
    ms.std_dev = std::sqrt(sq / static_cast<double>(runs.size() - 1));
    agg.metrics.emplace(name, ms);
  }
  return agg;
}

double improvement_pct(double model, double baseline, bool higher_better) {
  if (model == 0.0) throw EvalError("improvement_pct: zero model value");
  const double delta = higher_better ? model - baseline : baseline - model;
  return 100.0 * delta / model;
}

bool significant_at_95(const MeanStd& a, std::size_t n_a, const MeanStd& b,
                       std::size_t n_b) {
  if (n_a < 2 || n_b < 2)
    throw EvalError("significant_at_95: need at least 2 runs per side");
  const double se =
      std::sqrt(a.std_dev * a.std_dev / static_cast<double>(n_a) +
                b.std_dev * b.std_dev / static_cast<double>(n_b));
  if (se == 0.0) return a.mean != b.mean;
  return std::abs(a.mean - b.mean) > 1.96 * se;
}

std::string aggregate_csv_rows(const std::string& dataset,
                               const std::string& variant,
                               const RunAggregate& agg) {
  std::ostringstream os;
  for (const auto& [name, ms] : agg.metrics) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%.6f,%.6f\n", dataset.c_str(),
                  variant.c_str(), name.c_str(), ms.mean, ms.std_dev);
    os << buf;
  }
  return os.str();
}

std::string metrics_csv(const MetricSet& metrics) {
  std::ostringstream os;
  os << "metric,value\n";
  for (const auto& [name, v] : metrics) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s,%.6f\n", name.c_str(), v);
    os << buf;
  }
  return os.str();
}

std::string aggregate_table(
    const std::vector<std::pair<std::string, RunAggregate>>& variants) {
  std::ostringstream os;
  if (variants.empty()) return "";
  os << "variant";
  for (const auto& [name, ms] : variants.front().second.metrics)
    os << '\t' << name;
  os << '\n';
  for (const auto& [variant, agg] : variants) {
    os << variant;
    for (const auto& [name, ms] : agg.metrics) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "\t%.4f", ms.mean);
      os << buf;
    }
    os << '\n';
    for (const auto& [name, ms] : agg.metrics) {
      char buf[48];
      std::snprintf(buf, sizeof buf, "\t(%.4f)", ms.std_dev);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace aspectrec
