#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace aspectrec {

class EvalError : public std::runtime_error {
 public:
  explicit EvalError(const std::string& what) : std::runtime_error(what) {}
};

struct ExtractionMetrics {
  double precision_at_k = 0.0;
  double recall_at_k = 0.0;
  double f1 = 0.0;
};

struct RecMetrics {
  double rmse = 0.0;
  double mae = 0.0;
  double auc = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std_dev = 0.0;  // sample standard deviation (n-1 denominator)
};

// Per-metric mean and deviation over independent runs.
struct RunAggregate {
  std::size_t n_runs = 0;
  std::map<std::string, MeanStd> metrics;
};

using MetricSet = std::map<std::string, double>;

// Exact string match on normalized aspect terms. precision = hits / |pred|,
// recall = hits / |truth|, f1 = harmonic mean (0 when both are 0).
ExtractionMetrics precision_recall_f1(const std::vector<std::string>& pred,
                                      const std::vector<std::string>& truth);

// Over normalized-rating pairs (y, y_hat).
std::pair<double, double> rmse_mae(
    const std::vector<std::pair<double, double>>& pairs);

// Mann-Whitney AUC over (raw 1-5 rating, score) pairs; positives are raw
// ratings >= 4, ties between scores count 0.5. Throws when only one class is
// present.
double auc(const std::vector<std::pair<double, double>>& rating_score_pairs);

RunAggregate aggregate_runs(const std::vector<MetricSet>& runs);

// Relative improvement in percent, sign-aware: positive means the model is
// better. The denominator is the model value, which is the convention that
// reproduces published improvement tables.
double improvement_pct(double model, double baseline, bool higher_better);

// Two-sample z comparison at the 0.95 level from aggregate means/stds. This
// is a reporting aid, not a rigorous test, and is labeled as such in output.
bool significant_at_95(const MeanStd& a, std::size_t n_a, const MeanStd& b,
                       std::size_t n_b);

// CSV: dataset,variant,metric,mean,std (one row per metric).
std::string aggregate_csv_rows(const std::string& dataset,
                               const std::string& variant,
                               const RunAggregate& agg);
// CSV for a single run: metric,value rows with header.
std::string metrics_csv(const MetricSet& metrics);

// Plain-text table: one column per metric, value row with the deviation
// parenthesized beneath, one row pair per variant.
std::string aggregate_table(
    const std::vector<std::pair<std::string, RunAggregate>>& variants);

}  // namespace aspectrec
