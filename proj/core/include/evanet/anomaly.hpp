#pragma once

#include <optional>
#include <string>
#include <vector>

#include "evanet/model.hpp"
#include "evanet/training.hpp"

namespace evanet {

// Brain-age gap: predicted minus chronological age, sign preserved.
double bag(double predicted_age, double chronological_age);

// Prototype alignment error: ‖Z − P_y‖₂, the square root of align_loss.
double pae(const Tensor& z, const Tensor& p_y);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool degenerate = false;  // both samples constant: no variance to test against
};

// Welch's unequal-variance two-sample t-test, two-sided p via the
// t-distribution survival function, df by Welch–Satterthwaite.
WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b);

struct SubjectScore {
  std::string subject_id;
  CohortLabel label = CohortLabel::healthy;
  double age = 0.0;
  double predicted = 0.0;  // subject-level mean over epochs
  double bag = 0.0;
  double pae = 0.0;  // subject-level mean over epochs
};

struct CohortStats {
  CohortLabel label = CohortLabel::healthy;
  std::size_t n = 0;
  double bag_mean = 0.0, bag_std = 0.0;
  double pae_mean = 0.0, pae_std = 0.0;
};

struct PairTest {
  CohortLabel a = CohortLabel::healthy, b = CohortLabel::healthy;
  WelchResult bag_test, pae_test;
};

struct AnomalyReport {
  std::vector<SubjectScore> subjects;  // sorted by subject id
  std::vector<CohortStats> cohorts;    // in healthy, mci, ad order, present only
  std::vector<PairTest> tests;         // all pairs with both cohorts present
  std::vector<std::string> omitted;    // tests skipped, with reasons
  bool bag_ordering = false;  // mean BAG strictly increasing healthy < mci < ad
  bool pae_ordering = false;

  const CohortStats* stats_for(CohortLabel label) const;
  std::string per_subject_csv() const;    // subject_id,label,age,pred,bag,pae
  std::string cohort_summary_csv() const;
  std::string significance_table() const;  // plain text
  std::string violin_long_csv() const;     // metric,label,subject_id,value
};

// Deterministic eval-mode scoring of frozen parameters over one or more
// cohorts; subject-level aggregation, pairwise Welch tests, ordering check.
AnomalyReport score_cohorts(const EvaNetParams& params, const ModelConfig& cfg,
                            const Dataset& healthy, const Dataset* pathological);

}  // namespace evanet
