#include "evanet/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "evanet/stats.hpp"

namespace evanet {

double bag(double predicted_age, double chronological_age) {
  if (!(chronological_age > 0.0))
    throw DomainError("bag: chronological age must be positive, got " +
                      std::to_string(chronological_age));
  return predicted_age - chronological_age;
}

double pae(const Tensor& z, const Tensor& p_y) {
  if (z.shape() != p_y.shape())
    throw ShapeError("pae: shape mismatch " + shape_to_string(z.shape()) + " vs " +
                     shape_to_string(p_y.shape()));
  double acc = 0.0;
  const auto& zv = z.values();
  const auto& pv = p_y.values();
  for (std::size_t i = 0; i < zv.size(); ++i) acc += (zv[i] - pv[i]) * (zv[i] - pv[i]);
  return std::sqrt(acc);
}

WelchResult welch_t_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw DomainError("welch_t_test: both samples need at least 2 values, got " +
                      std::to_string(a.size()) + " and " + std::to_string(b.size()));
  auto sample_stats = [](const std::vector<double>& xs, double& mean, double& var) {
    mean = 0.0;
    for (double x : xs) mean += x;
    mean /= static_cast<double>(xs.size());
    var = 0.0;
    for (double x : xs) var += (x - mean) * (x - mean);
    var /= static_cast<double>(xs.size() - 1);
  };
  double ma, va, mb, vb;
  sample_stats(a, ma, va);
  sample_stats(b, mb, vb);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;

  WelchResult r;
  if (sa + sb == 0.0) {
    r.degenerate = true;
    r.t = 0.0;
    r.df = na + nb - 2.0;
    r.p = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) /
         (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  r.p = student_t_two_sided_p(r.t, r.df);
  return r;
}

namespace {

char g_fmt_buf[64];

std::string fmt(double v) {
  std::snprintf(g_fmt_buf, sizeof g_fmt_buf, "%.17g", v);
  return g_fmt_buf;
}

std::string fmt6(double v) {
  std::snprintf(g_fmt_buf, sizeof g_fmt_buf, "%.6g", v);
  return g_fmt_buf;
}

void accumulate_stats(CohortStats& stats, const std::vector<const SubjectScore*>& scores) {
  stats.n = scores.size();
  if (scores.empty()) return;
  for (const auto* s : scores) {
    stats.bag_mean += s->bag;
    stats.pae_mean += s->pae;
  }
  stats.bag_mean /= static_cast<double>(stats.n);
  stats.pae_mean /= static_cast<double>(stats.n);
  for (const auto* s : scores) {
    stats.bag_std += (s->bag - stats.bag_mean) * (s->bag - stats.bag_mean);
    stats.pae_std += (s->pae - stats.pae_mean) * (s->pae - stats.pae_mean);
  }
  stats.bag_std = std::sqrt(stats.bag_std / static_cast<double>(stats.n));
  stats.pae_std = std::sqrt(stats.pae_std / static_cast<double>(stats.n));
}

void score_dataset(const Dataset& data, const EvaNetParams& params, const ModelConfig& cfg,
                   std::vector<SubjectScore>& out) {
  for (const auto& subject : data.subjects) {
    SubjectScore score;
    score.subject_id = subject.id;
    score.label = subject.label;
    score.age = subject.age;
    double pred_acc = 0.0, pae_acc = 0.0;
    for (std::size_t idx : subject.epoch_indices) {
      const EvalOutput out_i = forward_eval(data.epochs[idx], params, cfg);
      pred_acc += out_i.predicted_age;
      pae_acc += pae(out_i.z, out_i.p_y);
    }
    const double n = static_cast<double>(subject.epoch_indices.size());
    score.predicted = pred_acc / n;
    score.pae = pae_acc / n;
    score.bag = bag(score.predicted, score.age);
    out.push_back(std::move(score));
  }
}

}  // namespace

const CohortStats* AnomalyReport::stats_for(CohortLabel label) const {
  for (const auto& c : cohorts)
    if (c.label == label) return &c;
  return nullptr;
}

std::string AnomalyReport::per_subject_csv() const {
  std::ostringstream out;
  out << "subject_id,label,age,pred,bag,pae\n";
  for (const auto& s : subjects) {
    out << s.subject_id << ',' << to_string(s.label) << ',' << fmt(s.age) << ','
        << fmt(s.predicted) << ',' << fmt(s.bag) << ',' << fmt(s.pae) << '\n';
  }
  return out.str();
}

std::string AnomalyReport::cohort_summary_csv() const {
  std::ostringstream out;
  out << "label,n,bag_mean,bag_std,pae_mean,pae_std\n";
  for (const auto& c : cohorts) {
    out << to_string(c.label) << ',' << c.n << ',' << fmt(c.bag_mean) << ',' << fmt(c.bag_std)
        << ',' << fmt(c.pae_mean) << ',' << fmt(c.pae_std) << '\n';
  }
  return out.str();
}

std::string AnomalyReport::significance_table() const {
  std::ostringstream out;
  out << "pair                     metric   t           df          p\n";
  for (const auto& test : tests) {
    const std::string pair = to_string(test.a) + " vs " + to_string(test.b);
    auto row = [&](const char* metric, const WelchResult& r) {
      out << pair;
      for (std::size_t i = pair.size(); i < 25; ++i) out << ' ';
      out << metric << "      " << fmt6(r.t) << "    " << fmt6(r.df) << "    " << fmt6(r.p);
      if (r.degenerate) out << "    (degenerate)";
      out << '\n';
    };
    row("bag", test.bag_test);
    row("pae", test.pae_test);
  }
  for (const auto& reason : omitted) out << "omitted: " << reason << '\n';
  out << "ordering ad > mci > healthy on mean bag: " << (bag_ordering ? "yes" : "no") << '\n';
  out << "ordering ad > mci > healthy on mean pae: " << (pae_ordering ? "yes" : "no") << '\n';
  return out.str();
}

std::string AnomalyReport::violin_long_csv() const {
  std::ostringstream out;
  out << "metric,label,subject_id,value\n";
  for (const auto& s : subjects)
    out << "bag," << to_string(s.label) << ',' << s.subject_id << ',' << fmt(s.bag) << '\n';
  for (const auto& s : subjects)
    out << "pae," << to_string(s.label) << ',' << s.subject_id << ',' << fmt(s.pae) << '\n';
  return out.str();
}

AnomalyReport score_cohorts(const EvaNetParams& params, const ModelConfig& cfg,
                            const Dataset& healthy, const Dataset* pathological) {
  if (cfg.no_align)
    throw DomainError("score_cohorts: PAE needs the prototype network (no_align is set)");
  AnomalyReport report;
  score_dataset(healthy, params, cfg, report.subjects);
  if (pathological) score_dataset(*pathological, params, cfg, report.subjects);
  std::sort(report.subjects.begin(), report.subjects.end(),
            [](const SubjectScore& a, const SubjectScore& b) {
              if (a.label != b.label) return a.label < b.label;
              return a.subject_id < b.subject_id;
            });

  const CohortLabel kLabels[] = {CohortLabel::healthy, CohortLabel::mci, CohortLabel::ad};
  std::vector<std::vector<const SubjectScore*>> groups(3);
  for (const auto& s : report.subjects)
    groups[static_cast<std::size_t>(s.label)].push_back(&s);
  for (std::size_t i = 0; i < 3; ++i) {
    if (groups[i].empty()) continue;
    CohortStats stats;
    stats.label = kLabels[i];
    accumulate_stats(stats, groups[i]);
    report.cohorts.push_back(stats);
  }

  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = i + 1; j < 3; ++j) {
      const std::string pair = to_string(kLabels[i]) + " vs " + to_string(kLabels[j]);
      if (groups[i].size() < 2 || groups[j].size() < 2) {
        if (!groups[i].empty() || !groups[j].empty())
          report.omitted.push_back(pair + ": a cohort has fewer than 2 subjects");
        continue;
      }
      PairTest test;
      test.a = kLabels[i];
      test.b = kLabels[j];
      std::vector<double> bag_a, bag_b, pae_a, pae_b;
      for (const auto* s : groups[i]) bag_a.push_back(s->bag), pae_a.push_back(s->pae);
      for (const auto* s : groups[j]) bag_b.push_back(s->bag), pae_b.push_back(s->pae);
      test.bag_test = welch_t_test(bag_a, bag_b);
      test.pae_test = welch_t_test(pae_a, pae_b);
      report.tests.push_back(test);
    }
  }

  const CohortStats* h = report.stats_for(CohortLabel::healthy);
  const CohortStats* m = report.stats_for(CohortLabel::mci);
  const CohortStats* a = report.stats_for(CohortLabel::ad);
  if (h && m && a) {
    report.bag_ordering = h->bag_mean < m->bag_mean && m->bag_mean < a->bag_mean;
    report.pae_ordering = h->pae_mean < m->pae_mean && m->pae_mean < a->pae_mean;
  }
  return report;
}

}  // namespace evanet
