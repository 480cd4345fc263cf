// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "fabgpt/qa.hpp"
#include "fabgpt/tensor.hpp"
#include "json.hpp"

namespace fabgpt {

// Image-level score: max over the anomaly map.
double image_score(const Tensor& anomaly_map);

// Mann-Whitney U statistic: P(score_pos > score_neg) + 0.5 P(tie).
// Throws UndefinedMetricError unless both classes are present.
double image_auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Same U statistic over all pixels of all maps pooled into one population.
double pixel_auc(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks);

// Per-region overlap averaged over 4-connected ground-truth regions, swept
// over descending thresholds and integrated against the false-positive rate
// on normal pixels as a right-continuous step curve up to fpr_limit, then
// normalized by fpr_limit. Throws UndefinedMetricError when no mask has a
// defect region.
double pro_score(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks,
                 double fpr_limit = 0.3);

// Pixel-level average precision: sum of (recall_i - recall_{i-1}) *
// precision_i over the descending-score sweep, ties entering as one group.
// Throws UndefinedMetricError when no positive pixel exists.
double average_precision(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks);

struct GradedAnswer {
  Facet facet;  // general counts toward the "unrelated" group
  bool correct;
};

struct QaBreakdown {
  std::map<std::string, double> per_group;  // percent correct per non-empty group
  std::vector<std::string> empty_groups;    // groups with no samples, excluded
  double overall;                           // unweighted mean over non-empty groups
};

// Groups results into the six defect facets plus "unrelated" and reports
// percentages. Empty groups are excluded from the overall mean and listed.
QaBreakdown qa_accuracy(const std::vector<GradedAnswer>& results);

struct ClassMetrics {
  double image_auc;
  double pixel_auc;
  double pro;
  double ap;
};

struct EvalReport {
  std::map<std::string, ClassMetrics> per_class;
  ClassMetrics average;  // unweighted mean over classes
  QaBreakdown qa;
  nlohmann::json config_echo;
  std::string checkpoint_id;
  std::string timestamp;
};

// Averages the per-class block and fills the average field in place.
void fill_average(EvalReport& report);

nlohmann::json report_to_json(const EvalReport& report);

// One CSV line per class plus the average row; columns
// class,image_auc,pixel_auc,pro,ap in the detection-table column order.
std::string report_to_csv(const EvalReport& report);

}  // namespace fabgpt
