// SPDX-License-Identifier: Apache-2.0
#include "fabgpt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <utility>

#include "fabgpt/errors.hpp"

namespace fabgpt {

namespace {

void require_pairs(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
  if (maps.empty()) throw InputError("metric needs at least one map");
  if (maps.size() != masks.size()) throw InputError("maps and masks count mismatch");
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].rank() != 2 || masks[i].rank() != 2 || maps[i].rows() != masks[i].rows() ||
        maps[i].cols() != masks[i].cols())
      throw InputError("map and mask shapes must match");
    for (std::size_t k = 0; k < maps[i].size(); ++k)
      if (!std::isfinite(maps[i].at(k))) throw InputError("anomaly scores must be finite");
  }
}

// Rank-sum form of the U statistic; ties get the average of their ranks.
double midrank_auc(const std::vector<double>& scores, const std::vector<char>& is_pos) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
    for (std::size_t k = i; k < j; ++k)
      if (is_pos[order[k]]) {
        rank_sum_pos += midrank;
        ++n_pos;
      }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw UndefinedMetricError("AUC is undefined with a single class");
  return (rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1)) /
         (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

nlohmann::json class_to_json(const ClassMetrics& m) {
  return nlohmann::json{
      {"image_auc", m.image_auc}, {"pixel_auc", m.pixel_auc}, {"pro", m.pro}, {"ap", m.ap}};
}

}  // namespace

double image_score(const Tensor& anomaly_map) {
  double best = anomaly_map.at(0);
  for (std::size_t k = 1; k < anomaly_map.size(); ++k) best = std::max(best, anomaly_map.at(k));
  return best;
}

double image_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty()) throw InputError("metric needs at least one score");
  if (scores.size() != labels.size()) throw InputError("scores and labels count mismatch");
  std::vector<char> is_pos(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw InputError("labels must be 0 or 1");
    if (!std::isfinite(scores[i])) throw InputError("scores must be finite");
    is_pos[i] = static_cast<char>(labels[i]);
  }
  return midrank_auc(scores, is_pos);
}

double pixel_auc(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
  require_pairs(maps, masks);
  std::vector<double> scores;
  std::vector<char> is_pos;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t k = 0; k < maps[i].size(); ++k) {
      scores.push_back(maps[i].at(k));
      is_pos.push_back(masks[i].at(k) > 0.5 ? 1 : 0);
    }
  return midrank_auc(scores, is_pos);
}

double pro_score(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks,
                 double fpr_limit) {
  require_pairs(maps, masks);
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0))
    throw ConfigError("fpr_limit must be in (0, 1]");

  // Label 4-connected ground-truth regions across all masks, then flatten
  // every pixel to (score, region id or -1 for normal).
  std::vector<double> scores;
  std::vector<int> region_of;
  std::vector<std::size_t> region_size;
  std::size_t n_normal = 0;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const Tensor& mask = masks[m];
    const std::size_t h = mask.rows();
    const std::size_t w = mask.cols();
    std::vector<int> label(h * w, -1);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (mask.at2(y, x) <= 0.5 || label[y * w + x] >= 0) continue;
        const int id = static_cast<int>(region_size.size());
        region_size.push_back(0);
        std::vector<std::pair<std::size_t, std::size_t>> stack{{y, x}};
        label[y * w + x] = id;
        while (!stack.empty()) {
          const auto [cy, cx] = stack.back();
          stack.pop_back();
          ++region_size[id];
          const std::pair<long, long> steps[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
          for (const auto& [dy, dx] : steps) {
            const long ny = static_cast<long>(cy) + dy;
            const long nx = static_cast<long>(cx) + dx;
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w))
              continue;
            const std::size_t idx = static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
            if (mask.at2(ny, nx) > 0.5 && label[idx] < 0) {
              label[idx] = id;
              stack.push_back({static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)});
            }
          }
        }
      }
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        scores.push_back(maps[m].at2(y, x));
        region_of.push_back(label[y * w + x]);
        if (label[y * w + x] < 0) ++n_normal;
      }
  }
  if (region_size.empty())
    throw UndefinedMetricError("PRO is undefined without a defect region");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  // Descending sweep; the curve holds each overlap value until the next
  // threshold point, so an fpr interval is credited with the overlap already
  // achieved when it opens.
  double overlap_sum = 0.0;
  std::size_t false_pos = 0;
  double area = 0.0;
  double prev_fpr = 0.0;
  double prev_val = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      const int r = region_of[order[k]];
      if (r >= 0)
        overlap_sum += 1.0 / static_cast<double>(region_size[static_cast<std::size_t>(r)]);
      else
        ++false_pos;
    }
    const double fpr =
        n_normal == 0 ? 0.0 : static_cast<double>(false_pos) / static_cast<double>(n_normal);
    const double val = overlap_sum / static_cast<double>(region_size.size());
    const double hi = std::min(fpr, fpr_limit);
    if (hi > prev_fpr) area += prev_val * (hi - prev_fpr);
    prev_fpr = std::min(fpr, fpr_limit);
    prev_val = val;
    i = j;
  }
  if (fpr_limit > prev_fpr) area += prev_val * (fpr_limit - prev_fpr);
  // The running 1/size sums can drift an ulp past the exact bound.
  return std::clamp(area / fpr_limit, 0.0, 1.0);
}

double average_precision(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
  require_pairs(maps, masks);
  std::vector<double> scores;
  std::vector<char> is_pos;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t k = 0; k < maps[i].size(); ++k) {
      scores.push_back(maps[i].at(k));
      const bool pos = masks[i].at(k) > 0.5;
      is_pos.push_back(pos ? 1 : 0);
      if (pos) ++n_pos;
    }
  if (n_pos == 0) throw UndefinedMetricError("AP is undefined without a positive pixel");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) (is_pos[order[k]] ? tp : fp)++;
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return std::clamp(ap, 0.0, 1.0);
}

QaBreakdown qa_accuracy(const std::vector<GradedAnswer>& results) {
  if (results.empty()) throw UndefinedMetricError("qa accuracy needs at least one result");
  static const char* kGroups[7] = {"presence",    "category", "location", "quantity",
                                   "description", "analysis", "unrelated"};
  std::map<std::string, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  for (const auto& r : results) {
    const std::string group = r.facet == Facet::general ? "unrelated" : facet_name(r.facet);
    auto& t = tally[group];
    ++t.second;
    if (r.correct) ++t.first;
  }
  QaBreakdown out{};
  double sum = 0.0;
  std::size_t present = 0;
  for (const char* group : kGroups) {
    const auto it = tally.find(group);
    if (it == tally.end()) {
      out.empty_groups.push_back(group);
      std::fprintf(stderr, "warning: no graded answers for group %s; excluded from overall\n",
                   group);
      continue;
    }
    const double pct = 100.0 * static_cast<double>(it->second.first) /
                       static_cast<double>(it->second.second);
    out.per_group[group] = pct;
    sum += pct;
    ++present;
  }
  out.overall = sum / static_cast<double>(present);
  return out;
}

void fill_average(EvalReport& report) {
  if (report.per_class.empty()) throw InputError("average needs at least one class");
  ClassMetrics avg{0.0, 0.0, 0.0, 0.0};
  for (const auto& [label, m] : report.per_class) {
    avg.image_auc += m.image_auc;
    avg.pixel_auc += m.pixel_auc;
    avg.pro += m.pro;
    avg.ap += m.ap;
  }
  const double n = static_cast<double>(report.per_class.size());
  report.average = {avg.image_auc / n, avg.pixel_auc / n, avg.pro / n, avg.ap / n};
}

nlohmann::json report_to_json(const EvalReport& report) {
  nlohmann::json per_class = nlohmann::json::object();
  for (const auto& [label, m] : report.per_class) per_class[label] = class_to_json(m);
  return nlohmann::json{
      {"per_class", per_class},
      {"average", class_to_json(report.average)},
      {"qa",
       {{"per_group", report.qa.per_group},
        {"empty_groups", report.qa.empty_groups},
        {"overall", report.qa.overall}}},
      {"config", report.config_echo},
      {"checkpoint", report.checkpoint_id},
      {"timestamp", report.timestamp},
      {"notes",
       {"pixel auc pools all test pixels globally",
        "qa overall is the unweighted mean of the non-empty groups",
        "pro integrates overlap vs fpr as a right-continuous step curve",
        "average row is the unweighted class mean"}}};
}

std::string report_to_csv(const EvalReport& report) {
  std::string out = "class,image_auc,pixel_auc,pro,ap\n";
  const auto row = [&out](const std::string& label, const ClassMetrics& m) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f\n", label.c_str(), m.image_auc,
                  m.pixel_auc, m.pro, m.ap);
    out += buf;
  };
  for (const auto& [label, m] : report.per_class) row(label, m);
  row("average", report.average);
  return out;
}

}  // namespace fabgpt
