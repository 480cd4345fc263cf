// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <vector>

#include "doctest.h"
#include "fabgpt/errors.hpp"
#include "fabgpt/metrics.hpp"
#include "fabgpt/rng.hpp"
#include "json.hpp"

using namespace fabgpt;

namespace {

// Pairwise U-statistic oracle: count wins and half-ties over every
// positive/negative pair.
double oracle_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t p = 0; p < scores.size(); ++p) {
    if (labels[p] != 1) continue;
    for (std::size_t n = 0; n < scores.size(); ++n) {
      if (labels[n] != 0) continue;
      ++pairs;
      if (scores[p] > scores[n])
        wins += 1.0;
      else if (scores[p] == scores[n])
        wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Recomputes PRO from scratch at every distinct threshold: BFS labels the
// mask regions, thresholding the map gives the prediction, and the resulting
// (fpr, mean overlap) points are integrated as a right-continuous step curve.
double oracle_pro(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks,
                  double limit) {
  struct Region {
    std::size_t map_index;
    std::vector<std::pair<std::size_t, std::size_t>> pixels;
  };
  std::vector<Region> regions;
  std::size_t n_normal = 0;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    const std::size_t h = masks[m].rows();
    const std::size_t w = masks[m].cols();
    std::vector<char> seen(h * w, 0);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        if (masks[m].at2(y, x) <= 0.5) {
          ++n_normal;
          continue;
        }
        if (seen[y * w + x]) continue;
        Region region;
        region.map_index = m;
        std::vector<std::pair<std::size_t, std::size_t>> queue{{y, x}};
        seen[y * w + x] = 1;
        while (!queue.empty()) {
          const auto [cy, cx] = queue.back();
          queue.pop_back();
          region.pixels.push_back({cy, cx});
          const long deltas[4][2] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
          for (const auto& d : deltas) {
            const long ny = static_cast<long>(cy) + d[0];
            const long nx = static_cast<long>(cx) + d[1];
            if (ny < 0 || nx < 0 || ny >= static_cast<long>(h) || nx >= static_cast<long>(w))
              continue;
            const std::size_t idx =
                static_cast<std::size_t>(ny) * w + static_cast<std::size_t>(nx);
            if (masks[m].at2(ny, nx) > 0.5 && !seen[idx]) {
              seen[idx] = 1;
              queue.push_back({static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)});
            }
          }
        }
        regions.push_back(region);
      }
  }
  REQUIRE(!regions.empty());

  std::set<double, std::greater<double>> thresholds;
  for (const Tensor& map : maps)
    for (std::size_t k = 0; k < map.size(); ++k) thresholds.insert(map.at(k));

  double area = 0.0;
  double prev_fpr = 0.0;
  double prev_val = 0.0;
  for (double t : thresholds) {
    double overlap = 0.0;
    for (const Region& region : regions) {
      std::size_t hits = 0;
      for (const auto& [y, x] : region.pixels)
        if (maps[region.map_index].at2(y, x) >= t) ++hits;
      overlap += static_cast<double>(hits) / static_cast<double>(region.pixels.size());
    }
    overlap /= static_cast<double>(regions.size());
    std::size_t fp = 0;
    for (std::size_t m = 0; m < maps.size(); ++m)
      for (std::size_t y = 0; y < maps[m].rows(); ++y)
        for (std::size_t x = 0; x < maps[m].cols(); ++x)
          if (masks[m].at2(y, x) <= 0.5 && maps[m].at2(y, x) >= t) ++fp;
    const double fpr =
        n_normal == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(n_normal);
    const double hi = std::min(fpr, limit);
    if (hi > prev_fpr) area += prev_val * (hi - prev_fpr);
    prev_fpr = std::min(fpr, limit);
    prev_val = overlap;
  }
  if (limit > prev_fpr) area += prev_val * (limit - prev_fpr);
  return area / limit;
}

// Exhaustive AP oracle: every distinct threshold, full recount.
double oracle_ap(const std::vector<Tensor>& maps, const std::vector<Tensor>& masks) {
  std::set<double, std::greater<double>> thresholds;
  std::size_t n_pos = 0;
  for (std::size_t m = 0; m < maps.size(); ++m)
    for (std::size_t k = 0; k < maps[m].size(); ++k) {
      thresholds.insert(maps[m].at(k));
      if (masks[m].at(k) > 0.5) ++n_pos;
    }
  REQUIRE(n_pos > 0);
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : thresholds) {
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (std::size_t m = 0; m < maps.size(); ++m)
      for (std::size_t k = 0; k < maps[m].size(); ++k) {
        if (maps[m].at(k) < t) continue;
        (masks[m].at(k) > 0.5 ? tp : fp)++;
      }
    const double recall = static_cast<double>(tp) / static_cast<double>(n_pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

// Mask with a few axis-aligned blobs; map = mask signal + quantized noise so
// ties occur across the sweep.
void random_instance(Rng& rng, std::size_t h, std::size_t w, Tensor& map, Tensor& mask) {
  mask = Tensor({h, w}, 0.0);
  const int blobs = 1 + static_cast<int>(rng.uniform_int(3));
  for (int b = 0; b < blobs; ++b) {
    const std::size_t by = rng.uniform_int(h - 3);
    const std::size_t bx = rng.uniform_int(w - 3);
    const std::size_t bh = 2 + rng.uniform_int(3);
    const std::size_t bw = 2 + rng.uniform_int(3);
    for (std::size_t y = by; y < std::min(h, by + bh); ++y)
      for (std::size_t x = bx; x < std::min(w, bx + bw); ++x) mask.at2(y, x) = 1.0;
  }
  map = Tensor({h, w});
  for (std::size_t k = 0; k < map.size(); ++k) {
    const double noisy = 0.6 * mask.at(k) + rng.uniform(0.0, 0.5);
    map.at(k) = std::round(noisy * 8.0) / 8.0;
  }
}

}  // namespace

TEST_CASE("image auc handles the canonical orderings") {
  CHECK(image_auc({0.2, 0.8}, {0, 1}) == 1.0);
  CHECK(image_auc({0.8, 0.2}, {0, 1}) == 0.0);
  CHECK(image_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == 0.5);
  CHECK_THROWS_AS(image_auc({0.1, 0.2}, {1, 1}), UndefinedMetricError);
  CHECK_THROWS_AS(image_auc({0.1, 0.2}, {0, 0}), UndefinedMetricError);
  CHECK_THROWS_AS(image_auc({0.1}, {0, 1}), InputError);
  CHECK_THROWS_AS(image_auc({0.1, 0.2}, {0, 2}), InputError);
  CHECK_THROWS_AS(image_auc({}, {}), InputError);
}

TEST_CASE("image auc matches the pairwise oracle under heavy ties") {
  Rng rng(301);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 6 + rng.uniform_int(25);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    bool has[2] = {false, false};
    for (std::size_t i = 0; i < n; ++i) {
      scores[i] = std::round(rng.uniform(0.0, 2.0) * 4.0) / 4.0;
      labels[i] = static_cast<int>(rng.uniform_int(2));
      has[labels[i]] = true;
    }
    if (!has[0] || !has[1]) {
      labels[0] = 0;
      labels[n - 1] = 1;
    }
    CHECK(image_auc(scores, labels) == doctest::Approx(oracle_auc(scores, labels)).epsilon(1e-12));
  }
}

TEST_CASE("auc of negated scores complements the original") {
  Rng rng(302);
  std::vector<double> scores(40);
  std::vector<int> labels(40);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = rng.uniform(0.0, 1.0);
    labels[i] = static_cast<int>(rng.uniform_int(2));
  }
  labels[0] = 0;
  labels[1] = 1;
  std::vector<double> negated(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) negated[i] = 1.0 - scores[i];
  CHECK(image_auc(scores, labels) + image_auc(negated, labels) ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("detection metrics are invariant under strictly monotone transforms") {
  Rng rng(303);
  Tensor map, mask;
  random_instance(rng, 12, 12, map, mask);
  Tensor cubed({12, 12});
  Tensor affine({12, 12});
  for (std::size_t k = 0; k < map.size(); ++k) {
    cubed.at(k) = map.at(k) * map.at(k) * map.at(k);
    affine.at(k) = 3.0 * map.at(k) + 1.0;
  }
  const double base_pauc = pixel_auc({map}, {mask});
  const double base_pro = pro_score({map}, {mask});
  const double base_ap = average_precision({map}, {mask});
  for (const Tensor& variant : {cubed, affine}) {
    CHECK(pixel_auc({variant}, {mask}) == doctest::Approx(base_pauc).epsilon(1e-12));
    CHECK(pro_score({variant}, {mask}) == doctest::Approx(base_pro).epsilon(1e-12));
    CHECK(average_precision({variant}, {mask}) == doctest::Approx(base_ap).epsilon(1e-12));
  }

  std::vector<double> scores = {0.25, 0.5, 0.5, 1.25};
  std::vector<double> scaled = {1.75, 2.5, 2.5, 4.75};
  std::vector<int> labels = {0, 1, 0, 1};
  CHECK(image_auc(scores, labels) == image_auc(scaled, labels));
}

TEST_CASE("image score is the map maximum") {
  Tensor map({2, 3}, 0.1);
  map.at2(1, 2) = 0.93;
  CHECK(image_score(map) == 0.93);
}

TEST_CASE("pixel auc extremes and oracle equivalence") {
  Rng rng(304);
  Tensor map, mask;
  random_instance(rng, 8, 8, map, mask);
  CHECK(pixel_auc({mask}, {mask}) == 1.0);
  Tensor inverted({8, 8});
  for (std::size_t k = 0; k < mask.size(); ++k) inverted.at(k) = 1.0 - mask.at(k);
  CHECK(pixel_auc({inverted}, {mask}) == 0.0);

  for (int trial = 0; trial < 20; ++trial) {
    Tensor m1, k1, m2, k2;
    random_instance(rng, 8, 8, m1, k1);
    random_instance(rng, 8, 8, m2, k2);
    std::vector<double> flat;
    std::vector<int> labels;
    for (const auto& [mp, mk] : {std::pair{&m1, &k1}, std::pair{&m2, &k2}})
      for (std::size_t k = 0; k < mp->size(); ++k) {
        flat.push_back(mp->at(k));
        labels.push_back(mk->at(k) > 0.5 ? 1 : 0);
      }
    CHECK(pixel_auc({m1, m2}, {k1, k2}) ==
          doctest::Approx(oracle_auc(flat, labels)).epsilon(1e-12));
  }

  CHECK_THROWS_AS(pixel_auc({Tensor({2, 2}, 0.5)}, {Tensor({2, 3}, 0.0)}), InputError);
  CHECK_THROWS_AS(pixel_auc({Tensor({2, 2}, 0.5)}, {Tensor({2, 2}, 0.0)}),
                  UndefinedMetricError);
}

TEST_CASE("pro is 1 when the map reproduces the mask and 0 when it is silent") {
  Tensor mask({10, 10}, 0.0);
  for (std::size_t y = 1; y < 3; ++y)
    for (std::size_t x = 1; x < 4; ++x) mask.at2(y, x) = 1.0;
  for (std::size_t y = 6; y < 9; ++y)
    for (std::size_t x = 6; x < 8; ++x) mask.at2(y, x) = 1.0;
  CHECK(pro_score({mask}, {mask}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(pro_score({Tensor({10, 10}, 0.0)}, {mask}) == 0.0);
  CHECK_THROWS_AS(pro_score({Tensor({4, 4}, 0.3)}, {Tensor({4, 4}, 0.0)}),
                  UndefinedMetricError);
  CHECK_THROWS_AS(pro_score({mask}, {mask}, 0.0), ConfigError);
  CHECK_THROWS_AS(pro_score({mask}, {mask}, 1.5), ConfigError);
}

TEST_CASE("pro matches the exhaustive threshold oracle on random instances") {
  Rng rng(305);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Tensor> maps;
    std::vector<Tensor> masks;
    const int n_maps = 1 + static_cast<int>(rng.uniform_int(2));
    for (int m = 0; m < n_maps; ++m) {
      Tensor map, mask;
      random_instance(rng, 16, 16, map, mask);
      maps.push_back(map);
      masks.push_back(mask);
    }
    const double got = pro_score(maps, masks);
    const double want = oracle_pro(maps, masks, 0.3);
    CHECK(std::fabs(got - want) <= 1e-9);
    CHECK(got >= 0.0);
    CHECK(got <= 1.0);
  }
}

TEST_CASE("average precision extremes and oracle equivalence") {
  Rng rng(306);
  Tensor map, mask;
  random_instance(rng, 8, 8, map, mask);
  CHECK(average_precision({mask}, {mask}) == doctest::Approx(1.0).epsilon(1e-12));

  // One positive pixel holding the strictly lowest score of n pixels.
  const std::size_t n = 10;
  Tensor line({1, n});
  Tensor line_mask({1, n}, 0.0);
  for (std::size_t x = 0; x < n; ++x) line.at2(0, x) = 1.0 - 0.05 * static_cast<double>(x);
  line_mask.at2(0, n - 1) = 1.0;
  CHECK(average_precision({line}, {line_mask}) ==
        doctest::Approx(1.0 / static_cast<double>(n)).epsilon(1e-12));

  for (int trial = 0; trial < 20; ++trial) {
    Tensor m, k;
    random_instance(rng, 8, 8, m, k);
    CHECK(average_precision({m}, {k}) == doctest::Approx(oracle_ap({m}, {k})).epsilon(1e-12));
  }

  CHECK_THROWS_AS(average_precision({Tensor({3, 3}, 0.4)}, {Tensor({3, 3}, 0.0)}),
                  UndefinedMetricError);
}

TEST_CASE("qa accuracy reports percentages per group") {
  std::vector<GradedAnswer> all_correct;
  for (Facet f : {Facet::presence, Facet::category, Facet::location, Facet::quantity,
                  Facet::description, Facet::analysis, Facet::general})
    for (int i = 0; i < 3; ++i) all_correct.push_back({f, true});
  QaBreakdown perfect = qa_accuracy(all_correct);
  CHECK(perfect.empty_groups.empty());
  CHECK(perfect.overall == 100.0);
  for (const auto& [group, pct] : perfect.per_group) CHECK(pct == 100.0);
  CHECK(perfect.per_group.count("unrelated") == 1);

  std::vector<GradedAnswer> quarter = {{Facet::location, true},
                                       {Facet::location, true},
                                       {Facet::location, true},
                                       {Facet::location, false}};
  CHECK(qa_accuracy(quarter).per_group.at("location") == 75.0);

  CHECK_THROWS_AS(qa_accuracy({}), UndefinedMetricError);
}

TEST_CASE("empty facets are excluded from the overall mean") {
  std::vector<GradedAnswer> results;
  for (Facet f : {Facet::presence, Facet::category, Facet::location, Facet::quantity,
                  Facet::description, Facet::general})
    results.push_back({f, f != Facet::quantity});
  QaBreakdown out = qa_accuracy(results);
  REQUIRE(out.empty_groups == std::vector<std::string>{"analysis"});
  CHECK(out.per_group.count("analysis") == 0);
  // Five perfect groups and one zero group.
  CHECK(out.overall == doctest::Approx(500.0 / 6.0).epsilon(1e-12));
}

TEST_CASE("the committed aggregation fixture reproduces the published arithmetic") {
  std::ifstream in(std::string(FABGPT_FIXTURES_DIR) + "/qa_accuracy_cases.json");
  REQUIRE(in.good());
  nlohmann::json fixture;
  in >> fixture;

  std::vector<GradedAnswer> results;
  for (const auto& [group, counts] : fixture.at("groups").items()) {
    const Facet f = group == "unrelated" ? Facet::general : facet_from_name(group);
    const std::size_t total = counts.at("total").get<std::size_t>();
    const std::size_t correct = counts.at("correct").get<std::size_t>();
    for (std::size_t i = 0; i < total; ++i) results.push_back({f, i < correct});
  }
  QaBreakdown out = qa_accuracy(results);
  double mean = 0.0;
  for (const auto& [group, pct] : fixture.at("expected_per_group").items()) {
    CHECK(out.per_group.at(group) == doctest::Approx(pct.get<double>()).epsilon(1e-12));
    mean += pct.get<double>();
  }
  mean /= 7.0;
  CHECK(out.overall == doctest::Approx(mean).epsilon(1e-12));
  const double rounded = std::round(out.overall * 100.0) / 100.0;
  CHECK(rounded == doctest::Approx(fixture.at("expected_overall_2dp").get<double>()));
}

TEST_CASE("eval reports serialize with the documented aggregation notes") {
  EvalReport report;
  report.per_class["hole"] = {0.94, 0.97, 0.90, 0.85};
  report.per_class["scratch"] = {0.90, 0.95, 0.83, 0.79};
  fill_average(report);
  report.qa = qa_accuracy({{Facet::presence, true}, {Facet::general, true}});
  report.config_echo = {{"seed", 0}};
  report.checkpoint_id = "ckpt-test";
  report.timestamp = "2026-01-01T00:00:00Z";

  CHECK(report.average.image_auc == doctest::Approx(0.92).epsilon(1e-12));
  CHECK(report.average.ap == doctest::Approx(0.82).epsilon(1e-12));

  nlohmann::json j = report_to_json(report);
  CHECK(j.at("per_class").size() == 2);
  CHECK(j.at("per_class").at("hole").at("pixel_auc").get<double>() == 0.97);
  CHECK(j.at("average").at("pro").get<double>() == doctest::Approx(0.865).epsilon(1e-12));
  CHECK(j.at("qa").at("overall").get<double>() == 100.0);
  CHECK(j.at("config").at("seed").get<int>() == 0);
  CHECK(j.at("notes").size() == 4);
  for (const auto& [label, m] : report.per_class) {
    for (double v : {m.image_auc, m.pixel_auc, m.pro, m.ap}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }

  const std::string csv = report_to_csv(report);
  CHECK(csv.rfind("class,image_auc,pixel_auc,pro,ap\n", 0) == 0);
  CHECK(csv.find("hole,0.940000") != std::string::npos);
  CHECK(csv.find("average,0.920000") != std::string::npos);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  EvalReport empty;
  CHECK_THROWS_AS(fill_average(empty), InputError);
}
