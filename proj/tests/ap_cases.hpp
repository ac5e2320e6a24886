#pragma once

// Hand-worked precision/recall instances for the AP50 evaluator. Each
// expected value is written as the sum of (recall step * enveloped
// precision) terms in ranking order, so it is reproduced to the last bit.

#include <map>
#include <string>
#include <vector>

#include "fct/dataset.hpp"

namespace fct::testing {

struct ApCase {
  std::string name;
  std::map<int64_t, std::vector<Box>> gt;
  std::vector<Detection> detections;
  double expected = 0.0;
};

inline Detection det(int64_t image, double score, Box box) { return {image, 0, score, box}; }

inline std::vector<ApCase> hand_ap_cases() {
  const Box a{0, 0, 10, 10}, b{20, 20, 30, 30}, c{40, 0, 50, 10}, d{0, 40, 10, 50};
  std::vector<ApCase> cases;

  // Two hits, nothing else.
  cases.push_back({"perfect", {{0, {a, b}}}, {det(0, 0.9, a), det(0, 0.8, b)}, 1.0});

  // Miss ranked first: precision 0 then 1/2; envelope lifts the first to 1/2.
  cases.push_back({"false_positive_first", {{0, {a}}}, {det(0, 0.9, b), det(0, 0.8, a)}, 1.0 * (1.0 / 2.0)});

  // TP FP TP FP TP over four boxes in two images, one never found.
  // precision 1, 1/2, 2/3, 1/2, 3/5; recall 1/4, 1/4, 1/2, 1/2, 3/4.
  cases.push_back({"interleaved",
                   {{0, {a, b}}, {1, {c, d}}},
                   {det(0, 0.9, a), det(0, 0.8, c), det(1, 0.7, c), det(1, 0.6, a), det(0, 0.5, b)},
                   0.25 * 1.0 + 0.0 * (2.0 / 3.0) + 0.25 * (2.0 / 3.0) + 0.0 * (3.0 / 5.0) + 0.25 * (3.0 / 5.0)});

  // Duplicate on a taken box is a miss; IoU of exactly 0.5 counts as a hit.
  // precision 1, 1/2, 2/3; recall 1/2, 1/2, 1.
  const Box half{0, 40, 10, 45};
  cases.push_back({"duplicate_and_boundary_iou",
                   {{0, {a, d}}},
                   {det(0, 0.9, a), det(0, 0.8, a), det(0, 0.7, half)},
                   0.5 * 1.0 + 0.0 * (2.0 / 3.0) + 0.5 * (2.0 / 3.0)});

  // Equal scores keep input order: the detection in an image without ground
  // truth ranks first. A weak overlap (IoU 0.25) is a miss.
  // precision 0, 1/2, 1/3; recall 0, 1/2, 1/2.
  const Box weak{0, 0, 10, 2.5};
  cases.push_back({"tie_and_weak_overlap",
                   {{0, {a, b}}},
                   {det(3, 0.9, a), det(0, 0.9, b), det(0, 0.4, weak)},
                   0.0 * (1.0 / 2.0) + 0.5 * (1.0 / 2.0) + 0.0 * (1.0 / 3.0)});
  return cases;
}

}  // namespace fct::testing
