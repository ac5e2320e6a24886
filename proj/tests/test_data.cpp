#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>
#include <set>
#include <unistd.h>

#include "ap_cases.hpp"
#include "fct/dataset.hpp"
#include "fct/heatmap.hpp"

namespace fct {
namespace {

std::vector<int> all_classes() {
  std::vector<int> all(kNumClasses);
  std::iota(all.begin(), all.end(), 0);
  return all;
}

std::filesystem::path temp_dir(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fct_data_" + std::to_string(::getpid()) + "_" + name);
}

// ---- scenes -------------------------------------------------------------------

TEST(Scenes, MaskBoxIsTightAroundCoveredPixels) {
  for (int cls = 0; cls < kNumClasses; ++cls) {
    ObjectSpec o;
    o.class_id = cls;
    o.cx = 30.3;
    o.cy = 27.8;
    o.size = 21.0;
    const Box box = object_mask_box(o, 64, 64);
    int64_t x_lo = 64, x_hi = -1, y_lo = 64, y_hi = -1;
    for (int64_t y = 0; y < 64; ++y) {
      for (int64_t x = 0; x < 64; ++x) {
        if (!covers_pixel(o, x, y)) continue;
        x_lo = std::min(x_lo, x);
        x_hi = std::max(x_hi, x);
        y_lo = std::min(y_lo, y);
        y_hi = std::max(y_hi, y);
      }
    }
    const Box tight{static_cast<double>(x_lo), static_cast<double>(y_lo), static_cast<double>(x_hi + 1),
                    static_cast<double>(y_hi + 1)};
    EXPECT_GE(iou(box, tight), 0.99) << "class " << cls;
  }
}

TEST(Scenes, ShapesAndFillsAreDistinct) {
  std::set<std::vector<uint8_t>> seen;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    SceneSpec scene;
    scene.background_seed = 5;
    ObjectSpec o;
    o.class_id = cls;
    o.cx = o.cy = 32;
    o.size = 30;
    scene.objects.push_back(o);
    seen.insert(render_scene(scene).rgb);
  }
  EXPECT_EQ(seen.size(), static_cast<size_t>(kNumClasses));
  EXPECT_EQ(class_shape(7), ShapeKind::kTriangle);
  EXPECT_EQ(class_fill(7), FillKind::kStripes);
}

TEST(Corpus, DeterministicPerSeed) {
  const auto classes = all_classes();
  const DatasetIndex a = generate_synthetic_corpus(4, 12, classes);
  const DatasetIndex b = generate_synthetic_corpus(4, 12, classes);
  const DatasetIndex c = generate_synthetic_corpus(5, 12, classes);
  ASSERT_EQ(a.annotations.size(), b.annotations.size());
  for (size_t i = 0; i < a.annotations.size(); ++i) EXPECT_EQ(a.annotations[i].box, b.annotations[i].box);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_NE(a.pixels, c.pixels);
}

TEST(Corpus, ObjectsSeparatedBalancedAndInRange) {
  CorpusOptions co;
  co.min_object = 16;
  co.max_object = 24;
  const auto base = default_base_classes();
  const DatasetIndex d = generate_synthetic_corpus(9, 120, base, co);
  std::map<int, int> counts;
  for (size_t img = 0; img < d.images.size(); ++img) {
    const auto anns = d.annotations_in_image(static_cast<int64_t>(img));
    EXPECT_GE(anns.size(), 1u);
    EXPECT_LE(anns.size(), 3u);
    for (size_t i = 0; i < anns.size(); ++i) {
      EXPECT_GE(anns[i].box.x1, 0.0);
      EXPECT_LE(anns[i].box.x2, 64.0);
      EXPECT_LE(std::max(anns[i].box.width(), anns[i].box.height()), co.max_object + 1);
      for (size_t j = i + 1; j < anns.size(); ++j) EXPECT_EQ(iou(anns[i].box, anns[j].box), 0.0);
    }
  }
  for (const Annotation& a : d.annotations) {
    EXPECT_NE(std::find(base.begin(), base.end(), a.class_id), base.end());
    ++counts[a.class_id];
  }
  const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end(),
                                            [](const auto& x, const auto& y) { return x.second < y.second; });
  EXPECT_LE(hi->second - lo->second, 1);  // round-robin
}

TEST(Corpus, DefaultSplitCoversNovelAttributes) {
  const auto base = default_base_classes(), novel = default_novel_classes();
  EXPECT_EQ(base.size(), 8u);
  EXPECT_EQ(novel.size(), 4u);
  for (int n : novel) {
    EXPECT_TRUE(std::any_of(base.begin(), base.end(), [&](int b) { return class_shape(b) == class_shape(n); }));
    EXPECT_TRUE(std::any_of(base.begin(), base.end(), [&](int b) { return class_fill(b) == class_fill(n); }));
  }
  const std::vector<int> bad{99};
  EXPECT_THROW(generate_synthetic_corpus(1, 2, bad), DataError);
}

TEST(Corpus, FilesRoundTrip) {
  const auto classes = all_classes();
  const DatasetIndex a = generate_synthetic_corpus(3, 6, classes);
  const auto dir = temp_dir("corpus");
  write_dataset(a, dir);
  const DatasetIndex b = read_dataset(dir);
  EXPECT_EQ(b.pixels, a.pixels);
  EXPECT_EQ(b.base_classes, a.base_classes);
  EXPECT_EQ(b.novel_classes, a.novel_classes);
  ASSERT_EQ(b.annotations.size(), a.annotations.size());
  for (size_t i = 0; i < a.annotations.size(); ++i) {
    EXPECT_EQ(b.annotations[i].image_id, a.annotations[i].image_id);
    EXPECT_EQ(b.annotations[i].class_id, a.annotations[i].class_id);
    EXPECT_EQ(b.annotations[i].box, a.annotations[i].box);
  }
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_dataset(dir), IoError);
}

TEST(Images, PpmRoundTripAndCrop) {
  Image img(5, 3);
  for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<uint8_t>(i * 7);
  const auto path = temp_dir("img.ppm");
  write_ppm(path, img);
  EXPECT_EQ(read_ppm(path), img);
  std::filesystem::remove(path);
  EXPECT_THROW(read_ppm(path), IoError);
  EXPECT_EQ(crop_resize(img, {0, 0, 5, 3}, 5, 3), img);
  const Tensor t = images_to_tensor(std::vector<Image>{img, img});
  EXPECT_EQ(t.shape(), (Shape{2, 3, 5, 3}));
}

// ---- episodes and K-shot subsets ----------------------------------------------------

class Episodes : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { pool_ = new DatasetIndex(generate_synthetic_corpus(2, 150, all_classes())); }
  static void TearDownTestSuite() { delete pool_; }
  static DatasetIndex* pool_;
};
DatasetIndex* Episodes::pool_ = nullptr;

TEST_F(Episodes, SupportComesFromOtherImages) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const int cls = trial % kNumClasses;
    const EpisodeBatch ep = sample_episode(*pool_, cls, 3, rng);
    EXPECT_EQ(ep.class_id, cls);
    EXPECT_EQ(ep.query.shape(), (Shape{1, 64, 64, 3}));
    EXPECT_EQ(ep.support.shape(), (Shape{3, 32, 32, 3}));
    EXPECT_EQ(ep.gt, pool_->boxes_in_image(ep.query_image, cls));
    EXPECT_FALSE(ep.gt.empty());
    ASSERT_EQ(ep.support_annotations.size(), 3u);
    std::set<int64_t> distinct(ep.support_annotations.begin(), ep.support_annotations.end());
    EXPECT_EQ(distinct.size(), 3u);
    for (int64_t a : ep.support_annotations) {
      const Annotation& ann = pool_->annotations[static_cast<size_t>(a)];
      EXPECT_EQ(ann.class_id, cls);
      EXPECT_NE(ann.image_id, ep.query_image);
    }
  }
  EXPECT_THROW(sample_episode(*pool_, 0, 0, rng), DataError);
}

TEST_F(Episodes, DeterministicPerRngState) {
  std::mt19937_64 r1(11), r2(11);
  const EpisodeBatch a = sample_episode(*pool_, 5, 2, r1);
  const EpisodeBatch b = sample_episode(*pool_, 5, 2, r2);
  EXPECT_EQ(a.query_image, b.query_image);
  EXPECT_EQ(a.support_annotations, b.support_annotations);
  EXPECT_TRUE(std::equal(a.support.data().begin(), a.support.data().end(), b.support.data().begin()));
}

TEST_F(Episodes, KShotSubsetHasExactCounts) {
  for (int k : {1, 2, 5}) {
    const DatasetIndex sub = make_k_shot_subset(*pool_, k, 7);
    for (int c = 0; c < kNumClasses; ++c) EXPECT_EQ(sub.annotations_of_class(c).size(), static_cast<size_t>(k));
    // Every kept image keeps all of its instances of each selected class.
    for (const Annotation& a : sub.annotations) {
      const ImageRecord& rec = sub.images[static_cast<size_t>(a.image_id)];
      const auto it = std::find_if(pool_->images.begin(), pool_->images.end(),
                                   [&](const ImageRecord& r) { return r.path == rec.path; });
      ASSERT_NE(it, pool_->images.end());
      const auto src = static_cast<int64_t>(it - pool_->images.begin());
      EXPECT_EQ(pool_->boxes_in_image(src, a.class_id), sub.boxes_in_image(a.image_id, a.class_id));
      EXPECT_EQ(sub.pixels[static_cast<size_t>(a.image_id)], pool_->pixels[static_cast<size_t>(src)]);
    }
  }
  EXPECT_NE(make_k_shot_subset(*pool_, 1, 7).images[0].path, make_k_shot_subset(*pool_, 1, 8).images[0].path);
  EXPECT_THROW(make_k_shot_subset(*pool_, 1000, 7), DataError);
}

TEST_F(Episodes, OneShotFinetuneNeedsQuerySupport) {
  const DatasetIndex sub = make_k_shot_subset(*pool_, 1, 1);
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_episode(sub, 0, 1, rng), DataError);
  EpisodeOptions allow;
  allow.allow_query_support = true;
  const EpisodeBatch ep = sample_episode(sub, 0, 1, rng, allow);
  EXPECT_EQ(sub.annotations[static_cast<size_t>(ep.support_annotations[0])].image_id, ep.query_image);
}

// ---- AP50 ---------------------------------------------------------------------------

TEST(AveragePrecision, HandComputedInstances) {
  for (const auto& c : testing::hand_ap_cases()) {
    EXPECT_EQ(average_precision(c.detections, c.gt), c.expected) << c.name;
  }
}

TEST(AveragePrecision, InvariantUnderMonotoneScoreMaps) {
  for (const auto& c : testing::hand_ap_cases()) {
    auto warped = c.detections;
    for (Detection& d : warped) d.score = std::exp(3.0 * d.score) - 7.0;
    EXPECT_EQ(average_precision(warped, c.gt), c.expected) << c.name;
  }
}

TEST(AveragePrecision, EmptyInputs) {
  const std::map<int64_t, std::vector<Box>> none;
  const std::map<int64_t, std::vector<Box>> one{{0, {{0, 0, 10, 10}}}};
  const std::vector<Detection> dets{{0, 0, 0.5, {0, 0, 10, 10}}};
  EXPECT_EQ(average_precision(dets, none), 0.0);
  EXPECT_EQ(average_precision({}, one), 0.0);
}

TEST(AveragePrecision, ReportSkipsAbsentClasses) {
  DatasetIndex idx;
  idx.images = {{"a", 64, 64}};
  idx.annotations = {{0, 2, {0, 0, 10, 10}}};
  const std::vector<Detection> dets{{0, 2, 0.9, {0, 0, 10, 10}}, {0, 3, 0.9, {0, 0, 10, 10}}};
  const std::vector<int> classes{2, 3};
  const ApReport r = evaluate_ap50(dets, idx, classes);
  EXPECT_EQ(r.per_class.size(), 1u);
  EXPECT_EQ(r.per_class.at(2), 1.0);
  EXPECT_EQ(r.absent, (std::vector<int>{3}));
  EXPECT_EQ(r.mean, 1.0);
  const std::vector<double> runs{0.2, 0.4, 0.6};
  const RunSummary s = summarize_runs(runs);
  EXPECT_NEAR(s.mean, 0.4, 1e-15);
  EXPECT_NEAR(s.stddev, 0.2, 1e-15);
}

// ---- attention masks ----------------------------------------------------------------

TEST(Heatmap, UniformRowIsFlatGray) {
  const std::vector<double> row(4 * 4 + 2 * 2, 1.0 / 20.0);
  const AttentionMasks m = attention_masks(row, 4, 4, 2, 2);
  for (double v : m.query.values) EXPECT_EQ(v, 0.5);
  for (double v : m.support.values) EXPECT_EQ(v, 0.5);
  const Image q = render_heatmap(m.query, 64, 64);
  EXPECT_EQ(q, Image(64, 64, 128));
  EXPECT_EQ(render_heatmap(m.support, 32, 32), Image(32, 32, 128));
}

TEST(Heatmap, OneHotRowLightsOneCell) {
  for (int64_t t : {0, 5, 15, 17}) {
    std::vector<double> row(20, 0.0);
    row[static_cast<size_t>(t)] = 1.0;
    const AttentionMasks m = attention_masks(row, 4, 4, 2, 2);
    Heatmap expect_q{4, 4, std::vector<double>(16, 0.0)}, expect_s{2, 2, std::vector<double>(4, 0.0)};
    (t < 16 ? expect_q.values[static_cast<size_t>(t)] : expect_s.values[static_cast<size_t>(t - 16)]) = 1.0;
    EXPECT_EQ(m.query.values, expect_q.values);
    EXPECT_EQ(m.support.values, expect_s.values);

    const Image img = render_heatmap(m.query, 64, 64);
    for (int64_t y = 0; y < 64; ++y) {
      for (int64_t x = 0; x < 64; ++x) {
        const bool lit = t < 16 && (y / 16) * 4 + x / 16 == t;
        ASSERT_EQ(img.px(x, y)[0], lit ? 255 : 0) << t << " " << x << "," << y;
      }
    }
  }
  EXPECT_THROW(attention_masks(std::vector<double>(19, 0.0), 4, 4, 2, 2), ShapeError);
}

TEST(Heatmap, TokenLookupAndRows) {
  EXPECT_EQ(token_at_point(0, 0, 64, 64, 4, 4), 0);
  EXPECT_EQ(token_at_point(63.9, 63.9, 64, 64, 4, 4), 15);
  EXPECT_EQ(token_at_point(20, 40, 64, 64, 4, 4), 9);
  EXPECT_THROW(token_at_point(64, 3, 64, 64, 4, 4), PointOutsideError);
  EXPECT_THROW(token_at_point(-0.1, 3, 64, 64, 4, 4), PointOutsideError);

  std::vector<double> p(2 * 2 * 3 * 4);
  std::iota(p.begin(), p.end(), 0.0);
  const Tensor probs = Tensor::from({2, 2, 3, 4}, p);
  // batch 1, token 2: head 0 base 32, head 1 base 44.
  EXPECT_EQ(attention_row(probs, 1, 2, 0), (std::vector<double>{32, 33, 34, 35}));
  EXPECT_EQ(attention_row(probs, 1, 2), (std::vector<double>{38, 39, 40, 41}));
  EXPECT_THROW(attention_row(probs, 2, 0), ShapeError);
  EXPECT_THROW(attention_row(probs, 0, 0, 2), ShapeError);
}

}  // namespace
}  // namespace fct
