#include <gtest/gtest.h>

#include <cmath>

#include "lpm/heatmap.hpp"
#include "lpm/rng.hpp"

namespace lpm {
namespace {

JointSet single_joint(double x, double y, bool visible = true) {
  JointSet j;
  j.joints = {{x, y}};
  j.visible = {visible};
  j.bbox = {0, 0, 10, 10};
  return j;
}

TEST(EncodeLabels, PeakAtGridPointIsOneAndBackgroundZero) {
  // Cell (3, 5) has centre (14, 22) at factor 4.
  auto t = encode_labels<double>(single_joint(14, 22), 16, 4, 1.5);
  ASSERT_EQ(t.shape(), (Shape{2, 16, 16}));
  EXPECT_EQ(t(0, 5, 3), 1.0);
  EXPECT_EQ(t(1, 5, 3), 0.0);
  EXPECT_NEAR(t(0, 5, 4), std::exp(-1.0 / (2 * 1.5 * 1.5)), 1e-15);
}

TEST(EncodeLabels, AllInvisibleGivesZeroJointsAndUnitBackground) {
  JointSet j;
  j.joints = {{10, 10}, {30, 40}, {5, 60}};
  j.visible = {false, false, false};
  auto t = encode_labels<float>(j, 16, 4, 1.5);
  for (int c = 0; c < 3; ++c)
    for (int v = 0; v < 16; ++v)
      for (int u = 0; u < 16; ++u) EXPECT_EQ(t(c, v, u), 0.0f);
  for (int v = 0; v < 16; ++v)
    for (int u = 0; u < 16; ++u) EXPECT_EQ(t(3, v, u), 1.0f);
}

TEST(EncodeLabels, RejectsBadArguments) {
  EXPECT_THROW(encode_labels<float>(single_joint(1, 1), 16, 4, 0.0), Error);
  auto j = single_joint(1, 1);
  j.visible.push_back(true);
  EXPECT_THROW(encode_labels<float>(j, 16, 4, 1.5), Error);
}

TEST(EncodeLabels, ValuesInUnitIntervalAndBackgroundComplement) {
  Rng rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    JointSet j;
    for (int p = 0; p < 7; ++p) {
      j.joints.push_back({rng.uniform(0, 64), rng.uniform(0, 64)});
      j.visible.push_back(rng.bernoulli(0.7));
    }
    auto t = encode_labels<float>(j, 16, 4, 1.5);
    for (int v = 0; v < 16; ++v)
      for (int u = 0; u < 16; ++u) {
        float m = 0;
        for (int c = 0; c < 8; ++c) {
          EXPECT_GE(t(c, v, u), 0.0f);
          EXPECT_LE(t(c, v, u), 1.0f);
        }
        for (int c = 0; c < 7; ++c) m = std::max(m, t(c, v, u));
        EXPECT_EQ(t(7, v, u), std::max(0.0f, 1.0f - m));
      }
  }
}

TEST(DecodeBeliefs, UnitPeakMapsToCellCentre) {
  Tensor<float> b({2, 16, 16});
  b(0, 5, 3) = 1.0f;
  auto d = decode_beliefs(b, 4);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].x, 14.0);
  EXPECT_EQ(d[0].y, 22.0);
  EXPECT_EQ(d[0].confidence, 1.0);
}

TEST(DecodeBeliefs, UniformChannelPicksOrigin) {
  Tensor<float> b({3, 8, 8}, 0.25f);
  for (const auto& d : decode_beliefs(b, 4)) {
    EXPECT_EQ(d.x, 2.0);
    EXPECT_EQ(d.y, 2.0);
    EXPECT_FLOAT_EQ(d.confidence, 0.25);
  }
}

TEST(DecodeBeliefs, RejectsWrongRank) {
  EXPECT_THROW(decode_beliefs(Tensor<float>({4, 4}), 4), Error);
}

TEST(RoundTrip, EncodeDecodeWithinHalfFactor) {
  Rng rng(5);
  for (int f : {1, 2, 4, 8}) {
    const int size = 64 / f;
    for (int trial = 0; trial < 200; ++trial) {
      JointSet j;
      for (int p = 0; p < 7; ++p) {
        j.joints.push_back({rng.uniform(0, 64 - 1e-9), rng.uniform(0, 64 - 1e-9)});
        j.visible.push_back(true);
      }
      auto d = decode_beliefs(encode_labels<float>(j, size, f, 1.5), f);
      for (int p = 0; p < 7; ++p) {
        EXPECT_LE(std::abs(d[p].x - j.joints[p].x), f / 2.0 + 1e-9) << "f=" << f;
        EXPECT_LE(std::abs(d[p].y - j.joints[p].y), f / 2.0 + 1e-9) << "f=" << f;
      }
    }
  }
}

TEST(CenterMap, OddSizePeaksAtCentre) {
  auto c = make_center_map<double>(15, 3.75);
  EXPECT_EQ(c(0, 7, 7), 1.0);
}

TEST(CenterMap, FlipSymmetricAndMonotone) {
  for (int n : {15, 16}) {
    auto c = make_center_map<double>(n, n / 4.0);
    const double mid = (n - 1) / 2.0;
    for (int v = 0; v < n; ++v)
      for (int u = 0; u < n; ++u) {
        EXPECT_EQ(c(0, v, u), c(0, v, n - 1 - u));
        EXPECT_EQ(c(0, v, u), c(0, n - 1 - v, u));
        for (int v2 = 0; v2 < n; ++v2)
          for (int u2 = 0; u2 < n; ++u2) {
            const double d1 = std::hypot(u - mid, v - mid), d2 = std::hypot(u2 - mid, v2 - mid);
            if (d1 < d2) {
              EXPECT_GE(c(0, v, u), c(0, v2, u2));
            }
          }
      }
  }
}

TEST(CenterMap, RejectsNonPositiveSigma) {
  EXPECT_THROW(make_center_map<float>(16, 0.0), Error);
}

}  // namespace
}  // namespace lpm
