#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adclick/clicks.hpp"
#include "adclick/metrics.hpp"
#include "instances.hpp"
#include "oracles.hpp"

using namespace adclick;
using namespace adclick::clicks;

namespace {

BinaryMask square(int rows, int cols, int r0, int c0, int size) {
    BinaryMask m(rows, cols, 0);
    for (int r = r0; r < r0 + size; ++r) {
        for (int c = c0; c < c0 + size; ++c) m(r, c) = 1;
    }
    return m;
}

BinaryMask loop_disks(const std::vector<Click>& cs, bool positive, int rows, int cols, int radius) {
    BinaryMask m(rows, cols, 0);
    for (const auto& c : cs) {
        if (c.positive() != positive) continue;
        for (int y = 0; y < rows; ++y) {
            for (int x = 0; x < cols; ++x) {
                if ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y) <= radius * radius) m(y, x) = 1;
            }
        }
    }
    return m;
}

// Predictor that paints or erases a radius-4 disk at each click.
AnomalyMask paint(std::span<const Click> cs, const AnomalyMask& prev) {
    AnomalyMask out = prev;
    const auto& c = cs.back();
    for (int y = 0; y < out.rows(); ++y) {
        for (int x = 0; x < out.cols(); ++x) {
            if ((x - c.x) * (x - c.x) + (y - c.y) * (y - c.y) <= 16) out.scores(y, x) = c.positive() ? 1.0f : 0.0f;
        }
    }
    return out;
}

}  // namespace

TEST(EncodeClicks, RadiusZeroStampsOnePixel) {
    std::vector<Click> cs{{10, 10, Polarity::Positive, 1}};
    auto enc = encode_clicks(cs, AnomalyMask::zeros(32, 32), 32, 32, 0);
    int ones = 0;
    for (auto v : enc.positive_map.values()) ones += v;
    EXPECT_EQ(ones, 1);
    EXPECT_EQ(enc.positive_map(10, 10), 1);
    for (auto v : enc.negative_map.values()) EXPECT_EQ(v, 0);
}

TEST(EncodeClicks, NoClicksGivesEmptyMaps) {
    auto prev = AnomalyMask::zeros(8, 8);
    prev.scores(3, 3) = 0.7f;
    auto enc = encode_clicks({}, prev, 8, 8, 5);
    for (auto v : enc.positive_map.values()) EXPECT_EQ(v, 0);
    for (auto v : enc.negative_map.values()) EXPECT_EQ(v, 0);
    EXPECT_EQ(enc.previous_mask, prev.scores);
}

TEST(EncodeClicks, OverlappingDisksMatchLoopOracle) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Click> cs;
        for (int k = 0; k < 5; ++k) {
            cs.push_back({static_cast<int>(rng() % 24), static_cast<int>(rng() % 20),
                          rng() % 3 ? Polarity::Positive : Polarity::Negative, k + 1});
        }
        const int radius = static_cast<int>(rng() % 6);
        auto enc = encode_clicks(cs, AnomalyMask::zeros(20, 24), 20, 24, radius);
        EXPECT_EQ(enc.positive_map, loop_disks(cs, true, 20, 24, radius));
        EXPECT_EQ(enc.negative_map, loop_disks(cs, false, 20, 24, radius));
        for (auto v : enc.positive_map.values()) EXPECT_LE(v, 1);
        // Re-stamping an existing click changes nothing.
        auto again = cs;
        again.push_back(cs.front());
        auto enc2 = encode_clicks(again, AnomalyMask::zeros(20, 24), 20, 24, radius);
        EXPECT_EQ(enc2.positive_map, enc.positive_map);
        EXPECT_EQ(enc2.negative_map, enc.negative_map);
    }
}

TEST(EncodeClicks, OutOfBoundsThrows) {
    std::vector<Click> cs{{32, 0, Polarity::Positive, 1}};
    try {
        encode_clicks(cs, AnomalyMask::zeros(32, 32), 32, 32, 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::OutOfBounds);
    }
}

TEST(DistanceToBoundary, MatchesBruteForce) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 20; ++trial) {
        auto m = instances::random_mask(rng, 11, 14, 0.7);
        auto d = distance_to_boundary(m);
        for (int r = 0; r < 11; ++r) {
            for (int c = 0; c < 14; ++c) {
                if (!m(r, c)) continue;
                double best = 1e9;
                for (int rr = -1; rr <= 11; ++rr) {
                    for (int cc = -1; cc <= 14; ++cc) {
                        const bool outside = rr < 0 || cc < 0 || rr >= 11 || cc >= 14 || !m(rr, cc);
                        if (outside) best = std::min(best, std::hypot(rr - r, cc - c));
                    }
                }
                EXPECT_NEAR(d(r, c), best, 1e-4);
            }
        }
    }
}

TEST(SimulateNextClick, SquareCentre) {
    const auto gt = square(64, 64, 17, 23, 20);
    auto click = simulate_next_click(BinaryMask(64, 64, 0), gt);
    ASSERT_TRUE(click);
    EXPECT_TRUE(click->positive());
    EXPECT_EQ(click->y, 17 + 9);
    EXPECT_EQ(click->x, 23 + 9);
}

TEST(SimulateNextClick, PerfectPredictionGivesSentinel) {
    const auto gt = square(32, 32, 4, 4, 6);
    EXPECT_FALSE(simulate_next_click(gt, gt).has_value());
}

TEST(SimulateNextClick, LargestRegionWins) {
    // False negative of 30 pixels (5x6) and false positive of 50 (5x10).
    BinaryMask gt(40, 40, 0), pred(40, 40, 0);
    for (int r = 2; r < 7; ++r) {
        for (int c = 2; c < 8; ++c) gt(r, c) = 1;
    }
    for (int r = 20; r < 25; ++r) {
        for (int c = 20; c < 30; ++c) pred(r, c) = 1;
    }
    auto click = simulate_next_click(pred, gt);
    ASSERT_TRUE(click);
    EXPECT_FALSE(click->positive());
    EXPECT_TRUE(click->y >= 20 && click->y < 25 && click->x >= 20 && click->x < 30);
}

TEST(SimulateNextClick, AlwaysInsideAnErrorRegion) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        auto gt = instances::random_mask(rng, 16, 16, 0.3);
        auto pred = instances::random_mask(rng, 16, 16, 0.3);
        if (trial % 10 == 0) pred = gt;
        auto click = simulate_next_click(pred, gt);
        if (pred == gt) {
            EXPECT_FALSE(click);
            continue;
        }
        ASSERT_TRUE(click);
        const bool fn = gt(click->y, click->x) && !pred(click->y, click->x);
        const bool fp = !gt(click->y, click->x) && pred(click->y, click->x);
        EXPECT_TRUE(fn || fp);
        EXPECT_EQ(click->positive(), fn);
    }
}

TEST(TrainingClicks, FirstClickInsideAnomaly) {
    std::mt19937_64 rng(1);
    const auto gt = square(32, 32, 5, 9, 7);
    for (int k = 0; k < 100; ++k) {
        auto c = sample_first_click(gt, rng);
        ASSERT_TRUE(c);
        EXPECT_TRUE(c->positive());
        EXPECT_EQ(gt(c->y, c->x), 1);
    }
    EXPECT_FALSE(sample_first_click(BinaryMask(8, 8, 0), rng));
    for (int k = 0; k < 100; ++k) {
        auto c = sample_training_click(BinaryMask(32, 32, 0), gt, rng, 1.0);
        ASSERT_TRUE(c);
        EXPECT_EQ(gt(c->y, c->x), 1);
    }
}

TEST(Protocol, PerfectPredictorReachesTargetAtFirstClick) {
    const auto gt = square(32, 32, 8, 8, 10);
    Predictor perfect = [&](std::span<const Click>, const AnomalyMask& prev) {
        AnomalyMask out = prev;
        for (std::size_t i = 0; i < gt.size(); ++i) out.scores.values()[i] = gt.values()[i];
        return out;
    };
    auto r = run_click_protocol(perfect, gt, 20, 0.8);
    EXPECT_EQ(r.noc, 1);
    EXPECT_EQ(r.iou_per_click.size(), 20u);
    for (double v : r.iou_per_click) EXPECT_EQ(v, 1.0);
}

TEST(Protocol, NeverReachingTargetHitsCap) {
    const auto gt = square(32, 32, 8, 8, 10);
    Predictor empty = [](std::span<const Click>, const AnomalyMask& prev) { return AnomalyMask::zeros(prev.rows(), prev.cols()); };
    auto r = run_click_protocol(empty, gt, 20, 0.8);
    EXPECT_EQ(r.noc, 20);
}

TEST(Protocol, ClickIndicesIncreaseAndNocMonotoneInTarget) {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 10; ++trial) {
        BinaryMask gt(40, 40, 0);
        for (int b = 0; b < 3; ++b) {
            const int r0 = static_cast<int>(rng() % 30), c0 = static_cast<int>(rng() % 30);
            for (int r = r0; r < r0 + 8; ++r) {
                for (int c = c0; c < c0 + 10; ++c) gt(r, c) = 1;
            }
        }
        int prev_noc = 0;
        for (double target : {0.3, 0.5, 0.7, 0.9, 0.99}) {
            std::vector<int> keep{1, 5};
            auto r = run_click_protocol(paint, gt, 20, target, 0.5f, keep);
            ASSERT_EQ(r.kept_masks.size(), 2u);
            for (std::size_t k = 1; k < r.clicks.size(); ++k) EXPECT_GT(r.clicks[k].index, r.clicks[k - 1].index);
            EXPECT_EQ(r.clicks.front().index, 1);
            EXPECT_EQ(r.noc, metrics::first_crossing(r.iou_per_click, target, 20));
            EXPECT_GE(r.noc, prev_noc);
            prev_noc = r.noc;
            EXPECT_NEAR(metrics::iou(r.kept_masks[0].binarize(), gt), r.iou_per_click[0], 0.0);
        }
    }
}

TEST(ClickJson, RoundTrip) {
    Click c{3, 7, Polarity::Negative, 4};
    nlohmann::json j = c;
    EXPECT_EQ(j.get<Click>(), c);
}
