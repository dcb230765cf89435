#include "code/cosegment.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace code;
using testing_support::gradcheck;
using testing_support::V;

namespace {

V row(const std::vector<double>& v) { return ag::leaf<double>(1, v.size(), v); }
V col(const std::vector<double>& v) { return ag::leaf<double>(v.size(), 1, v); }
V one(double x) { return ag::leaf<double>(1, 1, {x}); }

V random(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, scale);
    return ag::leaf<double>(r, c, std::move(v));
}

std::vector<V> random_logits(std::size_t j, std::size_t len, Rng& rng, double scale = 2.0) {
    std::vector<V> out;
    for (std::size_t k = 0; k < j; ++k) out.push_back(random(len, 1, rng, scale));
    return out;
}

}  // namespace

TEST(KnowledgeGuidance, ClosedFormValues) {
    EXPECT_DOUBLE_EQ(kg_loss<double>({row({0.3, -0.2}), row({0.3, -0.2})}).item(), 0.0);
    EXPECT_DOUBLE_EQ(kg_loss<double>({row({1, 0}), row({0, 1})}).item(), 2.0);
    EXPECT_DOUBLE_EQ(kg_loss<double>({row({0.5, 0.5}), row({0, 0})}).item(), 0.5);
}

TEST(KnowledgeGuidance, GradientOnlyReachesLearnableEmbedding) {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        auto n = random(1, 6, rng), np = random(1, 6, rng);
        EXPECT_LT(gradcheck({n}, [&] { return kg_loss<double>({n, np}); }), 1e-4);
    }
    auto n = row({1, 2}), np = row({0, 0});
    auto loss = kg_loss<double>({n, np});
    ag::backward(loss);
    EXPECT_TRUE(np.grad_or_empty().empty() || np.grad_or_empty() == std::vector<double>(2, 0.0));
}

TEST(RegionMask, OrthogonalAndSaturatedCases) {
    const auto up = bilinear_matrix<double>(2, 2, 2, 2);
    auto map = ag::constant<double>(4, 2, std::vector<double>{1, 0, 2, 0, -1, 0, 3, 0});
    auto m = region_mask(map, row({0, 1}), one(5.0), one(0.0), up);
    for (double v : m.value()) EXPECT_DOUBLE_EQ(v, 0.5);
    auto pos = ag::constant<double>(4, 2, std::vector<double>{1, 0, 2, 0, 1, 0, 3, 0});
    const auto sat = region_mask(pos, row({1, 0}), one(1e4), one(0.0), up);
    for (double v : sat.value()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(RegionMask, MatchesHandComputedDotProducts) {
    Rng rng(2);
    const auto up = bilinear_matrix<double>(2, 2, 2, 2);
    auto map = random(4, 4, rng), n = random(1, 4, rng);
    const auto m = region_mask(map, n, one(1.0), one(0.0), up);
    for (std::size_t p = 0; p < 4; ++p) {
        long double d = 0;
        for (std::size_t c = 0; c < 4; ++c) d += static_cast<long double>(map.at(p, c)) * n.value()[c];
        EXPECT_NEAR(m.value()[p], static_cast<double>(1.0L / (1.0L + std::exp(-d))), 1e-15);
    }
}

TEST(WordLogits, ClosedFormValues) {
    auto words = ag::constant<double>(2, 2, std::vector<double>{0.75, 0, 0, 1});
    auto l = word_logits(words, row({1, 0}), one(2.0), one(-1.0));
    EXPECT_DOUBLE_EQ(l.value()[0], 0.5);
    EXPECT_DOUBLE_EQ(l.value()[1], -1.0);  // orthogonal word gives b
    auto flat = word_logits(words, row({1, 0}), one(0.0), one(0.3));
    for (double v : flat.value()) EXPECT_DOUBLE_EQ(v, 0.3);
}

TEST(WordMasks, ClosedFormValues) {
    EXPECT_DOUBLE_EQ(word_masks<double>({col({0.0})}).masks[0].value()[0], 0.5);
    const auto ws = word_masks<double>({col({0.0}), col({0.0})});
    EXPECT_NEAR(ws.masks[0].value()[0], 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(ws.residual.value()[0], 1.0 / 3.0, 1e-15);
    const double e = std::exp(1.0);
    EXPECT_NEAR(word_masks<double>({col({1.0}), col({0.0})}).masks[0].value()[0], e / (2 + e), 1e-15);
    EXPECT_NEAR(e / (2 + e), 0.576117, 1e-6);
}

TEST(WordMasks, SimplexProperty) {
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        const std::size_t j = 1 + rng.below(8), len = 1 + rng.below(64);
        const auto ws = word_masks(random_logits(j, len, rng, 10.0));
        for (std::size_t i = 0; i < len; ++i) {
            double s = ws.residual.value()[i];
            for (const auto& m : ws.masks) s += m.value()[i];
            ASSERT_NEAR(s, 1.0, 1e-6);
        }
    }
}

TEST(WordMasks, ExtremeLogitsStayFinite) {
    const auto ws = word_masks<double>({col({800.0}), col({-800.0})});
    EXPECT_NEAR(ws.masks[0].value()[0], 1.0, 1e-12);
    EXPECT_TRUE(ag::all_finite(ws.probs));
}

TEST(WordMasks, Monotonicity) {
    Rng rng(4);
    for (int trial = 0; trial < 100; ++trial) {
        auto logits = random_logits(3, 5, rng);
        const auto before = word_masks(logits);
        const std::size_t j = rng.below(3), i = rng.below(5);
        logits[j].value()[i] += 0.5;
        const auto after = word_masks(logits);
        EXPECT_GT(after.masks[j].value()[i], before.masks[j].value()[i]);
        for (std::size_t k = 0; k < 3; ++k)
            if (k != j) EXPECT_LT(after.masks[k].value()[i], before.masks[k].value()[i]);
        EXPECT_LT(after.residual.value()[i], before.residual.value()[i]);
    }
}

TEST(PseudoLabels, ClearCases) {
    const auto p = pseudo_labels<double>({col({3.0, -1.0}), col({-1.0, -2.0})});
    EXPECT_EQ(p[0], (std::vector<std::uint8_t>{1, 0}));
    EXPECT_EQ(p[1], (std::vector<std::uint8_t>{0, 0}));
}

TEST(PseudoLabels, MatchExhaustiveArgmax) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto logits = random_logits(3, 5, rng);
        const auto cls = pseudo_label_classes(logits);
        const auto p = pseudo_labels(logits);
        for (std::size_t i = 0; i < 5; ++i) {
            std::vector<double> scores{0.0};
            for (const auto& l : logits) scores.push_back(l.value()[i]);
            const auto best = static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
            ASSERT_EQ(cls[i], best);
            for (std::size_t j = 0; j < 3; ++j) ASSERT_EQ(p[j][i], best == j + 1 ? 1 : 0);
        }
    }
}

TEST(PseudoLabels, TiesGoToTheLowestClass) {
    EXPECT_EQ(pseudo_label_classes<double>({col({0.0}), col({0.0})})[0], 0u);
    EXPECT_EQ(pseudo_label_classes<double>({col({1.0}), col({1.0})})[0], 1u);
}

TEST(PseudoLabels, ScalingKeepsAWinningSegment) {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
        auto logits = random_logits(3, 4, rng);
        const auto before = pseudo_label_classes(logits);
        for (auto& l : logits)
            for (auto& v : l.value()) v *= 3.0;
        const auto after = pseudo_label_classes(logits);
        for (std::size_t i = 0; i < 4; ++i)
            if (before[i] > 0) EXPECT_EQ(after[i], before[i]);
    }
}

TEST(TextSegLoss, ClosedFormValues) {
    const std::vector<bool> all{true};
    EXPECT_NEAR(text_seg_loss(word_masks<double>({col({0.0})}), {1}, all).item(), std::log(2.0), 1e-15);
    EXPECT_NEAR(text_seg_loss(word_masks<double>({col({60.0})}), {1}, all).item(), 0.0, 1e-20);
}

TEST(TextSegLoss, MatchesDirectCrossEntropy) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto logits = random_logits(2, 6, rng);
        std::vector<std::size_t> labels(6);
        std::vector<bool> counted(6);
        for (std::size_t i = 0; i < 6; ++i) {
            labels[i] = rng.below(3);
            counted[i] = i < 4;
        }
        const auto ws = word_masks(logits);
        double expected = 0;
        for (std::size_t i = 0; i < 4; ++i) {
            const double p = labels[i] == 0 ? ws.residual.value()[i] : ws.masks[labels[i] - 1].value()[i];
            expected -= std::log(p) / 4.0;
        }
        EXPECT_NEAR(text_seg_loss(ws, labels, counted).item(), expected, 1e-9);
    }
}

TEST(TextSegLoss, GradientCheck) {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
        auto logits = random_logits(3, 5, rng);
        std::vector<std::size_t> labels(5);
        for (auto& l : labels) l = rng.below(4);
        const std::vector<bool> counted{true, true, true, true, false};
        EXPECT_LT(gradcheck(logits, [&] { return text_seg_loss(word_masks(logits), labels, counted); }), 1e-4);
    }
}

TEST(ImageSegLoss, AreaAndSmoothnessZeroCases) {
    ImageSegLossConfig cfg;
    cfg.use_contrast = false;
    const auto up = bilinear_matrix<double>(2, 2, 4, 4);
    auto mask = ag::constant<double>(16, 1, 0.3);
    auto map = ag::constant<double>(4, 2, 1.0);
    const auto parts = image_seg_loss<double>({mask}, {map}, {row({1, 0})}, 4, 4, up, cfg);
    EXPECT_DOUBLE_EQ(parts.area->item(), 0.0);
    EXPECT_DOUBLE_EQ(parts.tv->item(), 0.0);
    auto tiny = ag::constant<double>(16, 1, 0.01);
    EXPECT_NEAR(image_seg_loss<double>({tiny}, {map}, {row({1, 0})}, 4, 4, up, cfg).area->item(), 0.04, 1e-15);
}

TEST(ImageSegLoss, ContrastMatchesTwoByTwoOracle) {
    ImageSegLossConfig cfg;
    cfg.use_area = cfg.use_tv = false;
    Rng rng(9);
    const auto up = bilinear_matrix<double>(2, 2, 2, 2);
    std::vector<V> masks, maps, nouns;
    for (int b = 0; b < 2; ++b) {
        std::vector<double> m(4);
        for (auto& x : m) x = rng.uniform(0.1, 0.9);
        masks.push_back(col(m));
        maps.push_back(random(4, 3, rng));
        nouns.push_back(random(1, 3, rng));
    }
    // pooled feature = sum_p m_p x_p / sum_p m_p, then cosine with nouns
    double f[2][3], s[2][2];
    for (int b = 0; b < 2; ++b) {
        double msum = 0;
        for (int c = 0; c < 3; ++c) f[b][c] = 0;
        for (int p = 0; p < 4; ++p) {
            msum += masks[b].value()[p];
            for (int c = 0; c < 3; ++c) f[b][c] += masks[b].value()[p] * maps[b].at(p, c);
        }
        for (int c = 0; c < 3; ++c) f[b][c] /= msum + 1e-6;
    }
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            double d = 0, nf = 0, nn = 0;
            for (int c = 0; c < 3; ++c) {
                d += f[i][c] * nouns[j].value()[c];
                nf += f[i][c] * f[i][c];
                nn += nouns[j].value()[c] * nouns[j].value()[c];
            }
            s[i][j] = d / std::sqrt(nf * nn) / cfg.contrast_temperature;
        }
    double expected = 0;
    for (int i = 0; i < 2; ++i) {
        expected -= 0.25 * (s[i][i] - std::log(std::exp(s[i][0]) + std::exp(s[i][1])));
        expected -= 0.25 * (s[i][i] - std::log(std::exp(s[0][i]) + std::exp(s[1][i])));
    }
    const auto parts = image_seg_loss(masks, maps, nouns, 2, 2, up, cfg);
    EXPECT_NEAR(parts.contrast->item(), expected, 1e-9);
}

TEST(ImageSegLoss, GradientCheck) {
    Rng rng(10);
    ImageSegLossConfig cfg;
    cfg.area_lo = 0.4;  // keep the hinge active and away from its kink
    const auto up = bilinear_matrix<double>(2, 2, 4, 4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<V> logits, maps, nouns;
        for (int b = 0; b < 3; ++b) {
            logits.push_back(random(16, 1, rng));
            maps.push_back(random(4, 3, rng));
            nouns.push_back(random(1, 3, rng));
        }
        std::vector<V> leaves = logits;
        leaves.insert(leaves.end(), maps.begin(), maps.end());
        leaves.insert(leaves.end(), nouns.begin(), nouns.end());
        EXPECT_LT(gradcheck(leaves,
                            [&] {
                                std::vector<V> masks;
                                for (const auto& l : logits) masks.push_back(ag::sigmoid(l));
                                return image_seg_loss(masks, maps, nouns, 4, 4, up, cfg).total;
                            }),
                  1e-4);
    }
}
