#include "code/highlight.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <numeric>

using namespace code;
using testing_support::gradcheck;
using testing_support::V;

namespace {

V random(std::size_t r, std::size_t c, Rng& rng, double lo = 0.0, double hi = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return ag::leaf<double>(r, c, std::move(v));
}

V filled(std::size_t r, std::size_t c, double x) { return ag::leaf<double>(r, c, std::vector<double>(r * c, x)); }

}  // namespace

TEST(HighlightRegion, FullAndEmptyMasksAreExact) {
    Rng rng(1);
    const auto x = random(64, 3, rng), p = random(64, 3, rng, -1.0, 2.0);
    EXPECT_EQ(highlight_region(x, filled(64, 1, 1.0), p).value(), x.value());
    EXPECT_EQ(highlight_region(x, filled(64, 1, 0.0), p).value(), p.value());
}

TEST(HighlightRegion, HalfMaskAverages) {
    const auto h = highlight_region(filled(4, 3, 0.2), filled(4, 1, 0.5), filled(4, 3, 0.8));
    for (double v : h.value()) EXPECT_NEAR(v, 0.5, 1e-15);
}

TEST(HighlightText, ScalarExample) {
    const auto h = highlight_text(filled(3, 5, 1.0), filled(3, 1, 0.25), filled(3, 5, -1.0));
    for (double v : h.value()) EXPECT_NEAR(v, -0.5, 1e-15);
}

TEST(Highlight, MaskGradientIsContentMinusPrompt) {
    Rng rng(2);
    auto x = random(6, 3, rng), p = random(6, 3, rng), m = random(6, 1, rng);
    const auto w = random(6, 3, rng, -1.0, 1.0);
    auto loss = ag::sum(ag::mul(highlight_region(x, m, p), w));
    ag::backward(loss);
    for (std::size_t i = 0; i < 6; ++i) {
        double expected = 0;
        for (std::size_t c = 0; c < 3; ++c) expected += w.at(i, c) * (x.at(i, c) - p.at(i, c));
        EXPECT_NEAR(m.grad()[i], expected, 1e-12);
    }
    EXPECT_LT(gradcheck({x, m, p}, [&] { return ag::sum(ag::mul(highlight_text(x, m, p), w)); }), 1e-6);
}

TEST(Highlight, CommutesWithRowPermutation) {
    Rng rng(3);
    const auto x = random(10, 4, rng), p = random(10, 4, rng), m = random(10, 1, rng);
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size() - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    const auto a = ag::gather_rows(highlight_text(x, m, p), perm);
    const auto b = highlight_text(ag::gather_rows(x, perm), ag::gather_rows(m, perm), ag::gather_rows(p, perm));
    EXPECT_EQ(a.value(), b.value());
}

TEST(Highlight, ZeroPromptGivesBlankMasking) {
    Rng rng(4);
    const auto x = random(16, 3, rng), m = random(16, 1, rng);
    const auto h = highlight_region(x, m, filled(16, 3, 0.0));
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(h.at(i, c), x.at(i, c) * m.at(i, 0));
}

TEST(Highlight, RejectsShapeMismatch) {
    EXPECT_THROW(highlight_region(filled(4, 3, 0), filled(3, 1, 0), filled(4, 3, 0)), Error);
    EXPECT_THROW(highlight_text(filled(4, 3, 0), filled(4, 2, 0), filled(4, 3, 0)), Error);
    EXPECT_THROW(highlight_text(filled(4, 3, 0), filled(4, 1, 0), filled(4, 2, 0)), Error);
}

TEST(Prompts, RegionResizeAndWordRows) {
    ParamStore<double> ps;
    ModelConfig mc;
    Rng rng(5);
    Prompts<double> pr(ps, mc, PromptConfig{}, rng);
    EXPECT_EQ(pr.region_at(mc.image_size, mc.image_size).value(), pr.region.value());
    EXPECT_EQ(pr.region_at(16, 16).rows(), 256u);
    EXPECT_EQ(pr.word_rows(5).rows(), 5u);
    EXPECT_THROW(pr.word_rows(mc.max_text_len + 1), Error);

    PromptConfig shared;
    shared.repeated_word_prompt = true;
    ParamStore<double> ps2;
    Prompts<double> rep(ps2, mc, shared, rng);
    const auto rows = rep.word_rows(4);
    for (std::size_t c = 0; c < mc.width; ++c) EXPECT_EQ(rows.at(3, c), rows.at(0, c));
}
