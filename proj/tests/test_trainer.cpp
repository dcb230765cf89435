#include "code/trainer.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using namespace code;

namespace {

TrainConfig small_config() {
    TrainConfig c = profile_config("desk");
    c.synthetic_count = 40;
    c.batch_size = 4;
    c.schedule = ScheduleConfig{10, 2, 1e-3};
    c.pretrain.steps = 2;
    c.pretrain.warmup_steps = 1;
    c.pretrain.batch_size = 4;
    return c;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("code_test_" + std::to_string(::getpid()) + "_" + name);
}

bool any_nonzero(const std::vector<double>& g) {
    return std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; });
}

std::vector<std::string> run_metrics(Trainer<double>& t, long until) {
    std::vector<std::string> out;
    while (t.step() < until) {
        std::ostringstream os;
        write_metrics(os, t.train_step());
        out.push_back(os.str());
    }
    return out;
}

}  // namespace

TEST(Schedule, WarmupThenCosine) {
    const ScheduleConfig s{100, 10, 2e-3};
    EXPECT_DOUBLE_EQ(lr_at(0, s), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(5, s), 1e-3);
    EXPECT_DOUBLE_EQ(lr_at(10, s), 2e-3);
    EXPECT_NEAR(lr_at(55, s), 1e-3, 1e-15);
    EXPECT_NEAR(lr_at(100, s), 0.0, 1e-18);
    for (long t = 1; t <= 100; ++t) EXPECT_LE(std::abs(lr_at(t, s) - lr_at(t - 1, s)), 2e-4 + 1e-12);
    EXPECT_THROW(lr_at(101, s), Error);
}

TEST(AdamW, MatchesScalarReference) {
    ParamStore<double> ps;
    auto w = ps.filled("p.weight", 1, 1, 0.5, "test");
    auto b = ps.filled("p.bias", 1, 1, 0.5, "test");
    AdamWConfig cfg;
    cfg.weight_decay = 0.1;
    AdamW<double> opt(cfg);
    double x[2] = {0.5, 0.5}, m[2] = {0, 0}, v[2] = {0, 0};
    for (int t = 1; t <= 50; ++t) {
        ps.zero_grad();
        auto loss = ag::add(ag::square(ag::add_const(w, -3.0)), ag::square(ag::add_const(b, -3.0)));
        ag::backward(loss);
        const double lr = 0.05;
        opt.step(ps, lr);
        for (int k = 0; k < 2; ++k) {
            const double g = 2 * (x[k] - 3.0);
            m[k] = 0.9 * m[k] + 0.1 * g;
            v[k] = 0.999 * v[k] + 0.001 * g * g;
            const double mh = m[k] / (1 - std::pow(0.9, t)), vh = v[k] / (1 - std::pow(0.999, t));
            x[k] -= lr * (mh / (std::sqrt(vh) + 1e-8) + (k == 0 ? 0.1 * x[k] : 0.0));
        }
        ASSERT_NEAR(w.value()[0], x[0], 1e-12);
        ASSERT_NEAR(b.value()[0], x[1], 1e-12);
    }
    EXPECT_TRUE(decays("image.blocks.0.attn.weight"));
    EXPECT_FALSE(decays("image.blocks.0.ln1.bias"));
}

TEST(Batch, SizesAndDistinctPairs) {
    const auto cfg = small_config();
    const Tokenizer tok;
    const auto data = build_training_data(cfg, tok, LexiconTagger{});
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const auto b = build_batch(data, cfg, rng);
        EXPECT_EQ(b.triplets.size(), 4u);
        EXPECT_EQ(std::set<std::size_t>(b.pairs.begin(), b.pairs.end()).size(), b.pairs.size());
        for (const auto& t : b.triplets) EXPECT_FALSE(data[b.pairs[t.slot]].nouns.empty());
    }
}

TEST(Batch, TwoNounPairsFillTwoTripletsEach) {
    auto cfg = small_config();
    const Tokenizer tok;
    SyntheticSpec spec;
    spec.count = 20;
    spec.min_shapes = spec.max_shapes = 2;
    auto data = dataset_from_synthetic(generate_synthetic_corpus(spec, tok));
    std::erase_if(data, [](const Pair& p) { return p.nouns.size() != 2; });
    Rng rng(2);
    const auto b = build_batch(data, cfg, rng);
    EXPECT_EQ(b.pairs.size(), 2u);
    EXPECT_EQ(b.triplets.size(), 4u);
}

TEST(Batch, SkipsNounlessPairsAndIsDeterministic) {
    const auto cfg = small_config();
    const Tokenizer tok;
    auto data = build_training_data(cfg, tok, LexiconTagger{});
    for (std::size_t i = 0; i < data.size(); i += 2) data[i].nouns.clear();
    Rng a(3), b(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto x = build_batch(data, cfg, a), y = build_batch(data, cfg, b);
        EXPECT_EQ(x.pairs, y.pairs);
        for (auto i : x.pairs) EXPECT_EQ(i % 2, 1u);
    }
    for (auto& p : data) p.nouns.clear();
    EXPECT_THROW(build_batch(data, cfg, a), Error);
}

TEST(Losses, AllTermsFiniteWithEveryComponent) {
    Trainer<double> t(small_config());
    const auto r = t.train_step();
    for (const char* name : kLossTerms) {
        ASSERT_TRUE(r.terms.at(name)) << name;
        EXPECT_TRUE(std::isfinite(*r.terms.at(name))) << name;
    }
    EXPECT_TRUE(std::isfinite(r.total));
}

TEST(Losses, WithoutCoDecompositionTextSideIsAbsent) {
    auto cfg = small_config();
    cfg.flags.co_decomposition = false;
    Trainer<double> t(cfg);
    t.pretrain();
    Rng rng(4);
    const auto batch = build_batch(t.dataset(), cfg, rng);
    auto parts = forward_losses(t.model(), t.dataset(), batch, cfg, Mode{});
    EXPECT_FALSE(parts.hcl);
    EXPECT_FALSE(parts.seg_t);
    ASSERT_TRUE(parts.kg && parts.seg_v);
    t.model().params.zero_grad();
    auto loss = total_loss(parts, cfg.weights);
    ag::backward(loss);
    for (const auto& e : t.model().params.entries())
        if (e.group == groups::kPrompts || e.group == groups::kTextSegmenter)
            EXPECT_FALSE(any_nonzero(e.var.grad_or_empty())) << e.name;
}

TEST(Losses, AlignmentGradientReachesBothMaskHeads) {
    auto cfg = small_config();
    cfg.weights = LossWeights{0, 0, 0, 1};
    Trainer<double> t(cfg);
    t.pretrain();
    Rng rng(5);
    const auto batch = build_batch(t.dataset(), cfg, rng);
    auto parts = forward_losses(t.model(), t.dataset(), batch, cfg, Mode{});
    t.model().params.zero_grad();
    auto loss = total_loss(parts, cfg.weights);
    ag::backward(loss);
    const auto& h = t.model().head;
    EXPECT_TRUE(any_nonzero(h.gamma.grad_or_empty()));
    EXPECT_TRUE(any_nonzero(h.word_scale.grad_or_empty()));
    bool segmenter = false, prompt = false;
    for (const auto& e : t.model().params.entries()) {
        if (e.group == groups::kTextSegmenter) segmenter |= any_nonzero(e.var.grad_or_empty());
        if (e.group == groups::kPrompts) prompt |= any_nonzero(e.var.grad_or_empty());
    }
    EXPECT_TRUE(segmenter);
    EXPECT_TRUE(prompt);
}

TEST(Trainer, IdenticalRunsGiveIdenticalMetrics) {
    auto cfg = small_config();
    cfg.schedule.steps = 4;
    Trainer<double> a(cfg), b(cfg);
    EXPECT_EQ(run_metrics(a, 4), run_metrics(b, 4));
}

TEST(Trainer, MetricsStreamFormat) {
    auto cfg = small_config();
    cfg.flags.co_decomposition = false;
    Trainer<double> t(cfg);
    std::ostringstream os;
    t.set_metrics_stream(&os);
    t.train_step();
    std::istringstream in(os.str());
    std::string line;
    std::set<std::string> names;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_EQ(j.at("step"), 1);
        names.insert(j.at("name"));
        if (j.at("name") == "hcl") EXPECT_TRUE(j.at("value").is_null());
    }
    EXPECT_EQ(names, (std::set<std::string>{"kg", "seg_v", "seg_t", "hcl", "total", "lr", "tau"}));
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
    Trainer<double> t(small_config());
    t.train_step();
    const auto path = temp_path("roundtrip.ckpt");
    t.save(path);
    const auto loaded = Trainer<double>::load(path);
    EXPECT_EQ(loaded->step(), 1);
    ASSERT_EQ(loaded->model().params.entries().size(), t.model().params.entries().size());
    for (std::size_t k = 0; k < t.model().params.entries().size(); ++k)
        EXPECT_EQ(loaded->model().params.entries()[k].var.value(), t.model().params.entries()[k].var.value());
    EXPECT_EQ(encode_archive(loaded->to_archive()), encode_archive(t.to_archive()));
    EXPECT_THROW(Trainer<float>::load(path), Error);
    std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected) {
    Trainer<double> t(small_config());
    const auto path = temp_path("corrupt.ckpt");
    t.save(path);
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 10);
    EXPECT_THROW(Trainer<double>::load(path), Error);
    t.save(path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(size - 20));
        f.put('\x5a');
    }
    EXPECT_THROW(Trainer<double>::load(path), Error);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ResumeMatchesContinuousRun) {
    const auto cfg = small_config();
    Trainer<double> full(cfg);
    const auto reference = run_metrics(full, 10);

    Trainer<double> first(cfg);
    auto resumed = run_metrics(first, 5);
    const auto path = temp_path("resume.ckpt");
    first.save(path);
    auto second = Trainer<double>::load(path);
    const auto rest = run_metrics(*second, 10);
    resumed.insert(resumed.end(), rest.begin(), rest.end());
    EXPECT_EQ(resumed, reference);
    std::filesystem::remove(path);
}

TEST(Config, ParseOverridesAndErrors) {
    std::istringstream in("# comment\nsteps = 50\nlambda_hcl = 0.25\nco_decomposition = false\n");
    auto c = parse_config(in);
    EXPECT_EQ(c.schedule.steps, 50);
    EXPECT_DOUBLE_EQ(c.weights.hcl, 0.25);
    EXPECT_FALSE(c.flags.co_decomposition);
    apply_override(c, "lr=0.01");
    EXPECT_DOUBLE_EQ(c.schedule.lr, 0.01);
    EXPECT_THROW(apply_override(c, "no_such_key=1"), Error);
    EXPECT_THROW(apply_override(c, "steps"), Error);
    std::istringstream bad("steps 50\n");
    EXPECT_THROW(parse_config(bad), Error);

    const auto paper = profile_config("paper");
    EXPECT_EQ(paper.batch_size, 64u);
    EXPECT_EQ(paper.schedule.steps, 50000);
    EXPECT_EQ(paper.schedule.warmup_steps, 15000);
    EXPECT_DOUBLE_EQ(paper.schedule.lr, 5e-6);
    EXPECT_DOUBLE_EQ(paper.adamw.weight_decay, 0.05);
    EXPECT_EQ(paper.nouns_per_pair, 2u);
    const LossWeights w;
    EXPECT_DOUBLE_EQ(w.kg, 8.0);
    EXPECT_DOUBLE_EQ(w.seg_v, 1.0);
    EXPECT_DOUBLE_EQ(w.seg_t, 1.0);
    EXPECT_DOUBLE_EQ(w.hcl, 0.5);
}

TEST(Config, MapRoundTrips) {
    auto c = small_config();
    c.weights.kg = 3.5;
    TrainConfig d = profile_config("desk");
    for (const auto& [k, v] : config_map(c)) set_key(d, k, v);
    EXPECT_EQ(config_map(d), config_map(c));
}
