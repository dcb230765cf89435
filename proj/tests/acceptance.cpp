// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset, e.g. `acceptance 1 2 3 4`.

#include "code/eval.hpp"
#include "support.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

using namespace code;
using testing_support::gradcheck;
using testing_support::V;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void progress(const std::string& msg) { std::cerr << "  .. " << msg << std::endl; }

struct Outcome {
    bool pass = false;
    std::string detail;
    double seconds = 0;
    double limit = 0;
};

V random(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    std::vector<double> v(r * c);
    for (auto& x : v) x = rng.normal(0.0, scale);
    return ag::leaf<double>(r, c, std::move(v));
}

V matrix(std::size_t n, std::vector<double> v) {
    const std::size_t cols = v.size() / n;
    return ag::leaf<double>(n, cols, std::move(v));
}

std::string fmt(double x, int prec = 6) {
    std::ostringstream os;
    os.precision(prec);
    os << x;
    return os.str();
}

Outcome formula_oracles() {
    Rng rng(101);
    double worst = 0;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t j = 1 + rng.below(8), len = 1 + rng.below(64);
        const double scale = rng.uniform(0.1, 20.0);
        std::vector<V> logits;
        for (std::size_t k = 0; k < j; ++k) logits.push_back(random(len, 1, rng, scale));
        const auto ws = word_masks(logits);
        for (std::size_t i = 0; i < len; ++i) {
            double s = ws.residual.value()[i];
            for (const auto& m : ws.masks) s += m.value()[i];
            worst = std::max(worst, std::abs(s - 1.0));
        }
    }
    const double b1 = hcl_loss(matrix(1, {0.4}), 1.0).item();
    const double logb = hcl_loss(matrix(5, std::vector<double>(25, 0.3)), 1.0).item();
    const double two = hcl_loss(matrix(2, {2, 0, 0, 2}), 1.0).item();
    const double hcl_err =
        std::max({std::abs(b1), std::abs(logb - std::log(5.0)), std::abs(two - 0.126928)});
    return {worst < 1e-6 && hcl_err < 1e-6,
            "simplex max deviation " + fmt(worst, 3) + ", hcl closed forms max error " + fmt(hcl_err, 3)};
}

Outcome gradient_checks() {
    Rng rng(202);
    std::map<std::string, double> worst;
    std::map<std::string, int> count;
    auto record = [&](const std::string& name, double err) {
        worst[name] = std::max(worst[name], err);
        ++count[name];
    };
    for (int trial = 0; trial < 25; ++trial) {
        auto n = random(1, 8, rng), np = random(1, 8, rng);
        record("kg", gradcheck({n}, [&] { return kg_loss<double>({n, np}); }));

        const std::size_t j = 1 + rng.below(3), len = 3 + rng.below(6);
        std::vector<V> logits;
        for (std::size_t k = 0; k < j; ++k) logits.push_back(random(len, 1, rng, 2.0));
        std::vector<std::size_t> labels(len);
        std::vector<bool> counted(len);
        for (std::size_t i = 0; i < len; ++i) {
            labels[i] = rng.below(j + 1);
            counted[i] = i + 1 < len;
        }
        record("seg_t", gradcheck(logits, [&] { return text_seg_loss(word_masks(logits), labels, counted); }));

        ImageSegLossConfig cfg;
        cfg.area_lo = 0.4;  // keeps the hinge active away from its kink
        const auto up = bilinear_matrix<double>(2, 2, 4, 4);
        std::vector<V> mlogits, maps, nouns;
        for (int b = 0; b < 3; ++b) {
            mlogits.push_back(random(16, 1, rng));
            maps.push_back(random(4, 4, rng));
            nouns.push_back(random(1, 4, rng));
        }
        std::vector<V> leaves = mlogits;
        leaves.insert(leaves.end(), maps.begin(), maps.end());
        leaves.insert(leaves.end(), nouns.begin(), nouns.end());
        record("seg_v", gradcheck(leaves, [&] {
                   std::vector<V> masks;
                   for (const auto& l : mlogits) masks.push_back(ag::sigmoid(l));
                   return image_seg_loss(masks, maps, nouns, 4, 4, up, cfg).total;
               }));

        const std::size_t b = 2 + rng.below(6);
        auto s = ag::leaf<double>(b, b, ag::l2_normalize_rows(random(b, b, rng)).value());
        auto log_tau = ag::leaf<double>(1, 1, {std::log(rng.uniform(0.05, 1.0))});
        record("hcl", gradcheck({s, log_tau}, [&] { return hcl_loss(s, log_tau); }));
    }
    bool ok = true;
    std::string detail;
    for (const auto& [name, err] : worst) {
        ok &= err < 1e-4 && count[name] >= 20;
        detail += (detail.empty() ? "" : ", ") + name + " " + fmt(err, 2) + " (" + std::to_string(count[name]) + ")";
    }
    return {ok, "max relative error " + detail};
}

Outcome blending_identities() {
    Rng rng(303);
    bool exact = true;
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t rows = 1 + rng.below(64), cols = trial % 2 ? 3 : 1 + rng.below(32);
        auto x = random(rows, cols, rng), p = random(rows, cols, rng);
        const auto ones = ag::constant<double>(rows, 1, 1.0), zeros = ag::constant<double>(rows, 1, 0.0);
        exact &= highlight_region(x, ones, p).value() == x.value();
        exact &= highlight_region(x, zeros, p).value() == p.value();
        exact &= highlight_text(x, ones, p).value() == x.value();
        exact &= highlight_text(x, zeros, p).value() == p.value();

        std::vector<double> mv(rows);
        for (auto& m : mv) m = rng.uniform(0.0, 1.0);
        auto m = ag::leaf<double>(rows, 1, mv);
        auto w = random(rows, cols, rng);
        auto loss = ag::sum(ag::mul(cols == 3 ? highlight_region(x, m, p) : highlight_text(x, m, p), w));
        ag::backward(loss);
        for (std::size_t i = 0; i < rows; ++i) {
            double expected = 0;
            for (std::size_t c = 0; c < cols; ++c) expected += w.at(i, c) * (x.at(i, c) - p.at(i, c));
            worst = std::max(worst, std::abs(m.grad()[i] - expected));
        }
    }
    return {exact && worst < 1e-12,
            std::string(exact ? "identities bit-exact" : "identities NOT exact") + ", dH/dM max error " + fmt(worst, 3)};
}

Outcome miou_oracle() {
    Rng rng(404);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t k = 2 + rng.below(6);
        LabelMap p(8, 8), g(8, 8);
        for (std::size_t q = 0; q < 64; ++q) {
            p.labels[q] = static_cast<int>(rng.below(k));
            g.labels[q] = rng.below(8) == 0 ? kIgnoreLabel : static_cast<int>(rng.below(k));
        }
        std::vector<std::string> names;
        for (std::size_t c = 0; c < k; ++c) names.push_back("c" + std::to_string(c));
        const auto r = miou({p}, {g}, names);
        double sum = 0;
        int present = 0;
        bool same = true;
        for (std::size_t c = 0; c < k; ++c) {
            std::uint64_t inter = 0, uni = 0;
            for (std::size_t q = 0; q < 64; ++q) {
                if (g.labels[q] == kIgnoreLabel) continue;
                const bool a = p.labels[q] == static_cast<int>(c), b = g.labels[q] == static_cast<int>(c);
                inter += a && b;
                uni += a || b;
            }
            same &= r.intersection[c] == inter && r.union_[c] == uni;
            if (uni) {
                sum += static_cast<double>(inter) / static_cast<double>(uni);
                ++present;
            }
        }
        same &= r.miou == sum / present;
        mismatches += same ? 0 : 1;
    }
    return {mismatches == 0, std::to_string(mismatches) + " mismatches in 1000 trials"};
}

std::vector<std::string> metric_lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> wanted;
    for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
    auto want = [&](int c) { return wanted.empty() || wanted.count(c); };

    std::map<int, Outcome> results;
    auto timed = [&](int id, double limit, const std::function<Outcome()>& f) {
        const auto t0 = Clock::now();
        Outcome o = f();
        o.seconds = seconds_since(t0);
        o.limit = limit;
        results[id] = o;
    };

    if (want(1)) timed(1, 10, formula_oracles);
    if (want(2)) timed(2, 60, gradient_checks);
    if (want(3)) timed(3, 5, blending_identities);
    if (want(4)) timed(4, 10, miou_oracle);

    // Criteria 5-7 share the default desk run: it is the end-to-end model,
    // the first determinism stream and the C+W+R ablation row.
    const TrainConfig cfg = profile_config("desk");
    std::unique_ptr<Trainer<double>> main_run;
    std::string main_stream;
    if (want(5) || want(6) || want(7)) {
        const auto t0 = Clock::now();
        progress("training the desk profile (" + std::to_string(cfg.schedule.steps) + " steps)");
        main_run = std::make_unique<Trainer<double>>(cfg);
        std::ostringstream metrics;
        main_run->set_metrics_stream(&metrics);
        main_run->run([&](const StepResult& r) {
            if (r.step % 250 == 0) progress("step " + std::to_string(r.step) + " at " + fmt(seconds_since(t0), 4) + "s");
        });
        main_run->set_metrics_stream(nullptr);
        main_stream = metrics.str();
        const double train_seconds = seconds_since(t0);
        if (want(5)) {
            const auto eval_set = synthetic_eval_set(cfg, main_run->tokenizer(), 200, 1007, 1, 3);
            const auto e = evaluate_synthetic(main_run->model(), eval_set, synthetic_vocabulary());
            Outcome o;
            o.seconds = seconds_since(t0);
            o.limit = 900;
            o.pass = e.mean_class_iou >= 0.5 && e.word_accuracy >= 0.8 && o.seconds < o.limit;
            o.detail = "mean region IoU " + fmt(e.mean_class_iou, 4) + " (>= 0.5), word accuracy " +
                       fmt(e.word_accuracy, 4) + " (>= 0.8), training " + fmt(train_seconds, 4) + "s";
            results[5] = o;
        }
    }

    if (want(7)) {
        const auto t0 = Clock::now();
        progress("second desk run for determinism");
        Trainer<double> again(cfg);
        std::ostringstream metrics;
        again.set_metrics_stream(&metrics);
        const long resume_at = cfg.schedule.steps - 10;
        const auto ckpt = std::filesystem::temp_directory_path() / ("code_acceptance_" + std::to_string(::getpid()) + ".ckpt");
        std::size_t lines_at_resume = 0;
        again.run([&](const StepResult& r) {
            if (r.step == resume_at) {
                again.save(ckpt);
                lines_at_resume = metric_lines(metrics.str()).size();
            }
        });
        const auto stream = metric_lines(metrics.str());
        const bool identical = stream == metric_lines(main_stream) && !stream.empty();

        auto resumed = Trainer<double>::load(ckpt);
        std::ostringstream rest;
        resumed->set_metrics_stream(&rest);
        resumed->run();
        std::filesystem::remove(ckpt);
        const auto tail = metric_lines(rest.str());
        const bool resume_ok = tail.size() == stream.size() - lines_at_resume &&
                               std::equal(tail.begin(), tail.end(), stream.begin() + static_cast<long>(lines_at_resume));
        results[7] = {identical && resume_ok,
                      std::string(identical ? "metric streams identical" : "metric streams DIFFER") + " (" +
                          std::to_string(stream.size()) + " records), resume over last 10 steps " +
                          (resume_ok ? "matches" : "DIFFERS"),
                      seconds_since(t0), 0};
    }

    if (want(6)) {
        const auto t0 = Clock::now();
        AblationOptions opts;
        opts.log = progress;
        AblationRunner<double> runner(cfg, opts);
        runner.add_trained("C+W+R", std::move(main_run));
        const auto components = runner.components();
        const auto sweep = runner.hcl_sweep();
        std::cout << components.to_text() << '\n' << sweep.to_text() << '\n';
        const double none = components.rows.at(0).average, c = components.rows.at(1).average;
        const bool shape = components.rows.size() == 4 && sweep.rows.size() == 6;
        results[6] = {shape && c > none,
                      std::to_string(components.rows.size()) + " component rows, " + std::to_string(sweep.rows.size()) +
                          " sweep rows; baseline " + fmt(none, 4) + " vs co-decomposition " + fmt(c, 4),
                      seconds_since(t0), 0};
    }

    bool all = true;
    for (const auto& [id, o] : results) {
        const bool pass = o.pass && (o.limit == 0 || o.seconds < o.limit);
        all &= pass;
        std::printf("[%s] criterion %d: %s; %.1fs%s\n", pass ? "PASS" : "FAIL", id, o.detail.c_str(), o.seconds,
                    o.limit > 0 ? (" (limit " + fmt(o.limit, 4) + "s)").c_str() : "");
    }
    return all ? 0 : 1;
}
