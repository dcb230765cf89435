// Command-line front end: train, eval, segment, synth, ablate.

#include "code/eval.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace code;

std::string checkpoint_dtype(const std::string& path) {
    return read_archive(path).header.value("dtype", "float64");
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

template <typename T>
int train(TrainConfig cfg, const std::string& out) {
    Trainer<T> trainer(cfg);
    std::ofstream metrics;
    if (!cfg.metrics_path.empty()) {
        metrics.open(cfg.metrics_path);
        if (!metrics) throw Error("cannot write metrics file: " + cfg.metrics_path);
        trainer.set_metrics_stream(&metrics);
    }
    const auto t0 = std::chrono::steady_clock::now();
    trainer.run([&](const StepResult& r) {
        if (r.step % 100 != 0 && r.step != cfg.schedule.steps) return;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::fprintf(stderr, "step %5ld  total %.4f  lr %.2e  tau %.4f  %.0fs\n", r.step, r.total, r.lr, r.tau, secs);
    });
    trainer.save(out);
    std::cerr << "saved " << out << '\n';
    return 0;
}

template <typename T>
int evaluate(const std::string& ckpt, const std::string& manifest_path, ClassVocabulary vocab) {
    const auto trainer = Trainer<T>::load(ckpt);
    const auto manifest = load_manifest(manifest_path);
    const std::size_t size = trainer->config().model.image_size;
    std::vector<LabelMap> preds, gts;
    for (const auto& e : manifest.entries) {
        if (e.label.empty()) throw Error("manifest entry without a label map: " + e.image);
        const auto image = read_png(manifest.resolve(e.image));
        LabelMap gt = read_label_map(manifest.resolve(e.label));
        if (gt.height != image.height || gt.width != image.width)
            throw Error("label map size differs from its image: " + e.label);
        const auto small = resize_image(image, size, size);
        LabelMap pred = segment_image(trainer->model(), small, vocab).labels;
        preds.push_back(resize_labels(pred, gt.height, gt.width));
        gts.push_back(std::move(gt));
    }
    print_json(miou(preds, gts, vocab).to_json());
    return 0;
}

template <typename T>
int segment(const std::string& ckpt, const std::string& image_path, const ClassVocabulary& vocab,
            const std::string& out) {
    const auto trainer = Trainer<T>::load(ckpt);
    const std::size_t size = trainer->config().model.image_size;
    const auto image = read_png(image_path);
    const auto pred = segment_image(trainer->model(), resize_image(image, size, size), vocab).labels;
    write_label_map(out, resize_labels(pred, image.height, image.width));
    return 0;
}

template <typename T>
int ablate(const TrainConfig& cfg, const AblationOptions& opts, const std::string& out) {
    AblationRunner<T> runner(cfg, opts);
    const auto components = runner.components();
    const auto sweep = runner.hcl_sweep();
    std::cout << components.to_text() << '\n' << sweep.to_text();
    if (!out.empty()) std::ofstream(out) << nlohmann::json{components.to_json(), sweep.to_json()}.dump(2) << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Co-decomposition open-vocabulary segmentation toolkit"};
    app.require_subcommand(1);

    auto* train_cmd = app.add_subcommand("train", "Train a model");
    std::string config_path, out = "model.ckpt";
    std::vector<std::string> sets;
    train_cmd->add_option("--config", config_path, "key = value config file")->check(CLI::ExistingFile);
    train_cmd->add_option("--set", sets, "Override a config key (k=v), repeatable");
    train_cmd->add_option("--out", out, "Final checkpoint path");

    auto* eval_cmd = app.add_subcommand("eval", "mIoU of a checkpoint on a labelled manifest");
    std::string ckpt, manifest, classes;
    double threshold = 0.5;
    eval_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--manifest", manifest)->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--classes", classes, "Class file, one name per line")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--background-threshold", threshold)->check(CLI::Range(0.0, 1.0));

    auto* seg_cmd = app.add_subcommand("segment", "Write a paletted label mask for one image");
    std::string image, class_list, mask_out;
    seg_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
    seg_cmd->add_option("--image", image)->required()->check(CLI::ExistingFile);
    seg_cmd->add_option("--classes", class_list, "Comma-separated class names")->required();
    seg_cmd->add_option("--out", mask_out)->required();
    seg_cmd->add_option("--background-threshold", threshold)->check(CLI::Range(0.0, 1.0));

    auto* synth_cmd = app.add_subcommand("synth", "Export a synthetic shapes corpus");
    std::string synth_dir;
    std::size_t count = 500;
    std::uint64_t seed = 7;
    synth_cmd->add_option("--out", synth_dir)->required();
    synth_cmd->add_option("--n", count)->check(CLI::PositiveNumber);
    synth_cmd->add_option("--seed", seed);

    auto* ablate_cmd = app.add_subcommand("ablate", "Component table and lambda_hcl sweep");
    std::string profile = "desk", ablate_out;
    AblationOptions ablate_opts;
    ablate_cmd->add_option("--profile", profile);
    ablate_cmd->add_option("--set", sets, "Override a config key (k=v), repeatable");
    ablate_cmd->add_option("--eval-count", ablate_opts.eval_count, "Images per split")->check(CLI::PositiveNumber);
    ablate_cmd->add_option("--json", ablate_out, "Also write both tables as JSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train_cmd) {
            TrainConfig cfg = config_path.empty() ? profile_config("desk") : load_config(config_path);
            for (const auto& s : sets) apply_override(cfg, s);
            cfg.validate();
            return cfg.precision == "float32" ? train<float>(cfg, out) : train<double>(cfg, out);
        }
        if (*eval_cmd) {
            auto vocab = load_class_file(classes);
            vocab.background_threshold = threshold;
            return checkpoint_dtype(ckpt) == "float32" ? evaluate<float>(ckpt, manifest, vocab)
                                                       : evaluate<double>(ckpt, manifest, vocab);
        }
        if (*seg_cmd) {
            auto vocab = parse_class_list(class_list);
            vocab.background_threshold = threshold;
            return checkpoint_dtype(ckpt) == "float32" ? segment<float>(ckpt, image, vocab, mask_out)
                                                       : segment<double>(ckpt, image, vocab, mask_out);
        }
        if (*synth_cmd) {
            const Tokenizer tok;
            SyntheticSpec spec;
            spec.count = count;
            spec.seed = seed;
            export_synthetic_corpus(synth_dir, generate_synthetic_corpus(spec, tok), spec.shapes);
            std::ofstream(std::filesystem::path(synth_dir) / "classes.txt") << [&] {
                std::string s;
                for (const auto& c : spec.shapes) s += c + '\n';
                return s;
            }();
            std::cerr << "wrote " << count << " samples to " << synth_dir << '\n';
            return 0;
        }
        if (*ablate_cmd) {
            TrainConfig cfg = profile_config(profile);
            for (const auto& s : sets) apply_override(cfg, s);
            cfg.validate();
            ablate_opts.log = [](const std::string& m) { std::cerr << m << '\n'; };
            return cfg.precision == "float32" ? ablate<float>(cfg, ablate_opts, ablate_out)
                                              : ablate<double>(cfg, ablate_opts, ablate_out);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
