#pragma once

// Zero-shot segmentation from class names, mIoU, word-mask accuracy and the
// ablation suite.

#include "code/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace code {

inline constexpr int kIgnoreLabel = 255;

struct ClassVocabulary {
    std::vector<std::string> names;
    bool has_background = true;
    double background_threshold = 0.5;
    bool use_template = false;  // embed names with the knowledge template instead of the learned context

    void validate() const {
        if (names.empty()) throw Error("class vocabulary is empty");
        std::set<std::string> seen;
        for (const auto& n : names) {
            if (n.empty()) throw Error("class vocabulary contains an empty name");
            if (!seen.insert(n).second) throw Error("duplicate class name: " + n);
        }
        if (!(background_threshold >= 0.0 && background_threshold <= 1.0))
            throw Error("background_threshold must lie in [0, 1]");
        if (names.size() + (has_background ? 1 : 0) > 255) throw Error("too many classes for 8-bit label maps");
    }
    // Label of class k; background is 0 when present.
    int label_of(std::size_t k) const { return static_cast<int>(k) + (has_background ? 1 : 0); }
    std::size_t label_count() const { return names.size() + (has_background ? 1 : 0); }
    std::string label_name(int label) const {
        if (has_background) return label == 0 ? "background" : names.at(static_cast<std::size_t>(label - 1));
        return names.at(static_cast<std::size_t>(label));
    }
};

// One class name per line; blank lines and '#' comments are skipped.
inline ClassVocabulary load_class_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("class file not found: " + path);
    ClassVocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line = config_detail::trim(line);
        if (!line.empty()) v.names.push_back(line);
    }
    v.validate();
    return v;
}

inline ClassVocabulary parse_class_list(const std::string& csv) {
    ClassVocabulary v;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) v.names.push_back(config_detail::trim(item));
    v.validate();
    return v;
}

struct LabelMap {
    std::size_t height = 0, width = 0;
    std::vector<int> labels;  // row-major

    LabelMap() = default;
    LabelMap(std::size_t h, std::size_t w, int fill = 0) : height(h), width(w), labels(h * w, fill) {}
    int& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
    int at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
};

struct Segmentation {
    LabelMap labels;
    std::vector<std::vector<double>> scores;  // per class, sigmoid scores (H*W)
};

// Per-class sigmoid(upsampled region logits); argmax over classes; pixels whose
// best score is below the threshold become background.
template <typename T>
Segmentation segment_image(const Model<T>& model, const ImageSample& image, const ClassVocabulary& vocab) {
    vocab.validate();
    const auto& enc = *model.encoders;
    const auto pixel_map = enc.embed_pixels(image);
    const std::size_t n = image.height * image.width;
    Segmentation out;
    out.labels = LabelMap(image.height, image.width);
    for (const auto& name : vocab.names) {
        const auto ne = model.noun(name);
        const auto& noun = vocab.use_template ? ne.n_prime : ne.n;
        const auto m = region_mask(pixel_map, noun, model.head.gamma, model.head.beta, enc.upsample());
        out.scores.emplace_back(m.value().begin(), m.value().end());
    }
    for (std::size_t p = 0; p < n; ++p) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < vocab.names.size(); ++k)
            if (out.scores[k][p] > out.scores[best][p]) best = k;
        const bool bg = vocab.has_background && out.scores[best][p] < vocab.background_threshold;
        out.labels.labels[p] = bg ? 0 : vocab.label_of(best);
    }
    return out;
}

struct IoUReport {
    std::vector<std::string> names;  // per label
    std::vector<std::uint64_t> intersection, union_;
    std::vector<std::optional<double>> iou;  // nullopt when the union is empty
    double miou = 0;

    // Mean IoU over the given labels that have a nonzero union.
    double mean_over(const std::vector<int>& labels) const {
        double s = 0;
        std::size_t k = 0;
        for (int l : labels)
            if (iou.at(static_cast<std::size_t>(l))) {
                s += *iou[static_cast<std::size_t>(l)];
                ++k;
            }
        return k ? s / static_cast<double>(k) : 0.0;
    }

    nlohmann::json to_json() const {
        auto round6 = [](double x) { return std::round(x * 1e6) / 1e6; };
        nlohmann::json per = nlohmann::json::object();
        nlohmann::json counts = nlohmann::json::object();
        for (std::size_t c = 0; c < names.size(); ++c) {
            per[names[c]] = iou[c] ? nlohmann::json(round6(*iou[c])) : nlohmann::json(nullptr);
            counts[names[c]] = {{"intersection", intersection[c]}, {"union", union_[c]}};
        }
        return {{"per_class_iou", per}, {"miou", round6(miou)}, {"pixel_counts", counts}};
    }
};

// Global per-label intersection and union over the whole set; ignore pixels
// (in either map) are excluded.
inline IoUReport miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                      const std::vector<std::string>& label_names) {
    if (preds.size() != gts.size()) throw Error("miou: prediction and ground-truth counts differ");
    const std::size_t k = label_names.size();
    IoUReport r;
    r.names = label_names;
    r.intersection.assign(k, 0);
    r.union_.assign(k, 0);
    std::vector<std::uint64_t> pred_count(k, 0), gt_count(k, 0);
    std::uint64_t valid = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const auto& p = preds[i];
        const auto& g = gts[i];
        if (p.height != g.height || p.width != g.width) throw Error("miou: label map shapes differ");
        for (std::size_t q = 0; q < p.labels.size(); ++q) {
            const int a = p.labels[q], b = g.labels[q];
            if (a == kIgnoreLabel || b == kIgnoreLabel) continue;
            if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= k || static_cast<std::size_t>(b) >= k)
                throw Error("miou: label outside the vocabulary");
            ++valid;
            ++pred_count[static_cast<std::size_t>(a)];
            ++gt_count[static_cast<std::size_t>(b)];
            if (a == b) ++r.intersection[static_cast<std::size_t>(a)];
        }
    }
    if (valid == 0) throw Error("miou: no valid pixels");
    double s = 0;
    std::size_t counted = 0;
    r.iou.assign(k, std::nullopt);
    for (std::size_t c = 0; c < k; ++c) {
        r.union_[c] = pred_count[c] + gt_count[c] - r.intersection[c];
        if (r.union_[c] == 0) continue;
        r.iou[c] = static_cast<double>(r.intersection[c]) / static_cast<double>(r.union_[c]);
        s += *r.iou[c];
        ++counted;
    }
    r.miou = s / static_cast<double>(counted);
    return r;
}

inline IoUReport miou(const std::vector<LabelMap>& preds, const std::vector<LabelMap>& gts,
                      const ClassVocabulary& vocab) {
    std::vector<std::string> names;
    for (std::size_t l = 0; l < vocab.label_count(); ++l) names.push_back(vocab.label_name(static_cast<int>(l)));
    return miou(preds, gts, names);
}

inline LabelMap synthetic_label_map(const SyntheticSample& s, const ClassVocabulary& vocab) {
    LabelMap m(s.image.height, s.image.width, vocab.has_background ? 0 : kIgnoreLabel);
    for (std::size_t k = 0; k < s.shapes.size(); ++k) {
        const auto it = std::find(vocab.names.begin(), vocab.names.end(), s.shapes[k].shape);
        const int label = it == vocab.names.end() ? kIgnoreLabel
                                                  : vocab.label_of(static_cast<std::size_t>(it - vocab.names.begin()));
        for (std::size_t p = 0; p < m.labels.size(); ++p)
            if (s.gt_region_masks[k][p]) m.labels[p] = label;
    }
    return m;
}

// Nearest-neighbour resampling of a label map.
inline LabelMap resize_labels(const LabelMap& m, std::size_t height, std::size_t width) {
    if (m.height == height && m.width == width) return m;
    LabelMap out(height, width);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            out.at(y, x) = m.at(std::min(m.height - 1, y * m.height / height), std::min(m.width - 1, x * m.width / width));
    return out;
}

inline LabelMap read_label_map(const std::string& path) {
    std::size_t w = 0, h = 0;
    const auto raw = read_label_png(path, w, h);
    LabelMap m(h, w);
    for (std::size_t i = 0; i < raw.size(); ++i) m.labels[i] = raw[i];
    return m;
}

inline void write_label_map(const std::string& path, const LabelMap& m) {
    std::vector<std::uint8_t> raw(m.labels.size());
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = static_cast<std::uint8_t>(m.labels[i]);
    write_label_png(path, m.width, m.height, raw);
}

// Fraction of ground-truth segment tokens whose argmax class over
// {none, noun_1..noun_J} is their own noun.
template <typename T>
double word_mask_accuracy(const Model<T>& model, const std::vector<SyntheticSample>& samples) {
    std::size_t correct = 0, total = 0;
    for (const auto& s : samples) {
        const auto word_map = model.encoders->embed_words(s.text);
        std::vector<ag::Var<T>> logits;
        for (const auto& q : s.nouns)
            logits.push_back(word_logits(word_map, model.noun(q.noun_text).n, model.head.word_scale,
                                         model.head.word_bias));
        const auto cls = pseudo_label_classes(logits);
        for (std::size_t k = 0; k < s.gt_word_masks.size(); ++k)
            for (std::size_t t = 0; t < s.gt_word_masks[k].size(); ++t)
                if (s.gt_word_masks[k][t]) {
                    ++total;
                    correct += cls[t] == k + 1 ? 1 : 0;
                }
    }
    if (total == 0) throw Error("word_mask_accuracy: no ground-truth segment tokens");
    return static_cast<double>(correct) / static_cast<double>(total);
}

inline std::vector<SyntheticSample> synthetic_eval_set(const TrainConfig& cfg, const Tokenizer& tok,
                                                       std::size_t count, std::uint64_t seed,
                                                       std::size_t min_shapes, std::size_t max_shapes) {
    SyntheticSpec spec;
    spec.count = count;
    spec.seed = seed;
    spec.image_size = cfg.model.image_size;
    spec.max_text_len = cfg.model.max_text_len;
    spec.min_shapes = min_shapes;
    spec.max_shapes = max_shapes;
    return generate_synthetic_corpus(spec, tok);
}

inline ClassVocabulary synthetic_vocabulary(double background_threshold = 0.5) {
    ClassVocabulary v;
    v.names = SyntheticSpec{}.shapes;
    v.has_background = true;
    v.background_threshold = background_threshold;
    return v;
}

struct SyntheticEval {
    IoUReport report;
    double mean_class_iou = 0;  // over the shape classes, background excluded
    double word_accuracy = 0;
};

template <typename T>
SyntheticEval evaluate_synthetic(const Model<T>& model, const std::vector<SyntheticSample>& samples,
                                 const ClassVocabulary& vocab) {
    std::vector<LabelMap> preds, gts;
    for (const auto& s : samples) {
        preds.push_back(segment_image(model, s.image, vocab).labels);
        gts.push_back(synthetic_label_map(s, vocab));
    }
    SyntheticEval e;
    e.report = miou(preds, gts, vocab);
    std::vector<int> fg;
    for (std::size_t k = 0; k < vocab.names.size(); ++k) fg.push_back(vocab.label_of(k));
    e.mean_class_iou = e.report.mean_over(fg);
    e.word_accuracy = word_mask_accuracy(model, samples);
    return e;
}

// ---------------------------------------------------------------- ablations

struct AblationRow {
    std::string label;
    TrainConfig config;
    std::vector<double> split_iou;  // one per split
    double average = 0;
    double word_accuracy = 0;
};

struct AblationTable {
    std::string title;
    std::vector<std::string> splits;
    std::vector<AblationRow> rows;

    nlohmann::json to_json() const {
        auto round6 = [](double x) { return std::round(x * 1e6) / 1e6; };
        nlohmann::json j{{"title", title}, {"splits", splits}, {"rows", nlohmann::json::array()}};
        for (const auto& r : rows) {
            nlohmann::json per = nlohmann::json::object();
            for (std::size_t s = 0; s < splits.size(); ++s) per[splits[s]] = round6(r.split_iou[s]);
            j["rows"].push_back({{"label", r.label}, {"miou", per}, {"average", round6(r.average)}});
        }
        return j;
    }

    std::string to_text() const {
        std::ostringstream os;
        os << title << '\n' << std::left << std::setw(10) << "row";
        for (const auto& s : splits) os << std::setw(10) << s;
        os << "avg\n" << std::fixed << std::setprecision(1);
        for (const auto& r : rows) {
            os << std::setw(10) << r.label;
            for (double v : r.split_iou) os << std::setw(10) << 100.0 * v;
            os << 100.0 * r.average << '\n';
        }
        return os.str();
    }
};

struct AblationOptions {
    std::size_t eval_count = 100;  // images per split
    std::uint64_t eval_seed = 1000;
    std::vector<double> hcl_sweep{0.05, 0.1, 0.25, 0.5, 0.75, 1.0};
    std::function<void(const std::string&)> log;
};

// Trains and evaluates each configuration; identical configurations are
// trained once. Splits hold 1, 2 and 3 shapes per image.
template <typename T>
class AblationRunner {
public:
    AblationRunner(TrainConfig base, AblationOptions opts) : base_(std::move(base)), opts_(std::move(opts)) {
        for (std::size_t n = 1; n <= 3; ++n) {
            splits_.push_back(std::to_string(n) + "-shape");
            sets_.push_back(synthetic_eval_set(base_, tok_, opts_.eval_count, opts_.eval_seed + n, n, n));
        }
    }

    AblationRow run(const std::string& label, const TrainConfig& cfg) {
        if (auto it = cache_.find(dump_config(cfg)); it != cache_.end()) {
            AblationRow r = it->second;
            r.label = label;
            return r;
        }
        if (opts_.log) opts_.log("training " + label);
        auto trainer = std::make_unique<Trainer<T>>(cfg);
        trainer->adopt_pretrained(donor(cfg));
        trainer->run();
        return add_trained(label, std::move(trainer));
    }

    // Evaluates a finished trainer and caches its row. With frozen backbones
    // it still holds the pretrained weights and serves later rows as a donor.
    AblationRow add_trained(const std::string& label, std::unique_ptr<Trainer<T>> trainer) {
        const TrainConfig& cfg = trainer->config();
        AblationRow row{label, cfg, {}, 0, 0};
        const auto vocab = synthetic_vocabulary();
        double acc = 0;
        for (const auto& set : sets_) {
            const auto e = evaluate_synthetic(trainer->model(), set, vocab);
            row.split_iou.push_back(e.mean_class_iou);
            acc += e.word_accuracy;
        }
        for (double v : row.split_iou) row.average += v;
        row.average /= static_cast<double>(row.split_iou.size());
        row.word_accuracy = acc / static_cast<double>(sets_.size());
        if (opts_.log) {
            std::ostringstream os;
            os << label << ": average IoU " << row.average << ", word accuracy " << row.word_accuracy;
            opts_.log(os.str());
        }
        cache_.emplace(dump_config(cfg), row);
        auto& slot = donors_[donor_key(cfg)];
        const bool frozen = cfg.model.freeze_image_backbone && cfg.model.freeze_text_backbone;
        if (!slot && frozen && trainer->pretrained()) slot = std::move(trainer);
        return row;
    }

    // Rows: baseline, +co-decomposition, +word prompt, +region prompt.
    AblationTable components() {
        AblationTable t{"components", splits_, {}};
        struct Spec {
            const char* label;
            AblationFlags flags;
        };
        const Spec specs[] = {{"none", {false, false, false}},
                              {"C", {true, false, false}},
                              {"C+W", {true, true, false}},
                              {"C+W+R", {true, true, true}}};
        for (const auto& s : specs) {
            TrainConfig c = base_;
            c.flags = s.flags;
            t.rows.push_back(run(s.label, c));
        }
        return t;
    }

    const std::vector<std::string>& splits() const { return splits_; }

    AblationTable hcl_sweep() {
        AblationTable t{"lambda_hcl", splits_, {}};
        for (double w : opts_.hcl_sweep) {
            TrainConfig c = base_;
            c.weights.hcl = w;
            std::ostringstream os;
            os << w;
            t.rows.push_back(run(os.str(), c));
        }
        return t;
    }

private:
    // Backbone pretraining ignores the ablation flags and loss weights, so one
    // pretrained trainer serves every row that differs only in those.
    std::string donor_key(const TrainConfig& cfg) const {
        TrainConfig k = cfg;
        k.flags = base_.flags;
        k.weights = base_.weights;
        return dump_config(k);
    }

    const Trainer<T>& donor(const TrainConfig& cfg) {
        auto& slot = donors_[donor_key(cfg)];
        if (!slot) {
            if (opts_.log) opts_.log("pretraining backbones");
            TrainConfig k = cfg;
            k.flags = base_.flags;
            k.weights = base_.weights;
            slot = std::make_unique<Trainer<T>>(k);
            slot->pretrain();
        }
        return *slot;
    }

    TrainConfig base_;
    AblationOptions opts_;
    Tokenizer tok_;
    std::vector<std::string> splits_;
    std::vector<std::vector<SyntheticSample>> sets_;
    std::map<std::string, AblationRow> cache_;
    std::map<std::string, std::unique_ptr<Trainer<T>>> donors_;
};

}  // namespace code
