#pragma once

// Training pipeline: select nouns -> co-segment -> highlight -> align, the
// AdamW/cosine schedule, ablation toggles, metrics and checkpoints.

#include "code/align.hpp"
#include "code/checkpoint.hpp"
#include "code/config.hpp"
#include "code/corpus.hpp"
#include "code/cosegment.hpp"
#include "code/encoders.hpp"
#include "code/highlight.hpp"
#include "code/optim.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <numeric>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace code {

// All learnable state of the co-decomposition network.
template <typename T>
struct Model {
    ModelConfig config;
    CosegmentConfig cosegment_config;
    ParamStore<T> params;
    std::unique_ptr<EncoderBundle<T>> encoders;
    CosegmentHead<T> head;
    Prompts<T> prompts;
    Temperature<T> temperature;
    ag::RowMat<T> downsample;  // transpose of encoders->upsample()

    Model(const TrainConfig& cfg, const Tokenizer& tok) : config(cfg.model), cosegment_config(cfg.cosegment) {
        Rng init = Rng::stream(cfg.seed, "init");
        encoders = std::make_unique<EncoderBundle<T>>(cfg.model, tok, params, init);
        head = CosegmentHead<T>(params, cfg.model, cfg.cosegment, init);
        prompts = Prompts<T>(params, cfg.model, cfg.prompts, init);
        temperature = Temperature<T>(params, cfg.tau_inverse_init);
        downsample = encoders->upsample().transpose();
    }
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    NounEmbedding<T> noun(const std::string& text, const Mode& mode = {}) const {
        return embed_noun(*encoders, head, text, cosegment_config, mode);
    }
};

struct Pair {
    ImageSample image;
    TextSample text;
    std::vector<NounQuery> nouns;
};

using Dataset = std::vector<Pair>;

inline Dataset dataset_from_synthetic(const std::vector<SyntheticSample>& samples) {
    Dataset d;
    d.reserve(samples.size());
    for (const auto& s : samples) d.push_back({s.image, s.text, s.nouns});
    return d;
}

// Loads and resizes every manifest image; nouns come from the tagger.
inline Dataset dataset_from_manifest(const CorpusManifest& m, const Tokenizer& tok, const Tagger& tagger,
                                     const TrainConfig& cfg) {
    Dataset d;
    for (const auto& e : m.entries) {
        Pair p;
        p.image = resize_image(read_png(m.resolve(e.image)), cfg.model.image_size, cfg.model.image_size);
        validate(p.image);
        p.text = tok.encode(e.caption, cfg.model.max_text_len);
        p.nouns = extract_nouns(p.text, tagger, cfg.nouns);
        d.push_back(std::move(p));
    }
    return d;
}

inline Dataset build_training_data(const TrainConfig& cfg, const Tokenizer& tok, const Tagger& tagger) {
    if (!cfg.manifest.empty()) return dataset_from_manifest(load_manifest(cfg.manifest), tok, tagger, cfg);
    SyntheticSpec spec;
    spec.count = cfg.synthetic_count;
    spec.seed = cfg.synthetic_seed;
    spec.image_size = cfg.model.image_size;
    spec.max_text_len = cfg.model.max_text_len;
    spec.max_shapes = cfg.synthetic_max_shapes;
    return dataset_from_synthetic(generate_synthetic_corpus(spec, tok));
}

struct Triplet {
    std::size_t slot = 0;  // index into Batch::pairs
    NounQuery noun;
};

struct Batch {
    std::vector<std::size_t> pairs;  // distinct dataset indices
    std::vector<Triplet> triplets;
};

// Draws distinct image-text pairs uniformly; noun-less pairs are skipped and
// replaced. Each pair contributes up to nouns_per_pair triplets.
inline Batch build_batch(const Dataset& data, const TrainConfig& cfg, Rng& rng) {
    if (data.empty()) throw Error("build_batch: empty dataset");
    std::size_t eligible = 0;
    for (const auto& p : data) eligible += p.nouns.empty() ? 0 : 1;
    if (eligible == 0) throw Error("corpus exhausted of noun-bearing captions");
    Batch b;
    std::vector<bool> used(data.size(), false);
    std::size_t used_eligible = 0;
    while (b.triplets.size() < cfg.batch_size) {
        if (used_eligible == eligible) throw Error("corpus exhausted of noun-bearing captions");
        const auto i = static_cast<std::size_t>(rng.below(data.size()));
        if (used[i]) continue;
        used[i] = true;
        if (data[i].nouns.empty()) continue;
        ++used_eligible;
        auto picked = sample_nouns(data[i].nouns, cfg.nouns_per_pair, rng);
        const std::size_t slot = b.pairs.size();
        b.pairs.push_back(i);
        for (const auto& q : *picked) {
            if (b.triplets.size() == cfg.batch_size) break;
            b.triplets.push_back({slot, q});
        }
    }
    return b;
}

// Token positions that belong to caption words (not <sot>, <eot> or padding).
inline std::vector<bool> word_positions(const TextSample& text) {
    std::vector<bool> out(text.length(), false);
    for (const auto& s : text.word_spans)
        for (std::size_t i = s.start; i < s.end && i < out.size(); ++i) out[i] = true;
    return out;
}

template <typename T>
ag::Var<T> indicator(const std::vector<bool>& v) {
    std::vector<T> x(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i] ? T(1) : T(0);
    return ag::constant<T>(v.size(), 1, std::move(x));
}

// Forward pass of one batch. Terms disabled by the ablation flags are absent.
template <typename T>
LossParts<T> forward_losses(const Model<T>& model, const Dataset& data, const Batch& batch, const TrainConfig& cfg,
                            const Mode& mode) {
    const auto& enc = *model.encoders;
    const std::size_t size = model.config.image_size;
    const bool co = cfg.flags.co_decomposition;

    std::map<std::string, NounEmbedding<T>> nouns;
    auto noun = [&](const std::string& text) -> const NounEmbedding<T>& {
        auto it = nouns.find(text);
        if (it == nouns.end()) it = nouns.emplace(text, model.noun(text, mode)).first;
        return it->second;
    };

    struct PairState {
        ag::Var<T> pixels, pixel_map, tokens;
        std::optional<WordSegmentation<T>> words;
        ag::Var<T> word_keep;
    };
    std::vector<PairState> ps(batch.pairs.size());
    ag::Var<T> seg_t_sum = ag::scalar<T>(T(0));
    std::size_t seg_t_count = 0;

    for (std::size_t s = 0; s < batch.pairs.size(); ++s) {
        const Pair& p = data[batch.pairs[s]];
        ps[s].pixels = image_var<T>(p.image);
        ps[s].pixel_map = enc.embed_pixels(p.image, mode);
        if (!co) continue;
        auto word_map = enc.embed_words(p.text, mode);
        std::vector<ag::Var<T>> logits;
        for (const auto& q : p.nouns)
            logits.push_back(word_logits(word_map, noun(q.noun_text).n, model.head.word_scale, model.head.word_bias));
        ps[s].words = word_masks(logits);
        const auto labels = pseudo_label_classes(logits);
        const auto counted = word_positions(p.text);
        const auto n = static_cast<std::size_t>(std::count(counted.begin(), counted.end(), true));
        if (n > 0) {
            seg_t_sum = ag::add(seg_t_sum, ag::scale(text_seg_loss(*ps[s].words, labels, counted), static_cast<T>(n)));
            seg_t_count += n;
        }
        ps[s].word_keep = indicator<T>(counted);
        ps[s].tokens = enc.token_embeddings(p.text);
    }

    std::vector<ag::Var<T>> masks, maps, noun_vecs, kg_terms, ev, et;
    const auto zeros_image = ag::constant<T>(size * size, 3, T(0));
    const auto zeros_text = ag::constant<T>(model.config.max_text_len, model.config.width, T(0));
    for (const auto& t : batch.triplets) {
        const Pair& p = data[batch.pairs[t.slot]];
        const auto& ne = noun(t.noun.noun_text);
        auto mv = region_mask(ps[t.slot].pixel_map, ne.n, model.head.gamma, model.head.beta, enc.upsample());
        masks.push_back(mv);
        maps.push_back(ps[t.slot].pixel_map);
        noun_vecs.push_back(ne.n);
        kg_terms.push_back(kg_loss(ne));
        if (!co) continue;

        const auto& prompt_v = cfg.flags.region_prompt ? model.prompts.region : zeros_image;
        ev.push_back(enc.encode_segment_image(highlight_region(ps[t.slot].pixels, mv, prompt_v), mode));

        const std::size_t j = t.noun.index - 1;
        auto mt = ag::mul(ps[t.slot].words->masks.at(j), ps[t.slot].word_keep);
        const auto prompt_t =
            cfg.flags.word_prompt ? model.prompts.word_rows(p.text.length()) : ag::slice_rows(zeros_text, 0, p.text.length());
        et.push_back(enc.encode_segment_text(highlight_text(ps[t.slot].tokens, mt, prompt_t), mode));
    }

    LossParts<T> parts;
    parts.kg = ag::mean(ag::concat_rows(kg_terms));
    parts.seg_v = image_seg_loss(masks, maps, noun_vecs, size, size, enc.upsample(), cfg.seg_v).total;
    if (co) {
        if (seg_t_count > 0) parts.seg_t = ag::scale(seg_t_sum, T(1) / static_cast<T>(seg_t_count));
        parts.hcl = hcl_loss(similarity_matrix(ev, et), model.temperature.log_tau);
    }
    return parts;
}

// CLIP-style symmetric InfoNCE between global image features and caption
// features over random batches of training pairs. Only the backbones learn;
// their trainable flags are restored afterwards.
// Caption with every noun occurrence replaced by a different noun from `pool`.
inline TextSample swap_nouns(const Pair& p, const std::vector<std::string>& pool, const Tokenizer& tok,
                             std::size_t max_len, Rng& rng) {
    std::map<std::string, std::string> repl;
    for (const auto& q : p.nouns) {
        if (repl.count(q.noun_text) || pool.size() < 2) continue;
        std::string other;
        do other = pool[rng.below(pool.size())]; while (other == q.noun_text);
        repl[q.noun_text] = other;
    }
    std::string text;
    for (const auto& w : p.text.words) {
        const auto it = repl.find(w);
        text += (text.empty() ? "" : " ") + (it == repl.end() ? w : it->second);
    }
    return tok.encode(text, max_len);
}

// Stand-in for pretrained CLIP weights: symmetric InfoNCE between global image
// features and caption features on the training pairs. With noun swapping each
// image also scores a caption whose nouns were replaced, as an extra negative.
template <typename T>
void pretrain_backbones(Model<T>& model, const Dataset& data, const TrainConfig& cfg, Rng& rng) {
    const auto& pc = cfg.pretrain;
    if (pc.steps == 0) return;
    if (data.size() < 2) throw Error("pretraining needs at least two pairs");
    auto& ps = model.params;
    const auto& enc = *model.encoders;
    std::vector<std::string> pool;
    for (const auto& p : data)
        for (const auto& q : p.nouns)
            if (std::find(pool.begin(), pool.end(), q.noun_text) == pool.end()) pool.push_back(q.noun_text);
    std::sort(pool.begin(), pool.end());
    ps.set_trainable(groups::kImageBackbone, true);
    ps.set_trainable(groups::kTextBackbone, true);
    ps.zero_grad();
    AdamW<T> opt(cfg.adamw);
    const ScheduleConfig sched{pc.steps, pc.warmup_steps, pc.lr};
    const std::size_t b = std::min(pc.batch_size, data.size());
    const T inv_t = static_cast<T>(1.0 / pc.temperature);
    auto caption = [&](const TextSample& t) {
        return enc.text_feature(enc.token_embeddings(t), t.valid_mask(), t.valid_length() - 1);
    };
    for (long step = 1; step <= pc.steps; ++step) {
        std::vector<std::size_t> idx(data.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        std::vector<ag::Var<T>> img, txt, neg;
        for (std::size_t i = 0; i < b; ++i) {
            const Pair& p = data[idx[i]];
            img.push_back(enc.image_feature(image_var<T>(p.image)));
            txt.push_back(caption(p.text));
            if (pc.noun_swap_negatives && !p.nouns.empty() && pool.size() > 1)
                neg.push_back(caption(swap_nouns(p, pool, enc.tokenizer(), cfg.model.max_text_len, rng)));
        }
        txt.insert(txt.end(), neg.begin(), neg.end());
        auto logits = ag::scale(ag::matmul_nt(ag::concat_rows(img), ag::concat_rows(txt)), inv_t);
        std::vector<std::pair<std::size_t, std::size_t>> diag;
        for (std::size_t i = 0; i < b; ++i) diag.emplace_back(i, i);
        auto rows = ag::pick(ag::log_softmax_rows(logits), diag);
        auto cols = ag::pick(ag::log_softmax_rows(ag::transpose(logits)), diag);
        auto loss = ag::scale(ag::add(ag::sum(rows), ag::sum(cols)), T(-1) / static_cast<T>(2 * b));
        if (!std::isfinite(static_cast<double>(loss.item()))) throw NonFiniteLoss("pretrain", step);
        ag::backward(loss);
        opt.step(ps, lr_at(step, sched));
        ps.zero_grad();
    }
    ps.set_trainable(groups::kImageBackbone, !cfg.model.freeze_image_backbone);
    ps.set_trainable(groups::kTextBackbone, !cfg.model.freeze_text_backbone);
}

struct StepResult {
    long step = 0;
    std::map<std::string, std::optional<double>> terms;
    double total = 0;
    double lr = 0;
    double tau = 0;
};

// Newline-delimited JSON records {"step", "name", "value"}; absent terms have value null.
inline void write_metrics(std::ostream& out, const StepResult& r) {
    auto rec = [&](const std::string& name, std::optional<double> v) {
        nlohmann::json j{{"step", r.step}, {"name", name}};
        j["value"] = v ? nlohmann::json(*v) : nlohmann::json(nullptr);
        out << j.dump() << '\n';
    };
    for (const char* name : kLossTerms) rec(name, r.terms.at(name));
    rec("total", r.total);
    rec("lr", r.lr);
    rec("tau", r.tau);
}

template <typename T>
class Trainer {
public:
    explicit Trainer(TrainConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        model_ = std::make_unique<Model<T>>(cfg_, tok_);
        opt_ = AdamW<T>(cfg_.adamw);
        data_rng_ = Rng::stream(cfg_.seed, "data");
        dropout_rng_ = Rng::stream(cfg_.seed, "dropout");
    }

    // Deserializes the full training state.
    static std::unique_ptr<Trainer> load(const std::filesystem::path& path) {
        const Archive a = read_archive(path);
        if (a.header.value("kind", "") != "train_state") throw Error("checkpoint: not a training state archive");
        if (a.header.value("dtype", "") != dtype_name()) throw Error("checkpoint: precision mismatch");
        TrainConfig cfg = profile_config("desk");
        for (const auto& kv : a.header.at("config").items()) set_key(cfg, kv.key(), kv.value().template get<std::string>());
        auto t = std::make_unique<Trainer>(cfg);
        t->restore(a);
        return t;
    }

    void set_dataset(Dataset d) { data_ = std::move(d); }
    const Dataset& dataset() const { return data_; }
    void prepare_default_dataset() {
        if (data_.empty()) data_ = build_training_data(cfg_, tok_, tagger_);
    }

    // Runs the backbone pretraining stage once.
    void pretrain() {
        prepare_default_dataset();
        if (pretrained_) return;
        Rng rng = Rng::stream(cfg_.seed, "pretrain");
        pretrain_backbones(*model_, data_, cfg_, rng);
        pretrained_ = true;
    }

    // Takes the pretrained backbones of `other` instead of pretraining. Both
    // trainers must share seed, data, model and pretraining settings for the
    // result to equal running pretrain() here.
    void adopt_pretrained(const Trainer& other) {
        if (step_ != 0 || pretrained_) throw Error("adopt_pretrained: trainer already started");
        if (!other.pretrained_) throw Error("adopt_pretrained: source has not pretrained");
        const auto& src = other.model_->params.entries();
        auto& dst = model_->params.entries();
        if (src.size() != dst.size()) throw Error("adopt_pretrained: parameter sets differ");
        for (std::size_t k = 0; k < dst.size(); ++k) {
            if (src[k].name != dst[k].name || src[k].var.size() != dst[k].var.size())
                throw Error("adopt_pretrained: parameter sets differ");
            if (dst[k].group == groups::kImageBackbone || dst[k].group == groups::kTextBackbone)
                dst[k].var.value() = src[k].var.value();
        }
        pretrained_ = true;
    }
    bool pretrained() const { return pretrained_; }

    StepResult train_step() {
        prepare_default_dataset();
        if (step_ >= cfg_.schedule.steps) throw Error("training already finished");
        pretrain();
        model_->params.zero_grad();
        Mode mode{true, cfg_.model.dropout, &dropout_rng_};
        StepResult r;
        r.step = step_ + 1;
        for (std::size_t micro = 0; micro < cfg_.grad_accum; ++micro) {
            const Batch batch = build_batch(data_, cfg_, data_rng_);
            auto parts = forward_losses(*model_, data_, batch, cfg_, mode);
            auto loss = total_loss(parts, cfg_.weights, r.step);
            if (!std::isfinite(static_cast<double>(loss.item()))) throw NonFiniteLoss("total", r.step);
            if (cfg_.grad_accum > 1) loss = ag::scale(loss, T(1) / static_cast<T>(cfg_.grad_accum));
            ag::backward(loss);
            const double inv = 1.0 / static_cast<double>(cfg_.grad_accum);
            for (const auto& [k, v] : parts.values()) {
                auto& slot = r.terms[k];
                if (v) slot = slot.value_or(0.0) + *v * inv;
                else if (!r.terms.count(k)) slot = std::nullopt;
            }
            r.total += static_cast<double>(loss.item()) * (cfg_.grad_accum > 1 ? 1.0 : inv);
        }
        r.lr = lr_at(r.step, cfg_.schedule);
        opt_.step(model_->params, r.lr);
        model_->params.zero_grad();
        r.tau = static_cast<double>(model_->temperature.tau());
        step_ = r.step;
        for (const auto& [k, v] : r.terms)
            if (v) running_[k] = running_.count(k) ? 0.98 * running_[k] + 0.02 * *v : *v;
        if (metrics_) write_metrics(*metrics_, r);
        if (cfg_.checkpoint_every > 0 && !cfg_.checkpoint_path.empty() && step_ % cfg_.checkpoint_every == 0)
            save(cfg_.checkpoint_path);
        return r;
    }

    // Runs until `steps`; the callback sees every step result.
    template <typename F>
    void run(F&& on_step) {
        while (step_ < cfg_.schedule.steps) on_step(train_step());
    }
    void run() {
        run([](const StepResult&) {});
    }

    void set_metrics_stream(std::ostream* out) { metrics_ = out; }

    Archive to_archive() const {
        Archive a;
        a.header["kind"] = "train_state";
        a.header["format_version"] = Archive::kFormatVersion;
        a.header["dtype"] = dtype_name();
        a.header["config"] = config_map(cfg_);
        a.header["step"] = step_;
        a.header["pretrained"] = pretrained_;
        a.header["optimizer_steps"] = opt_.steps_taken();
        a.header["rng"] = {{"data", data_rng_.save()}, {"dropout", dropout_rng_.save()}};
        a.header["running"] = running_;
        nlohmann::json names = nlohmann::json::array();
        const auto& entries = model_->params.entries();
        for (std::size_t k = 0; k < entries.size(); ++k) {
            const auto& e = entries[k];
            names.push_back({{"name", e.name}, {"rows", e.var.rows()}, {"cols", e.var.cols()}});
            a.put("param/" + e.name, e.var.value());
            if (k < opt_.slots().size() && !opt_.slots()[k].m.empty()) {
                a.put("adam_m/" + e.name, opt_.slots()[k].m);
                a.put("adam_v/" + e.name, opt_.slots()[k].v);
            }
        }
        a.header["parameters"] = names;
        return a;
    }

    void save(const std::filesystem::path& path) const { write_archive(path, to_archive()); }

    long step() const { return step_; }
    const TrainConfig& config() const { return cfg_; }
    Model<T>& model() { return *model_; }
    const Model<T>& model() const { return *model_; }
    const Tokenizer& tokenizer() const { return tok_; }
    const Tagger& tagger() const { return tagger_; }
    const AdamW<T>& optimizer() const { return opt_; }
    const std::map<std::string, double>& running_averages() const { return running_; }
    Rng& data_rng() { return data_rng_; }

    static std::string dtype_name() { return sizeof(T) == 8 ? "float64" : "float32"; }

private:
    void restore(const Archive& a) {
        step_ = a.header.at("step").get<long>();
        pretrained_ = a.header.at("pretrained").get<bool>();
        opt_.set_steps_taken(a.header.at("optimizer_steps").get<long>());
        data_rng_.load(a.header.at("rng").at("data").get<std::string>());
        dropout_rng_.load(a.header.at("rng").at("dropout").get<std::string>());
        running_ = a.header.at("running").get<std::map<std::string, double>>();
        auto& entries = model_->params.entries();
        opt_.slots().resize(entries.size());
        for (std::size_t k = 0; k < entries.size(); ++k) {
            auto& e = entries[k];
            auto v = a.get<T>("param/" + e.name);
            if (v.size() != e.var.size()) throw Error("checkpoint: parameter '" + e.name + "' has the wrong size");
            e.var.value() = std::move(v);
            if (a.find("adam_m/" + e.name)) {
                opt_.slots()[k].m = a.get<T>("adam_m/" + e.name);
                opt_.slots()[k].v = a.get<T>("adam_v/" + e.name);
            }
        }
    }

    TrainConfig cfg_;
    Tokenizer tok_;
    LexiconTagger tagger_;
    std::unique_ptr<Model<T>> model_;
    AdamW<T> opt_;
    Rng data_rng_, dropout_rng_;
    long step_ = 0;
    bool pretrained_ = false;
    std::map<std::string, double> running_;
    Dataset data_;
    std::ostream* metrics_ = nullptr;
};

}  // namespace code
