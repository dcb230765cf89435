#pragma once

// Training configuration: a flat `key = value` document (one per line, '#'
// comments), overridable key by key from the command line.

#include "code/align.hpp"
#include "code/cosegment.hpp"
#include "code/corpus.hpp"
#include "code/encoders.hpp"
#include "code/highlight.hpp"
#include "code/optim.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace code {

struct AblationFlags {
    bool co_decomposition = true;
    bool word_prompt = true;
    bool region_prompt = true;
};

// Contrastive image-caption pretraining of the backbone stand-ins, run once
// before co-decomposition training.
struct PretrainConfig {
    long steps = 1000;
    long warmup_steps = 50;
    double lr = 1e-3;
    std::size_t batch_size = 16;
    double temperature = 0.07;
    bool noun_swap_negatives = true;  // extra caption per image with its nouns replaced
};

struct TrainConfig {
    std::string profile = "desk";
    std::uint64_t seed = 0;
    std::size_t batch_size = 8;
    std::size_t nouns_per_pair = 2;
    std::size_t grad_accum = 1;
    long checkpoint_every = 0;
    std::string checkpoint_path;
    std::string metrics_path;
    std::string precision = "float64";
    std::string manifest;  // empty: train on the synthetic corpus

    ScheduleConfig schedule;
    PretrainConfig pretrain;
    AdamWConfig adamw;
    ModelConfig model;
    CosegmentConfig cosegment;
    PromptConfig prompts;
    ImageSegLossConfig seg_v;
    LossWeights weights;
    AblationFlags flags;
    NounOptions nouns;
    double tau_inverse_init = 14.3;

    std::size_t synthetic_count = 500;
    std::uint64_t synthetic_seed = 7;
    std::size_t synthetic_max_shapes = 3;

    void validate() const {
        if (batch_size < 1) throw Error("batch_size must be at least 1");
        if (nouns_per_pair < 1) throw Error("nouns_per_pair must be at least 1");
        if (grad_accum < 1) throw Error("grad_accum must be at least 1");
        if (schedule.steps < 0 || schedule.warmup_steps < 0) throw Error("steps must be non-negative");
        if (schedule.warmup_steps > schedule.steps) throw Error("warmup_steps must not exceed steps");
        if (pretrain.steps < 0 || pretrain.warmup_steps < 0 || pretrain.warmup_steps > pretrain.steps)
            throw Error("pretrain_warmup_steps must lie in [0, pretrain_steps]");
        if (pretrain.steps > 0 && pretrain.batch_size < 2) throw Error("pretrain_batch_size must be at least 2");
        if (!(pretrain.temperature > 0.0)) throw Error("pretrain_temperature must be positive");
        if (precision != "float64" && precision != "float32") throw Error("precision must be float64 or float32");
        weights.validate();
    }
};

namespace config_detail {

inline bool parse_bool(const std::string& k, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error("config key '" + k + "': expected a boolean, got '" + v + "'");
}

template <typename N>
N parse_num(const std::string& k, const std::string& v) {
    std::istringstream is(v);
    N x{};
    is >> x;
    if (!is || !is.eof()) throw Error("config key '" + k + "': invalid number '" + v + "'");
    return x;
}

struct Key {
    std::function<void(TrainConfig&, const std::string&)> set;
    std::function<std::string(const TrainConfig&)> get;
};

template <typename N>
std::string num_str(N x) {
    std::ostringstream os;
    os.precision(17);
    os << x;
    return os.str();
}

#define CODE_NUM_KEY(name, field)                                                                      \
    {name, {[](TrainConfig& c, const std::string& v) {                                                 \
                c.field = parse_num<std::remove_reference_t<decltype(c.field)>>(name, v);              \
            },                                                                                         \
            [](const TrainConfig& c) { return num_str(c.field); }}}
#define CODE_BOOL_KEY(name, field)                                                                     \
    {name, {[](TrainConfig& c, const std::string& v) { c.field = parse_bool(name, v); },               \
            [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }}}
#define CODE_STR_KEY(name, field)                                                                      \
    {name, {[](TrainConfig& c, const std::string& v) { c.field = v; },                                \
            [](const TrainConfig& c) { return c.field; }}}

inline const std::map<std::string, Key>& keys() {
    static const std::map<std::string, Key> k = {
        CODE_STR_KEY("profile", profile),
        CODE_NUM_KEY("seed", seed),
        CODE_NUM_KEY("batch_size", batch_size),
        CODE_NUM_KEY("nouns_per_pair", nouns_per_pair),
        CODE_NUM_KEY("grad_accum", grad_accum),
        CODE_NUM_KEY("checkpoint_every", checkpoint_every),
        CODE_STR_KEY("checkpoint_path", checkpoint_path),
        CODE_STR_KEY("metrics_path", metrics_path),
        CODE_STR_KEY("precision", precision),
        CODE_STR_KEY("manifest", manifest),
        CODE_NUM_KEY("steps", schedule.steps),
        CODE_NUM_KEY("warmup_steps", schedule.warmup_steps),
        CODE_NUM_KEY("lr", schedule.lr),
        CODE_NUM_KEY("pretrain_steps", pretrain.steps),
        CODE_NUM_KEY("pretrain_warmup_steps", pretrain.warmup_steps),
        CODE_NUM_KEY("pretrain_lr", pretrain.lr),
        CODE_NUM_KEY("pretrain_batch_size", pretrain.batch_size),
        CODE_NUM_KEY("pretrain_temperature", pretrain.temperature),
        CODE_BOOL_KEY("pretrain_noun_swap", pretrain.noun_swap_negatives),
        CODE_NUM_KEY("weight_decay", adamw.weight_decay),
        CODE_NUM_KEY("adam_beta1", adamw.beta1),
        CODE_NUM_KEY("adam_beta2", adamw.beta2),
        CODE_NUM_KEY("adam_eps", adamw.eps),
        CODE_NUM_KEY("image_size", model.image_size),
        CODE_NUM_KEY("patch", model.patch),
        CODE_NUM_KEY("width", model.width),
        CODE_NUM_KEY("heads", model.heads),
        CODE_NUM_KEY("mlp_ratio", model.mlp_ratio),
        CODE_NUM_KEY("image_layers", model.image_layers),
        CODE_NUM_KEY("text_layers", model.text_layers),
        CODE_NUM_KEY("text_segmenter_layers", model.text_segmenter_layers),
        CODE_NUM_KEY("max_text_len", model.max_text_len),
        CODE_NUM_KEY("context_tokens", model.context_tokens),
        CODE_NUM_KEY("dropout", model.dropout),
        CODE_BOOL_KEY("freeze_image_backbone", model.freeze_image_backbone),
        CODE_BOOL_KEY("freeze_text_backbone", model.freeze_text_backbone),
        CODE_STR_KEY("knowledge_template", cosegment.knowledge_template),
        CODE_NUM_KEY("gamma_init", cosegment.gamma_init),
        CODE_NUM_KEY("beta_init", cosegment.beta_init),
        CODE_NUM_KEY("word_scale_init", cosegment.word_scale_init),
        CODE_NUM_KEY("word_bias_init", cosegment.word_bias_init),
        CODE_NUM_KEY("prompt_init_std", prompts.init_stddev),
        CODE_BOOL_KEY("repeated_word_prompt", prompts.repeated_word_prompt),
        CODE_BOOL_KEY("seg_area", seg_v.use_area),
        CODE_BOOL_KEY("seg_tv", seg_v.use_tv),
        CODE_BOOL_KEY("seg_contrast", seg_v.use_contrast),
        CODE_NUM_KEY("area_lo", seg_v.area_lo),
        CODE_NUM_KEY("area_hi", seg_v.area_hi),
        CODE_NUM_KEY("area_weight", seg_v.area_weight),
        CODE_NUM_KEY("tv_weight", seg_v.tv_weight),
        CODE_NUM_KEY("contrast_weight", seg_v.contrast_weight),
        CODE_NUM_KEY("contrast_temperature", seg_v.contrast_temperature),
        CODE_NUM_KEY("lambda_kg", weights.kg),
        CODE_NUM_KEY("lambda_seg_v", weights.seg_v),
        CODE_NUM_KEY("lambda_seg_t", weights.seg_t),
        CODE_NUM_KEY("lambda_hcl", weights.hcl),
        CODE_BOOL_KEY("co_decomposition", flags.co_decomposition),
        CODE_BOOL_KEY("word_prompt", flags.word_prompt),
        CODE_BOOL_KEY("region_prompt", flags.region_prompt),
        CODE_BOOL_KEY("keep_duplicate_nouns", nouns.keep_duplicates),
        CODE_NUM_KEY("tau_inverse_init", tau_inverse_init),
        CODE_NUM_KEY("synthetic_count", synthetic_count),
        CODE_NUM_KEY("synthetic_seed", synthetic_seed),
        CODE_NUM_KEY("synthetic_max_shapes", synthetic_max_shapes),
    };
    return k;
}

#undef CODE_NUM_KEY
#undef CODE_BOOL_KEY
#undef CODE_STR_KEY

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace config_detail

// Desk profile: CPU-sized model and schedule. Paper profile: the published
// optimization settings (224px images, batch 64, 50k iterations, 15k warmup,
// lr 5e-6, AdamW wd 0.05, two nouns per caption).
inline TrainConfig profile_config(const std::string& name) {
    TrainConfig c;
    c.profile = name;
    if (name == "desk") return c;
    if (name == "paper") {
        c.batch_size = 64;
        c.schedule = ScheduleConfig{50000, 15000, 5e-6};
        c.model.image_size = 224;
        c.model.patch = 16;
        c.model.width = 512;
        c.model.heads = 8;
        c.model.mlp_ratio = 4;
        c.model.image_layers = 12;
        c.model.text_layers = 12;
        c.model.max_text_len = 77;
        return c;
    }
    throw Error("unknown profile: " + name);
}

inline void set_key(TrainConfig& c, const std::string& key, const std::string& value) {
    const auto& k = config_detail::keys();
    auto it = k.find(key);
    if (it == k.end()) throw Error("unknown config key: " + key);
    it->second.set(c, value);
}

// Applies `profile` first (if present), then every other key in file order.
inline TrainConfig parse_config(std::istream& in, TrainConfig base = profile_config("desk")) {
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
        kv.emplace_back(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    }
    for (const auto& [k, v] : kv)
        if (k == "profile") base = profile_config(v);
    for (const auto& [k, v] : kv)
        if (k != "profile") set_key(base, k, v);
    return base;
}

inline TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("config file not found: " + path);
    return parse_config(in);
}

// `key=value` override from the command line.
inline void apply_override(TrainConfig& c, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw Error("override must be key=value: " + assignment);
    const std::string key = config_detail::trim(assignment.substr(0, eq));
    const std::string value = config_detail::trim(assignment.substr(eq + 1));
    if (key == "profile") {
        c = profile_config(value);
        return;
    }
    set_key(c, key, value);
}

inline std::map<std::string, std::string> config_map(const TrainConfig& c) {
    std::map<std::string, std::string> out;
    for (const auto& [k, key] : config_detail::keys()) out[k] = key.get(c);
    return out;
}

inline std::string dump_config(const TrainConfig& c) {
    std::ostringstream os;
    for (const auto& [k, v] : config_map(c)) os << k << " = " << v << '\n';
    return os.str();
}

}  // namespace code
