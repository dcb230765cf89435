#pragma once

// Image-caption corpus ingestion, noun selection and the synthetic
// shapes-with-captions generator used as a ground-truth oracle.

#include "code/image_io.hpp"
#include "code/rng.hpp"
#include "code/tagger.hpp"
#include "code/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace code {

struct NounQuery {
    std::string noun_text;
    TokenSpan token_span;
    std::size_t index = 0;  // 1-based position among the caption's nouns
    bool operator==(const NounQuery&) const = default;
};

struct ManifestEntry {
    std::string image;
    std::string caption;
    std::string label;  // optional ground-truth label map (paletted PNG)
};

struct CorpusManifest {
    static constexpr int kFormatVersion = 1;
    int format_version = kFormatVersion;
    std::vector<ManifestEntry> entries;
    std::filesystem::path base_dir;  // relative image paths resolve against this

    std::string resolve(const std::string& p) const {
        std::filesystem::path path(p);
        return path.is_absolute() ? path.string() : (base_dir / path).string();
    }
};

// One JSON object per line with string fields "image" and "caption".
inline CorpusManifest parse_manifest(std::istream& in, const std::filesystem::path& base_dir = {}) {
    CorpusManifest m;
    m.base_dir = base_dir;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw Error("manifest line " + std::to_string(lineno) + ": malformed JSON");
        }
        if (!rec.is_object()) throw Error("manifest line " + std::to_string(lineno) + ": expected an object");
        for (const char* field : {"image", "caption"}) {
            if (!rec.contains(field) || !rec[field].is_string())
                throw Error("manifest line " + std::to_string(lineno) + ": missing field '" + field + "'");
        }
        ManifestEntry e{rec["image"].get<std::string>(), rec["caption"].get<std::string>(), ""};
        if (e.caption.empty()) throw Error("manifest line " + std::to_string(lineno) + ": empty caption");
        if (rec.contains("label") && rec["label"].is_string()) e.label = rec["label"].get<std::string>();
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw Error("empty manifest");
    return m;
}

inline CorpusManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("manifest not found: " + path.string());
    return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const std::filesystem::path& path, const CorpusManifest& m) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write manifest: " + path.string());
    for (const auto& e : m.entries) {
        nlohmann::json rec{{"image", e.image}, {"caption", e.caption}};
        if (!e.label.empty()) rec["label"] = e.label;
        out << rec.dump() << '\n';
    }
}

struct NounOptions {
    bool keep_duplicates = true;
};

// Nouns in caption order, one query per noun occurrence.
inline std::vector<NounQuery> extract_nouns(const TextSample& text, const Tagger& tagger,
                                            const NounOptions& opts = {}) {
    std::vector<NounQuery> out;
    const auto tags = tagger.tag(text.words);
    const std::size_t valid = text.valid_length();
    for (std::size_t w = 0; w < text.words.size(); ++w) {
        if (tags[w] != PosTag::Noun) continue;
        const TokenSpan span = text.word_spans[w];
        if (span.end > valid || span.start >= span.end) continue;
        if (!opts.keep_duplicates &&
            std::any_of(out.begin(), out.end(), [&](const NounQuery& q) { return q.noun_text == text.words[w]; }))
            continue;
        out.push_back({text.words[w], span, out.size() + 1});
    }
    return out;
}

// min(count, J) distinct queries drawn uniformly without replacement, returned
// in caption order. Returns nullopt when the caption has no nouns.
inline std::optional<std::vector<NounQuery>> sample_nouns(const std::vector<NounQuery>& queries,
                                                          std::size_t count, Rng& rng) {
    if (count == 0) throw Error("sample_nouns: count must be at least 1");
    if (queries.empty()) return std::nullopt;
    std::vector<std::size_t> idx(queries.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t k = std::min(count, queries.size());
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    std::vector<NounQuery> out;
    for (auto i : idx) out.push_back(queries[i]);
    return out;
}

// ---------------------------------------------------------------- synthetic corpus

struct ShapeInstance {
    std::string shape;
    std::string color;
    double cx = 0, cy = 0;  // center in pixel units
    double size = 0;        // diameter / side length
};

struct SyntheticSample {
    ImageSample image;
    TextSample text;
    std::vector<ShapeInstance> shapes;  // same order as the nouns in the caption
    std::vector<NounQuery> nouns;
    std::vector<std::vector<std::uint8_t>> gt_region_masks;  // H*W {0,1} per noun
    std::vector<std::vector<std::uint8_t>> gt_word_masks;    // L {0,1} per noun
};

struct SyntheticSpec {
    std::size_t count = 500;
    std::size_t image_size = 32;
    std::size_t max_text_len = 16;
    std::size_t min_shapes = 1;
    std::size_t max_shapes = 3;
    double min_extent = 9.0;   // shape size range in pixels
    double max_extent = 14.0;
    std::vector<std::string> shapes{"circle", "square", "triangle"};
    std::vector<std::string> colors{"red", "green", "blue", "yellow", "purple", "orange"};
    std::uint64_t seed = 7;
    std::size_t placement_retries = 200;
};

inline std::array<double, 3> color_rgb(const std::string& name) {
    if (name == "red") return {0.9, 0.1, 0.1};
    if (name == "green") return {0.1, 0.8, 0.2};
    if (name == "blue") return {0.15, 0.25, 0.95};
    if (name == "yellow") return {0.95, 0.9, 0.1};
    if (name == "purple") return {0.6, 0.15, 0.75};
    if (name == "orange") return {1.0, 0.55, 0.0};
    if (name == "cyan") return {0.1, 0.85, 0.85};
    if (name == "white") return {1.0, 1.0, 1.0};
    if (name == "black") return {0.0, 0.0, 0.0};
    throw Error("unknown color: " + name);
}

inline constexpr std::array<double, 3> kSyntheticBackground{0.5, 0.5, 0.5};

// Pixel (x, y) belongs to the shape when its center lies inside the outline.
inline bool shape_covers(const ShapeInstance& s, std::size_t x, std::size_t y) {
    const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
    const double h = s.size / 2.0;
    if (s.shape == "circle") return (px - s.cx) * (px - s.cx) + (py - s.cy) * (py - s.cy) <= h * h;
    if (s.shape == "square") return std::abs(px - s.cx) <= h && std::abs(py - s.cy) <= h;
    if (s.shape == "triangle") {
        // apex up, base at cy + h
        const double top = s.cy - h, bottom = s.cy + h;
        if (py < top || py > bottom) return false;
        const double half_width = h * (py - top) / s.size;
        return std::abs(px - s.cx) <= half_width;
    }
    throw Error("unknown shape: " + s.shape);
}

inline std::string synthetic_caption(const std::vector<ShapeInstance>& shapes) {
    std::string cap;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (i > 0) cap += (i + 1 == shapes.size()) ? " and " : ", ";
        cap += "a " + shapes[i].color + " " + shapes[i].shape;
    }
    return cap;
}

namespace synth_detail {

inline bool try_place(const SyntheticSpec& spec, std::size_t n, Rng& rng, std::vector<ShapeInstance>& out) {
    std::vector<std::size_t> cls(spec.shapes.size()), col(spec.colors.size());
    std::iota(cls.begin(), cls.end(), std::size_t{0});
    std::iota(col.begin(), col.end(), std::size_t{0});
    rng.shuffle(cls.begin(), cls.end());
    rng.shuffle(col.begin(), col.end());
    out.clear();
    const double img = static_cast<double>(spec.image_size);
    for (std::size_t k = 0; k < n; ++k) {
        ShapeInstance s;
        s.shape = spec.shapes[cls[k % cls.size()]];
        s.color = spec.colors[col[k % col.size()]];
        bool placed = false;
        for (std::size_t attempt = 0; attempt < spec.placement_retries && !placed; ++attempt) {
            s.size = std::round(rng.uniform(spec.min_extent, spec.max_extent));
            const double h = s.size / 2.0;
            s.cx = std::round(rng.uniform(h + 1.0, img - h - 1.0));
            s.cy = std::round(rng.uniform(h + 1.0, img - h - 1.0));
            placed = std::all_of(out.begin(), out.end(), [&](const ShapeInstance& o) {
                const double gap = (o.size + s.size) / 2.0 + 1.0;
                return std::abs(o.cx - s.cx) >= gap || std::abs(o.cy - s.cy) >= gap;
            });
        }
        if (!placed) return false;
        out.push_back(s);
    }
    return true;
}

}  // namespace synth_detail

inline SyntheticSample render_synthetic(const std::vector<ShapeInstance>& shapes, std::size_t image_size,
                                        std::size_t max_text_len, const Tokenizer& tok, const std::string& id) {
    SyntheticSample s;
    s.shapes = shapes;
    s.image.height = s.image.width = image_size;
    s.image.id = id;
    s.image.pixels.resize(image_size * image_size * 3);
    for (std::size_t i = 0; i < image_size * image_size; ++i)
        for (std::size_t c = 0; c < 3; ++c) s.image.pixels[i * 3 + c] = kSyntheticBackground[c];
    for (const auto& sh : shapes) {
        std::vector<std::uint8_t> mask(image_size * image_size, 0);
        const auto rgb = color_rgb(sh.color);
        for (std::size_t y = 0; y < image_size; ++y)
            for (std::size_t x = 0; x < image_size; ++x)
                if (shape_covers(sh, x, y)) {
                    mask[y * image_size + x] = 1;
                    for (std::size_t c = 0; c < 3; ++c) s.image.at(y, x, c) = rgb[c];
                }
        s.gt_region_masks.push_back(std::move(mask));
    }
    s.text = tok.encode(synthetic_caption(shapes), max_text_len);
    // Caption words are: a {color} {shape} [, | and] a {color} {shape} ...
    std::size_t w = 0;
    for (std::size_t k = 0; k < shapes.size(); ++k) {
        while (w < s.text.words.size() && s.text.words[w] != shapes[k].shape) ++w;
        if (w >= s.text.words.size()) throw Error("caption truncated; raise max_text_len");
        std::vector<std::uint8_t> wm(s.text.length(), 0);
        const TokenSpan noun_span = s.text.word_spans[w];
        const TokenSpan color_span = s.text.word_spans[w - 1];
        for (std::size_t t = color_span.start; t < noun_span.end; ++t) wm[t] = 1;
        s.gt_word_masks.push_back(std::move(wm));
        s.nouns.push_back({shapes[k].shape, noun_span, k + 1});
        ++w;
    }
    return s;
}

inline std::vector<SyntheticSample> generate_synthetic_corpus(const SyntheticSpec& spec, const Tokenizer& tok) {
    if (spec.shapes.size() < 2) throw Error("synthetic corpus needs at least 2 shape classes");
    if (spec.colors.size() < 2) throw Error("synthetic corpus needs at least 2 colors");
    if (spec.image_size < 16) throw Error("synthetic image size must be at least 16");
    if (spec.min_shapes < 1 || spec.min_shapes > spec.max_shapes) throw Error("invalid shape count range");
    Rng rng = Rng::stream(spec.seed, "synthetic");
    std::vector<SyntheticSample> out;
    out.reserve(spec.count);
    const std::size_t max_n = std::min({spec.max_shapes, spec.shapes.size(), spec.colors.size()});
    for (std::size_t i = 0; i < spec.count; ++i) {
        std::size_t n = spec.min_shapes + rng.below(max_n - std::min(spec.min_shapes, max_n) + 1);
        n = std::min(n, max_n);
        std::vector<ShapeInstance> shapes;
        // Infeasible placements fall back to fewer shapes.
        while (!synth_detail::try_place(spec, n, rng, shapes)) {
            if (n == 1) throw Error("cannot place a single shape; image too small");
            --n;
        }
        char id[32];
        std::snprintf(id, sizeof id, "synth_%05zu", i);
        out.push_back(render_synthetic(shapes, spec.image_size, spec.max_text_len, tok, id));
    }
    return out;
}

// Writes <dir>/manifest.jsonl, images, per-noun region masks (8-bit PNG, 0/255),
// a paletted label map (class index + 1, 0 = background) and word-mask JSON.
inline void export_synthetic_corpus(const std::filesystem::path& dir, const std::vector<SyntheticSample>& samples,
                                    const std::vector<std::string>& classes) {
    std::filesystem::create_directories(dir);
    CorpusManifest m;
    for (const auto& s : samples) {
        const std::string& id = s.image.id;
        write_png((dir / (id + ".png")).string(), s.image);
        const std::size_t n = s.image.width * s.image.height;
        std::vector<std::uint8_t> label(n, 0);
        nlohmann::json words = nlohmann::json::array();
        for (std::size_t k = 0; k < s.nouns.size(); ++k) {
            std::vector<std::uint8_t> region(n);
            const auto cls = std::find(classes.begin(), classes.end(), s.shapes[k].shape) - classes.begin();
            for (std::size_t p = 0; p < n; ++p) {
                region[p] = s.gt_region_masks[k][p] ? 255 : 0;
                if (s.gt_region_masks[k][p]) label[p] = static_cast<std::uint8_t>(cls + 1);
            }
            write_gray_png((dir / (id + "_region" + std::to_string(k + 1) + ".png")).string(), s.image.width,
                           s.image.height, region);
            std::vector<std::size_t> toks;
            for (std::size_t t = 0; t < s.gt_word_masks[k].size(); ++t)
                if (s.gt_word_masks[k][t]) toks.push_back(t);
            words.push_back({{"noun", s.nouns[k].noun_text}, {"tokens", toks}});
        }
        write_label_png((dir / (id + "_label.png")).string(), s.image.width, s.image.height, label);
        std::ofstream(dir / (id + "_words.json")) << nlohmann::json{{"id", id}, {"nouns", words}}.dump(2) << '\n';
        m.entries.push_back({id + ".png", s.text.raw_text, id + "_label.png"});
    }
    write_manifest(dir / "manifest.jsonl", m);
}

}  // namespace code
