#pragma once

// Region/word highlighting: masked-out areas are filled from learnable
// universal prompts instead of being left blank.
//   H = X * M + P * (1 - M), with M broadcast over channels.

#include "code/encoders.hpp"
#include "code/nn.hpp"

#include <string>
#include <vector>

namespace code {

struct PromptConfig {
    double init_stddev = 0.02;
    bool repeated_word_prompt = false;  // one row shared by every position
};

template <typename T>
struct Prompts {
    ag::Var<T> region;  // (H*W) x 3, unclamped
    ag::Var<T> word;    // L_max x C, or 1 x C when repeated
    std::size_t image_size = 0;
    bool repeated = false;

    Prompts() = default;
    Prompts(ParamStore<T>& ps, const ModelConfig& mc, const PromptConfig& pc, Rng& rng)
        : image_size(mc.image_size), repeated(pc.repeated_word_prompt) {
        std::vector<T> init(mc.image_size * mc.image_size * 3);
        for (auto& v : init) v = static_cast<T>(rng.normal(0.0, pc.init_stddev));
        region = ps.add("prompt.region", mc.image_size * mc.image_size, 3, std::move(init), groups::kPrompts);
        word = ps.normal("prompt.word", repeated ? 1 : mc.max_text_len, mc.width, pc.init_stddev, rng,
                         groups::kPrompts);
    }

    // Region prompt at an arbitrary resolution (bilinear resize when it differs).
    ag::Var<T> region_at(std::size_t h, std::size_t w) const {
        if (h == image_size && w == image_size) return region;
        return ag::apply_fixed(bilinear_matrix<T>(image_size, image_size, h, w), region);
    }

    // First `len` word-prompt rows (positional), or the shared row repeated.
    ag::Var<T> word_rows(std::size_t len) const {
        if (repeated) return ag::gather_rows(word, std::vector<std::size_t>(len, 0));
        if (len > word.rows()) throw Error("word prompt shorter than the text");
        return ag::slice_rows(word, 0, len);
    }

    // P^v clamped to [0,1] as an image, for inspection.
    ImageSample render_region() const {
        ImageSample img;
        img.height = img.width = image_size;
        img.id = "region_prompt";
        img.pixels.resize(region.size());
        for (std::size_t i = 0; i < region.size(); ++i)
            img.pixels[i] = std::clamp(static_cast<double>(region.value()[i]), 0.0, 1.0);
        return img;
    }
};

namespace highlight_detail {

template <typename T>
ag::Var<T> blend(const ag::Var<T>& x, const ag::Var<T>& mask, const ag::Var<T>& prompt) {
    auto inv = ag::add_const(ag::neg(mask), T(1));
    return ag::add(ag::mul_colvec(x, mask), ag::mul_colvec(prompt, inv));
}

}  // namespace highlight_detail

// image: (H*W) x 3, mask: (H*W) x 1, prompt: (H*W) x 3.
template <typename T>
ag::Var<T> highlight_region(const ag::Var<T>& image, const ag::Var<T>& mask, const ag::Var<T>& prompt) {
    if (mask.cols() != 1 || mask.rows() != image.rows() || prompt.rows() != image.rows() ||
        prompt.cols() != image.cols())
        throw Error("highlight_region: shape mismatch (image " + image.shape_str() + ", mask " + mask.shape_str() +
                    ", prompt " + prompt.shape_str() + ")");
    return highlight_detail::blend(image, mask, prompt);
}

// words: L x C embeddings, mask: L x 1, prompt: L x C (positional rows).
template <typename T>
ag::Var<T> highlight_text(const ag::Var<T>& words, const ag::Var<T>& mask, const ag::Var<T>& prompt) {
    if (mask.cols() != 1 || mask.rows() != words.rows() || prompt.rows() != words.rows() ||
        prompt.cols() != words.cols())
        throw Error("highlight_text: shape mismatch (words " + words.shape_str() + ", mask " + mask.shape_str() +
                    ", prompt " + prompt.shape_str() + ")");
    return highlight_detail::blend(words, mask, prompt);
}

}  // namespace code
