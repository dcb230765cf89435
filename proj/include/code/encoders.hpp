#pragma once

// Feature extractors: a patch transformer for pixel-wise image embeddings, a
// text transformer for word-wise embeddings (extended by two appended
// attention layers), and the segment encoders applied to highlighted inputs.

#include "code/image_io.hpp"
#include "code/nn.hpp"
#include "code/tokenizer.hpp"

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace code {

struct ModelConfig {
    std::size_t image_size = 32;
    std::size_t patch = 4;
    std::size_t width = 32;  // shared embedding width C
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t image_layers = 4;
    std::size_t text_layers = 4;
    std::size_t text_segmenter_layers = 2;
    std::size_t max_text_len = 16;
    std::size_t context_tokens = 4;
    double dropout = 0.0;
    bool freeze_image_backbone = true;
    bool freeze_text_backbone = true;

    std::size_t grid() const { return image_size / patch; }
    std::size_t patches() const { return grid() * grid(); }
};

// Parameter groups. Backbones are the pretrained-VLM stand-ins; everything
// else is task-specific and always trainable.
namespace groups {
inline constexpr const char* kImageBackbone = "image_backbone";
inline constexpr const char* kTextBackbone = "text_backbone";
inline constexpr const char* kPixelHead = "pixel_head";
inline constexpr const char* kTextSegmenter = "text_segmenter";
inline constexpr const char* kSegmentImageHead = "segment_image_head";
inline constexpr const char* kSegmentTextHead = "segment_text_head";
inline constexpr const char* kCosegment = "cosegment";
inline constexpr const char* kPrompts = "prompts";
inline constexpr const char* kAlign = "align";
}  // namespace groups

// Bilinear interpolation matrix (half-pixel centers, edge clamped) mapping a
// row-major src_h x src_w field to dst_h x dst_w.
template <typename T>
ag::RowMat<T> bilinear_matrix(std::size_t src_h, std::size_t src_w, std::size_t dst_h, std::size_t dst_w) {
    ag::RowMat<T> m = ag::RowMat<T>::Zero(static_cast<Eigen::Index>(dst_h * dst_w),
                                          static_cast<Eigen::Index>(src_h * src_w));
    auto axis = [](std::size_t dst, std::size_t src, std::size_t i) {
        double s = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(src - 1));
        const auto i0 = static_cast<std::size_t>(std::floor(s));
        const std::size_t i1 = std::min(i0 + 1, src - 1);
        return std::tuple{i0, i1, s - static_cast<double>(i0)};
    };
    for (std::size_t y = 0; y < dst_h; ++y) {
        auto [y0, y1, wy] = axis(dst_h, src_h, y);
        for (std::size_t x = 0; x < dst_w; ++x) {
            auto [x0, x1, wx] = axis(dst_w, src_w, x);
            const auto r = static_cast<Eigen::Index>(y * dst_w + x);
            auto add = [&](std::size_t sy, std::size_t sx, double w) {
                m(r, static_cast<Eigen::Index>(sy * src_w + sx)) += static_cast<T>(w);
            };
            add(y0, x0, (1 - wy) * (1 - wx));
            add(y0, x1, (1 - wy) * wx);
            add(y1, x0, wy * (1 - wx));
            add(y1, x1, wy * wx);
        }
    }
    return m;
}

inline ImageSample resize_image(const ImageSample& img, std::size_t h, std::size_t w) {
    if (img.height == h && img.width == w) return img;
    const auto m = bilinear_matrix<double>(img.height, img.width, h, w);
    ImageSample out;
    out.height = h;
    out.width = w;
    out.id = img.id;
    out.pixels.resize(h * w * 3);
    ag::MapM<double>(out.pixels.data(), static_cast<Eigen::Index>(h * w), 3).noalias() =
        m * ag::MapC<double>(img.pixels.data(), static_cast<Eigen::Index>(img.height * img.width), 3);
    return out;
}

template <typename T>
ag::Var<T> image_var(const ImageSample& img) {
    std::vector<T> v(img.pixels.begin(), img.pixels.end());
    return ag::constant<T>(img.height * img.width, 3, std::move(v));
}

template <typename T>
class EncoderBundle {
public:
    EncoderBundle(const ModelConfig& cfg, const Tokenizer& tok, ParamStore<T>& ps, Rng& rng)
        : cfg_(cfg), tok_(&tok), ps_(&ps) {
        if (cfg.image_size % cfg.patch != 0) throw Error("image size must be divisible by patch size");
        const std::size_t c = cfg.width, mlp = cfg.width * cfg.mlp_ratio;
        using namespace groups;

        patch_embed_ = nn::Linear<T>(ps, "image.patch_embed", cfg.patch * cfg.patch * 3, c, rng, kImageBackbone);
        image_pos_ = ps.normal("image.pos", cfg.patches(), c, 0.02, rng, kImageBackbone);
        for (std::size_t i = 0; i < cfg.image_layers; ++i)
            image_blocks_.emplace_back(ps, "image.block" + std::to_string(i), c, cfg.heads, mlp, rng, kImageBackbone);
        image_ln_ = nn::LayerNorm<T>(ps, "image.ln_post", c, kImageBackbone);
        image_proj_ = nn::Linear<T>(ps, "image.projection", c, c, rng, kImageBackbone, false);

        token_embed_ = ps.normal("text.token_embed", tok.vocab_size(), c, 0.02, rng, kTextBackbone);
        text_pos_ = ps.normal("text.pos", cfg.max_text_len, c, 0.01, rng, kTextBackbone);
        for (std::size_t i = 0; i < cfg.text_layers; ++i)
            text_blocks_.emplace_back(ps, "text.block" + std::to_string(i), c, cfg.heads, mlp, rng, kTextBackbone);
        text_ln_ = nn::LayerNorm<T>(ps, "text.ln_final", c, kTextBackbone);
        text_proj_ = nn::Linear<T>(ps, "text.projection", c, c, rng, kTextBackbone, false);

        pixel_head_.weight = ps.filled("pixel_head.proj.weight", c, c, T(0), kPixelHead);
        pixel_head_.bias = ps.filled("pixel_head.proj.bias", 1, c, T(0), kPixelHead);

        for (std::size_t i = 0; i < cfg.text_segmenter_layers; ++i)
            seg_blocks_.emplace_back(ps, "text_segmenter.block" + std::to_string(i), c, cfg.heads, mlp, rng,
                                     kTextSegmenter);
        seg_ln_ = nn::LayerNorm<T>(ps, "text_segmenter.ln", c, kTextSegmenter);

        seg_image_ln_ = nn::LayerNorm<T>(ps, "segment_image.ln", c, kSegmentImageHead);
        seg_image_proj_ = nn::Linear<T>(ps, "segment_image.proj", c, c, rng, kSegmentImageHead);
        seg_text_ln_ = nn::LayerNorm<T>(ps, "segment_text.ln", c, kSegmentTextHead);
        seg_text_proj_ = nn::Linear<T>(ps, "segment_text.proj", c, c, rng, kSegmentTextHead);

        upsample_ = bilinear_matrix<T>(cfg.grid(), cfg.grid(), cfg.image_size, cfg.image_size);
        patch_index_ = make_patch_index();
        if (cfg.freeze_image_backbone) ps.set_trainable(kImageBackbone, false);
        if (cfg.freeze_text_backbone) ps.set_trainable(kTextBackbone, false);
    }

    const ModelConfig& config() const { return cfg_; }
    const Tokenizer& tokenizer() const { return *tok_; }
    const ag::RowMat<T>& upsample() const { return upsample_; }

    // Transformer tokens for an (H*W) x 3 image variable. Differentiable in the pixels.
    ag::Var<T> image_tokens(const ag::Var<T>& pixels, const Mode& mode) const {
        const std::size_t n = cfg_.image_size * cfg_.image_size * 3;
        if (pixels.rows() * pixels.cols() != n) throw Error("image shape does not match the model resolution");
        auto x = ag::add(patch_embed_(patchify(pixels)), image_pos_);
        for (const auto& b : image_blocks_) x = b(x, {}, mode);
        return image_ln_(x);
    }

    // Unit-norm global image feature: mean-pooled tokens through the image projection.
    ag::Var<T> image_feature(const ag::Var<T>& pixels, const Mode& mode = {}) const {
        return ag::l2_normalize_rows(image_proj_(ag::col_means(image_tokens(pixels, mode))));
    }

    // Unit-norm pixel-wise embedding at feature resolution: (H/patch * W/patch) x C.
    ag::Var<T> embed_pixels(const ImageSample& image, const Mode& mode = {}) const {
        if (image.height % cfg_.patch != 0 || image.width % cfg_.patch != 0)
            throw Error("image dimensions must be divisible by the patch size");
        if (image.height != cfg_.image_size || image.width != cfg_.image_size)
            throw Error("image resolution differs from the model resolution; resize first");
        auto x = image_tokens(image_var<T>(image), mode);
        return ag::l2_normalize_rows(ag::add(image_proj_(x), pixel_head_(x)));
    }

    ag::Var<T> encode_segment_image(const ag::Var<T>& highlighted, const Mode& mode = {}) const {
        if (!ag::all_finite(highlighted)) throw Error("encode_segment_image: non-finite input");
        auto pooled = ag::col_means(image_tokens(highlighted, mode));
        return ag::l2_normalize_rows(seg_image_proj_(seg_image_ln_(pooled)));
    }

    // Continuous token embeddings X^t (no positional term), L x C.
    ag::Var<T> token_embeddings(const std::vector<int>& tokens) const {
        std::vector<std::size_t> idx(tokens.begin(), tokens.end());
        return ag::gather_rows(token_embed_, std::move(idx));
    }
    ag::Var<T> token_embeddings(const TextSample& text) const { return token_embeddings(text.tokens); }

    // Text backbone over an L x C embedding sequence.
    ag::Var<T> text_backbone(const ag::Var<T>& embeddings, const std::vector<bool>& valid, const Mode& mode) const {
        if (embeddings.rows() > cfg_.max_text_len) throw Error("text sequence exceeds max_text_len");
        auto x = ag::add(embeddings, ag::slice_rows(text_pos_, 0, embeddings.rows()));
        for (const auto& b : text_blocks_) x = b(x, valid, mode);
        return text_ln_(x);
    }

    // Projected unit-norm sentence feature taken at position `at` (the <eot> slot).
    ag::Var<T> text_feature(const ag::Var<T>& embeddings, const std::vector<bool>& valid, std::size_t at,
                            const Mode& mode = {}) const {
        return ag::l2_normalize_rows(text_proj_(ag::slice_rows(text_backbone(embeddings, valid, mode), at, at + 1)));
    }

    // Unit-norm word-wise features x^t (L x C); pad rows are zero.
    ag::Var<T> embed_words(const TextSample& text, const Mode& mode = {}) const {
        if (text.length() > cfg_.max_text_len) throw Error("text exceeds max_text_len");
        const auto valid = text.valid_mask();
        auto x = text_backbone(token_embeddings(text), valid, mode);
        for (const auto& b : seg_blocks_) x = b(x, valid, mode);
        x = ag::l2_normalize_rows(text_proj_(seg_ln_(x)));
        std::vector<T> keep(valid.size());
        for (std::size_t i = 0; i < valid.size(); ++i) keep[i] = valid[i] ? T(1) : T(0);
        return ag::mul_colvec(x, ag::constant<T>(valid.size(), 1, std::move(keep)));
    }

    // Highlighted token-embedding sequence (L x C) -> unit C-vector. All
    // positions take part; masked-out positions already carry the prompt.
    ag::Var<T> encode_segment_text(const ag::Var<T>& highlighted, const Mode& mode = {}) const {
        if (!ag::all_finite(highlighted)) throw Error("encode_segment_text: non-finite input");
        auto h = text_backbone(highlighted, {}, mode);
        auto pooled = ag::col_means(h);
        return ag::l2_normalize_rows(seg_text_proj_(seg_text_ln_(pooled)));
    }

    // Deterministic ordering of the registered parameters.
    std::vector<std::string> parameter_names() const {
        std::vector<std::string> out;
        for (const auto& e : ps_->entries()) out.push_back(e.name);
        return out;
    }

private:
    ag::Var<T> patchify(const ag::Var<T>& pixels) const {
        const std::size_t n = cfg_.image_size * cfg_.image_size * 3;
        if (pixels.rows() * pixels.cols() != n) throw Error("image shape does not match the model resolution");
        // Pixels are centered and scaled ((x - 0.5) / 0.25) before embedding.
        auto centered = ag::scale(ag::add_const(ag::reshape(pixels, n, 1), T(-0.5)), T(4));
        return ag::reshape(ag::gather_rows(centered, patch_index_), cfg_.patches(), cfg_.patch * cfg_.patch * 3);
    }

    // patch_index_[k] = flat index into (H*W*3) for element k of the
    // (patches x patch*patch*3) patch matrix.
    std::vector<std::size_t> make_patch_index() const {
        const std::size_t g = cfg_.grid(), p = cfg_.patch, w = cfg_.image_size;
        std::vector<std::size_t> idx;
        idx.reserve(w * w * 3);
        for (std::size_t py = 0; py < g; ++py)
            for (std::size_t px = 0; px < g; ++px)
                for (std::size_t dy = 0; dy < p; ++dy)
                    for (std::size_t dx = 0; dx < p; ++dx)
                        for (std::size_t c = 0; c < 3; ++c)
                            idx.push_back(((py * p + dy) * w + (px * p + dx)) * 3 + c);
        return idx;
    }

    ModelConfig cfg_;
    const Tokenizer* tok_;
    ParamStore<T>* ps_;

    nn::Linear<T> patch_embed_;
    ag::Var<T> image_pos_;
    std::vector<nn::TransformerBlock<T>> image_blocks_;
    nn::LayerNorm<T> image_ln_;
    nn::Linear<T> image_proj_;

    ag::Var<T> token_embed_;
    ag::Var<T> text_pos_;
    std::vector<nn::TransformerBlock<T>> text_blocks_;
    nn::LayerNorm<T> text_ln_;
    nn::Linear<T> text_proj_;

    nn::Linear<T> pixel_head_;
    std::vector<nn::TransformerBlock<T>> seg_blocks_;
    nn::LayerNorm<T> seg_ln_;
    nn::LayerNorm<T> seg_image_ln_, seg_text_ln_;
    nn::Linear<T> seg_image_proj_, seg_text_proj_;

    ag::RowMat<T> upsample_;
    std::vector<std::size_t> patch_index_;
};

}  // namespace code
