#pragma once

// Image-text co-segmentation: noun embeddings with knowledge guidance, region
// masks from noun-pixel dot products, word logits and masks with an implicit
// none-of-the-above class, pseudo labels, and the segmentation losses.

#include "code/align.hpp"
#include "code/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace code {

struct CosegmentConfig {
    std::string knowledge_template = "a photo of a {noun}";
    // Scales and biases act on cosine similarities (unit-norm embeddings).
    double gamma_init = 10.0;  // region-mask scale
    double beta_init = -2.5;   // region-mask bias
    double word_scale_init = 10.0;
    double word_bias_init = -2.5;
};

// Learnable pieces of both segmenters.
template <typename T>
struct CosegmentHead {
    ag::Var<T> context;  // context_tokens x C
    ag::Var<T> gamma, beta;
    ag::Var<T> word_scale, word_bias;

    CosegmentHead() = default;
    CosegmentHead(ParamStore<T>& ps, const ModelConfig& mc, const CosegmentConfig& cc, Rng& rng) {
        using groups::kCosegment;
        context = ps.normal("cosegment.context", mc.context_tokens, mc.width, 0.02, rng, kCosegment);
        gamma = ps.filled("cosegment.gamma", 1, 1, static_cast<T>(cc.gamma_init), kCosegment);
        beta = ps.filled("cosegment.beta", 1, 1, static_cast<T>(cc.beta_init), kCosegment);
        word_scale = ps.filled("cosegment.word_scale", 1, 1, static_cast<T>(cc.word_scale_init), kCosegment);
        word_bias = ps.filled("cosegment.word_bias", 1, 1, static_cast<T>(cc.word_bias_init), kCosegment);
    }
};

template <typename T>
struct NounEmbedding {
    ag::Var<T> n;        // 1 x C, learnable-context prompt
    ag::Var<T> n_prime;  // 1 x C, hand-crafted template, gradient-detached
};

inline std::string fill_template(const std::string& tmpl, const std::string& noun) {
    std::string out = tmpl;
    const auto pos = out.find("{noun}");
    if (pos == std::string::npos) return out + " " + noun;
    return out.replace(pos, 6, noun);
}

// Noun feature from [<sot>, context..., noun pieces..., <eot>] through the text
// backbone, plus the template feature. With `use_template` the template
// feature also stands in for n (hand-crafted prompting at evaluation).
template <typename T>
NounEmbedding<T> embed_noun(const EncoderBundle<T>& enc, const CosegmentHead<T>& head, const std::string& noun,
                            const CosegmentConfig& cc, const Mode& mode = {}) {
    if (noun.empty()) throw Error("embed_noun: empty noun");
    const Tokenizer& tok = enc.tokenizer();
    const std::size_t max_len = enc.config().max_text_len;

    std::vector<int> pieces;
    for (const auto& w : Tokenizer::split_words(noun)) {
        auto ids = tok.encode_word(w);
        pieces.insert(pieces.end(), ids.begin(), ids.end());
    }
    if (pieces.empty()) throw Error("embed_noun: noun has no tokens");
    const std::size_t len = 2 + head.context.rows() + pieces.size();
    if (len > max_len) throw Error("embed_noun: prompt longer than max_text_len");

    auto sot = enc.token_embeddings(std::vector<int>{Tokenizer::kSot});
    auto body = enc.token_embeddings(pieces);
    auto eot = enc.token_embeddings(std::vector<int>{Tokenizer::kEot});
    auto seq = ag::concat_rows<T>({sot, head.context, body, eot});
    NounEmbedding<T> out;
    out.n = enc.text_feature(seq, {}, len - 1, mode);

    auto templ = tok.encode(fill_template(cc.knowledge_template, noun), max_len);
    const std::size_t n_valid = templ.valid_length();
    auto templ_seq = enc.token_embeddings(std::vector<int>(templ.tokens.begin(), templ.tokens.begin() + n_valid));
    out.n_prime = ag::detach(enc.text_feature(templ_seq, {}, n_valid - 1, Mode{}));
    return out;
}

// ||n - n'||^2; n' carries no gradient.
template <typename T>
ag::Var<T> kg_loss(const NounEmbedding<T>& e) {
    if (e.n.size() != e.n_prime.size()) throw Error("kg_loss: shape mismatch");
    return ag::sum(ag::square(ag::sub(e.n, ag::detach(e.n_prime))));
}

// Pre-sigmoid region logits at feature resolution: gamma * <x_hw, n> + beta, (H'W') x 1.
template <typename T>
ag::Var<T> region_logits(const ag::Var<T>& pixel_map, const ag::Var<T>& noun, const ag::Var<T>& gamma,
                         const ag::Var<T>& beta) {
    if (pixel_map.cols() != noun.cols() || noun.rows() != 1)
        throw Error("region_mask: embedding width mismatch (" + pixel_map.shape_str() + " vs " + noun.shape_str() + ")");
    return ag::add_scalar(ag::mul_scalar(ag::matmul_nt(pixel_map, noun), gamma), beta);
}

// Region mask M^v in (0,1), (H*W) x 1. The logits are upsampled bilinearly
// before the sigmoid, which equals masking an upsampled pixel map.
template <typename T>
ag::Var<T> region_mask(const ag::Var<T>& pixel_map, const ag::Var<T>& noun, const ag::Var<T>& gamma,
                       const ag::Var<T>& beta, const ag::RowMat<T>& upsample) {
    return ag::sigmoid(ag::apply_fixed(upsample, region_logits(pixel_map, noun, gamma, beta)));
}

// l_{j,i} = w * <x^t_i, n_j> + b, L x 1.
template <typename T>
ag::Var<T> word_logits(const ag::Var<T>& word_map, const ag::Var<T>& noun, const ag::Var<T>& w,
                       const ag::Var<T>& b) {
    if (word_map.cols() != noun.cols() || noun.rows() != 1) throw Error("word_logits: embedding width mismatch");
    return ag::add_scalar(ag::mul_scalar(ag::matmul_nt(word_map, noun), w), b);
}

template <typename T>
struct WordSegmentation {
    ag::Var<T> class_logits;          // L x (J+1), column 0 = none class (logit 0)
    ag::Var<T> probs;                 // softmax over the J+1 classes
    std::vector<ag::Var<T>> masks;    // J masks, each L x 1
    ag::Var<T> residual;              // L x 1 none-class probability
};

// m^{t,j}_i = exp(l_{j,i}) / (1 + sum_j' exp(l_{j',i})), computed as a softmax
// over [0, l_1, ..., l_J] with max shifting.
template <typename T>
WordSegmentation<T> word_masks(const std::vector<ag::Var<T>>& logits) {
    if (logits.empty()) throw Error("word_masks: need at least one noun");
    const std::size_t len = logits.front().rows();
    for (const auto& l : logits)
        if (l.rows() != len || l.cols() != 1) throw Error("word_masks: logits must all be L x 1");
    std::vector<ag::Var<T>> cols{ag::constant<T>(len, 1, T(0))};
    cols.insert(cols.end(), logits.begin(), logits.end());
    WordSegmentation<T> ws;
    ws.class_logits = ag::concat_cols(cols);
    ws.probs = ag::softmax_rows(ws.class_logits);
    ws.residual = ag::slice_cols(ws.probs, 0, 1);
    for (std::size_t j = 1; j <= logits.size(); ++j) ws.masks.push_back(ag::slice_cols(ws.probs, j, j + 1));
    return ws;
}

// Per-word class among {none, 1..J}: argmax of [0, l_1..l_J], ties to the
// lowest class index (none first). Values only; labels carry no gradient.
template <typename T>
std::vector<std::size_t> pseudo_label_classes(const std::vector<ag::Var<T>>& logits) {
    if (logits.empty()) throw Error("pseudo_labels: need at least one noun");
    const std::size_t len = logits.front().rows();
    std::vector<std::size_t> cls(len, 0);
    for (std::size_t i = 0; i < len; ++i) {
        T best = T(0);
        for (std::size_t j = 0; j < logits.size(); ++j) {
            const T v = logits[j].value()[i];
            if (v > best) {
                best = v;
                cls[i] = j + 1;
            }
        }
    }
    return cls;
}

// One {0,1}^L vector per noun j: p^j_i = 1 iff class j wins word i.
template <typename T>
std::vector<std::vector<std::uint8_t>> pseudo_labels(const std::vector<ag::Var<T>>& logits) {
    const auto cls = pseudo_label_classes(logits);
    std::vector<std::vector<std::uint8_t>> out(logits.size(), std::vector<std::uint8_t>(cls.size(), 0));
    for (std::size_t i = 0; i < cls.size(); ++i)
        if (cls[i] > 0) out[cls[i] - 1][i] = 1;
    return out;
}

// Mean (J+1)-way cross-entropy over positions with counted[i] set.
template <typename T>
ag::Var<T> text_seg_loss(const WordSegmentation<T>& ws, const std::vector<std::size_t>& labels,
                         const std::vector<bool>& counted) {
    const std::size_t len = ws.class_logits.rows();
    if (labels.size() != len || counted.size() != len) throw Error("text_seg_loss: shape mismatch");
    std::vector<std::pair<std::size_t, std::size_t>> at;
    for (std::size_t i = 0; i < len; ++i)
        if (counted[i]) {
            if (labels[i] >= ws.class_logits.cols()) throw Error("text_seg_loss: label out of range");
            at.emplace_back(i, labels[i]);
        }
    if (at.empty()) throw Error("text_seg_loss: no unpadded words");
    auto logp = ag::pick(ag::log_softmax_rows(ws.class_logits), std::move(at));
    return ag::neg(ag::mean(logp));
}

struct ImageSegLossConfig {
    bool use_area = true;
    bool use_tv = true;
    bool use_contrast = true;
    double area_lo = 0.05;
    double area_hi = 0.6;
    double area_weight = 1.0;
    double tv_weight = 0.1;
    double contrast_weight = 1.0;
    double contrast_temperature = 0.1;
};

template <typename T>
struct ImageSegLossParts {
    std::optional<ag::Var<T>> area, tv, contrast;
    ag::Var<T> total;
};

// Mask-weighted mean of a low-resolution pixel map, 1 x C. `downsample` is the
// transpose of the bilinear upsampling matrix, so pooling at full resolution
// over the upsampled map equals this product.
template <typename T>
ag::Var<T> mask_pooled_feature(const ag::Var<T>& mask, const ag::Var<T>& pixel_map,
                               const ag::RowMat<T>& upsample_transposed) {
    auto weights = ag::apply_fixed(upsample_transposed, mask);  // (H'W') x 1
    auto pooled = ag::matmul(ag::transpose(weights), pixel_map);
    return ag::mul_scalar(pooled, ag::reciprocal(ag::add_const(ag::sum(mask), T(1e-6))));
}

// Surrogate image-segmentation loss over a batch of region masks:
//   area:     mean_b [relu(lo - mean(M_b)) + relu(mean(M_b) - hi)]
//   tv:       mean_b mean of squared neighbour differences of M_b
//   contrast: symmetric InfoNCE between normalized mask-pooled features and
//             normalized noun embeddings, logits scaled by 1/temperature
template <typename T>
ImageSegLossParts<T> image_seg_loss(const std::vector<ag::Var<T>>& masks, const std::vector<ag::Var<T>>& pixel_maps,
                                    const std::vector<ag::Var<T>>& nouns, std::size_t height, std::size_t width,
                                    const ag::RowMat<T>& upsample, const ImageSegLossConfig& cfg) {
    const std::size_t b = masks.size();
    if (b == 0) throw Error("image_seg_loss: empty batch");
    if (pixel_maps.size() != b || nouns.size() != b) throw Error("image_seg_loss: batch size mismatch");
    ImageSegLossParts<T> out;
    out.total = ag::scalar<T>(T(0));
    if (cfg.use_area) {
        std::vector<ag::Var<T>> terms;
        for (const auto& m : masks) {
            auto mu = ag::mean(m);
            terms.push_back(ag::add(ag::relu(ag::add_const(ag::neg(mu), static_cast<T>(cfg.area_lo))),
                                    ag::relu(ag::add_const(mu, static_cast<T>(-cfg.area_hi)))));
        }
        out.area = ag::mean(ag::concat_rows(terms));
        out.total = ag::add(out.total, ag::scale(*out.area, static_cast<T>(cfg.area_weight)));
    }
    if (cfg.use_tv) {
        std::vector<ag::Var<T>> terms;
        for (const auto& m : masks) terms.push_back(ag::mean(ag::square(ag::grid_diffs(m, height, width))));
        out.tv = ag::mean(ag::concat_rows(terms));
        out.total = ag::add(out.total, ag::scale(*out.tv, static_cast<T>(cfg.tv_weight)));
    }
    if (cfg.use_contrast) {
        const ag::RowMat<T> down = upsample.transpose();
        std::vector<ag::Var<T>> feats;
        for (std::size_t i = 0; i < b; ++i) feats.push_back(mask_pooled_feature(masks[i], pixel_maps[i], down));
        auto f = ag::l2_normalize_rows(ag::concat_rows(feats));
        auto n = ag::l2_normalize_rows(ag::concat_rows(nouns));
        out.contrast = symmetric_infonce(ag::scale(ag::matmul_nt(f, n), static_cast<T>(1.0 / cfg.contrast_temperature)));
        out.total = ag::add(out.total, ag::scale(*out.contrast, static_cast<T>(cfg.contrast_weight)));
    }
    return out;
}

}  // namespace code
