#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "trust/nn.hpp"

namespace trust {

// How source tokens are aligned against the flattened pool of target tokens.
//   kLiteral            raw correlation, unnormalized aggregation, residual
//   kScaledSoftmax      correlation / sqrt(d) + row softmax, residual
//   kCrossAttention     learned-projection cross attention baseline
//   kIdentity           pass-through (no style transfer)
enum class TrMode { kLiteral, kScaledSoftmax, kCrossAttention, kIdentity };

inline TrMode tr_mode_from_string(const std::string& s) {
    if (s == "literal") return TrMode::kLiteral;
    if (s == "scaled-softmax") return TrMode::kScaledSoftmax;
    if (s == "cross-attention-baseline") return TrMode::kCrossAttention;
    if (s == "identity") return TrMode::kIdentity;
    throw ConfigError("unknown tr_mode '" + s + "'");
}

inline std::string tr_mode_to_string(TrMode m) {
    switch (m) {
        case TrMode::kLiteral: return "literal";
        case TrMode::kScaledSoftmax: return "scaled-softmax";
        case TrMode::kCrossAttention: return "cross-attention-baseline";
        case TrMode::kIdentity: return "identity";
    }
    return "?";
}

struct ModelConfig {
    std::size_t resolution = 64;
    std::size_t channels = 3;
    std::size_t patch = 8;
    std::size_t embed_dim = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t expansion = 2;
    std::size_t prompt_len = 16;          // L_p per layer
    std::size_t style_batch = 6;          // B
    TrMode tr_mode = TrMode::kScaledSoftmax;
    std::vector<std::size_t> decoder_widths;  // empty -> derived from embed_dim

    std::size_t tokens() const { return (resolution / patch) * (resolution / patch); }
    std::size_t decoder_stages() const {
        std::size_t p = patch, s = 0;
        while (p > 1) {
            p /= 2;
            ++s;
        }
        return s;
    }

    void validate() const {
        if (patch == 0 || (patch & (patch - 1)) != 0) {
            throw ConfigError("patch size must be a power of two, got " + std::to_string(patch));
        }
        if (resolution % patch != 0) {
            throw ConfigError("resolution " + std::to_string(resolution) +
                              " not divisible by patch " + std::to_string(patch));
        }
        if (style_batch < 1) throw ConfigError("style batch must be >= 1");
        if (embed_dim == 0 || layers == 0) throw ConfigError("embed_dim and layers must be positive");
        if (heads == 0 || embed_dim % heads != 0) {
            throw ConfigError("heads must divide embed_dim");
        }
        if (!decoder_widths.empty()) {
            if (decoder_widths.size() != decoder_stages() + 1 || decoder_widths[0] != embed_dim) {
                throw ConfigError("decoder widths must have log2(patch)+1 entries starting at embed_dim");
            }
        }
    }

    std::vector<std::size_t> effective_decoder_widths() const {
        if (!decoder_widths.empty()) return decoder_widths;
        std::vector<std::size_t> w{embed_dim};
        for (std::size_t s = 0; s < decoder_stages(); ++s)
            w.push_back(std::max<std::size_t>(w.back() / 2, 8));
        return w;
    }
};

// Per-layer learnable prompt token sets for the content encoder.
template <typename T>
struct AuxiliaryPrompts {
    std::vector<Tensor<T>> sets;  // layers entries, each [L_p x d]

    void collect(const std::string& prefix, ParamList<T>& out) {
        for (std::size_t l = 0; l < sets.size(); ++l)
            out.push_back({prefix + std::to_string(l), sets[l]});
    }
};

// The generator G: prompt-injected content encoder, per-image style encoder,
// token alignment, convolutional decoder.
template <typename T>
class TrustModel {
  public:
    explicit TrustModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t d = cfg_.embed_dim;
        content_embed_ = PatchEmbedder<T>(cfg_.resolution, cfg_.channels, cfg_.patch, d, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            content_layers_.emplace_back(d, cfg_.heads, cfg_.expansion, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l) {
            Tensor<T> p(Shape{cfg_.prompt_len, d}, T(0), true);
            uniform_fill(p, 0.02, rng);
            prompts_.sets.push_back(p);
        }
        style_embed_ = PatchEmbedder<T>(cfg_.resolution, cfg_.channels, cfg_.patch, d, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            style_layers_.emplace_back(d, cfg_.heads, cfg_.expansion, rng);
        ca_q_ = Linear<T>(d, d, rng);
        ca_k_ = Linear<T>(d, d, rng);
        ca_v_ = Linear<T>(d, d, rng);
        ca_o_ = Linear<T>(d, d, rng);
        const auto widths = cfg_.effective_decoder_widths();
        for (std::size_t s = 0; s + 1 < widths.size(); ++s) {
            Tensor<T> k(Shape{3, 3, widths[s], widths[s + 1]}, T(0), true);
            xavier_fill(k, 9 * widths[s], 9 * widths[s + 1], rng);
            dec_kernels_.push_back(k);
            dec_biases_.emplace_back(Shape{widths[s + 1]}, T(0), true);
        }
        out_kernel_ = Tensor<T>(Shape{3, 3, widths.back(), 3}, T(0), true);
        xavier_fill(out_kernel_, 9 * widths.back(), 9 * 3, rng);
        out_bias_ = Tensor<T>(Shape{3}, T(0), true);
    }

    const ModelConfig& config() const { return cfg_; }

    // Content tokens with deep prompt injection: each layer prepends its own
    // prompt set and the prompt-position outputs are dropped again, so the
    // result always has exactly N rows.
    Tensor<T> encode_content(const Tensor<T>& image) const {
        Tensor<T> tokens = content_embed_.forward(image);
        const std::size_t n = tokens.dim(0);
        for (std::size_t l = 0; l < content_layers_.size(); ++l) {
            if (prompts_.sets[l].dim(1) != cfg_.embed_dim) {
                throw DimensionError("prompts: dim mismatch");
            }
            Tensor<T> with_prompts = concat_tokens(prompts_.sets[l], tokens);
            Tensor<T> out = content_layers_[l].forward(with_prompts);
            tokens = slice_rows(out, cfg_.prompt_len, cfg_.prompt_len + n);
        }
        return tokens;
    }

    // Per-image independent style encoding; no prompts on this branch.
    std::vector<Tensor<T>> encode_style(const std::vector<Tensor<T>>& batch) const {
        if (batch.empty()) throw ContractError("encode_style: empty batch");
        std::vector<Tensor<T>> out;
        out.reserve(batch.size());
        for (const auto& img : batch) {
            Tensor<T> tokens = style_embed_.forward(img);
            for (const auto& layer : style_layers_) tokens = layer.forward(tokens);
            out.push_back(tokens);
        }
        return out;
    }

    // Batch-major flattening of B [N x d] token sets into [B*N x d]:
    // image 0's tokens first.
    static Tensor<T> flatten_style(const std::vector<Tensor<T>>& style_tokens) {
        Tensor<T> flat = style_tokens[0];
        for (std::size_t b = 1; b < style_tokens.size(); ++b)
            flat = concat_tokens(flat, style_tokens[b]);
        return flat;
    }

    Tensor<T> tr_align(const Tensor<T>& f_s, const Tensor<T>& f_t_flat, TrMode mode) const {
        if (f_s.dim(1) != f_t_flat.dim(1)) {
            throw DimensionError("tr_align: token dim mismatch " + shape_str(f_s.shape()) +
                                 " vs " + shape_str(f_t_flat.shape()));
        }
        switch (mode) {
            case TrMode::kLiteral: {
                Tensor<T> m = matmul_nt(f_s, f_t_flat);
                return add(f_s, matmul(m, f_t_flat));
            }
            case TrMode::kScaledSoftmax: {
                const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(f_s.dim(1)));
                Tensor<T> w = softmax_rows(scale(matmul_nt(f_s, f_t_flat), inv_sqrt));
                return add(f_s, matmul(w, f_t_flat));
            }
            case TrMode::kCrossAttention: {
                const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(f_s.dim(1)));
                Tensor<T> q = ca_q_.forward(f_s);
                Tensor<T> k = ca_k_.forward(f_t_flat);
                Tensor<T> v = ca_v_.forward(f_t_flat);
                Tensor<T> attn = softmax_rows(scale(matmul_nt(q, k), inv_sqrt));
                return add(f_s, ca_o_.forward(matmul(attn, v)));
            }
            case TrMode::kIdentity: return f_s;
        }
        throw ContractError("tr_align: bad mode");
    }

    // Aligned tokens back to an image: reshape to sqrt(N) x sqrt(N) x d, then
    // log2(P) rounds of nearest-neighbor x2 upsampling + 3x3 conv + ReLU and
    // a final 3-channel conv under a sigmoid.
    Tensor<T> decode(const Tensor<T>& f_align) const {
        const std::size_t n = f_align.dim(0);
        const std::size_t side = static_cast<std::size_t>(std::llround(std::sqrt(double(n))));
        if (side * side != n) {
            throw DimensionError("decode: token count " + std::to_string(n) +
                                 " is not a perfect square");
        }
        Tensor<T> map = reshape(f_align, {side, side, f_align.dim(1)});
        for (std::size_t s = 0; s < dec_kernels_.size(); ++s) {
            map = upsample_nearest2x(map);
            map = relu(add_chanvec(conv2d(map, dec_kernels_[s], 1, Padding::kSame),
                                   dec_biases_[s]));
        }
        return sigmoid(
            add_chanvec(conv2d(map, out_kernel_, 1, Padding::kSame), out_bias_));
    }

    Tensor<T> translate(const Tensor<T>& x_s, const std::vector<Tensor<T>>& style_batch) const {
        Tensor<T> f_s = encode_content(x_s);
        Tensor<T> f_t = flatten_style(encode_style(style_batch));
        return decode(tr_align(f_s, f_t, cfg_.tr_mode));
    }

    ParamList<T> named_params() {
        ParamList<T> out;
        content_embed_.collect("content.embed", out);
        for (std::size_t l = 0; l < content_layers_.size(); ++l)
            content_layers_[l].collect("content.layer" + std::to_string(l), out);
        prompts_.collect("content.prompt", out);
        style_embed_.collect("style.embed", out);
        for (std::size_t l = 0; l < style_layers_.size(); ++l)
            style_layers_[l].collect("style.layer" + std::to_string(l), out);
        ca_q_.collect("tr.ca.q", out);
        ca_k_.collect("tr.ca.k", out);
        ca_v_.collect("tr.ca.v", out);
        ca_o_.collect("tr.ca.o", out);
        for (std::size_t s = 0; s < dec_kernels_.size(); ++s) {
            out.push_back({"decoder.conv" + std::to_string(s) + ".kernel", dec_kernels_[s]});
            out.push_back({"decoder.conv" + std::to_string(s) + ".bias", dec_biases_[s]});
        }
        out.push_back({"decoder.out.kernel", out_kernel_});
        out.push_back({"decoder.out.bias", out_bias_});
        return out;
    }

    std::size_t count_parameters() {
        return total_numel(named_params());
    }

    const AuxiliaryPrompts<T>& prompts() const { return prompts_; }
    const PatchEmbedder<T>& content_embedder() const { return content_embed_; }
    const std::vector<TransformerLayer<T>>& content_layers() const { return content_layers_; }

  private:
    ModelConfig cfg_;
    PatchEmbedder<T> content_embed_;
    std::vector<TransformerLayer<T>> content_layers_;
    AuxiliaryPrompts<T> prompts_;
    PatchEmbedder<T> style_embed_;
    std::vector<TransformerLayer<T>> style_layers_;
    Linear<T> ca_q_, ca_k_, ca_v_, ca_o_;
    std::vector<Tensor<T>> dec_kernels_;
    std::vector<Tensor<T>> dec_biases_;
    Tensor<T> out_kernel_, out_bias_;
};

// ---------------------------------------------------------------------------
// FLOPs accounting (multiply-accumulates of one translate() forward)
// ---------------------------------------------------------------------------

inline std::uint64_t linear_macs(std::uint64_t tokens, std::uint64_t in, std::uint64_t out) {
    return tokens * in * out;
}

inline std::uint64_t transformer_layer_macs(std::uint64_t tokens, std::uint64_t d,
                                            std::uint64_t expansion) {
    // attention: 4 projections + QK^T + AV; MLP: two linear maps.
    return 4 * tokens * d * d + 2 * tokens * tokens * d + 2 * tokens * d * d * expansion;
}

inline std::uint64_t flops_estimate(const ModelConfig& cfg) {
    cfg.validate();
    const std::uint64_t n = cfg.tokens();
    const std::uint64_t d = cfg.embed_dim;
    const std::uint64_t b = cfg.style_batch;
    const std::uint64_t patch_in = cfg.patch * cfg.patch * cfg.channels;
    std::uint64_t macs = 0;
    // content branch, prompts included in the token count
    macs += linear_macs(n, patch_in, d);
    const std::uint64_t tc = n + cfg.prompt_len;
    macs += cfg.layers * transformer_layer_macs(tc, d, cfg.expansion);
    // style branch, B images
    macs += b * linear_macs(n, patch_in, d);
    macs += b * cfg.layers * transformer_layer_macs(n, d, cfg.expansion);
    // token alignment
    switch (cfg.tr_mode) {
        case TrMode::kLiteral:
        case TrMode::kScaledSoftmax:
            macs += 2 * n * (b * n) * d;
            break;
        case TrMode::kCrossAttention:
            macs += 2 * n * d * d + 2 * (b * n) * d * d + 2 * n * (b * n) * d;
            break;
        case TrMode::kIdentity: break;
    }
    // decoder
    const auto widths = cfg.effective_decoder_widths();
    std::uint64_t side = cfg.resolution / cfg.patch;
    for (std::size_t s = 0; s + 1 < widths.size(); ++s) {
        side *= 2;
        macs += side * side * 9ull * widths[s] * widths[s + 1];
    }
    macs += side * side * 9ull * widths.back() * 3;
    return macs;
}

// Grayscale H x W map replicated to the 3-channel layout every network input
// uses.
template <typename T>
Tensor<T> replicate_gray(const Tensor<T>& gray) {
    detail::check_rank(gray, 2, "replicate_gray");
    const std::size_t h = gray.dim(0), w = gray.dim(1);
    Tensor<T> out({h, w, 3});
    for (std::size_t i = 0; i < h * w; ++i)
        for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = gray[i];
    return out;
}

}  // namespace trust
