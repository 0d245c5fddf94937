#pragma once

#include <cmath>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "trust/rng.hpp"
#include "trust/tensor.hpp"

namespace trust {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Xavier-uniform fill: entries in +-sqrt(6 / (fan_in + fan_out)).
template <typename T>
void xavier_fill(Tensor<T>& w, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-limit, limit));
}

// Zero-mean uniform of total width `width` (positional embeddings, prompts).
template <typename T>
void uniform_fill(Tensor<T>& w, double width, Rng& rng) {
    for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-width / 2.0, width / 2.0));
}

template <typename T>
class Linear {
  public:
    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng)
        : weight_(Shape{in, out}, T(0), true), bias_(Shape{out}, T(0), true) {
        xavier_fill(weight_, in, out, rng);
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        return add_rowvec(matmul(x, weight_), bias_);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".weight", weight_});
        out.push_back({prefix + ".bias", bias_});
    }

    const Tensor<T>& weight() const { return weight_; }
    const Tensor<T>& bias() const { return bias_; }

  private:
    Tensor<T> weight_, bias_;
};

template <typename T>
class LayerNorm {
  public:
    LayerNorm() = default;
    explicit LayerNorm(std::size_t d)
        : gain_(Shape{d}, T(1), true), bias_(Shape{d}, T(0), true) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        return layernorm(x, gain_, bias_, T(1e-5));
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.push_back({prefix + ".gain", gain_});
        out.push_back({prefix + ".bias", bias_});
    }

  private:
    Tensor<T> gain_, bias_;
};

template <typename T>
class MultiHeadSelfAttention {
  public:
    MultiHeadSelfAttention() = default;
    MultiHeadSelfAttention(std::size_t d, std::size_t heads, Rng& rng)
        : heads_(heads), head_dim_(d / heads), q_(d, d, rng), k_(d, d, rng), v_(d, d, rng),
          o_(d, d, rng) {
        if (heads == 0 || d % heads != 0) {
            throw ConfigError("attention: embed dim " + std::to_string(d) +
                              " not divisible by head count " + std::to_string(heads));
        }
    }

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> q = q_.forward(x);
        Tensor<T> k = k_.forward(x);
        Tensor<T> v = v_.forward(x);
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(head_dim_));
        std::vector<Tensor<T>> outs;
        outs.reserve(heads_);
        for (std::size_t h = 0; h < heads_; ++h) {
            const std::size_t c0 = h * head_dim_, c1 = c0 + head_dim_;
            Tensor<T> qh = slice_cols(q, c0, c1);
            Tensor<T> kh = slice_cols(k, c0, c1);
            Tensor<T> vh = slice_cols(v, c0, c1);
            Tensor<T> attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
            outs.push_back(matmul(attn, vh));
        }
        return o_.forward(concat_cols(outs));
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        q_.collect(prefix + ".q", out);
        k_.collect(prefix + ".k", out);
        v_.collect(prefix + ".v", out);
        o_.collect(prefix + ".o", out);
    }

  private:
    std::size_t heads_ = 1, head_dim_ = 0;
    Linear<T> q_, k_, v_, o_;
};

// Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x)).
// Token count and width are preserved.
template <typename T>
class TransformerLayer {
  public:
    TransformerLayer() = default;
    TransformerLayer(std::size_t d, std::size_t heads, std::size_t expansion, Rng& rng)
        : ln1_(d), attn_(d, heads, rng), ln2_(d), fc1_(d, d * expansion, rng),
          fc2_(d * expansion, d, rng) {}

    Tensor<T> forward(const Tensor<T>& x) const {
        Tensor<T> h = add(x, attn_.forward(ln1_.forward(x)));
        return add(h, fc2_.forward(gelu(fc1_.forward(ln2_.forward(h)))));
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        ln1_.collect(prefix + ".ln1", out);
        attn_.collect(prefix + ".attn", out);
        ln2_.collect(prefix + ".ln2", out);
        fc1_.collect(prefix + ".fc1", out);
        fc2_.collect(prefix + ".fc2", out);
    }

  private:
    LayerNorm<T> ln1_;
    MultiHeadSelfAttention<T> attn_;
    LayerNorm<T> ln2_;
    Linear<T> fc1_, fc2_;
};

// Splits an image into non-overlapping P x P patches, row-major over the
// patch grid; row i holds patch i flattened in (y, x, channel) order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t patch) {
    detail::check_rank(image, 3, "patchify");
    const std::size_t h = image.dim(0), w = image.dim(1), c = image.dim(2);
    if (patch == 0 || h % patch != 0 || w % patch != 0) {
        throw DimensionError("patchify: patch size " + std::to_string(patch) +
                             " does not divide image " + shape_str(image.shape()));
    }
    const std::size_t gy = h / patch, gx = w / patch;
    const std::size_t n = gy * gx, width = patch * patch * c;
    Tensor<T> out({n, width});
    const T* src = image.values().data();
    T* dst = out.values().data();
    for (std::size_t py = 0; py < gy; ++py)
        for (std::size_t px = 0; px < gx; ++px) {
            T* row = dst + (py * gx + px) * width;
            for (std::size_t y = 0; y < patch; ++y) {
                const T* line = src + ((py * patch + y) * w + px * patch) * c;
                std::copy(line, line + patch * c, row + y * patch * c);
            }
        }
    detail::maybe_record(out, {image}, [in = image.storage(), h, w, c, patch, gy,
                                        gx, width](const TensorData<T>& o) {
        for (std::size_t py = 0; py < gy; ++py)
            for (std::size_t px = 0; px < gx; ++px) {
                const T* row = o.grad.data() + (py * gx + px) * width;
                for (std::size_t y = 0; y < patch; ++y) {
                    T* line = in->grad.data() + ((py * patch + y) * w + px * patch) * c;
                    for (std::size_t i = 0; i < patch * c; ++i) line[i] += row[y * patch * c + i];
                }
            }
    });
    return out;
}

// Exact inverse of patchify.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tokens, std::size_t h, std::size_t w, std::size_t c,
                     std::size_t patch) {
    detail::check_rank(tokens, 2, "unpatchify");
    const std::size_t gy = h / patch, gx = w / patch;
    if (tokens.dim(0) != gy * gx || tokens.dim(1) != patch * patch * c) {
        throw DimensionError("unpatchify: tokens " + shape_str(tokens.shape()) +
                             " do not match image " + std::to_string(h) + "x" +
                             std::to_string(w) + "x" + std::to_string(c));
    }
    Tensor<T> out({h, w, c});
    const std::size_t width = patch * patch * c;
    const T* src = tokens.values().data();
    T* dst = out.values().data();
    for (std::size_t py = 0; py < gy; ++py)
        for (std::size_t px = 0; px < gx; ++px) {
            const T* row = src + (py * gx + px) * width;
            for (std::size_t y = 0; y < patch; ++y) {
                T* line = dst + ((py * patch + y) * w + px * patch) * c;
                std::copy(row + y * patch * c, row + (y + 1) * patch * c, line);
            }
        }
    detail::maybe_record(out, {tokens}, [in = tokens.storage(), h, w, c, patch, gy, gx,
                                         width](const TensorData<T>& o) {
        for (std::size_t py = 0; py < gy; ++py)
            for (std::size_t px = 0; px < gx; ++px) {
                T* row = in->grad.data() + (py * gx + px) * width;
                for (std::size_t y = 0; y < patch; ++y) {
                    const T* line = o.grad.data() + ((py * patch + y) * w + px * patch) * c;
                    for (std::size_t i = 0; i < patch * c; ++i) row[y * patch * c + i] += line[i];
                }
            }
    });
    return out;
}

// Patch embedding: linear projection of flattened patches plus learnable
// positional embeddings. Pinned to one input resolution.
template <typename T>
class PatchEmbedder {
  public:
    PatchEmbedder() = default;
    PatchEmbedder(std::size_t resolution, std::size_t channels, std::size_t patch, std::size_t d,
                  Rng& rng)
        : patch_(patch), resolution_(resolution), channels_(channels),
          proj_(patch * patch * channels, d, rng) {
        if (patch == 0 || resolution % patch != 0) {
            throw ConfigError("patch embedder: patch " + std::to_string(patch) +
                              " does not divide resolution " + std::to_string(resolution));
        }
        const std::size_t n = (resolution / patch) * (resolution / patch);
        pos_embed_ = Tensor<T>(Shape{n, d}, T(0), true);
        uniform_fill(pos_embed_, 0.02, rng);
    }

    Tensor<T> forward(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.dim(0) != resolution_ || image.dim(1) != resolution_ ||
            image.dim(2) != channels_) {
            throw DimensionError("patch embedder: image " + shape_str(image.shape()) +
                                 " vs configured " + std::to_string(resolution_) + "x" +
                                 std::to_string(resolution_) + "x" + std::to_string(channels_));
        }
        return add(proj_.forward(patchify(image, patch_)), pos_embed_);
    }

    std::size_t token_count() const { return pos_embed_.dim(0); }
    std::size_t patch_size() const { return patch_; }

    void collect(const std::string& prefix, ParamList<T>& out) {
        proj_.collect(prefix + ".proj", out);
        out.push_back({prefix + ".pos_embed", pos_embed_});
    }

  private:
    std::size_t patch_ = 0, resolution_ = 0, channels_ = 0;
    Linear<T> proj_;
    Tensor<T> pos_embed_;
};

// Mean over token rows: [r x c] -> [1 x c].
template <typename T>
Tensor<T> mean_rows(const Tensor<T>& a) {
    detail::check_rank(a, 2, "mean_rows");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({1, c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j] += a(i, j);
    for (std::size_t j = 0; j < c; ++j) out[j] /= T(r);
    detail::maybe_record(out, {a}, [an = a.storage(), r, c](const TensorData<T>& o) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += o.grad[j] / T(r);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

template <typename T>
class Adam {
  public:
    Adam(const ParamList<T>& params, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (const auto& p : params) {
            m_.emplace_back(p.tensor.numel(), T(0));
            v_.emplace_back(p.tensor.numel(), T(0));
        }
    }

    void step(ParamList<T>& params, T lr) {
        ++t_;
        const T bc1 = T(1) - std::pow(beta1_, static_cast<T>(t_));
        const T bc2 = T(1) - std::pow(beta2_, static_cast<T>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = params[i].tensor;
            auto g = p.grad();
            auto w = p.values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                m_[i][j] = beta1_ * m_[i][j] + (T(1) - beta1_) * g[j];
                v_[i][j] = beta2_ * v_[i][j] + (T(1) - beta2_) * g[j] * g[j];
                const T mhat = m_[i][j] / bc1;
                const T vhat = v_[i][j] / bc2;
                w[j] -= lr * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    std::vector<std::vector<T>>& moment1() { return m_; }
    std::vector<std::vector<T>>& moment2() { return v_; }

  private:
    T beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

template <typename T>
class SgdMomentum {
  public:
    SgdMomentum(const ParamList<T>& params, T momentum, T weight_decay)
        : momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : params) v_.emplace_back(p.tensor.numel(), T(0));
    }

    void step(ParamList<T>& params, T lr) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = params[i].tensor;
            auto g = p.grad();
            auto w = p.values();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const T eff = g[j] + weight_decay_ * w[j];
                v_[i][j] = momentum_ * v_[i][j] + eff;
                w[j] -= lr * v_[i][j];
            }
        }
    }

  private:
    T momentum_, weight_decay_;
    std::vector<std::vector<T>> v_;
};

template <typename T>
void zero_grads(ParamList<T>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
std::size_t total_numel(const ParamList<T>& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

}  // namespace trust
