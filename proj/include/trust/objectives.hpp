#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "trust/downstream.hpp"
#include "trust/nn.hpp"

namespace trust {

// Fixed random-feature conv pyramid standing in for a pretrained perceptual
// network: S stages of stride-2 3x3 conv + ReLU, parameters seeded and never
// updated. Stage s halves the resolution s+1 times.
template <typename T>
class FeatureExtractor {
  public:
    FeatureExtractor(std::size_t resolution, std::vector<std::size_t> widths, std::uint64_t seed,
                     std::size_t channels = 3)
        : resolution_(resolution), channels_(channels), seed_(seed) {
        if (widths.empty()) throw ConfigError("feature extractor: need at least one stage");
        Rng rng(seed);
        std::size_t cin = channels;
        for (std::size_t w : widths) {
            Tensor<T> k(Shape{3, 3, cin, w});
            xavier_fill(k, 9 * cin, 9 * w, rng);
            kernels_.push_back(k);
            biases_.emplace_back(Shape{w});
            cin = w;
        }
    }

    std::size_t stages() const { return kernels_.size(); }
    std::uint64_t seed() const { return seed_; }

    // Feature maps at every stage; gradient flows to the image only, the
    // extractor itself never requires gradients.
    std::vector<Tensor<T>> extract(const Tensor<T>& image) const {
        if (image.rank() != 3 || image.dim(0) != resolution_ || image.dim(1) != resolution_ ||
            image.dim(2) != channels_) {
            throw DimensionError("feature extractor: image " + shape_str(image.shape()) +
                                 " vs configured " + std::to_string(resolution_));
        }
        std::vector<Tensor<T>> maps;
        maps.reserve(kernels_.size());
        Tensor<T> x = image;
        for (std::size_t s = 0; s < kernels_.size(); ++s) {
            x = relu(add_chanvec(conv2d(x, kernels_[s], 2, Padding::kSame), biases_[s]));
            maps.push_back(x);
        }
        return maps;
    }

    std::vector<std::uint8_t> parameter_bytes() const {
        std::vector<std::uint8_t> out;
        auto dump = [&out](const Tensor<T>& t) {
            const auto v = t.values();
            const std::size_t off = out.size();
            out.resize(off + v.size() * sizeof(T));
            std::memcpy(out.data() + off, v.data(), v.size() * sizeof(T));
        };
        for (const auto& k : kernels_) dump(k);
        for (const auto& b : biases_) dump(b);
        return out;
    }

  private:
    std::size_t resolution_, channels_;
    std::uint64_t seed_;
    std::vector<Tensor<T>> kernels_;
    std::vector<Tensor<T>> biases_;
};

struct LossWeights {
    double content = 1.0;
    double style = 1.0;
    double behavior = 1.0;

    void validate() const {
        if (content < 0 || style < 0 || behavior < 0) {
            throw ConfigError("loss weights must be nonnegative");
        }
    }
};

// MSE between deepest-stage feature maps: layout must match, texture is free
// to differ.
template <typename T>
Tensor<T> content_loss(const FeatureExtractor<T>& fe, const Tensor<T>& translated,
                       const Tensor<T>& source) {
    Tensor<T> fa = fe.extract(translated).back();
    Tensor<T> fb = fe.extract(source).back();
    Tensor<T> d = sub(fa, fb);
    return mean_all(mul(d, d));
}

// Per-stage channel statistics of a batch, averaged image-wise; a constant
// [2 x C] tensor per stage (row 0 mean, row 1 std).
template <typename T>
std::vector<Tensor<T>> batch_style_stats(const FeatureExtractor<T>& fe,
                                         const std::vector<Tensor<T>>& images) {
    if (images.empty()) throw ContractError("batch_style_stats: empty batch");
    std::vector<Tensor<T>> acc;
    for (const auto& img : images) {
        auto maps = fe.extract(img);
        for (std::size_t s = 0; s < maps.size(); ++s) {
            Tensor<T> st = channel_stats(maps[s]);
            if (acc.size() <= s) acc.push_back(Tensor<T>(st.shape()));
            for (std::size_t i = 0; i < st.numel(); ++i) acc[s][i] += st[i];
        }
    }
    for (auto& a : acc)
        for (std::size_t i = 0; i < a.numel(); ++i) a[i] /= static_cast<T>(images.size());
    return acc;
}

// Sum over stages of squared distances between the image's channel mean/std
// and the target statistics.
template <typename T>
Tensor<T> style_stat_distance(const FeatureExtractor<T>& fe, const Tensor<T>& image,
                              const std::vector<Tensor<T>>& target_stats) {
    auto maps = fe.extract(image);
    if (maps.size() != target_stats.size()) {
        throw DimensionError("style_stat_distance: stage count mismatch");
    }
    Tensor<T> total = Tensor<T>::scalar(T(0));
    for (std::size_t s = 0; s < maps.size(); ++s) {
        Tensor<T> d = sub(channel_stats(maps[s]), target_stats[s]);
        total = add(total, sum_all(mul(d, d)));
    }
    return total;
}

template <typename T>
Tensor<T> style_loss(const FeatureExtractor<T>& fe, const Tensor<T>& translated,
                     const std::vector<Tensor<T>>& style_batch) {
    return style_stat_distance(fe, translated, batch_style_stats(fe, style_batch));
}

// Behavior mirror loss: cross-entropy of the frozen downstream model on the
// translated image against the source label. Gradients reach the image, not
// the downstream parameters.
template <typename T>
Tensor<T> behavior_mirror_loss(const Tensor<T>& translated, int label,
                               const DownstreamModel<T>& downstream) {
    if (!downstream.frozen()) {
        throw ContractError("behavior_mirror_loss: downstream model must be frozen");
    }
    return cross_entropy_probs(downstream.classify_traced(translated), label);
}

template <typename T>
struct LossBreakdown {
    Tensor<T> total;
    double content = 0.0;
    double style = 0.0;
    double behavior = 0.0;
    bool behavior_active = false;

    double total_value() const { return static_cast<double>(total.item()); }
};

// Weighted three-term objective. The behavior term only exists for labeled
// source samples.
template <typename T>
LossBreakdown<T> total_loss(const FeatureExtractor<T>& fe, const Tensor<T>& translated,
                            const Tensor<T>& source, const std::vector<Tensor<T>>& style_batch,
                            std::optional<int> label, const DownstreamModel<T>& downstream,
                            const LossWeights& weights) {
    weights.validate();
    LossBreakdown<T> out;
    Tensor<T> lc = content_loss(fe, translated, source);
    Tensor<T> ls = style_loss(fe, translated, style_batch);
    out.content = static_cast<double>(lc.item());
    out.style = static_cast<double>(ls.item());
    out.total = add(scale(lc, static_cast<T>(weights.content)),
                    scale(ls, static_cast<T>(weights.style)));
    if (label.has_value()) {
        Tensor<T> lbm = behavior_mirror_loss(translated, *label, downstream);
        out.behavior = static_cast<double>(lbm.item());
        out.behavior_active = true;
        out.total = add(out.total, scale(lbm, static_cast<T>(weights.behavior)));
    }
    return out;
}

}  // namespace trust
