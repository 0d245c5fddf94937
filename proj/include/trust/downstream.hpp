#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "trust/metrics.hpp"
#include "trust/model.hpp"
#include "trust/nn.hpp"
#include "trust/synth.hpp"

namespace trust {

struct DownstreamConfig {
    std::size_t resolution = 64;
    std::size_t channels = 3;
    std::size_t patch = 8;
    std::size_t embed_dim = 64;
    std::size_t layers = 3;
    std::size_t heads = 4;
    std::size_t expansion = 2;
    std::size_t classes = 2;

    void validate() const {
        if (patch == 0 || resolution % patch != 0) {
            throw ConfigError("downstream: patch must divide resolution");
        }
        if (classes < 2) throw ConfigError("downstream: need at least 2 classes");
        if (heads == 0 || embed_dim % heads != 0) throw ConfigError("downstream: heads must divide embed_dim");
    }
};

// Patch-transformer classifier used as the frozen task network. Mean-pooled
// tokens feed a linear head over K classes.
template <typename T>
class DownstreamModel {
  public:
    DownstreamModel(const DownstreamConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        embed_ = PatchEmbedder<T>(cfg_.resolution, cfg_.channels, cfg_.patch, cfg_.embed_dim, rng);
        for (std::size_t l = 0; l < cfg_.layers; ++l)
            layers_.emplace_back(cfg_.embed_dim, cfg_.heads, cfg_.expansion, rng);
        head_ = Linear<T>(cfg_.embed_dim, cfg_.classes, rng);
    }

    const DownstreamConfig& config() const { return cfg_; }
    bool frozen() const { return frozen_; }
    const std::string& trained_on() const { return domain_tag_; }
    void set_trained_on(std::string tag) { domain_tag_ = std::move(tag); }

    // Token activations after the last transformer layer.
    Tensor<T> forward_tokens(const Tensor<T>& image) const {
        Tensor<T> tokens = embed_.forward(image);
        for (const auto& layer : layers_) tokens = layer.forward(tokens);
        return tokens;
    }

    Tensor<T> logits_from_tokens(const Tensor<T>& tokens) const {
        return head_.forward(mean_rows(tokens));
    }

    Tensor<T> logits(const Tensor<T>& image) const {
        return logits_from_tokens(forward_tokens(image));
    }

    // Class distribution as a [1 x K] tensor on the current tape (the
    // behavior-mirror path).
    Tensor<T> classify_traced(const Tensor<T>& image) const {
        return softmax_rows(logits(image));
    }

    std::vector<double> classify(const Tensor<T>& image) const {
        Tensor<T> p = classify_traced(image);
        std::vector<double> out(p.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(p[i]);
        return out;
    }

    std::vector<std::vector<double>> classify_batch(const std::vector<Tensor<T>>& images) const {
        std::vector<std::vector<double>> out;
        out.reserve(images.size());
        for (const auto& img : images) out.push_back(classify(img));
        return out;
    }

    // Mean-pooled pre-head feature, for projections.
    std::vector<double> feature_vector(const Tensor<T>& image) const {
        Tensor<T> pooled = mean_rows(forward_tokens(image));
        std::vector<double> out(pooled.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(pooled[i]);
        return out;
    }

    ParamList<T> named_params() {
        ParamList<T> out;
        embed_.collect("ds.embed", out);
        for (std::size_t l = 0; l < layers_.size(); ++l)
            layers_[l].collect("ds.layer" + std::to_string(l), out);
        head_.collect("ds.head", out);
        return out;
    }

    void freeze() {
        for (auto& p : named_params()) p.tensor.set_requires_grad(false);
        frozen_ = true;
    }

    // Raw little-endian parameter bytes, for bitwise audits.
    std::vector<std::uint8_t> parameter_bytes() {
        std::vector<std::uint8_t> out;
        for (auto& p : named_params()) {
            const auto v = p.tensor.values();
            const std::size_t off = out.size();
            out.resize(off + v.size() * sizeof(T));
            std::memcpy(out.data() + off, v.data(), v.size() * sizeof(T));
        }
        return out;
    }

    void assert_not_frozen(const char* what) const {
        if (frozen_) throw ContractError(std::string(what) + ": model is frozen");
    }

  private:
    DownstreamConfig cfg_;
    PatchEmbedder<T> embed_;
    std::vector<TransformerLayer<T>> layers_;
    Linear<T> head_;
    bool frozen_ = false;
    std::string domain_tag_;
};

// Cross-entropy against a class index, with the probability clamped at 1e-7
// before the log.
template <typename T>
Tensor<T> cross_entropy_probs(const Tensor<T>& probs, int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.numel()) {
        throw ContractError("cross_entropy: label " + std::to_string(label) + " out of range");
    }
    return scale(log_clamped(pick(probs, static_cast<std::size_t>(label)), T(1e-7)), T(-1));
}

struct DownstreamTrainConfig {
    double lr = 0.001;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch = 16;
    std::size_t iterations = 400;
    std::size_t eval_every = 25;
    std::uint64_t seed = 5;
};

template <typename T>
struct DownstreamTrainResult {
    DownstreamModel<T> model;
    double best_accuracy = 0.0;
    std::size_t best_iteration = 0;
};

template <typename T>
Tensor<T> sample_to_input(const Sample& s, std::size_t resolution) {
    Tensor<T> gray({resolution, resolution});
    for (std::size_t i = 0; i < gray.numel(); ++i) gray[i] = static_cast<T>(s.image[i]);
    return replicate_gray(gray);
}

template <typename T>
double dataset_accuracy(const DownstreamModel<T>& model, const Dataset& ds) {
    std::vector<std::vector<double>> preds;
    std::vector<int> labels;
    preds.reserve(ds.size());
    for (const auto& s : ds.samples) {
        preds.push_back(model.classify(sample_to_input<T>(s, ds.resolution)));
        labels.push_back(s.label);
    }
    return accuracy(preds, labels);
}

// SGD + momentum training on the target domain. `selection` follows the
// best-checkpoint convention: the returned model is the snapshot with the
// highest selection accuracy, frozen.
template <typename T>
DownstreamTrainResult<T> train_downstream(const Dataset& train, const Dataset& selection,
                                          const DownstreamConfig& cfg,
                                          const DownstreamTrainConfig& tc) {
    bool has[2] = {false, false};
    for (const auto& s : train.samples) {
        if (s.label == 0) has[0] = true;
        if (s.label == 1) has[1] = true;
    }
    if (!has[0] || !has[1]) throw ConfigError("train_downstream: training set must contain every class");
    if (train.resolution != cfg.resolution) {
        throw DimensionError("train_downstream: dataset resolution " +
                             std::to_string(train.resolution) + " vs config " +
                             std::to_string(cfg.resolution));
    }

    DownstreamTrainResult<T> result{DownstreamModel<T>(cfg, tc.seed), -1.0, 0};
    DownstreamModel<T>& model = result.model;
    ParamList<T> params = model.named_params();
    SgdMomentum<T> opt(params, static_cast<T>(tc.momentum), static_cast<T>(tc.weight_decay));
    Rng rng(Rng::mix(tc.seed, 0x5a17));

    std::vector<std::vector<T>> best;
    auto snapshot = [&]() {
        best.clear();
        for (auto& p : params) best.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
    };
    auto consider = [&](std::size_t iter) {
        const double acc = dataset_accuracy(model, selection);
        if (acc > result.best_accuracy) {
            result.best_accuracy = acc;
            result.best_iteration = iter;
            snapshot();
        }
    };

    for (std::size_t iter = 0; iter < tc.iterations; ++iter) {
        Tape<T> tape;
        Tensor<T> loss_sum = Tensor<T>::scalar(T(0));
        for (std::size_t b = 0; b < tc.batch; ++b) {
            const Sample& s = train.samples[rng.uniform_index(train.size())];
            Tensor<T> input = sample_to_input<T>(s, train.resolution);
            loss_sum = add(loss_sum, cross_entropy_probs(model.classify_traced(input), s.label));
        }
        Tensor<T> loss = scale(loss_sum, T(1) / static_cast<T>(tc.batch));
        tape.backward(loss);
        opt.step(params, static_cast<T>(tc.lr));
        zero_grads(params);
        if ((iter + 1) % tc.eval_every == 0) consider(iter + 1);
    }
    consider(tc.iterations);

    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(best[i].begin(), best[i].end(), params[i].tensor.values().begin());
    }
    model.set_trained_on(train.samples.empty() ? "" : train.samples.front().domain);
    model.freeze();
    return result;
}

// Gradient-weighted token activation map at the last transformer layer:
// channel-mean of grad * activation per token, ReLU, reshaped to the patch
// grid, nearest-upsampled to the input resolution, max-normalized.
template <typename T>
std::vector<T> saliency_map(const DownstreamModel<T>& model, const Tensor<T>& image,
                            std::size_t class_index) {
    const auto& cfg = model.config();
    if (class_index >= cfg.classes) {
        throw ContractError("saliency_map: class index " + std::to_string(class_index) +
                            " out of " + std::to_string(cfg.classes));
    }
    Tensor<T> input = image.clone();
    input.set_requires_grad(true);
    Tensor<T> tokens;
    {
        Tape<T> tape;
        tokens = model.forward_tokens(input);
        Tensor<T> lg = model.logits_from_tokens(tokens);
        tape.backward(pick(lg, class_index));
    }
    const std::size_t n = tokens.dim(0), d = tokens.dim(1);
    const auto grad = tokens.grad();
    std::vector<T> token_score(n);
    T mx = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < d; ++j) acc += grad[i * d + j] * tokens[i * d + j];
        acc /= static_cast<T>(d);
        token_score[i] = acc > T(0) ? acc : T(0);
        mx = std::max(mx, token_score[i]);
    }
    const std::size_t side = cfg.resolution / cfg.patch;
    std::vector<T> map(cfg.resolution * cfg.resolution, T(0));
    for (std::size_t y = 0; y < cfg.resolution; ++y)
        for (std::size_t x = 0; x < cfg.resolution; ++x) {
            const std::size_t ty = y / cfg.patch, tx = x / cfg.patch;
            T v = token_score[ty * side + tx];
            map[y * cfg.resolution + x] = mx > T(0) ? v / mx : T(0);
        }
    return map;
}

}  // namespace trust
