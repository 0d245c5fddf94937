#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "trust/errors.hpp"

namespace trust {

struct MetricsReport {
    std::string arm;     // raw-source | translated | target
    std::string domain;
    std::string tr_mode;
    std::size_t samples = 0;
    double accuracy = 0.0;
    double auc = 0.0;
    bool has_dice = false;
    double dice = 0.0;
    double iou = 0.0;
};

// Fraction of argmax matches; ties break toward the lowest class index.
inline double accuracy(const std::vector<std::vector<double>>& predictions,
                       const std::vector<int>& labels) {
    if (predictions.size() != labels.size()) {
        throw DimensionError("accuracy: " + std::to_string(predictions.size()) +
                             " predictions vs " + std::to_string(labels.size()) + " labels");
    }
    if (predictions.empty()) throw ContractError("accuracy: empty input");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& p = predictions[i];
        std::size_t arg = 0;
        for (std::size_t j = 1; j < p.size(); ++j)
            if (p[j] > p[arg]) arg = j;
        if (static_cast<int>(arg) == labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

// Mann-Whitney AUC with half credit for ties, computed from average ranks.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) {
        throw DimensionError("auc: " + std::to_string(scores.size()) + " scores vs " +
                             std::to_string(labels.size()) + " labels");
    }
    std::size_t pos = 0, neg = 0;
    for (int l : labels) {
        if (l == 1)
            ++pos;
        else if (l == 0)
            ++neg;
        else
            throw ContractError("auc: labels must be binary");
    }
    if (pos == 0 || neg == 0) {
        throw UndefinedMetricError("auc: needs at least one positive and one negative");
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups, 1-based
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (labels[k] == 1) rank_sum_pos += rank[k];
    const double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Dice and IoU of two binary masks. Both-empty pairs score (1, 1).
inline std::pair<double, double> dice_iou(const std::vector<std::uint8_t>& a,
                                          const std::vector<std::uint8_t>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("dice_iou: mask sizes differ (" + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()) + ")");
    }
    std::size_t na = 0, nb = 0, inter = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] > 1 || b[i] > 1) throw ContractError("dice_iou: masks must be binary 0/1");
        na += a[i];
        nb += b[i];
        inter += static_cast<std::size_t>(a[i] & b[i]);
    }
    if (na == 0 && nb == 0) return {1.0, 1.0};
    const double dice = 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
    const double uni = static_cast<double>(na + nb - inter);
    const double iou = uni == 0.0 ? 1.0 : static_cast<double>(inter) / uni;
    return {dice, iou};
}

// Deterministic 2-D projection onto the top-2 principal axes of the centered
// feature matrix. Axis signs are fixed by making each axis's
// largest-magnitude loading positive.
inline std::vector<std::array<double, 2>> embed_2d(
    const std::vector<std::vector<double>>& features) {
    if (features.size() < 3) throw ContractError("embed_2d: need at least 3 vectors");
    const std::size_t n = features.size();
    const std::size_t d = features[0].size();
    for (const auto& f : features)
        if (f.size() != d) throw DimensionError("embed_2d: inconsistent feature dims");
    std::vector<double> mean(d, 0.0);
    for (const auto& f : features)
        for (std::size_t j = 0; j < d; ++j) mean[j] += f[j];
    for (auto& m : mean) m /= static_cast<double>(n);

    // covariance (upper triangle mirrored)
    std::vector<double> cov(d * d, 0.0);
    for (const auto& f : features)
        for (std::size_t a = 0; a < d; ++a) {
            const double fa = f[a] - mean[a];
            for (std::size_t b = a; b < d; ++b) cov[a * d + b] += fa * (f[b] - mean[b]);
        }
    double total_var = 0.0;
    for (std::size_t a = 0; a < d; ++a) {
        for (std::size_t b = a; b < d; ++b) {
            cov[a * d + b] /= static_cast<double>(n);
            cov[b * d + a] = cov[a * d + b];
        }
        total_var += cov[a * d + a];
    }
    if (total_var < 1e-12) throw NumericError("embed_2d: zero-variance input, projection degenerate");

    // cyclic Jacobi eigendecomposition
    std::vector<double> v(d * d, 0.0);
    for (std::size_t a = 0; a < d; ++a) v[a * d + a] = 1.0;
    std::vector<double> m = cov;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p)
            for (std::size_t q = p + 1; q < d; ++q) off += m[p * d + q] * m[p * d + q];
        if (off < 1e-22 * total_var * total_var + 1e-300) break;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                const double apq = m[p * d + q];
                if (std::abs(apq) < 1e-300) continue;
                const double app = m[p * d + p], aqq = m[q * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (std::size_t k = 0; k < d; ++k) {
                    const double mkp = m[k * d + p], mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double mpk = m[p * d + k], mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
                for (std::size_t k = 0; k < d; ++k) {
                    const double vkp = v[k * d + p], vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<std::size_t> idx(d);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return m[a * d + a] > m[b * d + b]; });

    std::array<std::vector<double>, 2> axes;
    for (std::size_t ax = 0; ax < 2; ++ax) {
        axes[ax].resize(d);
        const std::size_t col = idx[std::min(ax, d - 1)];
        for (std::size_t k = 0; k < d; ++k) axes[ax][k] = v[k * d + col];
        std::size_t biggest = 0;
        for (std::size_t k = 1; k < d; ++k)
            if (std::abs(axes[ax][k]) > std::abs(axes[ax][biggest])) biggest = k;
        if (axes[ax][biggest] < 0)
            for (auto& x : axes[ax]) x = -x;
    }
    std::vector<std::array<double, 2>> out(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ax = 0; ax < 2; ++ax) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += (features[i][k] - mean[k]) * axes[ax][k];
            out[i][ax] = acc;
        }
    return out;
}

}  // namespace trust
