#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "trust/errors.hpp"

namespace trust {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
    os << "]";
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

// Multiply-accumulate counter for the FLOPs instrumentation oracle.
// Only contraction ops (matmul, conv2d) report; elementwise work does not.
class MacCounter {
  public:
    static void add(std::uint64_t n) {
        if (enabled_) count_ += n;
    }
    static std::uint64_t count() { return count_; }

    struct Scope {
        Scope() {
            prev_enabled_ = enabled_;
            prev_count_ = count_;
            enabled_ = true;
            count_ = 0;
        }
        ~Scope() {
            enabled_ = prev_enabled_;
            count_ = prev_count_;
        }
        std::uint64_t macs() const { return count_; }

      private:
        bool prev_enabled_;
        std::uint64_t prev_count_;
    };

  private:
    inline static thread_local bool enabled_ = false;
    inline static thread_local std::uint64_t count_ = 0;
};

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a backward pass needs it
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

// Dense row-major tensor. A Tensor is a cheap handle onto shared storage;
// ops allocate fresh storage for their outputs and, when a Tape is active
// and an input requires gradients, register a reverse-mode closure.
template <typename T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
        : st_(std::make_shared<TensorData<T>>()) {
        st_->shape = std::move(shape);
        st_->data.assign(shape_numel(st_->shape), fill);
        st_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : st_(std::make_shared<TensorData<T>>()) {
        if (shape_numel(shape) != values.size()) {
            throw DimensionError("tensor: shape " + shape_str(shape) + " expects " +
                                 std::to_string(shape_numel(shape)) + " values, got " +
                                 std::to_string(values.size()));
        }
        st_->shape = std::move(shape);
        st_->data = std::move(values);
        st_->requires_grad = requires_grad;
    }

    static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

    bool defined() const { return static_cast<bool>(st_); }
    const Shape& shape() const { return st_->shape; }
    std::size_t rank() const { return st_->shape.size(); }
    std::size_t dim(std::size_t i) const { return st_->shape[i]; }
    std::size_t numel() const { return st_->data.size(); }

    std::span<T> values() { return {st_->data.data(), st_->data.size()}; }
    std::span<const T> values() const { return {st_->data.data(), st_->data.size()}; }

    T& operator[](std::size_t i) { return st_->data[i]; }
    const T& operator[](std::size_t i) const { return st_->data[i]; }

    T& operator()(std::size_t i, std::size_t j) { return st_->data[i * st_->shape[1] + j]; }
    const T& operator()(std::size_t i, std::size_t j) const {
        return st_->data[i * st_->shape[1] + j];
    }
    T& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return st_->data[(i * st_->shape[1] + j) * st_->shape[2] + k];
    }
    const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return st_->data[(i * st_->shape[1] + j) * st_->shape[2] + k];
    }

    // Scalar fetch; contract error on non-scalars.
    T item() const {
        if (numel() != 1) {
            throw ContractError("item: tensor has " + std::to_string(numel()) + " elements");
        }
        return st_->data[0];
    }

    bool requires_grad() const { return st_ && st_->requires_grad; }
    void set_requires_grad(bool rg) { st_->requires_grad = rg; }

    // Gradient view; allocates zeros on first access so that parameters a
    // loss never touched still read back as all-zero gradients.
    std::span<const T> grad() const {
        st_->ensure_grad();
        return {st_->grad.data(), st_->grad.size()};
    }
    void zero_grad() {
        if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
    }

    Tensor clone() const {
        Tensor out(st_->shape);
        out.st_->data = st_->data;
        return out;
    }

    std::shared_ptr<TensorData<T>> storage() const { return st_; }
    TensorData<T>* node() const { return st_.get(); }

  private:
    std::shared_ptr<TensorData<T>> st_;
};

// Reverse-mode tape. Ops append entries in execution order, which is by
// construction a topological order of the dynamic graph. backward() marks
// the ancestors of the loss in one reverse sweep and then runs the
// registered vector-Jacobian closures in reverse.
//
// A Tape is scoped: constructing one makes it the active tape for the
// current thread, destroying it restores the previous one. One logical
// training run owns one tape at a time.
template <typename T>
class Tape {
  public:
    Tape() : prev_(active_) { active_ = this; }
    ~Tape() { active_ = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::shared_ptr<TensorData<T>> out,
                std::vector<std::shared_ptr<TensorData<T>>> inputs,
                std::function<void(const TensorData<T>&)> vjp) {
        entries_.push_back({std::move(out), std::move(inputs), std::move(vjp)});
    }

    std::size_t size() const { return entries_.size(); }

    // Populates grad for every requires_grad ancestor of `loss`.
    void backward(const Tensor<T>& loss) {
        if (!loss.defined() || loss.numel() != 1) {
            throw ContractError("backward: loss must be a scalar tensor");
        }
        std::unordered_set<const TensorData<T>*> reachable;
        reachable.insert(loss.node());
        std::vector<char> needed(entries_.size(), 0);
        for (std::size_t i = entries_.size(); i-- > 0;) {
            const Entry& e = entries_[i];
            if (!reachable.count(e.out.get())) continue;
            needed[i] = 1;
            for (const auto& in : e.inputs) {
                if (in->requires_grad) reachable.insert(in.get());
            }
        }
        // Intermediate outputs get fresh zero grads; leaves keep whatever
        // has accumulated (the optimizer owns zeroing between steps).
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!needed[i]) continue;
            Entry& e = entries_[i];
            e.out->grad.assign(e.out->data.size(), T(0));
            for (const auto& in : e.inputs) {
                if (in->requires_grad) in->ensure_grad();
            }
        }
        loss.node()->ensure_grad();
        loss.node()->grad[0] = T(1);
        for (std::size_t i = entries_.size(); i-- > 0;) {
            if (needed[i]) entries_[i].vjp(*entries_[i].out);
        }
    }

    void clear() { entries_.clear(); }

  private:
    struct Entry {
        std::shared_ptr<TensorData<T>> out;
        std::vector<std::shared_ptr<TensorData<T>>> inputs;
        std::function<void(const TensorData<T>&)> vjp;
    };
    std::vector<Entry> entries_;
    Tape* prev_;
    inline static thread_local Tape* active_ = nullptr;
};

template <typename T>
void backward(const Tensor<T>& loss) {
    Tape<T>* t = Tape<T>::active();
    if (!t) throw ContractError("backward: no active tape");
    t->backward(loss);
}

namespace detail {

template <typename T, typename Vjp>
void maybe_record(Tensor<T>& out, std::initializer_list<Tensor<T>> inputs, Vjp&& vjp) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return;
    bool any = false;
    for (const Tensor<T>& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> ins;
    ins.reserve(inputs.size());
    for (const Tensor<T>& in : inputs) ins.push_back(in.storage());
    tape->record(out.storage(), std::move(ins), std::forward<Vjp>(vjp));
}

template <typename T, typename Vjp>
void maybe_record_vec(Tensor<T>& out, const std::vector<Tensor<T>>& inputs, Vjp&& vjp) {
    Tape<T>* tape = Tape<T>::active();
    if (!tape) return;
    bool any = false;
    for (const Tensor<T>& in : inputs) any = any || in.requires_grad();
    if (!any) return;
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorData<T>>> ins;
    ins.reserve(inputs.size());
    for (const Tensor<T>& in : inputs) ins.push_back(in.storage());
    tape->record(out.storage(), std::move(ins), std::forward<Vjp>(vjp));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

template <typename T>
void check_rank(const Tensor<T>& a, std::size_t r, const char* op) {
    if (a.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) +
                             ", got shape " + shape_str(a.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    detail::maybe_record(out, {a, b}, [an = a.storage(), bn = b.storage()](const TensorData<T>& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    detail::maybe_record(out, {a, b}, [an = a.storage(), bn = b.storage()](const TensorData<T>& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    detail::maybe_record(out, {a, b}, [an = a.storage(), bn = b.storage()](const TensorData<T>& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->data[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->data[i];
    });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
    detail::maybe_record(out, {a}, [an = a.storage(), c](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * c;
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
    detail::maybe_record(out, {a}, [an = a.storage()](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (an->data[i] > T(0)) an->grad[i] += o.grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    // tanh approximation; smooth and overflow-free.
    constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T kA = T(0.044715);
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        T x = pa[i];
        po[i] = T(0.5) * x * (T(1) + std::tanh(kC * (x + kA * x * x * x)));
    }
    detail::maybe_record(out, {a}, [an = a.storage()](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            T x = an->data[i];
            T u = kC * (x + kA * x * x * x);
            T t = std::tanh(u);
            T du = kC * (T(1) + T(3) * kA * x * x);
            an->grad[i] += o.grad[i] * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du);
        }
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) {
        T x = pa[i];
        // branch keeps exp() argument non-positive
        po[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x))
                          : std::exp(x) / (T(1) + std::exp(x));
    }
    detail::maybe_record(out, {a}, [an = a.storage(), on = out.storage()](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            T y = on->data[i];
            an->grad[i] += o.grad[i] * y * (T(1) - y);
        }
    });
    return out;
}

// ln(max(x, floor)); gradient is zero on the clamped region.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a, T floor) {
    if (floor <= T(0)) throw ContractError("log_clamped: floor must be positive");
    Tensor<T> out(a.shape());
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] = std::log(std::max(pa[i], floor));
    detail::maybe_record(out, {a}, [an = a.storage(), floor](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i)
            if (an->data[i] > floor) an->grad[i] += o.grad[i] / an->data[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_rank(a, 2, "matmul");
    detail::check_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2) {
        throw DimensionError("matmul: inner dimension mismatch " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()));
    }
    Tensor<T> out({m, n});
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        T* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = pa[i * k + p];
            const T* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(m) * n * k);
    detail::maybe_record(out, {a, b},
                         [an = a.storage(), bn = b.storage(), m, k, n](const TensorData<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) {
            // da[i,p] = dot(g[i,:], b[p,:])
            T* da = an->grad.data();
            const T* pb = bn->data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T* brow = pb + p * n;
                    T acc = T(0);
                    for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                    da[i * k + p] += acc;
                }
            }
        }
        if (bn->requires_grad) {
            // db[p,:] += a[i,p] * g[i,:]
            T* db = bn->grad.data();
            const T* pa = an->data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = pa[i * k + p];
                    T* drow = db + p * n;
                    for (std::size_t j = 0; j < n; ++j) drow[j] += av * grow[j];
                }
            }
        }
    });
    return out;
}

// a [m x k] times b^T where b is [n x k]; avoids materializing transposes in
// attention score computations.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_rank(a, 2, "matmul_nt");
    detail::check_rank(b, 2, "matmul_nt");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k) {
        throw DimensionError("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) +
                             " x " + shape_str(b.shape()) + "^T");
    }
    Tensor<T> out({m, n});
    const T* pa = a.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = pb + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            po[i * n + j] = acc;
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(m) * n * k);
    detail::maybe_record(out, {a, b},
                         [an = a.storage(), bn = b.storage(), m, k, n](const TensorData<T>& o) {
        const T* g = o.grad.data();
        if (an->requires_grad) {
            T* da = an->grad.data();
            const T* pb = bn->data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                T* darow = da + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const T gv = grow[j];
                    const T* brow = pb + j * k;
                    for (std::size_t p = 0; p < k; ++p) darow[p] += gv * brow[p];
                }
            }
        }
        if (bn->requires_grad) {
            T* db = bn->grad.data();
            const T* pa = an->data.data();
            for (std::size_t i = 0; i < m; ++i) {
                const T* grow = g + i * n;
                const T* arow = pa + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const T gv = grow[j];
                    T* dbrow = db + j * k;
                    for (std::size_t p = 0; p < k; ++p) dbrow[p] += gv * arow[p];
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    detail::check_rank(a, 2, "transpose2d");
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out(j, i) = a(i, j);
    detail::maybe_record(out, {a}, [an = a.storage(), r, c](const TensorData<T>& o) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += o.grad[j * r + i];
    });
    return out;
}

// Adds a length-c vector to every row of an [r x c] matrix (bias add).
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& a, const Tensor<T>& v) {
    detail::check_rank(a, 2, "add_rowvec");
    if (v.numel() != a.dim(1)) {
        throw DimensionError("add_rowvec: vector length " + std::to_string(v.numel()) +
                             " vs row width " + std::to_string(a.dim(1)));
    }
    const std::size_t r = a.dim(0), c = a.dim(1);
    Tensor<T> out({r, c});
    const T* pa = a.values().data();
    const T* pv = v.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) po[i * c + j] = pa[i * c + j] + pv[j];
    detail::maybe_record(out, {a, v}, [an = a.storage(), vn = v.storage(), r, c](const TensorData<T>& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < r * c; ++i) an->grad[i] += o.grad[i];
        if (vn->requires_grad)
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) vn->grad[j] += o.grad[i * c + j];
    });
    return out;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
    detail::check_rank(a, 2, "softmax_rows");
    const std::size_t r = a.dim(0), c = a.dim(1);
    if (c < 1) throw DimensionError("softmax_rows: empty rows");
    Tensor<T> out({r, c});
    const T* pa = a.values().data();
    T* po = out.values().data();
    for (std::size_t i = 0; i < r; ++i) {
        const T* row = pa + i * c;
        T* orow = po + i * c;
        T mx = row[0];
        for (std::size_t j = 0; j < c; ++j) {
            if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input");
            mx = std::max(mx, row[j]);
        }
        T sum = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (std::size_t j = 0; j < c; ++j) orow[j] /= sum;
    }
    detail::maybe_record(out, {a}, [an = a.storage(), on = out.storage(), r, c](const TensorData<T>& o) {
        for (std::size_t i = 0; i < r; ++i) {
            const T* y = on->data.data() + i * c;
            const T* g = o.grad.data() + i * c;
            T dot = T(0);
            for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
            T* da = an->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) da[j] += y[j] * (g[j] - dot);
        }
    });
    return out;
}

// Layer normalization over the last axis with learnable gain and bias.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
    if (eps <= T(0)) throw ContractError("layernorm: eps must be positive");
    if (x.rank() < 1) throw DimensionError("layernorm: rank-0 input");
    const std::size_t d = x.shape().back();
    if (d == 0) throw DimensionError("layernorm: zero-width last axis");
    if (gain.numel() != d || bias.numel() != d) {
        throw DimensionError("layernorm: gain/bias length must equal last axis " +
                             std::to_string(d));
    }
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    const T* px = x.values().data();
    const T* pg = gain.values().data();
    const T* pb = bias.values().data();
    T* po = out.values().data();
    std::vector<T> inv_std(rows), mean(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        const T* row = px + i * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= T(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) {
            T c = row[j] - mu;
            var += c * c;
        }
        var /= T(d);
        const T is = T(1) / std::sqrt(var + eps);
        mean[i] = mu;
        inv_std[i] = is;
        T* orow = po + i * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] = (row[j] - mu) * is * pg[j] + pb[j];
    }
    detail::maybe_record(
        out, {x, gain, bias},
        [xn = x.storage(), gn = gain.storage(), bn = bias.storage(), rows, d,
         mean = std::move(mean), inv_std = std::move(inv_std)](const TensorData<T>& o) {
            for (std::size_t i = 0; i < rows; ++i) {
                const T* row = xn->data.data() + i * d;
                const T* g = o.grad.data() + i * d;
                const T mu = mean[i];
                const T is = inv_std[i];
                T sum_gh = T(0), sum_ghx = T(0);
                for (std::size_t j = 0; j < d; ++j) {
                    const T xhat = (row[j] - mu) * is;
                    const T gh = g[j] * gn->data[j];
                    sum_gh += gh;
                    sum_ghx += gh * xhat;
                }
                const T inv_d = T(1) / T(d);
                if (xn->requires_grad) {
                    T* dx = xn->grad.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const T xhat = (row[j] - mu) * is;
                        const T gh = g[j] * gn->data[j];
                        dx[j] += is * (gh - inv_d * sum_gh - xhat * inv_d * sum_ghx);
                    }
                }
                if (gn->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j)
                        gn->grad[j] += g[j] * (row[j] - mu) * is;
                }
                if (bn->requires_grad) {
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += g[j];
                }
            }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Token structure ops
// ---------------------------------------------------------------------------

// Rows of a followed by rows of b. a may have zero rows.
template <typename T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_rank(a, 2, "concat_tokens");
    detail::check_rank(b, 2, "concat_tokens");
    if (a.dim(1) != b.dim(1)) {
        throw DimensionError("concat_tokens: token dim mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
    const std::size_t p = a.dim(0), n = b.dim(0), d = a.dim(1);
    Tensor<T> out({p + n, d});
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    std::copy(b.values().begin(), b.values().end(), out.values().begin() + p * d);
    detail::maybe_record(out, {a, b},
                         [an = a.storage(), bn = b.storage(), p, n, d](const TensorData<T>& o) {
        if (an->requires_grad)
            for (std::size_t i = 0; i < p * d; ++i) an->grad[i] += o.grad[i];
        if (bn->requires_grad)
            for (std::size_t i = 0; i < n * d; ++i) bn->grad[i] += o.grad[p * d + i];
    });
    return out;
}

// Rows [r0, r1) of a 2-D tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t r0, std::size_t r1) {
    detail::check_rank(a, 2, "slice_rows");
    if (r0 > r1 || r1 > a.dim(0)) {
        throw DimensionError("slice_rows: range [" + std::to_string(r0) + ", " +
                             std::to_string(r1) + ") out of " + std::to_string(a.dim(0)));
    }
    const std::size_t d = a.dim(1);
    Tensor<T> out({r1 - r0, d});
    std::copy(a.values().begin() + r0 * d, a.values().begin() + r1 * d, out.values().begin());
    detail::maybe_record(out, {a}, [an = a.storage(), r0, d](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[r0 * d + i] += o.grad[i];
    });
    return out;
}

// Columns [c0, c1) of a 2-D tensor (per-head views in attention).
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    detail::check_rank(a, 2, "slice_cols");
    if (c0 > c1 || c1 > a.dim(1)) {
        throw DimensionError("slice_cols: range [" + std::to_string(c0) + ", " +
                             std::to_string(c1) + ") out of " + std::to_string(a.dim(1)));
    }
    const std::size_t r = a.dim(0), c = a.dim(1), w = c1 - c0;
    Tensor<T> out({r, w});
    for (std::size_t i = 0; i < r; ++i)
        std::copy(a.values().begin() + i * c + c0, a.values().begin() + i * c + c1,
                  out.values().begin() + i * w);
    detail::maybe_record(out, {a}, [an = a.storage(), r, c, c0, w](const TensorData<T>& o) {
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < w; ++j) an->grad[i * c + c0 + j] += o.grad[i * w + j];
    });
    return out;
}

// Concatenate 2-D tensors with equal row counts along columns.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: empty input");
    const std::size_t r = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::check_rank(p, 2, "concat_cols");
        if (p.dim(0) != r) {
            throw DimensionError("concat_cols: row count mismatch " + shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor<T> out({r, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < r; ++i)
            std::copy(p.values().begin() + i * w, p.values().begin() + (i + 1) * w,
                      out.values().begin() + i * total + off);
        off += w;
    }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p.dim(1));
    std::vector<std::shared_ptr<TensorData<T>>> storages;
    for (const auto& p : parts) storages.push_back(p.storage());
    detail::maybe_record_vec(out, parts,
                             [storages, widths, r, total](const TensorData<T>& o) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < storages.size(); ++k) {
            const std::size_t w = widths[k];
            if (storages[k]->requires_grad) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        storages[k]->grad[i * w + j] += o.grad[i * total + off + j];
            }
            off += w;
        }
    });
    return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.numel()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                             " changes element count");
    }
    Tensor<T> out(std::move(new_shape));
    std::copy(a.values().begin(), a.values().end(), out.values().begin());
    detail::maybe_record(out, {a}, [an = a.storage()](const TensorData<T>& o) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// Convolution and resampling (HWC layout)
// ---------------------------------------------------------------------------

enum class Padding { kValid, kSame };

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride,
                 Padding padding) {
    detail::check_rank(x, 3, "conv2d");
    detail::check_rank(kernel, 4, "conv2d");
    const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const std::size_t kh = kernel.dim(0), kw = kernel.dim(1);
    if (kh != kw || kh % 2 == 0) {
        throw DimensionError("conv2d: kernel must be square with odd size, got " +
                             shape_str(kernel.shape()));
    }
    if (kernel.dim(2) != cin) {
        throw DimensionError("conv2d: kernel input channels " + std::to_string(kernel.dim(2)) +
                             " vs image channels " + std::to_string(cin));
    }
    if (stride == 0) throw ContractError("conv2d: stride must be positive");
    const std::size_t cout = kernel.dim(3);
    const std::size_t pad = padding == Padding::kSame ? (kh - 1) / 2 : 0;
    if (h + 2 * pad < kh || w + 2 * pad < kw) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) +
                             " larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
    Tensor<T> out({oh, ow, cout});
    const T* px = x.values().data();
    const T* pk = kernel.values().data();
    T* po = out.values().data();
    for (std::size_t oy = 0; oy < oh; ++oy) {
        for (std::size_t ox = 0; ox < ow; ++ox) {
            T* ovec = po + (oy * ow + ox) * cout;
            for (std::size_t ky = 0; ky < kh; ++ky) {
                const std::ptrdiff_t iy =
                    static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                              static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    const T* xvec = px + (static_cast<std::size_t>(iy) * w +
                                          static_cast<std::size_t>(ix)) * cin;
                    const T* kbase = pk + (ky * kw + kx) * cin * cout;
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        const T xv = xvec[ci];
                        const T* krow = kbase + ci * cout;
                        for (std::size_t co = 0; co < cout; ++co) ovec[co] += xv * krow[co];
                    }
                }
            }
        }
    }
    MacCounter::add(static_cast<std::uint64_t>(oh) * ow * kh * kw * cin * cout);
    detail::maybe_record(
        out, {x, kernel},
        [xn = x.storage(), kn = kernel.storage(), h, w, cin, kh, kw, cout, pad, stride, oh,
         ow](const TensorData<T>& o) {
            const T* g = o.grad.data();
            const bool dx = xn->requires_grad;
            const bool dk = kn->requires_grad;
            for (std::size_t oy = 0; oy < oh; ++oy) {
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const T* gvec = g + (oy * ow + ox) * cout;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                                  static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                            const std::size_t xoff = (static_cast<std::size_t>(iy) * w +
                                                      static_cast<std::size_t>(ix)) * cin;
                            const std::size_t koff = (ky * kw + kx) * cin * cout;
                            for (std::size_t ci = 0; ci < cin; ++ci) {
                                const T* krow = kn->data.data() + koff + ci * cout;
                                if (dx) {
                                    T acc = T(0);
                                    for (std::size_t co = 0; co < cout; ++co)
                                        acc += gvec[co] * krow[co];
                                    xn->grad[xoff + ci] += acc;
                                }
                                if (dk) {
                                    const T xv = xn->data[xoff + ci];
                                    T* dkrow = kn->grad.data() + koff + ci * cout;
                                    for (std::size_t co = 0; co < cout; ++co)
                                        dkrow[co] += xv * gvec[co];
                                }
                            }
                        }
                    }
                }
            }
        });
    return out;
}

// Per-output-channel bias add for HWC feature maps.
template <typename T>
Tensor<T> add_chanvec(const Tensor<T>& x, const Tensor<T>& b) {
    detail::check_rank(x, 3, "add_chanvec");
    const std::size_t c = x.dim(2);
    if (b.numel() != c) {
        throw DimensionError("add_chanvec: bias length " + std::to_string(b.numel()) +
                             " vs channels " + std::to_string(c));
    }
    Tensor<T> out(x.shape());
    const T* px = x.values().data();
    const T* pb = b.values().data();
    T* po = out.values().data();
    const std::size_t pixels = x.numel() / c;
    for (std::size_t p = 0; p < pixels; ++p)
        for (std::size_t ci = 0; ci < c; ++ci) po[p * c + ci] = px[p * c + ci] + pb[ci];
    detail::maybe_record(out, {x, b},
                         [xn = x.storage(), bn = b.storage(), pixels, c](const TensorData<T>& o) {
        if (xn->requires_grad)
            for (std::size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
        if (bn->requires_grad)
            for (std::size_t p = 0; p < pixels; ++p)
                for (std::size_t ci = 0; ci < c; ++ci) bn->grad[ci] += o.grad[p * c + ci];
    });
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
    detail::check_rank(x, 3, "upsample_nearest2x");
    const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
    Tensor<T> out({2 * h, 2 * w, c});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
            const T* src = x.values().data() + (y * w + xx) * c;
            for (std::size_t dy = 0; dy < 2; ++dy)
                for (std::size_t dx = 0; dx < 2; ++dx) {
                    T* dst = out.values().data() + ((2 * y + dy) * 2 * w + (2 * xx + dx)) * c;
                    std::copy(src, src + c, dst);
                }
        }
    detail::maybe_record(out, {x}, [xn = x.storage(), h, w, c](const TensorData<T>& o) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) {
                T* dst = xn->grad.data() + (y * w + xx) * c;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const T* src =
                            o.grad.data() + ((2 * y + dy) * 2 * w + (2 * xx + dx)) * c;
                        for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += src[ci];
                    }
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and statistics
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T v : a.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s);
    detail::maybe_record(out, {a}, [an = a.storage()](const TensorData<T>& o) {
        const T g = o.grad[0];
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    const std::size_t n = a.numel();
    T s = T(0);
    for (T v : a.values()) s += v;
    Tensor<T> out = Tensor<T>::scalar(s / T(n));
    detail::maybe_record(out, {a}, [an = a.storage(), n](const TensorData<T>& o) {
        const T g = o.grad[0] / T(n);
        for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
    return out;
}

// Single element by flat index, as a scalar tensor.
template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::size_t index) {
    if (index >= a.numel()) {
        throw ContractError("pick: index " + std::to_string(index) + " out of " +
                            std::to_string(a.numel()));
    }
    Tensor<T> out = Tensor<T>::scalar(a[index]);
    detail::maybe_record(out, {a}, [an = a.storage(), index](const TensorData<T>& o) {
        an->grad[index] += o.grad[0];
    });
    return out;
}

// Per-channel spatial mean and standard deviation of an HWC map, returned as
// a [2 x C] tensor (row 0: mean, row 1: std). eps keeps the sqrt smooth.
template <typename T>
Tensor<T> channel_stats(const Tensor<T>& x, T eps = T(1e-8)) {
    detail::check_rank(x, 3, "channel_stats");
    const std::size_t c = x.dim(2);
    const std::size_t pixels = x.numel() / c;
    Tensor<T> out({2, c});
    const T* px = x.values().data();
    for (std::size_t ci = 0; ci < c; ++ci) {
        T mu = T(0);
        for (std::size_t p = 0; p < pixels; ++p) mu += px[p * c + ci];
        mu /= T(pixels);
        T var = T(0);
        for (std::size_t p = 0; p < pixels; ++p) {
            const T d = px[p * c + ci] - mu;
            var += d * d;
        }
        var /= T(pixels);
        out(0, ci) = mu;
        out(1, ci) = std::sqrt(var + eps);
    }
    detail::maybe_record(out, {x},
                         [xn = x.storage(), on = out.storage(), pixels, c](const TensorData<T>& o) {
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T gm = o.grad[ci];
            const T gs = o.grad[c + ci];
            const T mu = on->data[ci];
            const T sd = on->data[c + ci];
            const T inv_n = T(1) / T(pixels);
            for (std::size_t p = 0; p < pixels; ++p) {
                const T xv = xn->data[p * c + ci];
                xn->grad[p * c + ci] += gm * inv_n + gs * (xv - mu) * inv_n / sd;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// Meant to run with T = double; 32-bit rounding drowns the tolerances.
template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                         const Tensor<T>& point, T eps) {
    if (eps <= T(0)) throw ContractError("finite_diff_check: eps must be positive");
    Tensor<T> x = point.clone();
    x.set_requires_grad(true);
    std::vector<T> analytic;
    {
        Tape<T> tape;
        Tensor<T> y = f(x);
        if (y.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
        tape.backward(y);
        auto g = x.grad();
        analytic.assign(g.begin(), g.end());
    }
    double worst = 0.0;
    Tensor<T> probe = point.clone();
    for (std::size_t i = 0; i < probe.numel(); ++i) {
        const T saved = probe[i];
        probe[i] = saved + eps;
        const double fp = static_cast<double>(f(probe).item());
        probe[i] = saved - eps;
        const double fm = static_cast<double>(f(probe).item());
        probe[i] = saved;
        const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

// Same check restricted to a subset of coordinates; keeps parameter-space
// verification of the full pipeline affordable.
template <typename T>
double finite_diff_check_coords(const std::function<Tensor<T>(const Tensor<T>&)>& f,
                                const Tensor<T>& point, T eps,
                                const std::vector<std::size_t>& coords) {
    if (eps <= T(0)) throw ContractError("finite_diff_check: eps must be positive");
    Tensor<T> x = point.clone();
    x.set_requires_grad(true);
    std::vector<T> analytic;
    {
        Tape<T> tape;
        Tensor<T> y = f(x);
        if (y.numel() != 1) throw ContractError("finite_diff_check: f must be scalar-valued");
        tape.backward(y);
        auto g = x.grad();
        analytic.assign(g.begin(), g.end());
    }
    double worst = 0.0;
    Tensor<T> probe = point.clone();
    for (std::size_t i : coords) {
        const T saved = probe[i];
        probe[i] = saved + eps;
        const double fp = static_cast<double>(f(probe).item());
        probe[i] = saved - eps;
        const double fm = static_cast<double>(f(probe).item());
        probe[i] = saved;
        const double fd = (fp - fm) / (2.0 * static_cast<double>(eps));
        const double a = static_cast<double>(analytic[i]);
        const double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace trust
