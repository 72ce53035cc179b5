#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "fwi/common.hpp"

namespace fwi {

template <typename T>
struct dtype_traits;

template <>
struct dtype_traits<float> {
    static constexpr const char* name = "f32";
    static constexpr uint8_t code = 1;
};

template <>
struct dtype_traits<double> {
    static constexpr const char* name = "f64";
    static constexpr uint8_t code = 2;
};

namespace detail {

template <typename T>
struct Storage {
    std::vector<size_t> shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient is accumulated
    bool requires_grad = false;

    size_t numel() const { return data.size(); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
using StoragePtr = std::shared_ptr<Storage<T>>;

inline size_t shape_numel(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

} // namespace detail

/// Dense row-major N-D array. Copying a Tensor copies the handle, not the
/// buffer; `clone()` gives an independent copy. Values are immutable once a
/// tensor participates in a taped computation; only optimizer updates mutate
/// parameter buffers in place, outside any tape.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<size_t> shape, std::vector<T> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != data.size())
            throw ValueError(str("tensor: shape ", shape_str(shape), " wants ",
                                 detail::shape_numel(shape), " values, got ", data.size()));
        for (size_t d : shape)
            if (d == 0) throw ValueError("tensor: zero extent in shape " + shape_str(shape));
        s_ = std::make_shared<detail::Storage<T>>();
        s_->shape = std::move(shape);
        s_->data = std::move(data);
        s_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<size_t> shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(std::vector<size_t> shape, T value, bool requires_grad = false) {
        std::vector<T> data(detail::shape_numel(shape), value);
        return Tensor(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return Tensor({1}, {value}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(s_); }
    const std::vector<size_t>& shape() const { return s_->shape; }
    size_t ndim() const { return s_->shape.size(); }
    size_t numel() const { return s_->data.size(); }

    std::span<const T> data() const { return {s_->data.data(), s_->data.size()}; }
    std::span<T> data_mut() { return {s_->data.data(), s_->data.size()}; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool v) { s_->requires_grad = v; }

    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const T> grad() const { return {s_->grad.data(), s_->grad.size()}; }
    void zero_grad() { s_->grad.clear(); }

    /// Gradient as a standalone tensor (zeros if none was accumulated).
    Tensor grad_tensor() const {
        if (!has_grad()) return zeros(s_->shape);
        return Tensor(s_->shape, s_->grad);
    }

    T item() const {
        if (numel() != 1)
            throw ValueError("item: tensor has " + std::to_string(numel()) + " elements");
        return s_->data[0];
    }

    Tensor clone() const {
        Tensor t(s_->shape, s_->data, s_->requires_grad);
        return t;
    }

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }

    detail::StoragePtr<T> storage() const { return s_; }

private:
    detail::StoragePtr<T> s_;
};

/// Reverse-mode tape. Operations executed while a tape is alive are recorded
/// in execution order (hence topologically); `backward` replays them in
/// reverse, visiting each once. A tape is confined to one thread and is
/// discarded after backward.
template <typename T>
class Tape {
public:
    Tape() {
        prev_ = active_;
        active_ = this;
    }

    ~Tape() { active_ = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    size_t size() const { return ops_.size(); }

    /// Seed dLoss/dLoss = 1 and propagate through every recorded operation.
    /// Gradients land in the `grad` buffers of all requires_grad tensors.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1)
            throw ValueError("backward: loss must be scalar, got shape " +
                             shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw ValueError("backward: loss is detached (requires_grad=false); "
                             "no operation producing it was recorded");
        auto st = loss.storage();
        st->ensure_grad();
        st->grad[0] += T(1);
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> ops_;
    Tape* prev_ = nullptr;
    static inline thread_local Tape* active_ = nullptr;
};

/// Named, optionally trainable tensor. `trainable` mirrors the tensor's
/// requires_grad flag; frozen parameters never allocate or accumulate grads.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v, bool t = true)
        : name(std::move(n)), value(std::move(v)), trainable(t) {
        value.set_requires_grad(t);
    }

    void set_trainable(bool t) {
        trainable = t;
        value.set_requires_grad(t);
        if (!t) value.zero_grad();
    }
};

// ---------------------------------------------------------------------------
// op helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
bool taping() {
    return Tape<T>::active() != nullptr;
}

template <typename T>
bool wants_grad(const StoragePtr<T>& s) {
    return s->requires_grad;
}

// Skip a backward rule entirely when the output never received a gradient
// (dead branch of the graph).
template <typename T>
bool no_out_grad(const StoragePtr<T>& out) {
    return out->grad.empty();
}

template <typename T>
Tensor<T> make_result(std::vector<size_t> shape, std::vector<T> data, bool needs_grad) {
    Tensor<T> t(std::move(shape), std::move(data));
    t.set_requires_grad(needs_grad && taping<T>());
    return t;
}

enum class Broadcast { none, a_scalar, b_scalar };

inline Broadcast broadcast_kind(const std::vector<size_t>& a, const std::vector<size_t>& b,
                                const char* op) {
    if (a == b) return Broadcast::none;
    if (shape_numel(a) == 1) return Broadcast::a_scalar;
    if (shape_numel(b) == 1) return Broadcast::b_scalar;
    throw ValueError(str(op, ": shapes ", shape_str(a), " and ", shape_str(b),
                         " are not broadcast-compatible (identical or scalar only)"));
}

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<Mat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Mat<T>>;

/// C(m x n) = A(m x k) * B(k x n), with optional transposes on the stored
/// operands and optional accumulation into C.
template <typename T>
void gemm(bool trans_a, bool trans_b, size_t m, size_t n, size_t k,
          const T* a, const T* b, T* c, bool accumulate) {
    ConstMatMap<T> A(a, trans_a ? k : m, trans_a ? m : k);
    ConstMatMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
    MatMap<T> C(c, m, n);
    if (trans_a && trans_b) {
        if (accumulate) C.noalias() += A.transpose() * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    } else if (trans_a) {
        if (accumulate) C.noalias() += A.transpose() * B;
        else C.noalias() = A.transpose() * B;
    } else if (trans_b) {
        if (accumulate) C.noalias() += A * B.transpose();
        else C.noalias() = A * B.transpose();
    } else {
        if (accumulate) C.noalias() += A * B;
        else C.noalias() = A * B;
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// elementwise operations
// ---------------------------------------------------------------------------

namespace detail {

/// Shared skeleton for binary elementwise ops with scalar broadcasting.
/// fwd(a, b) -> y;  bwd_a(dy, a, b) and bwd_b(dy, a, b) give local gradients.
template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b,
                    Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
    Broadcast bc = broadcast_kind(a.shape(), b.shape(), name);
    const auto& big = (bc == Broadcast::a_scalar) ? b : a;
    size_t n = big.numel();
    std::vector<T> out(n);
    auto ad = a.data();
    auto bd = b.data();
    for (size_t i = 0; i < n; ++i) {
        T av = (bc == Broadcast::a_scalar) ? ad[0] : ad[i];
        T bv = (bc == Broadcast::b_scalar) ? bd[0] : bd[i];
        out[i] = fwd(av, bv);
    }
    bool req = a.requires_grad() || b.requires_grad();
    Tensor<T> y = make_result<T>(big.shape(), std::move(out), req);
    if (y.requires_grad()) {
        auto sa = a.storage();
        auto sb = b.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sa, sb, sy, bc, bwd_a, bwd_b]() {
            if (no_out_grad(sy)) return;
            size_t n = sy->numel();
            if (wants_grad(sa)) {
                sa->ensure_grad();
                for (size_t i = 0; i < n; ++i) {
                    T av = (bc == Broadcast::a_scalar) ? sa->data[0] : sa->data[i];
                    T bv = (bc == Broadcast::b_scalar) ? sb->data[0] : sb->data[i];
                    T g = bwd_a(sy->grad[i], av, bv);
                    sa->grad[(bc == Broadcast::a_scalar) ? 0 : i] += g;
                }
            }
            if (wants_grad(sb)) {
                sb->ensure_grad();
                for (size_t i = 0; i < n; ++i) {
                    T av = (bc == Broadcast::a_scalar) ? sa->data[0] : sa->data[i];
                    T bv = (bc == Broadcast::b_scalar) ? sb->data[0] : sb->data[i];
                    T g = bwd_b(sy->grad[i], av, bv);
                    sb->grad[(bc == Broadcast::b_scalar) ? 0 : i] += g;
                }
            }
        });
    }
    return y;
}

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, Fwd fwd, Bwd bwd) {
    size_t n = x.numel();
    std::vector<T> out(n);
    auto xd = x.data();
    for (size_t i = 0; i < n; ++i) out[i] = fwd(xd[i]);
    Tensor<T> y = make_result<T>(x.shape(), std::move(out), x.requires_grad());
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sy, bwd]() {
            if (no_out_grad(sy) || !wants_grad(sx)) return;
            sx->ensure_grad();
            for (size_t i = 0; i < sx->numel(); ++i)
                sx->grad[i] += bwd(sy->grad[i], sx->data[i], sy->data[i]);
        });
    }
    return y;
}

} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T dy, T, T) { return dy; }, [](T dy, T, T) { return dy; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T dy, T, T) { return dy; }, [](T dy, T, T) { return -dy; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary_op<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T dy, T, T y) { return dy * y; }, [](T dy, T x, T) { return dy * x; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, [](T v) { return -v; }, [](T dy, T, T) { return -dy; });
}

/// d|x|/dx is sign(x), with the subgradient 0 chosen at x == 0.
template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, [](T v) { return std::abs(v); },
        [](T dy, T v, T) { return v > T(0) ? dy : (v < T(0) ? -dy : T(0)); });
}

/// sign(x) in {-1, 0, 1}; derivative is 0 almost everywhere.
template <typename T>
Tensor<T> sign(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); },
        [](T, T, T) { return T(0); });
}

template <typename T>
Tensor<T> log1p(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, [](T v) { return std::log1p(v); },
        [](T dy, T v, T) { return dy / (T(1) + v); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
    return detail::unary_op<T>(
        x, [](T v) { return std::tanh(v); },
        [](T dy, T, T y) { return dy * (T(1) - y * y); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
    return detail::unary_op<T>(
        x, [slope](T v) { return v >= T(0) ? v : slope * v; },
        [slope](T dy, T v, T) { return v >= T(0) ? dy : slope * dy; });
}

/// Scale by a plain constant (no gradient w.r.t. the constant).
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary_op<T>(
        x, [c](T v) { return c * v; }, [c](T dy, T, T) { return c * dy; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary_op<T>(
        x, [c](T v) { return v + c; }, [](T dy, T, T) { return dy; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator*(T c, const Tensor<T>& x) { return scale(x, c); }

// ---------------------------------------------------------------------------
// reductions, matmul, shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    Tensor<T> y = detail::make_result<T>({1}, {acc}, x.requires_grad());
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sy]() {
            if (detail::no_out_grad(sy) || !detail::wants_grad(sx)) return;
            sx->ensure_grad();
            T g = sy->grad[0];
            for (size_t i = 0; i < sx->numel(); ++i) sx->grad[i] += g;
        });
    }
    return y;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ValueError(str("matmul: expects 2-D operands, got ", shape_str(a.shape()),
                             " and ", shape_str(b.shape())));
    size_t m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ValueError(str("matmul: inner dimensions disagree: ", shape_str(a.shape()),
                             " vs ", shape_str(b.shape())));
    std::vector<T> out(m * n);
    detail::gemm<T>(false, false, m, n, k, a.data().data(), b.data().data(), out.data(), false);
    bool req = a.requires_grad() || b.requires_grad();
    Tensor<T> y = detail::make_result<T>({m, n}, std::move(out), req);
    if (y.requires_grad()) {
        auto sa = a.storage();
        auto sb = b.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sa, sb, sy, m, n, k]() {
            if (detail::no_out_grad(sy)) return;
            if (detail::wants_grad(sa)) { // dA = dY * B^T
                sa->ensure_grad();
                detail::gemm<T>(false, true, m, k, n, sy->grad.data(), sb->data.data(),
                                sa->grad.data(), true);
            }
            if (detail::wants_grad(sb)) { // dB = A^T * dY
                sb->ensure_grad();
                detail::gemm<T>(true, false, k, n, m, sa->data.data(), sy->grad.data(),
                                sb->grad.data(), true);
            }
        });
    }
    return y;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<size_t> new_shape) {
    if (detail::shape_numel(new_shape) != x.numel())
        throw ValueError(str("reshape: cannot view ", shape_str(x.shape()), " as ",
                             shape_str(new_shape)));
    std::vector<T> out(x.data().begin(), x.data().end());
    Tensor<T> y = detail::make_result<T>(std::move(new_shape), std::move(out), x.requires_grad());
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sy]() {
            if (detail::no_out_grad(sy) || !detail::wants_grad(sx)) return;
            sx->ensure_grad();
            for (size_t i = 0; i < sx->numel(); ++i) sx->grad[i] += sy->grad[i];
        });
    }
    return y;
}

/// Crop a [B,C,H,W] tensor to a centered [B,C,h,w] window.
template <typename T>
Tensor<T> crop_center(const Tensor<T>& x, size_t out_h, size_t out_w) {
    if (x.ndim() != 4)
        throw ValueError("crop_center: expects a 4-D tensor, got " + shape_str(x.shape()));
    size_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (out_h > H || out_w > W)
        throw ValueError(str("crop_center: window ", out_h, "x", out_w,
                             " exceeds input ", H, "x", W));
    size_t top = (H - out_h) / 2, left = (W - out_w) / 2;
    std::vector<T> out(B * C * out_h * out_w);
    auto xd = x.data();
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c)
            for (size_t i = 0; i < out_h; ++i) {
                const T* src = &xd[((b * C + c) * H + (i + top)) * W + left];
                T* dst = &out[((b * C + c) * out_h + i) * out_w];
                std::copy(src, src + out_w, dst);
            }
    Tensor<T> y = detail::make_result<T>({B, C, out_h, out_w}, std::move(out), x.requires_grad());
    if (y.requires_grad()) {
        auto sx = x.storage();
        auto sy = y.storage();
        Tape<T>::active()->record([sx, sy, B, C, H, W, out_h, out_w, top, left]() {
            if (detail::no_out_grad(sy) || !detail::wants_grad(sx)) return;
            sx->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t c = 0; c < C; ++c)
                    for (size_t i = 0; i < out_h; ++i) {
                        const T* src = &sy->grad[((b * C + c) * out_h + i) * out_w];
                        T* dst = &sx->grad[((b * C + c) * H + (i + top)) * W + left];
                        for (size_t j = 0; j < out_w; ++j) dst[j] += src[j];
                    }
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// backward entry points
// ---------------------------------------------------------------------------

/// Run backward on `tape` and collect gradients of the given parameters as a
/// name -> tensor map. Frozen parameters are omitted.
template <typename T>
std::map<std::string, Tensor<T>> backward(Tape<T>& tape, const Tensor<T>& loss,
                                          const std::vector<Parameter<T>*>& params) {
    tape.backward(loss);
    std::map<std::string, Tensor<T>> grads;
    for (const Parameter<T>* p : params)
        if (p->trainable) grads.emplace(p->name, p->value.grad_tensor());
    return grads;
}

} // namespace fwi
