#include "cseg/tensor.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>

#include "cseg/rng.hpp"

namespace cseg {

size_t shape_numel(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent " + std::to_string(d));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

namespace {
std::atomic<uint64_t> g_tape_epoch{1};

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
}
}  // namespace

// -- Tensor --------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::from(Shape shape, std::vector<T> values) {
    const size_t expected = shape_numel(shape);
    if (expected != values.size()) {
        throw std::invalid_argument("tensor values length " + std::to_string(values.size()) +
                                    " ≠ expected " + std::to_string(expected) + " for shape " +
                                    shape_str(shape));
    }
    if (!all_finite(values)) throw std::invalid_argument("tensor values must be finite");
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data = std::move(values);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
    return full(std::move(shape), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
    const size_t n = shape_numel(shape);
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = std::move(shape);
    t.s_->data.assign(n, value);
    return t;
}

template <typename T>
Tensor<T> Tensor<T>::randn(Shape shape, uint64_t seed, T std_dev) {
    if (!(std_dev > T(0))) throw std::invalid_argument("randn: std must be positive");
    const size_t n = shape_numel(shape);
    rng::Engine eng(seed);
    std::vector<T> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = static_cast<T>(eng.normal() * static_cast<double>(std_dev));
    return from(std::move(shape), std::move(v));
}

template <typename T>
void Tensor<T>::accumulate_grad(std::span<const T> g) {
    if (g.size() != s_->data.size()) throw std::logic_error("gradient size mismatch");
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    for (size_t i = 0; i < g.size(); ++i) s_->grad[i] += g[i];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    Tensor t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    return t;
}

// -- Tape ----------------------------------------------------------------

namespace {
template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;
}

template <typename T>
Tape<T>::Tape() : epoch_(g_tape_epoch.fetch_add(1)) {
    prev_ = g_active_tape<T>;
    g_active_tape<T> = this;
}

template <typename T>
Tape<T>::~Tape() {
    g_active_tape<T> = prev_;
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return g_active_tape<T>;
}

template <typename T>
int Tape<T>::register_node(const Tensor<T>& t, bool leaf) {
    auto& st = *t.s_;
    if (st.tape_epoch == epoch_) return st.node;
    const int id = static_cast<int>(nodes_.size());
    st.tape_epoch = epoch_;
    st.node = id;
    nodes_.push_back(NodeSlot{t, leaf});
    grads_.emplace_back();
    return id;
}

template <typename T>
int Tape<T>::watch(const Tensor<T>& t) {
    if (!t.defined()) throw std::invalid_argument("undefined tensor used in op");
    return register_node(t, /*leaf=*/true);
}

template <typename T>
void Tape<T>::record(const Tensor<T>& out, const char* kind, std::function<void(Tape&)> backward_fn) {
    const int id = register_node(out, /*leaf=*/false);
    nodes_[id].leaf = false;  // an op output is never a leaf
    entries_.push_back(Entry{kind, id, std::move(backward_fn)});
}

template <typename T>
const std::vector<T>* Tape<T>::grad_of(int node) const {
    const auto& g = grads_[node];
    return g.empty() ? nullptr : &g;
}

template <typename T>
std::vector<T>& Tape<T>::grad_buf(int node) {
    auto& g = grads_[node];
    if (g.empty()) g.assign(nodes_[node].tensor.numel(), T(0));
    return g;
}

template <typename T>
void Tape<T>::accumulate(int node, std::span<const T> g) {
    auto& buf = grad_buf(node);
    for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

template <typename T>
void Tape<T>::accumulate_scaled(int node, std::span<const T> g, T factor) {
    auto& buf = grad_buf(node);
    for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i] * factor;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
    if (!loss.defined()) throw std::invalid_argument("backward: undefined loss tensor");
    if (loss.numel() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    if (loss.s_->tape_epoch != epoch_ || loss.s_->node < 0) {
        throw std::invalid_argument("backward: loss tensor is detached from this tape");
    }
    for (auto& g : grads_) g.clear();
    grad_buf(loss.s_->node)[0] = T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        it->backward_fn(*this);
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].leaf && !grads_[i].empty()) {
            nodes_[i].tensor.accumulate_grad(grads_[i]);
        }
    }
}

// -- ops -----------------------------------------------------------------

namespace {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ia = tp->watch(a), ib = tp->watch(b);
        tp->record(result, "add", [ia, ib, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            t.accumulate(ia, *go);
            t.accumulate(ib, *go);
        });
    }
    return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ia = tp->watch(a), ib = tp->watch(b);
        tp->record(result, "mul", [a, b, ia, ib, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& ga = t.grad_buf(ia);
            auto& gb = t.grad_buf(ib);
            auto av = a.values(), bv = b.values();
            for (size_t i = 0; i < go->size(); ++i) {
                ga[i] += (*go)[i] * bv[i];
                gb[i] += (*go)[i] * av[i];
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
    std::vector<T> out(a.numel());
    auto av = a.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * factor;
    Tensor<T> result = Tensor<T>::from(a.shape(), std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ia = tp->watch(a);
        tp->record(result, "scale", [ia, factor, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            t.accumulate_scaled(ia, *go, factor);
        });
    }
    return result;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > T(0) ? xv[i] : T(0);
    Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ix = tp->watch(x);
        // Subgradient at exactly 0 is 0.
        tp->record(result, "relu", [x, ix, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& gx = t.grad_buf(ix);
            auto xv = x.values();
            for (size_t i = 0; i < go->size(); ++i)
                if (xv[i] > T(0)) gx[i] += (*go)[i];
        });
    }
    return result;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    auto xv = x.values();
    for (size_t i = 0; i < out.size(); ++i) {
        const T z = xv[i];
        // Evaluate from the non-saturating side for stability.
        if (z >= T(0)) {
            const T e = std::exp(-z);
            out[i] = T(1) / (T(1) + e);
        } else {
            const T e = std::exp(z);
            out[i] = e / (T(1) + e);
        }
    }
    Tensor<T> result = Tensor<T>::from(x.shape(), std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ix = tp->watch(x);
        tp->record(result, "sigmoid", [result, ix, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& gx = t.grad_buf(ix);
            auto sv = result.values();
            for (size_t i = 0; i < go->size(); ++i) gx[i] += (*go)[i] * sv[i] * (T(1) - sv[i]);
        });
    }
    return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = 0;
    for (T v : x.values()) acc += v;
    Tensor<T> result = Tensor<T>::from({1}, {acc});
    if (auto* tp = Tape<T>::active()) {
        const int ix = tp->watch(x);
        tp->record(result, "sum", [ix, n = x.numel(), io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& gx = t.grad_buf(ix);
            for (size_t i = 0; i < n; ++i) gx[i] += (*go)[0];
        });
    }
    return result;
}

namespace {
template <typename T>
void require_nchw(const Tensor<T>& t, const char* op) {
    if (t.ndim() != 4) {
        throw std::invalid_argument(std::string(op) + ": expected NxCxHxW tensor, got " +
                                    shape_str(t.shape()));
    }
}
}  // namespace

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    require_nchw(a, "concat_channels");
    require_nchw(b, "concat_channels");
    const char* axes[] = {"batch", "", "height", "width"};
    for (size_t ax : {0u, 2u, 3u}) {
        if (a.dim(ax) != b.dim(ax)) {
            throw std::invalid_argument(std::string("concat_channels: ") + axes[ax] + " mismatch " +
                                        std::to_string(a.dim(ax)) + " vs " + std::to_string(b.dim(ax)));
        }
    }
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    const size_t plane = static_cast<size_t>(h) * w;
    std::vector<T> out(static_cast<size_t>(n) * (ca + cb) * plane);
    auto av = a.values(), bv = b.values();
    for (int ni = 0; ni < n; ++ni) {
        T* dst = out.data() + static_cast<size_t>(ni) * (ca + cb) * plane;
        const T* sa = av.data() + static_cast<size_t>(ni) * ca * plane;
        const T* sb = bv.data() + static_cast<size_t>(ni) * cb * plane;
        std::copy(sa, sa + ca * plane, dst);
        std::copy(sb, sb + cb * plane, dst + ca * plane);
    }
    Tensor<T> result = Tensor<T>::from({n, ca + cb, h, w}, std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ia = tp->watch(a), ib = tp->watch(b);
        tp->record(result, "concat", [ia, ib, n, ca, cb, plane, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& ga = t.grad_buf(ia);
            auto& gb = t.grad_buf(ib);
            for (int ni = 0; ni < n; ++ni) {
                const T* src = go->data() + static_cast<size_t>(ni) * (ca + cb) * plane;
                T* da = ga.data() + static_cast<size_t>(ni) * ca * plane;
                T* db = gb.data() + static_cast<size_t>(ni) * cb * plane;
                for (size_t i = 0; i < static_cast<size_t>(ca) * plane; ++i) da[i] += src[i];
                for (size_t i = 0; i < static_cast<size_t>(cb) * plane; ++i) db[i] += src[ca * plane + i];
            }
        });
    }
    return result;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end) {
    require_nchw(x, "slice_channels");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (begin < 0 || end > c || begin >= end) {
        throw std::invalid_argument("slice_channels: invalid range [" + std::to_string(begin) + "," +
                                    std::to_string(end) + ") for " + std::to_string(c) + " channels");
    }
    const size_t plane = static_cast<size_t>(h) * w;
    const int cs = end - begin;
    std::vector<T> out(static_cast<size_t>(n) * cs * plane);
    auto xv = x.values();
    for (int ni = 0; ni < n; ++ni) {
        const T* src = xv.data() + (static_cast<size_t>(ni) * c + begin) * plane;
        std::copy(src, src + static_cast<size_t>(cs) * plane,
                  out.data() + static_cast<size_t>(ni) * cs * plane);
    }
    Tensor<T> result = Tensor<T>::from({n, cs, h, w}, std::move(out));
    if (auto* tp = Tape<T>::active()) {
        const int ix = tp->watch(x);
        tp->record(result, "slice", [ix, n, c, begin, cs, plane, io = tp->watch(result)](Tape<T>& t) {
            const auto* go = t.grad_of(io);
            if (!go) return;
            auto& gx = t.grad_buf(ix);
            for (int ni = 0; ni < n; ++ni) {
                const T* src = go->data() + static_cast<size_t>(ni) * cs * plane;
                T* dst = gx.data() + (static_cast<size_t>(ni) * c + begin) * plane;
                for (size_t i = 0; i < static_cast<size_t>(cs) * plane; ++i) dst[i] += src[i];
            }
        });
    }
    return result;
}

template <typename T>
T gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& input, T eps) {
    if (!(eps > T(0))) throw std::invalid_argument("gradient_check: eps must be positive");
    Tensor<T> probe = input.clone();
    std::vector<T> analytic(probe.numel(), T(0));
    {
        Tape<T> tape;
        tape.watch(probe);
        Tensor<T> out = fn(probe);
        if (out.numel() != 1) {
            throw std::invalid_argument("gradient_check: fn must produce a scalar, got shape " +
                                        shape_str(out.shape()));
        }
        tape.backward(out);
        if (probe.has_grad()) {
            auto g = probe.grad();
            analytic.assign(g.begin(), g.end());
        }
    }
    T max_err = 0;
    auto vals = probe.values_mut();
    for (size_t i = 0; i < vals.size(); ++i) {
        const T orig = vals[i];
        vals[i] = orig + eps;
        const T fp = fn(probe).value_at(0);
        vals[i] = orig - eps;
        const T fm = fn(probe).value_at(0);
        vals[i] = orig;
        const T numeric = (fp - fm) / (T(2) * eps);
        const T denom = std::max({std::abs(analytic[i]), std::abs(numeric), T(1e-8)});
        max_err = std::max(max_err, std::abs(analytic[i] - numeric) / denom);
    }
    return max_err;
}

// -- explicit instantiations ----------------------------------------------

#define CSEG_INSTANTIATE(T)                                                                        \
    template class Tensor<T>;                                                                      \
    template class Tape<T>;                                                                        \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> scale(const Tensor<T>&, T);                                                 \
    template Tensor<T> relu(const Tensor<T>&);                                                     \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
    template Tensor<T> sum(const Tensor<T>&);                                                      \
    template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> slice_channels(const Tensor<T>&, int, int);                                 \
    template T gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>&, const Tensor<T>&, \
                              T);

CSEG_INSTANTIATE(float)
CSEG_INSTANTIATE(double)
#undef CSEG_INSTANTIATE

}  // namespace cseg
