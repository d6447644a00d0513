#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace cseg {

// Canonical image layout is N x C x H x W, row-major.
using Shape = std::vector<int>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
class Tape;

// Dense row-major tensor with value semantics over shared storage: copies
// alias the same buffer, ops allocate fresh outputs and never write into
// their inputs. The optional grad buffer accumulates across backward passes
// until zero_grad().
template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, T value);
    // Normal(0, std^2) init; deterministic for fixed (shape, seed, std).
    // Generator: mt19937_64 + Box-Muller (see rng.hpp).
    static Tensor randn(Shape shape, uint64_t seed, T std_dev);

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    int dim(size_t axis) const { return s_->shape[axis]; }
    size_t ndim() const { return s_->shape.size(); }
    size_t numel() const { return s_->data.size(); }

    std::span<const T> values() const { return s_->data; }
    std::span<T> values_mut() { return s_->data; }
    T value_at(size_t i) const { return s_->data[i]; }

    bool has_grad() const { return defined() && !s_->grad.empty(); }
    std::span<const T> grad() const { return s_->grad; }
    void zero_grad() { s_->grad.clear(); }
    void accumulate_grad(std::span<const T> g);

    Tensor clone() const;

    bool same_storage(const Tensor& other) const { return s_ == other.s_; }
    const void* storage_id() const { return s_.get(); }

private:
    struct Storage {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until first backward reaches this leaf
        uint64_t tape_epoch = 0;
        int node = -1;
    };
    std::shared_ptr<Storage> s_;

    friend class Tape<T>;
};

// Define-by-run recorder. One tape per forward pass, confined to a single
// thread; while a Tape is alive it captures every op executed on that
// thread. backward() sweeps the entries exactly once in reverse order and
// adds dLoss/dLeaf into each leaf tensor's grad buffer.
template <typename T>
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void backward(const Tensor<T>& loss);

    size_t num_entries() const { return entries_.size(); }

    // -- recording interface (used by op implementations) --
    int watch(const Tensor<T>& t);  // register as leaf if unseen
    void record(const Tensor<T>& out, const char* kind, std::function<void(Tape&)> backward_fn);
    // Scratch gradient for a node during the current backward sweep;
    // nullptr means no gradient has reached it.
    const std::vector<T>* grad_of(int node) const;
    void accumulate(int node, std::span<const T> g);
    void accumulate_scaled(int node, std::span<const T> g, T factor);
    std::vector<T>& grad_buf(int node);

private:
    int register_node(const Tensor<T>& t, bool leaf);

    struct NodeSlot {
        Tensor<T> tensor;
        bool leaf = false;
    };
    struct Entry {
        const char* kind;
        int out;
        std::function<void(Tape&)> backward_fn;
    };
    std::vector<NodeSlot> nodes_;
    std::vector<Entry> entries_;
    std::vector<std::vector<T>> grads_;
    uint64_t epoch_;
    Tape* prev_ = nullptr;
};

// -- elementwise and structural ops ------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);  // scalar

// Concatenate along the channel axis; channels of a precede channels of b.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);
// Channel slice [begin, end); inverse of concat_channels.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int begin, int end);

// Max relative error between the analytic gradient of fn at input and
// central finite differences (f(x+eps) - f(x-eps)) / (2 eps), per element:
// |a - n| / max(|a|, |n|, 1e-8). fn must produce a scalar.
template <typename T>
T gradient_check(const std::function<Tensor<T>(const Tensor<T>&)>& fn, const Tensor<T>& input,
                 T eps);

}  // namespace cseg
