#pragma once
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "ccdiff/error.hpp"
#include "ccdiff/rng.hpp"

namespace ccdiff {

// Row-major extents. Rank is at most 4 in practice ((C_out,C_in,3,3) kernels).
using Shape = std::vector<int>;

std::int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Value semantics, shared immutable buffer. Ops never mutate a tensor after it
// escapes its builder; optimizers make new tensors instead of writing in place.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor scalar(double value);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor wrap(Shape shape, std::shared_ptr<std::vector<double>> data,
                       bool requires_grad = false);
    static Tensor randn(Shape shape, RngStream& rng, double stdev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return static_cast<bool>(data_); }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }

    const double* data() const { return data_->data(); }
    double* mutable_data() { return data_->data(); } // builder-phase use only
    const std::shared_ptr<std::vector<double>>& buffer() const { return data_; }

    double item() const;                    // requires numel()==1
    double at(std::initializer_list<int> idx) const;

    bool requires_grad() const { return requires_grad_; }
    Tensor detached() const;   // same buffer, requires_grad=false
    Tensor variable() const;   // same buffer, requires_grad=true
    Tensor clone(bool requires_grad = false) const; // deep copy of the buffer

private:
    Tensor(Shape shape, std::shared_ptr<std::vector<double>> data, bool requires_grad);

    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    bool requires_grad_ = false;

    // Cached link to the node this tensor occupies on a tape. Valid only while
    // src_tape_ matches the tape consulting it.
    mutable const Tape* src_tape_ = nullptr;
    mutable int node_id_ = -1;

    friend class Tape;
};

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    conv2d3x3,
    relu,
    sigmoid,
    softmax,
    log,
    sqrt,
    clamp,
    mean,
    sum,
    broadcast,
    reshape,
};

const char* op_name(OpKind k);

struct TapeStats {
    std::int64_t nodes = 0;          // op nodes only; leaves are free
    std::int64_t saved_elements = 0; // total numel of saved activations
};

// Gradients returned by Tape::backward, keyed by the leaf tensor's buffer.
class GradMap {
public:
    bool contains(const Tensor& t) const;
    const Tensor& grad(const Tensor& t) const; // throws Error if absent
    std::size_t size() const { return by_buffer_.size(); }

private:
    std::unordered_map<const void*, Tensor> by_buffer_;
    friend class Tape;
};

// Dynamic define-by-run tape. Append-only while live; backward consumes it.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    bool live() const { return live_; }
    TapeStats stats() const;
    // Stats for nodes recorded after `mark()` was taken (segment accounting
    // for the sampling-loop cost measurements).
    std::size_t mark() const { return nodes_size_; }
    TapeStats stats_since(std::size_t mark) const;

    // Reverse sweep from `loss` (scalar, recorded on this tape) in strict
    // reverse topological order. Populates a gradient for every requires_grad
    // leaf registered on the tape (zeros if disconnected), then marks the tape
    // consumed: recording and a second backward both throw.
    GradMap backward(const Tensor& loss);

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        int in0 = -1, in1 = -1;
        Shape shape;                // output shape
        Shape in_shape;             // input shape where backward needs it
        std::vector<Tensor> saved;  // detached saved activations
        double p0 = 0.0, p1 = 0.0;  // clamp bounds
        std::uint8_t bmode = 0;     // broadcast mode for add/sub/mul/div
    };

    int ensure_leaf(const Tensor& t);
    int input_id(const Tensor& t);
    Tensor record(Node&& n, const Tensor& result);
    void require_live(const char* what) const;

    std::vector<Node> nodes_;
    std::size_t nodes_size_ = 0; // == nodes_.size(), kept for cheap mark()
    std::unordered_map<const void*, int> leaf_by_buffer_;
    std::vector<std::shared_ptr<std::vector<double>>> leaf_keepalive_;
    std::int64_t op_nodes_ = 0;
    std::int64_t saved_elements_ = 0;
    bool live_ = true;

    friend Tensor op_binary(OpKind, const Tensor&, const Tensor&);
    friend Tensor op_unary(OpKind, const Tensor&, double, double);
    friend Tensor matmul(const Tensor&, const Tensor&);
    friend Tensor conv2d3x3(const Tensor&, const Tensor&);
    friend Tensor softmax(const Tensor&);
    friend Tensor mean(const Tensor&);
    friend Tensor sum(const Tensor&);
    friend Tensor broadcast_to(const Tensor&, const Shape&);
    friend Tensor reshape(const Tensor&, const Shape&);
};

// RAII: makes a fresh tape active for the current thread.
struct TapeScope {
    TapeScope();
    ~TapeScope();
    Tape tape;

private:
    Tape* prev_;
};

// RAII: suspends recording (evaluation-time forward passes).
struct NoGradScope {
    NoGradScope();
    ~NoGradScope();

private:
    Tape* prev_;
};

// ---- ops ------------------------------------------------------------------
// Shapes must match exactly except for the spelled-out broadcast forms:
//   add/sub/mul/div: one side may be a 1-element scalar tensor;
//   add/sub additionally accept rank-3 (C,H,W) with a rank-1 (C) bias.
// Every op checks its result for NaN/Inf and throws NumericError naming the op.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b); // |b| < 1e-12 anywhere -> NumericError

Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);

Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)x(k,n) -> (m,n)
Tensor conv2d3x3(const Tensor& in, const Tensor& k); // (Ci,H,W),(Co,Ci,3,3) -> (Co,H,W), zero pad 1
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x); // over axis 0 of (K,H,W)
Tensor log(const Tensor& x);     // x>0 required
Tensor sqrt(const Tensor& x);    // x>=0 required; grad blows up at 0, callers add eps
Tensor clamp(const Tensor& x, double lo, double hi); // pass-through grad strictly inside (lo,hi)
Tensor mean(const Tensor& x); // -> scalar
Tensor sum(const Tensor& x);  // -> scalar
Tensor broadcast_to(const Tensor& x, const Shape& shape); // scalar->any, (C)->(C,H,W)
Tensor reshape(const Tensor& x, const Shape& shape);

} // namespace ccdiff
