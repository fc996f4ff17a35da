#include "ccdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ccdiff {

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ')';
    return os.str();
}

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::div: return "div";
        case OpKind::matmul: return "matmul";
        case OpKind::conv2d3x3: return "conv2d3x3";
        case OpKind::relu: return "relu";
        case OpKind::sigmoid: return "sigmoid";
        case OpKind::softmax: return "softmax";
        case OpKind::log: return "log";
        case OpKind::sqrt: return "sqrt";
        case OpKind::clamp: return "clamp";
        case OpKind::mean: return "mean";
        case OpKind::sum: return "sum";
        case OpKind::broadcast: return "broadcast";
        case OpKind::reshape: return "reshape";
    }
    return "?";
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, std::shared_ptr<std::vector<double>> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {}

static void check_shape_valid(const Shape& s) {
    if (s.empty()) throw ShapeError("empty shape");
    for (int e : s)
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_shape_valid(shape);
    auto n = static_cast<std::size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_shape_valid(shape);
    auto n = static_cast<std::size_t>(numel_of(shape));
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
    check_shape_valid(shape);
    if (static_cast<std::int64_t>(values.size()) != numel_of(shape))
        throw ShapeError("from: " + std::to_string(values.size()) + " values for shape " +
                         shape_str(shape));
    return Tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(values)),
                  requires_grad);
}

Tensor Tensor::wrap(Shape shape, std::shared_ptr<std::vector<double>> data, bool requires_grad) {
    check_shape_valid(shape);
    if (!data || static_cast<std::int64_t>(data->size()) != numel_of(shape))
        throw ShapeError("wrap: buffer size does not match shape " + shape_str(shape));
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, RngStream& rng, double stdev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    double* p = t.mutable_data();
    for (std::int64_t i = 0; i < t.numel(); ++i) p[i] = rng.normal() * stdev;
    return t;
}

double Tensor::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return (*data_)[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw ShapeError("at(): rank mismatch for shape " + shape_str(shape_));
    std::int64_t off = 0;
    int d = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape_[static_cast<std::size_t>(d)])
            throw ShapeError("at(): index out of range for shape " + shape_str(shape_));
        off = off * shape_[static_cast<std::size_t>(d)] + i;
        ++d;
    }
    return (*data_)[static_cast<std::size_t>(off)];
}

Tensor Tensor::detached() const {
    Tensor t = *this;
    t.requires_grad_ = false;
    t.src_tape_ = nullptr;
    t.node_id_ = -1;
    return t;
}

Tensor Tensor::variable() const {
    Tensor t = *this;
    t.requires_grad_ = true;
    t.src_tape_ = nullptr;
    t.node_id_ = -1;
    return t;
}

Tensor Tensor::clone(bool requires_grad) const {
    return Tensor(shape_, std::make_shared<std::vector<double>>(*data_), requires_grad);
}

// ---- Tape -------------------------------------------------------------------

namespace {
thread_local Tape* g_active_tape = nullptr;
} // namespace

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope() : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

NoGradScope::NoGradScope() : prev_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = prev_; }

void Tape::require_live(const char* what) const {
    if (!live_) throw Error(std::string("tape already consumed by backward; cannot ") + what);
}

int Tape::ensure_leaf(const Tensor& t) {
    require_live("register a leaf");
    const void* key = t.data_.get();
    auto it = leaf_by_buffer_.find(key);
    if (it != leaf_by_buffer_.end()) {
        t.src_tape_ = this;
        t.node_id_ = it->second;
        return it->second;
    }
    Node n;
    n.kind = OpKind::leaf;
    n.shape = t.shape_;
    nodes_.push_back(std::move(n));
    nodes_size_ = nodes_.size();
    int id = static_cast<int>(nodes_.size()) - 1;
    leaf_by_buffer_.emplace(key, id);
    leaf_keepalive_.push_back(t.data_);
    t.src_tape_ = this;
    t.node_id_ = id;
    return id;
}

int Tape::input_id(const Tensor& t) {
    if (t.src_tape_ == this && t.node_id_ >= 0) return t.node_id_;
    if (t.requires_grad_) return ensure_leaf(t);
    return -1; // constant input: values travel via saved activations when needed
}

Tensor Tape::record(Node&& n, const Tensor& result) {
    require_live("record an op");
    for (const Tensor& s : n.saved) saved_elements_ += s.numel();
    op_nodes_ += 1;
    n.shape = result.shape_;
    nodes_.push_back(std::move(n));
    nodes_size_ = nodes_.size();
    Tensor r = result;
    r.requires_grad_ = true;
    r.src_tape_ = this;
    r.node_id_ = static_cast<int>(nodes_.size()) - 1;
    return r;
}

TapeStats Tape::stats() const { return {op_nodes_, saved_elements_}; }

TapeStats Tape::stats_since(std::size_t mark) const {
    TapeStats s;
    for (std::size_t i = mark; i < nodes_.size(); ++i) {
        const Node& n = nodes_[i];
        if (n.kind == OpKind::leaf) continue;
        s.nodes += 1;
        for (const Tensor& t : n.saved) s.saved_elements += t.numel();
    }
    return s;
}

bool GradMap::contains(const Tensor& t) const {
    return by_buffer_.count(t.buffer().get()) != 0;
}

const Tensor& GradMap::grad(const Tensor& t) const {
    auto it = by_buffer_.find(t.buffer().get());
    if (it == by_buffer_.end())
        throw Error("no gradient for tensor of shape " + shape_str(t.shape()) +
                    " (not a requires_grad leaf of this tape)");
    return it->second;
}

// ---- op plumbing --------------------------------------------------------------

namespace {

void check_finite(OpKind k, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericError(std::string(op_name(k)) + " produced a non-finite value");
}

// 0 same-shape, 1 a is scalar, 2 b is scalar, 3 b is per-channel bias
std::uint8_t classify_broadcast(OpKind k, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return 0;
    if (b.numel() == 1) return 2;
    if (a.numel() == 1) return 1;
    if ((k == OpKind::add || k == OpKind::sub) && a.rank() == 3 && b.rank() == 1 &&
        b.dim(0) == a.dim(0))
        return 3;
    throw ShapeError(std::string(op_name(k)) + ": incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
}

double apply_bin(OpKind k, double x, double y) {
    switch (k) {
        case OpKind::add: return x + y;
        case OpKind::sub: return x - y;
        case OpKind::mul: return x * y;
        case OpKind::div: return x / y;
        default: throw Error("apply_bin: bad op");
    }
}

} // namespace

Tensor op_binary(OpKind k, const Tensor& a, const Tensor& b) {
    if (!a.defined() || !b.defined()) throw Error(std::string(op_name(k)) + " on undefined tensor");
    std::uint8_t m = classify_broadcast(k, a, b);
    const Shape& out_shape = (m == 1) ? b.shape() : a.shape();
    auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(out_shape)));
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out->data();
    const std::int64_t n = static_cast<std::int64_t>(out->size());

    if (k == OpKind::div) {
        for (std::int64_t i = 0; i < b.numel(); ++i)
            if (std::abs(pb[i]) < 1e-12)
                throw NumericError("div: denominator within 1e-12 of zero");
    }

    switch (m) {
        case 0:
            for (std::int64_t i = 0; i < n; ++i) po[i] = apply_bin(k, pa[i], pb[i]);
            break;
        case 1:
            for (std::int64_t i = 0; i < n; ++i) po[i] = apply_bin(k, pa[0], pb[i]);
            break;
        case 2:
            for (std::int64_t i = 0; i < n; ++i) po[i] = apply_bin(k, pa[i], pb[0]);
            break;
        case 3: {
            const std::int64_t hw = static_cast<std::int64_t>(a.dim(1)) * a.dim(2);
            for (int c = 0; c < a.dim(0); ++c) {
                const double bc = pb[c];
                const double* row = pa + c * hw;
                double* orow = po + c * hw;
                for (std::int64_t i = 0; i < hw; ++i) orow[i] = apply_bin(k, row[i], bc);
            }
            break;
        }
    }
    check_finite(k, *out);

    Tensor result = Tensor::wrap(out_shape, std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !(a.requires_grad() || b.requires_grad())) return result;

    Tape::Node node;
    node.kind = k;
    node.bmode = m;
    node.in0 = tape->input_id(a);
    node.in1 = tape->input_id(b);
    if (k == OpKind::mul || k == OpKind::div) node.saved = {a.detached(), b.detached()};
    return tape->record(std::move(node), result);
}

Tensor add(const Tensor& a, const Tensor& b) { return op_binary(OpKind::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return op_binary(OpKind::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return op_binary(OpKind::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return op_binary(OpKind::div, a, b); }

Tensor add(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
Tensor sub(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor mul(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor div(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }

Tensor op_unary(OpKind k, const Tensor& x, double p0, double p1) {
    if (!x.defined()) throw Error(std::string(op_name(k)) + " on undefined tensor");
    auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    const double* px = x.data();
    double* po = out->data();
    const std::int64_t n = x.numel();
    switch (k) {
        case OpKind::relu:
            for (std::int64_t i = 0; i < n; ++i) po[i] = px[i] > 0.0 ? px[i] : 0.0;
            break;
        case OpKind::sigmoid:
            for (std::int64_t i = 0; i < n; ++i) po[i] = 1.0 / (1.0 + std::exp(-px[i]));
            break;
        case OpKind::log:
            for (std::int64_t i = 0; i < n; ++i) {
                if (px[i] <= 0.0) throw NumericError("log: non-positive input");
                po[i] = std::log(px[i]);
            }
            break;
        case OpKind::sqrt:
            for (std::int64_t i = 0; i < n; ++i) {
                if (px[i] < 0.0) throw NumericError("sqrt: negative input");
                po[i] = std::sqrt(px[i]);
            }
            break;
        case OpKind::clamp:
            for (std::int64_t i = 0; i < n; ++i) po[i] = std::min(p1, std::max(p0, px[i]));
            break;
        default: throw Error("op_unary: bad op");
    }
    check_finite(k, *out);

    Tensor result = Tensor::wrap(x.shape(), std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;

    Tape::Node node;
    node.kind = k;
    node.p0 = p0;
    node.p1 = p1;
    node.in0 = tape->input_id(x);
    // sigmoid's and sqrt's grads only need the output; the rest need the input
    const bool save_output = k == OpKind::sigmoid || k == OpKind::sqrt;
    node.saved = {save_output ? result.detached() : x.detached()};
    return tape->record(std::move(node), result);
}

Tensor relu(const Tensor& x) { return op_unary(OpKind::relu, x, 0, 0); }
Tensor sigmoid(const Tensor& x) { return op_unary(OpKind::sigmoid, x, 0, 0); }
Tensor log(const Tensor& x) { return op_unary(OpKind::log, x, 0, 0); }
Tensor sqrt(const Tensor& x) { return op_unary(OpKind::sqrt, x, 0, 0); }

Tensor clamp(const Tensor& x, double lo, double hi) {
    if (!(lo < hi)) throw ShapeError("clamp: lo must be < hi");
    return op_unary(OpKind::clamp, x, lo, hi);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.dim(0), kk = a.dim(1), n = b.dim(1);
    auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m) * n, 0.0);
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out->data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < kk; ++p) {
            const double av = pa[i * kk + p];
            if (av == 0.0) continue;
            const double* brow = pb + static_cast<std::int64_t>(p) * n;
            double* orow = po + static_cast<std::int64_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    check_finite(OpKind::matmul, *out);

    Tensor result = Tensor::wrap({m, n}, std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !(a.requires_grad() || b.requires_grad())) return result;

    Tape::Node node;
    node.kind = OpKind::matmul;
    node.in0 = tape->input_id(a);
    node.in1 = tape->input_id(b);
    node.saved = {a.detached(), b.detached()};
    return tape->record(std::move(node), result);
}

namespace {

// shared by forward and both backward passes: walks the valid (y,x) window for
// one kernel offset and hands rows to `fn(orow, irow, count)`
inline void conv_rows(int H, int W, int dy, int dx, const double* in_plane, double* out_plane,
                      double w) {
    const int y0 = std::max(0, 1 - dy), y1 = std::min(H - 1, H - dy);
    const int x0 = std::max(0, 1 - dx), x1 = std::min(W - 1, W - dx);
    for (int y = y0; y <= y1; ++y) {
        const double* irow = in_plane + static_cast<std::int64_t>(y + dy - 1) * W + (dx - 1);
        double* orow = out_plane + static_cast<std::int64_t>(y) * W;
        for (int x = x0; x <= x1; ++x) orow[x] += w * irow[x];
    }
}

} // namespace

Tensor conv2d3x3(const Tensor& in, const Tensor& k) {
    if (in.rank() != 3 || k.rank() != 4 || k.dim(1) != in.dim(0) || k.dim(2) != 3 || k.dim(3) != 3)
        throw ShapeError("conv2d3x3: incompatible shapes " + shape_str(in.shape()) + " and " +
                         shape_str(k.shape()));
    const int Ci = in.dim(0), H = in.dim(1), W = in.dim(2), Co = k.dim(0);
    auto out =
        std::make_shared<std::vector<double>>(static_cast<std::size_t>(Co) * H * W, 0.0);
    const double* px = in.data();
    const double* pk = k.data();
    for (int co = 0; co < Co; ++co)
        for (int ci = 0; ci < Ci; ++ci) {
            const double* kw = pk + (static_cast<std::int64_t>(co) * Ci + ci) * 9;
            const double* plane = px + static_cast<std::int64_t>(ci) * H * W;
            double* oplane = out->data() + static_cast<std::int64_t>(co) * H * W;
            for (int dy = 0; dy < 3; ++dy)
                for (int dx = 0; dx < 3; ++dx) {
                    const double w = kw[dy * 3 + dx];
                    if (w == 0.0) continue;
                    conv_rows(H, W, dy, dx, plane, oplane, w);
                }
        }
    check_finite(OpKind::conv2d3x3, *out);

    Tensor result = Tensor::wrap({Co, H, W}, std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !(in.requires_grad() || k.requires_grad())) return result;

    Tape::Node node;
    node.kind = OpKind::conv2d3x3;
    node.in0 = tape->input_id(in);
    node.in1 = tape->input_id(k);
    node.saved = {in.detached(), k.detached()};
    return tape->record(std::move(node), result);
}

Tensor softmax(const Tensor& x) {
    if (x.rank() != 3) throw ShapeError("softmax: expected (K,H,W), got " + shape_str(x.shape()));
    const int K = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    const double* px = x.data();
    double* po = out->data();
    for (std::int64_t i = 0; i < hw; ++i) {
        double mx = px[i];
        for (int c = 1; c < K; ++c) mx = std::max(mx, px[c * hw + i]);
        double s = 0.0;
        for (int c = 0; c < K; ++c) {
            const double e = std::exp(px[c * hw + i] - mx);
            po[c * hw + i] = e;
            s += e;
        }
        for (int c = 0; c < K; ++c) po[c * hw + i] /= s;
    }
    check_finite(OpKind::softmax, *out);

    Tensor result = Tensor::wrap(x.shape(), std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;

    Tape::Node node;
    node.kind = OpKind::softmax;
    node.in0 = tape->input_id(x);
    node.saved = {result.detached()};
    return tape->record(std::move(node), result);
}

namespace {

double reduce_value(OpKind k, const Tensor& x) {
    if (!x.defined()) throw Error(std::string(op_name(k)) + " on undefined tensor");
    double s = 0.0;
    const double* px = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) s += px[i];
    if (k == OpKind::mean) s /= static_cast<double>(x.numel());
    if (!std::isfinite(s))
        throw NumericError(std::string(op_name(k)) + " produced a non-finite value");
    return s;
}

} // namespace

Tensor mean(const Tensor& x) {
    Tensor result = Tensor::from({1}, {reduce_value(OpKind::mean, x)});
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;
    Tape::Node node;
    node.kind = OpKind::mean;
    node.in0 = tape->input_id(x);
    node.in_shape = x.shape();
    return tape->record(std::move(node), result);
}

Tensor sum(const Tensor& x) {
    Tensor result = Tensor::from({1}, {reduce_value(OpKind::sum, x)});
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;
    Tape::Node node;
    node.kind = OpKind::sum;
    node.in0 = tape->input_id(x);
    node.in_shape = x.shape();
    return tape->record(std::move(node), result);
}

Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    check_shape_valid(shape);
    const bool from_scalar = x.numel() == 1;
    const bool from_channel =
        x.rank() == 1 && shape.size() == 3 && shape[0] == x.dim(0);
    if (!from_scalar && !from_channel && !(x.shape() == shape))
        throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
    auto out = std::make_shared<std::vector<double>>(static_cast<std::size_t>(numel_of(shape)));
    const double* px = x.data();
    double* po = out->data();
    if (x.shape() == shape) {
        std::copy(px, px + x.numel(), po);
    } else if (from_scalar) {
        std::fill(out->begin(), out->end(), px[0]);
    } else {
        const std::int64_t hw = static_cast<std::int64_t>(shape[1]) * shape[2];
        for (int c = 0; c < shape[0]; ++c) std::fill_n(po + c * hw, hw, px[c]);
    }

    Tensor result = Tensor::wrap(shape, std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;

    Tape::Node node;
    node.kind = OpKind::broadcast;
    node.in0 = tape->input_id(x);
    node.in_shape = x.shape();
    return tape->record(std::move(node), result);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
    check_shape_valid(shape);
    if (numel_of(shape) != x.numel())
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    // copies so no two tensors alias one buffer with different shapes
    auto out = std::make_shared<std::vector<double>>(*x.buffer());

    Tensor result = Tensor::wrap(shape, std::move(out));
    Tape* tape = Tape::active();
    if (!tape || !x.requires_grad()) return result;

    Tape::Node node;
    node.kind = OpKind::reshape;
    node.in0 = tape->input_id(x);
    node.in_shape = x.shape();
    return tape->record(std::move(node), result);
}

// ---- backward -----------------------------------------------------------------

namespace {

Tensor scaled_copy(const Tensor& g, double s) {
    Tensor r = g.clone();
    double* p = r.mutable_data();
    for (std::int64_t i = 0; i < r.numel(); ++i) p[i] *= s;
    return r;
}

double dot_all(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) s += pa[i] * pb[i];
    return s;
}

} // namespace

GradMap Tape::backward(const Tensor& loss) {
    require_live("run backward");
    if (loss.numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (loss.src_tape_ != this || loss.node_id_ < 0)
        throw Error("backward: loss is not recorded on this tape");
    live_ = false;

    std::vector<Tensor> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.node_id_)] = Tensor::full({1}, 1.0);

    // contributions are always freshly allocated, so accumulation may mutate
    auto accum = [&grads](int id, Tensor&& contrib) {
        if (id < 0) return;
        Tensor& slot = grads[static_cast<std::size_t>(id)];
        if (!slot.defined()) {
            slot = std::move(contrib);
            return;
        }
        double* dst = slot.mutable_data();
        const double* src = contrib.data();
        for (std::int64_t i = 0; i < contrib.numel(); ++i) dst[i] += src[i];
    };

    for (int id = loss.node_id_; id >= 0; --id) {
        const Tensor& g = grads[static_cast<std::size_t>(id)];
        if (!g.defined()) continue;
        const Node& nd = nodes_[static_cast<std::size_t>(id)];
        switch (nd.kind) {
            case OpKind::leaf:
                break;

            case OpKind::add:
            case OpKind::sub: {
                const double bsign = nd.kind == OpKind::sub ? -1.0 : 1.0;
                switch (nd.bmode) {
                    case 0:
                        accum(nd.in0, g.clone());
                        accum(nd.in1, scaled_copy(g, bsign));
                        break;
                    case 1: { // a scalar
                        double s = 0.0;
                        for (std::int64_t i = 0; i < g.numel(); ++i) s += g.data()[i];
                        accum(nd.in0, Tensor::from({1}, {s}));
                        accum(nd.in1, scaled_copy(g, bsign));
                        break;
                    }
                    case 2: { // b scalar
                        accum(nd.in0, g.clone());
                        double s = 0.0;
                        for (std::int64_t i = 0; i < g.numel(); ++i) s += g.data()[i];
                        accum(nd.in1, Tensor::from({1}, {bsign * s}));
                        break;
                    }
                    case 3: { // b per-channel bias over (C,H,W)
                        accum(nd.in0, g.clone());
                        const int C = nd.shape[0];
                        const std::int64_t hw =
                            static_cast<std::int64_t>(nd.shape[1]) * nd.shape[2];
                        Tensor gb = Tensor::zeros({C});
                        for (int c = 0; c < C; ++c) {
                            double s = 0.0;
                            const double* row = g.data() + c * hw;
                            for (std::int64_t i = 0; i < hw; ++i) s += row[i];
                            gb.mutable_data()[c] = bsign * s;
                        }
                        accum(nd.in1, std::move(gb));
                        break;
                    }
                }
                break;
            }

            case OpKind::mul: {
                const Tensor& a = nd.saved[0];
                const Tensor& b = nd.saved[1];
                switch (nd.bmode) {
                    case 0: {
                        Tensor ga = g.clone(), gb = g.clone();
                        double* pga = ga.mutable_data();
                        double* pgb = gb.mutable_data();
                        for (std::int64_t i = 0; i < g.numel(); ++i) {
                            pga[i] *= b.data()[i];
                            pgb[i] *= a.data()[i];
                        }
                        accum(nd.in0, std::move(ga));
                        accum(nd.in1, std::move(gb));
                        break;
                    }
                    case 1: // a scalar
                        accum(nd.in0, Tensor::from({1}, {dot_all(g, b)}));
                        accum(nd.in1, scaled_copy(g, a.item()));
                        break;
                    case 2: // b scalar
                        accum(nd.in0, scaled_copy(g, b.item()));
                        accum(nd.in1, Tensor::from({1}, {dot_all(g, a)}));
                        break;
                }
                break;
            }

            case OpKind::div: {
                const Tensor& a = nd.saved[0];
                const Tensor& b = nd.saved[1];
                switch (nd.bmode) {
                    case 0: {
                        Tensor ga = g.clone(), gb = g.clone();
                        double* pga = ga.mutable_data();
                        double* pgb = gb.mutable_data();
                        for (std::int64_t i = 0; i < g.numel(); ++i) {
                            const double bi = b.data()[i];
                            pga[i] /= bi;
                            pgb[i] *= -a.data()[i] / (bi * bi);
                        }
                        accum(nd.in0, std::move(ga));
                        accum(nd.in1, std::move(gb));
                        break;
                    }
                    case 1: { // a scalar
                        double s = 0.0;
                        Tensor gb = g.clone();
                        double* pgb = gb.mutable_data();
                        const double av = a.item();
                        for (std::int64_t i = 0; i < g.numel(); ++i) {
                            const double bi = b.data()[i];
                            s += g.data()[i] / bi;
                            pgb[i] *= -av / (bi * bi);
                        }
                        accum(nd.in0, Tensor::from({1}, {s}));
                        accum(nd.in1, std::move(gb));
                        break;
                    }
                    case 2: { // b scalar
                        const double bv = b.item();
                        accum(nd.in0, scaled_copy(g, 1.0 / bv));
                        accum(nd.in1, Tensor::from({1}, {-dot_all(g, a) / (bv * bv)}));
                        break;
                    }
                }
                break;
            }

            case OpKind::matmul: {
                const Tensor& a = nd.saved[0];
                const Tensor& b = nd.saved[1];
                const int m = a.dim(0), kk = a.dim(1), n = b.dim(1);
                if (nd.in0 >= 0) { // ga = g . b^T
                    Tensor ga = Tensor::zeros({m, kk});
                    double* pga = ga.mutable_data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const double gv = g.data()[i * n + j];
                            if (gv == 0.0) continue;
                            const double* brow = b.data();
                            for (int p = 0; p < kk; ++p)
                                pga[i * kk + p] += gv * brow[p * n + j];
                        }
                    accum(nd.in0, std::move(ga));
                }
                if (nd.in1 >= 0) { // gb = a^T . g
                    Tensor gb = Tensor::zeros({kk, n});
                    double* pgb = gb.mutable_data();
                    for (int i = 0; i < m; ++i)
                        for (int p = 0; p < kk; ++p) {
                            const double av = a.data()[i * kk + p];
                            if (av == 0.0) continue;
                            for (int j = 0; j < n; ++j)
                                pgb[p * n + j] += av * g.data()[i * n + j];
                        }
                    accum(nd.in1, std::move(gb));
                }
                break;
            }

            case OpKind::conv2d3x3: {
                const Tensor& in = nd.saved[0];
                const Tensor& k = nd.saved[1];
                const int Ci = in.dim(0), H = in.dim(1), W = in.dim(2), Co = k.dim(0);
                if (nd.in0 >= 0) { // scatter g back through the kernel
                    Tensor gin = Tensor::zeros(in.shape());
                    for (int co = 0; co < Co; ++co)
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double* kw =
                                k.data() + (static_cast<std::int64_t>(co) * Ci + ci) * 9;
                            const double* gplane =
                                g.data() + static_cast<std::int64_t>(co) * H * W;
                            double* iplane =
                                gin.mutable_data() + static_cast<std::int64_t>(ci) * H * W;
                            for (int dy = 0; dy < 3; ++dy)
                                for (int dx = 0; dx < 3; ++dx) {
                                    const double w = kw[dy * 3 + dx];
                                    if (w == 0.0) continue;
                                    const int y0 = std::max(0, 1 - dy), y1 = std::min(H - 1, H - dy);
                                    const int x0 = std::max(0, 1 - dx), x1 = std::min(W - 1, W - dx);
                                    for (int y = y0; y <= y1; ++y) {
                                        double* irow =
                                            iplane + static_cast<std::int64_t>(y + dy - 1) * W +
                                            (dx - 1);
                                        const double* grow =
                                            gplane + static_cast<std::int64_t>(y) * W;
                                        for (int x = x0; x <= x1; ++x) irow[x] += w * grow[x];
                                    }
                                }
                        }
                    accum(nd.in0, std::move(gin));
                }
                if (nd.in1 >= 0) {
                    Tensor gk = Tensor::zeros(k.shape());
                    double* pgk = gk.mutable_data();
                    for (int co = 0; co < Co; ++co)
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double* iplane =
                                in.data() + static_cast<std::int64_t>(ci) * H * W;
                            const double* gplane =
                                g.data() + static_cast<std::int64_t>(co) * H * W;
                            double* kw = pgk + (static_cast<std::int64_t>(co) * Ci + ci) * 9;
                            for (int dy = 0; dy < 3; ++dy)
                                for (int dx = 0; dx < 3; ++dx) {
                                    const int y0 = std::max(0, 1 - dy), y1 = std::min(H - 1, H - dy);
                                    const int x0 = std::max(0, 1 - dx), x1 = std::min(W - 1, W - dx);
                                    double s = 0.0;
                                    for (int y = y0; y <= y1; ++y) {
                                        const double* irow =
                                            iplane + static_cast<std::int64_t>(y + dy - 1) * W +
                                            (dx - 1);
                                        const double* grow =
                                            gplane + static_cast<std::int64_t>(y) * W;
                                        for (int x = x0; x <= x1; ++x) s += irow[x] * grow[x];
                                    }
                                    kw[dy * 3 + dx] += s;
                                }
                        }
                    accum(nd.in1, std::move(gk));
                }
                break;
            }

            case OpKind::relu: {
                const Tensor& x = nd.saved[0];
                Tensor gx = g.clone();
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < gx.numel(); ++i)
                    if (x.data()[i] <= 0.0) p[i] = 0.0;
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::sigmoid: {
                const Tensor& y = nd.saved[0];
                Tensor gx = g.clone();
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < gx.numel(); ++i) {
                    const double yi = y.data()[i];
                    p[i] *= yi * (1.0 - yi);
                }
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::softmax: {
                const Tensor& y = nd.saved[0];
                const int K = y.dim(0);
                const std::int64_t hw = static_cast<std::int64_t>(y.dim(1)) * y.dim(2);
                Tensor gx = Tensor::zeros(y.shape());
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < hw; ++i) {
                    double s = 0.0;
                    for (int c = 0; c < K; ++c) s += g.data()[c * hw + i] * y.data()[c * hw + i];
                    for (int c = 0; c < K; ++c)
                        p[c * hw + i] = y.data()[c * hw + i] * (g.data()[c * hw + i] - s);
                }
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::log: {
                const Tensor& x = nd.saved[0];
                Tensor gx = g.clone();
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < gx.numel(); ++i) p[i] /= x.data()[i];
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::sqrt: {
                const Tensor& y = nd.saved[0];
                Tensor gx = g.clone();
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < gx.numel(); ++i) p[i] /= 2.0 * y.data()[i];
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::clamp: {
                const Tensor& x = nd.saved[0];
                Tensor gx = g.clone();
                double* p = gx.mutable_data();
                for (std::int64_t i = 0; i < gx.numel(); ++i) {
                    const double xi = x.data()[i];
                    if (!(xi > nd.p0 && xi < nd.p1)) p[i] = 0.0;
                }
                accum(nd.in0, std::move(gx));
                break;
            }

            case OpKind::mean:
                accum(nd.in0, Tensor::full(nd.in_shape,
                                           g.item() / static_cast<double>(numel_of(nd.in_shape))));
                break;

            case OpKind::sum:
                accum(nd.in0, Tensor::full(nd.in_shape, g.item()));
                break;

            case OpKind::broadcast: {
                if (nd.in_shape == nd.shape) {
                    accum(nd.in0, g.clone());
                } else if (numel_of(nd.in_shape) == 1) {
                    double s = 0.0;
                    for (std::int64_t i = 0; i < g.numel(); ++i) s += g.data()[i];
                    accum(nd.in0, Tensor::from({1}, {s}));
                } else { // (C) -> (C,H,W)
                    const int C = nd.in_shape[0];
                    const std::int64_t hw = static_cast<std::int64_t>(nd.shape[1]) * nd.shape[2];
                    Tensor gx = Tensor::zeros({C});
                    for (int c = 0; c < C; ++c) {
                        double s = 0.0;
                        const double* row = g.data() + c * hw;
                        for (std::int64_t i = 0; i < hw; ++i) s += row[i];
                        gx.mutable_data()[c] = s;
                    }
                    accum(nd.in0, std::move(gx));
                }
                break;
            }

            case OpKind::reshape: {
                Tensor gx = Tensor::wrap(nd.in_shape,
                                         std::make_shared<std::vector<double>>(*g.buffer()));
                accum(nd.in0, std::move(gx));
                break;
            }
        }
    }

    GradMap gm;
    for (const auto& [buf, id] : leaf_by_buffer_) {
        const Node& nd = nodes_[static_cast<std::size_t>(id)];
        Tensor& gslot = grads[static_cast<std::size_t>(id)];
        gm.by_buffer_.emplace(buf, gslot.defined() ? gslot : Tensor::zeros(nd.shape));
    }
    return gm;
}

} // namespace ccdiff
