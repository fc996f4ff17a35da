#include "ccdiff/denoiser.hpp"

#include <cmath>

#include "ccdiff/io.hpp"

namespace ccdiff {

Tensor TimestepEmbedding::operator()(int t) const {
    Tensor e = Tensor::zeros({dim});
    double* p = e.mutable_data();
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        p[2 * i] = std::sin(t * freq);
        p[2 * i + 1] = std::cos(t * freq);
    }
    return e;
}

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::base_named() {
    return {
        {"base.caption_table", &caption_table},
        {"base.enc1.w", &enc1_w}, {"base.enc1.b", &enc1_b},
        {"base.enc1.tw", &enc1_tw}, {"base.enc1.cw", &enc1_cw},
        {"base.enc2.w", &enc2_w}, {"base.enc2.b", &enc2_b},
        {"base.enc2.tw", &enc2_tw}, {"base.enc2.cw", &enc2_cw},
        {"base.dec.w", &dec_w}, {"base.dec.b", &dec_b},
        {"base.dec.tw", &dec_tw}, {"base.dec.cw", &dec_cw},
        {"base.out.w", &out_w}, {"base.out.b", &out_b},
    };
}

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::control_named() {
    return {
        {"control.c1.w", &c1_w}, {"control.c1.b", &c1_b},
        {"control.c2.w", &c2_w}, {"control.c2.b", &c2_b},
        {"zero.w", &zp_w}, {"zero.b", &zp_b},
    };
}

std::vector<std::pair<std::string, Tensor*>> DenoiserParams::all_named() {
    auto v = base_named();
    for (auto& e : control_named()) v.push_back(e);
    return v;
}

std::vector<std::pair<std::string, const Tensor*>> DenoiserParams::all_named() const {
    auto v = const_cast<DenoiserParams*>(this)->all_named();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(v.size());
    for (auto& [n, t] : v) out.emplace_back(n, t);
    return out;
}

std::vector<Tensor*> DenoiserParams::trainable() {
    std::vector<Tensor*> out;
    for (auto& [n, t] : all_named())
        if (t->requires_grad()) out.push_back(t);
    return out;
}

DenoiserParams init_denoiser(int c_v_channels, std::uint64_t seed) {
    if (c_v_channels < 1) throw ShapeError("init_denoiser: c_v_channels must be >= 1");
    RngStream rng(rng_key(seed, {rngtag::init_weights}));
    auto conv_w = [&rng](int co, int ci) {
        return Tensor::randn({co, ci, 3, 3}, rng, std::sqrt(2.0 / (ci * 9)), true);
    };
    auto lin_w = [&rng](int co, int ci) {
        return Tensor::randn({co, ci}, rng, std::sqrt(1.0 / ci), true);
    };
    auto bias = [](int c) { return Tensor::zeros({c}, true); };

    DenoiserParams p;
    p.caption_table = Tensor::randn({kCaptionVocab, kCtDim}, rng, 0.5, true);
    p.enc1_w = conv_w(kWidth1, 1);
    p.enc1_b = bias(kWidth1);
    p.enc1_tw = lin_w(kWidth1, kTembDim);
    p.enc1_cw = lin_w(kWidth1, kCtDim);
    p.enc2_w = conv_w(kWidth2, kWidth1);
    p.enc2_b = bias(kWidth2);
    p.enc2_tw = lin_w(kWidth2, kTembDim);
    p.enc2_cw = lin_w(kWidth2, kCtDim);
    p.dec_w = conv_w(kWidth3, kWidth2);
    p.dec_b = bias(kWidth3);
    p.dec_tw = lin_w(kWidth3, kTembDim);
    p.dec_cw = lin_w(kWidth3, kCtDim);
    p.out_w = conv_w(1, kWidth3);
    p.out_b = bias(1);

    p.c1_w = conv_w(kWidth1, c_v_channels);
    p.c1_b = bias(kWidth1);
    p.c2_w = conv_w(kWidth2, kWidth1);
    p.c2_b = bias(kWidth2);

    p.zp_w = Tensor::zeros({kWidth2, kWidth2}, true);
    p.zp_b = Tensor::zeros({kWidth2}, true);
    return p;
}

DenoiserParams freeze_base(const DenoiserParams& p) {
    DenoiserParams q = p;
    for (auto& [name, t] : q.base_named()) *t = t->detached();
    for (auto& [name, t] : q.control_named()) *t = t->variable();
    return q;
}

Tensor caption_embedding(const DenoiserParams& p, int caption_id) {
    const int vocab = p.caption_table.dim(0);
    if (caption_id < 0 || caption_id >= vocab)
        throw ShapeError("caption_embedding: id " + std::to_string(caption_id) +
                         " outside vocab " + std::to_string(vocab));
    Tensor onehot = Tensor::zeros({1, vocab});
    onehot.mutable_data()[caption_id] = 1.0;
    return reshape(matmul(onehot, p.caption_table), {p.caption_table.dim(1)});
}

namespace {

// conv -> +bias -> +W_t temb -> +W_c c_t -> relu
Tensor block(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& tw,
             const Tensor& cw, const Tensor& temb, const Tensor& ct) {
    Tensor h = add(conv2d3x3(x, w), b);
    const int c = w.dim(0);
    h = add(h, reshape(matmul(tw, reshape(temb, {temb.dim(0), 1})), {c}));
    h = add(h, reshape(matmul(cw, reshape(ct, {ct.dim(0), 1})), {c}));
    return relu(h);
}

} // namespace

Tensor denoiser_forward(const DenoiserParams& p, const Tensor& x_t, int t, const Tensor& c_t,
                        const Tensor& c_v) {
    if (x_t.rank() != 3 || x_t.dim(0) != p.enc1_w.dim(1))
        throw ShapeError("denoiser_forward: x_t " + shape_str(x_t.shape()) + " expects " +
                         std::to_string(p.enc1_w.dim(1)) + " channels");
    if (c_v.rank() != 3 || c_v.dim(0) != p.cv_channels() || c_v.dim(1) != x_t.dim(1) ||
        c_v.dim(2) != x_t.dim(2))
        throw ShapeError("denoiser_forward: c_v " + shape_str(c_v.shape()) +
                         " incompatible with x_t " + shape_str(x_t.shape()));
    if (c_t.rank() != 1 || c_t.dim(0) != p.enc1_cw.dim(1))
        throw ShapeError("denoiser_forward: c_t " + shape_str(c_t.shape()) + " expects dim " +
                         std::to_string(p.enc1_cw.dim(1)));

    const Tensor temb = TimestepEmbedding{}(t);
    const int H = x_t.dim(1), W = x_t.dim(2);

    Tensor h1 = block(x_t, p.enc1_w, p.enc1_b, p.enc1_tw, p.enc1_cw, temb, c_t);
    Tensor h2 = block(h1, p.enc2_w, p.enc2_b, p.enc2_tw, p.enc2_cw, temb, c_t);

    Tensor g1 = relu(add(conv2d3x3(c_v, p.c1_w), p.c1_b));
    Tensor g2 = relu(add(conv2d3x3(g1, p.c2_w), p.c2_b));
    Tensor zp = add(reshape(matmul(p.zp_w, reshape(g2, {kWidth2, H * W})), {kWidth2, H, W}),
                    p.zp_b);

    Tensor h3 = block(add(h2, zp), p.dec_w, p.dec_b, p.dec_tw, p.dec_cw, temb, c_t);
    return add(conv2d3x3(h3, p.out_w), p.out_b);
}

void save_denoiser(const std::string& path, const DenoiserParams& p) {
    std::vector<std::pair<std::string, Tensor>> named;
    for (const auto& [n, t] : p.all_named()) named.emplace_back(n, t->detached());
    save_checkpoint(path, named);
}

DenoiserParams load_denoiser(const std::string& path) {
    auto named = load_checkpoint(path);
    // c_v channel count comes from the stored control conv shape
    int cv = -1;
    for (const auto& [n, t] : named)
        if (n == "control.c1.w") cv = t.dim(1);
    if (cv < 1) throw IoError("checkpoint missing control.c1.w: " + path);

    DenoiserParams p = init_denoiser(cv, 0);
    auto slots = p.all_named();
    if (named.size() != slots.size())
        throw IoError("checkpoint tensor count mismatch: " + path);
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (named[i].first != slots[i].first)
            throw IoError("checkpoint tensor order mismatch at '" + named[i].first +
                          "' (expected '" + slots[i].first + "')");
        if (!(named[i].second.shape() == slots[i].second->shape()))
            throw IoError("checkpoint shape mismatch for '" + named[i].first + "'");
        *slots[i].second = named[i].second.variable();
    }
    return p;
}

} // namespace ccdiff
