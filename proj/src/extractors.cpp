#include "ccdiff/extractors.hpp"

#include <cmath>

#include "ccdiff/io.hpp"
#include "ccdiff/optim.hpp"

namespace ccdiff {

const char* condition_kind_name(ConditionKind k) {
    switch (k) {
        case ConditionKind::SoftEdge: return "soft_edge";
        case ConditionKind::BinaryEdge: return "binary_edge";
        case ConditionKind::SegMask: return "seg_mask";
        case ConditionKind::DepthMap: return "depth_map";
    }
    return "?";
}

ConditionKind parse_condition_kind(const std::string& s) {
    if (s == "soft_edge") return ConditionKind::SoftEdge;
    if (s == "binary_edge") return ConditionKind::BinaryEdge;
    if (s == "seg_mask") return ConditionKind::SegMask;
    if (s == "depth_map") return ConditionKind::DepthMap;
    throw ConfigError("unknown condition kind: '" + s + "'");
}

LossForm default_loss_form(ConditionKind k) {
    return k == ConditionKind::SegMask ? LossForm::CrossEntropy : LossForm::MSE;
}

double default_lambda(ConditionKind k, bool lineart_flavor) {
    switch (k) {
        case ConditionKind::SegMask: return 0.5;
        case ConditionKind::DepthMap: return 0.5;
        case ConditionKind::SoftEdge: return lineart_flavor ? 10.0 : 1.0;
        case ConditionKind::BinaryEdge: return 1.0;
    }
    return 1.0;
}

RewardSpec make_reward_spec(ConditionKind kind, int K, double lambda, SegExtractorParams seg) {
    if (kind == ConditionKind::SegMask && K < 2)
        throw ConfigError("SegMask needs K >= 2");
    if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
    RewardSpec s;
    s.kind = kind;
    s.num_classes = kind == ConditionKind::SegMask ? K : 0;
    s.loss_form = default_loss_form(kind);
    s.lambda = lambda;
    s.seg = std::move(seg);
    return s;
}

Tensor one_hot(const Tensor& classmap, int K) {
    if (classmap.rank() != 3 || classmap.dim(0) != 1)
        throw ShapeError("one_hot: class map must be (1,H,W), got " + shape_str(classmap.shape()));
    const int H = classmap.dim(1), W = classmap.dim(2);
    Tensor out = Tensor::zeros({K, H, W});
    const double* pc = classmap.data();
    double* po = out.mutable_data();
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (std::int64_t i = 0; i < hw; ++i) {
        const double v = pc[i];
        const int c = static_cast<int>(std::lround(v));
        if (std::abs(v - c) > 1e-9 || c < 0 || c >= K)
            throw Error("one_hot: class value " + std::to_string(v) + " outside [0," +
                        std::to_string(K) + ")");
        po[c * hw + i] = 1.0;
    }
    return out;
}

Tensor cond_to_input(const Tensor& cond, ConditionKind kind, int K) {
    if (kind == ConditionKind::SegMask) return one_hot(cond, K);
    return cond.detached();
}

int cond_input_channels(ConditionKind kind, int K) {
    return kind == ConditionKind::SegMask ? K : 1;
}

namespace {

Tensor make_kernel3(int channels, const double (&w)[9], double scale) {
    Tensor k = Tensor::zeros({1, channels, 3, 3});
    double* p = k.mutable_data();
    for (int c = 0; c < channels; ++c)
        for (int i = 0; i < 9; ++i) p[c * 9 + i] = w[i] * scale / channels;
    return k;
}

constexpr double kGauss[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
constexpr double kSobelX[9] = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
constexpr double kSobelY[9] = {-1, -2, -1, 0, 0, 0, 1, 2, 1};

// Gaussian smooth then Sobel magnitude; shared front end of both edge extractors.
Tensor sobel_magnitude(const Tensor& img) {
    if (img.rank() != 3) throw ShapeError("edge extractor: image must be CxHxW");
    const int C = img.dim(0);
    Tensor smooth = conv2d3x3(img, make_kernel3(C, kGauss, 1.0 / 16.0));
    Tensor gx = conv2d3x3(smooth, make_kernel3(1, kSobelX, 1.0));
    Tensor gy = conv2d3x3(smooth, make_kernel3(1, kSobelY, 1.0));
    return sqrt(add(add(mul(gx, gx), mul(gy, gy)), 1e-12));
}

} // namespace

Tensor extract_soft_edge(const Tensor& img) {
    Tensor m = sobel_magnitude(img);
    return sigmoid(sub(mul(m, 8.0), 4.0));
}

Tensor extract_binary_edge_soft(const Tensor& img, double low, double high) {
    if (!(low >= 0.0 && low < high && high <= 1.0))
        throw ConfigError("extract_binary_edge_soft: need 0 <= low < high <= 1");
    // max single-axis Sobel response on a [-1,1] image is 8; normalize so the
    // thresholds live on a [0,1]-ish scale
    Tensor mn = div(sobel_magnitude(img), 8.0);
    Tensor u = clamp(div(sub(mn, low), high - low), 0.0, 1.0);
    return mul(mul(u, u), sub(3.0, mul(u, 2.0))); // smoothstep
}

Tensor extract_depth(const Tensor& img) {
    if (img.rank() != 3) throw ShapeError("extract_depth: image must be CxHxW");
    const int C = img.dim(0);
    // mild smoothing: blend the image with a binomial blur, then normalize by
    // the in-bounds kernel mass so constant images stay constant under the
    // zero-padded conv (range endpoints map exactly to 0 and 1). A heavier
    // blur drags the map off sharp depth steps.
    Tensor smooth = conv2d3x3(img, make_kernel3(C, kGauss, 1.0 / 16.0));
    Tensor ones = Tensor::full({1, img.dim(1), img.dim(2)}, 1.0);
    Tensor mass = conv2d3x3(ones, make_kernel3(1, kGauss, 1.0 / 16.0));
    Tensor num = add(mul(img, 0.75), mul(smooth, 0.25));
    Tensor den = add(mul(mass, 0.25), 0.75);
    return clamp(div(add(div(num, den), 1.0), 2.0), 0.0, 1.0);
}

Tensor extract_segmentation(const Tensor& img, const SegExtractorParams& params) {
    if (img.rank() != 3) throw ShapeError("extract_segmentation: image must be CxHxW");
    if (params.layers == 1) {
        return add(conv2d3x3(img, params.tensors[0]), params.tensors[1]);
    }
    Tensor h = relu(add(conv2d3x3(img, params.tensors[0]), params.tensors[1]));
    return add(conv2d3x3(h, params.tensors[2]), params.tensors[3]);
}

Tensor reward_extract(const RewardSpec& spec, const Tensor& img) {
    switch (spec.kind) {
        case ConditionKind::SegMask: return extract_segmentation(img, spec.seg);
        case ConditionKind::SoftEdge: return extract_soft_edge(img);
        case ConditionKind::BinaryEdge: return extract_binary_edge_soft(img);
        case ConditionKind::DepthMap: return extract_depth(img);
    }
    throw ConfigError("reward_extract: unknown condition kind");
}

Tensor cross_entropy_loss(const Tensor& logits, const Tensor& classmap) {
    if (logits.rank() != 3)
        throw ShapeError("cross_entropy_loss: logits must be (K,H,W)");
    const int K = logits.dim(0);
    if (classmap.rank() != 3 || classmap.dim(1) != logits.dim(1) ||
        classmap.dim(2) != logits.dim(2))
        throw ShapeError("cross_entropy_loss: class map " + shape_str(classmap.shape()) +
                         " vs logits " + shape_str(logits.shape()));
    Tensor oh = one_hot(classmap, K);
    const double hw = static_cast<double>(logits.dim(1)) * logits.dim(2);
    return mul(sum(mul(oh, log(softmax(logits)))), -1.0 / hw);
}

Tensor consistency_loss(const RewardSpec& spec, const Tensor& c_v, const Tensor& c_v_hat) {
    if (spec.loss_form == LossForm::CrossEntropy)
        return cross_entropy_loss(c_v_hat, c_v);
    if (!(c_v.shape() == c_v_hat.shape()))
        throw ShapeError("consistency_loss: " + shape_str(c_v.shape()) + " vs " +
                         shape_str(c_v_hat.shape()));
    Tensor d = sub(c_v_hat, c_v);
    return mean(mul(d, d));
}

SegExtractorParams train_seg_extractor(const std::vector<Tensor>& images,
                                       const std::vector<Tensor>& classmaps, int K, int layers,
                                       std::uint64_t seed, int iters, int batch, double lr) {
    if (images.empty() || images.size() != classmaps.size())
        throw Error("train_seg_extractor: empty or mismatched inputs");
    if (layers != 1 && layers != 2)
        throw ConfigError("train_seg_extractor: layers must be 1 or 2");

    SegExtractorParams p;
    p.layers = layers;
    p.K = K;
    RngStream rng(rng_key(seed, {rngtag::init_weights, static_cast<std::uint64_t>(layers)}));
    if (layers == 1) {
        p.tensors = {Tensor::randn({K, 1, 3, 3}, rng, std::sqrt(2.0 / 9.0), true),
                     Tensor::zeros({K}, true)};
    } else {
        p.tensors = {Tensor::randn({p.hidden, 1, 3, 3}, rng, std::sqrt(2.0 / 9.0), true),
                     Tensor::zeros({p.hidden}, true),
                     Tensor::randn({K, p.hidden, 3, 3}, rng, std::sqrt(2.0 / (9.0 * p.hidden)), true),
                     Tensor::zeros({K}, true)};
    }

    AdamConfig ac;
    ac.lr = lr;
    Adam opt(ac);
    std::vector<Tensor*> ptrs;
    for (Tensor& t : p.tensors) ptrs.push_back(&t);

    const int n = static_cast<int>(images.size());
    for (int it = 0; it < iters; ++it) {
        RngStream bs(rng_key(seed, {rngtag::train_batch, static_cast<std::uint64_t>(it)}));
        TapeScope scope;
        Tensor loss;
        for (int b = 0; b < batch; ++b) {
            const int idx = bs.uniform_int(0, n - 1);
            Tensor l = cross_entropy_loss(extract_segmentation(images[static_cast<std::size_t>(idx)], p),
                                          classmaps[static_cast<std::size_t>(idx)]);
            loss = b == 0 ? l : add(loss, l);
        }
        loss = mul(loss, 1.0 / batch);
        GradMap grads = scope.tape.backward(loss);
        opt.step(ptrs, grads);
    }
    for (Tensor& t : p.tensors) t = t.detached(); // frozen from here on
    return p;
}

void save_seg_extractor(const std::string& path, const SegExtractorParams& p) {
    std::vector<std::pair<std::string, Tensor>> named;
    named.emplace_back("seg.meta",
                       Tensor::from({3}, {static_cast<double>(p.layers),
                                          static_cast<double>(p.K),
                                          static_cast<double>(p.hidden)}));
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        named.emplace_back("seg.t" + std::to_string(i), p.tensors[i].detached());
    save_checkpoint(path, named);
}

SegExtractorParams load_seg_extractor(const std::string& path) {
    auto named = load_checkpoint(path);
    if (named.empty() || named[0].first != "seg.meta")
        throw IoError("not a segmentation extractor checkpoint: " + path);
    SegExtractorParams p;
    p.layers = static_cast<int>(named[0].second.data()[0]);
    p.K = static_cast<int>(named[0].second.data()[1]);
    p.hidden = static_cast<int>(named[0].second.data()[2]);
    for (std::size_t i = 1; i < named.size(); ++i) p.tensors.push_back(named[i].second);
    return p;
}

} // namespace ccdiff
