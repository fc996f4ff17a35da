#include "ccdiff/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "ccdiff/io.hpp"

namespace ccdiff {

namespace {

void check_same_nonempty(const Tensor& a, const Tensor& b, const char* who) {
    if (!a.defined() || !b.defined() || a.numel() == 0)
        throw ConfigError(std::string(who) + ": empty input");
    if (a.shape() != b.shape())
        throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

int class_at(const Tensor& t, std::int64_t i, int K, const char* who) {
    const double v = t.data()[i];
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-6 || r < 0 || r >= K)
        throw ConfigError(std::string(who) + ": class value " + std::to_string(v) +
                          " not an integer in [0," + std::to_string(K) + ")");
    return static_cast<int>(r);
}

std::vector<unsigned char> binarize(const Tensor& t) {
    std::vector<unsigned char> out(static_cast<std::size_t>(t.numel()));
    for (std::int64_t i = 0; i < t.numel(); ++i) out[static_cast<std::size_t>(i)] = t.data()[i] >= 0.5;
    return out;
}

std::vector<unsigned char> dilate8(const std::vector<unsigned char>& m, int H, int W) {
    std::vector<unsigned char> out(m.size(), 0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (!m[static_cast<std::size_t>(y) * W + x]) continue;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    out[static_cast<std::size_t>(yy) * W + xx] = 1;
                }
        }
    return out;
}

void image_hw(const Tensor& t, int& H, int& W, const char* who) {
    if (t.rank() == 2) {
        H = t.dim(0);
        W = t.dim(1);
    } else if (t.rank() == 3 && t.dim(0) == 1) {
        H = t.dim(1);
        W = t.dim(2);
    } else {
        throw ShapeError(std::string(who) + ": expected (H,W) or (1,H,W), got " +
                         shape_str(t.shape()));
    }
}

Tensor clamp_plain(const Tensor& t, double lo, double hi) {
    Tensor out = Tensor::zeros(t.shape());
    for (std::int64_t i = 0; i < t.numel(); ++i)
        out.mutable_data()[i] = std::min(hi, std::max(lo, t.data()[i]));
    return out;
}

} // namespace

double miou(const Tensor& pred, const Tensor& gt, int K) {
    check_same_nonempty(pred, gt, "miou");
    if (K < 2) throw ConfigError("miou: K must be >= 2");
    std::vector<std::int64_t> inter(static_cast<std::size_t>(K), 0),
        in_p(static_cast<std::size_t>(K), 0), in_g(static_cast<std::size_t>(K), 0);
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const int p = class_at(pred, i, K, "miou");
        const int g = class_at(gt, i, K, "miou");
        ++in_p[static_cast<std::size_t>(p)];
        ++in_g[static_cast<std::size_t>(g)];
        if (p == g) ++inter[static_cast<std::size_t>(p)];
    }
    double sum = 0.0;
    int present = 0;
    for (int c = 0; c < K; ++c) {
        const std::int64_t uni = in_p[static_cast<std::size_t>(c)] +
                                 in_g[static_cast<std::size_t>(c)] -
                                 inter[static_cast<std::size_t>(c)];
        if (uni == 0) continue; // class absent from both maps
        sum += static_cast<double>(inter[static_cast<std::size_t>(c)]) / static_cast<double>(uni);
        ++present;
    }
    return sum / present;
}

double f1_edge(const Tensor& pred, const Tensor& gt, bool tolerance_1px) {
    check_same_nonempty(pred, gt, "f1_edge");
    const std::vector<unsigned char> p = binarize(pred), g = binarize(gt);
    if (!tolerance_1px) {
        std::int64_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (p[i] && g[i]) ++tp;
            else if (p[i]) ++fp;
            else if (g[i]) ++fn;
        }
        if (tp + fp + fn == 0) return 1.0;
        return 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    }
    int H = 0, W = 0;
    image_hw(pred, H, W, "f1_edge");
    std::int64_t np = 0, ng = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        np += p[i];
        ng += g[i];
    }
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    const std::vector<unsigned char> gd = dilate8(g, H, W), pd = dilate8(p, H, W);
    std::int64_t tp_p = 0, tp_r = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] && gd[i]) ++tp_p;
        if (g[i] && pd[i]) ++tp_r;
    }
    const double prec = static_cast<double>(tp_p) / np;
    const double rec = static_cast<double>(tp_r) / ng;
    if (prec + rec == 0.0) return 0.0;
    return 2.0 * prec * rec / (prec + rec);
}

double ssim(const Tensor& a, const Tensor& b) {
    check_same_nonempty(a, b, "ssim");
    int H = 0, W = 0;
    image_hw(a, H, W, "ssim");
    constexpr int win = 8;
    if (H < win || W < win)
        throw ShapeError("ssim: image " + std::to_string(H) + "x" + std::to_string(W) +
                         " smaller than the 8x8 window");
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    const double* pa = a.data();
    const double* pb = b.data();
    double total = 0.0;
    int nwin = 0;
    for (int y0 = 0; y0 + win <= H; ++y0)
        for (int x0 = 0; x0 + win <= W; ++x0) {
            double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
            for (int y = y0; y < y0 + win; ++y)
                for (int x = x0; x < x0 + win; ++x) {
                    const double va = pa[static_cast<std::size_t>(y) * W + x];
                    const double vb = pb[static_cast<std::size_t>(y) * W + x];
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            constexpr double n = win * win;
            const double ma = sa / n, mb = sb / n;
            const double va = saa / n - ma * ma;
            const double vb = sbb / n - mb * mb;
            const double cab = sab / n - ma * mb;
            total += ((2 * ma * mb + C1) * (2 * cab + C2)) /
                     ((ma * ma + mb * mb + C1) * (va + vb + C2));
            ++nwin;
        }
    return total / nwin;
}

double rmse(const Tensor& a, const Tensor& b) {
    check_same_nonempty(a, b, "rmse");
    double s = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(a.numel()));
}

Tensor argmax_channels(const Tensor& logits) {
    if (logits.rank() != 3)
        throw ShapeError("argmax_channels: expected (K,H,W), got " + shape_str(logits.shape()));
    const int K = logits.dim(0), H = logits.dim(1), W = logits.dim(2);
    Tensor out = Tensor::zeros({1, H, W});
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    for (std::int64_t i = 0; i < hw; ++i) {
        int best = 0;
        double bv = logits.data()[i];
        for (int c = 1; c < K; ++c) {
            const double v = logits.data()[c * hw + i];
            if (v > bv) {
                bv = v;
                best = c;
            }
        }
        out.mutable_data()[i] = static_cast<double>(best);
    }
    return out;
}

const char* metric_name_for(ConditionKind kind) {
    switch (kind) {
        case ConditionKind::SegMask: return "miou";
        case ConditionKind::BinaryEdge: return "f1";
        case ConditionKind::SoftEdge: return "ssim";
        case ConditionKind::DepthMap: return "rmse";
    }
    return "?";
}

bool metric_higher_better(ConditionKind kind) { return kind != ConditionKind::DepthMap; }

double condition_score(const Tensor& image, const ConditionedSample& s, const EvalSpec& spec) {
    NoGradScope ng;
    const Tensor img = clamp_plain(image, -1.0, 1.0);
    switch (spec.kind) {
        case ConditionKind::SegMask: {
            const Tensor pred = argmax_channels(extract_segmentation(img, spec.seg));
            return miou(pred, s.cond, spec.num_classes);
        }
        case ConditionKind::BinaryEdge:
            return f1_edge(extract_binary_edge_soft(img), s.cond);
        case ConditionKind::SoftEdge:
            return ssim(extract_soft_edge(img), s.cond);
        case ConditionKind::DepthMap:
            return rmse(extract_depth(img), s.cond);
    }
    throw ConfigError("condition_score: unknown kind");
}

namespace {

std::uint64_t sample_content_hash(const ConditionedSample& s) {
    std::string bytes;
    put_u32(bytes, s.caption_id);
    for (std::int64_t i = 0; i < s.cond.numel(); ++i) put_f64(bytes, s.cond.data()[i]);
    return fnv1a64(bytes);
}

} // namespace

MetricReport evaluate_generator(const Generator& gen, const Dataset& data,
                                const std::vector<int>& indices, const EvalSpec& spec, int n,
                                std::uint64_t seed) {
    if (n <= 0) throw ConfigError("evaluate: n must be >= 1");
    if (n > static_cast<int>(indices.size()))
        throw ConfigError("evaluate: n=" + std::to_string(n) + " exceeds the " +
                          std::to_string(indices.size()) + " available samples");
    std::vector<double> scores;
    scores.reserve(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
        const int idx = indices[static_cast<std::size_t>(j)];
        if (idx < 0 || idx >= static_cast<int>(data.samples.size()))
            throw ConfigError("evaluate: index " + std::to_string(idx) + " out of range");
        const ConditionedSample& s = data.samples[static_cast<std::size_t>(idx)];
        const std::uint64_t sseed = rng_key(seed, {rngtag::misc, sample_content_hash(s)});
        scores.push_back(condition_score(gen(s, sseed), s, spec));
    }
    // sorted reduction keeps the mean bit-identical under index permutations
    std::sort(scores.begin(), scores.end());
    double total = 0.0;
    for (double v : scores) total += v;
    MetricReport r;
    r.kind = spec.kind;
    r.metric = metric_name_for(spec.kind);
    r.value = total / n;
    r.n_samples = n;
    r.seed = seed;
    r.higher_better = metric_higher_better(spec.kind);
    return r;
}

MetricReport evaluate_controllability(const DenoiserParams& params, const NoiseSchedule& sched,
                                      const Dataset& data, const std::vector<int>& indices,
                                      const EvalSpec& spec, int n, std::uint64_t seed) {
    const Generator gen = [&](const ConditionedSample& s, std::uint64_t sseed) {
        const Tensor c_v = cond_to_input(s.cond, spec.kind, spec.num_classes);
        const Tensor c_t = caption_embedding(params, static_cast<int>(s.caption_id));
        const DenoiseFn fn = [&](const Tensor& x, int t, const Tensor& ct, const Tensor& cv) {
            return denoiser_forward(params, x, t, ct, cv);
        };
        return sample_full(fn, c_v, c_t, sched, sseed);
    };
    return evaluate_generator(gen, data, indices, spec, n, seed);
}

DownstreamResult train_downstream_segmenter(const std::vector<Tensor>& train_images,
                                            const std::vector<Tensor>& train_masks,
                                            const std::vector<Tensor>& test_images,
                                            const std::vector<Tensor>& test_masks, int K,
                                            std::uint64_t seed, int iters, int batch, double lr) {
    if (test_images.empty() || test_images.size() != test_masks.size())
        throw ConfigError("train_downstream_segmenter: bad test set");
    const SegExtractorParams seg =
        train_seg_extractor(train_images, train_masks, K, 2, seed, iters, batch, lr);
    NoGradScope ng;
    std::int64_t correct = 0, pixels = 0;
    double iou_sum = 0.0;
    for (std::size_t i = 0; i < test_images.size(); ++i) {
        const Tensor pred = argmax_channels(extract_segmentation(test_images[i], seg));
        const Tensor& gt = test_masks[i];
        if (pred.shape() != gt.shape())
            throw ShapeError("train_downstream_segmenter: mask shape mismatch");
        for (std::int64_t j = 0; j < pred.numel(); ++j)
            correct += std::lround(pred.data()[j]) == std::lround(gt.data()[j]);
        pixels += pred.numel();
        iou_sum += miou(pred, gt, K);
    }
    DownstreamResult r;
    r.accuracy = static_cast<double>(correct) / static_cast<double>(pixels);
    r.miou_value = iou_sum / static_cast<double>(test_images.size());
    return r;
}

} // namespace ccdiff
