#include "ccdiff/data.hpp"

#include <algorithm>
#include <cmath>

#include "ccdiff/io.hpp"

namespace ccdiff {

namespace {

// fixed, well-separated shape intensities for SegMask scenes (background = 0)
constexpr double kClassIntensity[] = {-0.7, 0.7, -0.35, 0.35, -0.9, 0.9, -0.2};
constexpr int kMaxSegClasses = 1 + static_cast<int>(sizeof(kClassIntensity) / sizeof(double));

bool point_in_shape(const SceneSpec::ShapeSpec& s, double x, double y) {
    switch (s.type) {
        case 0: // rectangle
            return std::abs(x - s.cx) <= s.rx && std::abs(y - s.cy) <= s.ry;
        case 1: { // circle
            const double dx = x - s.cx, dy = y - s.cy;
            return dx * dx + dy * dy <= s.rx * s.rx;
        }
        default: { // triangle: apex up, base at cy + 0.8 r
            const double ax = s.cx, ay = s.cy - s.rx;
            const double bx = s.cx - s.rx, by = s.cy + 0.8 * s.rx;
            const double cx2 = s.cx + s.rx, cy2 = s.cy + 0.8 * s.rx;
            auto cross = [](double ox, double oy, double px, double py, double qx, double qy) {
                return (px - ox) * (qy - oy) - (py - oy) * (qx - ox);
            };
            const double d1 = cross(ax, ay, bx, by, x, y);
            const double d2 = cross(bx, by, cx2, cy2, x, y);
            const double d3 = cross(cx2, cy2, ax, ay, x, y);
            const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
            const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
            return !(neg && pos);
        }
    }
}

// 3x3 binomial blur with zero padding, plain loops (rasterizer, not extractor)
std::vector<double> blur3(const std::vector<double>& in, int H, int W) {
    static const double k[9] = {1, 2, 1, 2, 4, 2, 1, 2, 1};
    std::vector<double> out(in.size(), 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double s = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                    s += in[static_cast<std::size_t>(yy) * W + xx] * k[(dy + 1) * 3 + (dx + 1)];
                }
            out[static_cast<std::size_t>(y) * W + x] = s / 16.0;
        }
    return out;
}

std::uint32_t caption_of_classes(std::vector<int> classes) {
    std::sort(classes.begin(), classes.end());
    std::uint64_t h = 0;
    for (int c : classes) h = h * 31 + static_cast<std::uint64_t>(c);
    return static_cast<std::uint32_t>(h % 8);
}

constexpr std::uint32_t kind_tag(ConditionKind k) {
    switch (k) {
        case ConditionKind::SoftEdge: return 0;
        case ConditionKind::BinaryEdge: return 1;
        case ConditionKind::SegMask: return 2;
        case ConditionKind::DepthMap: return 3;
    }
    return 0;
}

ConditionKind kind_from_tag(std::uint32_t t) {
    switch (t) {
        case 0: return ConditionKind::SoftEdge;
        case 1: return ConditionKind::BinaryEdge;
        case 2: return ConditionKind::SegMask;
        case 3: return ConditionKind::DepthMap;
    }
    throw IoError("bad condition kind tag " + std::to_string(t));
}

} // namespace

SceneSpec make_scene(int i, int H, int W, ConditionKind kind, int K, std::uint64_t seed) {
    RngStream rng(rng_key(seed, {rngtag::data_scene, static_cast<std::uint64_t>(i)}));
    SceneSpec sc;
    sc.H = H;
    sc.W = W;
    const int nshapes = rng.uniform_int(2, 3);

    // depth ranks: a seeded permutation of 0..nshapes-1
    std::vector<int> ranks(static_cast<std::size_t>(nshapes));
    for (int j = 0; j < nshapes; ++j) ranks[static_cast<std::size_t>(j)] = j;
    for (int j = nshapes - 1; j > 0; --j)
        std::swap(ranks[static_cast<std::size_t>(j)],
                  ranks[static_cast<std::size_t>(rng.uniform_int(0, j))]);

    for (int j = 0; j < nshapes; ++j) {
        SceneSpec::ShapeSpec sh;
        sh.type = rng.uniform_int(0, 2);
        // round-robin on the first shape keeps every class represented
        sh.class_id = j == 0 ? 1 + (i % (K - 1)) : rng.uniform_int(1, K - 1);
        sh.depth_rank = ranks[static_cast<std::size_t>(j)];

        const double rmin = W / 6.0, rmax = W / 3.5;
        sh.rx = rmin + (rmax - rmin) * rng.uniform();
        sh.ry = sh.type == 0 ? rmin + (rmax - rmin) * rng.uniform() : sh.rx;
        const double margin_x = sh.rx + 1.0, margin_y = sh.ry + 1.0;
        sh.cx = margin_x + (W - 1 - 2 * margin_x) * rng.uniform();
        sh.cy = margin_y + (H - 1 - 2 * margin_y) * rng.uniform();

        if (kind == ConditionKind::SegMask) {
            sh.intensity = kClassIntensity[sh.class_id - 1] + (rng.uniform() - 0.5) * 0.1;
        } else {
            // nearer shapes render brighter; background stays at 0 so the
            // zero-padded extractors see no frame at the canvas edge
            const double depth = 0.55 + 0.4 * (sh.depth_rank + 1.0) / nshapes;
            sh.intensity = 2.0 * depth - 1.0;
        }
        sc.shapes.push_back(sh);
    }
    return sc;
}

ConditionedSample rasterize_scene(const SceneSpec& scene, ConditionKind kind, int K) {
    const int H = scene.H, W = scene.W;
    const std::size_t hw = static_cast<std::size_t>(H) * W;

    // painter's algorithm over depth ranks
    std::vector<const SceneSpec::ShapeSpec*> order;
    for (const auto& s : scene.shapes) order.push_back(&s);
    std::sort(order.begin(), order.end(),
              [](const SceneSpec::ShapeSpec* a, const SceneSpec::ShapeSpec* b) {
                  return a->depth_rank < b->depth_rank;
              });

    std::vector<int> owner(hw, -1);
    for (std::size_t j = 0; j < order.size(); ++j)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                if (point_in_shape(*order[j], x, y))
                    owner[static_cast<std::size_t>(y) * W + x] = static_cast<int>(j);

    ConditionedSample out;
    Tensor img = Tensor::zeros({1, H, W});
    double* pi = img.mutable_data();
    for (std::size_t i = 0; i < hw; ++i)
        pi[i] = owner[i] < 0 ? 0.0 : order[static_cast<std::size_t>(owner[i])]->intensity;
    // SegMask background uses its own intensity slot (exact 0 is the default)
    out.x0 = img;

    switch (kind) {
        case ConditionKind::SegMask: {
            Tensor cm = Tensor::zeros({1, H, W});
            double* pc = cm.mutable_data();
            for (std::size_t i = 0; i < hw; ++i)
                pc[i] = owner[i] < 0
                            ? 0.0
                            : static_cast<double>(order[static_cast<std::size_t>(owner[i])]->class_id);
            (void)K;
            out.cond = cm;
            break;
        }
        case ConditionKind::DepthMap: {
            Tensor dm = Tensor::zeros({1, H, W});
            double* pd = dm.mutable_data();
            for (std::size_t i = 0; i < hw; ++i) pd[i] = (pi[i] + 1.0) / 2.0;
            out.cond = dm;
            break;
        }
        case ConditionKind::BinaryEdge:
        case ConditionKind::SoftEdge: {
            std::vector<double> border(hw, 0.0);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const int o = owner[static_cast<std::size_t>(y) * W + x];
                    const int nb[4][2] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
                    for (auto& d : nb) {
                        const int yy = y + d[1], xx = x + d[0];
                        if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
                        if (owner[static_cast<std::size_t>(yy) * W + xx] != o) {
                            border[static_cast<std::size_t>(y) * W + x] = 1.0;
                            break;
                        }
                    }
                }
            Tensor bm = Tensor::zeros({1, H, W});
            if (kind == ConditionKind::BinaryEdge) {
                std::copy(border.begin(), border.end(), bm.mutable_data());
            } else {
                const std::vector<double> soft = blur3(border, H, W);
                std::copy(soft.begin(), soft.end(), bm.mutable_data());
            }
            out.cond = bm;
            break;
        }
    }

    std::vector<int> classes;
    for (const auto& s : scene.shapes) classes.push_back(s.class_id);
    out.caption_id = caption_of_classes(classes);
    return out;
}

Dataset generate_dataset(int n, int H, int W, ConditionKind kind, int K, std::uint64_t seed) {
    if (n < 1) throw ConfigError("generate_dataset: n must be >= 1");
    if (H < 16 || W < 16) throw ConfigError("generate_dataset: H and W must be >= 16");
    if (K < 2) throw ConfigError("generate_dataset: K must be >= 2");
    if (K > kMaxSegClasses)
        throw ConfigError("generate_dataset: K exceeds the distinct intensity table (max " +
                          std::to_string(kMaxSegClasses) + ")");
    Dataset d;
    d.kind = kind;
    d.K = K;
    d.H = H;
    d.W = W;
    d.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        d.samples.push_back(rasterize_scene(make_scene(i, H, W, kind, K, seed), kind, K));
    return d;
}

SplitIndices split(const Dataset& d, const std::vector<double>& fractions, std::uint64_t seed) {
    if (fractions.size() != 3) throw ConfigError("split: expected 3 fractions (train/val/test)");
    double s = 0.0;
    for (double f : fractions) {
        if (f < 0.0) throw ConfigError("split: negative fraction");
        s += f;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("split: fractions must sum to 1");

    const int n = static_cast<int>(d.samples.size());
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    RngStream rng(rng_key(seed, {rngtag::misc, 1}));
    for (int i = n - 1; i > 0; --i)
        std::swap(idx[static_cast<std::size_t>(i)],
                  idx[static_cast<std::size_t>(rng.uniform_int(0, i))]);

    const int b1 = static_cast<int>(std::floor(fractions[0] * n + 1e-9));
    const int b2 = static_cast<int>(std::floor((fractions[0] + fractions[1]) * n + 1e-9));
    SplitIndices out;
    out.train.assign(idx.begin(), idx.begin() + b1);
    out.val.assign(idx.begin() + b1, idx.begin() + b2);
    out.test.assign(idx.begin() + b2, idx.end());
    return out;
}

void write_dataset(const std::string& path, const Dataset& d) {
    std::string buf = "CNDS";
    put_u32(buf, 1); // version
    put_u32(buf, static_cast<std::uint32_t>(d.samples.size()));
    put_u32(buf, static_cast<std::uint32_t>(d.H));
    put_u32(buf, static_cast<std::uint32_t>(d.W));
    put_u32(buf, kind_tag(d.kind));
    put_u32(buf, static_cast<std::uint32_t>(d.K));
    for (const auto& s : d.samples) {
        put_u32(buf, s.caption_id);
        for (std::int64_t i = 0; i < s.x0.numel(); ++i) put_f64(buf, s.x0.data()[i]);
        if (d.kind == ConditionKind::SegMask) {
            for (std::int64_t i = 0; i < s.cond.numel(); ++i)
                buf.push_back(static_cast<char>(static_cast<unsigned char>(
                    static_cast<int>(std::lround(s.cond.data()[i])))));
        } else {
            for (std::int64_t i = 0; i < s.cond.numel(); ++i) put_f64(buf, s.cond.data()[i]);
        }
    }
    atomic_write_file(path, buf);
}

Dataset read_dataset(const std::string& path) {
    const std::string buf = read_file(path);
    if (buf.size() < 4 || buf.compare(0, 4, "CNDS") != 0)
        throw IoError("not a dataset file (bad magic): " + path);
    std::size_t off = 4;
    const std::uint32_t version = get_u32(buf, off);
    if (version != 1) throw IoError("unsupported dataset version " + std::to_string(version));
    const std::uint32_t n = get_u32(buf, off);
    Dataset d;
    d.H = static_cast<int>(get_u32(buf, off));
    d.W = static_cast<int>(get_u32(buf, off));
    d.kind = kind_from_tag(get_u32(buf, off));
    d.K = static_cast<int>(get_u32(buf, off));
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    d.samples.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        ConditionedSample s;
        s.caption_id = get_u32(buf, off);
        Tensor img = Tensor::zeros({1, d.H, d.W});
        for (std::size_t j = 0; j < hw; ++j) img.mutable_data()[j] = get_f64(buf, off);
        s.x0 = img;
        Tensor cond = Tensor::zeros({1, d.H, d.W});
        if (d.kind == ConditionKind::SegMask) {
            if (off + hw > buf.size()) throw IoError("truncated dataset (classes)");
            for (std::size_t j = 0; j < hw; ++j)
                cond.mutable_data()[j] =
                    static_cast<double>(static_cast<unsigned char>(buf[off + j]));
            off += hw;
        } else {
            for (std::size_t j = 0; j < hw; ++j) cond.mutable_data()[j] = get_f64(buf, off);
        }
        s.cond = cond;
        d.samples.push_back(std::move(s));
    }
    return d;
}

std::string make_manifest(const Dataset& d, std::uint64_t seed,
                          const std::vector<double>& fractions, const SplitIndices& idx) {
    auto hash_ids = [](const std::vector<int>& v) {
        std::string bytes;
        for (int i : v) put_u32(bytes, static_cast<std::uint32_t>(i));
        return fnv1a64(bytes);
    };
    std::string m;
    m += "format=cnds-manifest-1\n";
    m += "seed=" + std::to_string(seed) + "\n";
    m += "n=" + std::to_string(d.samples.size()) + "\n";
    m += "H=" + std::to_string(d.H) + "\n";
    m += "W=" + std::to_string(d.W) + "\n";
    m += std::string("kind=") + condition_kind_name(d.kind) + "\n";
    m += "K=" + std::to_string(d.K) + "\n";
    m += "split_fractions=" + fmt_g17(fractions[0]) + "," + fmt_g17(fractions[1]) + "," +
         fmt_g17(fractions[2]) + "\n";
    m += "train_size=" + std::to_string(idx.train.size()) + "\n";
    m += "val_size=" + std::to_string(idx.val.size()) + "\n";
    m += "test_size=" + std::to_string(idx.test.size()) + "\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash_ids(idx.train)));
    m += std::string("train_hash=") + buf + "\n";
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash_ids(idx.val)));
    m += std::string("val_hash=") + buf + "\n";
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(hash_ids(idx.test)));
    m += std::string("test_hash=") + buf + "\n";
    return m;
}

} // namespace ccdiff
