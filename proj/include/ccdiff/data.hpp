#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "ccdiff/extractors.hpp"
#include "ccdiff/tensor.hpp"

namespace ccdiff {

// One training unit: image, its exact ground-truth condition, caption id.
struct ConditionedSample {
    Tensor x0;   // (1,H,W) in [-1,1]
    Tensor cond; // SegMask: (1,H,W) class ids; others: (1,H,W) float map
    std::uint32_t caption_id = 0;
};

struct SceneSpec {
    struct ShapeSpec {
        int type = 0; // 0 rectangle, 1 circle, 2 triangle
        int class_id = 1;
        int depth_rank = 0; // 0 = farthest
        double intensity = 0.0;
        double cx = 0, cy = 0, rx = 0, ry = 0; // circle/triangle use rx as radius
    };
    int H = 0, W = 0;
    std::vector<ShapeSpec> shapes; // depth ranks are unique
};

struct Dataset {
    ConditionKind kind = ConditionKind::SegMask;
    int K = 4; // SegMask class count (background = 0); kept for all kinds
    int H = 32, W = 32;
    std::vector<ConditionedSample> samples;
};

struct SplitIndices {
    std::vector<int> train, val, test;
};

// Deterministic scene for sample index i of a (seed, kind) stream.
SceneSpec make_scene(int i, int H, int W, ConditionKind kind, int K, std::uint64_t seed);
// Pure function of the scene: repeated calls give bitwise-equal tensors.
ConditionedSample rasterize_scene(const SceneSpec& scene, ConditionKind kind, int K);

Dataset generate_dataset(int n, int H, int W, ConditionKind kind, int K, std::uint64_t seed);

// fractions must sum to 1; result is a disjoint cover, seed-deterministic
SplitIndices split(const Dataset& d, const std::vector<double>& fractions, std::uint64_t seed);

void write_dataset(const std::string& path, const Dataset& d);
Dataset read_dataset(const std::string& path);

// plain-text key=value block describing a generated dataset + its split
std::string make_manifest(const Dataset& d, std::uint64_t seed,
                          const std::vector<double>& fractions, const SplitIndices& idx);

} // namespace ccdiff
