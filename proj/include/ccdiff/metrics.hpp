#pragma once
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ccdiff/data.hpp"
#include "ccdiff/denoiser.hpp"
#include "ccdiff/extractors.hpp"
#include "ccdiff/schedule.hpp"
#include "ccdiff/tensor.hpp"

namespace ccdiff {

struct MetricReport {
    ConditionKind kind = ConditionKind::SegMask;
    std::string metric; // "miou" | "f1" | "ssim" | "rmse"
    double value = 0.0;
    int n_samples = 0;
    std::uint64_t seed = 0;
    bool higher_better = true;
};

// mean over classes present in gt or pred of |intersection| / |union|
double miou(const Tensor& pred, const Tensor& gt, int K);

// pixel-exact F1 after binarizing both maps at 0.5; both-empty => 1.
// tolerance_1px relaxes matching to the 8-neighbourhood (not used by eval).
double f1_edge(const Tensor& pred, const Tensor& gt, bool tolerance_1px = false);

// mean local SSIM, 8x8 sliding window, stride 1, C1=(0.01)^2, C2=(0.03)^2, L=1
double ssim(const Tensor& a, const Tensor& b);

double rmse(const Tensor& a, const Tensor& b);

// (K,H,W) logits -> (1,H,W) class ids; ties resolve to the lowest class
Tensor argmax_channels(const Tensor& logits);

const char* metric_name_for(ConditionKind kind);
bool metric_higher_better(ConditionKind kind);

struct EvalSpec {
    ConditionKind kind = ConditionKind::SegMask;
    int num_classes = 4;
    SegExtractorParams seg; // evaluation classifier, consulted for SegMask only
};

// score of one generated image against the sample's own condition, using the
// hard (argmax / thresholded) form of the matching extractor
double condition_score(const Tensor& image, const ConditionedSample& s, const EvalSpec& spec);

using Generator = std::function<Tensor(const ConditionedSample&, std::uint64_t seed)>;

// Mean condition_score over the first n of `indices`. Per-sample seeds are
// derived from the sample content, so the mean is permutation-invariant.
MetricReport evaluate_generator(const Generator& gen, const Dataset& data,
                                const std::vector<int>& indices, const EvalSpec& spec, int n,
                                std::uint64_t seed);

// evaluate_generator with the generator = full ancestral sampling from params
MetricReport evaluate_controllability(const DenoiserParams& params, const NoiseSchedule& sched,
                                      const Dataset& data, const std::vector<int>& indices,
                                      const EvalSpec& spec, int n, std::uint64_t seed);

struct DownstreamResult {
    double accuracy = 0.0; // pixel accuracy pooled over the test set
    double miou_value = 0.0; // per-image mIoU averaged over the test set
};

// Trains a fresh 2-layer conv segmenter on (train_images, train_masks) and
// scores it on held-out pairs.
DownstreamResult train_downstream_segmenter(const std::vector<Tensor>& train_images,
                                            const std::vector<Tensor>& train_masks,
                                            const std::vector<Tensor>& test_images,
                                            const std::vector<Tensor>& test_masks, int K,
                                            std::uint64_t seed, int iters = 300, int batch = 8,
                                            double lr = 5e-2);

} // namespace ccdiff
