#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "ccdiff/tensor.hpp"

namespace ccdiff {

enum class ConditionKind { SoftEdge, BinaryEdge, SegMask, DepthMap };

const char* condition_kind_name(ConditionKind k);
ConditionKind parse_condition_kind(const std::string& s); // ConfigError on bad name

enum class LossForm { MSE, CrossEntropy };

// Tiny per-pixel conv classifier (the segmentation reward/eval model).
// layers == 1: conv(1->K). layers == 2: conv(1->hidden) relu conv(hidden->K).
struct SegExtractorParams {
    int layers = 2;
    int K = 4;
    int hidden = 8;
    std::vector<Tensor> tensors; // w1,b1[,w2,b2]; frozen (no requires_grad)
};

struct RewardSpec {
    ConditionKind kind = ConditionKind::SegMask;
    int num_classes = 4; // SegMask only
    LossForm loss_form = LossForm::CrossEntropy;
    double lambda = 0.5;
    SegExtractorParams seg; // used when kind == SegMask
};

// SegMask -> CrossEntropy, everything else -> MSE
LossForm default_loss_form(ConditionKind k);
// per-kind default weights; the lineart flavor of SoftEdge carries 10
double default_lambda(ConditionKind k, bool lineart_flavor = false);
RewardSpec make_reward_spec(ConditionKind kind, int K, double lambda,
                            SegExtractorParams seg = {});

// class map (1,H,W) with integer values in [0,K) -> one-hot (K,H,W)
Tensor one_hot(const Tensor& classmap, int K);
// condition tensor as the denoiser's c_v input: one-hot for SegMask, identity otherwise
Tensor cond_to_input(const Tensor& cond, ConditionKind kind, int K);
int cond_input_channels(ConditionKind kind, int K);

// Gaussian 3x3 smooth -> Sobel magnitude -> sigmoid squash; (1,H,W) in [0,1]
Tensor extract_soft_edge(const Tensor& img);
// soft double-threshold (smoothstep between low and high) of normalized Sobel
// magnitude; defaults (0.1, 0.2)
Tensor extract_binary_edge_soft(const Tensor& img, double low = 0.1, double high = 0.2);
// smoothed luminance remapped to [0,1]
Tensor extract_depth(const Tensor& img);
// per-pixel class logits (K,H,W)
Tensor extract_segmentation(const Tensor& img, const SegExtractorParams& params);

// the reward model D: differentiable condition extracted from an image.
// SegMask -> logits (K,H,W); other kinds -> (1,H,W) map.
Tensor reward_extract(const RewardSpec& spec, const Tensor& img);

// mean over pixels of -log softmax(logits)[class]
Tensor cross_entropy_loss(const Tensor& logits, const Tensor& classmap);

// MSE or CrossEntropy per spec.loss_form; scalar tensor, differentiable in c_v_hat
Tensor consistency_loss(const RewardSpec& spec, const Tensor& c_v, const Tensor& c_v_hat);

// Train a fresh classifier on clean images; returns frozen params.
SegExtractorParams train_seg_extractor(const std::vector<Tensor>& images,
                                       const std::vector<Tensor>& classmaps, int K, int layers,
                                       std::uint64_t seed, int iters = 300, int batch = 8,
                                       double lr = 5e-2);

void save_seg_extractor(const std::string& path, const SegExtractorParams& p);
SegExtractorParams load_seg_extractor(const std::string& path);

} // namespace ccdiff
