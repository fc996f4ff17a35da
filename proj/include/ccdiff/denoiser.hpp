#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ccdiff/tensor.hpp"

namespace ccdiff {

// Widths of the 3-block trunk and the embedding sizes are fixed at desk scale.
constexpr int kWidth1 = 16;
constexpr int kWidth2 = 32;
constexpr int kWidth3 = 16;
constexpr int kTembDim = 16;
constexpr int kCtDim = 8;
constexpr int kCaptionVocab = 8;

// Sinusoidal embedding; distinct integer t give distinct vectors.
struct TimestepEmbedding {
    int dim = kTembDim;
    Tensor operator()(int t) const;
};

// Trunk (base) + condition branch (control) + the zero-initialized projection
// through which control features enter the trunk.
struct DenoiserParams {
    // base trunk
    Tensor caption_table; // (vocab, ct_dim) learned caption embedding
    Tensor enc1_w, enc1_b, enc1_tw, enc1_cw;
    Tensor enc2_w, enc2_b, enc2_tw, enc2_cw;
    Tensor dec_w, dec_b, dec_tw, dec_cw;
    Tensor out_w, out_b;
    // control branch (mirrors the encoder)
    Tensor c1_w, c1_b, c2_w, c2_b;
    // zero projection: 1x1, exactly zero at init
    Tensor zp_w, zp_b;

    int cv_channels() const { return c1_w.dim(1); }

    std::vector<std::pair<std::string, Tensor*>> base_named();
    std::vector<std::pair<std::string, Tensor*>> control_named(); // includes zero projection
    std::vector<std::pair<std::string, Tensor*>> all_named();
    std::vector<std::pair<std::string, const Tensor*>> all_named() const;

    // tensors that currently require grad, in all_named order
    std::vector<Tensor*> trainable();
};

DenoiserParams init_denoiser(int c_v_channels, std::uint64_t seed);

// Base tensors become constants (same buffers, requires_grad off); control and
// zero projection stay trainable.
DenoiserParams freeze_base(const DenoiserParams& p);

// caption_id -> (ct_dim) embedding row; differentiable into caption_table
Tensor caption_embedding(const DenoiserParams& p, int caption_id);

// eps_theta(x_t, t, c_t, c_v) -> tensor shaped like x_t
Tensor denoiser_forward(const DenoiserParams& p, const Tensor& x_t, int t, const Tensor& c_t,
                        const Tensor& c_v);

void save_denoiser(const std::string& path, const DenoiserParams& p);
DenoiserParams load_denoiser(const std::string& path);

} // namespace ccdiff
