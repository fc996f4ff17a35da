#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "ccdiff/data.hpp"
#include "ccdiff/denoiser.hpp"
#include "ccdiff/extractors.hpp"
#include "ccdiff/optim.hpp"
#include "ccdiff/schedule.hpp"
#include "ccdiff/tensor.hpp"

namespace ccdiff {

enum class Strategy { DiffusionOnly, Efficient, FullSampling, RewardOnly };

const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s); // ConfigError on bad name

struct TrainConfig {
    int T = 100;
    int t_thre = 20;       // reward active for drawn t <= t_thre
    double lambda = 0.5;
    double lr = 1e-3;
    int batch = 16;
    int iters = 2000;
    std::uint64_t seed = 0;
    Strategy strategy = Strategy::Efficient;
    int T_sample = 5;      // FullSampling chain length, capped at 10
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

void validate_train_config(const TrainConfig& cfg);

struct StepReport {
    int iter = 0;
    int t = 0;
    double l_train = 0.0;
    bool reward_active = false;
    double l_reward = 0.0; // meaningful only when reward_active
    double l_total = 0.0;
};

struct TapeRow {
    std::string label;
    int sampling_steps = 0;
    std::int64_t tape_nodes = 0;
    std::int64_t saved_elements = 0;
    double wall_seconds = 0.0;
};

struct TrainResult {
    std::vector<StepReport> steps;
    std::vector<TapeRow> tape; // FullSampling: sampling-loop segment, one row per iteration
    std::int64_t samples_consumed = 0;
};

// mean over elements of (eps_hat - eps)^2, recorded like any other op chain
Tensor diffusion_loss(const Tensor& eps_hat, const Tensor& eps);
// l_train + lambda * l_reward
Tensor total_loss(const Tensor& l_train, const Tensor& l_reward, double lambda);

// Trains every parameter that requires grad; returns the per-iteration loss
// curve. Deterministic in (params, data, cfg).
std::vector<double> pretrain(DenoiserParams& params, const Dataset& data,
                             const std::vector<int>& indices, const TrainConfig& cfg);

// Freezes the base trunk, then runs cfg.strategy. spec is ignored by
// DiffusionOnly; every other strategy requires spec.kind == data.kind.
TrainResult finetune(DenoiserParams& params, const Dataset& data, const std::vector<int>& indices,
                     const RewardSpec& spec, const TrainConfig& cfg);

TrainResult reward_finetune_efficient(DenoiserParams& params, const Dataset& data,
                                      const std::vector<int>& indices, const RewardSpec& spec,
                                      TrainConfig cfg);
TrainResult reward_finetune_full_sampling(DenoiserParams& params, const Dataset& data,
                                          const std::vector<int>& indices, const RewardSpec& spec,
                                          TrainConfig cfg);
TrainResult reward_only(DenoiserParams& params, const Dataset& data,
                        const std::vector<int>& indices, const RewardSpec& spec, TrainConfig cfg);

// Mean denoising loss over fixed (sample, t, eps) probes; no training state.
double validation_diffusion_loss(const DenoiserParams& params, const Dataset& data,
                                 const std::vector<int>& indices, const NoiseSchedule& sched,
                                 std::uint64_t seed);

// One representative step per strategy, parameters untouched. Rows:
//   efficient_T100 / efficient_T1000  whole-step tape
//   efficient_train_graph / efficient_reward_graph  segment breakdown
//   full_sampling (one per requested T_sample)  sampling-loop segment
//   full_train_graph / full_reward_graph / full_step_total  T_sample[0] breakdown
std::vector<TapeRow> bench_tape(const DenoiserParams& pretrained, const Dataset& data,
                                const std::vector<int>& indices, const RewardSpec& spec,
                                const TrainConfig& cfg, const std::vector<int>& t_samples);

struct LineFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};
LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

std::string step_reports_csv(const std::vector<StepReport>& steps);
std::string loss_curve_csv(const std::vector<double>& curve);
std::string tape_rows_csv(const std::vector<TapeRow>& rows);

} // namespace ccdiff
