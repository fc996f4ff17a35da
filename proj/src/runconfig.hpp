#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "ccdiff/engine.hpp"
#include "ccdiff/extractors.hpp"

namespace ccdiff {

// Everything a subcommand can need, defaults filled. One JSON file drives the
// whole pipeline so the same config reproduces it end to end.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out = "out";
    std::string ckpt_in;  // empty -> per-command default under `out`
    std::string ckpt_out; // empty -> per-command default under `out`

    // data section
    std::string data_path; // empty -> <out>/data.cnds
    int n = 256;
    int H = 32, W = 32;
    int K = 4;
    ConditionKind kind = ConditionKind::SegMask;
    std::vector<double> split_fracs = {0.8, 0.1, 0.1};

    // train section (train.seed is filled from the global seed)
    TrainConfig train;
    bool lambda_given = false; // false -> default_lambda(kind, lineart)

    // reward section
    int reward_layers = 2;
    bool lineart = false;
    int reward_extractor_iters = 300;

    // eval section
    int eval_n = 64;
    int eval_layers = 2;
    int eval_extractor_iters = 300;

    // sample section
    int sample_n = 4;

    // bench section
    std::vector<int> t_samples = {1, 2, 3, 4, 5, 6, 7, 8};

    std::string resolved_data_path() const {
        return data_path.empty() ? out + "/data.cnds" : data_path;
    }
};

// Loads and strictly validates the JSON config (unknown keys rejected with the
// offending key named). Empty path -> all defaults. Overrides applied last.
RunConfig load_run_config(const std::string& config_path, const std::uint64_t* seed_override,
                          const std::string& out_override);

// The defaults-filled config as pretty JSON, printed before every run.
std::string resolved_config_json(const RunConfig& c);

} // namespace ccdiff
