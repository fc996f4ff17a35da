#include "ccdiff/engine.hpp"

#include <chrono>
#include <cmath>

#include "ccdiff/io.hpp"

namespace ccdiff {

const char* strategy_name(Strategy s) {
    switch (s) {
        case Strategy::DiffusionOnly: return "diffusion_only";
        case Strategy::Efficient: return "efficient";
        case Strategy::FullSampling: return "full_sampling";
        case Strategy::RewardOnly: return "reward_only";
    }
    return "?";
}

Strategy parse_strategy(const std::string& s) {
    if (s == "diffusion_only") return Strategy::DiffusionOnly;
    if (s == "efficient") return Strategy::Efficient;
    if (s == "full_sampling") return Strategy::FullSampling;
    if (s == "reward_only") return Strategy::RewardOnly;
    throw ConfigError("unknown strategy '" + s +
                      "' (expected diffusion_only|efficient|full_sampling|reward_only)");
}

void validate_train_config(const TrainConfig& cfg) {
    if (cfg.T < 1) throw ConfigError("T must be >= 1");
    if (cfg.t_thre < 1 || cfg.t_thre > cfg.T)
        throw ConfigError("t_thre=" + std::to_string(cfg.t_thre) + " must lie in [1, T=" +
                          std::to_string(cfg.T) + "]");
    if (!(cfg.lr > 0.0)) throw ConfigError("lr must be > 0");
    if (cfg.lambda < 0.0) throw ConfigError("lambda must be >= 0");
    if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
    if (cfg.iters < 0) throw ConfigError("iters must be >= 0");
    if (!(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0))
        throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
    if (cfg.strategy == Strategy::FullSampling) {
        if (cfg.T_sample < 1) throw ConfigError("T_sample must be >= 1");
        if (cfg.T_sample > 10)
            throw ConfigError(
                "T_sample=" + std::to_string(cfg.T_sample) +
                " refused: the gradient tape grows linearly with the number of sampling steps, "
                "so backpropagating through long chains is intractable; the cap is 10");
    }
}

Tensor diffusion_loss(const Tensor& eps_hat, const Tensor& eps) {
    if (!(eps_hat.shape() == eps.shape()))
        throw ShapeError("diffusion_loss: " + shape_str(eps_hat.shape()) + " vs " +
                         shape_str(eps.shape()));
    const Tensor d = sub(eps_hat, eps);
    return mean(mul(d, d));
}

Tensor total_loss(const Tensor& l_train, const Tensor& l_reward, double lambda) {
    if (l_train.numel() != 1 || l_reward.numel() != 1)
        throw ShapeError("total_loss: losses must be scalars");
    return add(l_train, mul(l_reward, lambda));
}

namespace {

struct BatchDraw {
    int t = 0;
    std::vector<const ConditionedSample*> samples;
    std::vector<Tensor> eps;
};

BatchDraw draw_batch(const Dataset& data, const std::vector<int>& indices, const TrainConfig& cfg,
                     int it) {
    if (indices.empty()) throw ConfigError("training: empty index list");
    BatchDraw b;
    RngStream t_rng(rng_key(cfg.seed, {rngtag::train_t, static_cast<std::uint64_t>(it)}));
    b.t = t_rng.uniform_int(1, cfg.T);
    RngStream pick(rng_key(cfg.seed, {rngtag::train_batch, static_cast<std::uint64_t>(it)}));
    RngStream noise(rng_key(cfg.seed, {rngtag::train_noise, static_cast<std::uint64_t>(it)}));
    for (int j = 0; j < cfg.batch; ++j) {
        const int idx = indices[static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<int>(indices.size()) - 1))];
        if (idx < 0 || idx >= static_cast<int>(data.samples.size()))
            throw ConfigError("training: index " + std::to_string(idx) + " out of range");
        const ConditionedSample& s = data.samples[static_cast<std::size_t>(idx)];
        b.samples.push_back(&s);
        b.eps.push_back(Tensor::randn(s.x0.shape(), noise));
    }
    return b;
}

struct BatchForward {
    std::vector<Tensor> x_t;     // noised inputs (constants on the tape)
    std::vector<Tensor> eps_hat; // shared denoiser outputs
    std::vector<Tensor> c_v;     // condition inputs fed to the denoiser
    Tensor l_train;
};

BatchForward batch_train_loss(const DenoiserParams& p, const Dataset& data, const BatchDraw& b,
                              const NoiseSchedule& sched) {
    BatchForward f;
    Tensor acc;
    for (std::size_t j = 0; j < b.samples.size(); ++j) {
        const ConditionedSample& s = *b.samples[j];
        const Tensor c_v = cond_to_input(s.cond, data.kind, data.K);
        const Tensor c_t = caption_embedding(p, static_cast<int>(s.caption_id));
        const Tensor x_t = forward_diffuse(s.x0, b.t, b.eps[j], sched);
        const Tensor eh = denoiser_forward(p, x_t, b.t, c_t, c_v);
        const Tensor lj = diffusion_loss(eh, b.eps[j]);
        acc = j == 0 ? lj : add(acc, lj);
        f.x_t.push_back(x_t);
        f.eps_hat.push_back(eh);
        f.c_v.push_back(c_v);
    }
    f.l_train = mul(acc, 1.0 / static_cast<double>(b.samples.size()));
    return f;
}

// lambda * mean over the batch of L(c_v, D(x0')), where x0' is supplied per
// sample by the caller (single-step estimate or full chain).
Tensor batch_reward_loss(const RewardSpec& spec, const BatchDraw& b,
                         const std::vector<Tensor>& x0_estimates) {
    Tensor acc;
    for (std::size_t j = 0; j < b.samples.size(); ++j) {
        const Tensor chat = reward_extract(spec, x0_estimates[j]);
        const Tensor rj = consistency_loss(spec, b.samples[j]->cond, chat);
        acc = j == 0 ? rj : add(acc, rj);
    }
    return mul(acc, 1.0 / static_cast<double>(b.samples.size()));
}

double now_seconds() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

} // namespace

std::vector<double> pretrain(DenoiserParams& params, const Dataset& data,
                             const std::vector<int>& indices, const TrainConfig& cfg) {
    validate_train_config(cfg);
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    std::vector<double> curve;
    curve.reserve(static_cast<std::size_t>(cfg.iters));
    for (int it = 0; it < cfg.iters; ++it) {
        const BatchDraw b = draw_batch(data, indices, cfg, it);
        TapeScope scope;
        const BatchForward f = batch_train_loss(params, data, b, sched);
        const double lv = f.l_train.item();
        if (!std::isfinite(lv)) throw NumericError("pretrain: loss diverged (non-finite)");
        const GradMap g = scope.tape.backward(f.l_train);
        adam.step(params.trainable(), g);
        curve.push_back(lv);
    }
    return curve;
}

TrainResult finetune(DenoiserParams& params, const Dataset& data, const std::vector<int>& indices,
                     const RewardSpec& spec, const TrainConfig& cfg) {
    validate_train_config(cfg);
    if (cfg.strategy != Strategy::DiffusionOnly && spec.kind != data.kind)
        throw ConfigError(std::string("finetune: reward kind ") + condition_kind_name(spec.kind) +
                          " does not match dataset kind " + condition_kind_name(data.kind));
    params = freeze_base(params);
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    // the naive baseline denoises on its own short chain
    const NoiseSchedule chain = cfg.strategy == Strategy::FullSampling
                                    ? make_schedule(cfg.T_sample, cfg.beta_start, cfg.beta_end)
                                    : sched;
    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    TrainResult res;
    res.steps.reserve(static_cast<std::size_t>(cfg.iters));

    for (int it = 0; it < cfg.iters; ++it) {
        const BatchDraw b = draw_batch(data, indices, cfg, it);
        res.samples_consumed += static_cast<std::int64_t>(b.samples.size());
        StepReport rep;
        rep.iter = it;
        rep.t = b.t;

        if (cfg.strategy == Strategy::RewardOnly && b.t > cfg.t_thre) {
            // gate closed and no diffusion term either: nothing to apply
            NoGradScope ng;
            const BatchForward f = batch_train_loss(params, data, b, sched);
            rep.l_train = f.l_train.item();
            rep.l_total = 0.0;
            res.steps.push_back(rep);
            continue;
        }

        TapeScope scope;
        const double t0 = now_seconds();
        const BatchForward f = batch_train_loss(params, data, b, sched);
        rep.l_train = f.l_train.item();

        Tensor objective = f.l_train;
        if (cfg.strategy == Strategy::Efficient || cfg.strategy == Strategy::RewardOnly) {
            if (b.t <= cfg.t_thre) {
                std::vector<Tensor> x0p;
                for (std::size_t j = 0; j < b.samples.size(); ++j)
                    x0p.push_back(predict_x0_single_step(f.x_t[j], f.eps_hat[j], b.t, sched));
                const Tensor l_reward = batch_reward_loss(spec, b, x0p);
                rep.reward_active = true;
                rep.l_reward = l_reward.item();
                objective = cfg.strategy == Strategy::RewardOnly
                                ? mul(l_reward, cfg.lambda)
                                : total_loss(f.l_train, l_reward, cfg.lambda);
            }
        } else if (cfg.strategy == Strategy::FullSampling) {
            const std::size_t mark = scope.tape.mark();
            std::vector<Tensor> x_final;
            for (std::size_t j = 0; j < b.samples.size(); ++j) {
                const ConditionedSample& s = *b.samples[j];
                const Tensor c_t = caption_embedding(params, static_cast<int>(s.caption_id));
                RngStream start(rng_key(cfg.seed, {rngtag::sample_start,
                                                   static_cast<std::uint64_t>(it),
                                                   static_cast<std::uint64_t>(j)}));
                // tracked leaf: the first step must retain the same trunk
                // subgraph as later steps (whose inputs already carry the
                // tape), so per-step retention cost stays uniform
                Tensor x = Tensor::randn(s.x0.shape(), start, 1.0, true);
                for (int ts = cfg.T_sample; ts >= 1; --ts) {
                    const Tensor eh = denoiser_forward(params, x, ts, c_t, f.c_v[j]);
                    RngStream zr(rng_key(cfg.seed, {rngtag::sample_noise,
                                                    static_cast<std::uint64_t>(it),
                                                    static_cast<std::uint64_t>(j),
                                                    static_cast<std::uint64_t>(ts)}));
                    const Tensor z = Tensor::randn(s.x0.shape(), zr);
                    x = ddpm_step(x, eh, ts, z, chain);
                }
                x_final.push_back(x);
            }
            const TapeStats samp = scope.tape.stats_since(mark);
            std::vector<Tensor> x0p;
            for (const Tensor& x : x_final) x0p.push_back(clamp(x, -1.0, 1.0));
            const Tensor l_reward = batch_reward_loss(spec, b, x0p);
            rep.reward_active = true;
            rep.l_reward = l_reward.item();
            objective = total_loss(f.l_train, l_reward, cfg.lambda);
            res.tape.push_back(TapeRow{"full_sampling", cfg.T_sample, samp.nodes,
                                       samp.saved_elements, 0.0});
        }

        rep.l_total = objective.item();
        if (!std::isfinite(rep.l_total))
            throw NumericError("finetune: loss diverged (non-finite)");
        const GradMap g = scope.tape.backward(objective);
        adam.step(params.trainable(), g);
        if (!res.tape.empty() && res.tape.back().wall_seconds == 0.0 &&
            cfg.strategy == Strategy::FullSampling)
            res.tape.back().wall_seconds = now_seconds() - t0;
        res.steps.push_back(rep);
    }
    return res;
}

TrainResult reward_finetune_efficient(DenoiserParams& params, const Dataset& data,
                                      const std::vector<int>& indices, const RewardSpec& spec,
                                      TrainConfig cfg) {
    cfg.strategy = Strategy::Efficient;
    return finetune(params, data, indices, spec, cfg);
}

TrainResult reward_finetune_full_sampling(DenoiserParams& params, const Dataset& data,
                                          const std::vector<int>& indices, const RewardSpec& spec,
                                          TrainConfig cfg) {
    cfg.strategy = Strategy::FullSampling;
    return finetune(params, data, indices, spec, cfg);
}

TrainResult reward_only(DenoiserParams& params, const Dataset& data,
                        const std::vector<int>& indices, const RewardSpec& spec, TrainConfig cfg) {
    cfg.strategy = Strategy::RewardOnly;
    return finetune(params, data, indices, spec, cfg);
}

double validation_diffusion_loss(const DenoiserParams& params, const Dataset& data,
                                 const std::vector<int>& indices, const NoiseSchedule& sched,
                                 std::uint64_t seed) {
    if (indices.empty()) throw ConfigError("validation_diffusion_loss: empty index list");
    NoGradScope ng;
    static const double kQuantiles[] = {0.1, 0.35, 0.6, 0.85};
    double total = 0.0;
    std::int64_t count = 0;
    for (const int idx : indices) {
        const ConditionedSample& s = data.samples.at(static_cast<std::size_t>(idx));
        const Tensor c_v = cond_to_input(s.cond, data.kind, data.K);
        const Tensor c_t = caption_embedding(params, static_cast<int>(s.caption_id));
        for (const double q : kQuantiles) {
            const int t = std::max(1, static_cast<int>(std::lround(q * sched.T)));
            RngStream er(rng_key(seed, {rngtag::misc, 2, static_cast<std::uint64_t>(idx),
                                        static_cast<std::uint64_t>(t)}));
            const Tensor eps = Tensor::randn(s.x0.shape(), er);
            const Tensor x_t = forward_diffuse(s.x0, t, eps, sched);
            const Tensor eh = denoiser_forward(params, x_t, t, c_t, c_v);
            total += diffusion_loss(eh, eps).item();
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

namespace {

struct ProbeStats {
    TapeStats train, reward, sampling, whole;
    double wall = 0.0;
};

// One optimizer step on a throwaway copy of the parameters, instrumented with
// segment marks. forced_t keeps the reward branch active and the op sequence
// comparable across schedules.
ProbeStats probe_step(const DenoiserParams& pretrained, const Dataset& data,
                      const std::vector<int>& indices, const RewardSpec& spec, TrainConfig cfg,
                      bool full_sampling, int forced_t) {
    DenoiserParams p = freeze_base(pretrained);
    const NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
    const NoiseSchedule chain = full_sampling
                                    ? make_schedule(cfg.T_sample, cfg.beta_start, cfg.beta_end)
                                    : sched;
    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});

    BatchDraw b = draw_batch(data, indices, cfg, 0);
    b.t = forced_t;

    ProbeStats out;
    const double t0 = now_seconds();
    TapeScope scope;
    const BatchForward f = batch_train_loss(p, data, b, sched);
    out.train = scope.tape.stats();

    Tensor objective;
    if (!full_sampling) {
        const std::size_t mark = scope.tape.mark();
        std::vector<Tensor> x0p;
        for (std::size_t j = 0; j < b.samples.size(); ++j)
            x0p.push_back(predict_x0_single_step(f.x_t[j], f.eps_hat[j], b.t, sched));
        const Tensor l_reward = batch_reward_loss(spec, b, x0p);
        objective = total_loss(f.l_train, l_reward, cfg.lambda);
        out.reward = scope.tape.stats_since(mark);
    } else {
        const std::size_t mark = scope.tape.mark();
        std::vector<Tensor> x_final;
        for (std::size_t j = 0; j < b.samples.size(); ++j) {
            const ConditionedSample& s = *b.samples[j];
            const Tensor c_t = caption_embedding(p, static_cast<int>(s.caption_id));
            RngStream start(rng_key(cfg.seed, {rngtag::sample_start, 0,
                                               static_cast<std::uint64_t>(j)}));
            Tensor x = Tensor::randn(s.x0.shape(), start, 1.0, true);
            for (int ts = cfg.T_sample; ts >= 1; --ts) {
                const Tensor eh = denoiser_forward(p, x, ts, c_t, f.c_v[j]);
                RngStream zr(rng_key(cfg.seed, {rngtag::sample_noise, 0,
                                                static_cast<std::uint64_t>(j),
                                                static_cast<std::uint64_t>(ts)}));
                const Tensor z = Tensor::randn(s.x0.shape(), zr);
                x = ddpm_step(x, eh, ts, z, chain);
            }
            x_final.push_back(x);
        }
        out.sampling = scope.tape.stats_since(mark);
        const std::size_t mark2 = scope.tape.mark();
        std::vector<Tensor> x0p;
        for (const Tensor& x : x_final) x0p.push_back(clamp(x, -1.0, 1.0));
        const Tensor l_reward = batch_reward_loss(spec, b, x0p);
        objective = total_loss(f.l_train, l_reward, cfg.lambda);
        out.reward = scope.tape.stats_since(mark2);
    }
    out.whole = scope.tape.stats();
    const GradMap g = scope.tape.backward(objective);
    adam.step(p.trainable(), g);
    out.wall = now_seconds() - t0;
    return out;
}

} // namespace

std::vector<TapeRow> bench_tape(const DenoiserParams& pretrained, const Dataset& data,
                                const std::vector<int>& indices, const RewardSpec& spec,
                                const TrainConfig& cfg, const std::vector<int>& t_samples) {
    std::vector<TapeRow> rows;
    // efficient strategy: whole-step tape for two schedule lengths; identical
    // op sequences, so the counts must match
    for (const int T : {100, 1000}) {
        TrainConfig c = cfg;
        c.strategy = Strategy::Efficient;
        c.T = T;
        c.t_thre = std::max(1, T / 5);
        const ProbeStats ps = probe_step(pretrained, data, indices, spec, c, false, 1);
        rows.push_back(TapeRow{std::string("efficient_T") + std::to_string(T), 0, ps.whole.nodes,
                               ps.whole.saved_elements, ps.wall});
        if (T == 100) {
            rows.push_back(TapeRow{"efficient_train_graph", 0, ps.train.nodes,
                                   ps.train.saved_elements, 0.0});
            rows.push_back(TapeRow{"efficient_reward_graph", 0, ps.reward.nodes,
                                   ps.reward.saved_elements, 0.0});
        }
    }
    bool breakdown_done = false;
    for (const int k : t_samples) {
        TrainConfig c = cfg;
        c.strategy = Strategy::FullSampling;
        c.T_sample = k;
        validate_train_config(c);
        const ProbeStats ps = probe_step(pretrained, data, indices, spec, c, true, 1);
        rows.push_back(
            TapeRow{"full_sampling", k, ps.sampling.nodes, ps.sampling.saved_elements, ps.wall});
        if (!breakdown_done) {
            rows.push_back(TapeRow{"full_train_graph", k, ps.train.nodes,
                                   ps.train.saved_elements, 0.0});
            rows.push_back(TapeRow{"full_reward_graph", k, ps.reward.nodes,
                                   ps.reward.saved_elements, 0.0});
            rows.push_back(TapeRow{"full_step_total", k, ps.whole.nodes,
                                   ps.whole.saved_elements, 0.0});
            breakdown_done = true;
        }
    }
    return rows;
}

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ConfigError("fit_line: need at least two matched points");
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    const double denom = n * sxx - sx * sx;
    if (std::abs(denom) < 1e-12) throw NumericError("fit_line: degenerate x values");
    LineFit f;
    f.slope = (n * sxy - sx * sy) / denom;
    f.intercept = (sy - f.slope * sx) / n;
    double ss_res = 0, ss_tot = 0;
    const double ybar = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = y[i] - (f.slope * x[i] + f.intercept);
        ss_res += e * e;
        ss_tot += (y[i] - ybar) * (y[i] - ybar);
    }
    f.r2 = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    return f;
}

std::string step_reports_csv(const std::vector<StepReport>& steps) {
    std::string out = "iter,t,l_train,l_reward,l_total\n";
    for (const StepReport& s : steps) {
        out += std::to_string(s.iter) + "," + std::to_string(s.t) + "," + fmt_g17(s.l_train) + ",";
        if (s.reward_active) out += fmt_g17(s.l_reward);
        out += "," + fmt_g17(s.l_total) + "\n";
    }
    return out;
}

std::string loss_curve_csv(const std::vector<double>& curve) {
    std::string out = "iter,l_train\n";
    for (std::size_t i = 0; i < curve.size(); ++i)
        out += std::to_string(i) + "," + fmt_g17(curve[i]) + "\n";
    return out;
}

std::string tape_rows_csv(const std::vector<TapeRow>& rows) {
    std::string out = "label,sampling_steps,tape_nodes,saved_elements,wall_seconds\n";
    for (const TapeRow& r : rows)
        out += r.label + "," + std::to_string(r.sampling_steps) + "," +
               std::to_string(r.tape_nodes) + "," + std::to_string(r.saved_elements) + "," +
               fmt_g17(r.wall_seconds) + "\n";
    return out;
}

} // namespace ccdiff
