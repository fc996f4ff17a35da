#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ccdiff/data.hpp"
#include "ccdiff/engine.hpp"
#include "ccdiff/io.hpp"
#include "ccdiff/metrics.hpp"
#include "runconfig.hpp"

namespace fs = std::filesystem;
using namespace ccdiff;

namespace {

Dataset load_data(const RunConfig& c) { return read_dataset(c.resolved_data_path()); }

SplitIndices split_of(const RunConfig& c, const Dataset& d) {
    return split(d, c.split_fracs, c.seed);
}

NoiseSchedule sched_of(const RunConfig& c) {
    return make_schedule(c.train.T, c.train.beta_start, c.train.beta_end);
}

void collect_split(const Dataset& d, const std::vector<int>& idx, std::vector<Tensor>& images,
                   std::vector<Tensor>& conds) {
    for (const int i : idx) {
        images.push_back(d.samples.at(static_cast<std::size_t>(i)).x0);
        conds.push_back(d.samples.at(static_cast<std::size_t>(i)).cond);
    }
}

// the reward model: trained on real train-split pairs, then frozen
RewardSpec reward_spec_of(const RunConfig& c, const Dataset& d, const SplitIndices& idx) {
    SegExtractorParams seg;
    if (d.kind == ConditionKind::SegMask) {
        std::vector<Tensor> images, conds;
        collect_split(d, idx.train, images, conds);
        seg = train_seg_extractor(images, conds, d.K, c.reward_layers,
                                  rng_key(c.seed, {rngtag::misc, 3}), c.reward_extractor_iters);
    }
    return make_reward_spec(d.kind, d.K, c.train.lambda, std::move(seg));
}

// the independent evaluation extractor (own seed stream and layer count)
EvalSpec eval_spec_of(const RunConfig& c, const Dataset& d, const SplitIndices& idx) {
    EvalSpec es;
    es.kind = d.kind;
    es.num_classes = d.K;
    if (d.kind == ConditionKind::SegMask) {
        std::vector<Tensor> images, conds;
        collect_split(d, idx.train, images, conds);
        es.seg = train_seg_extractor(images, conds, d.K, c.eval_layers,
                                     rng_key(c.seed, {rngtag::misc, 5}), c.eval_extractor_iters);
    }
    return es;
}

std::string metric_report_csv(const MetricReport& r) {
    std::string out = "kind,metric,value,n_samples,seed,direction\n";
    out += std::string(condition_kind_name(r.kind)) + "," + r.metric + "," + fmt_g17(r.value) +
           "," + std::to_string(r.n_samples) + "," + std::to_string(r.seed) + "," +
           (r.higher_better ? "higher-better" : "lower-better") + "\n";
    return out;
}

void ensure_out(const RunConfig& c) { fs::create_directories(c.out); }

Tensor to_unit_range(const Tensor& img) { // [-1,1] -> [0,1]
    Tensor out = img.clone();
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.mutable_data()[i] = (std::min(1.0, std::max(-1.0, out.data()[i])) + 1.0) / 2.0;
    return out;
}

Tensor cond_visual(const Tensor& cond, ConditionKind kind, int K) {
    if (kind != ConditionKind::SegMask) return cond;
    Tensor out = cond.clone();
    for (std::int64_t i = 0; i < out.numel(); ++i)
        out.mutable_data()[i] = out.data()[i] / (K - 1);
    return out;
}

int run_gen_data(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = generate_dataset(c.n, c.H, c.W, c.kind, c.K, c.seed);
    const SplitIndices idx = split(d, c.split_fracs, c.seed);
    const std::string path = c.resolved_data_path();
    fs::create_directories(fs::path(path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(path).parent_path());
    write_dataset(path, d);
    atomic_write_file(c.out + "/manifest.txt", make_manifest(d, c.seed, c.split_fracs, idx));
    std::printf("wrote %s (%d samples, %s) and %s/manifest.txt\n", path.c_str(), c.n,
                condition_kind_name(c.kind), c.out.c_str());
    return 0;
}

int run_pretrain(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = load_data(c);
    const SplitIndices idx = split_of(c, d);
    DenoiserParams p = init_denoiser(cond_input_channels(d.kind, d.K), c.seed);
    save_denoiser(c.out + "/init.cnpp", p);
    const std::vector<double> curve = pretrain(p, d, idx.train, c.train);
    const std::string ckpt = c.ckpt_out.empty() ? c.out + "/pretrain.cnpp" : c.ckpt_out;
    save_denoiser(ckpt, p);
    atomic_write_file(c.out + "/pretrain_loss.csv", loss_curve_csv(curve));
    if (!curve.empty())
        std::printf("pretrain: %d iters, first loss %.6f, last loss %.6f\n",
                    static_cast<int>(curve.size()), curve.front(), curve.back());
    std::printf("wrote %s and %s/pretrain_loss.csv\n", ckpt.c_str(), c.out.c_str());
    return 0;
}

int run_finetune(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = load_data(c);
    const SplitIndices idx = split_of(c, d);
    DenoiserParams p =
        load_denoiser(c.ckpt_in.empty() ? c.out + "/pretrain.cnpp" : c.ckpt_in);
    const RewardSpec spec = c.train.strategy == Strategy::DiffusionOnly
                                ? RewardSpec{}
                                : reward_spec_of(c, d, idx);
    const TrainResult res = finetune(p, d, idx.train, spec, c.train);
    const std::string strat = strategy_name(c.train.strategy);
    const std::string ckpt =
        c.ckpt_out.empty() ? c.out + "/finetune_" + strat + ".cnpp" : c.ckpt_out;
    save_denoiser(ckpt, p);
    atomic_write_file(c.out + "/steps_" + strat + ".csv", step_reports_csv(res.steps));
    if (c.train.strategy == Strategy::FullSampling)
        atomic_write_file(c.out + "/tape_" + strat + ".csv", tape_rows_csv(res.tape));
    std::printf("finetune(%s): %d iters, %lld samples consumed\n", strat.c_str(), c.train.iters,
                static_cast<long long>(res.samples_consumed));
    std::printf("wrote %s and %s/steps_%s.csv\n", ckpt.c_str(), c.out.c_str(), strat.c_str());
    return 0;
}

int run_sample(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = load_data(c);
    const SplitIndices idx = split_of(c, d);
    const DenoiserParams p =
        load_denoiser(c.ckpt_in.empty() ? c.out + "/pretrain.cnpp" : c.ckpt_in);
    const EvalSpec es = eval_spec_of(c, d, idx);
    const NoiseSchedule sched = sched_of(c);
    const std::vector<int>& pool = idx.val.empty() ? idx.train : idx.val;
    const int n = std::min<int>(c.sample_n, static_cast<int>(pool.size()));
    if (n < 1) throw ConfigError("sample: no samples available in the chosen split");
    NoGradScope ng;
    for (int i = 0; i < n; ++i) {
        const ConditionedSample& s = d.samples.at(static_cast<std::size_t>(pool[i]));
        const Tensor c_v = cond_to_input(s.cond, d.kind, d.K);
        const Tensor c_t = caption_embedding(p, static_cast<int>(s.caption_id));
        const DenoiseFn fn = [&](const Tensor& x, int t, const Tensor& ct, const Tensor& cv) {
            return denoiser_forward(p, x, t, ct, cv);
        };
        const Tensor img = sample_full(
            fn, c_v, c_t, sched,
            rng_key(c.seed, {rngtag::misc, 4, static_cast<std::uint64_t>(i)}));
        const std::string base = c.out + "/sample_" + std::to_string(i);
        write_pgm(base + ".pgm", to_unit_range(img));
        write_pgm(base + "_cond.pgm", cond_visual(s.cond, d.kind, d.K));
        Tensor extracted;
        {
            const Tensor unit = to_unit_range(img); // clamp only; extractors take [-1,1]
            Tensor back = unit.clone();
            for (std::int64_t k = 0; k < back.numel(); ++k)
                back.mutable_data()[k] = back.data()[k] * 2.0 - 1.0;
            switch (d.kind) {
                case ConditionKind::SegMask:
                    extracted = cond_visual(argmax_channels(extract_segmentation(back, es.seg)),
                                            d.kind, d.K);
                    break;
                case ConditionKind::SoftEdge: extracted = extract_soft_edge(back); break;
                case ConditionKind::BinaryEdge: extracted = extract_binary_edge_soft(back); break;
                case ConditionKind::DepthMap: extracted = extract_depth(back); break;
            }
        }
        write_pgm(base + "_extracted.pgm", extracted);
    }
    std::printf("wrote %d sample triplets under %s\n", n, c.out.c_str());
    return 0;
}

int run_eval(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = load_data(c);
    const SplitIndices idx = split_of(c, d);
    const DenoiserParams p =
        load_denoiser(c.ckpt_in.empty() ? c.out + "/pretrain.cnpp" : c.ckpt_in);
    const EvalSpec es = eval_spec_of(c, d, idx);
    const std::vector<int>& pool = idx.test.empty() ? idx.val : idx.test;
    const int n = std::min<int>(c.eval_n, static_cast<int>(pool.size()));
    const MetricReport r =
        evaluate_controllability(p, sched_of(c), d, pool, es, n, c.seed);
    atomic_write_file(c.out + "/eval.csv", metric_report_csv(r));
    std::printf("eval: %s %s = %.6f over %d samples (%s)\n", condition_kind_name(r.kind),
                r.metric.c_str(), r.value, r.n_samples,
                r.higher_better ? "higher-better" : "lower-better");
    std::printf("wrote %s/eval.csv\n", c.out.c_str());
    return 0;
}

int run_bench_tape(const RunConfig& c) {
    ensure_out(c);
    const Dataset d = load_data(c);
    const SplitIndices idx = split_of(c, d);
    const DenoiserParams p =
        load_denoiser(c.ckpt_in.empty() ? c.out + "/pretrain.cnpp" : c.ckpt_in);
    const RewardSpec spec = reward_spec_of(c, d, idx);
    TrainConfig tc = c.train;
    const std::vector<TapeRow> rows = bench_tape(p, d, idx.train, spec, tc, c.t_samples);
    atomic_write_file(c.out + "/tape_bench.csv", tape_rows_csv(rows));
    std::vector<double> xs, ys;
    for (const TapeRow& r : rows)
        if (r.label == "full_sampling") {
            xs.push_back(static_cast<double>(r.sampling_steps));
            ys.push_back(static_cast<double>(r.tape_nodes));
        }
    std::string fit_csv = "slope,intercept,r2,ratio50\n";
    if (xs.size() >= 2) {
        const LineFit f = fit_line(xs, ys);
        const double ratio50 = (50.0 * f.slope + f.intercept) / (f.slope + f.intercept);
        fit_csv += fmt_g17(f.slope) + "," + fmt_g17(f.intercept) + "," + fmt_g17(f.r2) + "," +
                   fmt_g17(ratio50) + "\n";
        std::printf("tape fit: slope %.3f, intercept %.3f, r2 %.6f, nodes(50)/nodes(1) %.2f\n",
                    f.slope, f.intercept, f.r2, ratio50);
    }
    atomic_write_file(c.out + "/tape_fit.csv", fit_csv);
    std::printf("wrote %s/tape_bench.csv and %s/tape_fit.csv\n", c.out.c_str(), c.out.c_str());
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"conditional diffusion with cycle-consistency reward fine-tuning"};
    app.require_subcommand(1);

    std::string config_path, out_override;
    std::uint64_t seed_override = 0;
    bool seed_given = false;

    const char* names[] = {"gen-data", "pretrain", "finetune", "sample", "eval", "bench-tape"};
    const char* descs[] = {"generate a synthetic conditioned dataset + manifest",
                           "train the conditional denoiser from scratch",
                           "reward fine-tuning (strategy from config)",
                           "ancestral sampling to PGM images",
                           "controllability evaluation to CSV",
                           "gradient-tape cost accounting to CSV"};
    std::vector<CLI::App*> subs;
    for (int i = 0; i < 6; ++i) {
        CLI::App* s = app.add_subcommand(names[i], descs[i]);
        s->add_option("--config", config_path, "JSON config path");
        s->add_option("--seed", seed_override, "override the config seed")
            ->each([&](const std::string&) { seed_given = true; });
        s->add_option("--out", out_override, "override the output directory");
        subs.push_back(s);
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const RunConfig c = load_run_config(config_path, seed_given ? &seed_override : nullptr,
                                            out_override);
        std::printf("resolved config:\n%s\n", resolved_config_json(c).c_str());
        std::fflush(stdout);
        if (subs[0]->parsed()) return run_gen_data(c);
        if (subs[1]->parsed()) return run_pretrain(c);
        if (subs[2]->parsed()) return run_finetune(c);
        if (subs[3]->parsed()) return run_sample(c);
        if (subs[4]->parsed()) return run_eval(c);
        if (subs[5]->parsed()) return run_bench_tape(c);
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
