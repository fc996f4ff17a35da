#include "runconfig.hpp"

#include <cmath>
#include <set>

#include "ccdiff/io.hpp"
#include "json.hpp"

namespace ccdiff {

namespace {

using nlohmann::json;

void require_keys(const json& obj, const std::string& where,
                  const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!allowed.count(it.key()))
            throw ConfigError("unknown config key '" +
                              (where.empty() ? it.key() : where + "." + it.key()) + "'");
    }
}

template <typename T>
void read_field(const json& obj, const std::string& where, const char* key, T& out) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key '" + (where.empty() ? key : where + "." + key) +
                          "': " + e.what());
    }
}

} // namespace

RunConfig load_run_config(const std::string& config_path, const std::uint64_t* seed_override,
                          const std::string& out_override) {
    RunConfig c;
    if (!config_path.empty()) {
        const std::string text = read_file(config_path);
        json j;
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError(std::string("config is not valid JSON: ") + e.what());
        }
        if (!j.is_object()) throw ConfigError("config root must be a JSON object");
        require_keys(j, "", {"seed", "out", "ckpt_in", "ckpt_out", "data", "train", "reward",
                             "eval", "sample", "bench"});
        read_field(j, "", "seed", c.seed);
        read_field(j, "", "out", c.out);
        read_field(j, "", "ckpt_in", c.ckpt_in);
        read_field(j, "", "ckpt_out", c.ckpt_out);

        if (j.contains("data")) {
            const json& d = j.at("data");
            if (!d.is_object()) throw ConfigError("config key 'data' must be an object");
            require_keys(d, "data", {"path", "n", "H", "W", "kind", "K", "split"});
            read_field(d, "data", "path", c.data_path);
            read_field(d, "data", "n", c.n);
            read_field(d, "data", "H", c.H);
            read_field(d, "data", "W", c.W);
            read_field(d, "data", "K", c.K);
            std::string kind_name;
            read_field(d, "data", "kind", kind_name);
            if (!kind_name.empty()) c.kind = parse_condition_kind(kind_name);
            read_field(d, "data", "split", c.split_fracs);
        }
        if (j.contains("train")) {
            const json& t = j.at("train");
            if (!t.is_object()) throw ConfigError("config key 'train' must be an object");
            require_keys(t, "train",
                         {"T", "t_thre", "lambda", "lr", "batch", "iters", "strategy", "T_sample",
                          "beta_start", "beta_end"});
            read_field(t, "train", "T", c.train.T);
            read_field(t, "train", "t_thre", c.train.t_thre);
            if (t.contains("lambda")) {
                read_field(t, "train", "lambda", c.train.lambda);
                c.lambda_given = true;
            }
            read_field(t, "train", "lr", c.train.lr);
            read_field(t, "train", "batch", c.train.batch);
            read_field(t, "train", "iters", c.train.iters);
            std::string strat;
            read_field(t, "train", "strategy", strat);
            if (!strat.empty()) c.train.strategy = parse_strategy(strat);
            read_field(t, "train", "T_sample", c.train.T_sample);
            read_field(t, "train", "beta_start", c.train.beta_start);
            read_field(t, "train", "beta_end", c.train.beta_end);
        }
        if (j.contains("reward")) {
            const json& r = j.at("reward");
            if (!r.is_object()) throw ConfigError("config key 'reward' must be an object");
            require_keys(r, "reward", {"layers", "lineart", "extractor_iters"});
            read_field(r, "reward", "layers", c.reward_layers);
            read_field(r, "reward", "lineart", c.lineart);
            read_field(r, "reward", "extractor_iters", c.reward_extractor_iters);
        }
        if (j.contains("eval")) {
            const json& e = j.at("eval");
            if (!e.is_object()) throw ConfigError("config key 'eval' must be an object");
            require_keys(e, "eval", {"n", "layers", "extractor_iters"});
            read_field(e, "eval", "n", c.eval_n);
            read_field(e, "eval", "layers", c.eval_layers);
            read_field(e, "eval", "extractor_iters", c.eval_extractor_iters);
        }
        if (j.contains("sample")) {
            const json& s = j.at("sample");
            if (!s.is_object()) throw ConfigError("config key 'sample' must be an object");
            require_keys(s, "sample", {"n"});
            read_field(s, "sample", "n", c.sample_n);
        }
        if (j.contains("bench")) {
            const json& b = j.at("bench");
            if (!b.is_object()) throw ConfigError("config key 'bench' must be an object");
            require_keys(b, "bench", {"t_samples"});
            read_field(b, "bench", "t_samples", c.t_samples);
        }
    }
    if (seed_override) c.seed = *seed_override;
    if (!out_override.empty()) c.out = out_override;
    if (!c.lambda_given) c.train.lambda = default_lambda(c.kind, c.lineart);
    c.train.seed = c.seed;
    return c;
}

std::string resolved_config_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["out"] = c.out;
    j["ckpt_in"] = c.ckpt_in;
    j["ckpt_out"] = c.ckpt_out;
    j["data"] = {{"path", c.resolved_data_path()}, {"n", c.n},          {"H", c.H},
                 {"W", c.W},                       {"kind", condition_kind_name(c.kind)},
                 {"K", c.K},                       {"split", c.split_fracs}};
    j["train"] = {{"T", c.train.T},
                  {"t_thre", c.train.t_thre},
                  {"lambda", c.train.lambda},
                  {"lr", c.train.lr},
                  {"batch", c.train.batch},
                  {"iters", c.train.iters},
                  {"strategy", strategy_name(c.train.strategy)},
                  {"T_sample", c.train.T_sample},
                  {"beta_start", c.train.beta_start},
                  {"beta_end", c.train.beta_end}};
    j["reward"] = {{"layers", c.reward_layers},
                   {"lineart", c.lineart},
                   {"extractor_iters", c.reward_extractor_iters}};
    j["eval"] = {{"n", c.eval_n},
                 {"layers", c.eval_layers},
                 {"extractor_iters", c.eval_extractor_iters}};
    j["sample"] = {{"n", c.sample_n}};
    j["bench"] = {{"t_samples", c.t_samples}};
    return j.dump(2);
}

} // namespace ccdiff
