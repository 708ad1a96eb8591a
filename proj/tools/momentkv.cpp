// SPDX-License-Identifier: Apache-2.0

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "momentkv/runner.hpp"

namespace {

using namespace momentkv;
using namespace momentkv::cli;

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::vector<std::size_t> budgets;
    std::vector<double> alphas;
    std::optional<std::size_t> steps;
    std::string trace_path;
    std::string run_id;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "Run-config JSON file")->check(CLI::ExistingFile);
    cmd->add_option("--out", f.out_dir, "Report directory (default: reports)");
    cmd->add_option("--seed", f.seed, "Seed for the toy model weights and prompt");
    cmd->add_option("--budget", f.budgets, "Decode budget B_d (repeatable)")->take_all();
    cmd->add_option("--alpha", f.alphas, "Momentum alpha (repeatable)")->take_all();
    cmd->add_option("--steps", f.steps, "Decode steps (closed loop)");
    cmd->add_option("--trace", f.trace_path, "ATTRC01 trace to replay");
    cmd->add_option("--run-id", f.run_id, "Prefix for report directories");
}

RunConfig resolve(const CommonFlags& f, std::optional<RunMode> force_mode) {
    RunConfig c = f.config_path.empty() ? RunConfig{} : load_run_config(f.config_path);
    if (force_mode) {
        c.mode = *force_mode;
    }
    if (!f.trace_path.empty()) {
        c.trace_path = f.trace_path;
        if (!force_mode && f.config_path.empty()) {
            c.mode = RunMode::Replay;
        }
    }
    if (!f.out_dir.empty()) {
        c.out_dir = f.out_dir;
    }
    if (f.seed) {
        c.seed = f.seed;
    }
    if (!f.budgets.empty()) {
        c.decode_budgets = f.budgets;
    }
    if (f.steps) {
        c.steps = *f.steps;
    }
    if (!f.run_id.empty()) {
        c.run_id = f.run_id;
    }
    return c;
}

/// --alpha overrides the alpha of every MomentKV entry; several values fan out.
void apply_alphas(RunConfig& c, const std::vector<double>& alphas) {
    if (alphas.empty()) {
        return;
    }
    std::vector<PolicyConfig> out;
    for (const auto& p : c.policies) {
        if (p.kind != PolicyKind::MomentKV) {
            out.push_back(p);
            continue;
        }
        for (const double a : alphas) {
            PolicyConfig q = p;
            q.momentum_alpha = a;
            out.push_back(q);
        }
    }
    c.policies = out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"momentkv: decode-time KV-cache eviction simulator"};
    app.require_subcommand(1);

    CommonFlags sim_flags;
    std::string mode_name;
    auto* simulate = app.add_subcommand("simulate", "Run every (policy, budget) pair and write reports");
    add_common(simulate, sim_flags);
    simulate->add_option("--mode", mode_name, "closed_loop or replay")
        ->check(CLI::IsMember({"closed_loop", "replay"}));

    CommonFlags replay_flags;
    auto* replay_cmd = app.add_subcommand("replay", "Alias of simulate --mode replay");
    add_common(replay_cmd, replay_flags);

    CommonFlags sweep_flags;
    auto* sweep = app.add_subcommand("sweep-alpha", "MomentKV metrics across alpha values");
    add_common(sweep, sweep_flags);

    CommonFlags bench_flags;
    auto* bench = app.add_subcommand("bench", "Per-step policy cost against FullCache (closed loop)");
    add_common(bench, bench_flags);

    GenTraceParams gen;
    std::vector<std::string> hitter_args;
    std::vector<std::string> dip_args;
    auto* gen_cmd = app.add_subcommand("gen-trace", "Write a synthetic ATTRC01 trace");
    gen_cmd->add_option("--kind", gen.kind, "heavy-hitter or recency-burst")
        ->check(CLI::IsMember({"heavy-hitter", "recency-burst"}));
    gen_cmd->add_option("--prefill", gen.prefill_len, "Prompt length M")->capture_default_str();
    gen_cmd->add_option("--steps", gen.n_steps, "Decode steps T")->capture_default_str();
    gen_cmd->add_option("--layers", gen.n_layers, "Layers")->capture_default_str();
    gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
    gen_cmd->add_option("--hitter", hitter_args, "POS:MASS (repeatable)")->take_all();
    gen_cmd->add_option("--dip", dip_args, "POS:START:LEN (repeatable)")->take_all();
    gen_cmd->add_option("--noise", gen.options.noise, "Background jitter in [0, 1)");
    gen_cmd->add_option("--salience-spread", gen.options.salience_spread, "Per-token salience spread");
    gen_cmd->add_option("--recent-mass", gen.options.recent_mass, "Mass on the newest tokens");
    gen_cmd->add_option("--recent-span", gen.options.recent_span, "How many newest tokens share it");
    gen_cmd->add_option("--concentration", gen.concentration, "Burst fraction in (0, 1]")->capture_default_str();
    gen_cmd->add_option("--window", gen.window, "Recency window")->capture_default_str();
    gen_cmd->add_option("--out", gen.out_path, "Output trace path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        std::vector<JobResult> results;
        if (simulate->parsed()) {
            std::optional<RunMode> mode;
            if (mode_name == "closed_loop") {
                mode = RunMode::ClosedLoop;
            } else if (mode_name == "replay") {
                mode = RunMode::Replay;
            }
            RunConfig c = resolve(sim_flags, mode);
            apply_alphas(c, sim_flags.alphas);
            results = cmd_simulate(c, std::cout);
        } else if (replay_cmd->parsed()) {
            RunConfig c = resolve(replay_flags, RunMode::Replay);
            apply_alphas(c, replay_flags.alphas);
            results = cmd_simulate(c, std::cout);
        } else if (sweep->parsed()) {
            RunConfig c = resolve(sweep_flags, std::nullopt);
            if (!sweep_flags.alphas.empty()) {
                c.alpha_sweep = sweep_flags.alphas;
            }
            results = cmd_sweep_alpha(c, std::cout);
        } else if (bench->parsed()) {
            RunConfig c = resolve(bench_flags, std::nullopt);
            apply_alphas(c, bench_flags.alphas);
            results = cmd_bench(c, std::cout);
        } else if (gen_cmd->parsed()) {
            for (const auto& h : hitter_args) {
                gen.hitters.push_back(parse_hitter(h));
            }
            for (const auto& d : dip_args) {
                gen.dips.push_back(parse_dip(d));
            }
            cmd_gen_trace(gen, std::cout);
            return 0;
        }
        return all_ok(results) ? 0 : 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
