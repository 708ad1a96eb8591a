// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the `momentkv` tool: run-config parsing,
// (policy, budget) job expansion, a small worker pool and report writers.

#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "momentkv/error.hpp"
#include "momentkv/metrics.hpp"
#include "momentkv/model.hpp"
#include "momentkv/policies.hpp"
#include "momentkv/simulate.hpp"
#include "momentkv/trace.hpp"

namespace momentkv::cli {

using json = nlohmann::ordered_json;

inline constexpr int kReportSchemaVersion = 1;

enum class RunMode { ClosedLoop, Replay };

inline const char* to_string(RunMode mode) { return mode == RunMode::ClosedLoop ? "closed_loop" : "replay"; }

struct RunConfig {
    std::string run_id = "run";
    RunMode mode = RunMode::ClosedLoop;
    ModelSpec model;
    std::size_t prompt_len = 64;
    std::string trace_path;
    std::vector<PolicyConfig> policies;
    std::vector<std::size_t> decode_budgets{512};
    std::size_t steps = 256;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "reports";
    std::vector<double> alpha_sweep;
    bool renormalize = true;
    std::size_t cdf_window = kRecencyWindow;
    std::size_t oracle_horizon = kOracleHorizon;

    RunConfig() {
        PolicyConfig full;
        full.kind = PolicyKind::FullCache;
        policies = {full, PolicyConfig{}};
    }

    void validate() const {
        if (policies.empty()) {
            throw Error(ErrorCode::InvalidConfig, "at least one policy is required");
        }
        if (decode_budgets.empty()) {
            throw Error(ErrorCode::InvalidConfig, "at least one decode budget is required");
        }
        for (const auto b : decode_budgets) {
            if (b == 0) {
                throw Error(ErrorCode::InvalidConfig, "decode budgets must be >= 1");
            }
        }
        if (run_id.empty()) {
            throw Error(ErrorCode::InvalidConfig, "run_id must not be empty");
        }
        if (mode == RunMode::ClosedLoop) {
            if (!seed) {
                throw Error(ErrorCode::InvalidConfig, "closed_loop runs require a seed");
            }
            if (steps == 0 || prompt_len == 0) {
                throw Error(ErrorCode::InvalidConfig, "steps and prompt_len must be >= 1");
            }
            model.validate();
        } else if (trace_path.empty()) {
            throw Error(ErrorCode::InvalidConfig, "replay runs require a trace path");
        }
        for (const double a : alpha_sweep) {
            if (!(a >= 0.0 && a <= 1.0)) {
                throw Error(ErrorCode::InvalidConfig, "alpha_sweep values must lie in [0, 1]");
            }
        }
    }
};

// ---------------------------------------------------------------------------
// JSON mapping

namespace detail {

inline void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        if (!allowed.contains(key)) {
            throw Error(ErrorCode::InvalidConfig, "unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) {
        out = j.at(key).get<T>();
    }
}

}  // namespace detail

inline PolicyConfig policy_from_json(const json& j) {
    if (!j.is_object()) {
        throw Error(ErrorCode::InvalidConfig, "policy entries must be objects");
    }
    detail::reject_unknown(j, {"kind", "momentum_alpha", "sink_size", "recency_window", "heavy_keep"}, "policy");
    PolicyConfig p;
    if (!j.contains("kind")) {
        throw Error(ErrorCode::InvalidConfig, "policy entry lacks 'kind'");
    }
    p.kind = parse_policy_kind(j.at("kind").get<std::string>());
    detail::read_opt(j, "momentum_alpha", p.momentum_alpha);
    detail::read_opt(j, "sink_size", p.sink_size);
    if (j.contains("recency_window")) {
        p.recency_window = j.at("recency_window").get<std::size_t>();
    }
    if (j.contains("heavy_keep")) {
        p.heavy_keep = j.at("heavy_keep").get<std::size_t>();
    }
    return p;
}

/// Resolved form: optional fields are filled from the budget.
inline json policy_to_json(const PolicyConfig& p) {
    const PolicyConfig r = p.resolved();
    json j;
    j["kind"] = std::string(to_string(r.kind));
    j["decode_budget"] = r.kind == PolicyKind::FullCache ? json(nullptr) : json(r.decode_budget);
    j["momentum_alpha"] = r.momentum_alpha;
    j["sink_size"] = r.sink_size;
    j["recency_window"] = *r.recency_window;
    j["heavy_keep"] = *r.heavy_keep;
    j["label"] = r.label();
    return j;
}

inline RunConfig run_config_from_json(const json& j) {
    try {
        if (!j.is_object()) {
            throw Error(ErrorCode::InvalidConfig, "run config must be a JSON object");
        }
        detail::reject_unknown(j,
                               {"run_id", "mode", "model", "prompt_len", "trace", "policies", "decode_budgets",
                                "steps", "seed", "out_dir", "alpha_sweep", "renormalize", "cdf_window",
                                "oracle_horizon"},
                               "run config");
        RunConfig c;
        detail::read_opt(j, "run_id", c.run_id);
        if (j.contains("mode")) {
            const auto mode = j.at("mode").get<std::string>();
            if (mode == "closed_loop") {
                c.mode = RunMode::ClosedLoop;
            } else if (mode == "replay") {
                c.mode = RunMode::Replay;
            } else {
                throw Error(ErrorCode::InvalidConfig, "mode must be closed_loop or replay");
            }
        }
        if (j.contains("model")) {
            const auto& m = j.at("model");
            detail::reject_unknown(m, {"d_model", "n_heads", "n_layers", "vocab_size", "d_ff"}, "model");
            detail::read_opt(m, "d_model", c.model.d_model);
            detail::read_opt(m, "n_heads", c.model.n_heads);
            detail::read_opt(m, "n_layers", c.model.n_layers);
            detail::read_opt(m, "vocab_size", c.model.vocab_size);
            detail::read_opt(m, "d_ff", c.model.d_ff);
        }
        detail::read_opt(j, "prompt_len", c.prompt_len);
        detail::read_opt(j, "trace", c.trace_path);
        if (j.contains("policies")) {
            c.policies.clear();
            for (const auto& p : j.at("policies")) {
                c.policies.push_back(policy_from_json(p));
            }
        }
        detail::read_opt(j, "decode_budgets", c.decode_budgets);
        detail::read_opt(j, "steps", c.steps);
        if (j.contains("seed")) {
            c.seed = j.at("seed").get<std::uint64_t>();
        }
        detail::read_opt(j, "out_dir", c.out_dir);
        detail::read_opt(j, "alpha_sweep", c.alpha_sweep);
        detail::read_opt(j, "renormalize", c.renormalize);
        detail::read_opt(j, "cdf_window", c.cdf_window);
        detail::read_opt(j, "oracle_horizon", c.oracle_horizon);
        return c;
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, e.what());
    }
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::NotFound, "config file '" + path + "' not found");
    }
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidConfig, path + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// Echo with every default spelled out.
inline json run_config_to_json(const RunConfig& c) {
    json j;
    j["run_id"] = c.run_id;
    j["mode"] = to_string(c.mode);
    if (c.mode == RunMode::ClosedLoop) {
        j["model"] = json{{"d_model", c.model.d_model}, {"n_heads", c.model.n_heads},
                          {"n_layers", c.model.n_layers}, {"vocab_size", c.model.vocab_size},
                          {"d_ff", c.model.d_ff}, {"weight_seed", c.seed.value_or(0)}};
        j["prompt_len"] = c.prompt_len;
        j["steps"] = c.steps;
        j["seed"] = c.seed ? json(*c.seed) : json(nullptr);
    } else {
        j["trace"] = c.trace_path;
        j["renormalize"] = c.renormalize;
    }
    json policies = json::array();
    for (const auto& p : c.policies) {
        policies.push_back(policy_to_json(p));
    }
    j["policies"] = policies;
    j["decode_budgets"] = c.decode_budgets;
    j["alpha_sweep"] = c.alpha_sweep;
    j["cdf_window"] = c.cdf_window;
    j["oracle_horizon"] = c.oracle_horizon;
    j["out_dir"] = c.out_dir;
    return j;
}

// ---------------------------------------------------------------------------
// Jobs

struct Job {
    std::string id;
    PolicyConfig policy;  // decode_budget already set
};

inline std::string sanitize_id(const std::string& raw) {
    std::string out;
    for (const char ch : raw) {
        const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') ||
                        ch == '.' || ch == '-' || ch == '_';
        out.push_back(ok ? ch : '_');
    }
    return out;
}

inline std::string job_id(const std::string& run_id, const PolicyConfig& p) {
    std::ostringstream id;
    id << run_id << '_' << to_string(p.kind);
    if (p.kind == PolicyKind::MomentKV) {
        id << "_a" << p.momentum_alpha;
    }
    if (p.kind != PolicyKind::FullCache) {
        id << "_b" << p.decode_budget;
    }
    return sanitize_id(id.str());
}

/// One job per (policy, budget). FullCache ignores the budget, so it runs once.
inline std::vector<Job> expand_jobs(const RunConfig& c) {
    std::vector<Job> jobs;
    std::set<std::string> seen;
    for (const auto& p : c.policies) {
        for (const auto b : c.decode_budgets) {
            PolicyConfig q = p;
            q.decode_budget = b;
            Job job{job_id(c.run_id, q), q};
            if (seen.insert(job.id).second) {
                jobs.push_back(std::move(job));
            }
        }
    }
    return jobs;
}

/// Worker cap from MOMENTKV_THREADS; defaults to the hardware concurrency.
inline std::size_t worker_cap() {
    std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
    const char* env = std::getenv("MOMENTKV_THREADS");
    if (env == nullptr || *env == '\0') {
        return hw;
    }
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) {
        throw Error(ErrorCode::InvalidConfig, "MOMENTKV_THREADS must be a positive integer");
    }
    return static_cast<std::size_t>(v);
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
    workers = std::max<std::size_t>(1, std::min(workers, n));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                fn(i);
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
}

// ---------------------------------------------------------------------------
// Report writers

namespace detail {

inline std::string fmt(double v) {
    std::ostringstream out;
    out << std::setprecision(12) << v;
    return out.str();
}

inline json optional_json(const std::optional<double>& v) { return v ? json(*v) : json("n/a"); }

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error(ErrorCode::IoError, "cannot write '" + path.string() + "'");
    }
    return out;
}

inline bool steady_state_timing(const PolicyReport& r) { return r.policy.kind != PolicyKind::FullCache; }

}  // namespace detail

inline json timing_to_json(const TimingSummary& t) {
    return json{{"policy_label", t.policy_label},    {"decode_budget", t.decode_budget},
                {"steps_measured", t.steps_measured}, {"mean_policy_ns", t.mean_policy_ns},
                {"mean_step_ns", t.mean_step_ns},     {"policy_share", t.policy_share}};
}

inline json report_to_json(const PolicyReport& r) {
    json j;
    j["schema_version"] = kReportSchemaVersion;
    j["run_id"] = r.run_id;
    j["mode"] = r.mode;
    j["policy"] = policy_to_json(r.policy);
    j["prefill_len"] = r.prefill_len;
    j["n_layers"] = r.n_layers;
    j["n_steps"] = r.n_steps;
    j["capacity_limit"] = r.capacity_limit == 0 ? json("unbounded") : json(r.capacity_limit);
    j["max_total_size"] = r.max_total_size;
    j["renormalized"] = r.renormalized;
    j["mean_retained_mass"] = r.mean_retained_mass();
    j["heavy_hitter_retention"] = detail::optional_json(r.heavy_hitter_retention);
    j["oracle_agreement"] = r.policy.kind == PolicyKind::FullCache ? json("n/a")
                                                                     : detail::optional_json(r.oracle_agreement);
    j["eviction_events"] = r.evictions.size();
    j["timing"] = timing_to_json(timing_report(r, detail::steady_state_timing(r)));
    j["notes"] = r.notes;
    if (!r.tokens.empty()) {
        j["tokens"] = r.tokens;
    }
    return j;
}

inline void write_steps_csv(std::ostream& out, const PolicyReport& r) {
    std::map<std::pair<std::int64_t, std::size_t>, const EvictionRecord*> victims;
    for (const auto& e : r.evictions) {
        victims[{e.step, e.layer}] = &e;
    }
    out << "step,layer,cache_size_before,cache_size_after,decode_size,evicted,retained_mass,policy_ns,victims\n";
    for (const auto& s : r.steps) {
        out << s.step << ',' << s.layer << ',' << s.cache_size_before << ',' << s.cache_size_after << ','
            << s.decode_size << ',' << s.evicted << ',' << detail::fmt(s.retained_mass) << ',' << s.policy_ns << ',';
        if (const auto it = victims.find({s.step, s.layer}); it != victims.end()) {
            for (std::size_t i = 0; i < it->second->victims.size(); ++i) {
                out << (i ? " " : "") << it->second->victims[i];
            }
        }
        out << '\n';
    }
}

inline void write_cdf_csv(std::ostream& out, const PolicyReport& r, std::size_t window) {
    out << "group,k,token_fraction,cumulative_mass,samples\n";
    auto emit = [&](const CdfCurve& c) {
        for (std::size_t k = 1; k <= c.mass.size(); ++k) {
            out << c.group << ',' << k << ',' << detail::fmt(static_cast<double>(k) / static_cast<double>(window))
                << ',' << detail::fmt(c.mass[k - 1]) << ',' << c.samples << '\n';
        }
    };
    for (const auto& c : r.cdf) {
        emit(c);
    }
    if (!r.cdf.empty()) {
        emit(uniform_diagonal(window));
    }
}

inline void write_timing_csv(std::ostream& out, const PolicyReport& r) {
    out << "step,step_ns,policy_ns,steady_state\n";
    for (std::size_t t = 0; t < r.step_ns.size(); ++t) {
        std::int64_t policy_ns = 0;
        bool full = true;
        for (std::size_t l = 0; l < r.n_layers; ++l) {
            const auto& s = r.steps[t * r.n_layers + l];
            policy_ns += s.policy_ns;
            full = full && s.evicted > 0;
        }
        out << r.steps[t * r.n_layers].step << ',' << r.step_ns[t] << ',' << policy_ns << ',' << (full ? 1 : 0)
            << '\n';
    }
}

/// Writes reports/<run-id>/{report.json, steps.csv, cdf.csv, timing.csv, config.echo}.
inline std::filesystem::path write_report(const std::filesystem::path& out_dir, const PolicyReport& r,
                                          const json& echo, std::size_t cdf_window) {
    const auto dir = out_dir / r.run_id;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw Error(ErrorCode::IoError, "cannot create '" + dir.string() + "': " + ec.message());
    }
    {
        auto out = detail::open_out(dir / "report.json");
        out << report_to_json(r).dump(2) << '\n';
    }
    {
        auto out = detail::open_out(dir / "steps.csv");
        write_steps_csv(out, r);
    }
    {
        auto out = detail::open_out(dir / "cdf.csv");
        write_cdf_csv(out, r, cdf_window);
    }
    {
        auto out = detail::open_out(dir / "timing.csv");
        write_timing_csv(out, r);
    }
    {
        auto out = detail::open_out(dir / "config.echo");
        out << echo.dump(2) << '\n';
        if (!out) {
            throw Error(ErrorCode::IoError, "failed writing '" + (dir / "config.echo").string() + "'");
        }
    }
    return dir;
}

// ---------------------------------------------------------------------------
// Commands

struct JobResult {
    Job job;
    std::optional<PolicyReport> report;
    std::filesystem::path dir;
    std::string error;  // empty on success

    bool ok() const { return error.empty(); }
};

inline bool all_ok(const std::vector<JobResult>& results) {
    return std::all_of(results.begin(), results.end(), [](const JobResult& r) { return r.ok(); });
}

/// Shared inputs of one invocation: the model and prompt, or the trace.
class RunInputs {
public:
    explicit RunInputs(const RunConfig& c) : config_(c) {
        c.validate();
        if (c.mode == RunMode::ClosedLoop) {
            ModelSpec spec = c.model;
            spec.seed = *c.seed;
            model_.emplace(spec);
            prompt_ = make_prompt(c.prompt_len, spec.vocab_size, *c.seed);
        } else {
            trace_ = read_trace(c.trace_path);
        }
    }

    PolicyReport run(const PolicyConfig& policy) const {
        RunOptions opt;
        opt.cdf_window = config_.cdf_window;
        opt.oracle_horizon = config_.oracle_horizon;
        opt.renormalize = config_.renormalize;
        PolicyReport r;
        if (config_.mode == RunMode::ClosedLoop) {
            policy.validate(prompt_.size());
            r = run_closed_loop(*model_, prompt_, policy, config_.steps, opt);
        } else {
            r = replay(*trace_, policy, opt);
        }
        // Budget parity: prefill plus the decode budget, never more.
        if (r.capacity_limit != 0 && r.max_total_size > r.capacity_limit) {
            throw Error(ErrorCode::InvalidConfig, "cache grew to " + std::to_string(r.max_total_size) +
                                                      " past the parity limit " + std::to_string(r.capacity_limit));
        }
        return r;
    }

    const RunConfig& config() const { return config_; }

private:
    RunConfig config_;
    std::optional<ToyModel> model_;
    std::vector<std::int32_t> prompt_;
    std::optional<TraceFile> trace_;
};

inline json job_echo(const RunConfig& c, const Job& job) {
    json j;
    j["run"] = run_config_to_json(c);
    j["job"] = json{{"id", job.id}, {"policy", policy_to_json(job.policy)}};
    return j;
}

/// Runs `jobs` on up to `workers` threads; each writes its own directory.
inline std::vector<JobResult> execute_jobs(const RunInputs& inputs, const std::vector<Job>& jobs,
                                           std::size_t workers) {
    std::vector<JobResult> results(jobs.size());
    const auto& c = inputs.config();
    parallel_for(jobs.size(), workers, [&](std::size_t i) {
        JobResult& res = results[i];
        res.job = jobs[i];
        try {
            PolicyReport r = inputs.run(jobs[i].policy);
            r.run_id = jobs[i].id;
            res.dir = write_report(c.out_dir, r, job_echo(c, jobs[i]), c.cdf_window);
            res.report = std::move(r);
        } catch (const Error& e) {
            res.error = e.what();
        } catch (const std::exception& e) {
            res.error = std::string("IoError: ") + e.what();
        }
    });
    return results;
}

inline std::vector<JobResult> cmd_simulate(const RunConfig& c, std::ostream& log) {
    const RunInputs inputs(c);
    const auto results = execute_jobs(inputs, expand_jobs(c), worker_cap());
    for (const auto& r : results) {
        if (r.ok()) {
            log << "wrote " << r.dir.string() << '\n';
        } else {
            log << "error: " << r.job.id << ": " << r.error << '\n';
        }
    }
    return results;
}

struct SweepRow {
    double alpha = 0.0;
    std::size_t decode_budget = 0;
    double mean_retained_mass = 0.0;
    std::optional<double> heavy_hitter_retention;
    std::optional<double> oracle_agreement;
    std::string note;
};

inline void write_sweep_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
    out << "alpha,decode_budget,mean_retained_mass,heavy_hitter_retention,oracle_agreement,note\n";
    for (const auto& r : rows) {
        out << detail::fmt(r.alpha) << ',' << r.decode_budget << ',' << detail::fmt(r.mean_retained_mass) << ','
            << (r.heavy_hitter_retention ? detail::fmt(*r.heavy_hitter_retention) : "n/a") << ','
            << (r.oracle_agreement ? detail::fmt(*r.oracle_agreement) : "n/a") << ',' << r.note << '\n';
    }
}

/// MomentKV over every alpha in the sweep (or the configured alphas when
/// the sweep is empty) and every budget. Writes <out>/<run-id>_sweep/sweep.csv.
inline std::vector<JobResult> cmd_sweep_alpha(const RunConfig& c, std::ostream& log,
                                              std::vector<SweepRow>* rows_out = nullptr) {
    const auto base = std::find_if(c.policies.begin(), c.policies.end(),
                                   [](const PolicyConfig& p) { return p.kind == PolicyKind::MomentKV; });
    if (base == c.policies.end()) {
        throw Error(ErrorCode::InvalidConfig, "sweep-alpha needs MomentKV in the policy list");
    }
    std::vector<double> alphas = c.alpha_sweep;
    if (alphas.empty()) {
        alphas.push_back(base->momentum_alpha);
    }
    RunConfig sweep = c;
    sweep.policies.clear();
    for (const double a : alphas) {
        PolicyConfig p = *base;
        p.momentum_alpha = a;
        sweep.policies.push_back(p);
    }
    const RunInputs inputs(sweep);
    const auto results = execute_jobs(inputs, expand_jobs(sweep), worker_cap());

    std::vector<SweepRow> rows;
    for (const auto& r : results) {
        if (!r.ok()) {
            log << "error: " << r.job.id << ": " << r.error << '\n';
            continue;
        }
        SweepRow row{r.job.policy.momentum_alpha, r.job.policy.decode_budget, r.report->mean_retained_mass(),
                     r.report->heavy_hitter_retention, r.report->oracle_agreement, ""};
        if (row.alpha == 1.0) {
            row.note = "H2O-equivalent";
        }
        rows.push_back(row);
    }
    std::sort(rows.begin(), rows.end(), [](const SweepRow& a, const SweepRow& b) {
        return std::tie(a.decode_budget, a.alpha) < std::tie(b.decode_budget, b.alpha);
    });
    const auto dir = std::filesystem::path(c.out_dir) / sanitize_id(c.run_id + "_sweep");
    std::filesystem::create_directories(dir);
    {
        auto out = detail::open_out(dir / "sweep.csv");
        write_sweep_csv(out, rows);
    }
    write_sweep_csv(log, rows);
    log << "wrote " << (dir / "sweep.csv").string() << '\n';
    if (rows_out != nullptr) {
        *rows_out = rows;
    }
    return results;
}

struct BenchRow {
    std::string label;
    std::size_t decode_budget = 0;  // 0 for FullCache
    TimingSummary timing;
    double step_overhead_vs_full = 0.0;  // mean_step_ns / FullCache mean_step_ns
    bool tokens_match_until_first_eviction = true;
};

struct BenchSummary {
    std::vector<BenchRow> rows;
    // MomentKV cost at the largest budget over the smallest, and the
    // budget ratio it must not exceed.
    std::optional<double> scaling_ratio;
    std::optional<double> scaling_bound;
};

inline void write_bench_csv(std::ostream& out, const BenchSummary& s) {
    out << "policy,decode_budget,steps_measured,mean_policy_ns,mean_step_ns,policy_share,step_overhead_vs_full,"
           "tokens_match_until_first_eviction\n";
    for (const auto& r : s.rows) {
        out << r.label << ',' << r.decode_budget << ',' << r.timing.steps_measured << ','
            << detail::fmt(r.timing.mean_policy_ns) << ',' << detail::fmt(r.timing.mean_step_ns) << ','
            << detail::fmt(r.timing.policy_share) << ',' << detail::fmt(r.step_overhead_vs_full) << ','
            << (r.tokens_match_until_first_eviction ? "true" : "false") << '\n';
    }
    if (s.scaling_ratio) {
        out << "# MomentKV scaling ratio " << detail::fmt(*s.scaling_ratio) << " (linear bound "
            << detail::fmt(*s.scaling_bound) << ", " << (*s.scaling_ratio <= *s.scaling_bound ? "ok" : "exceeded")
            << ")\n";
    }
}

/// Closed loop only. Jobs run one at a time so timings do not contend.
inline std::vector<JobResult> cmd_bench(const RunConfig& c, std::ostream& log, BenchSummary* summary_out = nullptr) {
    if (c.mode != RunMode::ClosedLoop) {
        throw Error(ErrorCode::ModeError, "bench requires closed_loop mode");
    }
    RunConfig bench = c;
    if (std::none_of(c.policies.begin(), c.policies.end(),
                     [](const PolicyConfig& p) { return p.kind == PolicyKind::FullCache; })) {
        PolicyConfig full;
        full.kind = PolicyKind::FullCache;
        bench.policies.insert(bench.policies.begin(), full);
    }
    const RunInputs inputs(bench);
    const auto results = execute_jobs(inputs, expand_jobs(bench), 1);

    BenchSummary s;
    const PolicyReport* full = nullptr;
    for (const auto& r : results) {
        if (r.ok() && r.report->policy.kind == PolicyKind::FullCache) {
            full = &*r.report;
        }
    }
    std::map<std::size_t, double> moment_cost;
    for (const auto& r : results) {
        if (!r.ok()) {
            log << "error: " << r.job.id << ": " << r.error << '\n';
            continue;
        }
        const auto& rep = *r.report;
        BenchRow row;
        row.label = rep.policy_label;
        row.timing = timing_report(rep, detail::steady_state_timing(rep));
        row.decode_budget = row.timing.decode_budget;
        if (full != nullptr) {
            const auto full_t = timing_report(*full);
            row.step_overhead_vs_full = full_t.mean_step_ns > 0 ? row.timing.mean_step_ns / full_t.mean_step_ns : 0;
            const std::int64_t first = rep.evictions.empty() ? static_cast<std::int64_t>(rep.tokens.size()) + 1
                                                             : rep.evictions.front().step;
            // Tokens fed at steps <= first are produced before any eviction.
            const auto n = std::min<std::size_t>(static_cast<std::size_t>(first), rep.tokens.size());
            row.tokens_match_until_first_eviction =
                std::equal(rep.tokens.begin(), rep.tokens.begin() + static_cast<std::ptrdiff_t>(n),
                           full->tokens.begin());
        }
        if (rep.policy.kind == PolicyKind::MomentKV) {
            moment_cost[rep.policy.decode_budget] = row.timing.mean_policy_ns;
        }
        s.rows.push_back(row);
    }
    if (moment_cost.size() >= 2) {
        const auto& lo = *moment_cost.begin();
        const auto& hi = *moment_cost.rbegin();
        if (lo.second > 0.0) {
            s.scaling_ratio = hi.second / lo.second;
            s.scaling_bound = static_cast<double>(hi.first) / static_cast<double>(lo.first);
        }
    }
    const auto dir = std::filesystem::path(c.out_dir) / sanitize_id(c.run_id + "_bench");
    std::filesystem::create_directories(dir);
    {
        auto out = detail::open_out(dir / "bench.csv");
        write_bench_csv(out, s);
    }
    write_bench_csv(log, s);
    log << "wrote " << (dir / "bench.csv").string() << '\n';
    if (summary_out != nullptr) {
        *summary_out = std::move(s);
    }
    return results;
}

// ---------------------------------------------------------------------------
// gen-trace

struct GenTraceParams {
    std::string kind = "heavy-hitter";  // or recency-burst
    std::size_t prefill_len = 64;
    std::size_t n_steps = 512;
    std::size_t n_layers = 1;
    std::uint64_t seed = 0;
    std::vector<HitterSpec> hitters;
    std::vector<DipSpec> dips;
    HeavyHitterOptions options;  // n_layers is taken from the field above
    double concentration = 0.1;
    std::size_t window = kRecencyWindow;
    std::string out_path;
};

/// "pos:mass"
inline HitterSpec parse_hitter(const std::string& s) {
    HitterSpec h;
    char colon = 0;
    std::istringstream in(s);
    if (!(in >> h.position >> colon >> h.base_mass) || colon != ':' || !in.eof()) {
        throw Error(ErrorCode::InvalidConfig, "hitter '" + s + "' must look like POS:MASS");
    }
    return h;
}

/// "pos:start:len"
inline DipSpec parse_dip(const std::string& s) {
    DipSpec d;
    char c1 = 0;
    char c2 = 0;
    std::istringstream in(s);
    if (!(in >> d.position >> c1 >> d.start_step >> c2 >> d.dip_len) || c1 != ':' || c2 != ':' || !in.eof()) {
        throw Error(ErrorCode::InvalidConfig, "dip '" + s + "' must look like POS:START:LEN");
    }
    return d;
}

inline TraceFile generate_trace(const GenTraceParams& p) {
    if (p.kind == "heavy-hitter") {
        HeavyHitterOptions opt = p.options;
        opt.n_layers = p.n_layers;
        return gen_heavy_hitter_trace(p.prefill_len, p.n_steps, p.hitters, p.dips, p.seed, opt);
    }
    if (p.kind == "recency-burst") {
        return gen_recency_burst_trace(p.prefill_len, p.n_steps, p.concentration, p.seed, p.n_layers, p.window);
    }
    throw Error(ErrorCode::InvalidConfig, "unknown trace kind '" + p.kind + "'");
}

inline void cmd_gen_trace(const GenTraceParams& p, std::ostream& log) {
    if (p.out_path.empty()) {
        throw Error(ErrorCode::InvalidConfig, "gen-trace needs an output path");
    }
    const TraceFile trace = generate_trace(p);
    const auto parent = std::filesystem::path(p.out_path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    write_trace(p.out_path, trace);
    const auto& h = trace.header;
    log << "wrote " << p.out_path << ": ATTRC01 M=" << h.prefill_len << " T=" << h.n_steps << " L=" << h.n_layers
        << " tag=" << h.model_tag << " hitters=" << h.hitter_positions.size() << '\n';
}

}  // namespace momentkv::cli
