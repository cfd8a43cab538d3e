// forge: trajectory synthesis, demonstration generation, and inverse learning
// of feedback policies and constraint parameters.
//
// Subcommands: forward, demos, recover, infer, classify, sweep, run.
// Global flags: --config, --seed, --out-dir, --jobs, --check.
// FORGE_LOG=debug|info|warn controls stderr verbosity.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "forge/demo.hpp"
#include "forge/forward.hpp"
#include "forge/inverse.hpp"
#include "forge/io.hpp"

namespace fs = std::filesystem;
using namespace forge;

namespace {

enum class LogLevel { Debug = 0, Info = 1, Warn = 2 };

LogLevel log_level() {
    const char* env = std::getenv("FORGE_LOG");
    if (!env) return LogLevel::Warn;
    std::string v(env);
    if (v == "debug") return LogLevel::Debug;
    if (v == "info") return LogLevel::Info;
    return LogLevel::Warn;
}

void log(LogLevel lvl, const std::string& msg) {
    static LogLevel threshold = log_level();
    if (lvl >= threshold) std::cerr << "[forge] " << msg << "\n";
}

struct GlobalOpts {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string out_dir = ".";
    int jobs = 1;
    bool check = false;
};

std::string out_path(const GlobalOpts& g, const std::string& name, const std::string& explicit_out) {
    if (!explicit_out.empty()) return explicit_out;
    fs::create_directories(g.out_dir);
    return (fs::path(g.out_dir) / name).string();
}

json load_config(const GlobalOpts& g) {
    if (g.config.empty()) throw std::runtime_error("--config is required");
    return read_json_file(g.config);
}

std::uint64_t effective_seed(const GlobalOpts& g, const json& cfg) {
    if (g.seed_set) return g.seed;
    if (cfg.contains("seed")) return cfg["seed"].get<std::uint64_t>();
    throw std::runtime_error("no seed: pass --seed or set \"seed\" in the config");
}

std::vector<double> parse_doubles(const std::string& csv) {
    std::vector<double> out;
    std::stringstream ss(csv);
    std::string tok;
    while (std::getline(ss, tok, ',')) out.push_back(std::stod(tok));
    return out;
}

ForwardMode parse_mode(const std::string& mode) {
    if (mode == "joint") return ForwardMode::Joint;
    if (mode == "fixed-phi") return ForwardMode::FixedPhi;
    throw std::runtime_error("unknown --mode \"" + mode + "\" (joint|fixed-phi)");
}

NoiseStrategy parse_strategy(const std::string& s) {
    if (s == "uniform-ball") return NoiseStrategy::UniformBall;
    if (s == "vertex") return NoiseStrategy::Vertex;
    throw std::runtime_error("unknown --strategy \"" + s + "\" (uniform-ball|vertex)");
}

// ---------------------------------------------------------------------------
// pipeline stages (shared by the subcommands and `run`)
// ---------------------------------------------------------------------------

// block-diagonal proportional-derivative state feedback: u_t = -kp P dx - kd V dx,
// where P selects positions and V the matching velocity coordinates
FeedbackGain pd_gain(const LtvSystem& sys, const Matrix& position_selector, double kp,
                     double kd) {
    if (sys.n_o != sys.n)
        throw std::runtime_error("gain_pd requires state output (n_o == n)");
    const int np = static_cast<int>(position_selector.rows());
    if (2 * np != sys.n || sys.n_i != np)
        throw std::runtime_error("gain_pd assumes state layout (positions, velocities) with "
                                 "n = 2 n_p and n_i = n_p");
    Matrix P = position_selector;
    Matrix V = Matrix::Zero(np, sys.n);
    V.rightCols(np) = Matrix::Identity(np, np);
    FeedbackGain gain = zero_gain(sys);
    for (int t = 0; t < sys.T; ++t)
        gain.K.block(t * sys.n_i, t * sys.n_o, sys.n_i, sys.n_o) = -kp * P - kd * V;
    return gain;
}

ForwardSolution stage_forward(const ProblemInstance& inst, const std::string& mode,
                              const std::string& gain_path, const SolverSettings& settings,
                              const json& run = json::object()) {
    std::optional<FeedbackGain> gain;
    if (!gain_path.empty()) gain = gain_from_json(read_json_file(gain_path));
    if (!gain && run.contains("gain_pd"))
        gain = pd_gain(inst.system, inst.cost.position_selector,
                       run["gain_pd"].value("kp", 1.0), run["gain_pd"].value("kd", 1.0));
    ForwardMode m = parse_mode(mode);
    if (m == ForwardMode::FixedPhi && !gain)
        throw std::runtime_error("fixed-phi mode requires --gain");
    log(LogLevel::Info, "forward: mode=" + mode);
    ForwardSolution sol = inst.nonlinear
                              ? solve_forward_nonlinear(inst, m, gain, settings)
                              : solve_forward(inst, m, gain, settings);
    if (sol.status != SolveStatus::Optimal)
        throw std::runtime_error(std::string("forward synthesis failed: ") +
                                 to_string(sol.status));
    log(LogLevel::Info, "forward: objective=" + std::to_string(sol.objective));
    return sol;
}

DemoSet stage_demos(const ProblemInstance& inst, const ForwardSolution& sol, int count,
                    double epsilon, const std::string& strategy, std::uint64_t seed) {
    Rng rng(seed);
    DemoSet clean =
        inst.nonlinear
            ? generate_demoset(sol, *inst.nonlinear, inst.noise, count,
                               parse_strategy(strategy), rng.split(0))
            : generate_demoset(sol, inst.system, inst.noise, count, parse_strategy(strategy),
                               rng.split(0));
    DemoSet out = epsilon > 0.0 ? perturb(clean, epsilon, rng.split(1)) : clean;
    out.rng_seed = seed;
    log(LogLevel::Info, "demos: generated " + std::to_string(out.count()) + " (epsilon=" +
                            std::to_string(epsilon) + ")");
    return out;
}

struct RecoverOutput {
    RecoveredPolicy policy;
    std::optional<NonlinearRecovery> nonlinear;
};

RecoverOutput stage_recover(const ProblemInstance& inst, const DemoSet& demos) {
    RecoverOutput out;
    out.policy = recover_policy(demos, inst.system);
    if (inst.nonlinear) {
        out.nonlinear = recover_nominal_nonlinear(demos, out.policy.K_tilde, *inst.nonlinear);
        out.policy.z_tilde = out.nonlinear->z;
        out.policy.v_tilde = out.nonlinear->v;
    }
    log(LogLevel::Info,
        "recover: rank=" + std::to_string(out.policy.gain_diag.rank) +
            (out.policy.gain_diag.rich ? " (rich)" : " (NOT rich)") +
            " fit_residual=" + std::to_string(out.policy.gain_diag.fit_residual));
    if (!out.policy.gain_diag.rich)
        log(LogLevel::Warn, "recover: demonstration set is not rich; gain is a projection");
    return out;
}

ParamWitness stage_infer(const ProblemInstance& inst, const RecoveredPolicy& pol,
                         const std::optional<Vector>& theta_fixed, const KktOptions& opts,
                         std::optional<std::pair<Vector, Vector>>* interval_out = nullptr) {
    KktProgram kp = build_kkt_program(pol, inst, opts);
    ParamWitness wit = infer_theta(kp, theta_fixed, opts.solver);
    log(LogLevel::Info, std::string("infer: status=") + to_string(wit.status));
    if (wit.status == SolveStatus::Optimal && interval_out)
        *interval_out = theta_interval(kp, opts.solver);
    if (wit.status == SolveStatus::Optimal && !wit.bigM_audit_ok)
        log(LogLevel::Warn, "infer: a multiplier or slack is within 1% of its big-M cap; "
                            "the witness may be clipped");
    return wit;
}

// ---------------------------------------------------------------------------

int run_pipeline(const GlobalOpts& g, const std::string& preset_path) {
    GlobalOpts local = g;
    if (!preset_path.empty()) local.config = preset_path;
    json cfg = load_config(local);
    ProblemInstance inst = problem_from_json(cfg);
    SolverSettings settings = solver_from_json(cfg);
    const std::uint64_t seed = effective_seed(local, cfg);
    const json run = cfg.value("run", json::object());
    const std::string stage_kind = run.value("stage", "classify");
    json manifest;
    manifest["spec_version"] = kSpecVersion;
    manifest["config_hash"] = content_hash(cfg);
    manifest["seed"] = seed;
    manifest["files"] = json::array();
    auto emit = [&](const std::string& name, const std::string& text) {
        const std::string path = out_path(local, name, "");
        write_text_file(path, text);
        manifest["files"].push_back(name);
        log(LogLevel::Info, "wrote " + path);
    };
    std::string current = "forward";
    try {
        // forward
        const std::string mode = run.value("mode", "joint");
        std::string gain_path = run.value("gain", "");
        if (!gain_path.empty() && !fs::path(gain_path).is_absolute())
            gain_path = (fs::path(local.config).parent_path() / gain_path).string();
        ForwardSolution sol = stage_forward(inst, mode, gain_path, settings, run);
        json sol_json = solution_to_json(sol);
        emit("solution.json", sol_json.dump(2) + "\n");

        // demos
        current = "demos";
        const json dcfg = run.value("demos", json::object());
        const int count = dcfg.value("count", 50);
        const double epsilon = dcfg.value("epsilon", 0.0);
        const std::string strategy = dcfg.value("strategy", "uniform-ball");
        DemoSet demos = stage_demos(inst, sol, count, epsilon, strategy, seed);
        emit("demos.json",
             demoset_to_json(demos, seed, strategy, content_hash(sol_json)).dump(2) + "\n");

        // recover
        current = "recover";
        RecoverOutput rec = stage_recover(inst, demos);
        emit("policy.json", policy_to_json(rec.policy).dump(2) + "\n");
        if (local.check) {
            if (!rec.policy.gain_diag.rich)
                throw std::runtime_error("check: demonstration set is not rich");
            if (epsilon == 0.0 &&
                (rec.policy.K_tilde.K - sol.K.K).lpNorm<Eigen::Infinity>() > 1e-6)
                throw std::runtime_error("check: gain recovery error exceeds 1e-6 at epsilon=0");
        }

        // infer
        current = "infer";
        KktOptions opts;
        opts.solver = settings;
        if (run.contains("kkt_tol")) opts.kkt_tol = run["kkt_tol"].get<double>();
        std::optional<std::pair<Vector, Vector>> interval;
        ParamWitness wit;
        if (!inst.unknown.obstacles.empty()) {
            wit = stage_infer(inst, rec.policy, std::nullopt, opts, &interval);
            json wj = interval ? witness_to_json(wit, interval->first, interval->second)
                               : witness_to_json(wit);
            emit("witness.json", wj.dump(2) + "\n");
            if (local.check && wit.status != SolveStatus::Optimal)
                throw std::runtime_error("check: parameter inference infeasible");
            if (local.check && inst.theta_star) {
                KktProgram kp = build_kkt_program(rec.policy, inst, opts);
                ParamWitness star = infer_theta(kp, *inst.theta_star, opts.solver);
                if (star.status != SolveStatus::Optimal)
                    throw std::runtime_error("check: ground-truth parameter rejected");
            }
        }

        // classify or sweep
        if (stage_kind == "classify" && !inst.unknown.obstacles.empty()) {
            current = "classify";
            const json ccfg = run.value("classify", json::object());
            const auto grid_dims = ccfg.value("grid", std::vector<int>{50, 50});
            const auto window = ccfg.value("window", std::vector<double>{-1, 1, -1, 1});
            KktProgram kp = build_kkt_program(rec.policy, inst, opts);
            GridClassification grid =
                classify_grid(kp, inst, window[0], window[1], window[2], window[3],
                              grid_dims[0], grid_dims[1], local.jobs, settings);
            emit("grid.csv", grid_to_csv(grid));
        } else if (stage_kind == "sweep") {
            current = "sweep";
            const json scfg = run.value("sweep", json::object());
            const auto epsilons = scfg.value("epsilons", std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1});
            const int trials = scfg.value("trials", 20);
            const int sweep_count = scfg.value("count", count);
            auto rows = run_noise_sweep(inst, sol, sweep_count, epsilons, trials,
                                        Rng(seed), opts);
            emit("sweep.csv", sweep_to_csv(rows));
            if (local.check)
                for (const auto& r : rows)
                    if (r.err_K > r.bound_K + 1e-12)
                        throw std::runtime_error("check: sweep gain error exceeds its bound");
        }

        manifest["files"].push_back("manifest.json");
        write_json_file(out_path(local, "manifest.json", ""), manifest);
        return 0;
    } catch (const std::exception& ex) {
        write_json_file(out_path(local, "manifest.json", ""), manifest);   // partial manifest
        std::cerr << "stage '" << current << "' failed: " << ex.what() << "\n";
        return 1;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forge: robust trajectory synthesis and inverse constraint learning"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.fallthrough();
    app.add_option("--config", g.config, "problem/config JSON")->envname("FORGE_CONFIG");
    auto* seed_opt = app.add_option("--seed", g.seed, "root RNG seed");
    app.add_option("--out-dir", g.out_dir, "output directory (default .)");
    app.add_option("--jobs", g.jobs, "parallel worker count")->check(CLI::PositiveNumber);
    app.add_flag("--check", g.check, "run acceptance assertions after each stage");

    // forward
    auto* cmd_forward = app.add_subcommand("forward", "synthesize a robust trajectory");
    std::string fwd_mode = "joint", fwd_gain, fwd_out;
    cmd_forward->add_option("--mode", fwd_mode, "joint|fixed-phi");
    cmd_forward->add_option("--gain", fwd_gain, "gain JSON for fixed-phi mode");
    cmd_forward->add_option("--out", fwd_out, "output path (default out-dir/solution.json)");

    // demos
    auto* cmd_demos = app.add_subcommand("demos", "generate noisy closed-loop demonstrations");
    std::string demos_solution, demos_out, demos_strategy = "uniform-ball";
    int demos_count = 50;
    double demos_epsilon = 0.0;
    cmd_demos->add_option("--solution", demos_solution, "solution.json")->required();
    cmd_demos->add_option("--count", demos_count, "number of demonstrations");
    cmd_demos->add_option("--epsilon", demos_epsilon, "transmission corruption level");
    cmd_demos->add_option("--strategy", demos_strategy, "uniform-ball|vertex");
    cmd_demos->add_option("--out", demos_out, "output path (default out-dir/demos.json)");

    // recover
    auto* cmd_recover = app.add_subcommand("recover", "recover the gain and nominal trajectory");
    std::string rec_demos, rec_out;
    cmd_recover->add_option("--demos", rec_demos, "demos.json")->required();
    cmd_recover->add_option("--out", rec_out, "output path (default out-dir/policy.json)");

    // infer
    auto* cmd_infer = app.add_subcommand("infer", "infer constraint parameters by KKT inversion");
    std::string inf_policy, inf_out, inf_theta;
    cmd_infer->add_option("--policy", inf_policy, "policy.json")->required();
    cmd_infer->add_option("--theta-fixed", inf_theta, "comma-separated parameter values to test");
    cmd_infer->add_option("--out", inf_out, "output path (default out-dir/witness.json)");

    // classify
    auto* cmd_classify = app.add_subcommand("classify", "guaranteed-safe/unsafe grid");
    std::string cls_policy, cls_out, cls_grid = "50x50", cls_window = "-1,1,-1,1";
    cmd_classify->add_option("--policy", cls_policy, "policy.json")->required();
    cmd_classify->add_option("--grid", cls_grid, "NXxNY, e.g. 50x50");
    cmd_classify->add_option("--window", cls_window, "x0,x1,y0,y1");
    cmd_classify->add_option("--out", cls_out, "output path (default out-dir/grid.csv)");

    // sweep
    auto* cmd_sweep = app.add_subcommand("sweep", "transmission-noise error sweep");
    std::string swp_solution, swp_out, swp_eps = "1e-4,1e-3,1e-2,1e-1";
    int swp_trials = 20, swp_count = 50;
    cmd_sweep->add_option("--solution", swp_solution, "solution.json")->required();
    cmd_sweep->add_option("--epsilons", swp_eps, "comma-separated corruption levels");
    cmd_sweep->add_option("--trials", swp_trials, "trials per level");
    cmd_sweep->add_option("--count", swp_count, "demonstrations per trial");
    cmd_sweep->add_option("--out", swp_out, "output path (default out-dir/sweep.csv)");

    // run
    auto* cmd_run = app.add_subcommand("run", "full pipeline from a preset or config");
    std::string run_preset;
    cmd_run->add_option("--preset", run_preset,
                        "preset name (fig2-sls|fig3-fixed-gain|fig4-sweep) or a config path");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    try {
        if (cmd_run->parsed()) {
            std::string preset_path;
            if (!run_preset.empty()) {
                preset_path = run_preset;
                if (!fs::exists(preset_path)) {
                    // resolve preset names against the configs directory next to the binary
                    for (const char* root : {"configs", "../configs", "../../configs"}) {
                        fs::path cand = fs::path(root) / (run_preset + ".json");
                        if (fs::exists(cand)) { preset_path = cand.string(); break; }
                    }
                }
                if (!fs::exists(preset_path))
                    throw std::runtime_error("preset not found: " + run_preset);
            }
            return run_pipeline(g, preset_path);
        }

        json cfg = load_config(g);
        ProblemInstance inst = problem_from_json(cfg);
        SolverSettings settings = solver_from_json(cfg);

        if (cmd_forward->parsed()) {
            ForwardSolution sol = stage_forward(inst, fwd_mode, fwd_gain, settings);
            write_json_file(out_path(g, "solution.json", fwd_out), solution_to_json(sol));
        } else if (cmd_demos->parsed()) {
            ForwardSolution sol = solution_from_json(read_json_file(demos_solution));
            const std::uint64_t seed = effective_seed(g, cfg);
            DemoSet set = stage_demos(inst, sol, demos_count, demos_epsilon, demos_strategy, seed);
            write_json_file(out_path(g, "demos.json", demos_out),
                            demoset_to_json(set, seed, demos_strategy,
                                            content_hash(solution_to_json(sol))));
        } else if (cmd_recover->parsed()) {
            DemoSet set = demoset_from_json(read_json_file(rec_demos));
            RecoverOutput rec = stage_recover(inst, set);
            write_json_file(out_path(g, "policy.json", rec_out), policy_to_json(rec.policy));
        } else if (cmd_infer->parsed()) {
            RecoveredPolicy pol = policy_from_json(read_json_file(inf_policy));
            std::optional<Vector> theta;
            if (!inf_theta.empty()) {
                auto vals = parse_doubles(inf_theta);
                theta = Eigen::Map<Vector>(vals.data(), static_cast<int>(vals.size()));
            }
            KktOptions opts;
            opts.solver = settings;
            std::optional<std::pair<Vector, Vector>> interval;
            ParamWitness wit = stage_infer(inst, pol, theta, opts, &interval);
            json wj = interval ? witness_to_json(wit, interval->first, interval->second)
                               : witness_to_json(wit);
            write_json_file(out_path(g, "witness.json", inf_out), wj);
            if (g.check && wit.status != SolveStatus::Optimal) {
                std::cerr << "check: inference infeasible\n";
                return 1;
            }
        } else if (cmd_classify->parsed()) {
            RecoveredPolicy pol = policy_from_json(read_json_file(cls_policy));
            int nx = 50, ny = 50;
            if (sscanf(cls_grid.c_str(), "%dx%d", &nx, &ny) != 2)
                throw std::runtime_error("bad --grid (expected NXxNY)");
            auto w = parse_doubles(cls_window);
            if (w.size() != 4) throw std::runtime_error("bad --window (expected x0,x1,y0,y1)");
            KktOptions opts;
            opts.solver = settings;
            KktProgram kp = build_kkt_program(pol, inst, opts);
            GridClassification grid =
                classify_grid(kp, inst, w[0], w[1], w[2], w[3], nx, ny, g.jobs, settings);
            write_text_file(out_path(g, "grid.csv", cls_out), grid_to_csv(grid));
        } else if (cmd_sweep->parsed()) {
            ForwardSolution sol = solution_from_json(read_json_file(swp_solution));
            const std::uint64_t seed = effective_seed(g, cfg);
            KktOptions opts;
            opts.solver = settings;
            auto rows = run_noise_sweep(inst, sol, swp_count, parse_doubles(swp_eps), swp_trials,
                                        Rng(seed), opts);
            write_text_file(out_path(g, "sweep.csv", swp_out), sweep_to_csv(rows));
        }
        return 0;
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
}
