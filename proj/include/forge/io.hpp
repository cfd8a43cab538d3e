#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "forge/demo.hpp"
#include "forge/dynamics.hpp"
#include "forge/forward.hpp"
#include "forge/inverse.hpp"
#include "forge/matrix_io.hpp"
#include "forge/problem.hpp"
#include "forge/solver.hpp"

namespace forge {

constexpr int kSpecVersion = 1;

// ---------------------------------------------------------------------------
// Problem schema (spec_version 1)
// ---------------------------------------------------------------------------

namespace detail {

inline const json& need(const json& j, const std::string& key, const std::string& ctx) {
    auto it = j.find(key);
    if (it == j.end()) throw std::invalid_argument("config: missing \"" + key + "\" in " + ctx);
    return *it;
}

inline std::vector<Matrix> matrix_list(const json& j, const std::string& ctx) {
    std::vector<Matrix> out;
    for (const auto& m : j) out.push_back(matrix_from_json(m));
    if (out.empty()) throw std::invalid_argument("config: empty matrix list in " + ctx);
    return out;
}

// known-constraint shorthand: a one-sided bound on a state or input coordinate
// over a time window expands to one halfspace row per timestep
inline void expand_box_rows(const json& box, bool on_state, const LtvSystem& sys,
                            std::vector<Halfspace>& rows) {
    const int index = need(box, "index", "box constraint").get<int>();
    const int t_lo = box.value("t_lo", 0);
    const int t_hi_raw = box.value("t_hi", -1);
    const int t_hi = t_hi_raw < 0 ? (on_state ? sys.T : sys.T - 1) : t_hi_raw;
    const int dim = on_state ? sys.n : sys.n_i;
    if (index < 0 || index >= dim)
        throw std::invalid_argument("config: box constraint index out of range");
    for (int t = t_lo; t <= t_hi; ++t) {
        const int off = (on_state ? sys.x_offset(t) : sys.u_offset(t)) + index;
        if (box.contains("hi")) {
            Vector a = Vector::Zero(sys.traj_dim());
            a(off) = 1.0;
            rows.push_back({a, box["hi"].get<double>()});
        }
        if (box.contains("lo")) {
            Vector a = Vector::Zero(sys.traj_dim());
            a(off) = -1.0;
            rows.push_back({a, -box["lo"].get<double>()});
        }
    }
}

} // namespace detail

inline ProblemInstance problem_from_json(const json& j) {
    if (detail::need(j, "spec_version", "root").get<int>() != kSpecVersion)
        throw std::invalid_argument("config: unsupported spec_version");
    ProblemInstance inst;

    const json& sj = detail::need(j, "system", "root");
    const std::string type = sj.value("type", "ltv");
    if (type == "double_integrator") {
        inst.system = double_integrator(detail::need(sj, "T", "system").get<int>(),
                                        sj.value("dt", 0.1),
                                        vector_from_json(detail::need(sj, "x0", "system")),
                                        sj.value("position_output", false));
    } else if (type == "unicycle") {
        NonlinearSystem nl = unicycle(detail::need(sj, "T", "system").get<int>(),
                                      sj.value("dt", 0.1),
                                      vector_from_json(detail::need(sj, "x0", "system")));
        inst.nonlinear = nl;
        std::vector<Vector> rx(nl.T + 1, nl.x0), ru(nl.T, Vector::Zero(nl.n_i));
        for (int t = 0; t < nl.T; ++t) rx[t + 1] = nl.dynamics_fn(t, rx[t], ru[t]);
        inst.system = linearize(nl, rx, ru);
    } else if (type == "quadcopter12d") {
        inst.system = quadcopter12d(detail::need(sj, "T", "system").get<int>(),
                                    sj.value("dt", 0.05),
                                    vector_from_json(detail::need(sj, "x0", "system")),
                                    sj.value("mass", 0.5), sj.value("gravity", 9.81));
    } else if (type == "ltv") {
        LtvSystem sys;
        sys.T = detail::need(sj, "T", "system").get<int>();
        sys.A_blocks = detail::matrix_list(detail::need(sj, "A", "system"), "system.A");
        sys.B_blocks = detail::matrix_list(detail::need(sj, "B", "system"), "system.B");
        sys.C_blocks = detail::matrix_list(detail::need(sj, "C", "system"), "system.C");
        sys.x0 = vector_from_json(detail::need(sj, "x0", "system"));
        sys.n = static_cast<int>(sys.A_blocks[0].rows());
        sys.n_i = static_cast<int>(sys.B_blocks[0].cols());
        sys.n_o = static_cast<int>(sys.C_blocks[0].rows());
        inst.system = std::move(sys);
    } else {
        throw std::invalid_argument("config: unknown system type \"" + type + "\"");
    }

    const json& nz = detail::need(j, "noise", "root");
    inst.noise.w_radius = detail::need(nz, "w_radius", "noise").get<double>();
    inst.noise.e_radius = detail::need(nz, "e_radius", "noise").get<double>();

    const json& cj = detail::need(j, "cost", "root");
    const std::string kind = detail::need(cj, "kind", "cost").get<std::string>();
    if (kind == "J1") inst.cost.kind = CostKind::J1;
    else if (kind == "J2") inst.cost.kind = CostKind::J2;
    else if (kind == "J3") inst.cost.kind = CostKind::J3;
    else if (kind == "custom") inst.cost.kind = CostKind::CustomQuadratic;
    else throw std::invalid_argument("config: unknown cost kind \"" + kind + "\"");
    if (cj.contains("position_selector"))
        inst.cost.position_selector = matrix_from_json(cj["position_selector"]);
    else {
        // default: first two state coordinates are the position
        inst.cost.position_selector = Matrix::Zero(2, inst.system.n);
        inst.cost.position_selector(0, 0) = inst.cost.position_selector(1, 1) = 1.0;
    }
    if (cj.contains("goal")) inst.cost.goal = vector_from_json(cj["goal"]);
    if (cj.contains("Q")) inst.cost.Q = matrix_from_json(cj["Q"]);
    if (cj.contains("q")) inst.cost.q = vector_from_json(cj["q"]);

    if (j.contains("known"))
        for (const json& row : j["known"]) {
            if (row.contains("a"))
                inst.known.halfspaces.push_back(
                    {vector_from_json(row["a"]), detail::need(row, "b", "known row").get<double>()});
            else if (row.contains("state_box"))
                detail::expand_box_rows(row["state_box"], true, inst.system,
                                        inst.known.halfspaces);
            else if (row.contains("input_box"))
                detail::expand_box_rows(row["input_box"], false, inst.system,
                                        inst.known.halfspaces);
            else
                throw std::invalid_argument("config: known row needs \"a\"/\"b\" or a box");
        }

    if (j.contains("unknown")) {
        const json& uj = j["unknown"];
        inst.unknown.param_dim = detail::need(uj, "param_dim", "unknown").get<int>();
        inst.unknown.param_lo = vector_from_json(detail::need(uj, "param_lo", "unknown"));
        inst.unknown.param_up = vector_from_json(detail::need(uj, "param_up", "unknown"));
        for (const json& oj : detail::need(uj, "obstacles", "unknown")) {
            Obstacle ob;
            ob.t_lo = oj.value("t_lo", 0);
            ob.t_hi = oj.value("t_hi", -1);
            for (const json& dj : detail::need(oj, "disjuncts", "obstacle")) {
                Disjunct dis;
                dis.a_pos = vector_from_json(detail::need(dj, "a_pos", "disjunct"));
                dis.c0 = detail::need(dj, "c0", "disjunct").get<double>();
                dis.c_theta = vector_from_json(detail::need(dj, "c_theta", "disjunct"));
                ob.disjuncts.push_back(std::move(dis));
            }
            inst.unknown.obstacles.push_back(std::move(ob));
        }
    }
    if (j.contains("theta_star")) inst.theta_star = vector_from_json(j["theta_star"]);

    ValidationReport rep = validate_instance(inst);
    if (!rep.ok()) {
        std::string msg = "config: invalid problem instance:";
        for (const auto& v : rep.violations) msg += "\n  " + v;
        throw std::invalid_argument(msg);
    }
    return inst;
}

inline SolverSettings solver_from_json(const json& j) {
    SolverSettings s;
    if (!j.contains("solver")) return s;
    const json& sj = j["solver"];
    s.feas_tol = sj.value("feas_tol", s.feas_tol);
    s.stat_tol = sj.value("stat_tol", s.stat_tol);
    s.int_tol = sj.value("int_tol", s.int_tol);
    s.reg_qp = sj.value("reg_qp", s.reg_qp);
    s.reg_lp = sj.value("reg_lp", s.reg_lp);
    s.max_qp_iters = sj.value("max_qp_iters", s.max_qp_iters);
    s.max_nodes = sj.value("max_nodes", s.max_nodes);
    return s;
}

// ---------------------------------------------------------------------------
// Artifact serialization
// ---------------------------------------------------------------------------

inline json gain_to_json(const FeedbackGain& K) {
    json j;
    j["K"] = to_json(K.K);
    j["n_i"] = K.n_i;
    j["n_o"] = K.n_o;
    j["T"] = K.T;
    return j;
}

inline FeedbackGain gain_from_json(const json& j) {
    FeedbackGain K;
    K.K = matrix_from_json(detail::need(j, "K", "gain"));
    K.n_i = detail::need(j, "n_i", "gain").get<int>();
    K.n_o = detail::need(j, "n_o", "gain").get<int>();
    K.T = detail::need(j, "T", "gain").get<int>();
    return K;
}

inline json solution_to_json(const ForwardSolution& sol) {
    json j;
    j["spec_version"] = kSpecVersion;
    j["status"] = to_string(sol.status);
    j["objective"] = sol.objective;
    j["z"] = to_json(sol.z);
    j["v"] = to_json(sol.v);
    j["gain"] = gain_to_json(sol.K);
    j["phi"] = {{"phi_xw", to_json(sol.phi.phi_xw)},
                {"phi_xe", to_json(sol.phi.phi_xe)},
                {"phi_uw", to_json(sol.phi.phi_uw)},
                {"phi_ue", to_json(sol.phi.phi_ue)}};
    j["assignment"] = sol.assignment.choices;
    return j;
}

inline ForwardSolution solution_from_json(const json& j) {
    ForwardSolution sol;
    const std::string st = detail::need(j, "status", "solution").get<std::string>();
    sol.status = st == "Optimal" ? SolveStatus::Optimal : SolveStatus::Infeasible;
    sol.objective = j.value("objective", 0.0);
    sol.z = vector_from_json(detail::need(j, "z", "solution"));
    sol.v = vector_from_json(detail::need(j, "v", "solution"));
    sol.K = gain_from_json(detail::need(j, "gain", "solution"));
    const json& pj = detail::need(j, "phi", "solution");
    sol.phi.phi_xw = matrix_from_json(detail::need(pj, "phi_xw", "phi"));
    sol.phi.phi_xe = matrix_from_json(detail::need(pj, "phi_xe", "phi"));
    sol.phi.phi_uw = matrix_from_json(detail::need(pj, "phi_uw", "phi"));
    sol.phi.phi_ue = matrix_from_json(detail::need(pj, "phi_ue", "phi"));
    if (j.contains("assignment"))
        sol.assignment.choices = j["assignment"].get<std::vector<std::vector<int>>>();
    return sol;
}

// FNV-1a over a canonical text rendering; stable across platforms
inline std::string content_hash(const json& j) {
    const std::string s = j.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline json demoset_to_json(const DemoSet& set, std::uint64_t seed, const std::string& strategy,
                            const std::string& solution_hash) {
    json j;
    j["spec_version"] = kSpecVersion;
    j["seed"] = seed;
    j["strategy"] = strategy;
    j["epsilon"] = set.epsilon;
    j["corrupted"] = set.corrupted;
    j["solution_hash"] = solution_hash;
    j["demos"] = json::array();
    for (const Demonstration& d : set.demos)
        j["demos"].push_back({{"u", to_json(d.u)}, {"y", to_json(d.y)}});
    if (set.corrupted) {
        j["originals"] = json::array();
        for (const Demonstration& d : set.originals)
            j["originals"].push_back({{"u", to_json(d.u)}, {"y", to_json(d.y)}});
    }
    return j;
}

inline DemoSet demoset_from_json(const json& j) {
    DemoSet set;
    set.epsilon = j.value("epsilon", 0.0);
    set.corrupted = j.value("corrupted", false);
    set.rng_seed = j.value("seed", std::uint64_t{0});
    for (const json& dj : detail::need(j, "demos", "demoset")) {
        Demonstration d;
        d.u = vector_from_json(detail::need(dj, "u", "demo"));
        d.y = vector_from_json(detail::need(dj, "y", "demo"));
        set.demos.push_back(std::move(d));
    }
    if (j.contains("originals"))
        for (const json& dj : j["originals"]) {
            Demonstration d;
            d.u = vector_from_json(detail::need(dj, "u", "demo"));
            d.y = vector_from_json(detail::need(dj, "y", "demo"));
            set.originals.push_back(std::move(d));
        }
    return set;
}

inline json policy_to_json(const RecoveredPolicy& pol) {
    json j;
    j["spec_version"] = kSpecVersion;
    j["gain"] = gain_to_json(pol.K_tilde);
    j["z"] = to_json(pol.z_tilde);
    j["v"] = to_json(pol.v_tilde);
    j["phi"] = {{"phi_xw", to_json(pol.phi_tilde.phi_xw)},
                {"phi_xe", to_json(pol.phi_tilde.phi_xe)},
                {"phi_uw", to_json(pol.phi_tilde.phi_uw)},
                {"phi_ue", to_json(pol.phi_tilde.phi_ue)}};
    j["diagnostics"] = {{"rank", pol.gain_diag.rank},
                        {"rich", pol.gain_diag.rich},
                        {"projection", pol.gain_diag.projection},
                        {"fit_residual", pol.gain_diag.fit_residual},
                        {"gamma_cond", pol.gamma_cond}};
    return j;
}

inline RecoveredPolicy policy_from_json(const json& j) {
    RecoveredPolicy pol;
    pol.K_tilde = gain_from_json(detail::need(j, "gain", "policy"));
    pol.z_tilde = vector_from_json(detail::need(j, "z", "policy"));
    pol.v_tilde = vector_from_json(detail::need(j, "v", "policy"));
    const json& pj = detail::need(j, "phi", "policy");
    pol.phi_tilde.phi_xw = matrix_from_json(detail::need(pj, "phi_xw", "phi"));
    pol.phi_tilde.phi_xe = matrix_from_json(detail::need(pj, "phi_xe", "phi"));
    pol.phi_tilde.phi_uw = matrix_from_json(detail::need(pj, "phi_uw", "phi"));
    pol.phi_tilde.phi_ue = matrix_from_json(detail::need(pj, "phi_ue", "phi"));
    if (j.contains("diagnostics")) {
        const json& dj = j["diagnostics"];
        pol.gain_diag.rank = dj.value("rank", 0);
        pol.gain_diag.rich = dj.value("rich", false);
        pol.gain_diag.projection = dj.value("projection", 0.0);
        pol.gain_diag.fit_residual = dj.value("fit_residual", 0.0);
        pol.gamma_cond = dj.value("gamma_cond", 0.0);
    }
    return pol;
}

inline json witness_to_json(const ParamWitness& wit, const std::optional<Vector>& int_lo = {},
                            const std::optional<Vector>& int_up = {}) {
    json j;
    j["spec_version"] = kSpecVersion;
    j["status"] = to_string(wit.status);
    j["nodes_explored"] = wit.nodes_explored;
    if (wit.status == SolveStatus::Optimal) {
        j["theta"] = to_json(wit.theta);
        j["lambda_known"] = to_json(wit.lambda_known);
        j["lambda_unknown"] = to_json(wit.lambda_unknown);
        j["nu"] = to_json(wit.nu);
        j["selected_rows"] = wit.selected;
        j["bigM_audit_ok"] = wit.bigM_audit_ok;
        j["stationarity_residual"] = wit.stationarity_residual;
    }
    if (int_lo) j["theta_interval_lo"] = to_json(*int_lo);
    if (int_up) j["theta_interval_up"] = to_json(*int_up);
    return j;
}

// ---------------------------------------------------------------------------
// CSV writers
// ---------------------------------------------------------------------------

inline std::string grid_to_csv(const GridClassification& grid) {
    std::ostringstream os;
    os << "cell_i,cell_j,verdict\n";
    for (int i = 0; i < grid.nx; ++i)
        for (int j = 0; j < grid.ny; ++j)
            os << i << ',' << j << ',' << to_string(grid.at(i, j).verdict) << '\n';
    return os.str();
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "epsilon,trial,err_z,err_v,err_K,err_theta_active,bound_K,bound_zv\n";
    os.precision(17);
    for (const SweepRow& r : rows)
        os << r.epsilon << ',' << r.trial << ',' << r.err_z << ',' << r.err_v << ','
           << r.err_K << ',' << r.err_theta_active << ',' << r.bound_K << ','
           << r.bound_zv << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    return j;
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

inline void write_json_file(const std::string& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

} // namespace forge
