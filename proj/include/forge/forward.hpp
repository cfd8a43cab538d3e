#pragma once

#include <algorithm>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "forge/problem.hpp"
#include "forge/sls.hpp"
#include "forge/solver.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// Noise-to-trajectory error maps. The system response covers x_0..x_{T-1} and
// u_0..u_{T-1}; the terminal state error follows from the last dynamics step,
// which receives no noise under the stack convention (see problem.hpp):
//   dx_T = A_{T-1} dx_{T-1} + B_{T-1} du_{T-1}.
// M_w / M_e map the noise stacks onto the full (x_0..x_T, u_0..u_{T-1}) stack.
// ---------------------------------------------------------------------------
struct ErrorMaps {
    Matrix M_w;   // traj_dim x nT
    Matrix M_e;   // traj_dim x n_oT
};

inline ErrorMaps error_maps(const SystemResponse& phi, const LtvSystem& sys) {
    const int n = sys.n, T = sys.T;
    ErrorMaps maps;
    maps.M_w = Matrix::Zero(sys.traj_dim(), n * T);
    maps.M_e = Matrix::Zero(sys.traj_dim(), sys.n_o * T);
    maps.M_w.topRows(n * T) = phi.phi_xw;
    maps.M_e.topRows(n * T) = phi.phi_xe;
    const auto last_x_w = phi.phi_xw.middleRows((T - 1) * n, n);
    const auto last_x_e = phi.phi_xe.middleRows((T - 1) * n, n);
    const auto last_u_w = phi.phi_uw.middleRows((T - 1) * sys.n_i, sys.n_i);
    const auto last_u_e = phi.phi_ue.middleRows((T - 1) * sys.n_i, sys.n_i);
    maps.M_w.middleRows(T * n, n) = sys.A_blocks[T - 1] * last_x_w + sys.B_blocks[T - 1] * last_u_w;
    maps.M_e.middleRows(T * n, n) = sys.A_blocks[T - 1] * last_x_e + sys.B_blocks[T - 1] * last_u_e;
    maps.M_w.bottomRows(sys.n_i * T) = phi.phi_uw;
    maps.M_e.bottomRows(sys.n_i * T) = phi.phi_ue;
    return maps;
}

// a'(z,v) <= b - margin guarantees a'(x,u) <= b for every noise realization in
// the inf-norm balls; the margin is the dual (l1) norm of the filtered row.
struct TightenedConstraint {
    Vector a;
    double b = 0.0;
    double margin = 0.0;
    double rhs() const { return b - margin; }
};

inline TightenedConstraint tighten_halfspace(const Vector& a, double b, const ErrorMaps& maps,
                                             const NoiseModel& noise) {
    if (a.size() != maps.M_w.rows())
        throw std::invalid_argument("tighten_halfspace: row length does not match trajectory stack");
    TightenedConstraint out;
    out.a = a;
    out.b = b;
    out.margin = noise.w_radius * (a.transpose() * maps.M_w).lpNorm<1>() +
                 noise.e_radius * (a.transpose() * maps.M_e).lpNorm<1>();
    return out;
}

// Worst-case noise vertex for a tightened row: the sign pattern that attains
// the l1 dual norm. Used by robustness tests and the acceptance harness.
inline std::pair<Vector, Vector> adversarial_noise(const Vector& a, const ErrorMaps& maps,
                                                   const NoiseModel& noise) {
    Vector rw = (maps.M_w.transpose() * a);
    Vector re = (maps.M_e.transpose() * a);
    for (int i = 0; i < rw.size(); ++i) rw(i) = (rw(i) >= 0 ? 1.0 : -1.0) * noise.w_radius;
    for (int i = 0; i < re.size(); ++i) re(i) = (re(i) >= 0 ? 1.0 : -1.0) * noise.e_radius;
    return {rw, re};
}

// Full-stack half-space for one obstacle disjunct at time t, at parameter theta:
//   a_pos . p_t - (c0 + c_theta . theta) <= 0.
inline Halfspace disjunct_halfspace(const Disjunct& dis, const Matrix& position_selector,
                                    const LtvSystem& sys, int t, const Vector& theta) {
    Halfspace h;
    h.a = Vector::Zero(sys.traj_dim());
    h.a.segment(sys.x_offset(t), sys.n) = position_selector.transpose() * dis.a_pos;
    h.b = dis.c0 + dis.c_theta.dot(theta);
    return h;
}

// Choice of escape disjunct per obstacle and timestep.
struct DisjunctAssignment {
    // choices[alpha][t - t_lo] = disjunct index beta
    std::vector<std::vector<int>> choices;
};

inline int obstacle_t_hi(const Obstacle& ob, const LtvSystem& sys) {
    return ob.t_hi < 0 ? sys.T : ob.t_hi;
}

// Candidate assignments ordered by seed-path violation: the per-timestep
// best-satisfied disjunct first, then uniform single-disjunct alternatives.
inline std::vector<DisjunctAssignment> enumerate_disjunct_assignments(
    const ProblemInstance& inst, const std::vector<Vector>& seed_positions, int cap = 32) {
    const LtvSystem& sys = inst.system;
    const auto& obstacles = inst.unknown.obstacles;
    if (obstacles.empty()) return {DisjunctAssignment{}};
    if (!inst.theta_star)
        throw std::invalid_argument("enumerate_disjunct_assignments: instance has no ground-truth theta");
    const Vector& theta = *inst.theta_star;

    auto disjunct_value = [&](const Disjunct& dis, int t) {
        return dis.a_pos.dot(seed_positions[t]) - dis.c0 - dis.c_theta.dot(theta);
    };

    DisjunctAssignment heuristic;
    std::vector<std::vector<double>> uniform_violation(obstacles.size());
    for (std::size_t al = 0; al < obstacles.size(); ++al) {
        const Obstacle& ob = obstacles[al];
        const int hi = obstacle_t_hi(ob, sys);
        std::vector<int> pick;
        uniform_violation[al].assign(ob.disjuncts.size(), 0.0);
        for (int t = ob.t_lo; t <= hi; ++t) {
            int best = 0;
            double best_val = kInf;
            for (std::size_t be = 0; be < ob.disjuncts.size(); ++be) {
                const double val = disjunct_value(ob.disjuncts[be], t);
                uniform_violation[al][be] += std::max(0.0, val);
                if (val < best_val) { best_val = val; best = static_cast<int>(be); }
            }
            pick.push_back(best);
        }
        heuristic.choices.push_back(std::move(pick));
    }

    std::vector<DisjunctAssignment> out{heuristic};
    // uniform alternatives: per obstacle, the same disjunct across the window,
    // combined across obstacles in order of total violation
    std::vector<std::vector<int>> order(obstacles.size());
    for (std::size_t al = 0; al < obstacles.size(); ++al) {
        order[al].resize(obstacles[al].disjuncts.size());
        for (std::size_t be = 0; be < order[al].size(); ++be) order[al][be] = static_cast<int>(be);
        std::stable_sort(order[al].begin(), order[al].end(), [&](int a, int b) {
            return uniform_violation[al][a] < uniform_violation[al][b];
        });
    }
    std::vector<int> idx(obstacles.size(), 0);
    while (static_cast<int>(out.size()) < cap) {
        DisjunctAssignment cand;
        for (std::size_t al = 0; al < obstacles.size(); ++al) {
            const Obstacle& ob = obstacles[al];
            const int len = obstacle_t_hi(ob, sys) - ob.t_lo + 1;
            cand.choices.emplace_back(len, order[al][idx[al] % order[al].size()]);
        }
        bool dup = false;
        for (const auto& a : out)
            if (a.choices == cand.choices) { dup = true; break; }
        if (!dup) out.push_back(std::move(cand));
        // advance the mixed-radix counter over per-obstacle uniform choices
        std::size_t al = 0;
        for (; al < obstacles.size(); ++al) {
            if (++idx[al] < static_cast<int>(order[al].size())) break;
            idx[al] = 0;
        }
        if (al == obstacles.size()) break;
    }
    return out;
}

enum class ForwardMode { Joint, FixedPhi };

struct ForwardSolution {
    Vector z;                       // n(T+1)
    Vector v;                       // n_iT
    SystemResponse phi;
    FeedbackGain K;
    DisjunctAssignment assignment;
    double objective = 0.0;
    SolveStatus status = SolveStatus::Infeasible;
    std::vector<TightenedConstraint> known_rows;
    std::vector<TightenedConstraint> unknown_rows;   // rows of the chosen disjuncts
    Vector lambda_known;
    Vector lambda_unknown;
    Vector nu;                      // dynamics multipliers (initial condition + T steps)
};

// Finite-horizon Riccati feedback used as the response design in Joint mode:
// u_t = -L_t pinv(C_t) (y_t - C_t z_t). For state output this is exact LQR.
inline FeedbackGain riccati_gain(const LtvSystem& sys) {
    FeedbackGain gain = zero_gain(sys);
    Matrix P = Matrix::Identity(sys.n, sys.n);
    std::vector<Matrix> L(sys.T);
    for (int t = sys.T - 1; t >= 0; --t) {
        const Matrix& A = sys.A_blocks[t];
        const Matrix& B = sys.B_blocks[t];
        Matrix S = Matrix::Identity(sys.n_i, sys.n_i) + B.transpose() * P * B;
        L[t] = S.ldlt().solve(B.transpose() * P * A);
        P = Matrix::Identity(sys.n, sys.n) + A.transpose() * P * (A - B * L[t]);
    }
    for (int t = 0; t < sys.T; ++t) {
        const Matrix Cpinv = sys.C_blocks[t]
                                 .completeOrthogonalDecomposition()
                                 .pseudoInverse();
        gain.K.block(t * sys.n_i, t * sys.n_o, sys.n_i, sys.n_o) = -L[t] * Cpinv;
    }
    return gain;
}

// Quadratic program over the stacked (z, v): nominal dynamics equalities plus
// all tightened inequality rows for the given disjunct assignment.
struct AssembledForward {
    MathProgram prog;
    std::vector<TightenedConstraint> known_rows;
    std::vector<TightenedConstraint> unknown_rows;
};

inline AssembledForward assemble_forward_program(const ProblemInstance& inst,
                                                 const SystemResponse& phi,
                                                 const DisjunctAssignment& assignment) {
    const LtvSystem& sys = inst.system;
    const int N = sys.traj_dim();
    AssembledForward out;
    auto [H, f] = cost_quadratic(inst.cost, sys);
    out.prog.H = std::move(H);
    out.prog.f = std::move(f);

    // equalities: z_0 = xbar, z_{t+1} = A_t z_t + B_t v_t
    const int ne = sys.n * (sys.T + 1);
    out.prog.A_eq = Matrix::Zero(ne, N);
    out.prog.b_eq = Vector::Zero(ne);
    out.prog.A_eq.block(0, 0, sys.n, sys.n) = Matrix::Identity(sys.n, sys.n);
    out.prog.b_eq.head(sys.n) = sys.x0;
    for (int t = 0; t < sys.T; ++t) {
        const int r = sys.n * (t + 1);
        out.prog.A_eq.block(r, sys.x_offset(t + 1), sys.n, sys.n) =
            Matrix::Identity(sys.n, sys.n);
        out.prog.A_eq.block(r, sys.x_offset(t), sys.n, sys.n) = -sys.A_blocks[t];
        out.prog.A_eq.block(r, sys.u_offset(t), sys.n, sys.n_i) = -sys.B_blocks[t];
    }

    const ErrorMaps maps = error_maps(phi, sys);
    for (const Halfspace& h : inst.known.halfspaces)
        out.known_rows.push_back(tighten_halfspace(h.a, h.b, maps, inst.noise));
    if (!inst.unknown.obstacles.empty()) {
        if (!inst.theta_star)
            throw std::invalid_argument(
                "assemble_forward_program: forward synthesis requires ground-truth theta");
        if (assignment.choices.size() != inst.unknown.obstacles.size())
            throw std::invalid_argument("assemble_forward_program: assignment shape mismatch");
        for (std::size_t al = 0; al < inst.unknown.obstacles.size(); ++al) {
            const Obstacle& ob = inst.unknown.obstacles[al];
            const int hi = obstacle_t_hi(ob, sys);
            for (int t = ob.t_lo; t <= hi; ++t) {
                const int be = assignment.choices[al][t - ob.t_lo];
                Halfspace h = disjunct_halfspace(ob.disjuncts[be], inst.cost.position_selector,
                                                 sys, t, *inst.theta_star);
                out.unknown_rows.push_back(tighten_halfspace(h.a, h.b, maps, inst.noise));
            }
        }
    }

    const int mi = static_cast<int>(out.known_rows.size() + out.unknown_rows.size());
    out.prog.A_in = Matrix::Zero(mi, N);
    out.prog.b_in = Vector::Zero(mi);
    int r = 0;
    for (const auto& row : out.known_rows) {
        out.prog.A_in.row(r) = row.a.transpose();
        out.prog.b_in(r) = row.rhs();
        ++r;
    }
    for (const auto& row : out.unknown_rows) {
        out.prog.A_in.row(r) = row.a.transpose();
        out.prog.b_in(r) = row.rhs();
        ++r;
    }
    return out;
}

namespace detail {

inline std::vector<Vector> seed_positions(const ProblemInstance& inst,
                                          const SystemResponse& phi,
                                          const SolverSettings& settings) {
    // nominal guess: solve the obstacle-free tightened problem
    ProblemInstance relaxed = inst;
    relaxed.unknown.obstacles.clear();
    AssembledForward asm_free = assemble_forward_program(relaxed, phi, DisjunctAssignment{});
    Solution sol = solve_qp(asm_free.prog, settings);
    const LtvSystem& sys = inst.system;
    std::vector<Vector> pos(sys.T + 1);
    const Matrix& P = inst.cost.position_selector;
    for (int t = 0; t <= sys.T; ++t) {
        if (sol.status == SolveStatus::Optimal)
            pos[t] = P * sol.x.segment(sys.x_offset(t), sys.n);
        else
            pos[t] = P * sys.x0;   // degenerate fallback: constraint-free guess unavailable
    }
    return pos;
}

} // namespace detail

inline ForwardSolution solve_forward(const ProblemInstance& inst, ForwardMode mode,
                                     const std::optional<FeedbackGain>& fixed_gain = std::nullopt,
                                     const SolverSettings& settings = {}) {
    ValidationReport rep = validate_instance(inst);
    if (!rep.ok()) {
        std::string msg = "solve_forward: invalid instance:";
        for (const auto& v : rep.violations) msg += "\n  " + v;
        throw std::invalid_argument(msg);
    }
    const LtvSystem& sys = inst.system;
    BlockOperators ops = build_block_operators(sys);

    FeedbackGain K;
    if (mode == ForwardMode::FixedPhi) {
        if (!fixed_gain) throw std::invalid_argument("solve_forward: FixedPhi mode needs a gain");
        K = *fixed_gain;
    } else {
        K = riccati_gain(sys);
    }
    SystemResponse phi = phi_from_k(K, ops);

    const auto assignments =
        enumerate_disjunct_assignments(inst, detail::seed_positions(inst, phi, settings));

    ForwardSolution best;
    best.phi = phi;
    best.K = K;
    bool found = false;
    for (const DisjunctAssignment& assign : assignments) {
        AssembledForward assembled = assemble_forward_program(inst, phi, assign);
        Solution sol = solve_qp(assembled.prog, settings);
        if (sol.status != SolveStatus::Optimal) continue;
        if (!found || sol.objective < best.objective - 1e-9) {
            found = true;
            best.status = SolveStatus::Optimal;
            best.z = sol.x.head(sys.state_stack_dim());
            best.v = sol.x.tail(sys.input_stack_dim());
            best.assignment = assign;
            best.objective = sol.objective;
            best.known_rows = assembled.known_rows;
            best.unknown_rows = assembled.unknown_rows;
            const int mk = static_cast<int>(assembled.known_rows.size());
            best.lambda_known = sol.ineq_multipliers.head(mk);
            best.lambda_unknown = sol.ineq_multipliers.tail(sol.ineq_multipliers.size() - mk);
            best.nu = sol.eq_multipliers;
        }
    }
    if (!found) best.status = SolveStatus::Infeasible;
    return best;
}

// Sequential linearization for nonlinear dynamics: linearize about the current
// nominal, solve the LTV problem, re-linearize, iterate to a fixed point.
inline ForwardSolution solve_forward_nonlinear(ProblemInstance inst, ForwardMode mode,
                                               const std::optional<FeedbackGain>& fixed_gain =
                                                   std::nullopt,
                                               const SolverSettings& settings = {},
                                               int max_rounds = 20, double tol = 1e-6) {
    if (!inst.nonlinear)
        throw std::invalid_argument("solve_forward_nonlinear: instance has no nonlinear dynamics");
    const NonlinearSystem& nl = *inst.nonlinear;
    std::vector<Vector> ref_x(nl.T + 1, nl.x0), ref_u(nl.T, Vector::Zero(nl.n_i));
    for (int t = 0; t < nl.T; ++t) ref_x[t + 1] = nl.dynamics_fn(t, ref_x[t], ref_u[t]);

    ForwardSolution sol;
    for (int round = 0; round < max_rounds; ++round) {
        inst.system = linearize(nl, ref_x, ref_u);
        sol = solve_forward(inst, mode, fixed_gain, settings);
        if (sol.status != SolveStatus::Optimal) return sol;
        double shift = 0.0;
        std::vector<Vector> new_x(nl.T + 1), new_u(nl.T);
        // re-center on the nonlinear rollout of the solved input sequence
        new_x[0] = nl.x0;
        for (int t = 0; t < nl.T; ++t) {
            new_u[t] = sol.v.segment(t * nl.n_i, nl.n_i);
            new_x[t + 1] = nl.dynamics_fn(t, new_x[t], new_u[t]);
        }
        for (int t = 0; t <= nl.T; ++t)
            shift = std::max(shift, (new_x[t] - ref_x[t]).lpNorm<Eigen::Infinity>());
        ref_x = std::move(new_x);
        ref_u = std::move(new_u);
        if (shift <= tol) break;
    }
    // report the nominal as the dynamically consistent nonlinear rollout
    for (int t = 0; t <= nl.T; ++t) sol.z.segment(t * nl.n, nl.n) = ref_x[t];
    return sol;
}

} // namespace forge
