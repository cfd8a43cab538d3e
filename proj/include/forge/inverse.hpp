#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "forge/demo.hpp"
#include "forge/forward.hpp"
#include "forge/problem.hpp"
#include "forge/sls.hpp"
#include "forge/solver.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// Gain and nominal recovery
// ---------------------------------------------------------------------------

struct DifferenceMatrices {
    Matrix U_tilde;   // n_iT x (D-1)
    Matrix Y_tilde;   // n_oT x (D-1)
};

// Consecutive-demo differences; outputs are sliced to the first T blocks
// (controls never read y_T).
inline DifferenceMatrices stack_differences(const DemoSet& demos, int n_o, int T) {
    const int D = demos.count();
    if (D < 2) throw std::invalid_argument("stack_differences: need at least two demonstrations");
    const int niT = static_cast<int>(demos.demos[0].u.size());
    DifferenceMatrices diff;
    diff.U_tilde = Matrix::Zero(niT, D - 1);
    diff.Y_tilde = Matrix::Zero(n_o * T, D - 1);
    for (int d = 0; d + 1 < D; ++d) {
        diff.U_tilde.col(d) = demos.demos[d + 1].u - demos.demos[d].u;
        diff.Y_tilde.col(d) =
            demos.demos[d + 1].y.head(n_o * T) - demos.demos[d].y.head(n_o * T);
    }
    return diff;
}

struct GainDiagnostics {
    int rank = 0;
    bool rich = false;            // rank == n_oT
    double projection = 0.0;      // magnitude removed by the causality projection
    double fit_residual = 0.0;    // ||U - K Y||_F after projection
};

inline std::pair<FeedbackGain, GainDiagnostics> recover_gain(const DifferenceMatrices& diff,
                                                             int n_i, int n_o, int T) {
    Eigen::CompleteOrthogonalDecomposition<Matrix> cod(diff.Y_tilde);
    cod.setThreshold(1e-10);
    GainDiagnostics diag;
    diag.rank = static_cast<int>(cod.rank());
    diag.rich = diag.rank == n_o * T;

    FeedbackGain gain;
    gain.K = diff.U_tilde * Matrix(cod.pseudoInverse());
    gain.n_i = n_i;
    gain.n_o = n_o;
    gain.T = T;
    // project onto the causal (block lower-triangular) cone
    double proj = 0.0;
    for (int i = 0; i < T; ++i)
        for (int j = i + 1; j < T; ++j) {
            auto block = gain.K.block(i * n_i, j * n_o, n_i, n_o);
            proj = std::max(proj, block.cwiseAbs().maxCoeff());
            block.setZero();
        }
    diag.projection = proj;
    diag.fit_residual = (diff.U_tilde - gain.K * diff.Y_tilde).norm();
    return {gain, diag};
}

struct NominalRecovery {
    Vector z;          // n(T+1); terminal block by propagation
    Vector v;          // n_iT
    Matrix gamma;      // (n+n_i)T square
    double gamma_cond = 0.0;
};

// Nominal recovery through the stacked linear system
//   [[I - ZA, -ZB], [-K C, I]] [z_{0..T-1}; v] = [xbar, 0, ...; mean(u - K y)].
inline NominalRecovery recover_nominal(const DemoSet& demos, const FeedbackGain& K,
                                       const LtvSystem& sys, const BlockOperators& ops) {
    const int nT = sys.n * sys.T;
    const int niT = sys.n_i * sys.T;
    NominalRecovery rec;
    rec.gamma = Matrix::Zero(nT + niT, nT + niT);
    rec.gamma.topLeftCorner(nT, nT) = Matrix::Identity(nT, nT) - ops.Z * ops.calA;
    rec.gamma.topRightCorner(nT, niT) = -ops.Z * ops.calB;
    rec.gamma.bottomLeftCorner(niT, nT) = -K.K * ops.calC;
    rec.gamma.bottomRightCorner(niT, niT) = Matrix::Identity(niT, niT);

    Eigen::JacobiSVD<Matrix> svd(rec.gamma, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const double smin = svd.singularValues().minCoeff();
    rec.gamma_cond = smin > 0 ? svd.singularValues().maxCoeff() / smin : kInf;
    if (!(rec.gamma_cond < 1e12))
        throw std::runtime_error(
            "recover_nominal: Gamma is numerically singular (cond > 1e12); the demonstration "
            "set does not satisfy the richness/regularity assumption");

    Vector rhs = Vector::Zero(nT + niT);
    rhs.head(sys.n) = sys.x0;
    const int D = demos.count();
    for (const Demonstration& demo : demos.demos)
        rhs.tail(niT) += (demo.u - K.K * demo.y.head(sys.n_o * sys.T)) / D;

    Vector zv = svd.solve(rhs);
    rec.z = Vector::Zero(sys.n * (sys.T + 1));
    rec.z.head(nT) = zv.head(nT);
    rec.v = zv.tail(niT);
    rec.z.tail(sys.n) = sys.A_blocks[sys.T - 1] * zv.segment(nT - sys.n, sys.n) +
                        sys.B_blocks[sys.T - 1] * rec.v.tail(sys.n_i);
    return rec;
}

struct NonlinearRecovery {
    Vector z;
    Vector v;
    double fit_residual = 0.0;   // RMS per-demo control-equation residual
    int iterations = 0;
};

// Damped Newton on the averaged control-consistency equation, with the nominal
// state eliminated by single shooting from xbar.
inline NonlinearRecovery recover_nominal_nonlinear(const DemoSet& demos, const FeedbackGain& K,
                                                   const NonlinearSystem& sys,
                                                   std::optional<Vector> init_guess = std::nullopt) {
    if (demos.count() < 1)
        throw std::invalid_argument("recover_nominal_nonlinear: empty demonstration set");
    const int T = sys.T, n = sys.n, n_i = sys.n_i, n_o = sys.n_o;
    const int niT = n_i * T;

    Matrix calC = Matrix::Zero(n_o * T, n * T);
    for (int t = 0; t < T; ++t) calC.block(t * n_o, t * n, n_o, n) = sys.C_blocks[t];

    Vector cbar = Vector::Zero(niT);
    for (const Demonstration& demo : demos.demos)
        cbar += (demo.u - K.K * demo.y.head(n_o * T)) / demos.count();

    auto shoot = [&](const Vector& v, Matrix* sens) {
        Vector z = Vector::Zero(n * (T + 1));
        z.head(n) = sys.x0;
        if (sens) *sens = Matrix::Zero(n * T, niT);
        Matrix S = Matrix::Zero(n, niT);
        for (int t = 0; t < T; ++t) {
            const Vector zt = z.segment(t * n, n);
            const Vector vt = v.segment(t * n_i, n_i);
            z.segment((t + 1) * n, n) = sys.dynamics_fn(t, zt, vt);
            if (sens && t + 1 < T) {
                auto [dfdx, dfdu] = sys.jacobian_fn
                                        ? sys.jacobian_fn(t, zt, vt)
                                        : finite_difference_jacobians(sys, t, zt, vt);
                S = dfdx * S;
                S.middleCols(t * n_i, n_i) += dfdu;
                sens->middleRows((t + 1) * n, n) = S;
            }
        }
        return z;
    };
    auto residual = [&](const Vector& v, const Vector& z) {
        return Vector(cbar - v + K.K * (calC * z.head(n * T)));
    };

    Vector v = init_guess ? *init_guess : cbar;
    Matrix sens;
    Vector z = shoot(v, &sens);
    Vector g = residual(v, z);
    NonlinearRecovery rec;
    for (int it = 0; it < 50; ++it) {
        rec.iterations = it + 1;
        Matrix J = -Matrix::Identity(niT, niT) + K.K * calC * sens;
        Vector step = J.fullPivLu().solve(-g);
        double alpha = 1.0;
        int fails = 0;
        while (true) {
            Vector v_new = v + alpha * step;
            Vector z_new = shoot(v_new, &sens);
            Vector g_new = residual(v_new, z_new);
            if (g_new.squaredNorm() < g.squaredNorm() || g.norm() < 1e-12) {
                v = v_new; z = z_new; g = g_new;
                break;
            }
            alpha *= 0.5;
            if (++fails >= 5)
                throw std::runtime_error(
                    "recover_nominal_nonlinear: diverged (5 consecutive line-search failures) "
                    "at iteration " + std::to_string(it));
        }
        if ((alpha * step).lpNorm<Eigen::Infinity>() <= 1e-7) break;
    }
    rec.z = z;
    rec.v = v;
    double sq = 0.0;
    for (const Demonstration& demo : demos.demos) {
        Vector r = demo.u - v - K.K * (demo.y.head(n_o * T) - calC * z.head(n * T));
        sq += r.squaredNorm();
    }
    rec.fit_residual = std::sqrt(sq / demos.count());
    return rec;
}

struct RecoveredPolicy {
    FeedbackGain K_tilde;
    SystemResponse phi_tilde;
    Vector z_tilde;   // n(T+1)
    Vector v_tilde;   // n_iT
    Matrix gamma;
    GainDiagnostics gain_diag;
    double gamma_cond = 0.0;
};

inline RecoveredPolicy recover_policy(const DemoSet& demos, const LtvSystem& sys) {
    BlockOperators ops = build_block_operators(sys);
    DifferenceMatrices diff = stack_differences(demos, sys.n_o, sys.T);
    auto [K, diag] = recover_gain(diff, sys.n_i, sys.n_o, sys.T);
    RecoveredPolicy pol;
    pol.K_tilde = K;
    pol.gain_diag = diag;
    pol.phi_tilde = phi_from_k(K, ops);
    NominalRecovery rec = recover_nominal(demos, K, sys, ops);
    pol.z_tilde = rec.z;
    pol.v_tilde = rec.v;
    pol.gamma = rec.gamma;
    pol.gamma_cond = rec.gamma_cond;
    return pol;
}

// ---------------------------------------------------------------------------
// KKT inversion
// ---------------------------------------------------------------------------

struct KktOptions {
    double kkt_tol = 1e-6;          // relaxation applied to every KKT row group
    double M_lambda = 1e3;          // multiplier cap
    SolverSettings solver;
};

// One candidate unknown-constraint row, frozen at the recovered trajectory:
//   g(theta) = const_term - c_theta . theta  (<= 0 when satisfied).
struct UnknownRowInfo {
    int obstacle = 0;
    int t = 0;
    int disjunct = 0;
    Vector a;            // full-stack gradient row (theta-independent)
    double const_term = 0.0;
    Vector c_theta;
    double g_min = 0.0, g_max = 0.0;   // interval over the parameter box
    int lambda_var = -1;
    int s_var = -1;      // -1: selection fixed to 0 by presolve
    int c_var = -1;      // -1: multiplier fixed to 0 by presolve
};

struct KnownRowInfo {
    Vector a;
    double g_value = 0.0;   // constant at the frozen trajectory
    int lambda_var = -1;
    bool active = false;
};

struct KktProgram {
    MathProgram prog;
    int d = 0;
    int theta_off = 0;
    std::vector<KnownRowInfo> known_rows;
    std::vector<UnknownRowInfo> unknown_rows;
    Matrix N;            // dynamics nullspace basis, traj_dim x n_iT
    Vector grad_J;       // cost gradient at the frozen trajectory
    Matrix A_dyn;        // dynamics equality gradient, for nu reconstruction
    double tol_primal = 0.0;
    double tol_stat = 0.0;
    double M_lambda = 0.0;
    bool eta_feasible = true;          // frozen trajectory satisfies known rows
    std::string infeasibility_reason;
};

// Basis of directions (dz, dv) compatible with the nominal dynamics: dz_0 = 0,
// dz_{t+1} = A_t dz_t + B_t dv_t, one column per input coordinate.
inline Matrix dynamics_nullspace(const LtvSystem& sys) {
    Matrix N = Matrix::Zero(sys.traj_dim(), sys.input_stack_dim());
    for (int t = 0; t < sys.T; ++t)
        for (int j = 0; j < sys.n_i; ++j) {
            const int col = t * sys.n_i + j;
            N(sys.u_offset(t) + j, col) = 1.0;
            Vector dz = Vector::Zero(sys.n);
            for (int s = t; s < sys.T; ++s) {
                dz = sys.A_blocks[s] * dz;
                if (s == t) dz += sys.B_blocks[s].col(j);
                N.block(sys.x_offset(s + 1), col, sys.n, 1) = dz;
            }
        }
    return N;
}

inline KktProgram build_kkt_program(const RecoveredPolicy& policy, const ProblemInstance& inst,
                                    const KktOptions& opts = {}) {
    const LtvSystem& sys = inst.system;
    const auto& unk = inst.unknown;
    if (!unk.obstacles.empty() &&
        (!unk.param_lo.allFinite() || !unk.param_up.allFinite()))
        throw std::invalid_argument("build_kkt_program: parameter box must be bounded");

    KktProgram kp;
    kp.d = unk.param_dim;
    kp.M_lambda = opts.M_lambda;
    kp.tol_primal = opts.kkt_tol;

    Vector stack(sys.traj_dim());
    stack << policy.z_tilde, policy.v_tilde;
    const ErrorMaps maps = error_maps(policy.phi_tilde, sys);

    auto [H, f] = cost_quadratic(inst.cost, sys);
    kp.grad_J = H * stack + f;
    kp.N = dynamics_nullspace(sys);
    kp.tol_stat = opts.kkt_tol * (1.0 + (kp.N.transpose() * kp.grad_J).lpNorm<Eigen::Infinity>());

    // dynamics equality gradient (for nu reconstruction)
    kp.A_dyn = Matrix::Zero(sys.n * (sys.T + 1), sys.traj_dim());
    kp.A_dyn.block(0, 0, sys.n, sys.n) = Matrix::Identity(sys.n, sys.n);
    for (int t = 0; t < sys.T; ++t) {
        const int r = sys.n * (t + 1);
        kp.A_dyn.block(r, sys.x_offset(t + 1), sys.n, sys.n) = Matrix::Identity(sys.n, sys.n);
        kp.A_dyn.block(r, sys.x_offset(t), sys.n, sys.n) = -sys.A_blocks[t];
        kp.A_dyn.block(r, sys.u_offset(t), sys.n, sys.n_i) = -sys.B_blocks[t];
    }

    // --- known rows: constraint values are constants at the frozen trajectory
    for (const Halfspace& h : inst.known.halfspaces) {
        TightenedConstraint row = tighten_halfspace(h.a, h.b, maps, inst.noise);
        KnownRowInfo info;
        info.a = h.a;
        info.g_value = row.a.dot(stack) - row.rhs();
        info.active = std::abs(info.g_value) <= kp.tol_primal;
        if (info.g_value > kp.tol_primal) {
            kp.eta_feasible = false;
            kp.infeasibility_reason =
                "known constraint violated at the recovered trajectory by " +
                std::to_string(info.g_value);
        }
        kp.known_rows.push_back(std::move(info));
    }

    // --- unknown rows with interval presolve over the parameter box
    for (std::size_t al = 0; al < unk.obstacles.size(); ++al) {
        const Obstacle& ob = unk.obstacles[al];
        const int hi = obstacle_t_hi(ob, sys);
        for (int t = ob.t_lo; t <= hi; ++t)
            for (std::size_t be = 0; be < ob.disjuncts.size(); ++be) {
                const Disjunct& dis = ob.disjuncts[be];
                Halfspace h = disjunct_halfspace(dis, inst.cost.position_selector, sys, t,
                                                 Vector::Zero(kp.d));
                TightenedConstraint row = tighten_halfspace(h.a, h.b, maps, inst.noise);
                UnknownRowInfo info;
                info.obstacle = static_cast<int>(al);
                info.t = t;
                info.disjunct = static_cast<int>(be);
                info.a = h.a;
                info.const_term = row.a.dot(stack) - dis.c0 + row.margin;
                info.c_theta = dis.c_theta;
                double lo = 0.0, up = 0.0;   // interval of c_theta . theta over the box
                for (int j = 0; j < kp.d; ++j) {
                    const double c = dis.c_theta(j);
                    lo += c * (c >= 0 ? unk.param_lo(j) : unk.param_up(j));
                    up += c * (c >= 0 ? unk.param_up(j) : unk.param_lo(j));
                }
                info.g_min = info.const_term - up;
                info.g_max = info.const_term - lo;
                kp.unknown_rows.push_back(std::move(info));
            }
    }

    // --- variable layout: theta, lambda_known, lambda_unknown, binaries s, c
    int nv = kp.d;
    for (auto& row : kp.known_rows) row.lambda_var = nv++;
    for (auto& row : kp.unknown_rows) row.lambda_var = nv++;
    for (auto& row : kp.unknown_rows)
        if (row.g_min <= kp.tol_primal) row.s_var = nv++;   // else selection impossible
    for (auto& row : kp.unknown_rows)
        if (row.s_var >= 0 && row.g_max >= -kp.tol_primal)
            row.c_var = nv++;   // activity possible somewhere in the box

    MathProgram& prog = kp.prog;
    prog.f = Vector::Zero(nv);
    prog.lo = Vector::Constant(nv, -kInf);
    prog.up = Vector::Constant(nv, kInf);
    if (kp.d > 0) {
        prog.lo.head(kp.d) = unk.param_lo;
        prog.up.head(kp.d) = unk.param_up;
    }
    for (const auto& row : kp.known_rows) {
        prog.lo(row.lambda_var) = 0.0;
        prog.up(row.lambda_var) = row.active ? kp.M_lambda : 0.0;   // inactive => lambda = 0
    }
    for (const auto& row : kp.unknown_rows) {
        prog.lo(row.lambda_var) = 0.0;
        prog.up(row.lambda_var) = row.c_var >= 0 ? kp.M_lambda : 0.0;
        if (row.s_var >= 0) {
            prog.lo(row.s_var) = 0.0;
            prog.up(row.s_var) = 1.0;
            prog.binaries.push_back(row.s_var);
        }
        if (row.c_var >= 0) {
            prog.lo(row.c_var) = 0.0;
            prog.up(row.c_var) = 1.0;
            prog.binaries.push_back(row.c_var);
        }
    }

    std::vector<Vector> in_rows;
    std::vector<double> in_rhs;
    auto add_in = [&](const Vector& a, double b) {
        in_rows.push_back(a);
        in_rhs.push_back(b);
    };

    // primal feasibility and complementarity of unknown rows
    for (const auto& row : kp.unknown_rows) {
        if (row.s_var >= 0 && row.g_max > kp.tol_primal) {
            // g <= tol + M (1 - s)
            const double M = row.g_max - kp.tol_primal + 1.0;
            Vector a = Vector::Zero(nv);
            a.head(kp.d) = -row.c_theta;
            a(row.s_var) = M;
            add_in(a, kp.tol_primal + M - row.const_term);
        }
        if (row.c_var >= 0) {
            // lambda <= M_lambda c,   c <= s,   -g <= tol + M (1 - c)
            Vector a1 = Vector::Zero(nv);
            a1(row.lambda_var) = 1.0;
            a1(row.c_var) = -kp.M_lambda;
            add_in(a1, 0.0);
            Vector a2 = Vector::Zero(nv);
            a2(row.c_var) = 1.0;
            a2(row.s_var) = -1.0;
            add_in(a2, 0.0);
            if (-row.g_min > kp.tol_primal) {
                const double M = -row.g_min - kp.tol_primal + 1.0;
                Vector a3 = Vector::Zero(nv);
                a3.head(kp.d) = row.c_theta;
                a3(row.c_var) = M;
                add_in(a3, kp.tol_primal + M + row.const_term);
            }
        }
    }

    // stationarity over (z, v), reduced onto the dynamics nullspace:
    //   |N' (grad_J + sum lambda a)| <= tol_stat componentwise
    {
        const Vector base = kp.N.transpose() * kp.grad_J;
        Matrix coef = Matrix::Zero(base.size(), nv);
        for (const auto& row : kp.known_rows)
            coef.col(row.lambda_var) = kp.N.transpose() * row.a;
        for (const auto& row : kp.unknown_rows)
            coef.col(row.lambda_var) = kp.N.transpose() * row.a;
        for (int i = 0; i < base.size(); ++i) {
            add_in(coef.row(i).transpose(), kp.tol_stat - base(i));
            add_in(-coef.row(i).transpose(), kp.tol_stat + base(i));
        }
    }

    // one selected disjunct per obstacle/timestep
    std::vector<Vector> eq_rows;
    std::vector<double> eq_rhs;
    {
        std::size_t r = 0;
        while (r < kp.unknown_rows.size()) {
            const int al = kp.unknown_rows[r].obstacle;
            const int t = kp.unknown_rows[r].t;
            Vector a = Vector::Zero(nv);
            bool possible = false;
            while (r < kp.unknown_rows.size() && kp.unknown_rows[r].obstacle == al &&
                   kp.unknown_rows[r].t == t) {
                if (kp.unknown_rows[r].s_var >= 0) {
                    a(kp.unknown_rows[r].s_var) = 1.0;
                    possible = true;
                }
                ++r;
            }
            if (!possible) {
                kp.eta_feasible = false;
                kp.infeasibility_reason =
                    "no disjunct of obstacle " + std::to_string(al) + " at t=" +
                    std::to_string(t) + " is satisfiable anywhere in the parameter box";
            }
            eq_rows.push_back(a);
            eq_rhs.push_back(1.0);
        }
    }

    if (!kp.eta_feasible) {
        // encode a manifestly inconsistent row so solves report Infeasible
        Vector a = Vector::Zero(nv);
        eq_rows.push_back(a);
        eq_rhs.push_back(1.0);
    }

    prog.A_in = Matrix::Zero(static_cast<int>(in_rows.size()), nv);
    prog.b_in = Vector::Zero(static_cast<int>(in_rows.size()));
    for (std::size_t i = 0; i < in_rows.size(); ++i) {
        prog.A_in.row(static_cast<int>(i)) = in_rows[i].transpose();
        prog.b_in(static_cast<int>(i)) = in_rhs[i];
    }
    prog.A_eq = Matrix::Zero(static_cast<int>(eq_rows.size()), nv);
    prog.b_eq = Vector::Zero(static_cast<int>(eq_rows.size()));
    for (std::size_t i = 0; i < eq_rows.size(); ++i) {
        prog.A_eq.row(static_cast<int>(i)) = eq_rows[i].transpose();
        prog.b_eq(static_cast<int>(i)) = eq_rhs[i];
    }
    return kp;
}

struct ParamWitness {
    SolveStatus status = SolveStatus::Infeasible;
    Vector theta;
    Vector lambda_known;
    Vector lambda_unknown;
    Vector nu;
    std::vector<int> selected;         // chosen disjunct row indices
    bool bigM_audit_ok = true;         // no multiplier or slack near its cap
    double stationarity_residual = 0.0;
    long nodes_explored = 0;
};

inline ParamWitness extract_witness(const KktProgram& kp, const Solution& sol) {
    ParamWitness wit;
    wit.status = sol.status;
    wit.nodes_explored = sol.nodes_explored;
    if (sol.status != SolveStatus::Optimal) return wit;
    wit.theta = sol.x.head(kp.d);
    wit.lambda_known = Vector::Zero(static_cast<int>(kp.known_rows.size()));
    for (std::size_t i = 0; i < kp.known_rows.size(); ++i)
        wit.lambda_known(static_cast<int>(i)) = sol.x(kp.known_rows[i].lambda_var);
    wit.lambda_unknown = Vector::Zero(static_cast<int>(kp.unknown_rows.size()));
    for (std::size_t i = 0; i < kp.unknown_rows.size(); ++i) {
        const auto& row = kp.unknown_rows[i];
        wit.lambda_unknown(static_cast<int>(i)) = sol.x(row.lambda_var);
        if (row.s_var >= 0 && sol.x(row.s_var) > 0.5) wit.selected.push_back(static_cast<int>(i));
    }
    // audit the big-M caps: a binding cap means the formulation clipped a
    // genuine solution and the result cannot be trusted
    for (std::size_t i = 0; i < kp.known_rows.size(); ++i)
        if (wit.lambda_known(static_cast<int>(i)) > 0.99 * kp.M_lambda) wit.bigM_audit_ok = false;
    for (std::size_t i = 0; i < kp.unknown_rows.size(); ++i)
        if (wit.lambda_unknown(static_cast<int>(i)) > 0.99 * kp.M_lambda)
            wit.bigM_audit_ok = false;

    // reconstruct the dynamics multipliers by least squares on full stationarity
    Vector grad = kp.grad_J;
    for (std::size_t i = 0; i < kp.known_rows.size(); ++i)
        grad += wit.lambda_known(static_cast<int>(i)) * kp.known_rows[i].a;
    for (std::size_t i = 0; i < kp.unknown_rows.size(); ++i)
        grad += wit.lambda_unknown(static_cast<int>(i)) * kp.unknown_rows[i].a;
    wit.nu = kp.A_dyn.transpose()
                 .completeOrthogonalDecomposition()
                 .solve(-grad);
    wit.stationarity_residual =
        (grad + kp.A_dyn.transpose() * wit.nu).lpNorm<Eigen::Infinity>();
    return wit;
}

inline ParamWitness infer_theta(const KktProgram& kp,
                                std::optional<Vector> fixed_theta = std::nullopt,
                                const SolverSettings& settings = {}) {
    MathProgram prog = kp.prog;
    if (fixed_theta) {
        if (fixed_theta->size() != kp.d)
            throw std::invalid_argument("infer_theta: fixed theta has wrong length");
        prog.lo.head(kp.d) = *fixed_theta;
        prog.up.head(kp.d) = *fixed_theta;
    }
    Solution sol = solve_milp(prog, settings);
    return extract_witness(kp, sol);
}

// Tightest box around F(eta): min/max of each parameter component subject to
// the KKT system. Used by identifiability tests and reporting.
inline std::pair<Vector, Vector> theta_interval(const KktProgram& kp,
                                                const SolverSettings& settings = {}) {
    Vector lo = Vector::Constant(kp.d, std::nan(""));
    Vector up = Vector::Constant(kp.d, std::nan(""));
    for (int j = 0; j < kp.d; ++j) {
        MathProgram prog = kp.prog;
        prog.f = Vector::Zero(prog.num_vars());
        prog.f(j) = 1.0;
        Solution smin = solve_milp(prog, settings);
        if (smin.status == SolveStatus::Optimal) lo(j) = smin.x(j);
        prog.f(j) = -1.0;
        Solution smax = solve_milp(prog, settings);
        if (smax.status == SolveStatus::Optimal) up(j) = smax.x(j);
    }
    return {lo, up};
}

// ---------------------------------------------------------------------------
// Guaranteed-safe / guaranteed-unsafe grid classification
// ---------------------------------------------------------------------------

enum class CellVerdict { GuaranteedSafe, GuaranteedUnsafe, Unknown };

inline const char* to_string(CellVerdict v) {
    switch (v) {
        case CellVerdict::GuaranteedSafe: return "GuaranteedSafe";
        case CellVerdict::GuaranteedUnsafe: return "GuaranteedUnsafe";
        case CellVerdict::Unknown: return "Unknown";
    }
    return "?";
}

struct CellResult {
    CellVerdict verdict = CellVerdict::Unknown;
    bool solver_limit = false;   // node limit forced the conservative fallback
};

namespace detail {

// interval of a linear form over a box
inline std::pair<double, double> linear_range(const Vector& c, const Vector& lo,
                                              const Vector& up) {
    double mn = 0.0, mx = 0.0;
    for (int j = 0; j < c.size(); ++j) {
        mn += c(j) * (c(j) >= 0 ? lo(j) : up(j));
        mx += c(j) * (c(j) >= 0 ? up(j) : lo(j));
    }
    return {mn, mx};
}

} // namespace detail

// Tightest axis-aligned box around the parameter-consistency set F(eta~).
// Classification against this superset is sound for both verdicts: a safe
// claim over the box implies safety over F, and an unsafe claim likewise. It
// is exact whenever the active faces pin the parameters componentwise.
struct ParamBox {
    Vector lo;
    Vector up;
    bool feasible() const { return lo.allFinite() && up.allFinite(); }
};

inline ParamBox theta_box(const KktProgram& kp, const SolverSettings& settings = {}) {
    auto [lo, up] = theta_interval(kp, settings);
    return {lo, up};
}

// Classify one axis-aligned cell [lo, up] in position space against every
// theta in the box: GuaranteedSafe iff no theta puts any obstacle on the
// cell; GuaranteedUnsafe iff no theta lets any point of the cell escape all
// obstacles.
inline CellResult classify_cell(const ProblemInstance& inst, const ParamBox& box,
                                const Vector& cell_lo, const Vector& cell_up,
                                const SolverSettings& settings = {}) {
    const auto& obstacles = inst.unknown.obstacles;
    const int np = static_cast<int>(cell_lo.size());
    const int d = inst.unknown.param_dim;
    CellResult res;
    if (obstacles.empty()) {
        res.verdict = CellVerdict::GuaranteedSafe;
        return res;
    }
    if (!box.feasible()) return res;   // empty/undetermined F: everything Unknown

    // interval screens over (theta in box) x (p in cell)
    auto disjunct_range = [&](const Disjunct& dis, bool escape) {
        // escape: a.p - c(theta); inside: c(theta) - a.p
        auto [p_mn, p_mx] = detail::linear_range(dis.a_pos, cell_lo, cell_up);
        auto [c_mn, c_mx] = detail::linear_range(dis.c_theta, box.lo, box.up);
        c_mn += dis.c0;
        c_mx += dis.c0;
        return escape ? std::make_pair(p_mn - c_mx, p_mx - c_mn)
                      : std::make_pair(c_mn - p_mx, c_mx - p_mn);
    };

    bool any_obstacle_reachable = false;
    for (const Obstacle& ob : obstacles) {
        bool reachable = true;   // can some (theta, p) put p inside this obstacle?
        for (const Disjunct& dis : ob.disjuncts)
            if (disjunct_range(dis, false).first > 0.0) { reachable = false; break; }
        if (reachable) { any_obstacle_reachable = true; break; }
    }
    if (!any_obstacle_reachable) {
        res.verdict = CellVerdict::GuaranteedSafe;
        return res;
    }

    auto base_program = [&](int binaries) {
        MathProgram prog;
        const int nv = d + np + binaries;
        prog.f = Vector::Zero(nv);
        prog.lo = Vector::Constant(nv, -kInf);
        prog.up = Vector::Constant(nv, kInf);
        prog.lo.head(d) = box.lo;
        prog.up.head(d) = box.up;
        prog.lo.segment(d, np) = cell_lo;
        prog.up.segment(d, np) = cell_up;
        for (int b = 0; b < binaries; ++b) {
            prog.lo(d + np + b) = 0.0;
            prog.up(d + np + b) = 1.0;
            prog.binaries.push_back(d + np + b);
        }
        prog.A_eq = Matrix::Zero(0, nv);
        prog.b_eq = Vector::Zero(0);
        prog.A_in = Matrix::Zero(0, nv);
        prog.b_in = Vector::Zero(0);
        return prog;
    };
    auto append_in = [](MathProgram& prog, const Vector& a, double b) {
        prog.A_in.conservativeResize(prog.A_in.rows() + 1, Eigen::NoChange);
        prog.A_in.row(prog.A_in.rows() - 1) = a.transpose();
        prog.b_in.conservativeResize(prog.b_in.size() + 1);
        prog.b_in(prog.b_in.size() - 1) = b;
    };
    auto append_eq = [](MathProgram& prog, const Vector& a, double b) {
        prog.A_eq.conservativeResize(prog.A_eq.rows() + 1, Eigen::NoChange);
        prog.A_eq.row(prog.A_eq.rows() - 1) = a.transpose();
        prog.b_eq.conservativeResize(prog.b_eq.size() + 1);
        prog.b_eq(prog.b_eq.size() - 1) = b;
    };

    // --- safe query: some theta and some p in the cell inside an obstacle
    SolveStatus safe_status;
    {
        const int n_ob = static_cast<int>(obstacles.size());
        MathProgram prog = base_program(n_ob);
        const int o_off = d + np;
        Vector sum = Vector::Zero(prog.num_vars());
        for (int al = 0; al < n_ob; ++al) {
            sum(o_off + al) = 1.0;
            for (const Disjunct& dis : obstacles[al].disjuncts) {
                // inside: c(theta) - a.p <= M (1 - o_al)
                const double M = std::max(0.0, disjunct_range(dis, false).second) + 1.0;
                Vector a = Vector::Zero(prog.num_vars());
                a.head(d) = dis.c_theta;
                a.segment(d, np) = -dis.a_pos;
                a(o_off + al) = M;
                append_in(prog, a, M - dis.c0);
            }
        }
        append_eq(prog, sum, 1.0);
        Solution sol = solve_milp(prog, settings);
        safe_status = sol.status;
        if (sol.status == SolveStatus::IterLimit) res.solver_limit = true;
    }
    if (safe_status == SolveStatus::Infeasible) {
        res.verdict = CellVerdict::GuaranteedSafe;
        return res;
    }

    // --- unsafe query: some theta and some p in the cell escaping all obstacles
    SolveStatus unsafe_status;
    {
        int nb = 0;
        for (const Obstacle& ob : obstacles) nb += static_cast<int>(ob.disjuncts.size());
        MathProgram prog = base_program(nb);
        int o = d + np;
        for (const Obstacle& ob : obstacles) {
            Vector sum = Vector::Zero(prog.num_vars());
            for (const Disjunct& dis : ob.disjuncts) {
                sum(o) = 1.0;
                // escape: a.p - c(theta) <= M (1 - o)
                const double M = std::max(0.0, disjunct_range(dis, true).second) + 1.0;
                Vector a = Vector::Zero(prog.num_vars());
                a.head(d) = -dis.c_theta;
                a.segment(d, np) = dis.a_pos;
                a(o) = M;
                append_in(prog, a, M + dis.c0);
                ++o;
            }
            append_eq(prog, sum, 1.0);
        }
        Solution sol = solve_milp(prog, settings);
        unsafe_status = sol.status;
        if (sol.status == SolveStatus::IterLimit) res.solver_limit = true;
    }
    if (unsafe_status == SolveStatus::Infeasible && safe_status == SolveStatus::Optimal)
        res.verdict = CellVerdict::GuaranteedUnsafe;
    else
        res.verdict = CellVerdict::Unknown;
    return res;
}

// convenience overload: derive the parameter box from the KKT program
inline CellResult classify_cell(const KktProgram& kp, const ProblemInstance& inst,
                                const Vector& cell_lo, const Vector& cell_up,
                                const SolverSettings& settings = {}) {
    return classify_cell(inst, theta_box(kp, settings), cell_lo, cell_up, settings);
}

struct GridClassification {
    int nx = 0, ny = 0;
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    std::vector<CellResult> cells;   // row-major: cell (i, j) at i * ny + j

    const CellResult& at(int i, int j) const { return cells[i * ny + j]; }
};

inline GridClassification classify_grid(const KktProgram& kp, const ProblemInstance& inst,
                                        double x0, double x1, double y0, double y1, int nx,
                                        int ny, int jobs = 1,
                                        const SolverSettings& settings = {}) {
    GridClassification grid;
    grid.nx = nx;
    grid.ny = ny;
    grid.x0 = x0; grid.x1 = x1; grid.y0 = y0; grid.y1 = y1;
    grid.cells.resize(static_cast<std::size_t>(nx) * ny);
    const double dx = (x1 - x0) / nx, dy = (y1 - y0) / ny;
    const ParamBox box = theta_box(kp, settings);   // shared across all cells
    std::atomic<int> next{0};
    auto worker = [&]() {
        for (int idx = next.fetch_add(1); idx < nx * ny; idx = next.fetch_add(1)) {
            const int i = idx / ny, j = idx % ny;
            Vector lo(2), up(2);
            lo << x0 + i * dx, y0 + j * dy;
            up << x0 + (i + 1) * dx, y0 + (j + 1) * dy;
            grid.cells[idx] = classify_cell(inst, box, lo, up, settings);
        }
    };
    if (jobs <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int k = 0; k < jobs; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return grid;
}

// ---------------------------------------------------------------------------
// Sensitivity analysis
// ---------------------------------------------------------------------------

struct SensitivityReport {
    double rho1 = 0, rho2 = 0, rho3 = 0, rho4 = 0;
    double gamma_norm = 0;
    double epsilon = 0;        // realized max 2-norm transmission perturbation
    double err_K = 0;          // ||dK||_2
    double err_zv = 0;         // ||(dz; dv)||_2 over the T-block stacks
    double bound_K = 0;
    double bound_zv = 0;
    bool ok_K = false;
    bool ok_zv = false;
};

inline SensitivityReport sensitivity_bounds(const DemoSet& corrupted,
                                            const ForwardSolution& truth,
                                            const RecoveredPolicy& recovered,
                                            const LtvSystem& sys) {
    if (!corrupted.corrupted || corrupted.originals.empty())
        throw std::invalid_argument("sensitivity_bounds: need a corrupted set with originals");
    SensitivityReport rep;
    const int D = corrupted.count();
    const int noT = sys.n_o * sys.T;
    const int nT = sys.n * sys.T;

    // uncorrupted difference matrix Y and its pseudoinverse norm
    Matrix Y(noT, D - 1);
    for (int d = 0; d + 1 < D; ++d)
        Y.col(d) = corrupted.originals[d + 1].y.head(noT) - corrupted.originals[d].y.head(noT);
    Eigen::JacobiSVD<Matrix> svd(Y);
    const Vector& sv = svd.singularValues();
    double smin = kInf;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-12 * sv(0)) smin = std::min(smin, sv(i));
    const double ypinv_norm = std::isfinite(smin) && smin > 0 ? 1.0 / smin : kInf;

    BlockOperators ops = build_block_operators(sys);
    NominalRecovery gam = recover_nominal(corrupted, truth.K, sys, ops);   // Gamma at K*
    rep.gamma_norm = gam.gamma.operatorNorm();

    const double root = std::sqrt(static_cast<double>(D - 1));
    rep.rho1 = root * ypinv_norm;
    rep.rho2 = root * rep.gamma_norm * ops.calC.operatorNorm();
    rep.rho3 = root * rep.gamma_norm * ypinv_norm;
    rep.rho4 = rep.gamma_norm * truth.K.K.operatorNorm();

    for (int d = 0; d < D; ++d) {
        const double du = (corrupted.demos[d].u - corrupted.originals[d].u).norm();
        const double dy =
            (corrupted.demos[d].y - corrupted.originals[d].y).head(noT).norm();
        rep.epsilon = std::max({rep.epsilon, du, dy});
    }

    rep.err_K = (recovered.K_tilde.K - truth.K.K).operatorNorm();
    Vector dzv(nT + sys.n_i * sys.T);
    dzv << (recovered.z_tilde.head(nT) - truth.z.head(nT)), (recovered.v_tilde - truth.v);
    rep.err_zv = dzv.norm();

    const double k_norm = recovered.K_tilde.K.operatorNorm();
    rep.bound_K = rep.rho1 * (k_norm + 1.0) * rep.epsilon;
    Vector zv_tilde(nT + sys.n_i * sys.T);
    zv_tilde << recovered.z_tilde.head(nT), recovered.v_tilde;
    const double y1_norm = corrupted.demos[0].y.head(noT).norm();
    rep.bound_zv =
        (rep.rho2 * zv_tilde.norm() + rep.rho3 * y1_norm * (k_norm + 1.0) + rep.rho4) *
        rep.epsilon;
    rep.ok_K = rep.err_K <= rep.bound_K + 1e-12;
    rep.ok_zv = rep.err_zv <= rep.bound_zv + 1e-12;
    return rep;
}

// ---------------------------------------------------------------------------
// Transmission-noise sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    double epsilon = 0;   // commanded per-component corruption level
    int trial = 0;
    double err_z = 0;
    double err_v = 0;
    double err_K = 0;
    double err_theta_active = 0;   // NaN when the KKT program is infeasible
    double bound_K = 0;
    double bound_zv = 0;
};

// Components of theta whose faces are touched by the nominal solution: only
// these are identifiable, so only they enter the sweep's theta error.
inline std::vector<int> active_theta_components(const ProblemInstance& inst,
                                                const ForwardSolution& fwd,
                                                double tol = 1e-6) {
    std::vector<int> comps;
    Vector stack(inst.system.traj_dim());
    stack << fwd.z, fwd.v;
    std::size_t r = 0;
    for (std::size_t al = 0; al < inst.unknown.obstacles.size(); ++al) {
        const Obstacle& ob = inst.unknown.obstacles[al];
        const int hi = obstacle_t_hi(ob, inst.system);
        for (int t = ob.t_lo; t <= hi; ++t, ++r) {
            const auto& row = fwd.unknown_rows[r];
            if (std::abs(row.a.dot(stack) - row.rhs()) > tol) continue;
            const Disjunct& dis = ob.disjuncts[fwd.assignment.choices[al][t - ob.t_lo]];
            for (int j = 0; j < dis.c_theta.size(); ++j)
                if (dis.c_theta(j) != 0.0 &&
                    std::find(comps.begin(), comps.end(), j) == comps.end())
                    comps.push_back(j);
        }
    }
    return comps;
}

inline std::vector<SweepRow> run_noise_sweep(const ProblemInstance& inst,
                                             const ForwardSolution& fwd, int D,
                                             const std::vector<double>& epsilons, int trials,
                                             Rng rng, const KktOptions& base_opts = {}) {
    const LtvSystem& sys = inst.system;
    std::vector<int> active = active_theta_components(inst, fwd);
    std::vector<SweepRow> rows;
    for (std::size_t ei = 0; ei < epsilons.size(); ++ei) {
        const double eps = epsilons[ei];
        for (int trial = 0; trial < trials; ++trial) {
            Rng demo_rng = rng.split(1000 + trial);
            DemoSet clean = generate_demoset(fwd, sys, inst.noise, D,
                                             NoiseStrategy::UniformBall, demo_rng);
            DemoSet noisy = perturb(clean, eps, rng.split(ei * 10000 + trial));
            RecoveredPolicy pol = recover_policy(noisy, sys);
            SensitivityReport rep = sensitivity_bounds(noisy, fwd, pol, sys);

            SweepRow row;
            row.epsilon = eps;
            row.trial = trial;
            row.err_z = (pol.z_tilde - fwd.z).norm();
            row.err_v = (pol.v_tilde - fwd.v).norm();
            row.err_K = rep.err_K;
            row.bound_K = rep.bound_K;
            row.bound_zv = rep.bound_zv;

            // KKT tolerances widened with the corruption level: the frozen
            // trajectory inherits an O(eps) recovery error
            KktOptions opts = base_opts;
            opts.kkt_tol = std::max(opts.kkt_tol, 5.0 * rep.epsilon);
            row.err_theta_active = std::nan("");
            if (!active.empty() && inst.theta_star) {
                KktProgram kp = build_kkt_program(pol, inst, opts);
                ParamWitness wit = infer_theta(kp, std::nullopt, opts.solver);
                if (wit.status == SolveStatus::Optimal) {
                    double err = 0.0;
                    for (int j : active)
                        err = std::max(err, std::abs(wit.theta(j) - (*inst.theta_star)(j)));
                    row.err_theta_active = err;
                }
            }
            rows.push_back(row);
        }
    }
    return rows;
}

} // namespace forge
