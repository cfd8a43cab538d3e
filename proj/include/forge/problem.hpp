#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "forge/matrix_io.hpp"

namespace forge {

// ---------------------------------------------------------------------------
// Stacked-vector layout convention, used by every matrix in the repo:
//   full trajectory stack  (x, u) = (x_0, ..., x_T, u_0, ..., u_{T-1})
//                                   in R^{n(T+1) + n_i T}
//   SLS error stacks        dx = (dx_0, ..., dx_{T-1}),  du = (du_0, ..., du_{T-1})
//   noise stack             w  = (w_0, ..., w_{T-1}) where w_0 perturbs the
//                           initial state (x_0 = xbar + w_0) and w_{t} enters
//                           state x_t for t >= 1; the last dynamics step is
//                           noise-free. Output noise e = (e_0, ..., e_T).
// ---------------------------------------------------------------------------

struct LtvSystem {
    int T = 0;      // horizon steps
    int n = 0;      // state dim
    int n_i = 0;    // input dim
    int n_o = 0;    // output dim
    std::vector<Matrix> A_blocks;   // T blocks, n x n
    std::vector<Matrix> B_blocks;   // T blocks, n x n_i
    std::vector<Matrix> C_blocks;   // T+1 blocks, n_o x n
    Vector x0;                      // initial state xbar

    int state_stack_dim() const { return n * (T + 1); }
    int input_stack_dim() const { return n_i * T; }
    int traj_dim() const { return state_stack_dim() + input_stack_dim(); }
    int x_offset(int t) const { return t * n; }
    int u_offset(int t) const { return n * (T + 1) + t * n_i; }
};

struct NonlinearSystem {
    int T = 0;
    int n = 0;
    int n_i = 0;
    int n_o = 0;
    // next state = dynamics_fn(t, state, input)
    std::function<Vector(int, const Vector&, const Vector&)> dynamics_fn;
    // optional (dfdx, dfdu) at (t, state, input); finite differences otherwise
    std::function<std::pair<Matrix, Matrix>(int, const Vector&, const Vector&)> jacobian_fn;
    std::vector<Matrix> C_blocks;   // T+1 blocks
    Vector x0;
};

struct NoiseModel {
    double w_radius = 0.0;  // inf-norm ball radius of W
    double e_radius = 0.0;  // inf-norm ball radius of E
};

enum class CostKind { J1, J2, J3, CustomQuadratic };

struct CostSpec {
    CostKind kind = CostKind::J1;
    Matrix position_selector;   // n_p x n, extracts p_t from x_t
    Vector goal;                // n_p goal reference (J3)
    Matrix Q;                   // custom: symmetric PSD over the full stack
    Vector q;                   // custom: linear term over the full stack
};

struct Halfspace {
    Vector a;    // row over the full (x, u) stack
    double b = 0.0;
};

struct KnownConstraints {
    std::vector<Halfspace> halfspaces;
};

// One escape half-space of an obstacle: safe via this disjunct when
//   a_pos . p_t - (c0 + c_theta . theta) <= 0.
struct Disjunct {
    Vector a_pos;     // over position coordinates (position_selector image)
    double c0 = 0.0;
    Vector c_theta;   // d entries; c affine in theta
};

struct Obstacle {
    std::vector<Disjunct> disjuncts;
    int t_lo = 0;     // constraint applies for t in [t_lo, t_hi]
    int t_hi = -1;    // -1 means T
};

struct ParametricConstraintFamily {
    std::vector<Obstacle> obstacles;
    int param_dim = 0;
    Vector param_lo;   // bounded box on theta
    Vector param_up;
};

struct BlockOperators {
    Matrix calA;   // nT x nT block diag of A_t
    Matrix calB;   // nT x n_iT block diag of B_t
    Matrix calC;   // n_oT x nT block diag of C_0..C_{T-1}
    Matrix Z;      // nT x nT downshift
};

struct ProblemInstance {
    LtvSystem system;                              // LTV model (possibly from linearize)
    std::optional<NonlinearSystem> nonlinear;      // set when dynamics are nonlinear
    NoiseModel noise;
    CostSpec cost;
    KnownConstraints known;
    ParametricConstraintFamily unknown;
    std::optional<Vector> theta_star;              // ground truth, simulation studies only
};

struct ValidationReport {
    std::vector<std::string> violations;
    bool ok() const { return violations.empty(); }
};

// ---------------------------------------------------------------------------

inline BlockOperators build_block_operators(const LtvSystem& sys) {
    const int n = sys.n, T = sys.T;
    if (T < 1) throw std::invalid_argument("build_block_operators: T must be >= 1");
    if (static_cast<int>(sys.A_blocks.size()) != T ||
        static_cast<int>(sys.B_blocks.size()) != T ||
        static_cast<int>(sys.C_blocks.size()) != T + 1)
        throw std::invalid_argument("build_block_operators: block list lengths do not match T");

    BlockOperators ops;
    ops.calA = Matrix::Zero(n * T, n * T);
    ops.calB = Matrix::Zero(n * T, sys.n_i * T);
    ops.calC = Matrix::Zero(sys.n_o * T, n * T);
    ops.Z = Matrix::Zero(n * T, n * T);
    for (int t = 0; t < T; ++t) {
        if (sys.A_blocks[t].rows() != n || sys.A_blocks[t].cols() != n)
            throw std::invalid_argument("build_block_operators: A block " + std::to_string(t) +
                                        " has wrong shape");
        if (sys.B_blocks[t].rows() != n || sys.B_blocks[t].cols() != sys.n_i)
            throw std::invalid_argument("build_block_operators: B block " + std::to_string(t) +
                                        " has wrong shape");
        if (sys.C_blocks[t].rows() != sys.n_o || sys.C_blocks[t].cols() != n)
            throw std::invalid_argument("build_block_operators: C block " + std::to_string(t) +
                                        " has wrong shape");
        ops.calA.block(t * n, t * n, n, n) = sys.A_blocks[t];
        ops.calB.block(t * n, t * sys.n_i, n, sys.n_i) = sys.B_blocks[t];
        ops.calC.block(t * sys.n_o, t * n, sys.n_o, n) = sys.C_blocks[t];
        if (t >= 1) ops.Z.block(t * n, (t - 1) * n, n, n) = Matrix::Identity(n, n);
    }
    return ops;
}

inline std::pair<Matrix, Matrix> finite_difference_jacobians(
    const NonlinearSystem& sys, int t, const Vector& x, const Vector& u) {
    Matrix dfdx(sys.n, sys.n), dfdu(sys.n, sys.n_i);
    Vector xp = x, xm = x, up = u, um = u;
    for (int j = 0; j < sys.n; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(x(j)));
        xp(j) += h; xm(j) -= h;
        dfdx.col(j) = (sys.dynamics_fn(t, xp, u) - sys.dynamics_fn(t, xm, u)) / (2 * h);
        xp(j) = x(j); xm(j) = x(j);
    }
    for (int j = 0; j < sys.n_i; ++j) {
        const double h = 1e-6 * std::max(1.0, std::abs(u(j)));
        up(j) += h; um(j) -= h;
        dfdu.col(j) = (sys.dynamics_fn(t, x, up) - sys.dynamics_fn(t, x, um)) / (2 * h);
        up(j) = u(j); um(j) = u(j);
    }
    return {dfdx, dfdu};
}

// Jacobian linearization about a reference trajectory. ref_states has T+1
// entries, ref_inputs has T.
inline LtvSystem linearize(const NonlinearSystem& sys,
                           const std::vector<Vector>& ref_states,
                           const std::vector<Vector>& ref_inputs) {
    if (static_cast<int>(ref_states.size()) != sys.T + 1 ||
        static_cast<int>(ref_inputs.size()) != sys.T)
        throw std::invalid_argument("linearize: reference trajectory lengths do not match horizon");
    LtvSystem ltv;
    ltv.T = sys.T; ltv.n = sys.n; ltv.n_i = sys.n_i; ltv.n_o = sys.n_o;
    ltv.C_blocks = sys.C_blocks;
    ltv.x0 = sys.x0;
    for (int t = 0; t < sys.T; ++t) {
        auto [dfdx, dfdu] = sys.jacobian_fn
                                ? sys.jacobian_fn(t, ref_states[t], ref_inputs[t])
                                : finite_difference_jacobians(sys, t, ref_states[t], ref_inputs[t]);
        if (!dfdx.allFinite() || !dfdu.allFinite())
            throw std::runtime_error("linearize: non-finite Jacobian entries at timestep " +
                                     std::to_string(t));
        ltv.A_blocks.push_back(std::move(dfdx));
        ltv.B_blocks.push_back(std::move(dfdu));
    }
    return ltv;
}

// Quadratic form of the configured cost over the full (x, u) stack:
//   J(s) = 1/2 s' H s + f' s  (+ constant, dropped).
inline std::pair<Matrix, Vector> cost_quadratic(const CostSpec& cost, const LtvSystem& sys) {
    const int N = sys.traj_dim();
    if (cost.kind == CostKind::CustomQuadratic) {
        if (cost.Q.rows() != N || cost.Q.cols() != N || cost.q.size() != N)
            throw std::invalid_argument("cost_quadratic: custom (Q, q) dimensions do not match");
        return {2.0 * cost.Q, cost.q};
    }
    const Matrix& P = cost.position_selector;
    if (P.cols() != sys.n)
        throw std::invalid_argument("cost_quadratic: position selector column count != n");
    const int np = static_cast<int>(P.rows());
    Matrix H = Matrix::Zero(N, N);
    Vector f = Vector::Zero(N);

    // smoothness term sum_t ||p_{t+1} - p_t||^2, shared by J1/J2/J3
    for (int t = 0; t < sys.T; ++t) {
        Matrix D = Matrix::Zero(np, N);
        D.block(0, sys.x_offset(t + 1), np, sys.n) = P;
        D.block(0, sys.x_offset(t), np, sys.n) -= P;
        H += 2.0 * D.transpose() * D;
    }
    switch (cost.kind) {
        case CostKind::J1:
            for (int t = 0; t < sys.T; ++t)
                f.segment(sys.x_offset(t), sys.n) -= P.row(0).transpose();
            break;
        case CostKind::J2:
            if (np < 2) throw std::invalid_argument("cost_quadratic: J2 needs a 2-D position");
            for (int t = 0; t < sys.T; ++t) {
                f.segment(sys.x_offset(t), sys.n) -= P.row(0).transpose();
                f.segment(sys.x_offset(t), sys.n) -= P.row(1).transpose();
            }
            break;
        case CostKind::J3: {
            if (cost.goal.size() != np)
                throw std::invalid_argument("cost_quadratic: J3 requires a goal of position dim");
            const double s = 1.0 / sys.T;
            for (int t = 0; t < sys.T; ++t) {
                H.block(sys.x_offset(t), sys.x_offset(t), sys.n, sys.n) +=
                    2.0 * s * P.transpose() * P;
                f.segment(sys.x_offset(t), sys.n) -= 2.0 * s * P.transpose() * cost.goal;
            }
            break;
        }
        case CostKind::CustomQuadratic: break;  // handled above
    }
    return {H, f};
}

inline ValidationReport validate_instance(const ProblemInstance& inst) {
    ValidationReport rep;
    auto add = [&rep](const std::string& v) { rep.violations.push_back(v); };
    const LtvSystem& sys = inst.system;

    if (sys.T < 1) add("system.T: horizon must be >= 1");
    if (sys.n < 1 || sys.n_i < 1 || sys.n_o < 1) add("system dims: n, n_i, n_o must be >= 1");
    if (static_cast<int>(sys.A_blocks.size()) != sys.T) add("system.A_blocks: expected T blocks");
    if (static_cast<int>(sys.B_blocks.size()) != sys.T) add("system.B_blocks: expected T blocks");
    if (static_cast<int>(sys.C_blocks.size()) != sys.T + 1)
        add("system.C_blocks: expected T+1 blocks");
    for (int t = 0; t < static_cast<int>(sys.A_blocks.size()); ++t) {
        const Matrix& A = sys.A_blocks[t];
        if (A.rows() != sys.n || A.cols() != sys.n)
            add("system.A_blocks[" + std::to_string(t) + "]: wrong shape");
        else if (!A.allFinite())
            add("system.A_blocks[" + std::to_string(t) + "]: non-finite entries");
    }
    for (int t = 0; t < static_cast<int>(sys.B_blocks.size()); ++t) {
        const Matrix& B = sys.B_blocks[t];
        if (B.rows() != sys.n || B.cols() != sys.n_i)
            add("system.B_blocks[" + std::to_string(t) + "]: wrong shape");
        else if (!B.allFinite())
            add("system.B_blocks[" + std::to_string(t) + "]: non-finite entries");
    }
    for (int t = 0; t < static_cast<int>(sys.C_blocks.size()); ++t) {
        const Matrix& C = sys.C_blocks[t];
        if (C.rows() != sys.n_o || C.cols() != sys.n)
            add("system.C_blocks[" + std::to_string(t) + "]: wrong shape");
    }
    if (sys.x0.size() != sys.n) add("system.x0: length != n");

    if (inst.noise.w_radius < 0) add("noise.w_radius: must be >= 0");
    if (inst.noise.e_radius < 0) add("noise.e_radius: must be >= 0");

    if (inst.cost.kind != CostKind::CustomQuadratic) {
        if (inst.cost.position_selector.cols() != sys.n)
            add("cost.position_selector: column count != n");
    } else if (inst.cost.Q.rows() != sys.traj_dim() || inst.cost.q.size() != sys.traj_dim()) {
        add("cost custom (Q, q): dimensions do not match the trajectory stack");
    }

    for (std::size_t i = 0; i < inst.known.halfspaces.size(); ++i) {
        const Halfspace& h = inst.known.halfspaces[i];
        if (h.a.size() != sys.traj_dim())
            add("known[" + std::to_string(i) + "].a: length != n(T+1)+n_iT");
        else if (h.a.lpNorm<Eigen::Infinity>() == 0.0)
            add("known[" + std::to_string(i) + "].a: zero row");
    }

    const auto& unk = inst.unknown;
    const int d = unk.param_dim;
    if (!unk.obstacles.empty()) {
        if (d < 1) add("unknown.param_dim: must be >= 1 when obstacles exist");
        if (unk.param_lo.size() != d || unk.param_up.size() != d)
            add("unknown.param_box: bounds length != param_dim");
        else
            for (int j = 0; j < d; ++j)
                if (unk.param_lo(j) > unk.param_up(j))
                    add("unknown.param_box: lower > upper at component " + std::to_string(j));
        const int np = static_cast<int>(inst.cost.position_selector.rows());
        for (std::size_t i = 0; i < unk.obstacles.size(); ++i) {
            const Obstacle& ob = unk.obstacles[i];
            if (ob.disjuncts.empty())
                add("unknown.obstacles[" + std::to_string(i) + "]: no disjuncts");
            for (const Disjunct& dis : ob.disjuncts) {
                if (np > 0 && dis.a_pos.size() != np)
                    add("unknown.obstacles[" + std::to_string(i) +
                        "]: disjunct row length != position dim");
                if (dis.c_theta.size() != d)
                    add("unknown.obstacles[" + std::to_string(i) +
                        "]: c_theta length != param_dim");
            }
            const int hi = ob.t_hi < 0 ? sys.T : ob.t_hi;
            if (ob.t_lo < 0 || hi > sys.T || ob.t_lo > hi)
                add("unknown.obstacles[" + std::to_string(i) + "]: bad time range");
        }
    }
    if (inst.theta_star && inst.theta_star->size() != d)
        add("theta_star: length != param_dim");
    return rep;
}

} // namespace forge
