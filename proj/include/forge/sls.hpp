#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Dense>

#include "forge/problem.hpp"

namespace forge {

// Causal output-error feedback gain: K is n_iT x n_oT, block lower-triangular
// (block K_{t,tau} maps the output error at tau <= t to the input at t).
struct FeedbackGain {
    Matrix K;
    int n_i = 0;
    int n_o = 0;
    int T = 0;
};

// The four noise-to-deviation maps. Rows cover dx_0..dx_{T-1} / du_0..du_{T-1};
// columns cover the noise stack w (w_0 = initial-state perturbation) and
// e_0..e_{T-1}.
struct SystemResponse {
    Matrix phi_xw;   // nT x nT
    Matrix phi_xe;   // nT x n_oT
    Matrix phi_uw;   // n_iT x nT
    Matrix phi_ue;   // n_iT x n_oT
};

struct ResidualReport {
    double eq_a = 0.0;        // max-abs residual of [I - ZA, -ZB] Phi = [I, O]
    double eq_b = 0.0;        // max-abs residual of Phi [I - ZA; -C] = [I; O]
    double causality = 0.0;   // largest magnitude strictly above the block diagonal
    bool pass(double tol) const { return eq_a <= tol && eq_b <= tol && causality <= tol; }
};

inline double upper_block_magnitude(const Matrix& M, int row_block, int col_block) {
    const int rb = static_cast<int>(M.rows()) / row_block;
    const int cb = static_cast<int>(M.cols()) / col_block;
    double worst = 0.0;
    for (int i = 0; i < rb; ++i)
        for (int j = i + 1; j < cb; ++j)
            worst = std::max(worst, M.block(i * row_block, j * col_block, row_block, col_block)
                                        .cwiseAbs()
                                        .maxCoeff());
    return worst;
}

inline bool is_block_lower(const Matrix& M, int row_block, int col_block, double tol = 0.0) {
    return upper_block_magnitude(M, row_block, col_block) <= tol;
}

inline FeedbackGain zero_gain(const LtvSystem& sys) {
    return {Matrix::Zero(sys.n_i * sys.T, sys.n_o * sys.T), sys.n_i, sys.n_o, sys.T};
}

// System response from a causal gain. The middle matrix is unit lower-triangular
// (Z makes both ZA and ZBKC strictly block lower), so it is inverted exactly by
// forward substitution.
inline SystemResponse phi_from_k(const FeedbackGain& gain, const BlockOperators& ops) {
    const Matrix& K = gain.K;
    if (K.rows() != ops.calB.cols() || K.cols() != ops.calC.rows())
        throw std::invalid_argument("phi_from_k: gain shape does not match operators");
    if (upper_block_magnitude(K, gain.n_i, gain.n_o) != 0.0)
        throw std::invalid_argument("phi_from_k: gain has nonzero blocks above the diagonal");

    const int nT = static_cast<int>(ops.calA.rows());
    const Matrix ZB = ops.Z * ops.calB;
    const Matrix M = Matrix::Identity(nT, nT) - ops.Z * ops.calA - ZB * K * ops.calC;

    SystemResponse phi;
    phi.phi_xw = M.triangularView<Eigen::Lower>().solve(Matrix::Identity(nT, nT));
    phi.phi_xe = M.triangularView<Eigen::Lower>().solve(Matrix(ZB * K));
    phi.phi_uw = K * ops.calC * phi.phi_xw;
    phi.phi_ue = K * ops.calC * phi.phi_xe + K;
    return phi;
}

// Gain from a system response: K = Phi_ue - Phi_uw Phi_xw^{-1} Phi_xe.
inline FeedbackGain k_from_phi(const SystemResponse& phi, int n_i, int n_o, int T) {
    Eigen::FullPivLU<Matrix> lu(phi.phi_xw);
    if (!lu.isInvertible())
        throw std::runtime_error("k_from_phi: phi_xw block is singular");
    FeedbackGain gain;
    gain.K = phi.phi_ue - phi.phi_uw * lu.solve(phi.phi_xe);
    gain.n_i = n_i;
    gain.n_o = n_o;
    gain.T = T;
    return gain;
}

inline ResidualReport verify_response(const SystemResponse& phi, const BlockOperators& ops,
                                      const LtvSystem& sys) {
    const int nT = sys.n * sys.T;
    const int niT = sys.n_i * sys.T;
    const int noT = sys.n_o * sys.T;
    const Matrix ImZA = Matrix::Identity(nT, nT) - ops.Z * ops.calA;
    const Matrix ZB = ops.Z * ops.calB;

    ResidualReport rep;
    {
        Matrix lhs_w = ImZA * phi.phi_xw - ZB * phi.phi_uw - Matrix::Identity(nT, nT);
        Matrix lhs_e = ImZA * phi.phi_xe - ZB * phi.phi_ue;
        rep.eq_a = std::max(lhs_w.cwiseAbs().maxCoeff(), lhs_e.cwiseAbs().maxCoeff());
    }
    {
        Matrix lhs_x = phi.phi_xw * ImZA - phi.phi_xe * ops.calC - Matrix::Identity(nT, nT);
        Matrix lhs_u = phi.phi_uw * ImZA - phi.phi_ue * ops.calC;
        rep.eq_b = std::max(lhs_x.cwiseAbs().maxCoeff(), lhs_u.cwiseAbs().maxCoeff());
    }
    rep.causality = std::max({upper_block_magnitude(phi.phi_xw, sys.n, sys.n),
                              upper_block_magnitude(phi.phi_xe, sys.n, sys.n_o),
                              upper_block_magnitude(phi.phi_uw, sys.n_i, sys.n),
                              upper_block_magnitude(phi.phi_ue, sys.n_i, sys.n_o)});
    (void)niT; (void)noT;
    return rep;
}

} // namespace forge
