#include <doctest.h>

#include "forge/dynamics.hpp"
#include "forge/sls.hpp"
#include "test_util.hpp"

using namespace forge;

namespace {

LtvSystem scalar_chain(int T, double a = 1.0, double b = 1.0, double c = 1.0) {
    LtvSystem sys;
    sys.T = T;
    sys.n = sys.n_i = sys.n_o = 1;
    sys.A_blocks.assign(T, Matrix::Constant(1, 1, a));
    sys.B_blocks.assign(T, Matrix::Constant(1, 1, b));
    sys.C_blocks.assign(T + 1, Matrix::Constant(1, 1, c));
    sys.x0 = Vector::Zero(1);
    return sys;
}

} // namespace

TEST_CASE("block operators: scalar T=2") {
    LtvSystem sys = scalar_chain(2, 2.0);
    BlockOperators ops = build_block_operators(sys);
    Matrix calA(2, 2), Z(2, 2);
    calA << 2, 0, 0, 2;
    Z << 0, 0, 1, 0;
    CHECK((ops.calA - calA).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ops.Z - Z).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("block operators: downshift structure n=2 T=3") {
    Rng rng(3);
    LtvSystem sys = testutil::random_ltv(rng, 2, 1, 1, 3);
    BlockOperators ops = build_block_operators(sys);
    REQUIRE(ops.Z.rows() == 6);
    Matrix expected = Matrix::Zero(6, 6);
    expected.block(2, 0, 2, 2) = Matrix::Identity(2, 2);
    expected.block(4, 2, 2, 2) = Matrix::Identity(2, 2);
    CHECK((ops.Z - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("block operators: double integrator blocks") {
    LtvSystem sys = double_integrator(5, 0.1, Vector::Zero(4));
    BlockOperators ops = build_block_operators(sys);
    Matrix block(4, 4);
    block << 1, 0, 0.1, 0, 0, 1, 0, 0.1, 0, 0, 1, 0, 0, 0, 0, 1;
    for (int t = 0; t < 5; ++t)
        CHECK((ops.calA.block(4 * t, 4 * t, 4, 4) - block).cwiseAbs().maxCoeff() == 0.0);
    // off-diagonal blocks are zero
    CHECK(ops.calA.cwiseAbs().sum() == doctest::Approx(5 * block.cwiseAbs().sum()));
}

TEST_CASE("downshift acts as a one-block delay") {
    Rng rng(11);
    LtvSystem sys = testutil::random_ltv(rng, 3, 2, 2, 5);
    BlockOperators ops = build_block_operators(sys);
    Vector stacked = testutil::random_vector(rng, 15);
    Vector shifted = ops.Z * stacked;
    CHECK(shifted.head(3).cwiseAbs().maxCoeff() == 0.0);
    CHECK((shifted.tail(12) - stacked.head(12)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("phi_from_k with zero gain") {
    Rng rng(5);
    LtvSystem sys = testutil::random_ltv(rng, 2, 2, 1, 4);
    BlockOperators ops = build_block_operators(sys);
    SystemResponse phi = phi_from_k(zero_gain(sys), ops);
    const int nT = 8;
    Matrix expected = (Matrix::Identity(nT, nT) - ops.Z * ops.calA).inverse();
    CHECK((phi.phi_xw - expected).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(phi.phi_xe.cwiseAbs().maxCoeff() == 0.0);
    CHECK(phi.phi_uw.cwiseAbs().maxCoeff() == 0.0);
    CHECK(phi.phi_ue.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("phi_from_k scalar T=2 hand expansion") {
    // A = B = C = 1, K_{1,0} = k. Hand-expanding the two-step chain gives
    // phi_uw = [[0,0],[k,0]] and phi_xw = [[1,0],[1,1]].
    const double k = 0.7;
    LtvSystem sys = scalar_chain(2);
    BlockOperators ops = build_block_operators(sys);
    FeedbackGain gain = zero_gain(sys);
    gain.K(1, 0) = k;
    SystemResponse phi = phi_from_k(gain, ops);
    Matrix phi_uw(2, 2), phi_xw(2, 2);
    phi_uw << 0, 0, k, 0;
    phi_xw << 1, 0, 1, 1;
    CHECK((phi.phi_uw - phi_uw).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((phi.phi_xw - phi_xw).cwiseAbs().maxCoeff() < 1e-12);
    // inverse map recovers the gain exactly
    FeedbackGain back = k_from_phi(phi, 1, 1, 2);
    CHECK(std::abs(back.K(1, 0) - k) < 1e-12);
}

TEST_CASE("k_from_phi reduces to phi_ue when phi_uw = 0") {
    Rng rng(7);
    LtvSystem sys = testutil::random_ltv(rng, 2, 1, 2, 3);
    BlockOperators ops = build_block_operators(sys);
    SystemResponse phi = phi_from_k(testutil::random_causal_gain(rng, sys), ops);
    phi.phi_uw.setZero();
    FeedbackGain gain = k_from_phi(phi, sys.n_i, sys.n_o, sys.T);
    CHECK((gain.K - phi.phi_ue).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("round trip k_from_phi(phi_from_k(K)) = K") {
    Rng rng(2024);
    for (int trial = 0; trial < 30; ++trial) {
        Rng r = rng.split(trial);
        const int n = 1 + static_cast<int>(r.next_u64() % 4);
        const int n_i = 1 + static_cast<int>(r.next_u64() % 4);
        const int n_o = 1 + static_cast<int>(r.next_u64() % 4);
        const int T = 1 + static_cast<int>(r.next_u64() % 8);
        LtvSystem sys = testutil::random_ltv(r, n, n_i, n_o, T);
        BlockOperators ops = build_block_operators(sys);
        FeedbackGain K = testutil::random_causal_gain(r, sys);
        SystemResponse phi = phi_from_k(K, ops);
        FeedbackGain back = k_from_phi(phi, n_i, n_o, T);
        const double rel = (back.K - K.K).cwiseAbs().maxCoeff() /
                           (1.0 + K.K.cwiseAbs().maxCoeff());
        CHECK(rel < 1e-10);
        CHECK(verify_response(phi, ops, sys).pass(1e-9));
    }
}

TEST_CASE("verify_response flags perturbations") {
    Rng rng(99);
    LtvSystem sys = testutil::random_ltv(rng, 1, 1, 1, 3);
    BlockOperators ops = build_block_operators(sys);
    SystemResponse phi = phi_from_k(testutil::random_causal_gain(rng, sys), ops);
    REQUIRE(verify_response(phi, ops, sys).pass(1e-10));

    SUBCASE("small entry perturbation propagates through the residual") {
        phi.phi_xw(1, 0) += 1e-3;
        ResidualReport rep = verify_response(phi, ops, sys);
        CHECK(std::max(rep.eq_a, rep.eq_b) >= 1e-4);
    }
    SUBCASE("zero response misses the identity block") {
        phi.phi_xw.setZero();
        phi.phi_xe.setZero();
        phi.phi_uw.setZero();
        phi.phi_ue.setZero();
        ResidualReport rep = verify_response(phi, ops, sys);
        CHECK(rep.eq_a == doctest::Approx(1.0));
    }
}

TEST_CASE("causality: upper blocks of every response map are exactly zero") {
    Rng rng(1234);
    LtvSystem sys = testutil::random_ltv(rng, 2, 2, 2, 5);
    BlockOperators ops = build_block_operators(sys);
    SystemResponse phi = phi_from_k(testutil::random_causal_gain(rng, sys), ops);
    CHECK(upper_block_magnitude(phi.phi_xw, 2, 2) == 0.0);
    CHECK(upper_block_magnitude(phi.phi_xe, 2, 2) == 0.0);
    CHECK(upper_block_magnitude(phi.phi_uw, 2, 2) == 0.0);
    CHECK(upper_block_magnitude(phi.phi_ue, 2, 2) == 0.0);
}
