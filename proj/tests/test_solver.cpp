#include <cmath>

#include <doctest.h>

#include "forge/rng.hpp"
#include "forge/solver.hpp"
#include "test_util.hpp"

using namespace forge;

TEST_CASE("qp: min x^2 s.t. x >= 1") {
    MathProgram prog;
    prog.H = Matrix::Constant(1, 1, 2.0);
    prog.f = Vector::Zero(1);
    prog.A_in = Matrix::Constant(1, 1, -1.0);   // -x <= -1
    prog.b_in = Vector::Constant(1, -1.0);
    Solution sol = solve_qp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sol.ineq_multipliers(0) == doctest::Approx(2.0).epsilon(1e-9));
    CHECK(sol.objective == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("qp: unconstrained H=diag(2,2), f=(-2,-4)") {
    MathProgram prog;
    prog.H = 2.0 * Matrix::Identity(2, 2);
    prog.f = Vector(2);
    prog.f << -2.0, -4.0;
    Solution sol = solve_qp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == doctest::Approx(1.0).epsilon(1e-10));
    CHECK(sol.x(1) == doctest::Approx(2.0).epsilon(1e-10));
}

TEST_CASE("qp: equality constrained, multiplier sign convention") {
    // min 1/2 x'Hx s.t. x1 + x2 = 2, H = I. Solution (1,1), Hx + A' nu = 0 =>
    // nu = -1.
    MathProgram prog;
    prog.H = Matrix::Identity(2, 2);
    prog.f = Vector::Zero(2);
    prog.A_eq = Matrix::Ones(1, 2);
    prog.b_eq = Vector::Constant(1, 2.0);
    Solution sol = solve_qp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == doctest::Approx(1.0));
    CHECK(sol.x(1) == doctest::Approx(1.0));
    CHECK(sol.eq_multipliers(0) == doctest::Approx(-1.0));
    Vector grad = prog.H * sol.x + prog.f + prog.A_eq.transpose() * sol.eq_multipliers;
    CHECK(grad.lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("qp: infeasible reports inconsistent rows") {
    MathProgram prog;
    prog.H = Matrix::Identity(1, 1);
    prog.f = Vector::Zero(1);
    prog.A_in = Matrix(2, 1);
    prog.A_in << 1.0, -1.0;    // x <= 0 and -x <= -1
    prog.b_in = Vector(2);
    prog.b_in << 0.0, -1.0;
    Solution sol = solve_qp(prog);
    CHECK(sol.status == SolveStatus::Infeasible);
    CHECK(!sol.infeasible_rows.empty());
}

TEST_CASE("lp: bounded and unbounded") {
    MathProgram prog;
    prog.f = Vector::Constant(1, -1.0);   // min -x
    SUBCASE("bounded by x <= 3") {
        prog.A_in = Matrix::Constant(1, 1, 1.0);
        prog.b_in = Vector::Constant(1, 3.0);
        Solution sol = solve_qp(prog);
        REQUIRE(sol.status == SolveStatus::Optimal);
        CHECK(sol.x(0) == doctest::Approx(3.0).epsilon(1e-6));
    }
    SUBCASE("unbounded above") {
        prog.A_in = Matrix::Constant(1, 1, -1.0);  // -x <= 0
        prog.b_in = Vector::Zero(1);
        Solution sol = solve_qp(prog);
        CHECK(sol.status == SolveStatus::Unbounded);
    }
}

TEST_CASE("qp: rejects non-finite data and indefinite H") {
    MathProgram bad;
    bad.H = Matrix::Identity(1, 1);
    bad.f = Vector::Constant(1, std::nan(""));
    CHECK_THROWS(solve_qp(bad));
    MathProgram indef;
    indef.H = -Matrix::Identity(2, 2);
    indef.f = Vector::Zero(2);
    CHECK_THROWS(solve_qp(indef));
}

TEST_CASE("qp: random PSD instances vs dual projected-gradient oracle") {
    // min 1/2 x'Hx + f'x s.t. Ax <= b with H positive definite. The dual is a
    // box-constrained concave maximization over lambda >= 0, solved here by
    // projected gradient to convergence as an independent oracle.
    Rng rng(2718);
    int checked = 0;
    for (int trial = 0; trial < 50; ++trial) {
        Rng r = rng.split(trial);
        const int n = 10, m = 5;
        Matrix M = testutil::random_matrix(r, n, n);
        Matrix H = M * M.transpose() + Matrix::Identity(n, n);
        Vector f = testutil::random_vector(r, n, 2.0);
        Matrix A = testutil::random_matrix(r, m, n);
        Vector b = testutil::random_vector(r, m, 1.0);

        MathProgram prog;
        prog.H = H;
        prog.f = f;
        prog.A_in = A;
        prog.b_in = b;
        Solution sol = solve_qp(prog);
        REQUIRE(sol.status == SolveStatus::Optimal);

        Eigen::LLT<Matrix> llt(H);
        Matrix Q = A * llt.solve(A.transpose());
        Vector c = A * llt.solve(f) + b;
        const double L = Q.operatorNorm();
        Vector lambda = Vector::Zero(m);
        for (int it = 0; it < 200000; ++it) {
            Vector grad = Q * lambda + c;   // gradient of the negated dual
            Vector next = (lambda - grad / L).cwiseMax(0.0);
            if ((next - lambda).lpNorm<Eigen::Infinity>() < 1e-13) { lambda = next; break; }
            lambda = next;
        }
        Vector x_oracle = -llt.solve(f + A.transpose() * lambda);
        CHECK((sol.x - x_oracle).lpNorm<Eigen::Infinity>() < 1e-6);

        // complementary slackness
        Vector slack = A * sol.x - b;
        for (int i = 0; i < m; ++i) {
            CHECK(std::abs(sol.ineq_multipliers(i) * slack(i)) <= 1e-6);
            CHECK(sol.ineq_multipliers(i) >= -1e-7);
            CHECK(slack(i) <= 1e-7);
        }
        ++checked;
    }
    CHECK(checked == 50);
}

TEST_CASE("qp: bound multipliers close the stationarity residual") {
    Rng rng(5);
    const int n = 6;
    Matrix M = testutil::random_matrix(rng, n, n);
    MathProgram prog;
    prog.H = M * M.transpose() + Matrix::Identity(n, n);
    prog.f = testutil::random_vector(rng, n, 3.0);
    prog.lo = Vector::Constant(n, -0.2);
    prog.up = Vector::Constant(n, 0.2);
    Solution sol = solve_qp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    Vector grad = prog.H * sol.x + prog.f - sol.lo_multipliers + sol.up_multipliers;
    CHECK(grad.lpNorm<Eigen::Infinity>() < 1e-8);
    CHECK((sol.x.array() >= -0.2 - 1e-9).all());
    CHECK((sol.x.array() <= 0.2 + 1e-9).all());
}

TEST_CASE("milp: feasibility b in {0,1}, b >= 0.5") {
    MathProgram prog;
    prog.f = Vector::Zero(1);
    prog.A_in = Matrix::Constant(1, 1, -1.0);
    prog.b_in = Vector::Constant(1, -0.5);
    prog.binaries = {0};
    Solution sol = solve_milp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == 1.0);
}

TEST_CASE("milp: tiny knapsack") {
    MathProgram prog;
    prog.f = Vector(2);
    prog.f << -3.0, -2.0;
    prog.A_in = Matrix::Ones(1, 2);
    prog.b_in = Vector::Constant(1, 1.0);
    prog.binaries = {0, 1};
    Solution sol = solve_milp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == 1.0);
    CHECK(sol.x(1) == 0.0);
    CHECK(sol.objective == doctest::Approx(-3.0).epsilon(1e-8));
}

namespace {

// Exhaustive oracle: fix every binary pattern and solve the continuous problem.
Solution brute_force_milp(const MathProgram& prog, double* best_obj_out) {
    const int nb = static_cast<int>(prog.binaries.size());
    MathProgram fixed = prog;
    fixed.binaries.clear();
    const int n = prog.num_vars();
    if (fixed.lo.size() == 0) fixed.lo = Vector::Constant(n, -kInf);
    if (fixed.up.size() == 0) fixed.up = Vector::Constant(n, kInf);
    Solution best;
    best.status = SolveStatus::Infeasible;
    double best_obj = kInf;
    for (int mask = 0; mask < (1 << nb); ++mask) {
        MathProgram sub = fixed;
        for (int k = 0; k < nb; ++k) {
            const double v = (mask >> k) & 1;
            sub.lo(prog.binaries[k]) = v;
            sub.up(prog.binaries[k]) = v;
        }
        Solution s = solve_qp(sub);
        if (s.status != SolveStatus::Optimal) continue;
        if (s.objective < best_obj - 1e-12) {
            best_obj = s.objective;
            best = s;
        }
    }
    *best_obj_out = best_obj;
    return best;
}

} // namespace

TEST_CASE("milp: 6-binary feasibility agrees with brute force over all 64 patterns") {
    Rng rng(99);
    for (int trial = 0; trial < 10; ++trial) {
        Rng r = rng.split(trial);
        MathProgram prog;
        const int n = 6;
        prog.f = Vector::Zero(n);
        prog.A_in = testutil::random_matrix(r, 4, n, 1.0);
        prog.b_in = testutil::random_vector(r, 4, 1.5);
        prog.binaries = {0, 1, 2, 3, 4, 5};
        double obj;
        Solution oracle = brute_force_milp(prog, &obj);
        Solution sol = solve_milp(prog);
        CHECK(sol.status == oracle.status);
        if (sol.status == SolveStatus::Optimal) {
            Vector slack = prog.A_in * sol.x - prog.b_in;
            CHECK(slack.maxCoeff() <= 1e-7);
            for (int b : prog.binaries)
                CHECK((sol.x(b) == 0.0 || sol.x(b) == 1.0));
        }
    }
}

TEST_CASE("milp: linear objectives with <= 12 binaries match enumeration") {
    Rng rng(424242);
    for (int trial = 0; trial < 12; ++trial) {
        Rng r = rng.split(trial);
        const int nb = 4 + static_cast<int>(r.next_u64() % 9);   // 4..12
        MathProgram prog;
        prog.f = testutil::random_vector(r, nb, 2.0);
        prog.A_in = testutil::random_matrix(r, 3, nb, 1.0);
        prog.b_in = testutil::random_vector(r, 3, 2.0);
        prog.binaries.resize(nb);
        for (int k = 0; k < nb; ++k) prog.binaries[k] = k;
        double obj;
        Solution oracle = brute_force_milp(prog, &obj);
        Solution sol = solve_milp(prog);
        REQUIRE(sol.status == oracle.status);
        if (sol.status == SolveStatus::Optimal)
            CHECK(sol.objective == doctest::Approx(obj).epsilon(1e-6));
    }
}

TEST_CASE("milp: mixed continuous/binary with quadratic objective") {
    // min (x - 1.7)^2 + b, x <= 3b: b = 1 lets x reach 1.7 (cost 1); b = 0
    // forces x <= 0 (cost 1.7^2 = 2.89). Optimum is b = 1.
    MathProgram prog;
    prog.H = Matrix::Zero(2, 2);
    prog.H(0, 0) = 2.0;
    prog.f = Vector(2);
    prog.f << -3.4, 1.0;
    prog.A_in = Matrix(1, 2);
    prog.A_in << 1.0, -3.0;
    prog.b_in = Vector::Zero(1);
    prog.lo = Vector::Zero(2);
    prog.up = Vector(2);
    prog.up << kInf, 1.0;
    prog.binaries = {1};
    Solution sol = solve_milp(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(1) == 1.0);
    CHECK(sol.x(0) == doctest::Approx(1.7).epsilon(1e-7));
}

TEST_CASE("milp: determinism across repeated solves") {
    Rng rng(7);
    MathProgram prog;
    const int n = 8;
    prog.f = testutil::random_vector(rng, n, 1.0);
    prog.A_in = testutil::random_matrix(rng, 5, n, 1.0);
    prog.b_in = testutil::random_vector(rng, 5, 2.0);
    prog.binaries = {0, 1, 2, 3, 4, 5, 6, 7};
    Solution a = solve_milp(prog);
    Solution b = solve_milp(prog);
    CHECK(a.status == b.status);
    if (a.status == SolveStatus::Optimal) {
        CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() == 0.0);
        CHECK(a.nodes_explored == b.nodes_explored);
    }
}

TEST_CASE("milp: infeasible instance is certified infeasible") {
    MathProgram prog;
    prog.f = Vector::Zero(2);
    prog.A_eq = Matrix::Ones(1, 2);       // b1 + b2 = 0.5: impossible for binaries
    prog.b_eq = Vector::Constant(1, 0.5);
    prog.binaries = {0, 1};
    Solution sol = solve_milp(prog);
    CHECK(sol.status == SolveStatus::Infeasible);
}

TEST_CASE("solver backend surface") {
    BuiltinSolver backend;
    MathProgram prog;
    prog.H = 2.0 * Matrix::Identity(1, 1);
    prog.f = Vector::Constant(1, -2.0);
    Solution sol = backend.solve(prog);
    REQUIRE(sol.status == SolveStatus::Optimal);
    CHECK(sol.x(0) == doctest::Approx(1.0));
    json dump = program_debug_dump(prog);
    CHECK(dump["num_vars"] == 1);
}
