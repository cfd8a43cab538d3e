#include <doctest.h>

#include <cmath>

#include "forge/demo.hpp"
#include "forge/forward.hpp"
#include "test_util.hpp"

using namespace forge;

namespace {

// nominal (z, v) consistent with the dynamics: random v, z by rollout
std::pair<Vector, Vector> consistent_nominal(const LtvSystem& sys, forge::Rng& rng) {
    Vector v = testutil::random_vector(rng, sys.input_stack_dim());
    Vector z = Vector::Zero(sys.state_stack_dim());
    z.head(sys.n) = sys.x0;
    for (int t = 0; t < sys.T; ++t)
        z.segment((t + 1) * sys.n, sys.n) = sys.A_blocks[t] * z.segment(t * sys.n, sys.n) +
                                            sys.B_blocks[t] * v.segment(t * sys.n_i, sys.n_i);
    return {z, v};
}

NoiseSequence zero_noise(const LtvSystem& sys) {
    NoiseSequence seq;
    for (int t = 0; t < sys.T; ++t) seq.w.push_back(Vector::Zero(sys.n));
    for (int t = 0; t <= sys.T; ++t) seq.e.push_back(Vector::Zero(sys.n_o));
    return seq;
}

} // namespace

TEST_CASE("rollout without noise reproduces the nominal exactly") {
    forge::Rng rng(3);
    LtvSystem sys = testutil::random_ltv(rng, 3, 2, 2, 5);
    auto [z, v] = consistent_nominal(sys, rng);
    FeedbackGain K = testutil::random_causal_gain(rng, sys, 0.5);
    Demonstration demo = rollout(sys, z, v, K, zero_noise(sys));
    CHECK((demo.u - v).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((demo.hidden_x - z).lpNorm<Eigen::Infinity>() < 1e-12);
    for (int t = 0; t <= sys.T; ++t)
        CHECK((demo.y.segment(t * sys.n_o, sys.n_o) -
               sys.C_blocks[t] * z.segment(t * sys.n, sys.n))
                  .lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("zero gain plays the nominal input under any noise") {
    forge::Rng rng(4);
    LtvSystem sys = testutil::random_ltv(rng, 2, 1, 2, 4);
    auto [z, v] = consistent_nominal(sys, rng);
    NoiseSequence seq = sample_noise(NoiseModel{0.3, 0.2}, sys.T, sys.n, sys.n_o,
                                     NoiseStrategy::UniformBall, rng.split(1));
    Demonstration demo = rollout(sys, z, v, zero_gain(sys), seq);
    CHECK((demo.u - v).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("scalar hand-rollout oracle") {
    // chain A = B = C = 1, T = 2, zero nominal, K_{1,0} = 0.5, w = (0.1, 0):
    // x_0 = 0.1, u_0 = 0, x_1 = 0.1, u_1 = 0.5 * 0.1 = 0.05, x_2 = 0.15
    LtvSystem sys;
    sys.T = 2;
    sys.n = sys.n_i = sys.n_o = 1;
    for (int t = 0; t < 2; ++t) {
        sys.A_blocks.push_back(Matrix::Identity(1, 1));
        sys.B_blocks.push_back(Matrix::Identity(1, 1));
    }
    for (int t = 0; t <= 2; ++t) sys.C_blocks.push_back(Matrix::Identity(1, 1));
    sys.x0 = Vector::Zero(1);

    FeedbackGain K = zero_gain(sys);
    K.K(1, 0) = 0.5;
    NoiseSequence seq = zero_noise(sys);
    seq.w[0](0) = 0.1;

    Demonstration demo = rollout(sys, Vector::Zero(3), Vector::Zero(2), K, seq);
    CHECK(demo.hidden_x(0) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(demo.hidden_x(1) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(demo.hidden_x(2) == doctest::Approx(0.15).epsilon(1e-14));
    CHECK(demo.u(0) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(demo.u(1) == doctest::Approx(0.05).epsilon(1e-14));
}

TEST_CASE("closed-loop identity: realized deviation equals the response times noise") {
    forge::Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        LtvSystem sys = testutil::random_ltv(rng, 3, 2, 3, 4);
        auto [z, v] = consistent_nominal(sys, rng);
        FeedbackGain K = testutil::random_causal_gain(rng, sys, 0.4);
        SystemResponse phi = phi_from_k(K, build_block_operators(sys));
        ErrorMaps maps = error_maps(phi, sys);
        NoiseSequence seq = sample_noise(NoiseModel{0.1, 0.05}, sys.T, sys.n, sys.n_o,
                                         NoiseStrategy::UniformBall, rng.split(trial));
        Demonstration demo = rollout(sys, z, v, K, seq);

        Vector w_stack(sys.n * sys.T), e_stack(sys.n_o * sys.T);
        for (int t = 0; t < sys.T; ++t) {
            w_stack.segment(t * sys.n, sys.n) = seq.w[t];
            e_stack.segment(t * sys.n_o, sys.n_o) = seq.e[t];
        }
        Vector delta(sys.traj_dim());
        delta << (demo.hidden_x - z), (demo.u - v);
        Vector predicted = maps.M_w * w_stack + maps.M_e * e_stack;
        CHECK((delta - predicted).lpNorm<Eigen::Infinity>() < 1e-9);
    }
}

TEST_CASE("noise sampling respects radii; vertex strategy hits corners") {
    forge::Rng rng(11);
    NoiseModel noise{0.07, 0.004};
    NoiseSequence ball = sample_noise(noise, 6, 3, 2, NoiseStrategy::UniformBall, rng.split(0));
    for (const auto& w : ball.w) CHECK(w.lpNorm<Eigen::Infinity>() <= 0.07);
    for (const auto& e : ball.e) CHECK(e.lpNorm<Eigen::Infinity>() <= 0.004);
    NoiseSequence vert = sample_noise(noise, 6, 3, 2, NoiseStrategy::Vertex, rng.split(1));
    for (const auto& w : vert.w)
        for (int i = 0; i < w.size(); ++i) CHECK(std::abs(w(i)) == doctest::Approx(0.07));
    for (const auto& e : vert.e)
        for (int i = 0; i < e.size(); ++i) CHECK(std::abs(e(i)) == doctest::Approx(0.004));
}

TEST_CASE("demoset generation is deterministic in the seed") {
    forge::Rng rng(21);
    LtvSystem sys = testutil::random_ltv(rng, 2, 1, 2, 3);
    ForwardSolution sol;
    sol.status = SolveStatus::Optimal;
    auto [z, v] = consistent_nominal(sys, rng);
    sol.z = z;
    sol.v = v;
    sol.K = testutil::random_causal_gain(rng, sys, 0.3);

    DemoSet a = generate_demoset(sol, sys, NoiseModel{0.05, 0.02}, 8,
                                 NoiseStrategy::UniformBall, forge::Rng(42));
    DemoSet b = generate_demoset(sol, sys, NoiseModel{0.05, 0.02}, 8,
                                 NoiseStrategy::UniformBall, forge::Rng(42));
    DemoSet c = generate_demoset(sol, sys, NoiseModel{0.05, 0.02}, 8,
                                 NoiseStrategy::UniformBall, forge::Rng(43));
    REQUIRE(a.count() == 8);
    for (int d = 0; d < 8; ++d) {
        CHECK((a.demos[d].u - b.demos[d].u).lpNorm<Eigen::Infinity>() == 0.0);
        CHECK((a.demos[d].y - b.demos[d].y).lpNorm<Eigen::Infinity>() == 0.0);
    }
    bool differs = false;
    for (int d = 0; d < 8; ++d)
        if ((a.demos[d].u - c.demos[d].u).lpNorm<Eigen::Infinity>() > 0) differs = true;
    CHECK(differs);
    // demos differ from each other (independent noise streams)
    CHECK((a.demos[0].y - a.demos[1].y).lpNorm<Eigen::Infinity>() > 0);
}

TEST_CASE("transmission corruption: bounded, order statistics, originals retained") {
    forge::Rng rng(33);
    LtvSystem sys = testutil::random_ltv(rng, 3, 2, 3, 10);
    ForwardSolution sol;
    sol.status = SolveStatus::Optimal;
    auto [z, v] = consistent_nominal(sys, rng);
    sol.z = z;
    sol.v = v;
    sol.K = zero_gain(sys);
    DemoSet clean = generate_demoset(sol, sys, NoiseModel{0.02, 0.01}, 25,
                                     NoiseStrategy::UniformBall, forge::Rng(7));
    const double eps = 0.1;
    DemoSet noisy = perturb(clean, eps, forge::Rng(9));
    REQUIRE(noisy.corrupted);
    REQUIRE(noisy.epsilon == eps);
    REQUIRE(static_cast<int>(noisy.originals.size()) == clean.count());

    double max_delta = 0.0;
    int scalars = 0;
    for (int d = 0; d < clean.count(); ++d) {
        Vector du = noisy.demos[d].u - clean.demos[d].u;
        Vector dy = noisy.demos[d].y - clean.demos[d].y;
        CHECK(du.lpNorm<Eigen::Infinity>() <= eps);
        CHECK(dy.lpNorm<Eigen::Infinity>() <= eps);
        max_delta = std::max({max_delta, du.lpNorm<Eigen::Infinity>(),
                              dy.lpNorm<Eigen::Infinity>()});
        scalars += static_cast<int>(du.size() + dy.size());
        CHECK((noisy.originals[d].u - clean.demos[d].u).lpNorm<Eigen::Infinity>() == 0.0);
    }
    REQUIRE(scalars >= 1000);
    CHECK(max_delta >= 0.9 * eps);   // max of >= 1000 uniforms concentrates near eps
}

TEST_CASE("robust forward synthesis: sampled and adversarial rollouts stay feasible") {
    // scalar chain pushed against a tightened cap; every realized trajectory
    // must still satisfy the untightened constraint
    LtvSystem sys;
    sys.T = 4;
    sys.n = sys.n_i = sys.n_o = 1;
    for (int t = 0; t < 4; ++t) {
        sys.A_blocks.push_back(Matrix::Identity(1, 1));
        sys.B_blocks.push_back(Matrix::Identity(1, 1));
    }
    for (int t = 0; t <= 4; ++t) sys.C_blocks.push_back(Matrix::Identity(1, 1));
    sys.x0 = Vector::Zero(1);

    ProblemInstance inst;
    inst.system = sys;
    inst.noise = {0.04, 0.02};
    inst.cost.kind = CostKind::CustomQuadratic;
    inst.cost.Q = 0.5 * Matrix::Identity(sys.traj_dim(), sys.traj_dim());
    inst.cost.q = Vector::Zero(sys.traj_dim());
    inst.cost.q(4) = -10.0;
    inst.cost.position_selector = Matrix::Identity(1, 1);
    Vector cap = Vector::Zero(sys.traj_dim());
    cap(4) = 1.0;
    inst.known.halfspaces.push_back({cap, 1.0});

    FeedbackGain K = riccati_gain(sys);
    ForwardSolution sol = solve_forward(inst, ForwardMode::FixedPhi, K);
    REQUIRE(sol.status == SolveStatus::Optimal);
    ErrorMaps maps = error_maps(sol.phi, sys);

    forge::Rng rng(55);
    auto check_rollout = [&](const NoiseSequence& seq) {
        Demonstration demo = rollout(sys, sol.z, sol.v, K, seq);
        Vector stack(sys.traj_dim());
        stack << demo.hidden_x, demo.u;
        CHECK(cap.dot(stack) <= 1.0 + 1e-9);
    };
    for (int s = 0; s < 200; ++s)
        check_rollout(sample_noise(inst.noise, sys.T, sys.n, sys.n_o,
                                   NoiseStrategy::UniformBall, rng.split(s)));
    // exact worst case for the cap row
    auto [wv, ev] = adversarial_noise(cap, maps, inst.noise);
    NoiseSequence adv;
    for (int t = 0; t < sys.T; ++t) adv.w.push_back(wv.segment(t, 1));
    for (int t = 0; t < sys.T; ++t) adv.e.push_back(ev.segment(t, 1));
    adv.e.push_back(Vector::Zero(1));
    Demonstration worst = rollout(sys, sol.z, sol.v, K, adv);
    Vector stack(sys.traj_dim());
    stack << worst.hidden_x, worst.u;
    // adversarial vertex lands exactly on the untightened boundary
    CHECK(cap.dot(stack) == doctest::Approx(1.0).epsilon(1e-8));
}
