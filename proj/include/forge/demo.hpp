#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "forge/dynamics.hpp"
#include "forge/forward.hpp"
#include "forge/problem.hpp"
#include "forge/rng.hpp"
#include "forge/sls.hpp"

namespace forge {

// One noise realization. w has T blocks: w_0 perturbs the initial state, w_t
// enters state x_t for t >= 1 (the step into x_T is noise-free). e has T+1
// blocks, one per output.
struct NoiseSequence {
    std::vector<Vector> w;   // T vectors, dim n
    std::vector<Vector> e;   // T+1 vectors, dim n_o
};

enum class NoiseStrategy { UniformBall, Vertex };

inline NoiseSequence sample_noise(const NoiseModel& noise, int T, int n, int n_o,
                                  NoiseStrategy strategy, Rng rng) {
    NoiseSequence seq;
    auto draw = [&](double radius, int dim) {
        Vector v(dim);
        for (int i = 0; i < dim; ++i)
            v(i) = strategy == NoiseStrategy::UniformBall ? rng.uniform_sym(radius)
                                                          : rng.sign_times(radius);
        return v;
    };
    for (int t = 0; t < T; ++t) seq.w.push_back(draw(noise.w_radius, n));
    for (int t = 0; t <= T; ++t) seq.e.push_back(draw(noise.e_radius, n_o));
    return seq;
}

struct Demonstration {
    Vector u;          // n_iT
    Vector y;          // n_o(T+1); consumers of the SLS stacks slice the first T blocks
    Vector hidden_x;   // n(T+1), test oracles only — never read by the inverse pipeline
};

struct DemoSet {
    std::vector<Demonstration> demos;
    bool corrupted = false;
    double epsilon = 0.0;
    std::uint64_t rng_seed = 0;
    // uncorrupted originals, retained for error measurement when corrupted
    std::vector<Demonstration> originals;

    int count() const { return static_cast<int>(demos.size()); }
};

// Closed-loop rollout: x_0 = xbar + w_0, x_{t+1} = f_t(x_t, u_t) + w_{t+1}
// (last step noise-free), y_t = C_t x_t + e_t, u_t = v_t + sum K_{t,tau} dy_tau.
inline Demonstration rollout(const NonlinearSystem& sys, const Vector& z, const Vector& v,
                             const FeedbackGain& K, const NoiseSequence& noise) {
    const int T = sys.T, n = sys.n, n_i = sys.n_i, n_o = sys.n_o;
    if (static_cast<int>(noise.w.size()) != T || static_cast<int>(noise.e.size()) != T + 1)
        throw std::invalid_argument("rollout: noise sequence lengths do not match horizon");
    if (z.size() != n * (T + 1) || v.size() != n_i * T)
        throw std::invalid_argument("rollout: nominal stack lengths do not match horizon");
    if (upper_block_magnitude(K.K, n_i, n_o) != 0.0)
        throw std::invalid_argument("rollout: gain is not causal");

    Demonstration demo;
    demo.u = Vector::Zero(n_i * T);
    demo.y = Vector::Zero(n_o * (T + 1));
    demo.hidden_x = Vector::Zero(n * (T + 1));

    Vector x = sys.x0 + noise.w[0];
    std::vector<Vector> dy;   // output errors y_tau - C z_tau for tau <= t
    for (int t = 0; t <= T; ++t) {
        if (!x.allFinite())
            throw std::runtime_error("rollout: non-finite state at timestep " + std::to_string(t));
        demo.hidden_x.segment(t * n, n) = x;
        Vector y = sys.C_blocks[t] * x + noise.e[t];
        demo.y.segment(t * n_o, n_o) = y;
        if (t == T) break;
        dy.push_back(y - sys.C_blocks[t] * z.segment(t * n, n));
        Vector u = v.segment(t * n_i, n_i);
        for (int tau = 0; tau <= t; ++tau)
            u += K.K.block(t * n_i, tau * n_o, n_i, n_o) * dy[tau];
        demo.u.segment(t * n_i, n_i) = u;
        Vector next = sys.dynamics_fn(t, x, u);
        if (t + 1 < T) next += noise.w[t + 1];
        x = next;
    }
    return demo;
}

inline Demonstration rollout(const LtvSystem& sys, const Vector& z, const Vector& v,
                             const FeedbackGain& K, const NoiseSequence& noise) {
    return rollout(as_nonlinear(sys), z, v, K, noise);
}

template <typename System>
DemoSet generate_demoset(const ForwardSolution& solution, const System& sys,
                         const NoiseModel& noise, int D, NoiseStrategy strategy, Rng rng) {
    if (D < 1) throw std::invalid_argument("generate_demoset: D must be >= 1");
    if (solution.status != SolveStatus::Optimal)
        throw std::invalid_argument("generate_demoset: forward solution is not optimal");
    DemoSet set;
    for (int d = 0; d < D; ++d) {
        Rng stream = rng.split(d);
        NoiseSequence seq = sample_noise(noise, sys.T, sys.n, sys.n_o, strategy, stream);
        set.demos.push_back(rollout(sys, solution.z, solution.v, solution.K, seq));
    }
    return set;
}

inline DemoSet perturb(const DemoSet& demos, double epsilon, Rng rng) {
    if (epsilon < 0) throw std::invalid_argument("perturb: epsilon must be >= 0");
    DemoSet out = demos;
    out.corrupted = true;
    out.epsilon = epsilon;
    out.originals = demos.demos;
    for (std::size_t d = 0; d < out.demos.size(); ++d) {
        Rng stream = rng.split(d);
        Demonstration& demo = out.demos[d];
        for (int i = 0; i < demo.u.size(); ++i) demo.u(i) += stream.uniform_sym(epsilon);
        for (int i = 0; i < demo.y.size(); ++i) demo.y(i) += stream.uniform_sym(epsilon);
    }
    return out;
}

} // namespace forge
