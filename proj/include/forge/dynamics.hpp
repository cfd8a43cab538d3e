#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "forge/problem.hpp"

namespace forge {

// State (px, py, vx, vy), inputs (ax, ay). output: full state or position only.
inline LtvSystem double_integrator(int T, double dt, const Vector& x0,
                                   bool position_output = false) {
    LtvSystem sys;
    sys.T = T;
    sys.n = 4;
    sys.n_i = 2;
    sys.n_o = position_output ? 2 : 4;
    Matrix A = Matrix::Identity(4, 4);
    A(0, 2) = dt;
    A(1, 3) = dt;
    Matrix B = Matrix::Zero(4, 2);
    B(2, 0) = dt;
    B(3, 1) = dt;
    Matrix C;
    if (position_output) {
        C = Matrix::Zero(2, 4);
        C(0, 0) = 1.0;
        C(1, 1) = 1.0;
    } else {
        C = Matrix::Identity(4, 4);
    }
    sys.A_blocks.assign(T, A);
    sys.B_blocks.assign(T, B);
    sys.C_blocks.assign(T + 1, C);
    sys.x0 = x0;
    return sys;
}

// State (px, py, heading, speed), inputs (turn rate, acceleration).
inline NonlinearSystem unicycle(int T, double dt, const Vector& x0) {
    NonlinearSystem sys;
    sys.T = T;
    sys.n = 4;
    sys.n_i = 2;
    sys.n_o = 4;
    sys.x0 = x0;
    sys.C_blocks.assign(T + 1, Matrix::Identity(4, 4));
    sys.dynamics_fn = [dt](int, const Vector& x, const Vector& u) {
        Vector next(4);
        next(0) = x(0) + x(3) * std::cos(x(2)) * dt;
        next(1) = x(1) + x(3) * std::sin(x(2)) * dt;
        next(2) = x(2) + u(0) * dt;
        next(3) = x(3) + u(1) * dt;
        return next;
    };
    sys.jacobian_fn = [dt](int, const Vector& x, const Vector&) {
        Matrix dfdx = Matrix::Identity(4, 4);
        dfdx(0, 2) = -x(3) * std::sin(x(2)) * dt;
        dfdx(0, 3) = std::cos(x(2)) * dt;
        dfdx(1, 2) = x(3) * std::cos(x(2)) * dt;
        dfdx(1, 3) = std::sin(x(2)) * dt;
        Matrix dfdu = Matrix::Zero(4, 2);
        dfdu(2, 0) = dt;
        dfdu(3, 1) = dt;
        return std::make_pair(dfdx, dfdu);
    };
    return sys;
}

// Linearized 12D quadcopter about hover: positions, Euler angles, and their
// rates; inputs are thrust offset and body torques. Best-effort stretch model.
inline LtvSystem quadcopter12d(int T, double dt, const Vector& x0,
                               double mass = 0.5, double gravity = 9.81,
                               double ixx = 2.5e-3, double iyy = 2.5e-3, double izz = 5e-3) {
    LtvSystem sys;
    sys.T = T;
    sys.n = 12;
    sys.n_i = 4;
    sys.n_o = 12;
    Matrix A = Matrix::Identity(12, 12);
    // position <- velocity
    for (int k = 0; k < 3; ++k) A(k, 6 + k) = dt;
    // attitude <- angular rate
    for (int k = 0; k < 3; ++k) A(3 + k, 9 + k) = dt;
    // velocity <- attitude (small-angle gravity tilt): vx' ~ g*pitch, vy' ~ -g*roll
    A(6, 4) = gravity * dt;
    A(7, 3) = -gravity * dt;
    Matrix B = Matrix::Zero(12, 4);
    B(8, 0) = dt / mass;    // vertical acceleration from thrust offset
    B(9, 1) = dt / ixx;
    B(10, 2) = dt / iyy;
    B(11, 3) = dt / izz;
    sys.A_blocks.assign(T, A);
    sys.B_blocks.assign(T, B);
    sys.C_blocks.assign(T + 1, Matrix::Identity(12, 12));
    sys.x0 = x0;
    return sys;
}

// Wrap an LTV system as a NonlinearSystem (exercises the nonlinear code paths).
inline NonlinearSystem as_nonlinear(const LtvSystem& sys) {
    NonlinearSystem nl;
    nl.T = sys.T;
    nl.n = sys.n;
    nl.n_i = sys.n_i;
    nl.n_o = sys.n_o;
    nl.x0 = sys.x0;
    nl.C_blocks = sys.C_blocks;
    auto A = sys.A_blocks;
    auto B = sys.B_blocks;
    nl.dynamics_fn = [A, B](int t, const Vector& x, const Vector& u) -> Vector {
        return A[t] * x + B[t] * u;
    };
    return nl;
}

} // namespace forge
