#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "forge/matrix_io.hpp"

namespace forge {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct SolverSettings {
    double feas_tol = 1e-7;
    double stat_tol = 1e-7;
    double int_tol = 1e-6;
    // Regularization added to singular/absent Hessians so the active-set kernel
    // always works with a positive definite quadratic.
    double reg_qp = 1e-9;
    double reg_lp = 1e-10;
    int max_qp_iters = 0;      // 0 = auto (50 * (n + constraints))
    long max_nodes = 200000;
};

// min 1/2 x'Hx + f'x  s.t.  A_eq x = b_eq, A_in x <= b_in, lo <= x <= up,
// x_b in {0,1} for b in binaries. H empty (0x0) means linear / pure feasibility.
struct MathProgram {
    Matrix H;
    Vector f;
    Matrix A_eq;
    Vector b_eq;
    Matrix A_in;
    Vector b_in;
    Vector lo;                 // empty => -inf
    Vector up;                 // empty => +inf
    std::vector<int> binaries;

    int num_vars() const {
        if (f.size() > 0) return static_cast<int>(f.size());
        if (H.rows() > 0) return static_cast<int>(H.rows());
        if (A_eq.cols() > 0) return static_cast<int>(A_eq.cols());
        return static_cast<int>(A_in.cols());
    }
};

enum class SolveStatus { Optimal, Infeasible, Unbounded, IterLimit };

inline const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::Optimal: return "Optimal";
        case SolveStatus::Infeasible: return "Infeasible";
        case SolveStatus::Unbounded: return "Unbounded";
        case SolveStatus::IterLimit: return "IterLimit";
    }
    return "?";
}

struct Solution {
    SolveStatus status = SolveStatus::Infeasible;
    Vector x;
    Vector eq_multipliers;       // nu, one per A_eq row
    Vector ineq_multipliers;     // lambda >= 0, one per A_in row
    Vector lo_multipliers;       // bound multipliers (x >= lo)
    Vector up_multipliers;       // bound multipliers (x <= up)
    double objective = 0.0;
    long nodes_explored = 0;
    std::vector<int> infeasible_rows;   // inconsistent subsystem when Infeasible
};

namespace detail {

// Goldfarb-Idnani dual active-set method with a positive definite Hessian.
// Constraints are held as CE' x + ce0 = 0 and CI' x + ci0 >= 0.
class GoldfarbIdnani {
public:
    GoldfarbIdnani(const Matrix& G, const Vector& g0, const Matrix& CE, const Vector& ce0,
                   const Matrix& CI, const Vector& ci0, int max_iters)
        : G_(G), g0_(g0), CE_(CE), ce0_(ce0), CI_(CI), ci0_(ci0), max_iters_(max_iters) {}

    SolveStatus run(Vector& x_out, Vector& u_eq, Vector& u_in, std::vector<int>& bad_rows) {
        const int n = static_cast<int>(G_.rows());
        const int p = static_cast<int>(CE_.cols());
        const int m = static_cast<int>(CI_.cols());
        Eigen::LLT<Matrix> llt(G_);
        if (llt.info() != Eigen::Success)
            throw std::runtime_error("active-set QP: Hessian is not positive definite");

        Vector x = -llt.solve(g0_);
        Matrix L = llt.matrixL();
        J_ = Matrix::Identity(n, n);
        J_ = L.triangularView<Eigen::Lower>().transpose().solve(J_);
        R_ = Matrix::Zero(n, n);
        R_norm_ = 1.0;
        iq_ = 0;
        active_.assign(n + 1, 0);
        Vector u = Vector::Zero(n + 1);
        Vector d(n), z(n), r(n), np(n);

        u_eq = Vector::Zero(p);
        u_in = Vector::Zero(m);

        // --- equality constraints, forced active ---
        for (int i = 0; i < p; ++i) {
            np = CE_.col(i);
            compute_d(d, np);
            update_z(z, d, n);
            update_r(r, d);
            const double znp = z.dot(np);
            const double resid = np.dot(x) + ce0_(i);
            if (std::abs(znp) <= 1e-12 * (1.0 + np.norm())) {
                // dependent equality: consistent -> skip, inconsistent -> infeasible
                if (std::abs(resid) <= 1e-8 * (1.0 + std::abs(ce0_(i)))) continue;
                bad_rows.push_back(-i - 1);
                return SolveStatus::Infeasible;
            }
            const double t2 = -resid / znp;
            x += t2 * z;
            u.head(iq_) -= t2 * r.head(iq_);
            u(iq_) = t2;
            active_[iq_] = -i - 1;
            if (!add_constraint(d)) {
                bad_rows.push_back(-i - 1);
                return SolveStatus::Infeasible;
            }
        }
        const int num_eq = iq_;

        // --- inequality loop ---
        Vector s(m);
        int iters = 0;
        while (true) {
            if (++iters > max_iters_) return SolveStatus::IterLimit;
            // most violated inactive constraint
            for (int i = 0; i < m; ++i) s(i) = CI_.col(i).dot(x) + ci0_(i);
            for (int k = num_eq; k < iq_; ++k) s(active_[k]) = 0.0;
            int ip = -1;
            double worst = -feas_eps_;
            for (int i = 0; i < m; ++i)
                if (s(i) < worst) { worst = s(i); ip = i; }
            if (ip < 0) break;  // all satisfied

            np = CI_.col(ip);
            double u_enter = 0.0;
            double s_ip = s(ip);
            while (true) {
                if (++iters > max_iters_) return SolveStatus::IterLimit;
                compute_d(d, np);
                update_z(z, d, n);
                update_r(r, d);

                // dual step bound over droppable (inequality) actives
                double t1 = kInf;
                int l_pos = -1;
                for (int k = num_eq; k < iq_; ++k) {
                    if (r(k) > 1e-14 && u(k) / r(k) < t1) {
                        t1 = u(k) / r(k);
                        l_pos = k;
                    }
                }
                // primal step to make constraint ip feasible
                double t2 = kInf;
                const double znp = z.dot(np);
                if (z.norm() > 1e-12 * (1.0 + np.norm()) && znp > 0) t2 = -s_ip / znp;

                const double t = std::min(t1, t2);
                if (!(t < kInf)) {
                    bad_rows.push_back(ip);
                    for (int k = 0; k < iq_; ++k) bad_rows.push_back(active_[k]);
                    return SolveStatus::Infeasible;
                }
                if (!(t2 < kInf)) {
                    // dual-only step: shrink multipliers and drop the blocker
                    u.head(iq_) -= t * r.head(iq_);
                    u_enter += t;
                    delete_constraint(u, l_pos, num_eq);
                    continue;
                }
                x += t * z;
                u.head(iq_) -= t * r.head(iq_);
                u_enter += t;
                if (t == t2) {
                    u(iq_) = u_enter;
                    active_[iq_] = ip;
                    if (!add_constraint(d)) {
                        // numerically dependent; treat as satisfied
                        break;
                    }
                    break;
                }
                // partial step: drop the blocker, stay on constraint ip
                delete_constraint(u, l_pos, num_eq);
                s_ip = np.dot(x) + ci0_(ip);
            }
        }

        for (int k = 0; k < iq_; ++k) {
            if (active_[k] < 0)
                u_eq(-active_[k] - 1) = u(k);
            else
                u_in(active_[k]) = std::max(0.0, u(k));
        }
        x_out = x;
        return SolveStatus::Optimal;
    }

private:
    void compute_d(Vector& d, const Vector& np) const { d = J_.transpose() * np; }

    void update_z(Vector& z, const Vector& d, int n) const {
        z = J_.rightCols(n - iq_) * d.tail(n - iq_);
    }

    void update_r(Vector& r, const Vector& d) const {
        if (iq_ > 0)
            r.head(iq_) = R_.topLeftCorner(iq_, iq_)
                              .triangularView<Eigen::Upper>()
                              .solve(d.head(iq_));
    }

    bool add_constraint(Vector& d) {
        const int n = static_cast<int>(J_.rows());
        for (int j = n - 1; j >= iq_ + 1; --j) {
            double cc = d(j - 1), ss = d(j);
            const double h = std::hypot(cc, ss);
            if (h == 0.0) continue;
            d(j) = 0.0;
            ss /= h;
            cc /= h;
            if (cc < 0) {
                cc = -cc;
                ss = -ss;
                d(j - 1) = -h;
            } else {
                d(j - 1) = h;
            }
            const double xny = ss / (1.0 + cc);
            for (int k = 0; k < n; ++k) {
                const double t1 = J_(k, j - 1), t2 = J_(k, j);
                J_(k, j - 1) = t1 * cc + t2 * ss;
                J_(k, j) = xny * (t1 + J_(k, j - 1)) - t2;
            }
        }
        ++iq_;
        R_.col(iq_ - 1).head(iq_) = d.head(iq_);
        if (std::abs(d(iq_ - 1)) <= 1e-13 * R_norm_) {
            --iq_;
            return false;
        }
        R_norm_ = std::max(R_norm_, std::abs(d(iq_ - 1)));
        return true;
    }

    void delete_constraint(Vector& u, int pos, int num_eq) {
        const int n = static_cast<int>(J_.rows());
        (void)num_eq;
        for (int i = pos; i < iq_ - 1; ++i) {
            active_[i] = active_[i + 1];
            u(i) = u(i + 1);
            R_.col(i) = R_.col(i + 1);
        }
        active_[iq_ - 1] = 0;
        u(iq_ - 1) = 0.0;
        --iq_;
        for (int j = pos; j < iq_; ++j) {
            double cc = R_(j, j), ss = R_(j + 1, j);
            const double h = std::hypot(cc, ss);
            if (h == 0.0) continue;
            cc /= h;
            ss /= h;
            R_(j + 1, j) = 0.0;
            if (cc < 0) {
                R_(j, j) = -h;
                cc = -cc;
                ss = -ss;
            } else {
                R_(j, j) = h;
            }
            const double xny = ss / (1.0 + cc);
            for (int k = j + 1; k < iq_; ++k) {
                const double t1 = R_(j, k), t2 = R_(j + 1, k);
                R_(j, k) = t1 * cc + t2 * ss;
                R_(j + 1, k) = xny * (t1 + R_(j, k)) - t2;
            }
            for (int k = 0; k < n; ++k) {
                const double t1 = J_(k, j), t2 = J_(k, j + 1);
                J_(k, j) = t1 * cc + t2 * ss;
                J_(k, j + 1) = xny * (J_(k, j) + t1) - t2;
            }
        }
    }

    const Matrix& G_;
    const Vector& g0_;
    const Matrix& CE_;
    const Vector& ce0_;
    const Matrix& CI_;
    const Vector& ci0_;
    int max_iters_;
    Matrix J_, R_;
    double R_norm_ = 1.0;
    int iq_ = 0;
    std::vector<int> active_;
    double feas_eps_ = 1e-9;
};

} // namespace detail

// Dense active-set QP with multiplier extraction. Bounds are expanded into
// inequality columns internally; multipliers are reported per original row.
// Linear programs (H absent) run the same kernel inside a proximal-point loop:
// each subproblem min f'x + mu/2 ||x - c||^2 is well conditioned, and the
// fixed point of c -> argmin is an exact LP solution with exact multipliers.
inline Solution solve_qp(const MathProgram& prog, const SolverSettings& settings = {}) {
    const int n = prog.num_vars();
    const int p = static_cast<int>(prog.A_eq.rows());
    const int m = static_cast<int>(prog.A_in.rows());
    if (n <= 0) throw std::invalid_argument("solve_qp: empty program");
    if (!prog.binaries.empty())
        throw std::invalid_argument("solve_qp: program has binaries; use solve_milp");
    if ((prog.H.size() > 0 && !prog.H.allFinite()) ||
        (prog.f.size() > 0 && !prog.f.allFinite()) || !prog.A_eq.allFinite() ||
        !prog.A_in.allFinite() || !prog.b_eq.allFinite() || !prog.b_in.allFinite())
        throw std::invalid_argument("solve_qp: non-finite data");

    Vector f = prog.f.size() > 0 ? prog.f : Vector(Vector::Zero(n));

    // PSD validation by Cholesky attempt; fall back to a shifted Hessian.
    Matrix G;
    const bool has_H = prog.H.size() > 0;
    if (has_H) {
        if (prog.H.rows() != n || prog.H.cols() != n)
            throw std::invalid_argument("solve_qp: H shape mismatch");
        if ((prog.H - prog.H.transpose()).cwiseAbs().maxCoeff() >
            1e-8 * (1.0 + prog.H.cwiseAbs().maxCoeff()))
            throw std::invalid_argument("solve_qp: H is not symmetric");
        G = prog.H;
        Eigen::LLT<Matrix> probe(G);
        if (probe.info() != Eigen::Success) {
            Eigen::LDLT<Matrix> ldlt(G);
            if (ldlt.info() != Eigen::Success || (ldlt.vectorD().array() < -1e-8).any())
                throw std::invalid_argument("solve_qp: H is not positive semidefinite");
            const double scale = std::max(1.0, G.diagonal().maxCoeff());
            G += settings.reg_qp * scale * Matrix::Identity(n, n);
        }
    }

    // bounds -> extra inequality columns
    int nb = 0;
    for (int j = 0; j < n; ++j) {
        if (prog.lo.size() > 0 && std::isfinite(prog.lo(j))) ++nb;
        if (prog.up.size() > 0 && std::isfinite(prog.up(j))) ++nb;
    }
    Matrix CE = prog.A_eq.transpose();
    Vector ce0 = -prog.b_eq;
    Matrix CI(n, m + nb);
    Vector ci0(m + nb);
    for (int i = 0; i < m; ++i) {
        CI.col(i) = -prog.A_in.row(i).transpose();
        ci0(i) = prog.b_in(i);
    }
    std::vector<std::pair<int, int>> bound_rows;  // (var, +1 lo / -1 up)
    {
        int c = m;
        for (int j = 0; j < n; ++j) {
            if (prog.lo.size() > 0 && std::isfinite(prog.lo(j))) {
                CI.col(c).setZero();
                CI(j, c) = 1.0;
                ci0(c) = -prog.lo(j);
                bound_rows.emplace_back(j, +1);
                ++c;
            }
            if (prog.up.size() > 0 && std::isfinite(prog.up(j))) {
                CI.col(c).setZero();
                CI(j, c) = -1.0;
                ci0(c) = prog.up(j);
                bound_rows.emplace_back(j, -1);
                ++c;
            }
        }
    }

    const int max_iters =
        settings.max_qp_iters > 0 ? settings.max_qp_iters : 50 * (n + p + m + nb + 10);

    Solution sol;
    Vector u_eq, u_in;
    if (has_H) {
        detail::GoldfarbIdnani gi(G, f, CE, ce0, CI, ci0, max_iters);
        sol.status = gi.run(sol.x, u_eq, u_in, sol.infeasible_rows);
        if (sol.status != SolveStatus::Optimal) return sol;
    } else {
        const double scale = std::max(1.0, f.lpNorm<Eigen::Infinity>());
        const double mu0 = std::max(settings.reg_lp, 1e-3) * scale;
        double mu = mu0;
        Vector center = Vector::Zero(n);
        bool converged = false;
        for (int it = 0; it < 200; ++it) {
            Matrix Gp = mu * Matrix::Identity(n, n);
            Vector fp = f - mu * center;
            detail::GoldfarbIdnani gi(Gp, fp, CE, ce0, CI, ci0, max_iters);
            sol.infeasible_rows.clear();
            sol.status = gi.run(sol.x, u_eq, u_in, sol.infeasible_rows);
            if (sol.status != SolveStatus::Optimal) return sol;
            if (it == 0 && f.lpNorm<Eigen::Infinity>() > 0) {
                // recession-ray check: a feasible direction with f'd < 0 means
                // the LP is unbounded. min f'd + 1/2||d||^2 over the recession
                // cone is < 0 exactly when such a direction exists.
                Matrix CIr = CI;
                Vector ci0r = Vector::Zero(CI.cols());
                Matrix CEr = CE;
                Vector ce0r = Vector::Zero(CE.cols());
                Matrix Gr = Matrix::Identity(n, n);
                detail::GoldfarbIdnani ray(Gr, f, CEr, ce0r, CIr, ci0r, max_iters);
                Vector d, ue, ui;
                std::vector<int> rows;
                if (ray.run(d, ue, ui, rows) == SolveStatus::Optimal &&
                    f.dot(d) + 0.5 * d.squaredNorm() < -1e-8 * scale) {
                    sol.status = SolveStatus::Unbounded;
                    return sol;
                }
            }
            if ((sol.x - center).lpNorm<Eigen::Infinity>() <=
                1e-10 * (1.0 + sol.x.lpNorm<Eigen::Infinity>())) {
                converged = true;
                break;
            }
            center = sol.x;
            if (it > 0 && it % 20 == 0) mu = std::max(mu * 0.1, 1e-9 * mu0);
        }
        if (!converged) {
            sol.status = SolveStatus::IterLimit;
            return sol;
        }
    }

    sol.eq_multipliers = -u_eq;  // sign convention: Hx + f + A_in'l + A_eq'v = 0
    sol.ineq_multipliers = u_in.head(m);
    sol.lo_multipliers = Vector::Zero(n);
    sol.up_multipliers = Vector::Zero(n);
    for (int k = 0; k < nb; ++k) {
        const auto [var, kind] = bound_rows[k];
        if (kind > 0)
            sol.lo_multipliers(var) = u_in(m + k);
        else
            sol.up_multipliers(var) = u_in(m + k);
    }
    sol.objective = f.dot(sol.x);
    if (has_H) sol.objective += 0.5 * sol.x.dot(prog.H * sol.x);
    return sol;
}

// Branch-and-bound over the binary variables: most-fractional branching with
// lowest-index tie-break, depth-first until the first incumbent, then
// best-bound. Deterministic by construction.
inline Solution solve_milp(const MathProgram& prog, const SolverSettings& settings = {}) {
    if (prog.binaries.empty()) return solve_qp(prog, settings);
    const int n = prog.num_vars();
    const bool has_objective = prog.H.size() > 0 || (prog.f.size() > 0 && prog.f.norm() > 0);

    Vector lo = prog.lo.size() > 0 ? prog.lo : Vector(Vector::Constant(n, -kInf));
    Vector up = prog.up.size() > 0 ? prog.up : Vector(Vector::Constant(n, kInf));
    for (int b : prog.binaries) {
        lo(b) = std::max(lo(b), 0.0);
        up(b) = std::min(up(b), 1.0);
    }

    // small safety margin so relaxation bounds never wrongly prune children
    const double bound_slack = 1e-7;

    struct Node {
        Vector lo, up;
        double bound;
    };
    std::deque<Node> open;
    open.push_back({lo, up, -kInf});

    Solution best;
    best.status = SolveStatus::Infeasible;
    bool have_incumbent = false;
    double incumbent = kInf;
    long nodes = 0;
    bool hit_limit = false;

    MathProgram relax = prog;
    relax.binaries.clear();

    while (!open.empty()) {
        if (++nodes > settings.max_nodes) { hit_limit = true; break; }
        Node node;
        if (!have_incumbent) {
            node = open.back();
            open.pop_back();  // depth-first
        } else {
            auto it = std::min_element(open.begin(), open.end(),
                                       [](const Node& a, const Node& b) { return a.bound < b.bound; });
            node = *it;
            open.erase(it);
        }
        if (have_incumbent && node.bound >= incumbent - 1e-9) continue;

        relax.lo = node.lo;
        relax.up = node.up;
        Solution rel = solve_qp(relax, settings);
        if (rel.status == SolveStatus::Infeasible) continue;
        if (rel.status == SolveStatus::IterLimit) { hit_limit = true; break; }
        const double node_bound = has_objective ? rel.objective - bound_slack : -kInf;
        if (have_incumbent && node_bound >= incumbent - 1e-9) continue;

        // integrality
        int frac_var = -1;
        double frac_dist = settings.int_tol;
        for (int b : prog.binaries) {
            const double v = rel.x(b);
            const double dist = std::abs(v - std::round(v));
            if (dist > frac_dist + 1e-15 &&
                (frac_var < 0 || dist > frac_dist)) {
                // most fractional == largest distance from the nearest integer
                frac_dist = dist;
                frac_var = b;
            }
        }
        // lowest-index tie-break among equally fractional variables
        if (frac_var >= 0) {
            for (int b : prog.binaries) {
                const double dist = std::abs(rel.x(b) - std::round(rel.x(b)));
                if (std::abs(dist - frac_dist) <= 1e-12 && b < frac_var) frac_var = b;
            }
        }

        if (frac_var < 0) {
            if (!has_objective || rel.objective < incumbent - 1e-9) {
                best = rel;
                best.status = SolveStatus::Optimal;
                incumbent = has_objective ? rel.objective : -kInf;
                have_incumbent = true;
                if (!has_objective) break;  // pure feasibility: first witness wins
            }
            continue;
        }
        Node lo_child = node, up_child = node;
        lo_child.up(frac_var) = 0.0;
        lo_child.lo(frac_var) = std::max(lo_child.lo(frac_var), 0.0);
        up_child.lo(frac_var) = 1.0;
        up_child.up(frac_var) = std::min(up_child.up(frac_var), 1.0);
        lo_child.bound = up_child.bound = node_bound;
        // explore the rounded branch first under depth-first
        if (rel.x(frac_var) >= 0.5) {
            open.push_back(lo_child);
            open.push_back(up_child);
        } else {
            open.push_back(up_child);
            open.push_back(lo_child);
        }
    }

    best.nodes_explored = nodes;
    if (hit_limit && !have_incumbent) best.status = SolveStatus::IterLimit;
    if (hit_limit && have_incumbent) best.status = SolveStatus::Optimal;  // best incumbent
    // snap binaries
    if (best.status == SolveStatus::Optimal)
        for (int b : prog.binaries) best.x(b) = std::round(best.x(b));
    return best;
}

// Pluggable solver layer: the built-in kernel is the default; an external MILP
// engine can be swapped in behind the same surface.
class SolverBackend {
public:
    virtual ~SolverBackend() = default;
    virtual Solution solve(const MathProgram& prog) = 0;
};

class BuiltinSolver final : public SolverBackend {
public:
    explicit BuiltinSolver(SolverSettings settings = {}) : settings_(settings) {}
    Solution solve(const MathProgram& prog) override {
        return prog.binaries.empty() ? solve_qp(prog, settings_) : solve_milp(prog, settings_);
    }
    const SolverSettings& settings() const { return settings_; }

private:
    SolverSettings settings_;
};

inline json program_debug_dump(const MathProgram& prog) {
    json j;
    j["num_vars"] = prog.num_vars();
    if (prog.H.size() > 0) j["H"] = to_json(prog.H);
    if (prog.f.size() > 0) j["f"] = to_json(prog.f);
    j["A_eq"] = to_json(prog.A_eq);
    j["b_eq"] = to_json(prog.b_eq);
    j["A_in"] = to_json(prog.A_in);
    j["b_in"] = to_json(prog.b_in);
    if (prog.lo.size() > 0) j["lo"] = to_json(prog.lo);
    if (prog.up.size() > 0) j["up"] = to_json(prog.up);
    j["binaries"] = prog.binaries;
    return j;
}

} // namespace forge
