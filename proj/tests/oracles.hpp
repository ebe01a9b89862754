#pragma once

// Independent reference computations used by the tests. None of them call the
// library's conditional-expectation or solver code.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

/// Brute-force lattice: sign of the step-k increment for leaf s, read MSB first.
inline int sign(int N, int k, std::size_t s) { return ((s >> (N - 1 - k)) & 1u) ? 1 : -1; }

/// E[x | first k bits] by scanning all leaves with the same prefix.
inline std::vector<double> lattice_conditional(const std::vector<double>& x, int N, int k) {
    const std::size_t S = x.size();
    std::vector<double> out(S);
    for (std::size_t s = 0; s < S; ++s) {
        double sum = 0.0;
        std::size_t cnt = 0;
        for (std::size_t r = 0; r < S; ++r) {
            bool same = true;
            for (int j = 0; j < k && same; ++j) same = sign(N, j, r) == sign(N, j, s);
            if (same) {
                sum += x[r];
                ++cnt;
            }
        }
        out[s] = sum / static_cast<double>(cnt);
    }
    return out;
}

/// Classical scalar backward recursion on an explicit binary tree, one node per prefix:
/// Y_k = a_k(node) + b_k(node) E[Y_{k+1}] + c_k(node) E[Y_{k+1} dW] / dt.
/// Nodes are enumerated recursively from the root; the callbacks receive the prefix signs.
struct TreeRecursion {
    int N;
    double dt;
    std::function<double(const std::vector<int>&)> terminal;
    std::function<double(int, const std::vector<int>&)> a, b, c;

    double solve(std::vector<int>& prefix) const {
        const int k = static_cast<int>(prefix.size());
        if (k == N) return terminal(prefix);
        prefix.push_back(1);
        const double up = solve(prefix);
        prefix.back() = -1;
        const double dn = solve(prefix);
        prefix.pop_back();
        const double sq = std::sqrt(dt);
        const double E = 0.5 * (up + dn), EW = 0.5 * sq * (up - dn);
        return a(k, prefix) + b(k, prefix) * E + c(k, prefix) * EW / dt;
    }
};

/// Riccati equation -P' = 2 a P + sa^2 P + q - (b P + sa sb P)^2 / (r + sb^2 P), P(T) = s, by RK4.
/// Returns P on the n+1 points t_i = i T / n.
inline std::vector<double> riccati(double a, double b, double sa, double sb, double q, double r, double s,
                                   double T, int n, int substeps = 200) {
    auto rhs = [&](double P) {
        const double k = b * P + sa * sb * P;
        return -(2 * a * P + sa * sa * P + q - k * k / (r + sb * sb * P));
    };
    std::vector<double> P(static_cast<std::size_t>(n) + 1);
    P[static_cast<std::size_t>(n)] = s;
    double cur = s;
    const double h = -T / (static_cast<double>(n) * substeps);
    for (int i = n; i > 0; --i) {
        for (int j = 0; j < substeps; ++j) {
            const double k1 = rhs(cur), k2 = rhs(cur + 0.5 * h * k1), k3 = rhs(cur + 0.5 * h * k2),
                         k4 = rhs(cur + h * k3);
            cur += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        P[static_cast<std::size_t>(i - 1)] = cur;
    }
    return P;
}

/// Dense solve of a small linear system, used to cross-check sparse assemblies.
inline Eigen::VectorXd dense_solve(const Eigen::MatrixXd& A, const Eigen::VectorXd& b) {
    return A.fullPivLu().solve(b);
}

}  // namespace oracle
