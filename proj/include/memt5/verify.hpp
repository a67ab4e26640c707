#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "memt5/tensor.hpp"

// Independent oracles. Nothing here shares an implementation path with the
// kernels it checks; differences are the whole point.

namespace memt5 {

struct OracleReport {
    std::string id;
    double max_abs = 0.0;
    double max_rel = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    double seconds = 0.0;
};

inline std::string oracle_csv_header() { return "case,max_abs,max_rel,tolerance,pass,seconds"; }

inline std::string oracle_csv_row(const OracleReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s,%.3e,%.3e,%.3e,%s,%.3f", r.id.c_str(), r.max_abs, r.max_rel,
                  r.tolerance, r.pass ? "pass" : "fail", r.seconds);
    return buf;
}

// Central finite differences on every element of every leaf versus the
// analytic gradients of `scalar_fn`. 64-bit only; the caller must disable
// dropout inside `scalar_fn`.
inline OracleReport gradcheck(const std::string& id, const std::function<Tensor<double>()>& scalar_fn,
                              const std::vector<Tensor<double>>& leaves, double eps = 1e-5,
                              double tol = 1e-4) {
    auto t0 = std::chrono::steady_clock::now();
    OracleReport rep;
    rep.id = id;
    rep.tolerance = tol;

    for (const auto& l : leaves) l.node()->requires_grad = true;
    for (const auto& l : leaves) l.node()->grad.clear();
    Tensor<double> loss = scalar_fn();
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (const auto& l : leaves) {
        if (l.grad().empty())
            analytic.emplace_back(l.data().size(), 0.0);
        else
            analytic.push_back(l.grad());
    }

    NoGradGuard ng;  // numeric sweep needs values only
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& vals = leaves[li].node()->value;
        for (size_t i = 0; i < vals.size(); ++i) {
            double orig = vals[i];
            vals[i] = orig + eps;
            double fp = scalar_fn().item();
            vals[i] = orig - eps;
            double fm = scalar_fn().item();
            vals[i] = orig;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[li][i];
            double abs_diff = std::abs(a - numeric);
            double rel = abs_diff / std::max({1.0, std::abs(a), std::abs(numeric)});
            rep.max_abs = std::max(rep.max_abs, abs_diff);
            rep.max_rel = std::max(rep.max_rel, rel);
        }
    }
    rep.pass = rep.max_rel <= tol;
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

}  // namespace memt5
