#pragma once

#include "rlt/model.hpp"

#include <cmath>

namespace rlt::test {

// dense-only toy architecture: inputs are plain feature vectors
inline ArchitectureSpec toy_dense(int features, int classes,
                                  const std::string& id = "toy") {
    ArchitectureSpec spec;
    spec.arch_id = id;
    spec.in_channels = features;
    spec.height = 1;
    spec.width = 1;
    spec.num_classes = classes;
    spec.layers = {LayerDesc{LayerKind::dense, features, classes, 1, true}};
    return spec;
}

inline MaskedModel toy_linear_model(const Mat& weights, std::uint64_t seed = 0) {
    // weights: classes x features
    ArchitectureSpec spec = toy_dense(static_cast<int>(weights.cols()),
                                      static_cast<int>(weights.rows()));
    MaskedModel m(spec, seed);
    Vec flat(weights.size());
    for (Index r = 0; r < weights.rows(); ++r)
        for (Index c = 0; c < weights.cols(); ++c) flat[r * weights.cols() + c] = weights(r, c);
    m.layer(0).omega = flat;
    m.init_scores();
    return m;
}

// regularized lower incomplete gamma P(a, x), series + continued fraction
inline double gamma_p(double a, double x) {
    if (x <= 0) return 0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::abs(del) < std::abs(sum) * 1e-12) break;
        }
        return sum * std::exp(-x + a * std::log(x) - gln);
    }
    double b = x + 1.0 - a, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i < 500; ++i) {
        double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::abs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < 1e-12) break;
    }
    return 1.0 - std::exp(-x + a * std::log(x) - gln) * h;
}

// upper tail p-value of a chi-square statistic
inline double chi_square_pvalue(double stat, double dof) {
    return 1.0 - gamma_p(dof / 2.0, stat / 2.0);
}

}  // namespace rlt::test
