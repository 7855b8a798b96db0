#include "klab/featmap.hpp"

#include <cmath>

namespace klab {

std::string to_string(FeatureKind k) { return k == FeatureKind::Rks ? "rks" : "prf"; }

void FeatureMapSpec::validate() const {
    if (samples < 1) throw ContractError("FeatureMapSpec: M must be at least 1");
    if (epsilon < 0) throw ContractError("FeatureMapSpec: epsilon must be non-negative");
    if (clamp <= 0) throw ContractError("FeatureMapSpec: clamp bound must be positive");
}

void rks_map_into(const double* x, std::size_t dim, const FrequencyMatrix& omega, double* out) {
    if (omega.dim() != dim) throw DimensionError("rks_map: frequency dimension mismatch");
    const std::size_t m = omega.count();
    const double inv = 1.0 / std::sqrt(static_cast<double>(m));
    for (std::size_t i = 0; i < m; ++i) {
        const double* w = omega.rows.data() + i * dim;
        double t = 0;
        for (std::size_t j = 0; j < dim; ++j) t += w[j] * x[j];
        out[i] = inv * std::cos(t);
        out[m + i] = inv * std::sin(t);
    }
}

DenseArray rks_map(const DenseArray& x, const FrequencyMatrix& omega) {
    if (x.rank() != 1) throw DimensionError("rks_map: x must be a vector");
    DenseArray out({2 * omega.count()});
    rks_map_into(x.data(), x.size(), omega, out.data());
    return out;
}

void prf_map_into(const double* x, std::size_t dim, const FrequencyMatrix& omega, double clamp,
                  bool half_norm, double* out) {
    if (omega.dim() != dim) throw DimensionError("prf_map: frequency dimension mismatch");
    const std::size_t m = omega.count();
    const double inv = 1.0 / std::sqrt(static_cast<double>(m));
    double nrm = 0;
    for (std::size_t j = 0; j < dim; ++j) nrm += x[j] * x[j];
    if (half_norm) nrm *= 0.5;
    for (std::size_t i = 0; i < m; ++i) {
        const double* w = omega.rows.data() + i * dim;
        double t = -nrm;
        for (std::size_t j = 0; j < dim; ++j) t += w[j] * x[j];
        if (t > clamp) t = clamp;
        if (t < -clamp) t = -clamp;
        out[i] = inv * std::exp(t);
    }
}

DenseArray prf_map(const DenseArray& x, const FrequencyMatrix& omega, double clamp,
                   bool half_norm) {
    if (x.rank() != 1) throw DimensionError("prf_map: x must be a vector");
    DenseArray out({omega.count()});
    prf_map_into(x.data(), x.size(), omega, clamp, half_norm, out.data());
    return out;
}

void feature_map_into(const double* x, std::size_t dim, const FeatureMapSpec& spec,
                      const FrequencyMatrix& omega, double* out) {
    if (omega.count() != spec.samples)
        throw DimensionError("feature_map: frequency count disagrees with spec M");
    if (spec.kind == FeatureKind::Rks) rks_map_into(x, dim, omega, out);
    else prf_map_into(x, dim, omega, spec.clamp, spec.half_norm, out);
}

double kernel_estimate(const DenseArray& q, const DenseArray& k, const FeatureMapSpec& spec,
                       const FrequencyMatrix& omega) {
    spec.validate();
    if (!q.same_shape(k)) throw DimensionError("kernel_estimate: q and k shapes differ");
    const std::size_t f = spec.feature_dim();
    DenseArray fq({f}), fk({f});
    feature_map_into(q.data(), q.size(), spec, omega, fq.data());
    feature_map_into(k.data(), k.size(), spec, omega, fk.data());
    double s = 0;
    for (std::size_t i = 0; i < f; ++i) s += fq[i] * fk[i];
    return s;
}

Var rks_feature_rows(const Var& proj) {
    const std::size_t m = proj.value().cols();
    return scale(trig_features(proj), 1.0 / std::sqrt(static_cast<double>(m)));
}

Var prf_feature_rows(const Var& X, const Var& proj, double clamp_bound, bool half_norm) {
    const std::size_t m = proj.value().cols();
    Var sq = reduce_sum(mul(X, X), 1);  // |x|^2 per row
    if (half_norm) sq = scale(sq, 0.5);
    Var t = clamp(sub_colvec(proj, sq), -clamp_bound, clamp_bound);
    return scale(exp(t), 1.0 / std::sqrt(static_cast<double>(m)));
}

Var feature_rows(const Var& X, const Var& proj, const FeatureMapSpec& spec) {
    if (proj.value().cols() != spec.samples)
        throw DimensionError("feature_rows: projection width disagrees with spec M");
    return spec.kind == FeatureKind::Rks ? rks_feature_rows(proj)
                                         : prf_feature_rows(X, proj, spec.clamp, spec.half_norm);
}

}  // namespace klab
