#include "klab/analysis.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>

namespace klab {

namespace {

double dot(const DenseArray& a, const DenseArray& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm_sq(const DenseArray& a) { return dot(a, a); }

// |S^T v|^2 = v^T S S^T v.
double st_norm_sq(const DenseArray& scale, const DenseArray& v) {
    const std::size_t d = v.size();
    double total = 0;
    for (std::size_t j = 0; j < d; ++j) {
        double col = 0;  // (S^T v)_j = sum_i S_ij v_i
        for (std::size_t i = 0; i < d; ++i) col += scale.at2(i, j) * v[i];
        total += col * col;
    }
    return total;
}

}  // namespace

DenseArray MseInputs::p() const {
    DenseArray out({q.size()});
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = k[i] - q[i];
    return out;
}

DenseArray MseInputs::o() const {
    DenseArray out({q.size()});
    for (std::size_t i = 0; i < q.size(); ++i) out[i] = k[i] + q[i];
    return out;
}

void MseInputs::validate() const {
    if (m < 1) throw ContractError("MseInputs: m must be at least 1");
    const std::size_t d = q.size();
    if (k.size() != d || mu.size() != d)
        throw DimensionError("MseInputs: q, k, mu must share a dimension");
    if (scale.rank() != 2 || scale.rows() != d || scale.cols() != d)
        throw DimensionError("MseInputs: scale must be d x d");
    if (!q.all_finite() || !k.all_finite() || !mu.all_finite() || !scale.all_finite())
        throw DataError("MseInputs: non-finite inputs");
}

double mse_rks_closed_form(const MseInputs& in) {
    in.validate();
    const DenseArray pv = in.p();
    const double c = std::cos(dot(in.mu, pv));
    const double a = st_norm_sq(in.scale, pv);
    const double t = 1.0 - std::exp(-a);
    return (2.0 / static_cast<double>(in.m)) * c * c * t * t;
}

double mse_prf_closed_form(const MseInputs& in) {
    in.validate();
    const DenseArray ov = in.o();
    const double a = st_norm_sq(in.scale, ov);
    const double outer = std::exp(-2.0 * (norm_sq(in.q) + norm_sq(in.k) - dot(in.mu, ov)));
    return (1.0 / static_cast<double>(in.m)) * outer * (std::exp(2.0 * a) - std::exp(a));
}

double mse_prf_closed_form_unsquared(const MseInputs& in) {
    in.validate();
    const DenseArray ov = in.o();
    const double a = std::sqrt(st_norm_sq(in.scale, ov));
    const double outer = std::exp(-2.0 * (norm_sq(in.q) + norm_sq(in.k) - dot(in.mu, ov)));
    return (1.0 / static_cast<double>(in.m)) * outer * (std::exp(2.0 * a) - std::exp(a));
}

namespace {

// (S eta) . v computed as eta . (S^T v); the projection S^T v is shared by
// every sample of a trial, so precompute it.
DenseArray st_project(const DenseArray& scale, const DenseArray& v) {
    const std::size_t d = v.size();
    DenseArray out({d});
    for (std::size_t j = 0; j < d; ++j) {
        double col = 0;
        for (std::size_t i = 0; i < d; ++i) col += scale.at2(i, j) * v[i];
        out[j] = col;
    }
    return out;
}

}  // namespace

double symmetric_pair_rks_estimate(const MseInputs& in, Rng& rng) {
    const DenseArray pv = in.p();
    const double mu_p = dot(in.mu, pv);
    const DenseArray proj = st_project(in.scale, pv);
    const std::size_t d = pv.size();
    double sum = 0;
    for (std::size_t i = 0; i < in.m; ++i) {
        double eta_sp = 0;
        for (std::size_t j = 0; j < d; ++j) eta_sp += rng.normal() * proj[j];
        sum += std::cos(eta_sp + mu_p) + std::cos(eta_sp - mu_p);
    }
    return sum / static_cast<double>(in.m);
}

double prf_gaussian_estimate(const MseInputs& in, Rng& rng) {
    const DenseArray ov = in.o();
    const double base = dot(in.mu, ov) - norm_sq(in.q) - norm_sq(in.k);
    const DenseArray proj = st_project(in.scale, ov);
    const std::size_t d = ov.size();
    double sum = 0;
    for (std::size_t i = 0; i < in.m; ++i) {
        double eta_sp = 0;
        for (std::size_t j = 0; j < d; ++j) eta_sp += rng.normal() * proj[j];
        sum += std::exp(eta_sp + base);
    }
    return sum / static_cast<double>(in.m);
}

double symmetric_pair_rks_mean(const MseInputs& in) {
    const DenseArray pv = in.p();
    return 2.0 * std::cos(dot(in.mu, pv)) * std::exp(-0.5 * st_norm_sq(in.scale, pv));
}

double prf_gaussian_mean(const MseInputs& in) {
    const DenseArray ov = in.o();
    return std::exp(dot(in.mu, ov) - norm_sq(in.q) - norm_sq(in.k) +
                    0.5 * st_norm_sq(in.scale, ov));
}

double gaussian_mixture_kernel(const std::vector<DenseArray>& means,
                               const std::vector<DenseArray>& scales, const DenseArray& q,
                               const DenseArray& k) {
    if (means.empty() || means.size() != scales.size())
        throw ContractError("gaussian_mixture_kernel: component mismatch");
    DenseArray delta({q.size()});
    for (std::size_t i = 0; i < q.size(); ++i) delta[i] = q[i] - k[i];
    double sum = 0;
    for (std::size_t c = 0; c < means.size(); ++c)
        sum += std::exp(-0.5 * st_norm_sq(scales[c], delta)) * std::cos(dot(means[c], delta));
    return sum / static_cast<double>(means.size());
}

McMseResult mc_mse(MseEstimator which, const MseInputs& in, std::size_t trials,
                   std::uint64_t seed) {
    in.validate();
    if (trials < 1) throw ContractError("mc_mse: need at least one trial");
    const double target = which == MseEstimator::SymmetricPairRks
                              ? symmetric_pair_rks_mean(in)
                              : prf_gaussian_mean(in);
    double sum = 0, sum_sq = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(derive_seed(seed, t));
        const double est = which == MseEstimator::SymmetricPairRks
                               ? symmetric_pair_rks_estimate(in, rng)
                               : prf_gaussian_estimate(in, rng);
        const double dev = est - target;
        const double sq = dev * dev;
        sum += sq;
        sum_sq += sq * sq;
    }
    McMseResult r;
    r.trials = trials;
    r.target = target;
    r.mse = sum / static_cast<double>(trials);
    const double var_of_sq =
        sum_sq / static_cast<double>(trials) - r.mse * r.mse;
    r.std_error = std::sqrt(std::max(var_of_sq, 0.0) / static_cast<double>(trials));
    return r;
}

std::vector<double> covariance_eigenvalues(const DenseArray& scale) {
    if (scale.rank() != 2 || scale.rows() != scale.cols())
        throw DimensionError("covariance_eigenvalues: scale must be square");
    const std::size_t d = scale.rows();
    using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const EMat> S(scale.data(), d, d);
    Eigen::MatrixXd cov = S * S.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov, Eigen::EigenvaluesOnly);
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i) out[i] = solver.eigenvalues()[d - 1 - i];
    return out;
}

VarianceReport stochasticity_metrics(
    const std::function<double(std::size_t example, std::uint64_t run_seed)>& output,
    const std::vector<int>& labels, int runs, std::uint64_t seed) {
    if (runs < 1) throw ContractError("stochasticity_metrics: runs must be positive");
    const std::size_t n = labels.size();
    VarianceReport rep;
    rep.runs = runs;
    rep.raw_outputs.assign(n, std::vector<double>(runs));

    for (int r = 0; r < runs; ++r) {
        const std::uint64_t run_seed = derive_seed(seed, static_cast<std::uint64_t>(r));
        for (std::size_t e = 0; e < n; ++e) rep.raw_outputs[e][r] = output(e, run_seed);
    }

    int single_correct = 0, voting_correct = 0;
    for (std::size_t e = 0; e < n; ++e) {
        const auto& outs = rep.raw_outputs[e];
        double mean = 0;
        int positives = 0;
        for (double v : outs) {
            mean += v;
            if (v > 0) ++positives;
        }
        mean /= runs;
        double var = 0;
        for (double v : outs) var += (v - mean) * (v - mean);
        const double sd = runs > 1 ? std::sqrt(var / (runs - 1)) : 0.0;
        if (mean == 0.0) {
            rep.rsd.push_back(std::numeric_limits<double>::infinity());
            rep.rsd_infinite.push_back(true);
        } else {
            rep.rsd.push_back(sd / std::abs(mean));
            rep.rsd_infinite.push_back(false);
        }
        rep.pi.push_back(std::min(positives, runs - positives));

        const int single_pred = outs[0] > 0 ? 1 : -1;
        int majority;
        if (2 * positives > runs) majority = 1;
        else if (2 * positives < runs) majority = -1;
        else majority = mean > 0 ? 1 : -1;
        if (single_pred == labels[e]) ++single_correct;
        if (majority == labels[e]) ++voting_correct;
    }
    rep.single_accuracy = n ? static_cast<double>(single_correct) / n : 0.0;
    rep.voting_accuracy = n ? static_cast<double>(voting_correct) / n : 0.0;
    if (rep.single_accuracy > 0) rep.agv = rep.voting_accuracy / rep.single_accuracy;
    else rep.agv = rep.voting_accuracy == 0 ? 1.0 : std::numeric_limits<double>::infinity();
    return rep;
}

}  // namespace klab
