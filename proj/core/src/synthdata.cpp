#include "fgd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "fgd/clustering.hpp"
#include "fgd/rng.hpp"

namespace fgd {

void GpSpec::validate() const {
    if (length_scales.size() != amplitudes.size()) {
        throw std::invalid_argument("GpSpec: " + std::to_string(length_scales.size()) + " length scales but " +
                                    std::to_string(amplitudes.size()) + " amplitudes");
    }
    if (length_scales.empty()) throw std::invalid_argument("GpSpec: no features");
    for (std::size_t f = 0; f < length_scales.size(); ++f) {
        if (!(length_scales[f] > 0.0) || !std::isfinite(length_scales[f]))
            throw std::invalid_argument("GpSpec: length scale of feature " + std::to_string(f) + " must be positive");
        if (!(amplitudes[f] > 0.0) || !std::isfinite(amplitudes[f]))
            throw std::invalid_argument("GpSpec: amplitude of feature " + std::to_string(f) + " must be positive");
    }
    if (length == 0) throw std::invalid_argument("GpSpec: series length must be positive");
    if (samples == 0) throw std::invalid_argument("GpSpec: sample count must be positive");
}

Eigen::MatrixXd rbf_kernel(std::size_t length, double length_scale, double amplitude) {
    const auto n = static_cast<Eigen::Index>(length);
    Eigen::MatrixXd k(n, n);
    const double a2 = amplitude * amplitude;
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            const double d = static_cast<double>(i - j);
            k(i, j) = a2 * std::exp(-d * d / (2.0 * length_scale * length_scale));
        }
    return k;
}

Tensor sample_gp(const GpSpec& spec) {
    spec.validate();
    const std::size_t f_count = spec.features();
    const std::size_t t_count = spec.length;
    std::vector<Eigen::MatrixXd> factors;
    factors.reserve(f_count);
    for (std::size_t f = 0; f < f_count; ++f) {
        Eigen::MatrixXd k = rbf_kernel(t_count, spec.length_scales[f], spec.amplitudes[f]);
        k.diagonal().array() += kGpJitter;
        Eigen::LLT<Eigen::MatrixXd> llt(k);
        if (llt.info() != Eigen::Success) {
            throw std::runtime_error("sample_gp: Cholesky factorization failed for feature " + std::to_string(f));
        }
        factors.push_back(llt.matrixL());
    }

    Tensor x({spec.samples, t_count, f_count});
    Eigen::VectorXd z(static_cast<Eigen::Index>(t_count));
    for (std::size_t i = 0; i < spec.samples; ++i) {
        Rng rng = Rng::derive(spec.seed, i);
        double* base = x.data() + i * t_count * f_count;
        for (std::size_t f = 0; f < f_count; ++f) {
            for (auto& v : z) v = rng.normal();
            const Eigen::VectorXd draw = factors[f].triangularView<Eigen::Lower>() * z;
            for (std::size_t t = 0; t < t_count; ++t) base[t * f_count + f] = draw(static_cast<Eigen::Index>(t));
        }
    }
    return x;
}

double lower_median(std::vector<double> values) {
    if (values.empty()) throw std::invalid_argument("lower_median: no values");
    const auto mid = values.begin() + static_cast<std::ptrdiff_t>((values.size() - 1) / 2);
    std::nth_element(values.begin(), mid, values.end());
    return *mid;
}

LabeledDataset assign_labels(Tensor series) {
    if (series.ndim() != 3) throw ShapeError("assign_labels: expected [N, T, F], got " + to_string(series.shape()));
    const std::size_t n = series.shape()[0];
    const std::size_t t_count = series.shape()[1];
    const std::size_t f_count = series.shape()[2];
    if (f_count < 4) throw std::invalid_argument("assign_labels: at least 4 features are required");
    if (n == 0) throw std::invalid_argument("assign_labels: no samples");

    std::vector<double> s12(n, 0.0);
    std::vector<double> s34(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = series.data() + i * t_count * f_count;
        for (std::size_t t = 0; t < t_count; ++t) {
            const double* v = row + t * f_count;
            s12[i] += v[0] * v[1];
            s34[i] += v[2] * v[3];
        }
    }
    LabeledDataset d;
    d.kappa12 = lower_median(s12);
    d.kappa34 = lower_median(s34);
    d.y = Tensor({n});
    for (std::size_t i = 0; i < n; ++i) d.y[i] = (s12[i] > d.kappa12 && s34[i] > d.kappa34) ? 1.0 : 0.0;

    const std::size_t groups = (f_count + 1) / 2;
    std::vector<std::size_t> labels(f_count);
    for (std::size_t f = 0; f < f_count; ++f) labels[f] = f / 2;
    d.ground_truth = MembershipMatrix::from_labels(labels, groups);
    d.x = std::move(series);
    return d;
}

LabeledDataset generate_dataset(const GpSpec& spec) { return assign_labels(sample_gp(spec)); }

namespace {
constexpr std::pair<std::string_view, StaticMode> kStaticModes[] = {{"flat", StaticMode::flat},
                                                                    {"time_mean", StaticMode::time_mean},
                                                                    {"sample_mean", StaticMode::sample_mean},
                                                                    {"full_mean", StaticMode::full_mean}};
}

std::string_view to_string(StaticMode m) {
    for (const auto& [name, v] : kStaticModes)
        if (v == m) return name;
    return "?";
}

StaticMode parse_static_mode(std::string_view s) {
    for (const auto& [name, v] : kStaticModes)
        if (name == s) return v;
    throw std::invalid_argument("unknown static mode '" + std::string(s) +
                                "' (expected flat, time_mean, sample_mean or full_mean)");
}

Eigen::MatrixXd static_transform(const LabeledDataset& data, StaticMode mode) {
    const std::size_t n = data.samples();
    const std::size_t t_count = data.steps();
    const std::size_t f_count = data.features();
    const double* x = data.x.data();
    auto at = [&](std::size_t i, std::size_t t, std::size_t f) { return x[(i * t_count + t) * f_count + f]; };
    double y_mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) y_mean += data.y[i];
    y_mean /= static_cast<double>(n);

    const auto fc = static_cast<Eigen::Index>(f_count);
    Eigen::MatrixXd out;
    switch (mode) {
    case StaticMode::flat:
        out.resize(fc, static_cast<Eigen::Index>(2 * n * t_count));
        for (std::size_t f = 0; f < f_count; ++f)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < t_count; ++t) {
                    const auto c = static_cast<Eigen::Index>(2 * (i * t_count + t));
                    out(static_cast<Eigen::Index>(f), c) = at(i, t, f);
                    out(static_cast<Eigen::Index>(f), c + 1) = data.y[i];
                }
        break;
    case StaticMode::time_mean:
        out.resize(fc, static_cast<Eigen::Index>(2 * n));
        for (std::size_t f = 0; f < f_count; ++f)
            for (std::size_t i = 0; i < n; ++i) {
                double s = 0.0;
                for (std::size_t t = 0; t < t_count; ++t) s += at(i, t, f);
                out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(2 * i)) = s / static_cast<double>(t_count);
                out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(2 * i + 1)) = data.y[i];
            }
        break;
    case StaticMode::sample_mean:
        out.resize(fc, static_cast<Eigen::Index>(2 * t_count));
        for (std::size_t f = 0; f < f_count; ++f)
            for (std::size_t t = 0; t < t_count; ++t) {
                double s = 0.0;
                for (std::size_t i = 0; i < n; ++i) s += at(i, t, f);
                out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(2 * t)) = s / static_cast<double>(n);
                out(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(2 * t + 1)) = y_mean;
            }
        break;
    case StaticMode::full_mean:
        out.resize(fc, 2);
        for (std::size_t f = 0; f < f_count; ++f) {
            // time means first, then sample mean, so this agrees with time_mean + averaging
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                double st = 0.0;
                for (std::size_t t = 0; t < t_count; ++t) st += at(i, t, f);
                s += st / static_cast<double>(t_count);
            }
            out(static_cast<Eigen::Index>(f), 0) = s / static_cast<double>(n);
            out(static_cast<Eigen::Index>(f), 1) = y_mean;
        }
        break;
    }
    return out;
}

KmeansFit kmeans_fit(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, std::size_t max_iter, double tol) {
    Rng rng(seed);
    ClusterState state = init_kmeanspp(points, k, ClusterOptions{}, rng);
    KmeansFit fit;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t it = 0; it < max_iter; ++it) {
        StepResult step = kmeans_step(points, state);
        state = std::move(step.state);
        fit.labels = hard_membership(step.scores).labels();
        fit.sse = kmeans_sse(points, state.centroids, fit.labels);
        fit.iterations = it + 1;
        const double change = std::abs(prev - fit.sse);
        if (std::isfinite(prev) && change <= tol * std::max(prev, std::numeric_limits<double>::min())) break;
        prev = fit.sse;
    }
    fit.centroids = state.centroids;
    return fit;
}

MembershipMatrix static_kmeans_baseline(const LabeledDataset& data, StaticMode mode, std::size_t k, std::uint64_t seed) {
    const std::size_t groups = data.ground_truth.clusters();
    if (k == 0 || k > groups) {
        throw std::invalid_argument("static_kmeans_baseline: K must be in [1, " + std::to_string(groups) + "], got " +
                                    std::to_string(k));
    }
    const KmeansFit fit = kmeans_fit(static_transform(data, mode), k, seed);
    return MembershipMatrix::from_labels(fit.labels, k);
}

}  // namespace fgd
