#include "fgd/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace fgd {
namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<std::string_view, E> (&table)[N], std::string_view what) {
    for (const auto& [name, value] : table)
        if (name == s) return value;
    std::string msg = "unknown " + std::string(what) + " '" + std::string(s) + "' (expected one of:";
    for (const auto& [name, value] : table) msg += " " + std::string(name);
    throw std::invalid_argument(msg + ")");
}

template <class E, std::size_t N>
std::string_view enum_name(E v, const std::pair<std::string_view, E> (&table)[N]) {
    for (const auto& [name, value] : table)
        if (value == v) return name;
    return "?";
}

constexpr std::pair<std::string_view, ClusterKind> kKinds[] = {
    {"kmeans", ClusterKind::kmeans}, {"fuzzy", ClusterKind::fuzzy}, {"gmm", ClusterKind::gmm}};
constexpr std::pair<std::string_view, CovarianceType> kCovTypes[] = {{"spherical", CovarianceType::spherical},
                                                                     {"diagonal", CovarianceType::diagonal},
                                                                     {"full", CovarianceType::full},
                                                                     {"tied", CovarianceType::tied}};
constexpr std::pair<std::string_view, CombineMode> kCombine[] = {{"bias", CombineMode::bias},
                                                                 {"bias_ext_catzero", CombineMode::bias_ext_catzero},
                                                                 {"bias_sum_linear", CombineMode::bias_sum_linear},
                                                                 {"bias_avg_linear", CombineMode::bias_avg_linear}};
constexpr std::pair<std::string_view, EmaRule> kRules[] = {{"moment_matching", EmaRule::moment_matching},
                                                           {"product_of_experts", EmaRule::product_of_experts},
                                                           {"wasserstein", EmaRule::wasserstein}};
constexpr std::pair<std::string_view, RegVariant> kVariants[] = {{"hard", RegVariant::hard},
                                                                 {"soft", RegVariant::soft}};
constexpr std::pair<std::string_view, MembershipMode> kModes[] = {{"hard", MembershipMode::hard},
                                                                  {"soft", MembershipMode::soft}};

std::size_t argmax_row(const Scores& s, Eigen::Index f) {
    std::size_t best = 0;
    for (Eigen::Index k = 1; k < s.cols(); ++k)
        if (s(f, k) > s(f, static_cast<Eigen::Index>(best))) best = static_cast<std::size_t>(k);
    return best;
}

Scores one_hot(const std::vector<std::size_t>& labels, std::size_t k) {
    Scores s = Scores::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(k));
    for (std::size_t f = 0; f < labels.size(); ++f) s(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(labels[f])) = 1.0;
    return s;
}

void check_points(const Points& points, const ClusterState& state, std::string_view op) {
    if (state.k() == 0) throw ClusteringError(std::string(op) + ": no clusters");
    if (points.cols() != state.centroids.cols()) {
        throw ShapeError(std::string(op) + ": points have dimension " + std::to_string(points.cols()) +
                         ", centroids " + std::to_string(state.centroids.cols()));
    }
    if (state.k() > static_cast<std::size_t>(points.rows())) {
        throw ClusteringError(std::string(op) + ": K=" + std::to_string(state.k()) + " exceeds point count " +
                              std::to_string(points.rows()));
    }
}

/// Nearest-centroid labels; empty clusters seize the point farthest from its centroid.
std::vector<std::size_t> kmeans_labels(const Points& points, const Eigen::MatrixXd& centroids) {
    const Eigen::MatrixXd d2 = squared_distances(points, centroids);
    const auto n = static_cast<std::size_t>(points.rows());
    const auto k = static_cast<std::size_t>(centroids.rows());
    std::vector<std::size_t> labels(n);
    std::vector<std::size_t> sizes(k, 0);
    for (std::size_t f = 0; f < n; ++f) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
            if (d2(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(c)) <
                d2(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(best)))
                best = c;
        labels[f] = best;
        ++sizes[best];
    }
    std::vector<bool> seized(n, false);
    for (std::size_t c = 0; c < k; ++c) {
        if (sizes[c] != 0) continue;
        std::size_t pick = n;
        double far = -1.0;
        for (std::size_t f = 0; f < n; ++f) {
            if (seized[f] || sizes[labels[f]] < 2) continue;
            const double d = d2(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(labels[f]));
            if (d > far) {
                far = d;
                pick = f;
            }
        }
        if (pick == n) throw ClusteringError("kmeans: cannot repair empty cluster " + std::to_string(c));
        --sizes[labels[pick]];
        labels[pick] = c;
        sizes[c] = 1;
        seized[pick] = true;
    }
    return labels;
}

Scores fcm_memberships(const Points& points, const Eigen::MatrixXd& centroids, double m) {
    const Eigen::MatrixXd d2 = squared_distances(points, centroids);
    const Eigen::Index n = points.rows();
    const Eigen::Index k = centroids.rows();
    const double expo = 1.0 / (m - 1.0);  // applied to squared distances
    Scores p = Scores::Zero(n, k);
    for (Eigen::Index f = 0; f < n; ++f) {
        Eigen::Index zero = -1;
        for (Eigen::Index c = 0; c < k; ++c)
            if (d2(f, c) == 0.0) {
                zero = c;
                break;
            }
        if (zero >= 0) {
            p(f, zero) = 1.0;
            continue;
        }
        for (Eigen::Index c = 0; c < k; ++c) {
            double acc = 0.0;
            for (Eigen::Index l = 0; l < k; ++l) acc += std::pow(d2(f, c) / d2(f, l), expo);
            p(f, c) = 1.0 / acc;
        }
    }
    return p;
}

struct Factor {
    Eigen::LLT<Eigen::MatrixXd> llt;
    double log_det = 0.0;
};

Factor factorize(const Eigen::MatrixXd& cov, std::size_t component) {
    Factor fac;
    fac.llt.compute(cov);
    if (fac.llt.info() != Eigen::Success) {
        throw ClusteringError("gmm: covariance of component " + std::to_string(component) +
                              " is not positive definite despite jitter");
    }
    const Eigen::MatrixXd& L = fac.llt.matrixLLT();
    for (Eigen::Index i = 0; i < L.rows(); ++i) fac.log_det += 2.0 * std::log(L(i, i));
    return fac;
}

/// log pi_k + log N(x_f | mu_k, Sigma_k), F x K.
Eigen::MatrixXd gmm_log_joint(const Points& points, const ClusterState& state) {
    const Eigen::Index n = points.rows();
    const Eigen::Index k = static_cast<Eigen::Index>(state.k());
    const double d = static_cast<double>(points.cols());
    if (state.covariances.size() != state.k() || state.weights.size() != k) {
        throw ClusteringError("gmm: state has " + std::to_string(state.covariances.size()) + " covariances and " +
                              std::to_string(state.weights.size()) + " weights for K=" + std::to_string(k));
    }
    Eigen::MatrixXd out(n, k);
    for (Eigen::Index c = 0; c < k; ++c) {
        const Factor fac = factorize(state.covariances[static_cast<std::size_t>(c)], static_cast<std::size_t>(c));
        const double log_w = state.weights(c) > 0.0 ? std::log(state.weights(c)) : -std::numeric_limits<double>::infinity();
        for (Eigen::Index f = 0; f < n; ++f) {
            const Eigen::VectorXd diff = (points.row(f) - state.centroids.row(c)).transpose();
            const Eigen::VectorXd z = fac.llt.matrixL().solve(diff);
            out(f, c) = log_w - 0.5 * (d * std::log(2.0 * std::numbers::pi) + fac.log_det + z.squaredNorm());
        }
    }
    return out;
}

double log_sum_exp(const Eigen::RowVectorXd& row) {
    const double mx = row.maxCoeff();
    if (!std::isfinite(mx)) return mx;
    return mx + std::log((row.array() - mx).exp().sum());
}

Scores responsibilities(const Eigen::MatrixXd& log_joint) {
    Scores r(log_joint.rows(), log_joint.cols());
    for (Eigen::Index f = 0; f < log_joint.rows(); ++f) {
        const double lse = log_sum_exp(log_joint.row(f));
        for (Eigen::Index c = 0; c < log_joint.cols(); ++c) r(f, c) = std::exp(log_joint(f, c) - lse);
    }
    return r;
}

Eigen::MatrixXd project_covariance(const Eigen::MatrixXd& cov, CovarianceType type) {
    switch (type) {
        case CovarianceType::diagonal:
            return Eigen::MatrixXd(cov.diagonal().asDiagonal());
        case CovarianceType::spherical: {
            const auto d = static_cast<double>(cov.rows());
            return Eigen::MatrixXd::Identity(cov.rows(), cov.cols()) * (cov.trace() / d);
        }
        case CovarianceType::full:
        case CovarianceType::tied:
            return 0.5 * (cov + cov.transpose());
    }
    return cov;
}

void check_spd(const Eigen::MatrixXd& m, std::string_view what) {
    if (m.rows() != m.cols()) throw ClusteringError(std::string(what) + ": covariance is not square");
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-9 * scale) {
        throw ClusteringError(std::string(what) + ": covariance is not symmetric");
    }
    Eigen::LLT<Eigen::MatrixXd> llt(m);
    if (llt.info() != Eigen::Success) throw ClusteringError(std::string(what) + ": covariance is not positive definite");
}

Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

void check_alpha(double alpha, std::string_view op) {
    if (!(alpha >= 0.0 && alpha < 1.0)) {
        throw std::invalid_argument(std::string(op) + ": alpha must lie in [0, 1), got " + std::to_string(alpha));
    }
}

}  // namespace

std::string_view to_string(ClusterKind v) { return enum_name(v, kKinds); }
std::string_view to_string(CovarianceType v) { return enum_name(v, kCovTypes); }
std::string_view to_string(CombineMode v) { return enum_name(v, kCombine); }
std::string_view to_string(EmaRule v) { return enum_name(v, kRules); }
std::string_view to_string(RegVariant v) { return enum_name(v, kVariants); }
std::string_view to_string(MembershipMode v) { return enum_name(v, kModes); }

ClusterKind parse_cluster_kind(std::string_view s) { return parse_enum(s, kKinds, "clustering algorithm"); }
CovarianceType parse_covariance_type(std::string_view s) { return parse_enum(s, kCovTypes, "covariance type"); }
CombineMode parse_combine_mode(std::string_view s) { return parse_enum(s, kCombine, "combine mode"); }
EmaRule parse_ema_rule(std::string_view s) { return parse_enum(s, kRules, "EMA rule"); }
RegVariant parse_reg_variant(std::string_view s) { return parse_enum(s, kVariants, "regularizer variant"); }
MembershipMode parse_membership_mode(std::string_view s) { return parse_enum(s, kModes, "membership mode"); }

// ---------------------------------------------------------------------------

std::size_t unified_dim(std::size_t hidden, CombineMode mode) {
    return mode == CombineMode::bias ? hidden : 2 * hidden;
}

Eigen::VectorXd unify(const Tensor& weights, const FeatureSpec& spec, CombineMode mode) {
    if (weights.ndim() != 2 || weights.rows() != spec.width + 1) {
        throw ShapeError("unify: weight matrix " + to_string(weights.shape()) + " does not match feature width " +
                         std::to_string(spec.width));
    }
    const std::size_t h = weights.cols();
    const std::size_t c = spec.width;
    Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(unified_dim(h, mode)));
    for (std::size_t j = 0; j < h; ++j) out(static_cast<Eigen::Index>(j)) = weights.at(c, j);
    if (mode == CombineMode::bias) return out;
    if (mode == CombineMode::bias_ext_catzero && spec.categorical) return out;
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < h; ++j) out(static_cast<Eigen::Index>(h + j)) += weights.at(i, j);
    if (mode == CombineMode::bias_avg_linear)
        out.tail(static_cast<Eigen::Index>(h)) /= static_cast<double>(c);
    return out;
}

Var unify(Graph& g, Var weights, const FeatureSpec& spec, CombineMode mode) {
    const Tensor& w = g.value(weights);
    if (w.ndim() != 2 || w.rows() != spec.width + 1) {
        throw ShapeError("unify: weight matrix " + to_string(w.shape()) + " does not match feature width " +
                         std::to_string(spec.width));
    }
    const std::size_t h = w.cols();
    const std::size_t c = spec.width;
    const Var bias = g.reshape(g.slice_rows(weights, c, c + 1), {h});
    if (mode == CombineMode::bias) return bias;
    Var combined;
    if (mode == CombineMode::bias_ext_catzero && spec.categorical) {
        combined = g.constant(Tensor({h}));
    } else {
        const Var ones = g.constant(Tensor({1, c}, 1.0));
        combined = g.reshape(g.matmul(ones, g.slice_rows(weights, 0, c)), {h});
        if (mode == CombineMode::bias_avg_linear) combined = g.scale(combined, 1.0 / static_cast<double>(c));
    }
    const Var parts[] = {bias, combined};
    return g.concat(parts);
}

Points unify_all(std::span<const Tensor> weights, const FeatureLayout& layout, CombineMode mode) {
    if (weights.size() != layout.size()) {
        throw ShapeError("unify_all: " + std::to_string(weights.size()) + " weight matrices for " +
                         std::to_string(layout.size()) + " features");
    }
    if (weights.empty()) return Points();
    const std::size_t dim = unified_dim(weights.front().cols(), mode);
    Points out(static_cast<Eigen::Index>(weights.size()), static_cast<Eigen::Index>(dim));
    for (std::size_t f = 0; f < weights.size(); ++f) {
        if (weights[f].cols() != weights.front().cols()) {
            throw ShapeError("unify_all: feature " + std::to_string(f) + " has embedding width " +
                             std::to_string(weights[f].cols()) + ", expected " + std::to_string(weights.front().cols()));
        }
        out.row(static_cast<Eigen::Index>(f)) = unify(weights[f], layout[f], mode).transpose();
    }
    return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd squared_distances(const Points& points, const Eigen::MatrixXd& centroids) {
    Eigen::MatrixXd d2(points.rows(), centroids.rows());
    for (Eigen::Index f = 0; f < points.rows(); ++f)
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) d2(f, c) = (points.row(f) - centroids.row(c)).squaredNorm();
    return d2;
}

double kmeans_sse(const Points& points, const Eigen::MatrixXd& centroids, const std::vector<std::size_t>& labels) {
    double sse = 0.0;
    for (Eigen::Index f = 0; f < points.rows(); ++f)
        sse += (points.row(f) - centroids.row(static_cast<Eigen::Index>(labels[static_cast<std::size_t>(f)]))).squaredNorm();
    return sse;
}

double fcm_objective(const Points& points, const Scores& memberships, const Eigen::MatrixXd& centroids, double m) {
    const Eigen::MatrixXd d2 = squared_distances(points, centroids);
    double j = 0.0;
    for (Eigen::Index f = 0; f < points.rows(); ++f)
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) j += std::pow(memberships(f, c), m) * d2(f, c);
    return j;
}

double gmm_log_likelihood(const Points& points, const ClusterState& state) {
    const Eigen::MatrixXd lj = gmm_log_joint(points, state);
    double ll = 0.0;
    for (Eigen::Index f = 0; f < lj.rows(); ++f) ll += log_sum_exp(lj.row(f));
    return ll;
}

StepResult kmeans_step(const Points& points, const ClusterState& state) {
    check_points(points, state, "kmeans_step");
    const std::vector<std::size_t> labels = kmeans_labels(points, state.centroids);
    StepResult out{one_hot(labels, state.k()), state};
    out.state.centroids.setZero();
    std::vector<double> counts(state.k(), 0.0);
    for (std::size_t f = 0; f < labels.size(); ++f) {
        out.state.centroids.row(static_cast<Eigen::Index>(labels[f])) += points.row(static_cast<Eigen::Index>(f));
        counts[labels[f]] += 1.0;
    }
    for (std::size_t c = 0; c < state.k(); ++c) out.state.centroids.row(static_cast<Eigen::Index>(c)) /= counts[c];
    return out;
}

StepResult fuzzy_step(const Points& points, const ClusterState& state) {
    check_points(points, state, "fuzzy_step");
    const double m = state.fuzzifier;
    if (!(m > 1.0)) throw std::invalid_argument("fuzzy_step: fuzzifier must exceed 1, got " + std::to_string(m));
    StepResult out{fcm_memberships(points, state.centroids, m), state};
    const Eigen::MatrixXd pm = out.scores.array().pow(m).matrix();
    for (Eigen::Index c = 0; c < pm.cols(); ++c) {
        const double den = pm.col(c).sum();
        if (den > 0.0) out.state.centroids.row(c) = (pm.col(c).transpose() * points) / den;
    }
    return out;
}

ClusterState gmm_from_responsibilities(const Points& points, const Scores& resp, CovarianceType type) {
    const Eigen::Index n = points.rows();
    const Eigen::Index k = resp.cols();
    const Eigen::Index d = points.cols();
    ClusterState s;
    s.kind = ClusterKind::gmm;
    s.covariance_type = type;
    s.centroids = Eigen::MatrixXd::Zero(k, d);
    s.weights = Eigen::VectorXd::Zero(k);
    s.covariances.assign(static_cast<std::size_t>(k), Eigen::MatrixXd::Zero(d, d));
    const Eigen::MatrixXd jitter = kCovarianceJitter * Eigen::MatrixXd::Identity(d, d);
    Eigen::MatrixXd tied = Eigen::MatrixXd::Zero(d, d);
    for (Eigen::Index c = 0; c < k; ++c) {
        const double nk = resp.col(c).sum();
        s.weights(c) = nk / static_cast<double>(n);
        if (nk <= 0.0) {
            s.covariances[static_cast<std::size_t>(c)] = jitter;
            continue;
        }
        s.centroids.row(c) = (resp.col(c).transpose() * points) / nk;
        Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(d, d);
        for (Eigen::Index f = 0; f < n; ++f) {
            const Eigen::VectorXd diff = (points.row(f) - s.centroids.row(c)).transpose();
            scatter.noalias() += resp(f, c) * diff * diff.transpose();
        }
        tied += scatter;
        s.covariances[static_cast<std::size_t>(c)] = project_covariance(scatter / nk, type) + jitter;
    }
    if (type == CovarianceType::tied) {
        const Eigen::MatrixXd shared = project_covariance(tied / static_cast<double>(n), type) + jitter;
        for (auto& cov : s.covariances) cov = shared;
    }
    return s;
}

StepResult gmm_em_step(const Points& points, const ClusterState& state) {
    check_points(points, state, "gmm_em_step");
    StepResult out{responsibilities(gmm_log_joint(points, state)), state};
    ClusterState next = gmm_from_responsibilities(points, out.scores, state.covariance_type);
    for (std::size_t c = 0; c < state.k(); ++c) {
        if (next.weights(static_cast<Eigen::Index>(c)) > 0.0) continue;
        next.centroids.row(static_cast<Eigen::Index>(c)) = state.centroids.row(static_cast<Eigen::Index>(c));
        next.covariances[c] = state.covariances[c];
    }
    next.fuzzifier = state.fuzzifier;
    out.state = std::move(next);
    return out;
}

StepResult cluster_step(const Points& points, const ClusterState& state) {
    switch (state.kind) {
        case ClusterKind::kmeans: return kmeans_step(points, state);
        case ClusterKind::fuzzy: return fuzzy_step(points, state);
        case ClusterKind::gmm: return gmm_em_step(points, state);
    }
    throw ClusteringError("cluster_step: unknown algorithm");
}

Scores cluster_scores(const Points& points, const ClusterState& state) {
    check_points(points, state, "cluster_scores");
    switch (state.kind) {
        case ClusterKind::kmeans: return one_hot(kmeans_labels(points, state.centroids), state.k());
        case ClusterKind::fuzzy: return fcm_memberships(points, state.centroids, state.fuzzifier);
        case ClusterKind::gmm: return responsibilities(gmm_log_joint(points, state));
    }
    throw ClusteringError("cluster_scores: unknown algorithm");
}

// ---------------------------------------------------------------------------

MembershipMatrix hard_membership(const Scores& scores) {
    MembershipMatrix m(static_cast<std::size_t>(scores.rows()), static_cast<std::size_t>(scores.cols()));
    for (Eigen::Index f = 0; f < scores.rows(); ++f) m.set(static_cast<std::size_t>(f), argmax_row(scores, f), true);
    return m;
}

MembershipMatrix soft_membership(const Scores& scores, double delta) {
    if (!(delta >= 0.0 && delta < 1.0)) {
        throw std::invalid_argument("soft_membership: delta must lie in [0, 1), got " + std::to_string(delta));
    }
    MembershipMatrix m = hard_membership(scores);
    for (std::size_t k = 0; k < m.clusters(); ++k) {
        if (m.group_size(k) != 0 || scores.rows() == 0) continue;
        Eigen::Index best = 0;
        for (Eigen::Index f = 1; f < scores.rows(); ++f)
            if (scores(f, static_cast<Eigen::Index>(k)) > scores(best, static_cast<Eigen::Index>(k))) best = f;
        m.set(static_cast<std::size_t>(best), k, true);
    }
    for (Eigen::Index f = 0; f < scores.rows(); ++f) {
        const double mx = scores.row(f).maxCoeff();
        if (!(mx > 0.0)) continue;
        for (Eigen::Index k = 0; k < scores.cols(); ++k)
            if (scores(f, k) / mx > delta) m.set(static_cast<std::size_t>(f), static_cast<std::size_t>(k), true);
    }
    return m;
}

MembershipMatrix repair_empty_hard(const MembershipMatrix& in, const Scores& scores) {
    MembershipMatrix m = in;
    const std::vector<std::size_t> labels0 = m.labels();
    std::vector<std::size_t> labels = labels0;
    std::vector<std::size_t> sizes(m.clusters(), 0);
    for (auto l : labels) ++sizes[l];
    std::vector<bool> moved(labels.size(), false);
    for (std::size_t k = 0; k < m.clusters(); ++k) {
        if (sizes[k] != 0) continue;
        std::size_t pick = labels.size();
        for (std::size_t f = 0; f < labels.size(); ++f) {
            if (moved[f] || sizes[labels[f]] < 2) continue;
            if (pick == labels.size() ||
                scores(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) >
                    scores(static_cast<Eigen::Index>(pick), static_cast<Eigen::Index>(k)))
                pick = f;
        }
        if (pick == labels.size()) continue;  // fewer features than clusters
        --sizes[labels[pick]];
        labels[pick] = k;
        sizes[k] = 1;
        moved[pick] = true;
    }
    if (labels == labels0) return m;
    return MembershipMatrix::from_labels(labels, m.clusters());
}

MembershipMatrix membership_from_scores(const Scores& scores, const ReclusterOptions& opts) {
    if (opts.mode == MembershipMode::soft) return soft_membership(scores, opts.delta);
    return repair_empty_hard(hard_membership(scores), scores);
}

// ---------------------------------------------------------------------------

ClusterState init_kmeanspp(const Points& points, std::size_t k, const ClusterOptions& opts, Rng& rng) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (k == 0) throw ClusteringError("init_kmeanspp: K must be positive");
    if (k > n) {
        throw ClusteringError("init_kmeanspp: K=" + std::to_string(k) + " exceeds point count " + std::to_string(n));
    }
    std::vector<std::size_t> chosen{rng.index(n)};
    Eigen::VectorXd best = Eigen::VectorXd::Constant(static_cast<Eigen::Index>(n), std::numeric_limits<double>::infinity());
    while (chosen.size() < k) {
        const Eigen::RowVectorXd last = points.row(static_cast<Eigen::Index>(chosen.back()));
        double total = 0.0;
        for (std::size_t f = 0; f < n; ++f) {
            const auto fi = static_cast<Eigen::Index>(f);
            best(fi) = std::min(best(fi), (points.row(fi) - last).squaredNorm());
            total += best(fi);
        }
        if (!(total > 0.0)) {
            throw ClusteringError("init_kmeanspp: only " + std::to_string(chosen.size()) +
                                  " distinct points available for K=" + std::to_string(k));
        }
        const double target = rng.uniform() * total;
        double acc = 0.0;
        std::size_t pick = n;
        for (std::size_t f = 0; f < n; ++f) {
            const double w = best(static_cast<Eigen::Index>(f));
            if (w <= 0.0) continue;
            acc += w;
            pick = f;
            if (acc > target) break;
        }
        chosen.push_back(pick);
    }

    ClusterState s;
    s.kind = opts.kind;
    s.covariance_type = opts.covariance_type;
    s.fuzzifier = opts.fuzzifier;
    s.centroids.resize(static_cast<Eigen::Index>(k), points.cols());
    for (std::size_t c = 0; c < k; ++c)
        s.centroids.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(chosen[c]));
    if (opts.kind == ClusterKind::gmm) {
        const Scores resp = one_hot(kmeans_labels(points, s.centroids), k);
        ClusterState g = gmm_from_responsibilities(points, resp, opts.covariance_type);
        g.fuzzifier = opts.fuzzifier;
        return g;
    }
    return s;
}

ClusterState init_prior(const Points& points, const MembershipMatrix& prior, const ClusterOptions& opts) {
    if (prior.features() != static_cast<std::size_t>(points.rows())) {
        throw ShapeError("init_prior: prior covers " + std::to_string(prior.features()) + " features, points " +
                         std::to_string(points.rows()));
    }
    for (std::size_t k = 0; k < prior.clusters(); ++k)
        if (prior.group_size(k) == 0) throw ClusteringError("init_prior: prior group " + std::to_string(k) + " is empty");
    if (!prior.is_hard()) throw ClusteringError("init_prior: prior grouping must assign each feature exactly once");

    const Scores resp = one_hot(prior.labels(), prior.clusters());
    if (opts.kind == ClusterKind::gmm) {
        ClusterState g = gmm_from_responsibilities(points, resp, opts.covariance_type);
        g.fuzzifier = opts.fuzzifier;
        return g;
    }
    ClusterState s;
    s.kind = opts.kind;
    s.covariance_type = opts.covariance_type;
    s.fuzzifier = opts.fuzzifier;
    s.centroids = Eigen::MatrixXd::Zero(resp.cols(), points.cols());
    for (Eigen::Index c = 0; c < resp.cols(); ++c) s.centroids.row(c) = (resp.col(c).transpose() * points) / resp.col(c).sum();
    return s;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd ema_centroids(const Eigen::MatrixXd& old_centroids, const Eigen::MatrixXd& new_centroids, double alpha) {
    check_alpha(alpha, "ema_centroids");
    if (old_centroids.rows() != new_centroids.rows() || old_centroids.cols() != new_centroids.cols()) {
        throw ShapeError("ema_centroids: centroid shapes differ");
    }
    if (alpha == 0.0) return new_centroids;
    return alpha * old_centroids + (1.0 - alpha) * new_centroids;
}

Gaussian ema_gaussian(const Gaussian& a, const Gaussian& b, double alpha, EmaRule rule) {
    check_alpha(alpha, "ema_gaussian");
    if (a.mean.size() != b.mean.size() || a.cov.rows() != a.mean.size() || b.cov.rows() != b.mean.size()) {
        throw ShapeError("ema_gaussian: component dimensions differ");
    }
    check_spd(a.cov, "ema_gaussian (old)");
    check_spd(b.cov, "ema_gaussian (new)");
    if (alpha == 0.0) return b;
    const double beta = 1.0 - alpha;
    switch (rule) {
        case EmaRule::moment_matching: {
            const Eigen::VectorXd diff = a.mean - b.mean;
            return {alpha * a.mean + beta * b.mean, alpha * a.cov + beta * b.cov + alpha * beta * diff * diff.transpose()};
        }
        case EmaRule::product_of_experts: {
            const Eigen::MatrixXd pa = a.cov.llt().solve(Eigen::MatrixXd::Identity(a.cov.rows(), a.cov.cols()));
            const Eigen::MatrixXd pb = b.cov.llt().solve(Eigen::MatrixXd::Identity(b.cov.rows(), b.cov.cols()));
            const Eigen::MatrixXd precision = alpha * pa + beta * pb;
            Eigen::MatrixXd cov = precision.llt().solve(Eigen::MatrixXd::Identity(precision.rows(), precision.cols()));
            cov = 0.5 * (cov + cov.transpose());
            const Eigen::VectorXd mean = cov * (alpha * pa * a.mean + beta * pb * b.mean);
            return {mean, cov};
        }
        case EmaRule::wasserstein: {
            const Eigen::MatrixXd root = alpha * spd_sqrt(a.cov) + beta * spd_sqrt(b.cov);
            Eigen::MatrixXd cov = root * root;
            cov = 0.5 * (cov + cov.transpose());
            return {alpha * a.mean + beta * b.mean, cov};
        }
    }
    throw ClusteringError("ema_gaussian: unknown rule");
}

ClusterState ema_state(const ClusterState& prev, const ClusterState& next, double alpha, EmaRule rule) {
    check_alpha(alpha, "ema_state");
    if (alpha == 0.0) return next;
    ClusterState out = next;
    if (next.kind != ClusterKind::gmm) {
        out.centroids = ema_centroids(prev.centroids, next.centroids, alpha);
        return out;
    }
    const std::size_t k = next.k();
    for (std::size_t c = 0; c < k; ++c) {
        const auto ci = static_cast<Eigen::Index>(c);
        const Gaussian g = ema_gaussian({prev.centroids.row(ci).transpose(), prev.covariances[c]},
                                        {next.centroids.row(ci).transpose(), next.covariances[c]}, alpha, rule);
        out.centroids.row(ci) = g.mean.transpose();
        out.covariances[c] = project_covariance(g.cov, next.covariance_type);
    }
    if (next.covariance_type == CovarianceType::tied && k > 0) {
        Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(out.covariances[0].rows(), out.covariances[0].cols());
        for (const auto& c : out.covariances) avg += c;
        avg /= static_cast<double>(k);
        for (auto& c : out.covariances) c = avg;
    }
    out.weights = alpha * prev.weights + (1.0 - alpha) * next.weights;
    return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd reg_weights(RegVariant variant, const ClusterState& state, const Points& points,
                            const MembershipMatrix& membership, const Scores& scores) {
    const Eigen::Index n = points.rows();
    const Eigen::Index k = static_cast<Eigen::Index>(state.k());
    if (variant == RegVariant::hard) {
        Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n, k);
        for (Eigen::Index f = 0; f < n; ++f)
            for (Eigen::Index c = 0; c < k; ++c) w(f, c) = membership(static_cast<std::size_t>(f), static_cast<std::size_t>(c)) ? 1.0 : 0.0;
        return w;
    }
    Eigen::MatrixXd logits = state.kind == ClusterKind::kmeans
                                 ? Eigen::MatrixXd(-squared_distances(points, state.centroids).cwiseSqrt())
                                 : Eigen::MatrixXd(scores);
    for (Eigen::Index f = 0; f < n; ++f) {
        const double mx = logits.row(f).maxCoeff();
        logits.row(f) = (logits.row(f).array() - mx).exp().matrix();
        logits.row(f) /= logits.row(f).sum();
    }
    return logits;
}

RegLoss reg_loss(Graph& g, std::span<const Var> unified, const Eigen::MatrixXd& weights, Var centroids) {
    const Tensor mu = g.value(g.detach(centroids));
    const std::size_t k = mu.rows();
    const std::size_t d = mu.cols();
    if (weights.rows() != static_cast<Eigen::Index>(unified.size()) || weights.cols() != static_cast<Eigen::Index>(k)) {
        throw ShapeError("reg_loss: weights " + std::to_string(weights.rows()) + "x" + std::to_string(weights.cols()) +
                         " for " + std::to_string(unified.size()) + " features and " + std::to_string(k) + " centroids");
    }
    RegLoss out;
    double inter = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) {
            double ss = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff = mu.at(a, j) - mu.at(b, j);
                ss += diff * diff;
            }
            inter += std::sqrt(ss);
        }
    }
    out.inter = inter / static_cast<double>(k);

    std::vector<Var> terms;
    for (std::size_t c = 0; c < k; ++c) {
        const Var centre = g.constant(Tensor({d}, std::vector<double>(mu.data() + c * d, mu.data() + (c + 1) * d)));
        for (std::size_t f = 0; f < unified.size(); ++f) {
            const double w = weights(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(c));
            if (w == 0.0) continue;
            if (g.value(unified[f]).size() != d) {
                throw ShapeError("reg_loss: unified vector of feature " + std::to_string(f) + " has shape " +
                                 to_string(g.value(unified[f]).shape()) + ", centroids have width " + std::to_string(d));
            }
            terms.push_back(g.scale(g.l2norm(g.sub(unified[f], centre)), w));
        }
    }
    Var intra = g.constant(Tensor::scalar(0.0));
    for (Var t : terms) intra = g.add(intra, t);
    out.intra = g.value(intra).item() / static_cast<double>(k);

    if (!(out.inter > 0.0)) {
        out.degenerate = true;
        out.loss = g.constant(Tensor::scalar(kDegenerateRegLoss));
        return out;
    }
    out.loss = g.scale(intra, 1.0 / (static_cast<double>(k) * out.inter));
    return out;
}

RegLoss reg_loss(Graph& g, std::span<const Var> unified, const Eigen::MatrixXd& weights, const Eigen::MatrixXd& centroids) {
    Tensor mu({static_cast<std::size_t>(centroids.rows()), static_cast<std::size_t>(centroids.cols())});
    for (Eigen::Index r = 0; r < centroids.rows(); ++r)
        for (Eigen::Index c = 0; c < centroids.cols(); ++c) mu.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = centroids(r, c);
    return reg_loss(g, unified, weights, g.constant(std::move(mu)));
}

double reg_loss_value(const Points& points, const Eigen::MatrixXd& weights, const Eigen::MatrixXd& centroids) {
    Graph g;
    std::vector<Var> u;
    for (Eigen::Index f = 0; f < points.rows(); ++f) {
        std::vector<double> row(static_cast<std::size_t>(points.cols()));
        for (Eigen::Index j = 0; j < points.cols(); ++j) row[static_cast<std::size_t>(j)] = points(f, j);
        u.push_back(g.constant(Tensor({static_cast<std::size_t>(points.cols())}, std::move(row))));
    }
    return g.value(reg_loss(g, u, weights, centroids).loss).item();
}

// ---------------------------------------------------------------------------

bool recluster(const Points& points, GroupingState& grouping, const ReclusterOptions& opts) {
    StepResult step = cluster_step(points, grouping.clusters);
    ClusterState smoothed = ema_state(grouping.clusters, step.state, opts.alpha, opts.rule);
    // assignment under the freshly updated parameters
    Scores scores = cluster_scores(points, step.state);
    MembershipMatrix m = membership_from_scores(scores, opts);
    if (m != grouping.membership && opts.alpha > 0.0) {
        scores = cluster_scores(points, smoothed);
        m = membership_from_scores(scores, opts);
    }
    const bool changed = m != grouping.membership;
    grouping.clusters = std::move(smoothed);
    grouping.membership = std::move(m);
    grouping.scores = std::move(scores);
    return changed;
}

}  // namespace fgd
