#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fgd/autodiff.hpp"
#include "fgd/membership.hpp"
#include "fgd/rng.hpp"

namespace fgd {

class ClusteringError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class ClusterKind { kmeans, fuzzy, gmm };
enum class CovarianceType { spherical, diagonal, full, tied };
enum class CombineMode { bias, bias_ext_catzero, bias_sum_linear, bias_avg_linear };
enum class EmaRule { moment_matching, product_of_experts, wasserstein };
enum class RegVariant { hard, soft };
enum class MembershipMode { hard, soft };

std::string_view to_string(ClusterKind v);
std::string_view to_string(CovarianceType v);
std::string_view to_string(CombineMode v);
std::string_view to_string(EmaRule v);
std::string_view to_string(RegVariant v);
std::string_view to_string(MembershipMode v);

// Parsers throw std::invalid_argument listing the accepted names.
ClusterKind parse_cluster_kind(std::string_view s);
CovarianceType parse_covariance_type(std::string_view s);
CombineMode parse_combine_mode(std::string_view s);
EmaRule parse_ema_rule(std::string_view s);
RegVariant parse_reg_variant(std::string_view s);
MembershipMode parse_membership_mode(std::string_view s);

/// One row per feature.
using Points = Eigen::MatrixXd;
/// F x K nonnegative membership scores.
using Scores = Eigen::MatrixXd;

struct ClusterState {
    ClusterKind kind = ClusterKind::kmeans;
    Eigen::MatrixXd centroids;                  // K x D
    std::vector<Eigen::MatrixXd> covariances;  // gmm: K full D x D matrices (equal when tied)
    Eigen::VectorXd weights;                    // gmm mixture weights
    CovarianceType covariance_type = CovarianceType::diagonal;
    double fuzzifier = 2.0;

    std::size_t k() const noexcept { return static_cast<std::size_t>(centroids.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(centroids.cols()); }
};

inline constexpr double kCovarianceJitter = 1e-6;
inline constexpr double kDegenerateRegLoss = 1e6;

// ---------------------------------------------------------------------------
// Unification of per-feature embedding weights.
//
// A weight matrix has C_f + 1 rows of width H: rows 0..C_f-1 are the weight
// columns w_i and the last row is the bias.

std::size_t unified_dim(std::size_t hidden, CombineMode mode);
Eigen::VectorXd unify(const Tensor& weights, const FeatureSpec& spec, CombineMode mode);
Var unify(Graph& g, Var weights, const FeatureSpec& spec, CombineMode mode);
Points unify_all(std::span<const Tensor> weights, const FeatureLayout& layout, CombineMode mode);

// ---------------------------------------------------------------------------
// Algorithms. Each *_step evaluates scores against the current state, then
// returns the updated parameters.

struct StepResult {
    Scores scores;
    ClusterState state;
};

/// One Lloyd iteration; empty clusters seize the point farthest from its centroid.
StepResult kmeans_step(const Points& points, const ClusterState& state);
/// One fuzzy C-means iteration.
StepResult fuzzy_step(const Points& points, const ClusterState& state);
/// One EM iteration respecting state.covariance_type.
StepResult gmm_em_step(const Points& points, const ClusterState& state);
/// Dispatches on state.kind.
StepResult cluster_step(const Points& points, const ClusterState& state);

/// Scores of the points under a fixed state (no parameter update).
Scores cluster_scores(const Points& points, const ClusterState& state);

Eigen::MatrixXd squared_distances(const Points& points, const Eigen::MatrixXd& centroids);
double kmeans_sse(const Points& points, const Eigen::MatrixXd& centroids, const std::vector<std::size_t>& labels);
double fcm_objective(const Points& points, const Scores& memberships, const Eigen::MatrixXd& centroids, double m);
double gmm_log_likelihood(const Points& points, const ClusterState& state);

/// M-step of a Gaussian mixture from responsibilities (jittered covariances).
ClusterState gmm_from_responsibilities(const Points& points, const Scores& resp, CovarianceType type);

// ---------------------------------------------------------------------------
// Membership.

/// Argmax per row, ties to the lowest cluster index.
MembershipMatrix hard_membership(const Scores& scores);
/// Argmax, then fill empty clusters with their best-scoring feature, then add
/// every (f, k) with p_fk / max_l p_fl > delta.
MembershipMatrix soft_membership(const Scores& scores, double delta);
/// Moves the best-scoring feature into each empty cluster, never emptying the
/// donor cluster. The result stays hard.
MembershipMatrix repair_empty_hard(const MembershipMatrix& m, const Scores& scores);

// ---------------------------------------------------------------------------
// Initialization.

struct ClusterOptions {
    ClusterKind kind = ClusterKind::kmeans;
    CovarianceType covariance_type = CovarianceType::diagonal;
    double fuzzifier = 2.0;
};

ClusterState init_kmeanspp(const Points& points, std::size_t k, const ClusterOptions& opts, Rng& rng);
ClusterState init_prior(const Points& points, const MembershipMatrix& prior, const ClusterOptions& opts);

// ---------------------------------------------------------------------------
// Centroid smoothing.

Eigen::MatrixXd ema_centroids(const Eigen::MatrixXd& old_centroids, const Eigen::MatrixXd& new_centroids, double alpha);

struct Gaussian {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

Gaussian ema_gaussian(const Gaussian& old_component, const Gaussian& new_component, double alpha, EmaRule rule);

/// Smooths every component of `next` towards `prev` and projects the
/// covariances back onto next.covariance_type.
ClusterState ema_state(const ClusterState& prev, const ClusterState& next, double alpha, EmaRule rule);

// ---------------------------------------------------------------------------
// Cluster-shape regularizer.

/// Per-feature, per-cluster weights of the intracluster term. Hard: the
/// membership matrix. Soft: softmax over clusters of the scores (negative
/// distances for k-means).
Eigen::MatrixXd reg_weights(RegVariant variant, const ClusterState& state, const Points& points,
                            const MembershipMatrix& membership, const Scores& scores);

struct RegLoss {
    Var loss;
    double intra = 0.0;  // mean intracluster term
    double inter = 0.0;  // mean intercluster term
    bool degenerate = false;
};

/// mean_k sum_f w_fk |u_f - mu_k|  /  mean_k sum_k' |mu_k - mu_k'|.
///
/// Centroids are detached, so no gradient reaches them. When every centroid
/// coincides the loss is the constant kDegenerateRegLoss and `degenerate` is set.
RegLoss reg_loss(Graph& g, std::span<const Var> unified, const Eigen::MatrixXd& weights, Var centroids);
RegLoss reg_loss(Graph& g, std::span<const Var> unified, const Eigen::MatrixXd& weights,
                 const Eigen::MatrixXd& centroids);
double reg_loss_value(const Points& points, const Eigen::MatrixXd& weights, const Eigen::MatrixXd& centroids);

// ---------------------------------------------------------------------------
// Interleaved reclustering.

struct ReclusterOptions {
    MembershipMode mode = MembershipMode::hard;
    double delta = 0.5;
    double alpha = 0.0;
    EmaRule rule = EmaRule::moment_matching;
};

struct GroupingState {
    ClusterState clusters;
    MembershipMatrix membership;
    Scores scores;
};

/// Builds the membership for the given scores under the configured mode,
/// with empty-group repair.
MembershipMatrix membership_from_scores(const Scores& scores, const ReclusterOptions& opts);

/// One clustering update on the unified points: step the algorithm, assign
/// under the updated parameters, and if the membership changed smooth the
/// parameters with EMA and re-assign once against them. Returns true when the membership changed.
bool recluster(const Points& points, GroupingState& grouping, const ReclusterOptions& opts);

}  // namespace fgd
