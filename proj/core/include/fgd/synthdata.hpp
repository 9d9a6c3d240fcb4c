#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "fgd/membership.hpp"
#include "fgd/tensor.hpp"

namespace fgd {

/// Per-feature RBF Gaussian-process parameters. Amplitudes enter the kernel
/// squared, so a_f^2 is the marginal variance.
struct GpSpec {
    std::vector<double> length_scales{1, 2, 4, 8, 1, 2};
    std::vector<double> amplitudes{0.5, 1.0, 3.5, 0.5, 0.5, 0.5};
    std::size_t length = 20;
    std::size_t samples = 10000;
    std::uint64_t seed = 0;

    std::size_t features() const noexcept { return length_scales.size(); }
    /// Throws std::invalid_argument on a non-positive or mismatched entry.
    void validate() const;
};

inline constexpr double kGpJitter = 1e-9;

struct LabeledDataset {
    Tensor x;  // [N, T, F]
    Tensor y;  // [N]
    MembershipMatrix ground_truth;
    double kappa12 = 0.0;
    double kappa34 = 0.0;

    std::size_t samples() const { return x.shape()[0]; }
    std::size_t steps() const { return x.shape()[1]; }
    std::size_t features() const { return x.shape()[2]; }
};

/// Kernel matrix a^2 exp(-(t - t')^2 / (2 l^2)) over t = 0..T-1.
Eigen::MatrixXd rbf_kernel(std::size_t length, double length_scale, double amplitude);

/// [N, T, F] draws. Sample i uses its own generator derived from (seed, i),
/// so the result does not depend on evaluation order.
Tensor sample_gp(const GpSpec& spec);

/// Element at sorted position floor((n - 1) / 2).
double lower_median(std::vector<double> values);

/// Labels from the two product sums against their lower medians. Ground truth
/// groups are {0,1}, {2,3}, {4,5}, ... over consecutive feature pairs.
LabeledDataset assign_labels(Tensor series);

/// Convenience: sample_gp followed by assign_labels.
LabeledDataset generate_dataset(const GpSpec& spec);

enum class StaticMode { flat, time_mean, sample_mean, full_mean };
std::string_view to_string(StaticMode m);
StaticMode parse_static_mode(std::string_view s);

/// One row per feature:
///   flat        concat over (i, t) of (x_tf^i, y^i)
///   time_mean   concat over i of (mean_t x_tf^i, y^i)
///   sample_mean concat over t of (mean_i x_tf^i, mean_i y^i)
///   full_mean   (mean_{i,t} x_tf^i, mean_i y^i)
Eigen::MatrixXd static_transform(const LabeledDataset& data, StaticMode mode);

struct KmeansFit {
    std::vector<std::size_t> labels;
    Eigen::MatrixXd centroids;
    double sse = 0.0;
    std::size_t iterations = 0;
};

/// k-means++ seeding then Lloyd iterations until the relative SSE change is
/// below `tol` or `max_iter` is reached.
KmeansFit kmeans_fit(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, std::size_t max_iter = 300,
                     double tol = 1e-8);

/// K-means on a static transform. K may not exceed the number of ground-truth groups.
MembershipMatrix static_kmeans_baseline(const LabeledDataset& data, StaticMode mode, std::size_t k, std::uint64_t seed);

}  // namespace fgd
