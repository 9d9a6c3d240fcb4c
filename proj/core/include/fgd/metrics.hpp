#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace fgd {

/// Cluster id per item. Ids need not be contiguous; they are compacted internally.
using Partition = std::vector<std::size_t>;

/// Adjusted Rand index from the pair-counting contingency table.
double ari(const Partition& truth, const Partition& predicted);

struct NmiResult {
    double value = 0.0;
    bool degenerate = false;  // one side has zero entropy
};

/// Mutual information normalized by the geometric mean of the two entropies.
NmiResult nmi(const Partition& truth, const Partition& predicted);

/// Mean silhouette with Euclidean distances; singleton clusters score 0.
double silhouette(const Eigen::MatrixXd& points, const Partition& labels);

/// Mann-Whitney statistic with midranks for ties.
double auroc(std::span<const double> scores, std::span<const double> labels);
/// Average precision: sum over thresholds of (recall step) * precision.
double auprc(std::span<const double> scores, std::span<const double> labels);

}  // namespace fgd
