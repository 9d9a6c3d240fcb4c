#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fgd/clustering.hpp"
#include "fgd/config.hpp"
#include "fgd/model.hpp"
#include "fgd/optim.hpp"
#include "fgd/synthdata.hpp"

namespace fgd {

// Random streams derived from the experiment seed.
inline constexpr std::uint64_t kStreamModelInit = 1;
inline constexpr std::uint64_t kStreamShuffle = 2;
inline constexpr std::uint64_t kStreamClusterInit = 3;
inline constexpr std::uint64_t kStreamSplit = 4;

struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

/// Seeded permutation cut into validation, test and training parts (in that order).
Split split_indices(std::size_t n, double val_fraction, double test_fraction, std::uint64_t seed);

/// Per-feature affine input normalization. Identity when disabled.
struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale;

    static Standardizer identity(std::size_t features);
    static Standardizer fit(const Tensor& x, std::span<const std::size_t> rows);
    void apply(Tensor& batch) const;
};

/// Copies samples `rows` of an [N, T, F] tensor into a [B, T, F] batch.
Tensor gather_samples(const Tensor& x, std::span<const std::size_t> rows);
Tensor gather_labels(const Tensor& y, std::span<const std::size_t> rows);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double reg_loss = 0.0;
    MembershipMatrix membership;
    Eigen::MatrixXd centroids;
    std::optional<double> ari;
    std::optional<double> nmi;
    bool changed = false;  // membership changed during this epoch
};

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    std::size_t best_epoch = 0;  // 0: the initial state was never improved on
    bool aborted = false;
    std::string diagnostic;
};

struct TrainResult {
    Model model;
    GroupingState grouping;
    Standardizer standardizer;
    Split split;
    TrainingHistory history;
};

ModelOptions model_options(const ExperimentConfig& c, const FeatureLayout& layout);
ReclusterOptions recluster_options(const GroupingConfig& g);
ClusterOptions cluster_options(const GroupingConfig& g);

/// Unified points of the model's current embedding weights.
Points unified_points(const Model& model, CombineMode mode);

/// Initial grouping of a freshly initialized model.
GroupingState initial_grouping(const ExperimentConfig& c, const Model& model, const MembershipMatrix& ground_truth);

struct BatchLoss {
    double supervised = 0.0;
    double reg = 0.0;
    bool degenerate = false;
};

/// Adds dL/dtheta of L = L_sup + lambda * L_reg for one batch into the
/// parameter gradients. The supervised term is evaluated in chunks of
/// `chunk` samples whose gradients are weighted to the batch mean.
BatchLoss accumulate_batch_gradients(Model& model, const GroupingState& grouping, const GroupingConfig& g,
                                     const Tensor& x, const Tensor& y, std::size_t chunk);

/// Forward-only logits for samples `rows` of x, in chunks.
std::vector<double> predict_logits(const Model& model, const MembershipMatrix& m, const Tensor& x,
                                   const Standardizer& s, std::span<const std::size_t> rows, std::size_t chunk);

/// Mean binary cross-entropy over samples `rows`.
double supervised_loss_value(const Model& model, const MembershipMatrix& m, const Tensor& x, const Tensor& y,
                             const Standardizer& s, std::span<const std::size_t> rows, std::size_t chunk);

/// Joint training with interleaved reclustering and early stopping on the
/// validation loss. Returns the best-validation checkpoint. A non-finite loss
/// stops training with history.aborted set and the last good checkpoint.
TrainResult train(const ExperimentConfig& config, const LabeledDataset& data);

struct EvalMetrics {
    double auprc = 0.0;
    double auroc = 0.0;
    std::optional<double> ari;
    std::optional<double> nmi;
    bool nmi_degenerate = false;
    std::optional<double> silhouette;  // empty with fewer than two non-empty clusters
};

/// Hard labels of a grouping: membership labels when hard, score argmax otherwise.
std::vector<std::size_t> grouping_labels(const GroupingState& grouping);

/// Classification metrics on samples `rows`; grouping metrics against
/// `truth` when given.
EvalMetrics evaluate(const Model& model, const GroupingState& grouping, const LabeledDataset& data,
                     const Standardizer& s, std::span<const std::size_t> rows, CombineMode combine,
                     const MembershipMatrix* truth, std::size_t chunk = 500);

}  // namespace fgd
