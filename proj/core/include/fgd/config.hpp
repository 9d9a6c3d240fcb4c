#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fgd/clustering.hpp"
#include "fgd/model.hpp"
#include "fgd/synthdata.hpp"

namespace fgd {

/// Invalid or incomplete configuration. The message names the offending field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// How the initial grouping is obtained.
enum class InitMode { kmeanspp, prior, ground_truth };
enum class ReclusterUnit { batch, epoch };

std::string_view to_string(InitMode v);
std::string_view to_string(ReclusterUnit v);
InitMode parse_init_mode(std::string_view s);
ReclusterUnit parse_recluster_unit(std::string_view s);

struct DataConfig {
    std::string path;  // dataset stem; empty means generate in memory from `gp`
    GpSpec gp;
    bool standardize = false;
};

struct ModelConfig {
    std::size_t hidden = 6;
    std::size_t model_dim = 6;
    std::size_t heads = 2;
    PsiKind psi = PsiKind::mlp;
    GroupEncoder group_encoder = GroupEncoder::mlp;
    AggMode agg = AggMode::concat;
    bool positional_encoding = false;
};

struct GroupingConfig {
    std::size_t clusters = 3;
    ClusterKind algorithm = ClusterKind::kmeans;
    MembershipMode membership = MembershipMode::hard;
    double delta = 0.5;
    double alpha = 0.0;
    EmaRule ema_rule = EmaRule::moment_matching;
    double fuzzifier = 2.0;
    CovarianceType covariance_type = CovarianceType::diagonal;
    CombineMode combine = CombineMode::bias;
    InitMode init = InitMode::kmeanspp;
    std::vector<std::vector<std::size_t>> prior;  // used when init == prior
    RegVariant reg_variant = RegVariant::hard;
    double lambda = 0.0;
    std::optional<std::size_t> period = 1;  // empty: never recluster
    ReclusterUnit recluster_unit = ReclusterUnit::epoch;
};

struct TrainConfig {
    double lr = 0.002;
    std::size_t epochs = 1000;
    std::size_t batch_size = 5000;
    std::size_t patience = 10;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    std::size_t chunk = 500;  // samples per forward graph; gradients accumulate over a batch
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DataConfig data;
    ModelConfig model;
    GroupingConfig grouping;
    TrainConfig train;

    /// Throws ConfigError naming the first invalid field.
    void validate() const;
};

inline constexpr const char* kConfigSchema = "fgd.config/1";

nlohmann::ordered_json to_json(const ExperimentConfig& c);
/// Every field is required and unknown fields are rejected.
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value". The value is parsed as JSON when possible and
/// taken as a string otherwise. The path must name an existing field.
void apply_override(nlohmann::json& j, std::string_view assignment);

/// Reads, applies overrides, parses and validates. Parse errors report the line.
ExperimentConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

/// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const ExperimentConfig& c);

}  // namespace fgd
