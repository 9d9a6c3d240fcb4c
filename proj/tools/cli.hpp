#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fgd/config.hpp"
#include "fgd/trainer.hpp"

namespace fgd::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitConfig = 2;

inline constexpr const char* kResultsSchema = "fgd.results/1";
inline constexpr const char* kHistorySchema = "fgd.history/1";
inline constexpr const char* kBenchmarkSchema = "fgd.benchmark/1";
inline constexpr const char* kFlowSchema = "fgd.flow/1";
inline constexpr const char* kManifestSchema = "fgd.manifest/1";
inline constexpr const char* kOutputRootEnv = "FGD_OUTPUT_ROOT";

/// $FGD_OUTPUT_ROOT, or "runs" when unset.
std::filesystem::path output_root();

/// "0,2,5-7" -> {0, 2, 5, 6, 7}.
std::vector<std::uint64_t> parse_seeds(const std::string& text);

/// Dataset for a config: loaded from data.path, or generated with the config seed.
LabeledDataset dataset_for(const ExperimentConfig& c);

void cmd_generate(const ExperimentConfig& c, const std::filesystem::path& out_stem, bool csv);

/// Writes results.json, history.jsonl, checkpoint.bin and manifest.json into
/// out_dir. Returns false (after writing error.json) when training aborted.
bool cmd_train(const ExperimentConfig& c, const std::filesystem::path& out_dir);

struct BenchmarkRow {
    std::string algorithm;
    std::string input;
    std::vector<double> ari, nmi, silhouette;
    bool failed = false;
    std::string error;
};

/// Random, oracle, four static K-means inputs and dynamic training over the
/// given seeds. Writes benchmark.csv and benchmark_runs.csv into out_dir.
std::vector<BenchmarkRow> cmd_benchmark(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                                        unsigned jobs, const std::filesystem::path& out_dir);

/// Reads a history JSONL file and writes `<out>.csv` (epoch, feature, cluster)
/// and `<out>_sizes.csv` (epoch, cluster, size).
void cmd_history(const std::filesystem::path& history, const std::filesystem::path& out_prefix);

std::string results_json(const TrainResult& r, const EvalMetrics& m);
std::string history_jsonl(const TrainingHistory& h);

/// Entry point shared by the executable and the tests.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fgd::cli
