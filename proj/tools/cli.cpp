#include "cli.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fgd/io.hpp"
#include "fgd/metrics.hpp"

#ifndef FGD_VERSION
#define FGD_VERSION "0.0.0"
#endif

namespace fgd::cli {
namespace {

using ojson = nlohmann::ordered_json;

ojson optional_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

ojson membership_json(const MembershipMatrix& m) {
    ojson rows = ojson::array();
    for (std::size_t f = 0; f < m.features(); ++f) {
        ojson row = ojson::array();
        for (std::size_t k = 0; k < m.clusters(); ++k) row.push_back(m(f, k) ? 1 : 0);
        rows.push_back(std::move(row));
    }
    return rows;
}

ojson matrix_json(const Eigen::MatrixXd& m) {
    ojson rows = ojson::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        ojson row = ojson::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return rows;
}

Tensor to_tensor(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
    return t;
}

Tensor to_tensor(const MembershipMatrix& m) {
    Tensor t({m.features(), m.clusters()});
    for (std::size_t f = 0; f < m.features(); ++f)
        for (std::size_t k = 0; k < m.clusters(); ++k) t.at(f, k) = m(f, k) ? 1.0 : 0.0;
    return t;
}

Tensor to_tensor(const std::vector<double>& v) { return Tensor({v.size()}, v); }

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (std::isfinite(x)) s += x, ++n;
    return n ? s / static_cast<double>(n) : std::nan("");
}

double std_of(const std::vector<double>& v) {
    const double m = mean_of(v);
    double s = 0.0;
    std::size_t n = 0;
    for (double x : v)
        if (std::isfinite(x)) s += (x - m) * (x - m), ++n;
    return n ? std::sqrt(s / static_cast<double>(n)) : std::nan("");
}

std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

double silhouette_or_nan(const Points& points, const std::vector<std::size_t>& labels) {
    std::vector<std::size_t> distinct = labels;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) return std::nan("");
    return silhouette(points, labels);
}

}  // namespace

std::filesystem::path output_root() {
    const char* env = std::getenv(kOutputRootEnv);
    return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            const auto dash = item.find('-');
            if (dash == std::string::npos) {
                out.push_back(std::stoull(item));
            } else {
                const auto lo = std::stoull(item.substr(0, dash));
                const auto hi = std::stoull(item.substr(dash + 1));
                if (hi < lo) throw std::invalid_argument("descending range");
                for (auto s = lo; s <= hi; ++s) out.push_back(s);
            }
        } catch (const std::exception&) {
            throw ConfigError("invalid seed list entry '" + item + "'");
        }
    }
    if (out.empty()) throw ConfigError("empty seed list");
    return out;
}

LabeledDataset dataset_for(const ExperimentConfig& c) {
    if (!c.data.path.empty()) return load_dataset(c.data.path);
    GpSpec spec = c.data.gp;
    spec.seed = c.seed;
    return generate_dataset(spec);
}

void cmd_generate(const ExperimentConfig& c, const std::filesystem::path& out_stem, bool csv) {
    GpSpec spec = c.data.gp;
    spec.seed = c.seed;
    const LabeledDataset data = generate_dataset(spec);
    save_dataset(out_stem, data, spec);
    if (csv) {
        auto path = out_stem;
        path += ".csv";
        export_dataset_csv(path, data);
    }
}

std::string results_json(const TrainResult& r, const EvalMetrics& m) {
    ojson j;
    j["schema"] = kResultsSchema;
    j["auprc"] = m.auprc;
    j["auroc"] = m.auroc;
    j["ari"] = optional_json(m.ari);
    j["nmi"] = optional_json(m.nmi);
    j["nmi_degenerate"] = m.nmi_degenerate;
    j["silhouette"] = optional_json(m.silhouette);
    j["epochs"] = r.history.epochs.size();
    j["best_epoch"] = r.history.best_epoch;
    j["membership"] = membership_json(r.grouping.membership);
    return j.dump(2) + "\n";
}

std::string history_jsonl(const TrainingHistory& h) {
    std::string out;
    for (const auto& e : h.epochs) {
        ojson j;
        j["schema"] = kHistorySchema;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["reg_loss"] = e.reg_loss;
        j["changed"] = e.changed;
        j["membership"] = membership_json(e.membership);
        j["centroids"] = matrix_json(e.centroids);
        j["ari"] = optional_json(e.ari);
        j["nmi"] = optional_json(e.nmi);
        out += j.dump() + "\n";
    }
    return out;
}

bool cmd_train(const ExperimentConfig& c, const std::filesystem::path& out_dir) {
    const auto started = std::chrono::steady_clock::now();
    const LabeledDataset data = dataset_for(c);
    const TrainResult r = train(c, data);
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "history.jsonl", history_jsonl(r.history));

    NamedTensorList ckpt = r.model.state();
    ckpt.emplace_back("grouping.membership", to_tensor(r.grouping.membership));
    ckpt.emplace_back("grouping.centroids", to_tensor(r.grouping.clusters.centroids));
    for (std::size_t k = 0; k < r.grouping.clusters.covariances.size(); ++k)
        ckpt.emplace_back("grouping.covariance." + std::to_string(k), to_tensor(r.grouping.clusters.covariances[k]));
    if (r.grouping.clusters.weights.size() > 0) {
        const Eigen::VectorXd& w = r.grouping.clusters.weights;
        ckpt.emplace_back("grouping.weights", to_tensor(std::vector<double>(w.data(), w.data() + w.size())));
    }
    ckpt.emplace_back("input.mean", to_tensor(r.standardizer.mean));
    ckpt.emplace_back("input.scale", to_tensor(r.standardizer.scale));
    write_named_tensors(out_dir / "checkpoint.bin", ckpt);

    if (r.history.aborted) {
        ojson e;
        e["schema"] = "fgd.error/1";
        e["diagnostic"] = r.history.diagnostic;
        e["epochs_completed"] = r.history.epochs.size();
        e["best_epoch"] = r.history.best_epoch;
        write_text(out_dir / "error.json", e.dump(2) + "\n");
        return false;
    }

    const EvalMetrics m =
        evaluate(r.model, r.grouping, data, r.standardizer, r.split.test.empty() ? r.split.val : r.split.test,
                 c.grouping.combine, &data.ground_truth, c.train.chunk);
    write_text(out_dir / "results.json", results_json(r, m));

    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    ojson man;
    man["schema"] = kManifestSchema;
    man["version"] = FGD_VERSION;
    man["config_hash"] = config_hash(c);
    man["seeds"] = {c.seed};
    man["outputs"] = {"results.json", "history.jsonl", "checkpoint.bin"};
    man["wall_clock_seconds"] = {seconds};
    man["config"] = to_json(c);
    write_text(out_dir / "manifest.json", man.dump(2) + "\n");
    return true;
}

namespace {

struct RowScore {
    double ari = std::nan("");
    double nmi = std::nan("");
    double silhouette = std::nan("");
    bool ok = false;
    std::string error;
};

const std::vector<std::pair<std::string, std::string>>& row_names() {
    static const std::vector<std::pair<std::string, std::string>> rows = {
        {"random", "-"},          {"oracle", "-"},
        {"static_kmeans", "flat"}, {"static_kmeans", "time_mean"},
        {"static_kmeans", "sample_mean"}, {"static_kmeans", "full_mean"},
        {"dynamic_kmeans", "embeddings"}};
    return rows;
}

RowScore score_partition(const MembershipMatrix& truth, const std::vector<std::size_t>& labels, const Points* space) {
    RowScore s;
    s.ari = ari(truth.labels(), labels);
    s.nmi = nmi(truth.labels(), labels).value;
    if (space) s.silhouette = silhouette_or_nan(*space, labels);
    s.ok = true;
    return s;
}

std::vector<RowScore> run_seed(const ExperimentConfig& base, std::uint64_t seed) {
    std::vector<RowScore> out(row_names().size());
    ExperimentConfig c = base;
    c.seed = seed;
    const LabeledDataset data = dataset_for(c);
    const MembershipMatrix& truth = data.ground_truth;
    auto guarded = [&](std::size_t row, auto fn) {
        try {
            out[row] = fn();
        } catch (const std::exception& e) {
            out[row].ok = false;
            out[row].error = e.what();
        }
    };

    // dynamic first: its embedding space hosts the silhouette of the untrained partitions
    std::optional<Points> space;
    guarded(6, [&] {
        const TrainResult r = train(c, data);
        if (r.history.aborted) throw std::runtime_error(r.history.diagnostic);
        space = unified_points(r.model, c.grouping.combine);
        return score_partition(truth, grouping_labels(r.grouping), &*space);
    });
    guarded(1, [&] {
        ExperimentConfig o = c;
        o.grouping.init = InitMode::ground_truth;
        o.grouping.clusters = truth.clusters();
        o.grouping.period.reset();
        o.grouping.lambda = 0.0;
        const TrainResult r = train(o, data);
        if (r.history.aborted) throw std::runtime_error(r.history.diagnostic);
        const Points own = unified_points(r.model, o.grouping.combine);
        return score_partition(truth, grouping_labels(r.grouping), &own);
    });
    guarded(0, [&] {
        const std::size_t k = c.grouping.clusters;
        Rng rng = Rng::derive(seed, 5);
        std::vector<std::size_t> labels(truth.features());
        while (true) {  // uniform over labelings with no empty cluster
            std::vector<int> used(k, 0);
            for (auto& l : labels) used[l = rng.index(k)] = 1;
            if (std::count(used.begin(), used.end(), 1) == static_cast<long>(k)) break;
        }
        return score_partition(truth, labels, space ? &*space : nullptr);
    });
    const StaticMode modes[] = {StaticMode::flat, StaticMode::time_mean, StaticMode::sample_mean, StaticMode::full_mean};
    for (std::size_t i = 0; i < 4; ++i) {
        guarded(2 + i, [&] {
            const MembershipMatrix m = static_kmeans_baseline(data, modes[i], c.grouping.clusters, seed);
            return score_partition(truth, m.labels(), space ? &*space : nullptr);
        });
    }
    return out;
}

}  // namespace

std::vector<BenchmarkRow> cmd_benchmark(const ExperimentConfig& c, const std::vector<std::uint64_t>& seeds,
                                        unsigned jobs, const std::filesystem::path& out_dir) {
    if (c.grouping.clusters > 3) {
        throw ConfigError("grouping.clusters: the benchmark compares against three ground-truth groups; K=" +
                          std::to_string(c.grouping.clusters) + " is not allowed");
    }
    std::vector<std::vector<RowScore>> per_seed(seeds.size());
    std::atomic<std::size_t> next{0};
    std::mutex collect;
    auto worker = [&] {
        for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
            std::vector<RowScore> r;
            try {
                r = run_seed(c, seeds[i]);
            } catch (const std::exception& e) {
                r.assign(row_names().size(), RowScore{});
                for (auto& s : r) s.error = e.what();
            }
            const std::lock_guard lock(collect);
            per_seed[i] = std::move(r);
        }
    };
    const unsigned n_threads = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(seeds.size())));
    std::vector<std::thread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();

    std::vector<BenchmarkRow> rows;
    std::ostringstream runs;
    runs << "# schema: " << kBenchmarkSchema << "\nalgorithm,input,seed,ari,nmi,silhouette,status\n";
    for (std::size_t r = 0; r < row_names().size(); ++r) {
        BenchmarkRow row{row_names()[r].first, row_names()[r].second, {}, {}, {}, false, {}};
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const RowScore& sc = per_seed[s][r];
            runs << row.algorithm << ',' << row.input << ',' << seeds[s] << ',' << fmt(sc.ari) << ',' << fmt(sc.nmi)
                 << ',' << fmt(sc.silhouette) << ',' << (sc.ok ? "ok" : "FAILED") << '\n';
            if (!sc.ok) {
                row.failed = true;
                if (row.error.empty()) row.error = sc.error;
                continue;
            }
            row.ari.push_back(sc.ari);
            row.nmi.push_back(sc.nmi);
            row.silhouette.push_back(sc.silhouette);
        }
        rows.push_back(std::move(row));
    }

    std::ostringstream csv;
    csv << "# schema: " << kBenchmarkSchema << "\nalgorithm,input,ari_mean,ari_std,nmi_mean,nmi_std,sil_mean,sil_std,status\n";
    for (const auto& row : rows) {
        csv << row.algorithm << ',' << row.input << ',';
        if (row.failed) {
            csv << "nan,nan,nan,nan,nan,nan,FAILED\n";
            continue;
        }
        csv << fmt(mean_of(row.ari)) << ',' << fmt(std_of(row.ari)) << ',' << fmt(mean_of(row.nmi)) << ','
            << fmt(std_of(row.nmi)) << ',' << fmt(mean_of(row.silhouette)) << ',' << fmt(std_of(row.silhouette))
            << ",ok\n";
    }
    std::filesystem::create_directories(out_dir);
    write_text(out_dir / "benchmark.csv", csv.str());
    write_text(out_dir / "benchmark_runs.csv", runs.str());
    return rows;
}

void cmd_history(const std::filesystem::path& history, const std::filesystem::path& out_prefix) {
    std::ifstream is(history);
    if (!is) throw IoError(history.string() + ": cannot open");
    std::ostringstream flow;
    std::ostringstream sizes;
    flow << "# schema: " << kFlowSchema << "\nepoch,feature,cluster\n";
    sizes << "# schema: " << kFlowSchema << "\nepoch,cluster,size\n";
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto where = history.string() + ":" + std::to_string(lineno) + ": ";
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) throw IoError(where + "malformed JSON");
        if (j.value("schema", "") != kHistorySchema) throw IoError(where + "unexpected schema");
        std::size_t epoch = 0;
        std::vector<std::vector<int>> m;
        try {
            epoch = j.at("epoch").get<std::size_t>();
            m = j.at("membership").get<std::vector<std::vector<int>>>();
        } catch (const nlohmann::json::exception&) {
            throw IoError(where + "missing or invalid epoch/membership");
        }
        if (m.empty()) throw IoError(where + "empty membership");
        const std::size_t k = m.front().size();
        std::vector<std::size_t> count(k, 0);
        for (std::size_t f = 0; f < m.size(); ++f) {
            if (m[f].size() != k) throw IoError(where + "ragged membership matrix");
            for (std::size_t c = 0; c < k; ++c)
                if (m[f][c]) {
                    flow << epoch << ',' << f << ',' << c << '\n';
                    ++count[c];
                }
        }
        for (std::size_t c = 0; c < k; ++c) sizes << epoch << ',' << c << ',' << count[c] << '\n';
    }
    auto flow_path = out_prefix;
    flow_path += ".csv";
    auto sizes_path = out_prefix;
    sizes_path += "_sizes.csv";
    write_text(flow_path, flow.str());
    write_text(sizes_path, sizes.str());
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Feature group discovery experiments"};
    app.require_subcommand(1);
    std::string config_path;
    std::string out_path;
    std::string seeds_text = "0-4";
    std::vector<std::string> overrides;
    unsigned jobs = 1;
    bool csv = false;
    std::string history_path;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Experiment config (JSON)")->required();
        sub->add_option("--out", out_path, "Output location");
        sub->add_option("--override", overrides, "Dotted-path override key=value (repeatable)");
    };
    CLI::App* gen = app.add_subcommand("generate", "Write the synthetic dataset");
    add_common(gen);
    gen->add_flag("--csv", csv, "Also export a CSV copy");
    CLI::App* tr = app.add_subcommand("train", "Train one configuration");
    add_common(tr);
    CLI::App* bench = app.add_subcommand("benchmark", "Compare grouping strategies over seeds");
    add_common(bench);
    bench->add_option("--seeds", seeds_text, "Seed list, e.g. 0-4 or 1,3,5");
    bench->add_option("--jobs", jobs, "Worker threads");
    CLI::App* hist = app.add_subcommand("history", "Convert a training history to cluster-flow CSVs");
    hist->add_option("history", history_path, "history.jsonl")->required();
    hist->add_option("--out", out_path, "Output prefix");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (hist->parsed()) {
            const std::filesystem::path prefix =
                out_path.empty() ? std::filesystem::path(history_path).replace_extension("") += "_flow" : std::filesystem::path(out_path);
            cmd_history(history_path, prefix);
            out << "wrote " << prefix.string() << ".csv\n";
            return kExitOk;
        }
        const ExperimentConfig c = load_config(config_path, overrides);
        if (gen->parsed()) {
            const std::filesystem::path stem = out_path.empty() ? output_root() / "dataset" : std::filesystem::path(out_path);
            cmd_generate(c, stem, csv);
            out << "wrote " << stem.string() << ".bin\n";
            return kExitOk;
        }
        if (tr->parsed()) {
            const std::filesystem::path dir =
                out_path.empty() ? output_root() / ("train_seed" + std::to_string(c.seed)) : std::filesystem::path(out_path);
            if (!cmd_train(c, dir)) {
                err << read_text(dir / "error.json");
                return kExitRuntime;
            }
            out << read_text(dir / "results.json");
            return kExitOk;
        }
        const std::filesystem::path dir = out_path.empty() ? output_root() / "benchmark" : std::filesystem::path(out_path);
        const auto rows = cmd_benchmark(c, parse_seeds(seeds_text), jobs, dir);
        out << read_text(dir / "benchmark.csv");
        bool failed = false;
        for (const auto& r : rows)
            if (r.failed) {
                failed = true;
                err << r.algorithm << "/" << r.input << " FAILED: " << r.error << "\n";
            }
        return failed ? kExitRuntime : kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace fgd::cli
