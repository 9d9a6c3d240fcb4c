#include <benchmark/benchmark.h>

#include "fgd/clustering.hpp"
#include "fgd/metrics.hpp"
#include "fgd/model.hpp"
#include "fgd/synthdata.hpp"

using namespace fgd;

namespace {

Points random_points(std::size_t n, std::size_t d, Rng& rng) {
    Points p(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = rng.normal();
    return p;
}

ModelOptions synthetic_options(GroupEncoder enc) {
    ModelOptions o;
    o.layout = numerical_layout(6);
    o.hidden = 6;
    o.model_dim = 6;
    o.heads = 2;
    o.clusters = 3;
    o.group_encoder = enc;
    return o;
}

}  // namespace

// Forward and backward over one chunk of the synthetic data.
static void BM_ModelStep(benchmark::State& state) {
    const auto enc = state.range(1) ? GroupEncoder::transformer : GroupEncoder::mlp;
    Rng rng(1);
    Model model(synthetic_options(enc), rng);
    Tensor x({static_cast<std::size_t>(state.range(0)), 20, 6});
    for (auto& v : x.values()) v = rng.normal();
    Tensor y({x.shape()[0]});
    for (auto& v : y.values()) v = rng.uniform() < 0.25 ? 1.0 : 0.0;
    const MembershipMatrix m = MembershipMatrix::from_labels({0, 0, 1, 1, 2, 2}, 3);
    for (auto _ : state) {
        model.zero_grad();
        Graph g;
        const ModelVars vars = model.bind(g);
        const Var loss = supervised_loss(g, model.forward(g, vars, x, m), y);
        g.backward(loss);
        g.accumulate_gradients();
        benchmark::DoNotOptimize(g.value(loss).item());
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ModelStep)->Args({100, 0})->Args({500, 0})->Args({100, 1})->Args({500, 1})->Unit(benchmark::kMillisecond);

static void BM_KmeansStep(benchmark::State& state) {
    Rng rng(2);
    const Points p = random_points(static_cast<std::size_t>(state.range(0)), 12, rng);
    const ClusterState s = init_kmeanspp(p, 3, {}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(kmeans_step(p, s).state.centroids.data());
}
BENCHMARK(BM_KmeansStep)->Arg(6)->Arg(200);

static void BM_GmmStep(benchmark::State& state) {
    Rng rng(3);
    const Points p = random_points(static_cast<std::size_t>(state.range(0)), 12, rng);
    ClusterOptions o;
    o.kind = ClusterKind::gmm;
    o.covariance_type = CovarianceType::full;
    const ClusterState s = init_kmeanspp(p, 3, o, rng);
    for (auto _ : state) benchmark::DoNotOptimize(gmm_em_step(p, s).state.centroids.data());
}
BENCHMARK(BM_GmmStep)->Arg(6)->Arg(200);

static void BM_Auroc(benchmark::State& state) {
    Rng rng(4);
    std::vector<double> s(static_cast<std::size_t>(state.range(0))), y(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = rng.uniform();
        y[i] = i % 4 == 0 ? 1.0 : 0.0;
    }
    for (auto _ : state) benchmark::DoNotOptimize(auroc(s, y));
}
BENCHMARK(BM_Auroc)->Arg(1000)->Arg(100000);

static void BM_SampleGp(benchmark::State& state) {
    GpSpec spec;
    spec.samples = static_cast<std::size_t>(state.range(0));
    for (auto _ : state) benchmark::DoNotOptimize(sample_gp(spec).data());
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_SampleGp)->Arg(1000)->Unit(benchmark::kMillisecond);

static void BM_StaticKmeansFlat(benchmark::State& state) {
    GpSpec spec;
    spec.samples = static_cast<std::size_t>(state.range(0));
    const LabeledDataset d = generate_dataset(spec);
    for (auto _ : state) benchmark::DoNotOptimize(static_kmeans_baseline(d, StaticMode::flat, 3, 0).clusters());
}
BENCHMARK(BM_StaticKmeansFlat)->Arg(1000)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
