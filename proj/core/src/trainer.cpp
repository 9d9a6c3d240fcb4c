#include "fgd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

#include "fgd/metrics.hpp"

namespace fgd {

Split split_indices(std::size_t n, double val_fraction, double test_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng = Rng::derive(seed, kStreamSplit);
    rng.shuffle(order.begin(), order.end());
    const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    if (n_val + n_test >= n) throw std::invalid_argument("split_indices: no training samples left");
    Split s;
    s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val),
                  order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val + n_test), order.end());
    return s;
}

Standardizer Standardizer::identity(std::size_t features) {
    return {std::vector<double>(features, 0.0), std::vector<double>(features, 1.0)};
}

Standardizer Standardizer::fit(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t t_count = x.shape()[1];
    const std::size_t f_count = x.shape()[2];
    Standardizer s = identity(f_count);
    std::vector<double> sq(f_count, 0.0);
    for (auto i : rows)
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t f = 0; f < f_count; ++f) s.mean[f] += x[(i * t_count + t) * f_count + f];
    const double count = static_cast<double>(rows.size() * t_count);
    for (auto& m : s.mean) m /= count;
    for (auto i : rows)
        for (std::size_t t = 0; t < t_count; ++t)
            for (std::size_t f = 0; f < f_count; ++f) {
                const double d = x[(i * t_count + t) * f_count + f] - s.mean[f];
                sq[f] += d * d;
            }
    for (std::size_t f = 0; f < f_count; ++f) {
        const double sd = std::sqrt(sq[f] / count);
        s.scale[f] = sd > 0.0 ? 1.0 / sd : 1.0;
    }
    return s;
}

void Standardizer::apply(Tensor& batch) const {
    const std::size_t f_count = mean.size();
    if (batch.size() % f_count != 0) throw ShapeError("Standardizer: batch " + to_string(batch.shape()) + " is not a multiple of the feature count");
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t f = i % f_count;
        batch[i] = (batch[i] - mean[f]) * scale[f];
    }
}

Tensor gather_samples(const Tensor& x, std::span<const std::size_t> rows) {
    const std::size_t stride = x.shape()[1] * x.shape()[2];
    Tensor out({rows.size(), x.shape()[1], x.shape()[2]});
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::memcpy(out.data() + r * stride, x.data() + rows[r] * stride, stride * sizeof(double));
    return out;
}

Tensor gather_labels(const Tensor& y, std::span<const std::size_t> rows) {
    Tensor out({rows.size()});
    for (std::size_t r = 0; r < rows.size(); ++r) out[r] = y[rows[r]];
    return out;
}

ModelOptions model_options(const ExperimentConfig& c, const FeatureLayout& layout) {
    ModelOptions o;
    o.layout = layout;
    o.hidden = c.model.hidden;
    o.clusters = c.grouping.clusters;
    o.agg = c.model.agg;
    o.psi = c.model.psi;
    o.group_encoder = c.model.group_encoder;
    o.model_dim = c.model.model_dim;
    o.heads = c.model.heads;
    o.positional_encoding = c.model.positional_encoding;
    return o;
}

ReclusterOptions recluster_options(const GroupingConfig& g) {
    return {g.membership, g.delta, g.alpha, g.ema_rule};
}

ClusterOptions cluster_options(const GroupingConfig& g) { return {g.algorithm, g.covariance_type, g.fuzzifier}; }

Points unified_points(const Model& model, CombineMode mode) {
    const std::vector<Tensor> w = model.embedding_weights();
    return unify_all(w, model.options().layout, mode);
}

GroupingState initial_grouping(const ExperimentConfig& c, const Model& model, const MembershipMatrix& ground_truth) {
    const GroupingConfig& g = c.grouping;
    const Points points = unified_points(model, g.combine);
    const ClusterOptions co = cluster_options(g);
    GroupingState s;
    switch (g.init) {
    case InitMode::kmeanspp: {
        Rng rng = Rng::derive(c.seed, kStreamClusterInit);
        s.clusters = init_kmeanspp(points, g.clusters, co, rng);
        s.scores = cluster_scores(points, s.clusters);
        s.membership = membership_from_scores(s.scores, recluster_options(g));
        return s;
    }
    case InitMode::prior: {
        MembershipMatrix prior(model.features(), g.clusters);
        for (std::size_t k = 0; k < g.prior.size(); ++k)
            for (auto f : g.prior[k]) prior.set(f, k, true);
        s.membership = prior;
        break;
    }
    case InitMode::ground_truth:
        if (ground_truth.features() != model.features() || ground_truth.clusters() != g.clusters) {
            throw ConfigError("grouping.init: ground truth has " + std::to_string(ground_truth.clusters()) +
                              " groups over " + std::to_string(ground_truth.features()) + " features; config asks for " +
                              std::to_string(g.clusters) + " clusters");
        }
        s.membership = ground_truth;
        break;
    }
    s.clusters = init_prior(points, s.membership, co);
    s.scores = cluster_scores(points, s.clusters);
    return s;
}

namespace {

Tensor slice_samples(const Tensor& x, std::size_t begin, std::size_t end) {
    const std::size_t stride = x.size() / x.shape()[0];
    Shape shape = x.shape();
    shape[0] = end - begin;
    std::vector<double> v(x.data() + begin * stride, x.data() + end * stride);
    return Tensor(shape, std::move(v));
}

double bce_value(double logit, double y) {
    // log(1 + exp(-|z|)) + max(z, 0) - z*y
    return std::log1p(std::exp(-std::abs(logit))) + std::max(logit, 0.0) - logit * y;
}

}  // namespace

BatchLoss accumulate_batch_gradients(Model& model, const GroupingState& grouping, const GroupingConfig& g,
                                     const Tensor& x, const Tensor& y, std::size_t chunk) {
    BatchLoss out;
    const std::size_t b = x.shape()[0];
    if (b == 0) throw std::invalid_argument("accumulate_batch_gradients: empty batch");
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t start = 0; start < b; start += chunk) {
        const std::size_t end = std::min(b, start + chunk);
        const Tensor xc = slice_samples(x, start, end);
        const Tensor yc = slice_samples(y, start, end);
        Graph graph;
        const ModelVars vars = model.bind(graph);
        const Var loss = supervised_loss(graph, model.forward(graph, vars, xc, grouping.membership), yc);
        const double w = static_cast<double>(end - start) / static_cast<double>(b);
        graph.backward(graph.scale(loss, w));
        graph.accumulate_gradients();
        out.supervised += w * graph.value(loss).item();
    }

    if (g.lambda > 0.0) {
        const Points points = unified_points(model, g.combine);
        const Eigen::MatrixXd weights =
            reg_weights(g.reg_variant, grouping.clusters, points, grouping.membership, grouping.scores);
        Graph graph;
        std::vector<Var> unified;
        const auto embed = model.embedding_parameters();
        for (std::size_t f = 0; f < embed.size(); ++f) {
            unified.push_back(unify(graph, graph.parameter(*embed[f]), model.options().layout[f], g.combine));
        }
        const RegLoss r = reg_loss(graph, unified, weights, grouping.clusters.centroids);
        out.reg = graph.value(r.loss).item();
        out.degenerate = r.degenerate;
        if (!r.degenerate) {
            graph.backward(graph.scale(r.loss, g.lambda));
            graph.accumulate_gradients();
        }
    }
    return out;
}

std::vector<double> predict_logits(const Model& model, const MembershipMatrix& m, const Tensor& x,
                                   const Standardizer& s, std::span<const std::size_t> rows, std::size_t chunk) {
    std::vector<double> out;
    out.reserve(rows.size());
    chunk = std::max<std::size_t>(chunk, 1);
    for (std::size_t start = 0; start < rows.size(); start += chunk) {
        const std::size_t end = std::min(rows.size(), start + chunk);
        Tensor batch = gather_samples(x, rows.subspan(start, end - start));
        s.apply(batch);
        Graph graph;
        const ModelVars vars = model.bind_constants(graph);
        const Tensor& logits = graph.value(model.forward(graph, vars, batch, m));
        for (std::size_t i = 0; i < logits.size(); ++i) out.push_back(logits[i]);
    }
    return out;
}

double supervised_loss_value(const Model& model, const MembershipMatrix& m, const Tensor& x, const Tensor& y,
                             const Standardizer& s, std::span<const std::size_t> rows, std::size_t chunk) {
    if (rows.empty()) throw std::invalid_argument("supervised_loss_value: no samples");
    const std::vector<double> logits = predict_logits(model, m, x, s, rows, chunk);
    double total = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) total += bce_value(logits[i], y[rows[i]]);
    return total / static_cast<double>(rows.size());
}

namespace {

struct Checkpoint {
    Model model;
    GroupingState grouping;
};

void record_grouping_metrics(EpochRecord& rec, const GroupingState& grouping, const MembershipMatrix& truth) {
    if (truth.features() != grouping.membership.features() || truth.features() < 2) return;
    const auto predicted = grouping_labels(grouping);
    const auto expected = truth.labels();
    rec.ari = ari(expected, predicted);
    rec.nmi = nmi(expected, predicted).value;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const LabeledDataset& data) {
    config.validate();
    const std::size_t n = data.samples();
    const std::size_t f_count = data.features();
    if (n == 0) throw std::invalid_argument("train: empty dataset");
    if (config.grouping.clusters > f_count) {
        throw ConfigError("grouping.clusters: " + std::to_string(config.grouping.clusters) + " clusters for " +
                          std::to_string(f_count) + " features");
    }
    const GroupingConfig& gc = config.grouping;
    const TrainConfig& tc = config.train;

    TrainResult result;
    result.split = split_indices(n, tc.val_fraction, tc.test_fraction, config.seed);
    result.standardizer =
        config.data.standardize ? Standardizer::fit(data.x, result.split.train) : Standardizer::identity(f_count);
    const Standardizer& st = result.standardizer;

    Rng init_rng = Rng::derive(config.seed, kStreamModelInit);
    Model model(model_options(config, numerical_layout(f_count)), init_rng);
    GroupingState grouping = initial_grouping(config, model, data.ground_truth);
    const ReclusterOptions ropts = recluster_options(gc);
    const std::vector<Parameter*> params = model.parameters();
    AdamState adam = make_adam_state(params);
    AdamOptions aopts;
    aopts.lr = tc.lr;

    Rng shuffle = Rng::derive(config.seed, kStreamShuffle);
    std::vector<std::size_t> order = result.split.train;
    Checkpoint best{model, grouping};
    double best_val = std::numeric_limits<double>::infinity();
    std::size_t wait = 0;
    std::size_t batches = 0;
    TrainingHistory& history = result.history;

    auto abort = [&](std::string why) {
        history.aborted = true;
        history.diagnostic = std::move(why);
    };

    for (std::size_t epoch = 1; epoch <= tc.epochs && !history.aborted; ++epoch) {
        shuffle.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        bool changed = false;
        for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
            const std::size_t end = std::min(order.size(), start + tc.batch_size);
            const std::span<const std::size_t> rows(order.data() + start, end - start);
            Tensor xb = gather_samples(data.x, rows);
            st.apply(xb);
            const Tensor yb = gather_labels(data.y, rows);
            model.zero_grad();
            const BatchLoss bl = accumulate_batch_gradients(model, grouping, gc, xb, yb, tc.chunk);
            if (!std::isfinite(bl.supervised) || !std::isfinite(bl.reg)) {
                abort("non-finite training loss at epoch " + std::to_string(epoch) + ", batch starting at " +
                      std::to_string(start));
                break;
            }
            adam_step(params, adam, aopts);
            loss_sum += bl.supervised * static_cast<double>(rows.size());
            ++batches;
            if (gc.period && gc.recluster_unit == ReclusterUnit::batch && batches % *gc.period == 0) {
                changed |= recluster(unified_points(model, gc.combine), grouping, ropts);
            }
        }
        if (history.aborted) break;
        if (gc.period && gc.recluster_unit == ReclusterUnit::epoch && epoch % *gc.period == 0) {
            changed |= recluster(unified_points(model, gc.combine), grouping, ropts);
        }

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.val_loss = supervised_loss_value(model, grouping.membership, data.x, data.y, st, result.split.val, tc.chunk);
        if (!std::isfinite(rec.val_loss)) {
            abort("non-finite validation loss at epoch " + std::to_string(epoch));
            break;
        }
        if (gc.lambda > 0.0) {
            const Points points = unified_points(model, gc.combine);
            rec.reg_loss = reg_loss_value(
                points, reg_weights(gc.reg_variant, grouping.clusters, points, grouping.membership, grouping.scores),
                grouping.clusters.centroids);
        }
        rec.membership = grouping.membership;
        rec.centroids = grouping.clusters.centroids;
        rec.changed = changed;
        record_grouping_metrics(rec, grouping, data.ground_truth);
        const double val = rec.val_loss;
        history.epochs.push_back(std::move(rec));

        if (val < best_val) {
            best_val = val;
            best = Checkpoint{model, grouping};
            history.best_epoch = epoch;
            wait = 0;
        } else if (++wait >= tc.patience) {
            break;
        }
    }

    result.model = std::move(best.model);
    result.grouping = std::move(best.grouping);
    return result;
}

std::vector<std::size_t> grouping_labels(const GroupingState& grouping) {
    if (grouping.membership.is_hard()) return grouping.membership.labels();
    return hard_membership(grouping.scores).labels();
}

EvalMetrics evaluate(const Model& model, const GroupingState& grouping, const LabeledDataset& data,
                     const Standardizer& s, std::span<const std::size_t> rows, CombineMode combine,
                     const MembershipMatrix* truth, std::size_t chunk) {
    EvalMetrics out;
    const std::vector<double> logits = predict_logits(model, grouping.membership, data.x, s, rows, chunk);
    std::vector<double> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.y[rows[i]];
    out.auprc = auprc(logits, labels);  // sigmoid is monotone, so logits rank identically
    out.auroc = auroc(logits, labels);

    const auto predicted = grouping_labels(grouping);
    if (truth && truth->features() == predicted.size() && predicted.size() >= 2) {
        const auto expected = truth->labels();
        out.ari = ari(expected, predicted);
        const NmiResult r = nmi(expected, predicted);
        out.nmi = r.value;
        out.nmi_degenerate = r.degenerate;
    }
    std::vector<std::size_t> distinct = predicted;
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() >= 2) out.silhouette = silhouette(unified_points(model, combine), predicted);
    return out;
}

}  // namespace fgd
