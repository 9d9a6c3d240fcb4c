#include "fgd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fgd {
namespace {

Partition compact(const Partition& p, std::size_t& count) {
    std::map<std::size_t, std::size_t> ids;
    Partition out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
        auto [it, inserted] = ids.try_emplace(p[i], ids.size());
        out[i] = it->second;
    }
    count = ids.size();
    return out;
}

struct Contingency {
    std::vector<std::vector<double>> table;
    std::vector<double> rows;
    std::vector<double> cols;
    double n = 0.0;
};

Contingency contingency(const Partition& a, const Partition& b, const char* op) {
    if (a.size() != b.size()) {
        throw std::invalid_argument(std::string(op) + ": partitions have different lengths " + std::to_string(a.size()) +
                                    " and " + std::to_string(b.size()));
    }
    std::size_t ka = 0;
    std::size_t kb = 0;
    const Partition ca = compact(a, ka);
    const Partition cb = compact(b, kb);
    Contingency c;
    c.table.assign(ka, std::vector<double>(kb, 0.0));
    c.rows.assign(ka, 0.0);
    c.cols.assign(kb, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        c.table[ca[i]][cb[i]] += 1.0;
        c.rows[ca[i]] += 1.0;
        c.cols[cb[i]] += 1.0;
    }
    c.n = static_cast<double>(a.size());
    return c;
}

double pairs(double n) { return n * (n - 1.0) / 2.0; }

void check_binary(std::span<const double> scores, std::span<const double> labels, const char* op,
                  double& positives, double& negatives) {
    if (scores.size() != labels.size()) throw std::invalid_argument(std::string(op) + ": scores and labels differ in length");
    positives = 0.0;
    negatives = 0.0;
    for (double y : labels) {
        if (y == 1.0) positives += 1.0;
        else if (y == 0.0) negatives += 1.0;
        else throw std::invalid_argument(std::string(op) + ": labels must be 0 or 1");
    }
    if (positives == 0.0 || negatives == 0.0) throw std::invalid_argument(std::string(op) + ": both classes must be present");
}

}  // namespace

double ari(const Partition& truth, const Partition& predicted) {
    if (truth.size() < 2) throw std::invalid_argument("ari: at least two points are required");
    const Contingency c = contingency(truth, predicted, "ari");
    double index = 0.0;
    for (const auto& row : c.table)
        for (double v : row) index += pairs(v);
    double sum_a = 0.0;
    double sum_b = 0.0;
    for (double v : c.rows) sum_a += pairs(v);
    for (double v : c.cols) sum_b += pairs(v);
    const double expected = sum_a * sum_b / pairs(c.n);
    const double max_index = 0.5 * (sum_a + sum_b);
    if (max_index == expected) return 1.0;  // both partitions trivial and identical in structure
    return (index - expected) / (max_index - expected);
}

NmiResult nmi(const Partition& truth, const Partition& predicted) {
    const Contingency c = contingency(truth, predicted, "nmi");
    if (c.n == 0.0) throw std::invalid_argument("nmi: empty partitions");
    auto entropy = [&](const std::vector<double>& counts) {
        double h = 0.0;
        for (double v : counts)
            if (v > 0.0) h -= (v / c.n) * std::log(v / c.n);
        return h;
    };
    const double ha = entropy(c.rows);
    const double hb = entropy(c.cols);
    if (ha * hb <= 0.0) return {0.0, true};
    double mi = 0.0;
    for (std::size_t i = 0; i < c.rows.size(); ++i)
        for (std::size_t j = 0; j < c.cols.size(); ++j) {
            const double nij = c.table[i][j];
            if (nij > 0.0) mi += (nij / c.n) * std::log(c.n * nij / (c.rows[i] * c.cols[j]));
        }
    return {std::clamp(mi / std::sqrt(ha * hb), 0.0, 1.0), false};
}

double silhouette(const Eigen::MatrixXd& points, const Partition& labels) {
    if (static_cast<std::size_t>(points.rows()) != labels.size()) {
        throw std::invalid_argument("silhouette: " + std::to_string(points.rows()) + " points but " +
                                    std::to_string(labels.size()) + " labels");
    }
    std::size_t k = 0;
    const Partition lab = compact(labels, k);
    if (k < 2) throw std::invalid_argument("silhouette: at least two non-empty clusters are required");
    const auto n = lab.size();
    std::vector<double> size(k, 0.0);
    for (auto l : lab) size[l] += 1.0;

    double total = 0.0;
    std::vector<double> sums(k);
    for (std::size_t i = 0; i < n; ++i) {
        if (size[lab[i]] < 2.0) continue;  // singleton contributes 0
        std::fill(sums.begin(), sums.end(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            sums[lab[j]] += (points.row(static_cast<Eigen::Index>(i)) - points.row(static_cast<Eigen::Index>(j))).norm();
        }
        const double a = sums[lab[i]] / (size[lab[i]] - 1.0);
        double b = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < k; ++c)
            if (c != lab[i]) b = std::min(b, sums[c] / size[c]);
        const double den = std::max(a, b);
        total += den > 0.0 ? (b - a) / den : 0.0;
    }
    return total / static_cast<double>(n);
}

double auroc(std::span<const double> scores, std::span<const double> labels) {
    double pos = 0.0;
    double neg = 0.0;
    check_binary(scores, labels, "auroc", pos, neg);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t t = i; t < j; ++t)
            if (labels[order[t]] == 1.0) rank_sum += mid;
        i = j;
    }
    return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

double auprc(std::span<const double> scores, std::span<const double> labels) {
    double pos = 0.0;
    double neg = 0.0;
    check_binary(scores, labels, "auprc", pos, neg);
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    double tp = 0.0;
    double fp = 0.0;
    double prev_recall = 0.0;
    double ap = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1.0 ? tp : fp) += 1.0;
            ++j;
        }
        const double recall = tp / pos;
        const double precision = tp / (tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

}  // namespace fgd
