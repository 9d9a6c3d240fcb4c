#include <array>
#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "fgd/clustering.hpp"

using namespace fgd;

namespace {

Points line(std::initializer_list<double> xs) {
    Points p(static_cast<Eigen::Index>(xs.size()), 1);
    Eigen::Index i = 0;
    for (double x : xs) p(i++, 0) = x;
    return p;
}

ClusterState kmeans_state(Eigen::MatrixXd centroids) {
    ClusterState s;
    s.kind = ClusterKind::kmeans;
    s.centroids = std::move(centroids);
    return s;
}

Points random_points(std::size_t n, std::size_t d, Rng& rng, double spread = 1.0) {
    Points p(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    for (Eigen::Index i = 0; i < p.rows(); ++i)
        for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = spread * rng.normal();
    return p;
}

// Points scattered around one centre per group.
Points blobs(const std::vector<std::size_t>& labels, std::size_t d, double separation, Rng& rng) {
    Points p(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < labels.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
            p(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
                (j == labels[i] % d ? separation * static_cast<double>(1 + labels[i] / d) : 0.0) + rng.normal();
    return p;
}

Tensor to_vector(const Eigen::RowVectorXd& v) {
    Tensor t({static_cast<std::size_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v(i);
    return t;
}

Tensor to_tensor(const Eigen::MatrixXd& m) {
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Unification

TEST(Unify, NumericalSumIsBiasThenWeight) {
    const Tensor w = Tensor::matrix({{1, 2, 3}, {7, 8, 9}});  // w1 row, bias row
    const Eigen::VectorXd u = unify(w, FeatureSpec{}, CombineMode::bias_sum_linear);
    EXPECT_EQ(u, (Eigen::VectorXd(6) << 7, 8, 9, 1, 2, 3).finished());
    EXPECT_EQ(unify(w, FeatureSpec{}, CombineMode::bias_avg_linear), u);
    EXPECT_EQ(unify(w, FeatureSpec{}, CombineMode::bias_ext_catzero), u);
}

TEST(Unify, CategoricalAverage) {
    const Tensor w = Tensor::matrix({{1, 0}, {2, 3}, {3, 6}, {5, 5}});
    const FeatureSpec cat{3, true};
    EXPECT_EQ(unify(w, cat, CombineMode::bias_avg_linear), (Eigen::VectorXd(4) << 5, 5, 2, 3).finished());
    EXPECT_EQ(unify(w, cat, CombineMode::bias_sum_linear), (Eigen::VectorXd(4) << 5, 5, 6, 9).finished());
    EXPECT_EQ(unify(w, cat, CombineMode::bias_ext_catzero), (Eigen::VectorXd(4) << 5, 5, 0, 0).finished());
}

TEST(Unify, BiasModeHasWidthH) {
    const Tensor num = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    const Tensor cat({5, 3}, 1.0);
    EXPECT_EQ(unify(num, FeatureSpec{}, CombineMode::bias).size(), 3);
    EXPECT_EQ(unify(cat, FeatureSpec{4, true}, CombineMode::bias).size(), 3);
    EXPECT_EQ(unified_dim(3, CombineMode::bias), 3u);
    EXPECT_EQ(unified_dim(3, CombineMode::bias_sum_linear), 6u);
}

TEST(Unify, GraphVersionMatchesValueVersion) {
    Rng rng(5);
    Tensor w({4, 3});
    for (auto& v : w.values()) v = rng.normal();
    const FeatureSpec cat{3, true};
    for (CombineMode mode : {CombineMode::bias, CombineMode::bias_ext_catzero, CombineMode::bias_sum_linear,
                             CombineMode::bias_avg_linear}) {
        Graph g;
        const Tensor& gv = g.value(unify(g, g.constant(w), cat, mode));
        const Eigen::VectorXd v = unify(w, cat, mode);
        ASSERT_EQ(gv.size(), static_cast<std::size_t>(v.size()));
        for (std::size_t i = 0; i < gv.size(); ++i) EXPECT_DOUBLE_EQ(gv[i], v(static_cast<Eigen::Index>(i)));
    }
}

TEST(Unify, UnknownModeAndBadShape) {
    EXPECT_THROW(parse_combine_mode("concat"), std::invalid_argument);
    EXPECT_THROW(unify(Tensor({3, 2}), FeatureSpec{}, CombineMode::bias), ShapeError);
}

// ---------------------------------------------------------------------------
// K-means

TEST(KMeans, LineInstanceOneStep) {
    const Points p = line({0, 1, 10, 11});
    const StepResult r = kmeans_step(p, kmeans_state((Eigen::MatrixXd(2, 1) << 0, 10).finished()));
    EXPECT_DOUBLE_EQ(r.state.centroids(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(r.state.centroids(1, 0), 10.5);
    EXPECT_EQ(hard_membership(r.scores).labels(), (std::vector<std::size_t>{0, 0, 1, 1}));
}

TEST(KMeans, LineInstanceMatchesExhaustiveMinimum) {
    // oracle: SSE of every 2-partition of the 4 points
    const std::vector<double> xs{0, 1, 10, 11};
    double best = std::numeric_limits<double>::infinity();
    unsigned best_mask = 0;
    for (unsigned mask = 1; mask < 15; ++mask) {
        double s[2] = {0, 0}, n[2] = {0, 0};
        for (unsigned i = 0; i < 4; ++i) s[(mask >> i) & 1] += xs[i], n[(mask >> i) & 1] += 1;
        double sse = 0;
        for (unsigned i = 0; i < 4; ++i) {
            const unsigned c = (mask >> i) & 1;
            sse += (xs[i] - s[c] / n[c]) * (xs[i] - s[c] / n[c]);
        }
        if (sse < best) best = sse, best_mask = mask;
    }
    EXPECT_DOUBLE_EQ(best, 1.0);

    const Points p = line({0, 1, 10, 11});
    ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << 0, 10).finished());
    StepResult r;
    for (int i = 0; i < 10; ++i) {
        r = kmeans_step(p, s);
        s = r.state;
    }
    const auto labels = hard_membership(r.scores).labels();
    EXPECT_DOUBLE_EQ(kmeans_sse(p, s.centroids, labels), best);
    for (unsigned i = 1; i < 4; ++i) EXPECT_EQ(labels[i] == labels[0], ((best_mask >> i) & 1) == (best_mask & 1));
}

TEST(KMeans, SinglePointSingleCluster) {
    const StepResult r = kmeans_step(line({4.5}), kmeans_state((Eigen::MatrixXd(1, 1) << 0).finished()));
    EXPECT_DOUBLE_EQ(r.state.centroids(0, 0), 4.5);
}

TEST(KMeans, FixedPointIsStable) {
    const Points p = line({1, 1, 5, 5});
    const ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << 1, 5).finished());
    const StepResult r = kmeans_step(p, s);
    EXPECT_EQ(r.state.centroids, s.centroids);
    EXPECT_EQ(hard_membership(r.scores).labels(), (std::vector<std::size_t>{0, 0, 1, 1}));
}

TEST(KMeans, MoreClustersThanPointsThrows) {
    EXPECT_THROW(kmeans_step(line({1, 2}), kmeans_state(Eigen::MatrixXd::Zero(3, 1))), ClusteringError);
}

TEST(KMeans, EmptyClusterSeizesFarthestPoint) {
    // centroid 1 at 100 attracts nothing; the point farthest from its centroid (9) moves over
    const Points p = line({0, 1, 9});
    const StepResult r = kmeans_step(p, kmeans_state((Eigen::MatrixXd(2, 1) << 0, 100).finished()));
    EXPECT_EQ(hard_membership(r.scores).labels(), (std::vector<std::size_t>{0, 0, 1}));
    EXPECT_DOUBLE_EQ(r.state.centroids(1, 0), 9.0);
}

TEST(KMeans, LloydNeverIncreasesSse) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const Points p = random_points(12, 3, rng);
        ClusterState s = init_kmeanspp(p, 3, {}, rng);
        double prev = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 15; ++it) {
            const StepResult r = kmeans_step(p, s);
            // SSE of the new assignment against the centroids that produced it, then after the update
            const auto labels = hard_membership(r.scores).labels();
            const double before = kmeans_sse(p, s.centroids, labels);
            const double after = kmeans_sse(p, r.state.centroids, labels);
            EXPECT_LE(before, prev + 1e-9);
            EXPECT_LE(after, before + 1e-9);
            prev = after;
            s = r.state;
        }
    }
}

// ---------------------------------------------------------------------------
// Fuzzy C-means

TEST(Fuzzy, EquidistantPointSplitsEvenly) {
    ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << -1, 1).finished());
    s.kind = ClusterKind::fuzzy;
    const StepResult r = fuzzy_step(line({0, -1, 1}), s);
    EXPECT_NEAR(r.scores(0, 0), 0.5, 1e-15);
    EXPECT_NEAR(r.scores(0, 1), 0.5, 1e-15);
}

TEST(Fuzzy, CoincidentPointGetsFullMembership) {
    ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << -1, 1).finished());
    s.kind = ClusterKind::fuzzy;
    const StepResult r = fuzzy_step(line({1, -1, 0.3}), s);
    EXPECT_EQ(r.scores(0, 1), 1.0);
    EXPECT_EQ(r.scores(0, 0), 0.0);
    EXPECT_EQ(r.scores(1, 0), 1.0);
}

TEST(Fuzzy, FuzzifierMustExceedOne) {
    ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << -1, 1).finished());
    s.kind = ClusterKind::fuzzy;
    s.fuzzifier = 1.0;
    EXPECT_THROW(fuzzy_step(line({0, 1}), s), std::invalid_argument);
}

TEST(Fuzzy, ObjectiveNeverIncreases) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        Rng rng(seed);
        const Points p = random_points(10, 2, rng);
        ClusterOptions o;
        o.kind = ClusterKind::fuzzy;
        o.fuzzifier = 1.5 + seed % 3;
        ClusterState s = init_kmeanspp(p, 3, o, rng);
        double prev = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 15; ++it) {
            const StepResult r = fuzzy_step(p, s);
            // J(U(c), c) >= J(U(c), c') >= J(U(c'), c')
            const double before = fcm_objective(p, r.scores, s.centroids, s.fuzzifier);
            const double after = fcm_objective(p, r.scores, r.state.centroids, s.fuzzifier);
            EXPECT_LE(before, prev + 1e-9);
            EXPECT_LE(after, before + 1e-9);
            prev = after;
            s = r.state;
        }
    }
}

TEST(Fuzzy, TwoPointsAtTwoCentroids) {
    ClusterState s = kmeans_state((Eigen::MatrixXd(2, 1) << 0, 3).finished());
    s.kind = ClusterKind::fuzzy;
    const Points p = line({0, 3});
    const StepResult r = fuzzy_step(p, s);
    EXPECT_LE(fcm_objective(p, r.scores, r.state.centroids, 2.0), fcm_objective(p, r.scores, s.centroids, 2.0) + 1e-12);
}

// ---------------------------------------------------------------------------
// Gaussian mixtures

TEST(Gmm, SingleComponentIsSampleMoments) {
    Rng rng(1);
    const Points p = random_points(20, 3, rng);
    ClusterOptions o;
    o.kind = ClusterKind::gmm;
    o.covariance_type = CovarianceType::full;
    const ClusterState s = init_kmeanspp(p, 1, o, rng);
    const StepResult r = gmm_em_step(p, s);
    const Eigen::RowVectorXd mean = p.colwise().mean();
    const Eigen::MatrixXd centred = p.rowwise() - mean;
    const Eigen::MatrixXd cov = centred.transpose() * centred / 20.0 + kCovarianceJitter * Eigen::MatrixXd::Identity(3, 3);
    EXPECT_TRUE(r.state.centroids.row(0).isApprox(mean, 1e-12));
    EXPECT_TRUE(r.state.covariances[0].isApprox(cov, 1e-12));
    EXPECT_DOUBLE_EQ(r.state.weights(0), 1.0);
}

TEST(Gmm, SeparatedBlobsGetConfidentResponsibilities) {
    Rng rng(2);
    std::vector<std::size_t> labels;
    for (int i = 0; i < 15; ++i) labels.push_back(0);
    for (int i = 0; i < 15; ++i) labels.push_back(1);
    const Points p = blobs(labels, 2, 10.0, rng);
    ClusterOptions o;
    o.kind = ClusterKind::gmm;
    o.covariance_type = CovarianceType::diagonal;
    ClusterState s = init_kmeanspp(p, 2, o, rng);
    StepResult r;
    for (int i = 0; i < 30; ++i) {
        r = gmm_em_step(p, s);
        s = r.state;
    }
    for (Eigen::Index f = 0; f < r.scores.rows(); ++f) EXPECT_GT(r.scores.row(f).maxCoeff(), 0.99);
}

TEST(Gmm, EmNeverDecreasesLikelihood) {
    for (CovarianceType type : {CovarianceType::spherical, CovarianceType::diagonal, CovarianceType::full,
                                CovarianceType::tied}) {
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            Rng rng(seed);
            // enough points per component that the covariance jitter stays negligible
            const Points p = random_points(60, 2, rng);
            ClusterOptions o;
            o.kind = ClusterKind::gmm;
            o.covariance_type = type;
            ClusterState s = init_kmeanspp(p, 3, o, rng);
            double prev = gmm_log_likelihood(p, s);
            for (int it = 0; it < 15; ++it) {
                s = gmm_em_step(p, s).state;
                const double ll = gmm_log_likelihood(p, s);
                EXPECT_GE(ll, prev - 1e-9) << to_string(type) << " seed " << seed << " iter " << it;
                prev = ll;
            }
        }
    }
}

TEST(Gmm, CovarianceTypesRespected) {
    Rng rng(3);
    const Points p = random_points(12, 3, rng);
    for (CovarianceType type : {CovarianceType::spherical, CovarianceType::diagonal, CovarianceType::tied}) {
        ClusterOptions o;
        o.kind = ClusterKind::gmm;
        o.covariance_type = type;
        const ClusterState s = gmm_em_step(p, init_kmeanspp(p, 2, o, rng)).state;
        for (const auto& c : s.covariances) {
            EXPECT_TRUE(c.isDiagonal() || type == CovarianceType::tied);
            if (type == CovarianceType::spherical) EXPECT_NEAR(c(0, 0), c(2, 2), 1e-15);
        }
        if (type == CovarianceType::tied) EXPECT_EQ(s.covariances[0], s.covariances[1]);
    }
}

TEST(Gmm, BrokenCovarianceNamesComponent) {
    Rng rng(4);
    const Points p = random_points(8, 2, rng);
    ClusterOptions o;
    o.kind = ClusterKind::gmm;
    o.covariance_type = CovarianceType::full;
    ClusterState s = init_kmeanspp(p, 2, o, rng);
    s.covariances[1] = -Eigen::MatrixXd::Identity(2, 2);
    try {
        gmm_em_step(p, s);
        FAIL() << "expected an error";
    } catch (const ClusteringError& e) {
        EXPECT_NE(std::string(e.what()).find("component 1"), std::string::npos) << e.what();
    }
}

// ---------------------------------------------------------------------------
// Membership

TEST(Membership, HardArgmaxAndTies) {
    const Scores s = (Scores(3, 2) << 0.2, 0.8, 0.5, 0.5, 0.9, 0.1).finished();
    const MembershipMatrix m = hard_membership(s);
    EXPECT_EQ(m.labels(), (std::vector<std::size_t>{1, 0, 0}));
    EXPECT_TRUE(m.is_hard());
}

TEST(Membership, SoftThresholdArithmetic) {
    const Scores s = (Scores(3, 3) << 1.0, 0.85, 0.3, 0.1, 1.0, 0.2, 0.1, 0.2, 1.0).finished();
    const MembershipMatrix m = soft_membership(s, 0.8);
    EXPECT_TRUE(m(0, 0) && m(0, 1) && !m(0, 2));
}

TEST(Membership, SoftAtZeroIsAllOnes) {
    const Scores s = (Scores(2, 3) << 0.1, 0.2, 0.7, 0.3, 0.3, 0.4).finished();
    EXPECT_EQ(soft_membership(s, 0.0), MembershipMatrix::all_ones(2, 3));
}

TEST(Membership, SoftRepairsEmptyCluster) {
    // argmax puts both features in cluster 0; cluster 1 takes its best-scoring feature
    const Scores s = (Scores(2, 2) << 0.9, 0.1, 0.6, 0.4).finished();
    const MembershipMatrix m = soft_membership(s, 0.999);
    EXPECT_TRUE(m.is_valid());
    EXPECT_TRUE(m(1, 1));
    EXPECT_FALSE(m(0, 1));
}

TEST(Membership, SoftRejectsDeltaOutsideUnitInterval) {
    const Scores s = Scores::Constant(2, 2, 0.5);
    EXPECT_THROW(soft_membership(s, 1.0), std::invalid_argument);
    EXPECT_THROW(soft_membership(s, -0.1), std::invalid_argument);
}

TEST(Membership, HardRepairMovesFeatureWithoutEmptyingDonor) {
    const Scores s = (Scores(3, 3) << 0.9, 0.1, 0.0, 0.8, 0.15, 0.05, 0.0, 0.0, 1.0).finished();
    const MembershipMatrix m = repair_empty_hard(hard_membership(s), s);
    EXPECT_TRUE(m.is_hard());
    EXPECT_TRUE(m.is_valid());
    EXPECT_EQ(m.labels()[2], 2u);
}

// ---------------------------------------------------------------------------
// Initialization

TEST(KMeansPlusPlus, KEqualsFUsesEveryPoint) {
    Rng rng(8);
    const Points p = line({3, 1, 4, 1.5, 9});
    const ClusterState s = init_kmeanspp(p, 5, {}, rng);
    std::vector<double> got(s.centroids.data(), s.centroids.data() + 5);
    std::sort(got.begin(), got.end());
    EXPECT_EQ(got, (std::vector<double>{1, 1.5, 3, 4, 9}));
}

TEST(KMeansPlusPlus, Deterministic) {
    Rng r1(99), r2(99);
    Rng data(1);
    const Points p = random_points(10, 4, data);
    EXPECT_EQ(init_kmeanspp(p, 3, {}, r1).centroids, init_kmeanspp(p, 3, {}, r2).centroids);
}

TEST(KMeansPlusPlus, FarPointDominatesSecondPick) {
    const Points p = line({0, 0, 0, 100});
    int far = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        const ClusterState s = init_kmeanspp(p, 2, {}, rng);
        if (s.centroids(0, 0) == 0.0 && s.centroids(1, 0) == 100.0) ++far;
        if (s.centroids(0, 0) == 100.0 && s.centroids(1, 0) == 0.0) ++far;
    }
    EXPECT_GT(far / 1000.0, 0.99);
}

TEST(KMeansPlusPlus, TooFewDistinctPoints) {
    Rng rng(1);
    EXPECT_THROW(init_kmeanspp(line({2, 2, 2}), 2, {}, rng), ClusteringError);
    EXPECT_THROW(init_kmeanspp(line({1, 2}), 3, {}, rng), ClusteringError);
}

TEST(KMeansPlusPlus, GmmBuildsComponentsFromSeeds) {
    Rng rng(2);
    const Points p = line({0, 0.1, 10, 10.1});
    ClusterOptions o;
    o.kind = ClusterKind::gmm;
    const ClusterState s = init_kmeanspp(p, 2, o, rng);
    EXPECT_EQ(s.kind, ClusterKind::gmm);
    EXPECT_EQ(s.covariances.size(), 2u);
    EXPECT_NEAR(s.weights.sum(), 1.0, 1e-15);
}

TEST(InitPrior, SingletonGroupsSitOnPoints) {
    const Points p = line({3, 7});
    const ClusterState s = init_prior(p, MembershipMatrix::from_labels({1, 0}, 2), {});
    EXPECT_EQ(s.centroids(0, 0), 7.0);
    EXPECT_EQ(s.centroids(1, 0), 3.0);
}

TEST(InitPrior, OneGroupIsGlobalMean) {
    const Points p = line({1, 2, 6});
    EXPECT_DOUBLE_EQ(init_prior(p, MembershipMatrix::all_ones(3, 1), {}).centroids(0, 0), 3.0);
}

TEST(InitPrior, EmptyGroupThrows) {
    MembershipMatrix m(2, 2);
    m.set(0, 0, true);
    m.set(1, 0, true);
    EXPECT_THROW(init_prior(line({1, 2}), m, {}), ClusteringError);
}

TEST(InitPrior, TrueGroupsTighterThanRandomGroups) {
    const std::vector<std::size_t> truth{0, 0, 1, 1, 2, 2};
    double true_intra = 0.0;
    double random_intra = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const Points p = blobs(truth, 3, 3.0, rng);
        std::vector<std::size_t> shuffled = truth;
        rng.shuffle(shuffled.begin(), shuffled.end());
        for (const std::vector<std::size_t>* labels : std::array<const std::vector<std::size_t>*, 2>{&truth, &shuffled}) {
            const MembershipMatrix m = MembershipMatrix::from_labels(*labels, 3);
            const ClusterState s = init_prior(p, m, {});
            Graph g;
            std::vector<Var> u;
            for (Eigen::Index f = 0; f < p.rows(); ++f) u.push_back(g.constant(to_vector(p.row(f))));
            const double intra = reg_loss(g, u, reg_weights(RegVariant::hard, s, p, m, {}), s.centroids).intra;
            (labels == &truth ? true_intra : random_intra) += intra;
        }
    }
    EXPECT_LT(true_intra, random_intra);
}

// ---------------------------------------------------------------------------
// EMA

TEST(Ema, CentroidArithmetic) {
    const Eigen::MatrixXd old_c = Eigen::MatrixXd::Zero(1, 1);
    const Eigen::MatrixXd new_c = Eigen::MatrixXd::Constant(1, 1, 4.0);
    EXPECT_DOUBLE_EQ(ema_centroids(old_c, new_c, 0.25)(0, 0), 3.0);
    EXPECT_EQ(ema_centroids(old_c, new_c, 0.0), new_c);
    EXPECT_EQ(ema_centroids(new_c, new_c, 0.6), new_c);
    EXPECT_THROW(ema_centroids(old_c, new_c, 1.0), std::invalid_argument);
}

TEST(Ema, ZeroDecayReturnsNewComponentForEveryRule) {
    const Gaussian a{(Eigen::VectorXd(2) << 1, 2).finished(), (Eigen::MatrixXd(2, 2) << 2, 0.3, 0.3, 1).finished()};
    const Gaussian b{(Eigen::VectorXd(2) << -1, 0).finished(), (Eigen::MatrixXd(2, 2) << 1, -0.2, -0.2, 3).finished()};
    for (EmaRule r : {EmaRule::moment_matching, EmaRule::product_of_experts, EmaRule::wasserstein}) {
        const Gaussian g = ema_gaussian(a, b, 0.0, r);
        EXPECT_EQ(g.mean, b.mean);
        EXPECT_EQ(g.cov, b.cov);
    }
}

TEST(Ema, MomentMatchingCrossTermVanishesForEqualMeans) {
    const Eigen::VectorXd mu = (Eigen::VectorXd(2) << 0.5, -1).finished();
    const Eigen::MatrixXd s1 = (Eigen::MatrixXd(2, 2) << 2, 0.5, 0.5, 1).finished();
    const Eigen::MatrixXd s2 = (Eigen::MatrixXd(2, 2) << 1, 0, 0, 4).finished();
    const Gaussian g = ema_gaussian({mu, s1}, {mu, s2}, 0.3, EmaRule::moment_matching);
    EXPECT_LT((g.cov - (0.3 * s1 + 0.7 * s2)).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_LT((g.mean - mu).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Ema, OneDimensionalMomentMatching) {
    const Gaussian a{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const Gaussian b{Eigen::VectorXd::Constant(1, 2.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const Gaussian g = ema_gaussian(a, b, 0.5, EmaRule::moment_matching);
    EXPECT_NEAR(g.mean(0), 1.0, 1e-12);
    EXPECT_NEAR(g.cov(0, 0), 2.0, 1e-12);
}

TEST(Ema, RulesAgreeOnIdenticalComponents) {
    const Eigen::VectorXd mu = (Eigen::VectorXd(3) << 1, 2, 3).finished();
    const Eigen::MatrixXd s = (Eigen::MatrixXd(3, 3) << 2, 0.4, 0.1, 0.4, 1.5, -0.2, 0.1, -0.2, 1).finished();
    for (EmaRule r : {EmaRule::moment_matching, EmaRule::product_of_experts, EmaRule::wasserstein}) {
        const Gaussian g = ema_gaussian({mu, s}, {mu, s}, 0.4, r);
        EXPECT_LT((g.mean - mu).cwiseAbs().maxCoeff(), 1e-12) << to_string(r);
        EXPECT_LT((g.cov - s).cwiseAbs().maxCoeff(), 1e-12) << to_string(r);
    }
}

TEST(Ema, ProductOfExpertsMixesPrecisions) {
    const Gaussian a{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const Gaussian b{Eigen::VectorXd::Constant(1, 3.0), Eigen::MatrixXd::Constant(1, 1, 4.0)};
    const Gaussian g = ema_gaussian(a, b, 0.5, EmaRule::product_of_experts);
    const double precision = 0.5 * 1.0 + 0.5 * 0.25;
    EXPECT_NEAR(g.cov(0, 0), 1.0 / precision, 1e-12);
    EXPECT_NEAR(g.mean(0), (0.5 * 0.25 * 3.0) / precision, 1e-12);
}

TEST(Ema, WassersteinAveragesRoots) {
    const Gaussian a{Eigen::VectorXd::Constant(1, 0.0), Eigen::MatrixXd::Constant(1, 1, 1.0)};
    const Gaussian b{Eigen::VectorXd::Constant(1, 2.0), Eigen::MatrixXd::Constant(1, 1, 9.0)};
    const Gaussian g = ema_gaussian(a, b, 0.5, EmaRule::wasserstein);
    EXPECT_NEAR(g.cov(0, 0), 4.0, 1e-12);
    EXPECT_NEAR(g.mean(0), 1.0, 1e-12);
}

TEST(Ema, NonSpdInputRejected) {
    const Gaussian a{Eigen::VectorXd::Zero(2), (Eigen::MatrixXd(2, 2) << 1, 2, 2, 1).finished()};
    const Gaussian b{Eigen::VectorXd::Zero(2), Eigen::MatrixXd::Identity(2, 2)};
    EXPECT_THROW(ema_gaussian(a, b, 0.5, EmaRule::moment_matching), ClusteringError);
}

// ---------------------------------------------------------------------------
// Regularizer

namespace {

struct RegFixture {
    Graph g;
    std::vector<Var> u;

    explicit RegFixture(const Points& p) {
        for (Eigen::Index f = 0; f < p.rows(); ++f) u.push_back(g.constant(to_vector(p.row(f))));
    }
};

}  // namespace

TEST(RegLoss, ZeroWhenPointsSitOnCentroids) {
    const Points p = line({0, 0, 4, 4});
    RegFixture fx(p);
    const Eigen::MatrixXd w = reg_weights(RegVariant::hard, kmeans_state(line({0, 4})), p,
                                          MembershipMatrix::from_labels({0, 0, 1, 1}, 2), {});
    EXPECT_EQ(fx.g.value(reg_loss(fx.g, fx.u, w, line({0, 4})).loss).item(), 0.0);
}

TEST(RegLoss, HandEvaluatedExample) {
    // intra = (|0-0| + |1-0|) / 2 clusters; inter = (4 + 4) / 2
    const Points p = line({0, 1, 4, 4});
    const Eigen::MatrixXd centroids = line({0, 4});
    const MembershipMatrix m = MembershipMatrix::from_labels({0, 0, 1, 1}, 2);
    const Eigen::MatrixXd w = reg_weights(RegVariant::hard, kmeans_state(centroids), p, m, {});
    double brute_intra = 0.0;
    for (Eigen::Index f = 0; f < 4; ++f)
        for (Eigen::Index k = 0; k < 2; ++k) brute_intra += w(f, k) * std::abs(p(f, 0) - centroids(k, 0));
    double brute_inter = 0.0;
    for (Eigen::Index a = 0; a < 2; ++a)
        for (Eigen::Index b = 0; b < 2; ++b) brute_inter += std::abs(centroids(a, 0) - centroids(b, 0));
    EXPECT_DOUBLE_EQ((brute_intra / 2) / (brute_inter / 2), 0.125);
    EXPECT_DOUBLE_EQ(reg_loss_value(p, w, centroids), 0.125);
}

TEST(RegLoss, DoublingInterclusterDistanceHalvesLoss) {
    const Points p = line({-1, 1, 9, 11});
    const MembershipMatrix m = MembershipMatrix::from_labels({0, 0, 1, 1}, 2);
    const Eigen::MatrixXd w = reg_weights(RegVariant::hard, kmeans_state(line({0, 10})), p, m, {});
    const double base = reg_loss_value(p, w, line({0, 10}));
    const double wide = reg_loss_value(line({-1, 1, 19, 21}), w, line({0, 20}));
    EXPECT_NEAR(wide, base / 2.0, 1e-15);
}

TEST(RegLoss, ScaleInvariant) {
    Rng rng(6);
    const Points p = random_points(6, 3, rng);
    const Eigen::MatrixXd c = random_points(3, 3, rng);
    const Eigen::MatrixXd w = reg_weights(RegVariant::hard, kmeans_state(c), p,
                                          MembershipMatrix::from_labels({0, 1, 2, 0, 1, 2}, 3), {});
    EXPECT_NEAR(reg_loss_value(p, w, c), reg_loss_value(3.7 * p, w, 3.7 * c), 1e-12);
}

TEST(RegLoss, CoincidentCentroidsAreDegenerate) {
    const Points p = line({0, 1});
    RegFixture fx(p);
    const Eigen::MatrixXd c = line({2, 2});
    const RegLoss r = reg_loss(fx.g, fx.u, Eigen::MatrixXd::Identity(2, 2), c);
    EXPECT_TRUE(r.degenerate);
    EXPECT_EQ(fx.g.value(r.loss).item(), kDegenerateRegLoss);
}

TEST(RegLoss, SoftWeightsAreSoftmaxOfNegativeDistance) {
    const Points p = line({0, 3});
    const Eigen::MatrixXd w = reg_weights(RegVariant::soft, kmeans_state(line({0, 1})), p, {}, {});
    EXPECT_NEAR(w(0, 0), 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
    EXPECT_NEAR(w.row(1).sum(), 1.0, 1e-15);
}

class RegGradient : public ::testing::TestWithParam<RegVariant> {};

TEST_P(RegGradient, MatchesCentralDifferencesAndSkipsCentroids) {
    Rng rng(21);
    std::vector<Parameter> weights;
    for (int f = 0; f < 6; ++f) {
        Tensor t({2, 3});
        for (auto& v : t.values()) v = rng.normal();
        weights.emplace_back("embed." + std::to_string(f), t);
    }
    std::vector<Tensor> values;
    for (const auto& w : weights) values.push_back(w.value);
    const Points pts = unify_all(values, numerical_layout(6), CombineMode::bias_sum_linear);
    ClusterState state = init_prior(pts, MembershipMatrix::from_labels({0, 0, 1, 1, 2, 2}, 3), {});
    const MembershipMatrix m = MembershipMatrix::from_labels({0, 0, 1, 1, 2, 2}, 3);
    const Eigen::MatrixXd w = reg_weights(GetParam(), state, pts, m, {});
    Parameter centroids("mu", to_tensor(state.centroids));

    std::vector<Parameter*> ps;
    for (auto& p : weights) ps.push_back(&p);
    auto loss = [&](Graph& g) {
        std::vector<Var> u;
        for (auto& p : weights) u.push_back(unify(g, g.parameter(p), FeatureSpec{}, CombineMode::bias_sum_linear));
        return reg_loss(g, u, w, g.parameter(centroids)).loss;
    };
    EXPECT_LT(gradcheck(loss, ps, 1e-5), 1e-4);

    Graph g;
    std::vector<Var> u;
    for (auto& p : weights) u.push_back(unify(g, g.parameter(p), FeatureSpec{}, CombineMode::bias_sum_linear));
    const Var mu = g.parameter(centroids);
    g.backward(reg_loss(g, u, w, mu).loss);
    const Tensor mu_grad = g.grad(mu);
    for (double v : mu_grad.values()) EXPECT_EQ(v, 0.0);
}

INSTANTIATE_TEST_SUITE_P(Variants, RegGradient, ::testing::Values(RegVariant::hard, RegVariant::soft),
                         [](const auto& info) { return std::string(to_string(info.param)); });

// ---------------------------------------------------------------------------
// Reclustering

TEST(Recluster, UnchangedPointsAreAFixedPoint) {
    Rng rng(3);
    const Points p = random_points(6, 2, rng);
    GroupingState gs;
    gs.clusters = init_kmeanspp(p, 3, {}, rng);
    gs.scores = cluster_scores(p, gs.clusters);
    gs.membership = hard_membership(gs.scores);
    ReclusterOptions o;
    o.alpha = 0.4;
    for (int i = 0; i < 50; ++i) recluster(p, gs, o);  // converge
    const GroupingState before = gs;
    EXPECT_FALSE(recluster(p, gs, o));
    EXPECT_EQ(gs.membership, before.membership);
    EXPECT_LT((gs.clusters.centroids - before.clusters.centroids).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Recluster, StrongDampingRestoresOldMembership) {
    // The middle points drift so that one Lloyd update moves 6 to the left
    // group. With alpha near 1 the smoothed centroids stay near {0.5, 10.5}
    // and the re-assignment puts it back.
    const Points before = line({0, 1, 10, 11});
    const Points after = line({0, 4.9, 6, 20});
    auto start = [&] {
        GroupingState gs;
        gs.clusters = kmeans_state(line({0.5, 10.5}));
        gs.scores = cluster_scores(before, gs.clusters);
        gs.membership = hard_membership(gs.scores);
        return gs;
    };
    GroupingState gs = start();
    const MembershipMatrix old = gs.membership;
    EXPECT_EQ(old.labels(), (std::vector<std::size_t>{0, 0, 1, 1}));

    ReclusterOptions o;
    o.alpha = 0.999;
    EXPECT_FALSE(recluster(after, gs, o));
    EXPECT_EQ(gs.membership, old);
    EXPECT_NEAR(gs.clusters.centroids(0, 0), 0.5, 0.01);
    EXPECT_NEAR(gs.clusters.centroids(1, 0), 10.5, 0.01);

    GroupingState undamped = start();
    EXPECT_TRUE(recluster(after, undamped, ReclusterOptions{}));
    EXPECT_EQ(undamped.membership.labels(), (std::vector<std::size_t>{0, 0, 0, 1}));
}

TEST(Recluster, SingleClusterTracksEmaOfMean) {
    GroupingState gs;
    gs.clusters = kmeans_state(line({0}));
    gs.membership = MembershipMatrix::all_ones(2, 1);
    ReclusterOptions o;
    o.alpha = 0.25;
    EXPECT_FALSE(recluster(line({3, 5}), gs, o));
    EXPECT_EQ(gs.membership, MembershipMatrix::all_ones(2, 1));
    EXPECT_DOUBLE_EQ(gs.clusters.centroids(0, 0), 3.0);  // 0.25*0 + 0.75*4
}

TEST(Recluster, SoftGmmKeepsEveryClusterNonEmpty) {
    Rng rng(4);
    const Points p = random_points(6, 2, rng);
    ClusterOptions co;
    co.kind = ClusterKind::gmm;
    GroupingState gs;
    gs.clusters = init_kmeanspp(p, 3, co, rng);
    ReclusterOptions o;
    o.mode = MembershipMode::soft;
    o.delta = 0.7;
    gs.scores = cluster_scores(p, gs.clusters);
    gs.membership = membership_from_scores(gs.scores, o);
    for (int i = 0; i < 10; ++i) {
        recluster(p, gs, o);
        EXPECT_TRUE(gs.membership.is_valid());
    }
}
