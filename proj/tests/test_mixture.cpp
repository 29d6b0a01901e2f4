#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "qrn/mixture.hpp"

using namespace qrn;

namespace {

EnsembleOutput make_output(int experts, int classes, const std::vector<double>& values) {
    EnsembleOutput p;
    p.experts = experts;
    p.classes = classes;
    p.p = values;
    return p;
}

// rows drawn as softmax of random logits
EnsembleOutput random_output(int experts, int classes, Rng& rng, double logit_scale = 1.5) {
    EnsembleOutput p;
    p.experts = experts;
    p.classes = classes;
    p.p.resize(static_cast<size_t>(experts) * classes);
    for (int i = 0; i < experts; ++i) {
        double mx = -1e30;
        std::vector<double> z(static_cast<size_t>(classes));
        for (int j = 0; j < classes; ++j) {
            z[static_cast<size_t>(j)] = rng.normal(0.0, logit_scale);
            mx = std::max(mx, z[static_cast<size_t>(j)]);
        }
        double s = 0;
        for (int j = 0; j < classes; ++j) s += std::exp(z[static_cast<size_t>(j)] - mx);
        for (int j = 0; j < classes; ++j) p.at(i, j) = std::exp(z[static_cast<size_t>(j)] - mx) / s;
    }
    return p;
}

// exhaustive search over the 3-simplex at the given step, for small problems
WeightVector grid_search_simplex(int steps, const std::function<double(const WeightVector&)>& objective) {
    WeightVector best;
    double best_val = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= steps; ++i)
        for (int j = 0; j <= steps - i; ++j) {
            WeightVector w{static_cast<double>(i) / steps, static_cast<double>(j) / steps,
                           static_cast<double>(steps - i - j) / steps};
            const double v = objective(w);
            if (v < best_val) {
                best_val = v;
                best = w;
            }
        }
    return best;
}

ExpertModel tiny_expert(uint64_t seed, Specialization spec = Specialization::clean) {
    ExpertModel m;
    m.network = Network::build({conv2d("Conv1", 4, 3), relu("ReLU1"), maxpool2x2("Pool1"), dense("FC", 4),
                                softmax("Softmax")},
                               {1, 16, 16}, 4, seed);
    m.specialization = spec;
    m.mean = {128.0f};
    return m;
}

}  // namespace

TEST_CASE("ensemble_outputs: identical experts give identical rows that sum to 1") {
    ExpertModel a = tiny_expert(5), b = tiny_expert(5), c = tiny_expert(5);
    Tensor image({1, 1, 16, 16});
    for (int64_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>((i * 37) % 256);
    EnsembleOutput p = ensemble_outputs({&a, &b, &c}, image);
    CHECK(p.experts == 3);
    for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (int j = 0; j < 4; ++j) {
            CHECK(p.at(i, j) == doctest::Approx(p.at(0, j)).epsilon(1e-12));
            s += p.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("ensemble_outputs: row order follows expert order") {
    ExpertModel a = tiny_expert(5), b = tiny_expert(99);
    Tensor image({1, 1, 16, 16}, 130.0f);
    EnsembleOutput ab = ensemble_outputs({&a, &b}, image);
    EnsembleOutput ba = ensemble_outputs({&b, &a}, image);
    for (int j = 0; j < 4; ++j) {
        CHECK(ab.at(0, j) == ba.at(1, j));
        CHECK(ab.at(1, j) == ba.at(0, j));
    }
}

TEST_CASE("ensemble_outputs rejects class-count mismatches") {
    ExpertModel a = tiny_expert(5);
    ExpertModel b;
    b.network = Network::build({dense("FC", 3), softmax("S")}, {1, 16, 16}, 3, 1);
    b.mean = {128.0f};
    Tensor image({1, 1, 16, 16}, 10.0f);
    CHECK_THROWS_AS(ensemble_outputs({&a, &b}, image), Error);
}

TEST_CASE("average_ensemble basics") {
    EnsembleOutput p = make_output(2, 2, {1, 0, 0, 1});
    auto avg = average_ensemble(p);
    CHECK(avg[0] == doctest::Approx(0.5));
    CHECK(avg[1] == doctest::Approx(0.5));

    EnsembleOutput q = make_output(3, 2, {0.3, 0.7, 0.3, 0.7, 0.3, 0.7});
    auto avg2 = average_ensemble(q);
    CHECK(avg2[0] == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(avg2[1] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("averaging equals the uniform-weight mixture within 1e-12 on random outputs") {
    Rng rng(321);
    for (int trial = 0; trial < 100; ++trial) {
        EnsembleOutput p = random_output(3, 5, rng);
        auto avg = average_ensemble(p);
        auto mix = weighted_mixture(p, {1.0 / 3, 1.0 / 3, 1.0 / 3});
        for (int j = 0; j < 5; ++j) CHECK(std::abs(avg[static_cast<size_t>(j)] - mix[static_cast<size_t>(j)]) < 1e-12);
    }
}

TEST_CASE("max_ensemble picks the globally most confident class") {
    EnsembleOutput p = make_output(3, 4,
                                   {0.4, 0.3, 0.2, 0.1,
                                    0.1, 0.0, 0.0, 0.9,
                                    0.25, 0.25, 0.25, 0.25});
    CHECK(max_ensemble(p) == 3);

    EnsembleOutput uniform = make_output(3, 4, std::vector<double>(12, 0.25));
    CHECK(max_ensemble(uniform) == 0);  // tie rule

    // invariant under expert-row permutation
    EnsembleOutput swapped = make_output(3, 4,
                                         {0.1, 0.0, 0.0, 0.9,
                                          0.4, 0.3, 0.2, 0.1,
                                          0.25, 0.25, 0.25, 0.25});
    CHECK(max_ensemble(swapped) == max_ensemble(p));
}

TEST_CASE("weighted_mixture: vertex weight returns that expert's row exactly") {
    Rng rng(11);
    EnsembleOutput p = random_output(3, 4, rng);
    auto out = weighted_mixture(p, {1.0, 0.0, 0.0});
    for (int j = 0; j < 4; ++j) CHECK(out[static_cast<size_t>(j)] == p.at(0, j));
}

TEST_CASE("weighted_mixture matches a hand-computed 3x4 case") {
    EnsembleOutput p = make_output(3, 4,
                                   {0.7, 0.1, 0.1, 0.1,
                                    0.2, 0.5, 0.2, 0.1,
                                    0.25, 0.25, 0.25, 0.25});
    auto out = weighted_mixture(p, {0.25, 0.25, 0.5});
    CHECK(out[0] == doctest::Approx(0.35).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(0.275).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(out[3] == doctest::Approx(0.175).epsilon(1e-12));
}

TEST_CASE("weighted_mixture validates the weight vector") {
    Rng rng(12);
    EnsembleOutput p = random_output(3, 4, rng);
    CHECK_THROWS_AS(weighted_mixture(p, {0.5, 0.5}), Error);            // wrong length
    CHECK_THROWS_AS(weighted_mixture(p, {0.6, 0.6, -0.2}), Error);      // negative
    CHECK_THROWS_AS(weighted_mixture(p, {0.5, 0.5, 0.1}), Error);       // off simplex
    auto out = weighted_mixture(p, {0.5, 0.3, 0.2});
    double s = 0;
    for (double v : out) s += v;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("hard_mixture picks the row of the largest weight") {
    Rng rng(13);
    EnsembleOutput p = random_output(3, 4, rng);
    auto out = hard_mixture(p, {0.2, 0.5, 0.3});
    for (int j = 0; j < 4; ++j) CHECK(out[static_cast<size_t>(j)] == p.at(1, j));

    auto tied = hard_mixture(p, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    for (int j = 0; j < 4; ++j) CHECK(tied[static_cast<size_t>(j)] == p.at(0, j));
}

TEST_CASE("hard_mixture always returns some row of P") {
    Rng rng(14);
    for (int trial = 0; trial < 20; ++trial) {
        EnsembleOutput p = random_output(3, 5, rng);
        WeightVector w{rng.uniform(), rng.uniform(), rng.uniform()};
        double s = w[0] + w[1] + w[2];
        for (double& v : w) v /= s;
        auto out = hard_mixture(p, w);
        bool matches_some_row = false;
        for (int i = 0; i < 3; ++i) {
            bool all = true;
            for (int j = 0; j < 5; ++j) all &= (out[static_cast<size_t>(j)] == p.at(i, j));
            matches_some_row |= all;
        }
        CHECK(matches_some_row);
    }
}

TEST_CASE("project_to_simplex: fixed points and vertices") {
    WeightVector already{0.2, 0.3, 0.5};
    auto w = project_to_simplex(already);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(w[static_cast<size_t>(i)] - already[static_cast<size_t>(i)]) < 1e-12);

    auto vertex = project_to_simplex({2.0, 0.0, 0.0});
    CHECK(vertex[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(vertex[1] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(vertex[2] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("project_to_simplex matches a dense grid search on 100 random vectors") {
    Rng rng(555);
    for (int trial = 0; trial < 100; ++trial) {
        WeightVector v{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
        WeightVector proj = project_to_simplex(v);
        CHECK(on_simplex(proj, 1e-9));
        // oracle: nearest grid point (step 0.005) in Euclidean distance to v
        WeightVector grid = grid_search_simplex(200, [&](const WeightVector& w) {
            double d = 0;
            for (int i = 0; i < 3; ++i) d += (w[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]) *
                                              (w[static_cast<size_t>(i)] - v[static_cast<size_t>(i)]);
            return d;
        });
        for (int i = 0; i < 3; ++i) CHECK(std::abs(proj[static_cast<size_t>(i)] - grid[static_cast<size_t>(i)]) <= 0.01);
    }
}

TEST_CASE("solver concentrates weight on a perfectly correct expert") {
    // expert 1 assigns probability 1.0 to the true class; the others never do
    std::vector<WeightSample> samples;
    for (int s = 0; s < 12; ++s) {
        const int label = s % 4;
        EnsembleOutput p;
        p.experts = 3;
        p.classes = 4;
        p.p.assign(12, 0.0);
        for (int j = 0; j < 4; ++j) {
            p.at(0, j) = (j == (label + 1) % 4) ? 1.0 : 0.0;
            p.at(1, j) = (j == label) ? 1.0 : 0.0;
            p.at(2, j) = (j == (label + 2) % 4) ? 1.0 : 0.0;
        }
        samples.push_back({p, label});
    }
    SolveResult r = solve_optimal_weights(samples);
    CHECK(r.w[1] >= 0.99);
}

TEST_CASE("solver on identical experts reaches the single-expert objective") {
    Rng rng(77);
    std::vector<WeightSample> samples;
    for (int s = 0; s < 15; ++s) {
        EnsembleOutput one = random_output(1, 5, rng);
        EnsembleOutput p;
        p.experts = 3;
        p.classes = 5;
        p.p.resize(15);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) p.at(i, j) = one.at(0, j);
        samples.push_back({p, static_cast<int>(rng.below(5))});
    }
    SolveResult r = solve_optimal_weights(samples);
    const double single = mixture_cross_entropy(samples, {1.0, 0.0, 0.0});
    CHECK(r.objective == doctest::Approx(single).epsilon(1e-9));
}

TEST_CASE("solver objective matches an exhaustive simplex grid search on random problems") {
    Rng rng(2033);
    for (int problem = 0; problem < 10; ++problem) {
        std::vector<WeightSample> samples;
        for (int s = 0; s < 20; ++s)
            samples.push_back({random_output(3, 5, rng), static_cast<int>(rng.below(5))});
        SolveResult r = solve_optimal_weights(samples);
        WeightVector grid_best =
            grid_search_simplex(100, [&](const WeightVector& w) { return mixture_cross_entropy(samples, w); });
        const double grid_obj = mixture_cross_entropy(samples, grid_best);
        CHECK(std::abs(r.objective - grid_obj) < 1e-3);
        // solver never loses to the uniform start or any vertex
        CHECK(r.objective <= mixture_cross_entropy(samples, {1.0 / 3, 1.0 / 3, 1.0 / 3}) + 1e-12);
        for (int i = 0; i < 3; ++i) {
            WeightVector vertex(3, 0.0);
            vertex[static_cast<size_t>(i)] = 1.0;
            CHECK(r.objective <= mixture_cross_entropy(samples, vertex) + 1e-12);
        }
    }
}

TEST_CASE("solver rejects an empty sample set") {
    CHECK_THROWS_AS(solve_optimal_weights({}), Error);
}

TEST_CASE("gating architecture: simplex outputs and closed-form parameter count") {
    Network gate = gating_architecture(3, {1, 32, 32}, 4);
    Tensor image({2, 1, 32, 32});
    Rng rng(5);
    for (int64_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(rng.uniform(-30, 30));
    Tensor out = forward_probs(gate, image);
    CHECK(out.dim(1) == 3);
    for (int n = 0; n < 2; ++n) {
        double s = 0;
        for (int k = 0; k < 3; ++k) {
            CHECK(out.at2(n, k) >= 0.0f);
            s += out.at2(n, k);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }

    // per-layer closed form: conv params = filters * (in * k * k) + filters
    const int64_t expected = (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (16 * 64 + 16) + (3 * 16 + 3);
    CHECK(gating_param_count(3, {1, 32, 32}) == expected);
    CHECK(gate.param_count() == expected);
}

TEST_CASE("gating network is under a quarter of one expert's parameters") {
    const int64_t gate = gating_param_count(3, {1, 32, 32});
    const int64_t expert = expert_param_count(4, {1, 32, 32});
    CHECK(gate * 4 < expert);
    // expert closed form, checked against the built network
    const int64_t expert_expected =
        (16 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64) + (128 * 1024 + 128) + (64 * 128 + 64) + (4 * 64 + 4);
    CHECK(expert == expert_expected);
    CHECK(expert_architecture(4).param_count() == expert_expected);
}

TEST_CASE("weight table: build, level-0 consistency, CSV round trip") {
    ExpertModel a = tiny_expert(1, Specialization::clean);
    ExpertModel b = tiny_expert(2, Specialization::noise);
    ExpertModel c = tiny_expert(3, Specialization::blur);
    Dataset val = synth_dataset(4, 3, 16, 50);

    auto noise_levels = level_grid(100.0, 5);
    auto blur_levels = level_grid(2.0, 5);
    OptimalWeightTable table = build_weight_table({&a, &b, &c}, val, noise_levels, blur_levels, 7);
    table.validate();
    REQUIRE(table.noise_weights.size() == 5);
    REQUIRE(table.blur_weights.size() == 5);
    for (int i = 0; i < 3; ++i)
        CHECK(table.noise_weights[0][static_cast<size_t>(i)] == table.blur_weights[0][static_cast<size_t>(i)]);

    // determinism
    OptimalWeightTable again = build_weight_table({&a, &b, &c}, val, noise_levels, blur_levels, 7);
    for (size_t li = 0; li < 5; ++li)
        for (int i = 0; i < 3; ++i)
            CHECK(table.noise_weights[li][static_cast<size_t>(i)] == again.noise_weights[li][static_cast<size_t>(i)]);

    const std::string path = (std::filesystem::temp_directory_path() / "qrn-table-test.csv").string();
    save_weight_table(table, path);
    OptimalWeightTable loaded = load_weight_table(path);
    for (size_t li = 0; li < 5; ++li)
        for (int i = 0; i < 3; ++i) {
            CHECK(loaded.noise_weights[li][static_cast<size_t>(i)] ==
                  doctest::Approx(table.noise_weights[li][static_cast<size_t>(i)]).epsilon(1e-8));
            CHECK(loaded.blur_weights[li][static_cast<size_t>(i)] ==
                  doctest::Approx(table.blur_weights[li][static_cast<size_t>(i)]).epsilon(1e-8));
        }
    std::filesystem::remove(path);
}

TEST_CASE("interpolate_weights blends adjacent grid entries and rejects out-of-range levels") {
    OptimalWeightTable table;
    table.experts = 3;
    table.noise_levels = {0.0, 10.0};
    table.blur_levels = {0.0, 10.0};
    table.noise_weights = {{0.8, 0.1, 0.1}, {0.2, 0.6, 0.2}};
    table.blur_weights = {{0.8, 0.1, 0.1}, {0.1, 0.1, 0.8}};

    auto mid = interpolate_weights(table, DistortionKind::noise, 5.0);
    CHECK(mid[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(mid[1] == doctest::Approx(0.35).epsilon(1e-12));
    CHECK(mid[2] == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(on_simplex(mid, 1e-12));

    auto at0 = interpolate_weights(table, DistortionKind::noise, 0.0);
    CHECK(at0[0] == doctest::Approx(0.8).epsilon(1e-12));
    auto clean = interpolate_weights(table, DistortionKind::clean, 0.0);
    CHECK(clean[0] == doctest::Approx(0.8).epsilon(1e-12));

    CHECK_THROWS_AS(interpolate_weights(table, DistortionKind::noise, 10.5), Error);
    CHECK_THROWS_AS(interpolate_weights(table, DistortionKind::blur, -0.5), Error);
}

TEST_CASE("a heavily regularized gate trends toward uniform weights") {
    Dataset ds = synth_dataset(4, 12, 16, 99);
    Splits splits = split(ds, {0.7, 0.15, 0.15, 99});

    OptimalWeightTable table;
    table.experts = 3;
    table.noise_levels = level_grid(100.0, 3);
    table.blur_levels = level_grid(2.0, 3);
    table.noise_weights = {{0.9, 0.05, 0.05}, {0.05, 0.9, 0.05}, {0.05, 0.9, 0.05}};
    table.blur_weights = {{0.9, 0.05, 0.05}, {0.05, 0.05, 0.9}, {0.05, 0.05, 0.9}};

    GatingTrainConfig config;
    config.lambda = 1000.0;  // regularizer dominates; simplex minimum is uniform
    config.policy.noise_max = 100.0;
    config.policy.blur_max = 2.0;
    config.optimizer.max_epochs = 15;
    config.optimizer.patience = 15;
    config.optimizer.batch_size = 8;
    config.optimizer.seed = 4;

    GatingModel gate = train_gating(splits, table, config);
    Tensor w = gate_weights_batch(gate, splits.test.images);
    double spread = 0;
    for (int n = 0; n < w.dim(0); ++n) {
        float mx = 0, mn = 1;
        for (int k = 0; k < 3; ++k) {
            mx = std::max(mx, w.at2(n, k));
            mn = std::min(mn, w.at2(n, k));
        }
        spread += mx - mn;
    }
    spread /= w.dim(0);
    CHECK(spread < 0.15);
}

TEST_CASE("gate_weights is deterministic and on the simplex") {
    Dataset ds = synth_dataset(4, 6, 16, 31);
    GatingModel gate;
    gate.network = gating_architecture(3, {1, 16, 16}, 8);
    gate.mean = compute_mean(ds);
    WeightVector w1 = gate_weights(gate, ds.image(0));
    WeightVector w2 = gate_weights(gate, ds.image(0));
    CHECK(on_simplex(w1, 1e-6));
    for (int i = 0; i < 3; ++i) CHECK(w1[static_cast<size_t>(i)] == w2[static_cast<size_t>(i)]);
}
