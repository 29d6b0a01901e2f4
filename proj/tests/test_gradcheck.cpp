#include "doctest.h"
#include "gradcheck_common.hpp"
#include "qrn/experts.hpp"
#include "qrn/mixture.hpp"
#include "qrn/network.hpp"

using namespace qrn;
using namespace qrn::gradcheck;

namespace {

// Exhaustive finite-difference check of one layer kind in isolation, driven
// by a random linear functional of the output.
void check_isolated(const std::vector<LayerSpec>& specs, const Shape& input_chw, uint64_t seed) {
    NetworkT<double> net = NetworkT<double>::build(specs, input_chw, 2, seed);
    TensorT<double> input = kink_free_input({2, input_chw[0], input_chw[1], input_chw[2]}, seed + 1);
    ActivationTraceT<double> trace = forward(net, input);
    LinearFunctionalLoss loss(trace.output().shape(), seed + 2);
    GradientsT<double> analytic = backward_from_output(net, trace, loss.coeffs);
    CheckReport report = check_against_fd(net, input, std::cref(loss), analytic, 0, seed + 3);
    INFO("worst at ", report.worst_location, " rel ", report.max_rel_error);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked > 0);
}

}  // namespace

TEST_CASE("finite differences: conv2d in isolation") {
    check_isolated({conv2d("Conv", 3, 3)}, {2, 6, 6}, 101);
    check_isolated({conv2d("Conv", 2, 5)}, {1, 7, 7}, 102);
    check_isolated({conv2d("Conv", 4, 1)}, {3, 4, 4}, 103);
}

TEST_CASE("finite differences: maxpool2x2 in isolation") {
    check_isolated({maxpool2x2("Pool")}, {2, 6, 6}, 201);
}

TEST_CASE("finite differences: relu in isolation") {
    check_isolated({relu("ReLU")}, {2, 5, 5}, 301);
}

TEST_CASE("finite differences: dense in isolation") {
    check_isolated({dense("FC", 7)}, {2, 4, 4}, 401);
}

TEST_CASE("finite differences: global average pooling in isolation") {
    check_isolated({global_avg_pool("GAP")}, {3, 5, 5}, 501);
}

TEST_CASE("finite differences: softmax in isolation") {
    check_isolated({dense("FC", 5), softmax("Softmax")}, {1, 3, 3}, 601);
}

TEST_CASE("finite differences: composed expert architecture under cross-entropy") {
    NetworkT<double> net =
        NetworkT<double>::build(expert_layer_specs(4), {1, 32, 32}, 4, 999);
    TensorT<double> input = kink_free_input({2, 1, 32, 32}, 1000);
    for (int64_t i = 0; i < input.size(); ++i) input[i] *= 40.0;  // intensity-like scale
    ActivationTraceT<double> trace = forward(net, input);
    CrossEntropyLossFn loss{one_hot<double>({1, 3}, 4)};
    GradientsT<double> analytic = backward(net, trace, loss.targets);
    CheckReport report = check_against_fd(net, input, std::cref(loss), analytic, 6, 1001);
    INFO("worst at ", report.worst_location, " rel ", report.max_rel_error);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked >= report.skipped * 4);  // kink probes must stay rare
}

TEST_CASE("finite differences: composed gating architecture under the regression loss") {
    NetworkT<double> net = NetworkT<double>::build(gating_layer_specs(3), {1, 32, 32}, 3, 777);
    TensorT<double> input = kink_free_input({2, 1, 32, 32}, 778);
    for (int64_t i = 0; i < input.size(); ++i) input[i] *= 40.0;

    // Eq.5-style loss: ||g - w||^2 + lambda ||g||^2, mean over the batch.
    TensorT<double> targets({2, 3}, std::vector<double>{0.7, 0.2, 0.1, 0.1, 0.3, 0.6});
    const double lambda = 0.01;
    auto loss = [&](const NetworkT<double>& n, const TensorT<double>& in) {
        TensorT<double> g = forward_probs(n, in);
        double s = 0;
        for (int64_t i = 0; i < g.size(); ++i) {
            const double d = g[i] - targets[i];
            s += d * d + lambda * g[i] * g[i];
        }
        return s / g.dim(0);
    };

    ActivationTraceT<double> trace = forward(net, input);
    TensorT<double> g = trace.output();
    TensorT<double> dout(g.shape());
    for (int64_t i = 0; i < g.size(); ++i) dout[i] = (2.0 * (g[i] - targets[i]) + 2.0 * lambda * g[i]) / g.dim(0);
    GradientsT<double> analytic = backward_from_output(net, trace, dout);

    CheckReport report = check_against_fd(net, input, loss, analytic, 6, 779);
    INFO("worst at ", report.worst_location, " rel ", report.max_rel_error);
    CHECK(report.max_rel_error < 1e-4);
    CHECK(report.checked >= report.skipped * 4);
}
