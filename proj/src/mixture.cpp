#include "qrn/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"

namespace qrn {

void EnsembleOutput::validate() const {
    if (experts < 2) fail(ErrorCode::invalid_argument, "ensemble output needs at least 2 experts");
    if (classes < 2 || p.size() != static_cast<size_t>(experts) * classes)
        fail(ErrorCode::shape_mismatch, "ensemble output matrix malformed");
    for (int i = 0; i < experts; ++i) {
        double s = 0;
        for (int j = 0; j < classes; ++j) {
            if (at(i, j) < -1e-9) fail(ErrorCode::invalid_argument, "negative probability in ensemble output");
            s += at(i, j);
        }
        if (std::abs(s - 1.0) > 1e-6)
            fail(ErrorCode::invalid_argument, "ensemble output row " + std::to_string(i) + " sums to " +
                                                  std::to_string(s));
    }
}

bool on_simplex(const WeightVector& w, double tol) {
    double s = 0;
    for (double v : w) {
        if (v < -tol || !std::isfinite(v)) return false;
        s += v;
    }
    return std::abs(s - 1.0) <= tol;
}

const std::vector<double>& OptimalWeightTable::levels(DistortionKind kind) const {
    if (kind == DistortionKind::noise) return noise_levels;
    if (kind == DistortionKind::blur) return blur_levels;
    fail(ErrorCode::invalid_argument, "weight table has no levels for kind 'clean'");
}

const std::vector<WeightVector>& OptimalWeightTable::weights(DistortionKind kind) const {
    if (kind == DistortionKind::noise) return noise_weights;
    if (kind == DistortionKind::blur) return blur_weights;
    fail(ErrorCode::invalid_argument, "weight table has no weights for kind 'clean'");
}

void OptimalWeightTable::validate() const {
    if (experts < 2) fail(ErrorCode::invalid_argument, "weight table needs at least 2 experts");
    for (auto kind : {DistortionKind::noise, DistortionKind::blur}) {
        const auto& lv = levels(kind);
        const auto& ws = weights(kind);
        if (lv.empty() || lv.size() != ws.size())
            fail(ErrorCode::invalid_argument, "weight table grid incomplete");
        if (lv.front() != 0.0) fail(ErrorCode::invalid_argument, "weight table grid must include level 0");
        for (size_t i = 1; i < lv.size(); ++i)
            if (lv[i] <= lv[i - 1]) fail(ErrorCode::invalid_argument, "weight table levels must ascend");
        for (const auto& w : ws)
            if (static_cast<int>(w.size()) != experts || !on_simplex(w))
                fail(ErrorCode::invalid_argument, "weight table entry off the simplex");
    }
}

std::vector<double> level_grid(double max_level, int count) {
    if (count < 2) fail(ErrorCode::invalid_argument, "level grid needs at least 2 levels");
    if (max_level <= 0) fail(ErrorCode::invalid_argument, "level grid max must be positive");
    std::vector<double> levels(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) levels[static_cast<size_t>(i)] = max_level * i / (count - 1);
    return levels;
}

EnsembleOutput ensemble_outputs(const std::vector<const ExpertModel*>& experts, const Tensor& image) {
    std::vector<EnsembleOutput> out = ensemble_outputs_batch(experts, image);
    return out.front();
}

std::vector<EnsembleOutput> ensemble_outputs_batch(const std::vector<const ExpertModel*>& experts,
                                                   const Tensor& images) {
    if (experts.size() < 2) fail(ErrorCode::invalid_argument, "ensemble needs at least 2 experts");
    const int K = experts.front()->num_classes();
    for (const auto* e : experts)
        if (e->num_classes() != K)
            fail(ErrorCode::invalid_argument, "ensemble experts disagree on the number of classes");
    const int B = images.dim(0);
    std::vector<EnsembleOutput> outputs(static_cast<size_t>(B));
    for (auto& o : outputs) {
        o.experts = static_cast<int>(experts.size());
        o.classes = K;
        o.p.resize(experts.size() * static_cast<size_t>(K));
    }
    for (size_t i = 0; i < experts.size(); ++i) {
        Tensor probs = predict(*experts[i], images);
        for (int n = 0; n < B; ++n)
            for (int k = 0; k < K; ++k)
                outputs[static_cast<size_t>(n)].at(static_cast<int>(i), k) = probs.at2(n, k);
    }
    for (auto& o : outputs) o.validate();
    return outputs;
}

std::vector<double> average_ensemble(const EnsembleOutput& p) {
    p.validate();
    std::vector<double> out(static_cast<size_t>(p.classes), 0.0);
    for (int i = 0; i < p.experts; ++i)
        for (int j = 0; j < p.classes; ++j) out[static_cast<size_t>(j)] += p.at(i, j);
    for (double& v : out) v /= p.experts;
    return out;
}

int max_ensemble(const EnsembleOutput& p) {
    p.validate();
    int best_class = 0;
    double best = -1.0;
    // class-major scan: ties resolve to the lowest class, then lowest expert
    for (int j = 0; j < p.classes; ++j)
        for (int i = 0; i < p.experts; ++i)
            if (p.at(i, j) > best) {
                best = p.at(i, j);
                best_class = j;
            }
    return best_class;
}

std::vector<double> weighted_mixture(const EnsembleOutput& p, const WeightVector& w) {
    p.validate();
    if (static_cast<int>(w.size()) != p.experts)
        fail(ErrorCode::shape_mismatch, "weight vector length " + std::to_string(w.size()) + " != experts " +
                                            std::to_string(p.experts));
    if (!on_simplex(w, 1e-6)) fail(ErrorCode::invalid_argument, "weights are not on the probability simplex");
    std::vector<double> out(static_cast<size_t>(p.classes), 0.0);
    for (int i = 0; i < p.experts; ++i) {
        const double wi = w[static_cast<size_t>(i)];
        for (int j = 0; j < p.classes; ++j) out[static_cast<size_t>(j)] += wi * p.at(i, j);
    }
    return out;
}

std::vector<double> hard_mixture(const EnsembleOutput& p, const WeightVector& w) {
    p.validate();
    if (static_cast<int>(w.size()) != p.experts)
        fail(ErrorCode::shape_mismatch, "weight vector length mismatch");
    if (!on_simplex(w, 1e-6)) fail(ErrorCode::invalid_argument, "weights are not on the probability simplex");
    int best = 0;
    for (size_t i = 1; i < w.size(); ++i)
        if (w[i] > w[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return p.row(best);
}

WeightVector project_to_simplex(const WeightVector& v) {
    for (double x : v)
        if (!std::isfinite(x)) fail(ErrorCode::invalid_argument, "project_to_simplex: non-finite input");
    const size_t n = v.size();
    if (n == 0) fail(ErrorCode::invalid_argument, "project_to_simplex: empty vector");
    std::vector<double> u = v;
    std::sort(u.begin(), u.end(), std::greater<double>());
    double running = 0.0;
    double theta = 0.0;
    for (size_t j = 0; j < n; ++j) {
        running += u[j];
        const double candidate = (running - 1.0) / static_cast<double>(j + 1);
        if (u[j] - candidate > 0) theta = candidate;
    }
    WeightVector w(n);
    for (size_t i = 0; i < n; ++i) w[i] = std::max(v[i] - theta, 0.0);
    return w;
}

double mixture_cross_entropy(const std::vector<WeightSample>& samples, const WeightVector& w) {
    double obj = 0.0;
    for (const auto& s : samples) {
        double den = 0.0;
        for (int i = 0; i < s.output.experts; ++i) den += w[static_cast<size_t>(i)] * s.output.at(i, s.label);
        obj -= std::log(std::max(den, 1e-12));
    }
    return obj;
}

SolveResult solve_optimal_weights(const std::vector<WeightSample>& samples, const SolveOptions& options) {
    if (samples.empty()) fail(ErrorCode::invalid_argument, "solve_optimal_weights: no samples");
    const int n = samples.front().output.experts;
    for (const auto& s : samples) {
        s.output.validate();
        if (s.output.experts != n) fail(ErrorCode::shape_mismatch, "solve_optimal_weights: expert count varies");
        if (s.label < 0 || s.label >= s.output.classes)
            fail(ErrorCode::invalid_argument, "solve_optimal_weights: label out of range");
    }

    WeightVector w(static_cast<size_t>(n), 1.0 / n);
    double obj = mixture_cross_entropy(samples, w);

    SolveResult result;
    result.iterations = 0;
    double step = 1.0;
    for (int it = 0; it < options.max_iterations; ++it) {
        // gradient of -sum log(w . P[:, label])
        WeightVector grad(static_cast<size_t>(n), 0.0);
        for (const auto& s : samples) {
            double den = 0.0;
            for (int i = 0; i < n; ++i) den += w[static_cast<size_t>(i)] * s.output.at(i, s.label);
            den = std::max(den, 1e-12);
            for (int i = 0; i < n; ++i) grad[static_cast<size_t>(i)] -= s.output.at(i, s.label) / den;
        }

        bool improved = false;
        double new_obj = obj;
        WeightVector new_w;
        for (int attempt = 0; attempt < 60; ++attempt, step *= 0.5) {
            WeightVector candidate(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i)
                candidate[static_cast<size_t>(i)] = w[static_cast<size_t>(i)] - step * grad[static_cast<size_t>(i)];
            candidate = project_to_simplex(candidate);
            const double cand_obj = mixture_cross_entropy(samples, candidate);
            if (cand_obj < obj) {
                new_w = std::move(candidate);
                new_obj = cand_obj;
                improved = true;
                break;
            }
        }
        result.iterations = it + 1;
        if (!improved) break;  // stationary within line-search resolution
        const double gain = obj - new_obj;
        w = std::move(new_w);
        obj = new_obj;
        step *= 2.0;  // let the accepted step grow back
        if (gain < options.tolerance) break;
    }

    result.w = std::move(w);
    result.objective = obj;
    return result;
}

OptimalWeightTable build_weight_table(const std::vector<const ExpertModel*>& experts, const Dataset& validation,
                                      const std::vector<double>& noise_levels, const std::vector<double>& blur_levels,
                                      uint64_t seed) {
    if (validation.size() < 1) fail(ErrorCode::invalid_argument, "build_weight_table: empty validation set");
    OptimalWeightTable table;
    table.experts = static_cast<int>(experts.size());
    table.noise_levels = noise_levels;
    table.blur_levels = blur_levels;

    for (auto kind : {DistortionKind::noise, DistortionKind::blur}) {
        const auto& levels = kind == DistortionKind::noise ? noise_levels : blur_levels;
        auto& weights = kind == DistortionKind::noise ? table.noise_weights : table.blur_weights;
        for (size_t li = 0; li < levels.size(); ++li) {
            const uint64_t cell_seed = derive_seed(
                seed, std::string("table/") + distortion_kind_name(kind) + "/" + std::to_string(li));
            Tensor distorted = distort_all(validation.images, {kind, levels[li]}, cell_seed);
            std::vector<EnsembleOutput> outputs = ensemble_outputs_batch(experts, distorted);
            std::vector<WeightSample> samples;
            samples.reserve(outputs.size());
            for (size_t i = 0; i < outputs.size(); ++i)
                samples.push_back({std::move(outputs[i]), validation.labels[i]});
            weights.push_back(solve_optimal_weights(samples).w);
        }
    }
    table.validate();
    return table;
}

WeightVector interpolate_weights(const OptimalWeightTable& table, DistortionKind kind, double level) {
    if (kind == DistortionKind::clean) {
        // a clean image is level 0 of either grid; the table keeps them equal
        return table.noise_weights.front();
    }
    const auto& levels = table.levels(kind);
    const auto& weights = table.weights(kind);
    if (level < levels.front() - 1e-9 || level > levels.back() + 1e-9)
        fail(ErrorCode::invalid_argument, "level " + std::to_string(level) + " outside the " +
                                              distortion_kind_name(kind) + " grid range");
    level = std::clamp(level, levels.front(), levels.back());
    size_t hi = 1;
    while (hi < levels.size() - 1 && levels[hi] < level) ++hi;
    const size_t lo = hi - 1;
    const double span = levels[hi] - levels[lo];
    const double t = span > 0 ? (level - levels[lo]) / span : 0.0;
    WeightVector w(weights[lo].size());
    double sum = 0.0;
    for (size_t i = 0; i < w.size(); ++i) {
        w[i] = (1.0 - t) * weights[lo][i] + t * weights[hi][i];
        sum += w[i];
    }
    for (double& v : w) v /= sum;  // renormalize against accumulated rounding
    return w;
}

void save_weight_table(const OptimalWeightTable& table, const std::string& path) {
    table.validate();
    if (table.experts != 3)
        fail(ErrorCode::invalid_argument, "weight table CSV expects the 3-expert ensemble (clean, noise, blur)");
    std::ofstream out(path);
    if (!out) fail(ErrorCode::io, "cannot write weight table: " + path);
    out << "kind,level,w_clean,w_noise,w_blur\n";
    char line[160];
    for (auto kind : {DistortionKind::noise, DistortionKind::blur}) {
        const auto& levels = table.levels(kind);
        const auto& weights = table.weights(kind);
        for (size_t i = 0; i < levels.size(); ++i) {
            std::snprintf(line, sizeof(line), "%s,%.6f,%.9f,%.9f,%.9f\n", distortion_kind_name(kind), levels[i],
                          weights[i][0], weights[i][1], weights[i][2]);
            out << line;
        }
    }
    if (!out) fail(ErrorCode::io, "write failed: " + path);
}

OptimalWeightTable load_weight_table(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::io, "cannot open weight table: " + path);
    std::string header;
    if (!std::getline(in, header) || header != "kind,level,w_clean,w_noise,w_blur")
        fail(ErrorCode::bad_format, "bad weight table header in " + path);
    OptimalWeightTable table;
    table.experts = 3;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string kind_s, field;
        std::getline(ss, kind_s, ',');
        std::getline(ss, field, ',');
        const double level = std::stod(field);
        WeightVector w(3);
        for (int i = 0; i < 3; ++i) {
            if (!std::getline(ss, field, ',')) fail(ErrorCode::bad_format, "short weight table row in " + path);
            w[static_cast<size_t>(i)] = std::stod(field);
        }
        const DistortionKind kind = distortion_kind_from_name(kind_s);
        if (kind == DistortionKind::noise) {
            table.noise_levels.push_back(level);
            table.noise_weights.push_back(std::move(w));
        } else if (kind == DistortionKind::blur) {
            table.blur_levels.push_back(level);
            table.blur_weights.push_back(std::move(w));
        } else {
            fail(ErrorCode::bad_format, "bad distortion kind in weight table: " + kind_s);
        }
    }
    table.validate();
    return table;
}

std::vector<LayerSpec> gating_layer_specs(int n_experts) {
    if (n_experts < 2) fail(ErrorCode::invalid_argument, "gating_layer_specs: need at least 2 experts");
    return {
        conv2d("Conv1", 16, 3), relu("ReLU1"), maxpool2x2("Pool1"),
        conv2d("Conv2", 32, 3), relu("ReLU2"), maxpool2x2("Pool2"),
        conv2d("Conv3", 64, 3), relu("ReLU3"), maxpool2x2("Pool3"),
        conv2d("Conv4", 16, 1), relu("ReLU4"),
        conv2d("Conv5", n_experts, 1),
        global_avg_pool("GAP"),
        softmax("Softmax"),
    };
}

Network gating_architecture(int n_experts, const Shape& input_chw, uint64_t seed) {
    Network net = Network::build(gating_layer_specs(n_experts), input_chw, n_experts, seed);
    // The final projection starts at zero so the gate opens as the uniform
    // mixture. A saturated softmax head would kill the regression gradient,
    // which reaches the logits through the softmax Jacobian.
    net.params("Conv5").weight.fill(0.0f);
    net.params("Conv5").bias.fill(0.0f);
    return net;
}

int64_t gating_param_count(int n_experts, const Shape& input_chw) {
    std::vector<LayerSpec> specs = gating_layer_specs(n_experts);
    resolve_specs(specs, input_chw);
    int64_t n = 0;
    for (const auto& l : specs)
        if (l.kind == LayerKind::conv2d)
            n += static_cast<int64_t>(l.filters) * l.in_channels * l.kernel * l.kernel + l.filters;
    return n;
}

namespace {

Tensor gather_images(const Dataset& ds, const std::vector<int>& indices) {
    const int C = ds.channels(), H = ds.height(), W = ds.width();
    const int64_t img_len = static_cast<int64_t>(C) * H * W;
    Tensor out({static_cast<int>(indices.size()), C, H, W});
    for (size_t k = 0; k < indices.size(); ++k)
        std::copy(ds.images.data() + indices[k] * img_len, ds.images.data() + (indices[k] + 1) * img_len,
                  out.data() + static_cast<int64_t>(k) * img_len);
    return out;
}

Tensor targets_for_specs(const OptimalWeightTable& table, const std::vector<DistortionSpec>& specs) {
    const int n = table.experts;
    Tensor targets({static_cast<int>(specs.size()), n});
    for (size_t i = 0; i < specs.size(); ++i) {
        WeightVector w = interpolate_weights(table, specs[i].kind, specs[i].level);
        for (int k = 0; k < n; ++k) targets.at2(static_cast<int>(i), k) = static_cast<float>(w[static_cast<size_t>(k)]);
    }
    return targets;
}

// Eq. 5 value and output-gradient for one batch: mean over samples of
// ||g - w||^2 + lambda * ||g||^2.
std::pair<double, Tensor> gating_loss(const Tensor& g, const Tensor& targets, double lambda) {
    const int B = g.dim(0), N = g.dim(1);
    Tensor dout(g.shape());
    double loss = 0;
    const float inv = 1.0f / static_cast<float>(B);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < N; ++k) {
            const double diff = g.at2(b, k) - targets.at2(b, k);
            loss += diff * diff + lambda * g.at2(b, k) * g.at2(b, k);
            dout.at2(b, k) = static_cast<float>(2.0 * diff + 2.0 * lambda * g.at2(b, k)) * inv;
        }
    return {loss / B, std::move(dout)};
}

}  // namespace

GatingModel train_gating(const Splits& splits, const OptimalWeightTable& table, const GatingTrainConfig& config) {
    table.validate();
    if (config.lambda < 0) fail(ErrorCode::invalid_argument, "train_gating: lambda must be >= 0");
    splits.train.validate();
    splits.val.validate();
    if (table.noise_levels.back() < config.policy.noise_max - 1e-9 ||
        table.blur_levels.back() < config.policy.blur_max - 1e-9)
        fail(ErrorCode::invalid_argument, "train_gating: table grids do not cover the sampling policy ranges");

    const std::vector<float> mean = compute_mean(splits.train);
    const Shape input{splits.train.channels(), splits.train.height(), splits.train.width()};
    Network init = gating_architecture(table.experts, input, derive_seed(config.optimizer.seed, "gate-init"));

    auto [val_images, val_specs] =
        distort_batch(splits.val.images, config.policy, derive_seed(config.optimizer.seed, "gate-val-distort"));
    val_images = preprocess(val_images, mean);
    const Tensor val_targets = targets_for_specs(table, val_specs);

    const Dataset& train = splits.train;
    auto step = [&](const Network& net, const std::vector<int>& indices, uint64_t batch_seed)
        -> std::pair<double, Gradients> {
        Tensor images = gather_images(train, indices);
        auto [distorted, specs] = distort_batch(images, config.policy, batch_seed);
        distorted = preprocess(distorted, mean);
        ActivationTrace trace = forward(net, distorted);
        auto [loss, dout] = gating_loss(trace.output(), targets_for_specs(table, specs), config.lambda);
        return {loss, backward_from_output(net, trace, dout)};
    };

    auto val_loss = [&](const Network& net) {
        return gating_loss(forward_probs(net, val_images), val_targets, config.lambda).first;
    };

    TrainResult result = train_loop(std::move(init), train.size(), config.optimizer, {}, step, val_loss);

    GatingModel gate;
    gate.network = std::move(result.net);
    gate.mean = mean;
    gate.lambda = config.lambda;
    gate.seed = config.optimizer.seed;
    gate.epochs_trained = result.history.epochs_run;
    return gate;
}

WeightVector gate_weights(const GatingModel& gate, const Tensor& image) {
    Tensor probs = gate_weights_batch(gate, image);
    WeightVector w(static_cast<size_t>(probs.dim(1)));
    for (int k = 0; k < probs.dim(1); ++k) w[static_cast<size_t>(k)] = probs.at2(0, k);
    return w;
}

Tensor gate_weights_batch(const GatingModel& gate, const Tensor& images) {
    return forward_probs(gate.network, preprocess(images, gate.mean));
}

}  // namespace qrn
