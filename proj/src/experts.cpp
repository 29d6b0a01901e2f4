#include "qrn/experts.hpp"

#include <algorithm>
#include <cmath>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"

namespace qrn {

const char* specialization_name(Specialization s) {
    switch (s) {
        case Specialization::clean: return "clean";
        case Specialization::noise: return "noise";
        case Specialization::blur: return "blur";
        case Specialization::all: return "all";
    }
    return "unknown";
}

Specialization specialization_from_name(const std::string& s) {
    if (s == "clean") return Specialization::clean;
    if (s == "noise") return Specialization::noise;
    if (s == "blur") return Specialization::blur;
    if (s == "all") return Specialization::all;
    fail(ErrorCode::invalid_argument, "unknown specialization '" + s + "'");
}

BatchPolicy policy_for(Specialization s, double noise_max, double blur_max) {
    switch (s) {
        case Specialization::clean: return BatchPolicy::all_clean();
        case Specialization::noise: return BatchPolicy::half_noise(noise_max);
        case Specialization::blur: return BatchPolicy::half_blur(blur_max);
        case Specialization::all: return BatchPolicy::half_clean_quarter_each(noise_max, blur_max);
    }
    fail(ErrorCode::internal, "bad specialization");
}

std::vector<LayerSpec> expert_layer_specs(int num_classes) {
    if (num_classes < 2) fail(ErrorCode::invalid_argument, "expert_layer_specs: num_classes must be >= 2");
    return {
        conv2d("Conv1", 16, 3), relu("ReLU1"), maxpool2x2("Pool1"),
        conv2d("Conv2", 32, 3), relu("ReLU2"), maxpool2x2("Pool2"),
        conv2d("Conv3", 64, 3), relu("ReLU3"), maxpool2x2("Pool3"),
        dense("FC6", 128),      relu("ReLU6"),
        dense("FC7", 64),       relu("ReLU7"),
        dense("FC8", num_classes),
        softmax("Softmax"),
    };
}

Network expert_architecture(int num_classes, const Shape& input_chw, uint64_t seed) {
    return Network::build(expert_layer_specs(num_classes), input_chw, num_classes, seed);
}

int64_t expert_param_count(int num_classes, const Shape& input_chw) {
    std::vector<LayerSpec> specs = expert_layer_specs(num_classes);
    resolve_specs(specs, input_chw);
    int64_t n = 0;
    for (const auto& l : specs) {
        if (l.kind == LayerKind::conv2d)
            n += static_cast<int64_t>(l.filters) * l.in_channels * l.kernel * l.kernel + l.filters;
        else if (l.kind == LayerKind::dense)
            n += static_cast<int64_t>(l.units) * l.in_dim + l.units;
    }
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

}  // namespace

ExpertModel train_expert(const Splits& splits, const BatchPolicy& policy, const TrainConfig& config,
                         const Network& init, Specialization specialization) {
    splits.train.validate();
    splits.val.validate();
    if (splits.train.channels() != init.input_shape()[0] || splits.train.height() != init.input_shape()[1] ||
        splits.train.width() != init.input_shape()[2])
        fail(ErrorCode::shape_mismatch, "train_expert: dataset does not match network input shape");

    const std::vector<float> mean = compute_mean(splits.train);

    // Validation images are distorted once under the training policy, so the
    // early-stopping signal is comparable across epochs.
    Tensor val_images =
        distort_batch(splits.val.images, policy, derive_seed(config.seed, "val-distort")).first;
    val_images = preprocess(val_images, mean);
    const Tensor val_targets = one_hot<float>(splits.val.labels, splits.train.num_classes);

    const Dataset& train = splits.train;
    auto step = [&](const Network& net, const std::vector<int>& indices, uint64_t batch_seed)
        -> std::pair<double, Gradients> {
        Tensor images = gather_images(train, indices);
        images = distort_batch(images, policy, batch_seed).first;
        images = preprocess(images, mean);
        std::vector<int> labels;
        labels.reserve(indices.size());
        for (int i : indices) labels.push_back(train.labels[static_cast<size_t>(i)]);
        ActivationTrace trace = forward(net, images);
        const Tensor targets = one_hot<float>(labels, net.num_classes());
        double loss = cross_entropy_loss(trace.output(), targets);
        return {loss, backward(net, trace, targets)};
    };

    auto val_loss = [&](const Network& net) {
        return cross_entropy_loss(forward_probs(net, val_images), val_targets);
    };

    TrainResult result = train_loop(init, train.size(), config, {}, step, val_loss);

    ExpertModel model;
    model.network = std::move(result.net);
    model.specialization = specialization;
    model.mean = mean;
    model.policy = policy;
    model.seed = config.seed;
    model.epochs_trained = result.history.epochs_run;
    return model;
}

Tensor predict(const ExpertModel& model, const Tensor& images) {
    return forward_probs(model.network, preprocess(images, model.mean));
}

std::vector<int> predict_labels(const ExpertModel& model, const Tensor& images) {
    Tensor probs = predict(model, images);
    const int B = probs.dim(0), K = probs.dim(1);
    std::vector<int> labels(static_cast<size_t>(B));
    for (int n = 0; n < B; ++n) {
        int best = 0;
        for (int k = 1; k < K; ++k)
            if (probs.at2(n, k) > probs.at2(n, best)) best = k;
        labels[static_cast<size_t>(n)] = best;
    }
    return labels;
}

double accuracy(const ExpertModel& model, const Dataset& ds) {
    std::vector<int> pred = predict_labels(model, ds.images);
    int correct = 0;
    for (size_t i = 0; i < pred.size(); ++i) correct += (pred[i] == ds.labels[i]);
    return static_cast<double>(correct) / pred.size();
}

namespace {

// Mean activation of one unit of a layer output: channel mean for spatial
// activations, single element for flat ones. Returns the value and fills
// dact with its gradient.
double unit_activation(const TensorT<float>& act, int unit, Tensor* dact) {
    if (dact) *dact = Tensor(act.shape());
    if (act.rank() == 4) {
        const int C = act.dim(1), H = act.dim(2), W = act.dim(3);
        if (unit < 0 || unit >= C) fail(ErrorCode::invalid_argument, "unit index out of range");
        double s = 0;
        const float* plane = &act.at4(0, unit, 0, 0);
        for (int i = 0; i < H * W; ++i) s += plane[i];
        if (dact) {
            float* g = &dact->at4(0, unit, 0, 0);
            const float inv = 1.0f / static_cast<float>(H * W);
            for (int i = 0; i < H * W; ++i) g[i] = inv;
        }
        return s / (H * W);
    }
    if (unit < 0 || unit >= static_cast<int>(act.size()))
        fail(ErrorCode::invalid_argument, "unit index out of range");
    if (dact) (*dact)[unit] = 1.0f;
    return act[unit];
}

}  // namespace

NeuronVisualization visualize_neuron(const ExpertModel& model, const std::string& layer_name, int unit, int steps,
                                     double step_size, uint64_t seed) {
    const Network& net = model.network;
    const int layer_index = net.index_of(layer_name);
    if (layer_index < 0) fail(ErrorCode::invalid_argument, "visualize_neuron: no layer named '" + layer_name + "'");
    if (steps < 1 || step_size <= 0) fail(ErrorCode::invalid_argument, "visualize_neuron: bad steps/step size");

    const Shape& in = net.input_shape();
    Tensor image({1, in[0], in[1], in[2]});
    Rng rng(derive_seed(seed, "visualize"));
    for (int64_t i = 0; i < image.size(); ++i) image[i] = static_cast<float>(rng.uniform(0.0, 255.0));

    constexpr double kL2 = 1e-4;  // pull toward the dataset mean, per pixel

    auto evaluate = [&](const Tensor& img, Tensor* dact_out, ActivationTrace* trace_out) {
        ActivationTrace trace = forward(net, preprocess(img, model.mean));
        double a = unit_activation(trace.acts[static_cast<size_t>(layer_index) + 1], unit, dact_out);
        if (trace_out) *trace_out = std::move(trace);
        return a;
    };

    NeuronVisualization out;
    Tensor dact;
    ActivationTrace trace;
    double current = evaluate(image, &dact, &trace);
    const double initial = current;
    out.trajectory.push_back(current);

    for (int s = 0; s < steps; ++s) {
        Tensor grad = backward_to_input(net, trace, layer_index, dact);
        // L2 pull plus normalization to intensity scale
        const int64_t plane = static_cast<int64_t>(in[1]) * in[2];
        float gmax = 0;
        for (int64_t i = 0; i < grad.size(); ++i) {
            const float m = model.mean[static_cast<size_t>((i / plane) % in[0])];
            grad[i] -= static_cast<float>(2.0 * kL2 / grad.size()) * (image[i] - m);
            gmax = std::max(gmax, std::abs(grad[i]));
        }
        if (gmax == 0.0f) break;  // nothing to ascend

        bool accepted = false;
        double step = step_size;
        for (int attempt = 0; attempt < 8 && !accepted; ++attempt, step *= 0.5) {
            Tensor candidate(image.shape());
            for (int64_t i = 0; i < image.size(); ++i)
                candidate[i] = std::clamp(image[i] + static_cast<float>(step) * grad[i] / gmax, 0.0f, 255.0f);
            Tensor cand_dact;
            ActivationTrace cand_trace;
            double a = evaluate(candidate, &cand_dact, &cand_trace);
            if (a >= current) {
                image = std::move(candidate);
                current = a;
                dact = std::move(cand_dact);
                trace = std::move(cand_trace);
                accepted = true;
            }
        }
        if (!accepted) break;  // local plateau
        out.trajectory.push_back(current);
    }

    out.image = std::move(image);
    out.turned_off = (current <= initial + 1e-6);
    return out;
}

}  // namespace qrn
