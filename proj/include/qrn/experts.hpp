#pragma once

#include <string>
#include <vector>

#include "qrn/dataset.hpp"
#include "qrn/distortions.hpp"
#include "qrn/network.hpp"
#include "qrn/training.hpp"

namespace qrn {

enum class Specialization { clean, noise, blur, all };

const char* specialization_name(Specialization s);
Specialization specialization_from_name(const std::string& s);
BatchPolicy policy_for(Specialization s, double noise_max, double blur_max);

// A trained classifier network together with the preprocessing mean and the
// training provenance it was produced under.
struct ExpertModel {
    Network network;
    Specialization specialization = Specialization::clean;
    std::vector<float> mean;  // per-channel, subtracted before the forward pass
    BatchPolicy policy;
    uint64_t seed = 0;
    int epochs_trained = 0;

    int num_classes() const { return network.num_classes(); }
};

// Fixed named-layer CNN:
//   Conv1 (16 3x3) - ReLU - Pool - Conv2 (32 3x3) - ReLU - Pool -
//   Conv3 (64 3x3) - ReLU - Pool - FC6 (128) - ReLU - FC7 (64) - ReLU -
//   FC8 (num_classes) - Softmax
// The Conv/FC names double as tree branch points.
std::vector<LayerSpec> expert_layer_specs(int num_classes);
Network expert_architecture(int num_classes, const Shape& input_chw = {1, 32, 32}, uint64_t seed = 0);

// Closed-form parameter count of the expert architecture.
int64_t expert_param_count(int num_classes, const Shape& input_chw = {1, 32, 32});

// Trains with on-line mini-batch distortion per the policy, early-stopping on
// the loss over a fixed policy-distorted copy of the validation split, and
// returns the best-validation checkpoint.
ExpertModel train_expert(const Splits& splits, const BatchPolicy& policy, const TrainConfig& config,
                         const Network& init, Specialization specialization);

// Softmax probabilities for raw [0, 255] images (the model's stored mean is
// subtracted internally).
Tensor predict(const ExpertModel& model, const Tensor& images);

// argmax with ties going to the lowest class index
std::vector<int> predict_labels(const ExpertModel& model, const Tensor& images);
double accuracy(const ExpertModel& model, const Dataset& ds);

struct NeuronVisualization {
    Tensor image;                    // (1, C, H, W), intensities in [0, 255]
    std::vector<double> trajectory;  // unit activation after each accepted step
    bool turned_off = false;         // ascent could not move the activation
};

// Gradient ascent on the input image to maximize the mean activation of one
// unit (channel for spatial layers, element for flat ones). The image stays
// clamped to [0, 255]; the gradient carries a small L2 pull toward the mean.
NeuronVisualization visualize_neuron(const ExpertModel& model, const std::string& layer_name, int unit, int steps,
                                     double step_size, uint64_t seed);

}  // namespace qrn
