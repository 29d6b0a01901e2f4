#pragma once

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "qrn/network.hpp"

namespace qrn {

struct TrainConfig {
    int max_epochs = 30;
    int patience = 3;  // epochs without validation improvement before stopping
    int batch_size = 32;
    double base_lr = 0.001;
    double last_lr = 0.01;  // final parameterized layer
    double momentum = 0.9;
    uint64_t seed = 0;

    void validate() const;
};

struct TrainHistory {
    std::vector<double> train_loss;  // mean batch loss per epoch
    std::vector<double> val_loss;    // per epoch
    int best_epoch = -1;             // index into val_loss
    int epochs_run = 0;
};

struct TrainResult {
    Network net;  // parameters at the best validation epoch
    TrainHistory history;
};

// One mini-batch: compute the loss and gradients for the given sample
// indices. batch_seed is unique per (epoch, batch) and drives any random
// distortion inside the step.
using BatchStepFn =
    std::function<std::pair<double, Gradients>(const Network&, const std::vector<int>& sample_indices,
                                               uint64_t batch_seed)>;
using ValLossFn = std::function<double(const Network&)>;

// SGD-with-momentum loop with per-epoch shuffling and early stopping on the
// validation loss. Returns the checkpoint with the lowest validation loss
// among evaluated epochs. Throws ErrorCode::diverged if a batch loss goes
// non-finite, identifying the step.
TrainResult train_loop(Network init, int num_samples, const TrainConfig& config,
                       const std::set<std::string>& frozen, const BatchStepFn& step, const ValLossFn& val_loss);

}  // namespace qrn
