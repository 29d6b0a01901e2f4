#include "qrn/training.hpp"

#include <cmath>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"

namespace qrn {

void TrainConfig::validate() const {
    if (max_epochs < 1) fail(ErrorCode::invalid_argument, "max_epochs must be >= 1");
    if (patience < 1) fail(ErrorCode::invalid_argument, "patience must be >= 1");
    if (batch_size < 4) fail(ErrorCode::invalid_argument, "batch_size must be >= 4");
    if (base_lr <= 0 || last_lr <= 0) fail(ErrorCode::invalid_argument, "learning rates must be positive");
    if (momentum < 0 || momentum >= 1) fail(ErrorCode::invalid_argument, "momentum must be in [0, 1)");
}

TrainResult train_loop(Network init, int num_samples, const TrainConfig& config,
                       const std::set<std::string>& frozen, const BatchStepFn& step, const ValLossFn& val_loss) {
    config.validate();
    if (num_samples < 1) fail(ErrorCode::invalid_argument, "train_loop: no training samples");

    Network net = std::move(init);
    OptimizerState opt = make_optimizer(net, config.base_lr, config.last_lr, config.momentum);

    TrainResult result;
    result.net = net;
    double best_val = std::numeric_limits<double>::infinity();
    int bad_epochs = 0;

    std::vector<int> order(static_cast<size_t>(num_samples));
    for (int i = 0; i < num_samples; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(config.seed, "shuffle/" + std::to_string(epoch)));
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double epoch_loss = 0;
        int batches = 0;
        for (int begin = 0; begin < num_samples; begin += config.batch_size, ++batches) {
            const int end = std::min(begin + config.batch_size, num_samples);
            std::vector<int> batch(order.begin() + begin, order.begin() + end);
            const uint64_t batch_seed =
                derive_seed(config.seed, "batch/" + std::to_string(epoch) + "/" + std::to_string(begin));
            auto [loss, grads] = step(net, batch, batch_seed);
            if (!std::isfinite(loss))
                fail(ErrorCode::diverged, "training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                              std::to_string(batches) + " (loss not finite)");
            epoch_loss += loss;
            sgd_step(net, grads, opt, frozen);
        }
        result.history.train_loss.push_back(epoch_loss / batches);

        const double v = val_loss(net);
        if (!std::isfinite(v))
            fail(ErrorCode::diverged, "validation loss not finite at epoch " + std::to_string(epoch));
        result.history.val_loss.push_back(v);
        result.history.epochs_run = epoch + 1;

        if (v < best_val) {
            best_val = v;
            result.net = net;
            result.history.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            ++bad_epochs;
            if (bad_epochs >= config.patience) break;
        }
    }
    return result;
}

}  // namespace qrn
