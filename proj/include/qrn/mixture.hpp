#pragma once

#include <string>
#include <vector>

#include "qrn/dataset.hpp"
#include "qrn/distortions.hpp"
#include "qrn/experts.hpp"
#include "qrn/network.hpp"
#include "qrn/training.hpp"

namespace qrn {

// Stacked softmax outputs of the ensemble members for one input: row i is
// expert i's class distribution, experts in fixed order (clean, noise, blur).
struct EnsembleOutput {
    int experts = 0;
    int classes = 0;
    std::vector<double> p;  // row-major experts x classes

    double at(int expert, int cls) const { return p[static_cast<size_t>(expert) * classes + cls]; }
    double& at(int expert, int cls) { return p[static_cast<size_t>(expert) * classes + cls]; }
    std::vector<double> row(int expert) const {
        return {p.begin() + static_cast<long>(expert) * classes, p.begin() + static_cast<long>(expert + 1) * classes};
    }
    void validate() const;
};

using WeightVector = std::vector<double>;

// True when nonnegative and summing to 1 within tol.
bool on_simplex(const WeightVector& w, double tol = 1e-6);

struct WeightSample {
    EnsembleOutput output;
    int label = 0;
};

// Per-(kind, level) optimal simplex weights over the expert ensemble, on a
// fixed ascending level grid per distortion kind (level 0 included).
struct OptimalWeightTable {
    std::vector<double> noise_levels;
    std::vector<double> blur_levels;
    std::vector<WeightVector> noise_weights;
    std::vector<WeightVector> blur_weights;
    int experts = 0;

    const std::vector<double>& levels(DistortionKind kind) const;
    const std::vector<WeightVector>& weights(DistortionKind kind) const;
    void validate() const;
};

// Uniform grid of `count` levels from 0 to max inclusive.
std::vector<double> level_grid(double max_level, int count);

// ---- combiners (Eq. 1-3 plus the max and hard-mix baselines) ----

EnsembleOutput ensemble_outputs(const std::vector<const ExpertModel*>& experts, const Tensor& image);
// batch variant: one EnsembleOutput per image
std::vector<EnsembleOutput> ensemble_outputs_batch(const std::vector<const ExpertModel*>& experts,
                                                   const Tensor& images);

std::vector<double> average_ensemble(const EnsembleOutput& p);
// argmax over all experts x classes entries; ties go to the lowest class
// index, then the lowest expert index
int max_ensemble(const EnsembleOutput& p);
std::vector<double> weighted_mixture(const EnsembleOutput& p, const WeightVector& w);
// the row picked by argmax(w); ties go to the lowest expert index
std::vector<double> hard_mixture(const EnsembleOutput& p, const WeightVector& w);

// Euclidean projection onto the probability simplex (sorting algorithm).
WeightVector project_to_simplex(const WeightVector& v);

struct SolveOptions {
    double tolerance = 1e-8;
    int max_iterations = 10000;
};

struct SolveResult {
    WeightVector w;
    double objective = 0;
    int iterations = 0;
};

// Minimizes the categorical cross-entropy of the weighted mixture over the
// probability simplex by projected gradient descent with backtracking,
// starting from uniform weights. The objective never increases across
// iterations; logs are floored at 1e-12.
SolveResult solve_optimal_weights(const std::vector<WeightSample>& samples, const SolveOptions& options = {});

double mixture_cross_entropy(const std::vector<WeightSample>& samples, const WeightVector& w);

// Distorts the validation images to every grid level of every kind (fixed
// per-cell seed) and solves for the optimal weights of each cell.
OptimalWeightTable build_weight_table(const std::vector<const ExpertModel*>& experts, const Dataset& validation,
                                      const std::vector<double>& noise_levels, const std::vector<double>& blur_levels,
                                      uint64_t seed);

// Target weights for a continuous level: linear interpolation between the
// two adjacent grid entries, renormalized to the simplex. Levels outside the
// grid range are an error.
WeightVector interpolate_weights(const OptimalWeightTable& table, DistortionKind kind, double level);

void save_weight_table(const OptimalWeightTable& table, const std::string& path);
OptimalWeightTable load_weight_table(const std::string& path);

// ---- gating network (Table 1 analog, scaled to the desk input) ----

struct GatingModel {
    Network network;
    std::vector<float> mean;
    double lambda = 0.01;
    uint64_t seed = 0;
    int epochs_trained = 0;
};

std::vector<LayerSpec> gating_layer_specs(int n_experts);
Network gating_architecture(int n_experts, const Shape& input_chw = {1, 32, 32}, uint64_t seed = 0);
int64_t gating_param_count(int n_experts, const Shape& input_chw = {1, 32, 32});

struct GatingTrainConfig {
    double lambda = 0.01;
    BatchPolicy policy = BatchPolicy::half_clean_quarter_each();
    TrainConfig optimizer;  // uniform learning rate: base_lr == last_lr

    GatingTrainConfig() {
        optimizer.base_lr = 0.01;
        optimizer.last_lr = 0.01;
    }
};

// Trains the gate to regress the table weights of each image's distortion
// (Eq. 5 objective: squared error plus lambda * ||g||^2), early-stopping on
// the same loss over a fixed distorted validation split.
GatingModel train_gating(const Splits& splits, const OptimalWeightTable& table, const GatingTrainConfig& config);

WeightVector gate_weights(const GatingModel& gate, const Tensor& image);
// batch variant: returns (B, n) tensor of weights
Tensor gate_weights_batch(const GatingModel& gate, const Tensor& images);

}  // namespace qrn
