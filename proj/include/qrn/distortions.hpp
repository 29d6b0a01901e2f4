#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qrn/tensor.hpp"

namespace qrn {

enum class DistortionKind { clean, noise, blur };

const char* distortion_kind_name(DistortionKind k);
DistortionKind distortion_kind_from_name(const std::string& s);

// A distortion type with its level: sigma_n in intensity units (0-255 scale)
// for noise, sigma_b in pixels for blur. Level 0 is the identity.
struct DistortionSpec {
    DistortionKind kind = DistortionKind::clean;
    double level = 0.0;
};

// Mini-batch composition: fraction of each kind, plus the uniform level
// ranges levels are drawn from. Non-clean kinds get floor(fraction * B)
// samples; the remainder stays clean.
struct BatchPolicy {
    double clean_fraction = 1.0;
    double noise_fraction = 0.0;
    double blur_fraction = 0.0;
    double noise_max = 100.0;
    double blur_max = 4.0;

    static BatchPolicy all_clean() { return {}; }
    static BatchPolicy half_noise(double noise_max = 100.0) { return {0.5, 0.5, 0.0, noise_max, 4.0}; }
    static BatchPolicy half_blur(double blur_max = 4.0) { return {0.5, 0.0, 0.5, 100.0, blur_max}; }
    static BatchPolicy half_clean_quarter_each(double noise_max = 100.0, double blur_max = 4.0) {
        return {0.5, 0.25, 0.25, noise_max, blur_max};
    }
};

// Discretized 1-D Gaussian, truncated at 3 sigma and renormalized to sum 1.
// Length 2*ceil(3*sigma) + 1; [1.0] when sigma == 0.
std::vector<double> gaussian_blur_kernel(double sigma);

// Separable Gaussian blur (x then y) per channel with edge-replicate
// boundary handling. Image stays in the [0, 255] intensity domain.
Tensor apply_blur(const Tensor& image, double sigma);

// I.i.d. zero-mean Gaussian noise per pixel per channel, clamped to
// [0, 255]. Deterministic for a given seed.
Tensor apply_noise(const Tensor& image, double sigma, uint64_t seed);

// Applies the policy to a batch (N, C, H, W): the clean block comes first,
// then the noise block, then the blur block, each distorted sample with an
// independently drawn level. Returns the distorted batch and the spec
// actually applied to each sample.
std::pair<Tensor, std::vector<DistortionSpec>> distort_batch(const Tensor& batch, const BatchPolicy& policy,
                                                             uint64_t seed);

// Distorts every image in the batch with the same fixed spec (used by the
// weight-table and evaluation grids).
Tensor distort_all(const Tensor& batch, const DistortionSpec& spec, uint64_t seed);

}  // namespace qrn
