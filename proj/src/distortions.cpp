#include "qrn/distortions.hpp"

#include <algorithm>
#include <cmath>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"

namespace qrn {

const char* distortion_kind_name(DistortionKind k) {
    switch (k) {
        case DistortionKind::clean: return "clean";
        case DistortionKind::noise: return "noise";
        case DistortionKind::blur: return "blur";
    }
    return "unknown";
}

DistortionKind distortion_kind_from_name(const std::string& s) {
    if (s == "clean") return DistortionKind::clean;
    if (s == "noise") return DistortionKind::noise;
    if (s == "blur") return DistortionKind::blur;
    fail(ErrorCode::invalid_argument, "unknown distortion kind '" + s + "'");
}

std::vector<double> gaussian_blur_kernel(double sigma) {
    if (sigma < 0.0) fail(ErrorCode::invalid_argument, "gaussian_blur_kernel: negative sigma");
    if (sigma == 0.0) return {1.0};
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
        k[i + radius] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

namespace {

// 1-D convolution along the last index of a (len, stride)-strided line with
// edge replication.
void convolve_line(const float* src, float* dst, int len, int stride, const std::vector<double>& kernel) {
    const int radius = static_cast<int>(kernel.size() / 2);
    for (int i = 0; i < len; ++i) {
        double acc = 0.0;
        for (int t = -radius; t <= radius; ++t) {
            int j = std::clamp(i + t, 0, len - 1);
            acc += kernel[t + radius] * src[j * stride];
        }
        dst[i * stride] = static_cast<float>(acc);
    }
}

}  // namespace

Tensor apply_blur(const Tensor& image, double sigma) {
    const auto kernel = gaussian_blur_kernel(sigma);
    if (kernel.size() == 1) return image;
    if (image.rank() != 4) fail(ErrorCode::shape_mismatch, "apply_blur: expected (N, C, H, W) tensor");
    const int N = image.dim(0), C = image.dim(1), H = image.dim(2), W = image.dim(3);
    Tensor tmp(image.shape());
    Tensor out(image.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* plane = &image.at4(n, c, 0, 0);
            float* tplane = &tmp.at4(n, c, 0, 0);
            float* oplane = &out.at4(n, c, 0, 0);
            for (int i = 0; i < H; ++i)  // along x (rows are contiguous)
                convolve_line(plane + i * W, tplane + i * W, W, 1, kernel);
            for (int j = 0; j < W; ++j)  // along y
                convolve_line(tplane + j, oplane + j, H, W, kernel);
        }
    return out;
}

Tensor apply_noise(const Tensor& image, double sigma, uint64_t seed) {
    if (sigma < 0.0) fail(ErrorCode::invalid_argument, "apply_noise: negative sigma");
    if (sigma == 0.0) return image;
    Tensor out(image.shape());
    Rng rng(seed);
    for (int64_t i = 0; i < image.size(); ++i) {
        double v = image[i] + rng.normal(0.0, sigma);
        out[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

Tensor distort_all(const Tensor& batch, const DistortionSpec& spec, uint64_t seed) {
    switch (spec.kind) {
        case DistortionKind::clean: return batch;
        case DistortionKind::blur: return apply_blur(batch, spec.level);
        case DistortionKind::noise: return apply_noise(batch, spec.level, seed);
    }
    fail(ErrorCode::internal, "distort_all: bad kind");
}

std::pair<Tensor, std::vector<DistortionSpec>> distort_batch(const Tensor& batch, const BatchPolicy& policy,
                                                             uint64_t seed) {
    if (batch.rank() != 4) fail(ErrorCode::shape_mismatch, "distort_batch: expected (N, C, H, W) tensor");
    const double fsum = policy.clean_fraction + policy.noise_fraction + policy.blur_fraction;
    if (std::abs(fsum - 1.0) > 1e-9)
        fail(ErrorCode::invalid_argument, "distort_batch: policy fractions sum to " + std::to_string(fsum));
    if (policy.clean_fraction < 0 || policy.noise_fraction < 0 || policy.blur_fraction < 0)
        fail(ErrorCode::invalid_argument, "distort_batch: negative policy fraction");
    const int B = batch.dim(0);
    const int n_noise = static_cast<int>(std::floor(policy.noise_fraction * B));
    const int n_blur = static_cast<int>(std::floor(policy.blur_fraction * B));
    const int n_clean = B - n_noise - n_blur;

    Rng rng(seed);
    std::vector<DistortionSpec> specs(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) {
        if (i < n_clean)
            specs[i] = {DistortionKind::clean, 0.0};
        else if (i < n_clean + n_noise)
            specs[i] = {DistortionKind::noise, rng.uniform(0.0, policy.noise_max)};
        else
            specs[i] = {DistortionKind::blur, rng.uniform(0.0, policy.blur_max)};
    }

    const int C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    const int64_t img_len = static_cast<int64_t>(C) * H * W;
    Tensor out = batch;
    for (int i = 0; i < B; ++i) {
        if (specs[i].kind == DistortionKind::clean) continue;
        Tensor img({1, C, H, W},
                   std::vector<float>(batch.data() + i * img_len, batch.data() + (i + 1) * img_len));
        Tensor d = distort_all(img, specs[i], derive_seed(seed, "sample/" + std::to_string(i)));
        std::copy(d.data(), d.data() + img_len, out.data() + i * img_len);
    }
    return {std::move(out), std::move(specs)};
}

}  // namespace qrn
