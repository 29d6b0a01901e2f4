#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qrn/tensor.hpp"

namespace qrn {

// Images are (N, C, H, W) intensities on the 0-255 scale; labels are class
// indices in [0, num_classes).
struct Dataset {
    Tensor images;
    std::vector<int> labels;
    int num_classes = 0;
    std::vector<std::string> class_names;

    int size() const { return images.empty() ? 0 : images.dim(0); }
    int channels() const { return images.dim(1); }
    int height() const { return images.dim(2); }
    int width() const { return images.dim(3); }

    Dataset subset(const std::vector<int>& indices) const;
    Tensor image(int i) const;  // (1, C, H, W) copy
    void validate() const;
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    uint64_t seed = 0;
};

struct Splits {
    Dataset train;
    Dataset val;
    Dataset test;
};

// IDX binary pair per the MNIST convention (big-endian, magic 0x00000803 for
// images and 0x00000801 for labels).
Dataset load_idx(const std::string& images_path, const std::string& labels_path);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

// Deterministic grayscale dataset of oriented soft-edged stripe patterns,
// one orientation band per class, with random phase / period / amplitude
// jitter and light pixel texture. Intensities are whole numbers so an IDX
// round trip is bit-exact.
Dataset synth_dataset(int num_classes, int per_class, int size, uint64_t seed);

// Stratified split, deterministic per seed; the three parts are disjoint.
Splits split(const Dataset& ds, const SplitSpec& spec);

// Per-channel mean over a dataset's images.
std::vector<float> compute_mean(const Dataset& ds);

// batch - mean, per channel. No rescaling.
Tensor preprocess(const Tensor& batch, const std::vector<float>& mean);

}  // namespace qrn
