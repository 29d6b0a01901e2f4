#include "qrn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"

namespace qrn {

void Dataset::validate() const {
    if (size() < 1) fail(ErrorCode::invalid_argument, "dataset is empty");
    if (static_cast<int>(labels.size()) != size())
        fail(ErrorCode::invalid_argument, "dataset has " + std::to_string(size()) + " images but " +
                                              std::to_string(labels.size()) + " labels");
    if (num_classes < 2) fail(ErrorCode::invalid_argument, "dataset needs at least 2 classes");
    for (int l : labels)
        if (l < 0 || l >= num_classes)
            fail(ErrorCode::invalid_argument, "label " + std::to_string(l) + " out of range");
    for (int64_t i = 0; i < images.size(); ++i)
        if (images[i] < 0.0f || images[i] > 255.0f)
            fail(ErrorCode::invalid_argument, "image intensity outside [0, 255]");
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
    const int C = channels(), H = height(), W = width();
    const int64_t img_len = static_cast<int64_t>(C) * H * W;
    Dataset out;
    out.num_classes = num_classes;
    out.class_names = class_names;
    out.images = Tensor({static_cast<int>(indices.size()), C, H, W});
    out.labels.reserve(indices.size());
    for (size_t k = 0; k < indices.size(); ++k) {
        int i = indices[k];
        std::copy(images.data() + i * img_len, images.data() + (i + 1) * img_len,
                  out.images.data() + static_cast<int64_t>(k) * img_len);
        out.labels.push_back(labels[static_cast<size_t>(i)]);
    }
    return out;
}

Tensor Dataset::image(int i) const {
    const int64_t img_len = static_cast<int64_t>(channels()) * height() * width();
    return Tensor({1, channels(), height(), width()},
                  std::vector<float>(images.data() + i * img_len, images.data() + (i + 1) * img_len));
}

namespace {

constexpr uint32_t kImagesMagic = 0x00000803;
constexpr uint32_t kLabelsMagic = 0x00000801;

uint32_t read_be32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        fail(ErrorCode::bad_format, "truncated IDX file: " + path);
    return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) | (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

void write_be32(std::ostream& out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream imf(images_path, std::ios::binary);
    if (!imf) fail(ErrorCode::io, "cannot open images file: " + images_path);
    const uint32_t im_magic = read_be32(imf, images_path);
    if (im_magic != kImagesMagic)
        fail(ErrorCode::bad_format, "bad images magic in " + images_path + " (expected 0x00000803)");
    const uint32_t n = read_be32(imf, images_path);
    const uint32_t h = read_be32(imf, images_path);
    const uint32_t w = read_be32(imf, images_path);
    if (n == 0 || h == 0 || w == 0) fail(ErrorCode::bad_format, "empty IDX images file: " + images_path);
    std::vector<unsigned char> pixels(static_cast<size_t>(n) * h * w);
    if (!imf.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size())))
        fail(ErrorCode::bad_format, "truncated IDX file: " + images_path);

    std::ifstream lbf(labels_path, std::ios::binary);
    if (!lbf) fail(ErrorCode::io, "cannot open labels file: " + labels_path);
    const uint32_t lb_magic = read_be32(lbf, labels_path);
    if (lb_magic != kLabelsMagic)
        fail(ErrorCode::bad_format, "bad labels magic in " + labels_path + " (expected 0x00000801)");
    const uint32_t ln = read_be32(lbf, labels_path);
    if (ln != n)
        fail(ErrorCode::bad_format, "IDX count mismatch: " + std::to_string(n) + " images vs " +
                                        std::to_string(ln) + " labels");
    std::vector<unsigned char> raw_labels(ln);
    if (!lbf.read(reinterpret_cast<char*>(raw_labels.data()), static_cast<std::streamsize>(raw_labels.size())))
        fail(ErrorCode::bad_format, "truncated IDX file: " + labels_path);

    Dataset ds;
    ds.images = Tensor({static_cast<int>(n), 1, static_cast<int>(h), static_cast<int>(w)});
    for (size_t i = 0; i < pixels.size(); ++i) ds.images[static_cast<int64_t>(i)] = static_cast<float>(pixels[i]);
    ds.labels.assign(raw_labels.begin(), raw_labels.end());
    int max_label = 0;
    for (int l : ds.labels) max_label = std::max(max_label, l);
    ds.num_classes = std::max(2, max_label + 1);
    return ds;
}

void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path) {
    if (ds.channels() != 1) fail(ErrorCode::invalid_argument, "save_idx: only single-channel datasets");
    std::ofstream imf(images_path, std::ios::binary);
    if (!imf) fail(ErrorCode::io, "cannot write images file: " + images_path);
    write_be32(imf, kImagesMagic);
    write_be32(imf, static_cast<uint32_t>(ds.size()));
    write_be32(imf, static_cast<uint32_t>(ds.height()));
    write_be32(imf, static_cast<uint32_t>(ds.width()));
    std::vector<unsigned char> pixels(static_cast<size_t>(ds.images.size()));
    for (int64_t i = 0; i < ds.images.size(); ++i) {
        float v = std::clamp(ds.images[i], 0.0f, 255.0f);
        pixels[static_cast<size_t>(i)] = static_cast<unsigned char>(std::lround(v));
    }
    imf.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!imf) fail(ErrorCode::io, "write failed: " + images_path);

    std::ofstream lbf(labels_path, std::ios::binary);
    if (!lbf) fail(ErrorCode::io, "cannot write labels file: " + labels_path);
    write_be32(lbf, kLabelsMagic);
    write_be32(lbf, static_cast<uint32_t>(ds.labels.size()));
    std::vector<unsigned char> raw(ds.labels.begin(), ds.labels.end());
    lbf.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!lbf) fail(ErrorCode::io, "write failed: " + labels_path);
}

Dataset synth_dataset(int num_classes, int per_class, int size, uint64_t seed) {
    if (num_classes < 2) fail(ErrorCode::invalid_argument, "synth_dataset: num_classes must be >= 2");
    if (per_class < 1) fail(ErrorCode::invalid_argument, "synth_dataset: per_class must be >= 1");
    if (size < 16) fail(ErrorCode::invalid_argument, "synth_dataset: size must be >= 16");

    const int n = num_classes * per_class;
    Dataset ds;
    ds.num_classes = num_classes;
    ds.images = Tensor({n, 1, size, size});
    ds.labels.resize(static_cast<size_t>(n));
    for (int k = 0; k < num_classes; ++k) ds.class_names.push_back("stripes-" + std::to_string(k));

    const double pi = 3.14159265358979323846;
    Rng rng(derive_seed(seed, "synth"));
    int idx = 0;
    for (int k = 0; k < num_classes; ++k) {
        const double base_angle = pi * k / num_classes;
        for (int s = 0; s < per_class; ++s, ++idx) {
            ds.labels[static_cast<size_t>(idx)] = k;
            const double angle = base_angle + rng.uniform(-pi / 18.0, pi / 18.0);
            const double period = rng.uniform(11.0, 16.0);
            const double phase = rng.uniform(0.0, 2.0 * pi);
            const double amplitude = rng.uniform(55.0, 85.0);
            const double background = rng.uniform(100.0, 130.0);
            const double ca = std::cos(angle), sa = std::sin(angle);
            const double half = (size - 1) / 2.0;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double u = (x - half) * ca + (y - half) * sa;
                    const double wave = std::tanh(2.2 * std::sin(2.0 * pi * u / period + phase));
                    double v = background + amplitude * wave + rng.normal(0.0, 5.0);
                    v = std::clamp(v, 0.0, 255.0);
                    ds.images.at4(idx, 0, y, x) = static_cast<float>(std::lround(v));
                }
        }
    }
    return ds;
}

namespace {

// Splits a global target of `total` samples across classes proportionally to
// pool size, by largest remainder, without exceeding per-class capacity.
std::vector<int> allocate_per_class(int total, const std::vector<int>& pool_sizes, const std::vector<int>& capacity,
                                    int n_all) {
    const size_t k = pool_sizes.size();
    std::vector<int> alloc(k, 0);
    std::vector<double> frac(k, 0.0);
    int assigned = 0;
    for (size_t c = 0; c < k; ++c) {
        double ideal = static_cast<double>(total) * pool_sizes[c] / n_all;
        alloc[c] = std::min(capacity[c], static_cast<int>(std::floor(ideal + 1e-9)));
        frac[c] = ideal - alloc[c];
        assigned += alloc[c];
    }
    while (assigned < total) {
        int best = -1;
        for (size_t c = 0; c < k; ++c)
            if (alloc[c] < capacity[c] && (best < 0 || frac[c] > frac[static_cast<size_t>(best)]))
                best = static_cast<int>(c);
        if (best < 0) fail(ErrorCode::invalid_argument, "split: fractions exceed available samples");
        ++alloc[static_cast<size_t>(best)];
        frac[static_cast<size_t>(best)] -= 1.0;
        ++assigned;
    }
    return alloc;
}

}  // namespace

Splits split(const Dataset& ds, const SplitSpec& spec) {
    if (spec.train_fraction < 0 || spec.val_fraction < 0 || spec.test_fraction < 0)
        fail(ErrorCode::invalid_argument, "split: negative fraction");
    if (spec.train_fraction + spec.val_fraction + spec.test_fraction > 1.0 + 1e-9)
        fail(ErrorCode::invalid_argument, "split: fractions sum beyond 1");
    ds.validate();

    const int n = ds.size();
    std::vector<std::vector<int>> pools(static_cast<size_t>(ds.num_classes));
    for (int i = 0; i < n; ++i) pools[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

    Rng rng(derive_seed(spec.seed, "split"));
    std::vector<int> pool_sizes, used(pools.size(), 0);
    for (auto& pool : pools) {
        for (size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
        pool_sizes.push_back(static_cast<int>(pool.size()));
    }

    // Global split sizes are exact (floor of fraction * N); per-class counts
    // then track the global proportions within one sample.
    auto take = [&](double fraction) {
        const int target = static_cast<int>(std::floor(fraction * n + 1e-9));
        std::vector<int> capacity(pools.size());
        for (size_t c = 0; c < pools.size(); ++c) capacity[c] = pool_sizes[c] - used[c];
        std::vector<int> alloc = allocate_per_class(target, pool_sizes, capacity, n);
        std::vector<int> indices;
        for (size_t c = 0; c < pools.size(); ++c) {
            for (int i = 0; i < alloc[c]; ++i) indices.push_back(pools[c][static_cast<size_t>(used[c] + i)]);
            used[c] += alloc[c];
        }
        std::sort(indices.begin(), indices.end());
        return indices;
    };

    std::vector<int> train_idx = take(spec.train_fraction);
    std::vector<int> val_idx = take(spec.val_fraction);
    std::vector<int> test_idx = take(spec.test_fraction);
    return {ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)};
}

std::vector<float> compute_mean(const Dataset& ds) {
    const int C = ds.channels();
    const int64_t per_channel = ds.images.size() / C;
    std::vector<double> acc(static_cast<size_t>(C), 0.0);
    const int H = ds.height(), W = ds.width();
    for (int n = 0; n < ds.size(); ++n)
        for (int c = 0; c < C; ++c) {
            const float* plane = &ds.images.at4(n, c, 0, 0);
            for (int i = 0; i < H * W; ++i) acc[static_cast<size_t>(c)] += plane[i];
        }
    std::vector<float> mean(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) mean[static_cast<size_t>(c)] = static_cast<float>(acc[static_cast<size_t>(c)] / per_channel);
    return mean;
}

Tensor preprocess(const Tensor& batch, const std::vector<float>& mean) {
    if (batch.rank() != 4) fail(ErrorCode::shape_mismatch, "preprocess: expected (N, C, H, W) tensor");
    if (static_cast<int>(mean.size()) != batch.dim(1))
        fail(ErrorCode::shape_mismatch, "preprocess: mean has " + std::to_string(mean.size()) +
                                            " channels, batch has " + std::to_string(batch.dim(1)));
    Tensor out(batch.shape());
    const int N = batch.dim(0), C = batch.dim(1), H = batch.dim(2), W = batch.dim(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float m = mean[static_cast<size_t>(c)];
            const float* src = &batch.at4(n, c, 0, 0);
            float* dst = &out.at4(n, c, 0, 0);
            for (int i = 0; i < H * W; ++i) dst[i] = src[i] - m;
        }
    return out;
}

}  // namespace qrn
