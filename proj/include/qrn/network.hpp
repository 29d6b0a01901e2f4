#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "qrn/error.hpp"
#include "qrn/rng.hpp"
#include "qrn/tensor.hpp"

namespace qrn {

enum class LayerKind { conv2d, maxpool2x2, relu, dense, global_avg_pool, softmax };

inline const char* layer_kind_name(LayerKind k) {
    switch (k) {
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::maxpool2x2: return "maxpool2x2";
        case LayerKind::relu: return "relu";
        case LayerKind::dense: return "dense";
        case LayerKind::global_avg_pool: return "global-avg-pool";
        case LayerKind::softmax: return "softmax";
    }
    return "unknown";
}

LayerKind layer_kind_from_name(const std::string& s);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    int filters = 0;  // conv2d: output channels
    int kernel = 0;   // conv2d: square kernel size, odd
    int stride = 1;   // conv2d: only 1 supported
    int units = 0;    // dense: output units
    // Resolved when the network is assembled.
    int in_channels = 0;  // conv2d
    int in_dim = 0;       // dense (flattened input)

    bool learnable() const { return kind == LayerKind::conv2d || kind == LayerKind::dense; }
};

inline LayerSpec conv2d(std::string name, int filters, int kernel) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.name = std::move(name);
    s.filters = filters;
    s.kernel = kernel;
    return s;
}
inline LayerSpec maxpool2x2(std::string name) { return LayerSpec{LayerKind::maxpool2x2, std::move(name)}; }
inline LayerSpec relu(std::string name) { return LayerSpec{LayerKind::relu, std::move(name)}; }
inline LayerSpec dense(std::string name, int units) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.name = std::move(name);
    s.units = units;
    return s;
}
inline LayerSpec global_avg_pool(std::string name) { return LayerSpec{LayerKind::global_avg_pool, std::move(name)}; }
inline LayerSpec softmax(std::string name) { return LayerSpec{LayerKind::softmax, std::move(name)}; }

template <typename T>
struct LayerParamsT {
    TensorT<T> weight;
    TensorT<T> bias;
    bool present() const { return !weight.empty(); }
    int64_t count() const { return weight.size() + bias.size(); }
};

// Propagates (C,H,W) / flat shapes through a spec list, resolving conv
// in_channels and dense in_dim in place. Returns the output length of the
// final layer. Throws on malformed specs or shapes.
Shape resolve_specs(std::vector<LayerSpec>& specs, const Shape& input_chw);

// Xavier uniform: U(-L, L) with L = sqrt(6 / (fan_in + fan_out)). The spec
// must be resolved (conv in_channels / dense in_dim known).
template <typename T>
TensorT<T> xavier_init(const LayerSpec& spec, uint64_t seed) {
    if (!spec.learnable())
        fail(ErrorCode::invalid_argument,
             "xavier_init: layer '" + spec.name + "' of kind " + layer_kind_name(spec.kind) + " has no parameters");
    int64_t fan_in = 0, fan_out = 0;
    Shape shape;
    if (spec.kind == LayerKind::conv2d) {
        if (spec.in_channels <= 0) fail(ErrorCode::invalid_argument, "xavier_init: conv spec not resolved");
        fan_in = static_cast<int64_t>(spec.kernel) * spec.kernel * spec.in_channels;
        fan_out = static_cast<int64_t>(spec.kernel) * spec.kernel * spec.filters;
        shape = {spec.filters, spec.in_channels, spec.kernel, spec.kernel};
    } else {
        if (spec.in_dim <= 0) fail(ErrorCode::invalid_argument, "xavier_init: dense spec not resolved");
        fan_in = spec.in_dim;
        fan_out = spec.units;
        shape = {spec.units, spec.in_dim};
    }
    double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    TensorT<T> w(shape);
    Rng rng(seed);
    for (int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-limit, limit));
    return w;
}

template <typename T>
class NetworkT {
public:
    NetworkT() = default;

    const Shape& input_shape() const { return input_shape_; }  // {C, H, W}
    int num_classes() const { return num_classes_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    size_t layer_count() const { return layers_.size(); }

    LayerParamsT<T>& params(size_t layer_index) { return params_[layer_index]; }
    const LayerParamsT<T>& params(size_t layer_index) const { return params_[layer_index]; }

    int index_of(const std::string& name) const {
        for (size_t i = 0; i < layers_.size(); ++i)
            if (layers_[i].name == name) return static_cast<int>(i);
        return -1;
    }

    LayerParamsT<T>& params(const std::string& name) {
        int i = index_of(name);
        if (i < 0) fail(ErrorCode::invalid_argument, "no layer named '" + name + "'");
        return params_[static_cast<size_t>(i)];
    }
    const LayerParamsT<T>& params(const std::string& name) const {
        return const_cast<NetworkT*>(this)->params(name);
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& p : params_) n += p.count();
        return n;
    }

    std::vector<std::string> learnable_layer_names() const {
        std::vector<std::string> out;
        for (const auto& l : layers_)
            if (l.learnable()) out.push_back(l.name);
        return out;
    }

    template <typename U>
    NetworkT<U> cast() const {
        NetworkT<U> out;
        out.input_shape_ = input_shape_;
        out.num_classes_ = num_classes_;
        out.layers_ = layers_;
        out.params_.reserve(params_.size());
        for (const auto& p : params_)
            out.params_.push_back({p.weight.template cast<U>(), p.bias.template cast<U>()});
        return out;
    }

    // Assembles a network: resolves specs against the input shape, checks
    // name uniqueness and conv kernel constraints, then draws Xavier weights
    // (zero biases) from per-layer seeds derived from `seed`.
    static NetworkT build(std::vector<LayerSpec> specs, Shape input_chw, int num_classes, uint64_t seed) {
        NetworkT net = assemble(std::move(specs), std::move(input_chw), num_classes);
        for (size_t i = 0; i < net.layers_.size(); ++i) {
            const LayerSpec& l = net.layers_[i];
            if (!l.learnable()) continue;
            net.params_[i].weight = xavier_init<T>(l, derive_seed(seed, "init/" + l.name));
            net.params_[i].bias = TensorT<T>(l.kind == LayerKind::conv2d ? Shape{l.filters} : Shape{l.units});
        }
        return net;
    }

    // Same resolution and validation as build(), but leaves parameters empty
    // (callers install them, e.g. checkpoint loading or fragment assembly).
    static NetworkT assemble(std::vector<LayerSpec> specs, Shape input_chw, int num_classes) {
        NetworkT net;
        net.input_shape_ = std::move(input_chw);
        net.num_classes_ = num_classes;
        if (net.input_shape_.size() != 3)
            fail(ErrorCode::invalid_argument, "network input shape must be (C, H, W)");
        if (num_classes < 2) fail(ErrorCode::invalid_argument, "num_classes must be >= 2");
        std::set<std::string> seen;
        for (const auto& s : specs) {
            if (s.name.empty()) fail(ErrorCode::invalid_argument, "layer with empty name");
            if (!seen.insert(s.name).second)
                fail(ErrorCode::invalid_argument, "duplicate layer name '" + s.name + "'");
        }
        resolve_specs(specs, net.input_shape_);
        net.layers_ = std::move(specs);
        net.params_.assign(net.layers_.size(), {});
        return net;
    }

    template <typename U>
    friend class NetworkT;

private:
    Shape input_shape_;
    int num_classes_ = 0;
    std::vector<LayerSpec> layers_;
    std::vector<LayerParamsT<T>> params_;
};

using Network = NetworkT<float>;

// All intermediate activations of one forward pass. acts[0] is the input
// batch; acts[i + 1] is the output of layer i.
template <typename T>
struct ActivationTraceT {
    std::vector<TensorT<T>> acts;
    const TensorT<T>& output() const { return acts.back(); }
    int batch_size() const { return acts.front().dim(0); }
};

using ActivationTrace = ActivationTraceT<float>;

template <typename T>
struct GradientsT {
    std::map<std::string, LayerParamsT<T>> by_layer;  // dWeight / dBias per learnable layer
    TensorT<T> input;                                 // dLoss / dInput
};

using Gradients = GradientsT<float>;

namespace detail {

// ---- per-layer forward ----

template <typename T>
TensorT<T> conv2d_forward(const LayerSpec& l, const LayerParamsT<T>& p, const TensorT<T>& x) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int K = l.kernel, pad = (K - 1) / 2, F = l.filters;
    TensorT<T> y({B, F, H, W});
    for (int n = 0; n < B; ++n) {
        for (int o = 0; o < F; ++o) {
            T b = p.bias[o];
            T* yrow0 = &y.at4(n, o, 0, 0);
            for (int i = 0; i < H * W; ++i) yrow0[i] = b;
            for (int c = 0; c < C; ++c) {
                for (int u = 0; u < K; ++u) {
                    for (int v = 0; v < K; ++v) {
                        const T w = p.weight[((static_cast<int64_t>(o) * C + c) * K + u) * K + v];
                        const int di = u - pad, dj = v - pad;
                        const int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                        const int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                        for (int i = i0; i < i1; ++i) {
                            T* yr = &y.at4(n, o, i, 0);
                            const T* xr = &x.at4(n, c, i + di, 0);
                            for (int j = j0; j < j1; ++j) yr[j] += w * xr[j + dj];
                        }
                    }
                }
            }
        }
    }
    return y;
}

template <typename T>
void conv2d_backward(const LayerSpec& l, const LayerParamsT<T>& p, const TensorT<T>& x, const TensorT<T>& dy,
                     TensorT<T>& dx, LayerParamsT<T>* pg) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int K = l.kernel, pad = (K - 1) / 2, F = l.filters;
    dx = TensorT<T>({B, C, H, W});
    if (pg) {
        pg->weight = TensorT<T>(p.weight.shape());
        pg->bias = TensorT<T>(p.bias.shape());
    }
    for (int n = 0; n < B; ++n) {
        for (int o = 0; o < F; ++o) {
            if (pg) {
                T s = 0;
                const T* dyr0 = &dy.at4(n, o, 0, 0);
                for (int i = 0; i < H * W; ++i) s += dyr0[i];
                pg->bias[o] += s;
            }
            for (int c = 0; c < C; ++c) {
                for (int u = 0; u < K; ++u) {
                    for (int v = 0; v < K; ++v) {
                        const int64_t widx = ((static_cast<int64_t>(o) * C + c) * K + u) * K + v;
                        const T w = p.weight[widx];
                        const int di = u - pad, dj = v - pad;
                        const int i0 = std::max(0, -di), i1 = std::min(H, H - di);
                        const int j0 = std::max(0, -dj), j1 = std::min(W, W - dj);
                        T wg = 0;
                        for (int i = i0; i < i1; ++i) {
                            const T* dyr = &dy.at4(n, o, i, 0);
                            T* dxr = &dx.at4(n, c, i + di, 0);
                            const T* xr = &x.at4(n, c, i + di, 0);
                            for (int j = j0; j < j1; ++j) {
                                dxr[j + dj] += w * dyr[j];
                                wg += xr[j + dj] * dyr[j];
                            }
                        }
                        if (pg) pg->weight[widx] += wg;
                    }
                }
            }
        }
    }
}

template <typename T>
TensorT<T> maxpool_forward(const TensorT<T>& x) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int H2 = H / 2, W2 = W / 2;
    TensorT<T> y({B, C, H2, W2});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H2; ++i)
                for (int j = 0; j < W2; ++j) {
                    T m = x.at4(n, c, 2 * i, 2 * j);
                    m = std::max(m, x.at4(n, c, 2 * i, 2 * j + 1));
                    m = std::max(m, x.at4(n, c, 2 * i + 1, 2 * j));
                    m = std::max(m, x.at4(n, c, 2 * i + 1, 2 * j + 1));
                    y.at4(n, c, i, j) = m;
                }
    return y;
}

// Gradient goes to the first (row-major) maximal element of each window.
template <typename T>
TensorT<T> maxpool_backward(const TensorT<T>& x, const TensorT<T>& dy) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int H2 = H / 2, W2 = W / 2;
    TensorT<T> dx({B, C, H, W});
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H2; ++i)
                for (int j = 0; j < W2; ++j) {
                    int bi = 2 * i, bj = 2 * j;
                    T best = x.at4(n, c, bi, bj);
                    const int cand[3][2] = {{2 * i, 2 * j + 1}, {2 * i + 1, 2 * j}, {2 * i + 1, 2 * j + 1}};
                    for (const auto& rc : cand)
                        if (x.at4(n, c, rc[0], rc[1]) > best) {
                            best = x.at4(n, c, rc[0], rc[1]);
                            bi = rc[0];
                            bj = rc[1];
                        }
                    dx.at4(n, c, bi, bj) += dy.at4(n, c, i, j);
                }
    return dx;
}

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& x) {
    TensorT<T> y(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& dy) {
    TensorT<T> dx(x.shape());
    for (int64_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T(0) ? dy[i] : T(0);
    return dx;
}

template <typename T>
TensorT<T> dense_forward(const LayerSpec& l, const LayerParamsT<T>& p, const TensorT<T>& x) {
    const int B = x.dim(0);
    const int D = static_cast<int>(x.size() / B);
    const int U = l.units;
    TensorT<T> y({B, U});
    for (int n = 0; n < B; ++n) {
        const T* xr = x.data() + static_cast<int64_t>(n) * D;
        for (int u = 0; u < U; ++u) {
            const T* wr = p.weight.data() + static_cast<int64_t>(u) * D;
            T s = p.bias[u];
            for (int d = 0; d < D; ++d) s += wr[d] * xr[d];
            y.at2(n, u) = s;
        }
    }
    return y;
}

template <typename T>
void dense_backward(const LayerSpec& l, const LayerParamsT<T>& p, const TensorT<T>& x, const TensorT<T>& dy,
                    TensorT<T>& dx, LayerParamsT<T>* pg) {
    const int B = x.dim(0);
    const int D = static_cast<int>(x.size() / B);
    const int U = l.units;
    dx = TensorT<T>(x.shape());
    if (pg) {
        pg->weight = TensorT<T>(p.weight.shape());
        pg->bias = TensorT<T>(p.bias.shape());
    }
    for (int n = 0; n < B; ++n) {
        const T* xr = x.data() + static_cast<int64_t>(n) * D;
        T* dxr = dx.data() + static_cast<int64_t>(n) * D;
        for (int u = 0; u < U; ++u) {
            const T g = dy.at2(n, u);
            const T* wr = p.weight.data() + static_cast<int64_t>(u) * D;
            for (int d = 0; d < D; ++d) dxr[d] += g * wr[d];
            if (pg) {
                T* wgr = pg->weight.data() + static_cast<int64_t>(u) * D;
                for (int d = 0; d < D; ++d) wgr[d] += g * xr[d];
                pg->bias[u] += g;
            }
        }
    }
}

template <typename T>
TensorT<T> gap_forward(const TensorT<T>& x) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> y({B, C});
    const T inv = T(1) / static_cast<T>(H * W);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xr = &x.at4(n, c, 0, 0);
            T s = 0;
            for (int i = 0; i < H * W; ++i) s += xr[i];
            y.at2(n, c) = s * inv;
        }
    return y;
}

template <typename T>
TensorT<T> gap_backward(const TensorT<T>& x, const TensorT<T>& dy) {
    const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> dx({B, C, H, W});
    const T inv = T(1) / static_cast<T>(H * W);
    for (int n = 0; n < B; ++n)
        for (int c = 0; c < C; ++c) {
            const T g = dy.at2(n, c) * inv;
            T* dxr = &dx.at4(n, c, 0, 0);
            for (int i = 0; i < H * W; ++i) dxr[i] = g;
        }
    return dx;
}

template <typename T>
TensorT<T> softmax_forward(const TensorT<T>& x) {
    const int B = x.dim(0);
    const int K = static_cast<int>(x.size() / B);
    TensorT<T> y(x.shape());
    for (int n = 0; n < B; ++n) {
        const T* xr = x.data() + static_cast<int64_t>(n) * K;
        T* yr = y.data() + static_cast<int64_t>(n) * K;
        T m = xr[0];
        for (int k = 1; k < K; ++k) m = std::max(m, xr[k]);
        T s = 0;
        for (int k = 0; k < K; ++k) {
            yr[k] = std::exp(xr[k] - m);
            s += yr[k];
        }
        const T inv = T(1) / s;
        for (int k = 0; k < K; ++k) yr[k] *= inv;
    }
    return y;
}

// dz_i = y_i * (dy_i - sum_j dy_j y_j), rowwise.
template <typename T>
TensorT<T> softmax_backward(const TensorT<T>& y, const TensorT<T>& dy) {
    const int B = y.dim(0);
    const int K = static_cast<int>(y.size() / B);
    TensorT<T> dz(y.shape());
    for (int n = 0; n < B; ++n) {
        const T* yr = y.data() + static_cast<int64_t>(n) * K;
        const T* dyr = dy.data() + static_cast<int64_t>(n) * K;
        T* dzr = dz.data() + static_cast<int64_t>(n) * K;
        T dot = 0;
        for (int k = 0; k < K; ++k) dot += dyr[k] * yr[k];
        for (int k = 0; k < K; ++k) dzr[k] = yr[k] * (dyr[k] - dot);
    }
    return dz;
}

}  // namespace detail

// ---- forward / backward over whole networks ----

template <typename T>
ActivationTraceT<T> forward(const NetworkT<T>& net, const TensorT<T>& batch) {
    if (batch.rank() != 4 || batch.dim(1) != net.input_shape()[0] || batch.dim(2) != net.input_shape()[1] ||
        batch.dim(3) != net.input_shape()[2])
        fail(ErrorCode::shape_mismatch, "forward: batch shape " + shape_str(batch.shape()) +
                                            " does not match network input (B, " + std::to_string(net.input_shape()[0]) +
                                            ", " + std::to_string(net.input_shape()[1]) + ", " +
                                            std::to_string(net.input_shape()[2]) + ")");
    ActivationTraceT<T> trace;
    trace.acts.reserve(net.layer_count() + 1);
    trace.acts.push_back(batch);
    for (size_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& l = net.layers()[i];
        const TensorT<T>& x = trace.acts.back();
        TensorT<T> y;
        switch (l.kind) {
            case LayerKind::conv2d:
                if (x.rank() != 4 || x.dim(1) != l.in_channels)
                    fail(ErrorCode::shape_mismatch, "forward: layer '" + l.name + "' expects " +
                                                        std::to_string(l.in_channels) + " channels, got " +
                                                        shape_str(x.shape()));
                y = detail::conv2d_forward(l, net.params(i), x);
                break;
            case LayerKind::maxpool2x2:
                y = detail::maxpool_forward(x);
                break;
            case LayerKind::relu:
                y = detail::relu_forward(x);
                break;
            case LayerKind::dense:
                if (x.size() / x.dim(0) != l.in_dim)
                    fail(ErrorCode::shape_mismatch, "forward: layer '" + l.name + "' expects flattened dim " +
                                                        std::to_string(l.in_dim) + ", got " + shape_str(x.shape()));
                y = detail::dense_forward(l, net.params(i), x);
                break;
            case LayerKind::global_avg_pool:
                y = detail::gap_forward(x);
                break;
            case LayerKind::softmax:
                y = detail::softmax_forward(x);
                break;
        }
        y.require_finite("output of layer '" + l.name + "'");
        trace.acts.push_back(std::move(y));
    }
    return trace;
}

template <typename T>
TensorT<T> forward_probs(const NetworkT<T>& net, const TensorT<T>& batch) {
    return forward(net, batch).output();
}

namespace detail {

// Backpropagates dY (gradient w.r.t. the output of layer `start`) down to the
// input. Parameter gradients are collected when `collect` is true.
template <typename T>
GradientsT<T> backprop(const NetworkT<T>& net, const ActivationTraceT<T>& trace, int start, TensorT<T> dy,
                       bool collect) {
    GradientsT<T> g;
    for (int i = start; i >= 0; --i) {
        const LayerSpec& l = net.layers()[static_cast<size_t>(i)];
        const TensorT<T>& x = trace.acts[static_cast<size_t>(i)];
        TensorT<T> dx;
        switch (l.kind) {
            case LayerKind::conv2d: {
                LayerParamsT<T> pg;
                conv2d_backward(l, net.params(static_cast<size_t>(i)), x, dy, dx, collect ? &pg : nullptr);
                if (collect) g.by_layer[l.name] = std::move(pg);
                break;
            }
            case LayerKind::maxpool2x2:
                dx = maxpool_backward(x, dy);
                break;
            case LayerKind::relu:
                dx = relu_backward(x, dy);
                break;
            case LayerKind::dense: {
                LayerParamsT<T> pg;
                dense_backward(l, net.params(static_cast<size_t>(i)), x, dy, dx, collect ? &pg : nullptr);
                if (collect) g.by_layer[l.name] = std::move(pg);
                break;
            }
            case LayerKind::global_avg_pool:
                dx = gap_backward(x, dy);
                break;
            case LayerKind::softmax:
                dx = softmax_backward(trace.acts[static_cast<size_t>(i) + 1], dy);
                break;
        }
        dy = std::move(dx);
    }
    g.input = std::move(dy);
    return g;
}

}  // namespace detail

template <typename T>
TensorT<T> one_hot(const std::vector<int>& labels, int num_classes) {
    TensorT<T> t({static_cast<int>(labels.size()), num_classes});
    for (size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes)
            fail(ErrorCode::invalid_argument, "label " + std::to_string(labels[n]) + " out of range");
        t.at2(static_cast<int>(n), labels[n]) = T(1);
    }
    return t;
}

// Mean categorical cross-entropy over the batch; log floored at 1e-12.
template <typename T>
double cross_entropy_loss(const TensorT<T>& probs, const TensorT<T>& targets) {
    if (!probs.same_shape(targets)) fail(ErrorCode::shape_mismatch, "cross_entropy_loss: probs/targets shape mismatch");
    const int B = probs.dim(0);
    const int K = static_cast<int>(probs.size() / B);
    double loss = 0;
    for (int n = 0; n < B; ++n)
        for (int k = 0; k < K; ++k) {
            double t = targets.at2(n, k);
            if (t != 0) loss -= t * std::log(std::max(static_cast<double>(probs.at2(n, k)), 1e-12));
        }
    return loss / B;
}

// Gradient of mean cross-entropy w.r.t. every parameter and the input. The
// final layer must be softmax; its Jacobian is folded into (p - t) / B.
template <typename T>
GradientsT<T> backward(const NetworkT<T>& net, const ActivationTraceT<T>& trace, const TensorT<T>& targets) {
    if (net.layer_count() == 0 || net.layers().back().kind != LayerKind::softmax)
        fail(ErrorCode::invalid_argument, "backward: network must end with a softmax layer");
    const TensorT<T>& p = trace.output();
    if (p.dim(0) != targets.dim(0))
        fail(ErrorCode::shape_mismatch, "backward: trace batch " + std::to_string(p.dim(0)) +
                                            " != targets batch " + std::to_string(targets.dim(0)));
    if (p.size() != targets.size()) fail(ErrorCode::shape_mismatch, "backward: targets shape mismatch");
    const int B = p.dim(0);
    TensorT<T> dz(p.shape());
    const T inv = T(1) / static_cast<T>(B);
    for (int64_t i = 0; i < p.size(); ++i) dz[i] = (p[i] - targets[i]) * inv;
    return detail::backprop(net, trace, static_cast<int>(net.layer_count()) - 2, std::move(dz), true);
}

template <typename T>
GradientsT<T> backward(const NetworkT<T>& net, const ActivationTraceT<T>& trace, const std::vector<int>& labels) {
    return backward(net, trace, one_hot<T>(labels, static_cast<int>(trace.output().size() / trace.output().dim(0))));
}

// Generic gradient from dLoss/dOutput at the network output (any final layer).
template <typename T>
GradientsT<T> backward_from_output(const NetworkT<T>& net, const ActivationTraceT<T>& trace, const TensorT<T>& dout) {
    if (!dout.same_shape(trace.output())) fail(ErrorCode::shape_mismatch, "backward_from_output: gradient shape mismatch");
    return detail::backprop(net, trace, static_cast<int>(net.layer_count()) - 1, dout, true);
}

// Input gradient of a scalar functional of one intermediate activation,
// given dFunctional/dActivation at layer `layer_index`. Parameter gradients
// are not collected.
template <typename T>
TensorT<T> backward_to_input(const NetworkT<T>& net, const ActivationTraceT<T>& trace, int layer_index,
                             const TensorT<T>& dact) {
    if (layer_index < 0 || layer_index >= static_cast<int>(net.layer_count()))
        fail(ErrorCode::invalid_argument, "backward_to_input: bad layer index");
    if (!dact.same_shape(trace.acts[static_cast<size_t>(layer_index) + 1]))
        fail(ErrorCode::shape_mismatch, "backward_to_input: gradient shape mismatch");
    return detail::backprop(net, trace, layer_index, dact, false).input;
}

// ---- SGD with momentum ----

template <typename T>
struct OptimizerStateT {
    std::map<std::string, LayerParamsT<T>> velocity;
    std::map<std::string, double> learning_rates;
    double momentum = 0.9;
};

using OptimizerState = OptimizerStateT<float>;

// base_lr for every learnable layer except the last one, which gets last_lr.
template <typename T>
OptimizerStateT<T> make_optimizer(const NetworkT<T>& net, double base_lr, double last_lr, double momentum) {
    if (momentum < 0.0 || momentum >= 1.0) fail(ErrorCode::invalid_argument, "momentum must be in [0, 1)");
    if (base_lr <= 0.0 || last_lr <= 0.0) fail(ErrorCode::invalid_argument, "learning rates must be positive");
    OptimizerStateT<T> st;
    st.momentum = momentum;
    auto names = net.learnable_layer_names();
    for (size_t i = 0; i < names.size(); ++i)
        st.learning_rates[names[i]] = (i + 1 == names.size()) ? last_lr : base_lr;
    return st;
}

// v <- momentum * v - lr * g;  p <- p + v. Frozen layers (and their velocity)
// are untouched, bit for bit.
template <typename T>
void sgd_step(NetworkT<T>& net, const GradientsT<T>& grads, OptimizerStateT<T>& state,
              const std::set<std::string>& frozen = {}) {
    for (const auto& name : frozen)
        if (net.index_of(name) < 0) fail(ErrorCode::invalid_argument, "sgd_step: unknown frozen layer '" + name + "'");
    for (size_t i = 0; i < net.layer_count(); ++i) {
        const LayerSpec& l = net.layers()[i];
        if (!l.learnable() || frozen.count(l.name)) continue;
        auto git = grads.by_layer.find(l.name);
        if (git == grads.by_layer.end())
            fail(ErrorCode::invalid_argument, "sgd_step: no gradient for layer '" + l.name + "'");
        auto lrit = state.learning_rates.find(l.name);
        if (lrit == state.learning_rates.end())
            fail(ErrorCode::invalid_argument, "sgd_step: no learning rate for layer '" + l.name + "'");
        const T lr = static_cast<T>(lrit->second);
        const T mu = static_cast<T>(state.momentum);
        LayerParamsT<T>& p = net.params(i);
        LayerParamsT<T>& v = state.velocity[l.name];
        if (v.weight.empty()) {
            v.weight = TensorT<T>(p.weight.shape());
            v.bias = TensorT<T>(p.bias.shape());
        }
        if (!v.weight.same_shape(p.weight) || !git->second.weight.same_shape(p.weight))
            fail(ErrorCode::shape_mismatch, "sgd_step: gradient/velocity shape mismatch at '" + l.name + "'");
        for (int64_t k = 0; k < p.weight.size(); ++k) {
            v.weight[k] = mu * v.weight[k] - lr * git->second.weight[k];
            p.weight[k] += v.weight[k];
        }
        for (int64_t k = 0; k < p.bias.size(); ++k) {
            v.bias[k] = mu * v.bias[k] - lr * git->second.bias[k];
            p.bias[k] += v.bias[k];
        }
    }
}

}  // namespace qrn
