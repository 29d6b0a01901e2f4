#include "qrn/network.hpp"

namespace qrn {

LayerKind layer_kind_from_name(const std::string& s) {
    if (s == "conv2d") return LayerKind::conv2d;
    if (s == "maxpool2x2") return LayerKind::maxpool2x2;
    if (s == "relu") return LayerKind::relu;
    if (s == "dense") return LayerKind::dense;
    if (s == "global-avg-pool") return LayerKind::global_avg_pool;
    if (s == "softmax") return LayerKind::softmax;
    fail(ErrorCode::bad_format, "unknown layer kind '" + s + "'");
}

Shape resolve_specs(std::vector<LayerSpec>& specs, const Shape& input_chw) {
    // shape is either spatial {C, H, W} or flat {D}
    Shape cur = input_chw;
    for (auto& l : specs) {
        const bool spatial = cur.size() == 3;
        switch (l.kind) {
            case LayerKind::conv2d:
                if (!spatial)
                    fail(ErrorCode::shape_mismatch, "layer '" + l.name + "': conv2d needs a spatial input");
                if (l.kernel < 1 || l.kernel % 2 == 0)
                    fail(ErrorCode::invalid_argument,
                         "layer '" + l.name + "': conv kernel must be odd and >= 1, got " + std::to_string(l.kernel));
                if (l.filters < 1) fail(ErrorCode::invalid_argument, "layer '" + l.name + "': filters must be >= 1");
                if (l.stride != 1) fail(ErrorCode::invalid_argument, "layer '" + l.name + "': only stride 1 supported");
                l.in_channels = cur[0];
                cur = {l.filters, cur[1], cur[2]};
                break;
            case LayerKind::maxpool2x2:
                if (!spatial)
                    fail(ErrorCode::shape_mismatch, "layer '" + l.name + "': maxpool2x2 needs a spatial input");
                if (cur[1] < 2 || cur[2] < 2)
                    fail(ErrorCode::shape_mismatch, "layer '" + l.name + "': input too small to pool");
                cur = {cur[0], cur[1] / 2, cur[2] / 2};
                break;
            case LayerKind::relu:
                break;
            case LayerKind::dense: {
                if (l.units < 1) fail(ErrorCode::invalid_argument, "layer '" + l.name + "': units must be >= 1");
                int64_t d = 1;
                for (int v : cur) d *= v;
                l.in_dim = static_cast<int>(d);
                cur = {l.units};
                break;
            }
            case LayerKind::global_avg_pool:
                if (!spatial)
                    fail(ErrorCode::shape_mismatch, "layer '" + l.name + "': global-avg-pool needs a spatial input");
                cur = {cur[0]};
                break;
            case LayerKind::softmax:
                if (spatial)
                    fail(ErrorCode::shape_mismatch, "layer '" + l.name + "': softmax needs a flat input");
                break;
        }
    }
    return cur;
}

}  // namespace qrn
