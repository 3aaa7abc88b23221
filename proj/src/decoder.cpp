#include "fbformer/decoder.hpp"

#include <algorithm>

#include "fbformer/profiler.hpp"

namespace fbf {

ConvNormRelu::ConvNormRelu(ParamStore& store, const std::string& conv_name,
                           const std::string& norm_name, int in, int out, int groups)
    : conv_(store, conv_name, in, out, 3, 1, 1, 1, /*bias=*/false),
      norm_(store, norm_name, groups, out) {}

SemanticFpn::SemanticFpn(ParamStore& store, const std::array<int, 4>& in_dims,
                         const DecoderConfig& cfg, int num_classes)
    : cfg_(cfg) {
  cfg_.validate();
  const int p = cfg_.channels;
  const int groups = cfg_.groups_for(p);
  for (int i = 0; i < 4; ++i) {
    const std::string n = std::to_string(i + 1);
    lateral_[i] = nn::Conv2d(store, "decoder.lateral" + n, in_dims[i], p, 1);
    fpn_[i] = nn::Conv2d(store, "decoder.fpn" + n, p, p, 3, 1, 1);
    const int convs = std::max(1, upsample_count(i));
    for (int j = 0; j < convs; ++j) {
      const std::string base = "decoder.scale" + n;
      scale_heads_[i].emplace_back(store, base + ".conv" + std::to_string(j),
                                   base + ".norm" + std::to_string(j), p, p, groups);
    }
  }
  cls_ = nn::Conv2d(store, "decoder.cls", p, num_classes, 1);
}

PyramidFeatures SemanticFpn::pyramid_align(const StageFeatures& f) const {
  for (int i = 1; i < 4; ++i) {
    const auto& hi = f.f[i - 1];
    const auto& lo = f.f[i];
    if (lo.dim(0) != hi.dim(0) || lo.dim(2) * 2 != hi.dim(2) || lo.dim(3) * 2 != hi.dim(3)) {
      throw ConfigError("pyramid_align: stage " + std::to_string(i + 1) + " features " +
                        shape_str(lo.shape()) + " are not half the resolution of stage " +
                        std::to_string(i) + " features " + shape_str(hi.shape()));
    }
  }
  std::array<Tensor, 4> lat;
  {
    profiling::Scope scope("decoder.lateral");
    for (int i = 0; i < 4; ++i) lat[i] = lateral_[i](f.f[i]);
  }
  if (cfg_.topdown) {
    for (int i = 2; i >= 0; --i) lat[i] = ops::add(lat[i], ops::upsample_nearest(lat[i + 1], 2));
  }
  {
    profiling::Scope scope("decoder.fpn");
    for (int i = 0; i < 4; ++i) lat[i] = fpn_[i](lat[i]);
  }
  PyramidFeatures out;
  profiling::Scope scope("decoder.scale");
  for (int i = 0; i < 4; ++i) {
    Tensor x = lat[i];
    for (const auto& head : scale_heads_[i]) {
      x = head(x);
      if (i > 0) x = ops::resize_bilinear(x, x.dim(2) * 2, x.dim(3) * 2);
    }
    out.s[i] = x;
  }
  return out;
}

Tensor SemanticFpn::merge_predict(const PyramidFeatures& p, std::int64_t out_h,
                                  std::int64_t out_w) const {
  for (int i = 1; i < 4; ++i) {
    if (p.s[i].shape() != p.s[0].shape()) {
      throw ConfigError("merge_predict: pyramid level shapes differ: " + shape_str(p.s[0].shape()) +
                        " vs " + shape_str(p.s[i].shape()));
    }
  }
  profiling::Scope scope("decoder.cls");
  Tensor merged = ops::add(ops::add(p.s[0], p.s[1]), ops::add(p.s[2], p.s[3]));
  return ops::resize_bilinear(cls_(merged), out_h, out_w);
}

FcnAuxHead::FcnAuxHead(ParamStore& store, int in_dim, const DecoderConfig& cfg, int num_classes)
    : block_(store, "aux_head.conv0", "aux_head.norm0", in_dim, cfg.channels,
             cfg.groups_for(cfg.channels)),
      cls_(store, "aux_head.cls", cfg.channels, num_classes, 1) {}

Tensor FcnAuxHead::operator()(const Tensor& f3, std::int64_t out_h, std::int64_t out_w) const {
  profiling::Scope scope("aux_head");
  return ops::resize_bilinear(cls_(block_(f3)), out_h, out_w);
}

}  // namespace fbf
