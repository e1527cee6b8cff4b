#pragma once

// Supernet storage and the masked forward / backward passes.
//
// A sub-network is addressed by a ChannelAssignment: for every layer the rows
// of its weight tensor come from the assignment of its width_group and the
// columns from the assignment of its input_group. Weights are gathered into a
// compact tensor, the pass runs on that, and updates are scattered back, so
// entries outside the assignment are never written.
//
// Conv layers use zero padding of (K-1)/2 and stride in/out resolution. Dense
// layers average-pool their input spatially first. ReLU follows every layer
// but the classifier. A layer writing a group that already holds an
// activation adds its output to it.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "cafewidth/archgraph.hpp"
#include "cafewidth/errors.hpp"
#include "cafewidth/sharing.hpp"

namespace cafewidth {

/// Samples in NCHW layout (H = W = 1 for tabular data) with integer labels.
struct Dataset {
  int channels = 1;
  int height = 1;
  int width = 1;
  int num_classes = 2;
  std::vector<double> inputs;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  std::span<const double> sample(std::size_t n) const {
    return {inputs.data() + n * sample_size(), sample_size()};
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{channels, height, width, num_classes, {}, {}};
    out.inputs.reserve(indices.size() * sample_size());
    out.labels.reserve(indices.size());
    for (auto i : indices) {
      auto s = sample(i);
      out.inputs.insert(out.inputs.end(), s.begin(), s.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }

  void validate() const {
    if (channels < 1 || height < 1 || width < 1) throw DataError("dataset dimensions must be >= 1");
    if (num_classes < 1) throw DataError("dataset needs at least one class");
    if (inputs.size() != labels.size() * sample_size()) throw DataError("dataset inputs and labels disagree in size");
    for (int y : labels) {
      if (y < 0 || y >= num_classes) throw DataError("label " + std::to_string(y) + " out of range");
    }
  }
};

using Batch = Dataset;

struct LayerParams {
  int n_out = 0;
  int n_in = 0;  // 1 for depthwise
  int kernel = 1;
  std::vector<double> weight;
  std::vector<double> bias;
  std::vector<double> weight_momentum;
  std::vector<double> bias_momentum;

  std::size_t index(int o, int i, int ky, int kx) const {
    return ((static_cast<std::size_t>(o) * static_cast<std::size_t>(n_in) + static_cast<std::size_t>(i)) *
                static_cast<std::size_t>(kernel) +
            static_cast<std::size_t>(ky)) *
               static_cast<std::size_t>(kernel) +
           static_cast<std::size_t>(kx);
  }
};

class SupernetState {
 public:
  std::vector<LayerParams> layers;
  std::uint64_t step = 0;

  /// Full-size tensors for every layer. Weights are uniform in
  /// +-sqrt(6 / fan_in) (classifier: +-1/sqrt(fan_in)); biases start at zero.
  static SupernetState initialize(const NetworkGraph& graph, std::uint64_t seed) {
    SupernetState s;
    std::mt19937_64 rng(seed);
    for (const auto& l : graph.layers()) {
      LayerParams p;
      p.n_out = l.max_width;
      p.n_in = l.kind == LayerKind::DepthwiseConv ? 1 : graph.max_width(l.input_group);
      p.kernel = l.kernel;
      const std::size_t nw = static_cast<std::size_t>(p.n_out) * static_cast<std::size_t>(p.n_in) *
                             static_cast<std::size_t>(p.kernel * p.kernel);
      const double fan_in = static_cast<double>(p.n_in) * p.kernel * p.kernel;
      const bool classifier = l.width_group == kOutputGroup;
      const double bound = classifier ? 1.0 / std::sqrt(fan_in) : std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> dist(-bound, bound);
      p.weight.resize(nw);
      for (auto& w : p.weight) w = dist(rng);
      p.bias.assign(static_cast<std::size_t>(p.n_out), 0.0);
      p.weight_momentum.assign(nw, 0.0);
      p.bias_momentum.assign(static_cast<std::size_t>(p.n_out), 0.0);
      s.layers.push_back(std::move(p));
    }
    return s;
  }

  /// FNV-1a over every stored value; equal hashes mean bit-identical state.
  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
      for (int b = 0; b < 8; ++b) {
        h ^= (v >> (8 * b)) & 0xffu;
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto& p : layers) {
      for (const auto* vec : {&p.weight, &p.bias, &p.weight_momentum, &p.bias_momentum}) {
        for (double v : *vec) mix(std::bit_cast<std::uint64_t>(v));
      }
    }
    mix(step);
    return h;
  }
};

// ---------------------------------------------------------------------------
// Sub-network addressing

struct SubnetLayer {
  std::vector<int> in_idx;
  std::vector<int> out_idx;
};
using Subnet = std::vector<SubnetLayer>;

inline Subnet make_subnet(const NetworkGraph& graph, const ChannelAssignment& assignment) {
  for (const auto& g : graph.groups()) {
    auto it = assignment.find(g);
    if (it == assignment.end()) throw InvalidWidthError("assignment is missing group '" + g + "'");
    const auto& idx = it->second;
    if (idx.empty()) throw InvalidWidthError("assignment of group '" + g + "' is empty");
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (idx[k] < 0 || idx[k] >= graph.max_width(g) || (k && idx[k] <= idx[k - 1])) {
        throw InvalidWidthError("assignment of group '" + g + "' is not an increasing subset of [0, " +
                                std::to_string(graph.max_width(g)) + ")");
      }
    }
  }
  auto channels = [&](const std::string& g) {
    if (g == kInputGroup || g == kOutputGroup) {
      std::vector<int> all(static_cast<std::size_t>(graph.max_width(g)));
      for (std::size_t k = 0; k < all.size(); ++k) all[k] = static_cast<int>(k);
      return all;
    }
    return assignment.at(g);
  };
  Subnet sub;
  for (const auto& l : graph.layers()) sub.push_back({channels(l.input_group), channels(l.width_group)});
  return sub;
}

inline Subnet make_subnet(const NetworkGraph& graph, const AssignmentPattern& pattern, const BinPlan& plan) {
  return make_subnet(graph, to_channels(pattern, plan));
}

// ---------------------------------------------------------------------------
// Forward

struct LayerTrace {
  int in_id = 0;
  int out_id = 0;
  int merge_id = -1;
  int ci = 0;
  int co = 0;
  int in_h = 1;
  int in_w = 1;
  std::vector<double> weight;  // compact co x ci x K x K (ci = 1 for depthwise)
  std::vector<double> bias;
  std::vector<double> output;  // post-activation, N x co x out_h x out_w
};

struct ForwardTrace {
  std::vector<std::vector<double>> values;
  std::vector<LayerTrace> layers;
  std::vector<double> logits;
  std::vector<double> probs;
  double loss = 0.0;
  std::uint64_t macs = 0;
};

namespace detail {

struct ConvGeometry {
  int in_h, in_w, out_h, out_w, kernel, stride_h, stride_w, pad, padded_h, padded_w;

  ConvGeometry(int ih, int iw, int oh, int ow, int k)
      : in_h(ih),
        in_w(iw),
        out_h(oh),
        out_w(ow),
        kernel(k),
        stride_h(ih / oh),
        stride_w(iw / ow),
        pad((k - 1) / 2),
        padded_h((oh - 1) * (ih / oh) + k),
        padded_w((ow - 1) * (iw / ow) + k) {}

  std::size_t in_plane() const { return static_cast<std::size_t>(in_h) * static_cast<std::size_t>(in_w); }
  std::size_t out_plane() const { return static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w); }
  std::size_t padded_plane() const {
    return static_cast<std::size_t>(padded_h) * static_cast<std::size_t>(padded_w);
  }

  // Zero-padded copy of `channels` planes.
  void pad_planes(const double* x, int channels, std::vector<double>& xp) const {
    xp.assign(static_cast<std::size_t>(channels) * padded_plane(), 0.0);
    for (int c = 0; c < channels; ++c) {
      const double* src = x + static_cast<std::size_t>(c) * in_plane();
      double* dst = xp.data() + static_cast<std::size_t>(c) * padded_plane();
      for (int py = 0; py < padded_h; ++py) {
        const int iy = py - pad;
        if (iy < 0 || iy >= in_h) continue;
        for (int px = 0; px < padded_w; ++px) {
          const int ix = px - pad;
          if (ix < 0 || ix >= in_w) continue;
          dst[static_cast<std::size_t>(py) * static_cast<std::size_t>(padded_w) + static_cast<std::size_t>(px)] =
              src[static_cast<std::size_t>(iy) * static_cast<std::size_t>(in_w) + static_cast<std::size_t>(ix)];
        }
      }
    }
  }

  // Adds the interior of padded gradient planes onto dx.
  void unpad_planes(const std::vector<double>& dxp, int channels, double* dx) const {
    for (int c = 0; c < channels; ++c) {
      const double* src = dxp.data() + static_cast<std::size_t>(c) * padded_plane();
      double* dst = dx + static_cast<std::size_t>(c) * in_plane();
      for (int py = 0; py < padded_h; ++py) {
        const int iy = py - pad;
        if (iy < 0 || iy >= in_h) continue;
        for (int px = 0; px < padded_w; ++px) {
          const int ix = px - pad;
          if (ix < 0 || ix >= in_w) continue;
          dst[static_cast<std::size_t>(iy) * static_cast<std::size_t>(in_w) + static_cast<std::size_t>(ix)] +=
              src[static_cast<std::size_t>(py) * static_cast<std::size_t>(padded_w) + static_cast<std::size_t>(px)];
        }
      }
    }
  }
};

inline std::size_t widx(int o, int i, int ci, int k, int ky, int kx) {
  return ((static_cast<std::size_t>(o) * static_cast<std::size_t>(ci) + static_cast<std::size_t>(i)) *
              static_cast<std::size_t>(k) +
          static_cast<std::size_t>(ky)) *
             static_cast<std::size_t>(k) +
         static_cast<std::size_t>(kx);
}

inline void conv_forward(const LayerSpec& l, const ConvGeometry& geo, const double* x, int n, int ci, int co,
                         const std::vector<double>& w, const std::vector<double>& b, double* y,
                         std::uint64_t& macs) {
  const int k = l.kernel;
  const bool depthwise = l.kind == LayerKind::DepthwiseConv;
  std::vector<double> xp;
  for (int s = 0; s < n; ++s) {
    const int planes = depthwise ? co : ci;
    geo.pad_planes(x + static_cast<std::size_t>(s) * static_cast<std::size_t>(planes) * geo.in_plane(), planes, xp);
    for (int o = 0; o < co; ++o) {
      double* yo = y + (static_cast<std::size_t>(s) * static_cast<std::size_t>(co) + static_cast<std::size_t>(o)) *
                           geo.out_plane();
      std::fill(yo, yo + geo.out_plane(), b[static_cast<std::size_t>(o)]);
      const int i_lo = depthwise ? o : 0;
      const int i_hi = depthwise ? o + 1 : ci;
      for (int i = i_lo; i < i_hi; ++i) {
        const double* xi = xp.data() + static_cast<std::size_t>(i) * geo.padded_plane();
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wv = w[widx(o, depthwise ? 0 : i, depthwise ? 1 : ci, k, ky, kx)];
            for (int oy = 0; oy < geo.out_h; ++oy) {
              const double* row = xi + static_cast<std::size_t>(oy * geo.stride_h + ky) *
                                           static_cast<std::size_t>(geo.padded_w) +
                                   static_cast<std::size_t>(kx);
              double* yrow = yo + static_cast<std::size_t>(oy) * static_cast<std::size_t>(geo.out_w);
              for (int ox = 0; ox < geo.out_w; ++ox) {
                yrow[ox] += wv * row[static_cast<std::size_t>(ox * geo.stride_w)];
                ++macs;
              }
            }
          }
        }
      }
    }
  }
}

inline void conv_backward(const LayerSpec& l, const ConvGeometry& geo, const double* x, int n, int ci, int co,
                          const std::vector<double>& w, const double* gy, std::vector<double>& dw,
                          std::vector<double>& db, double* dx) {
  const int k = l.kernel;
  const bool depthwise = l.kind == LayerKind::DepthwiseConv;
  const int planes = depthwise ? co : ci;
  std::vector<double> xp;
  std::vector<double> dxp;
  for (int s = 0; s < n; ++s) {
    geo.pad_planes(x + static_cast<std::size_t>(s) * static_cast<std::size_t>(planes) * geo.in_plane(), planes, xp);
    dxp.assign(xp.size(), 0.0);
    for (int o = 0; o < co; ++o) {
      const double* go = gy + (static_cast<std::size_t>(s) * static_cast<std::size_t>(co) +
                               static_cast<std::size_t>(o)) *
                                  geo.out_plane();
      double bsum = 0.0;
      for (std::size_t p = 0; p < geo.out_plane(); ++p) bsum += go[p];
      db[static_cast<std::size_t>(o)] += bsum;
      const int i_lo = depthwise ? o : 0;
      const int i_hi = depthwise ? o + 1 : ci;
      for (int i = i_lo; i < i_hi; ++i) {
        const double* xi = xp.data() + static_cast<std::size_t>(i) * geo.padded_plane();
        double* dxi = dxp.data() + static_cast<std::size_t>(i) * geo.padded_plane();
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const std::size_t wi = widx(o, depthwise ? 0 : i, depthwise ? 1 : ci, k, ky, kx);
            const double wv = w[wi];
            double acc = 0.0;
            for (int oy = 0; oy < geo.out_h; ++oy) {
              const std::size_t base = static_cast<std::size_t>(oy * geo.stride_h + ky) *
                                           static_cast<std::size_t>(geo.padded_w) +
                                       static_cast<std::size_t>(kx);
              const double* grow = go + static_cast<std::size_t>(oy) * static_cast<std::size_t>(geo.out_w);
              for (int ox = 0; ox < geo.out_w; ++ox) {
                const std::size_t p = base + static_cast<std::size_t>(ox * geo.stride_w);
                acc += grow[ox] * xi[p];
                dxi[p] += wv * grow[ox];
              }
            }
            dw[wi] += acc;
          }
        }
      }
    }
    geo.unpad_planes(dxp, planes, dx + static_cast<std::size_t>(s) * static_cast<std::size_t>(planes) * geo.in_plane());
  }
}

inline void dense_forward(const double* x, int n, int ci, std::size_t plane, int co, const std::vector<double>& w,
                          const std::vector<double>& b, double* y, std::uint64_t& macs) {
  std::vector<double> pooled(static_cast<std::size_t>(ci));
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < ci; ++i) {
      const double* xi = x + (static_cast<std::size_t>(s) * static_cast<std::size_t>(ci) + static_cast<std::size_t>(i)) * plane;
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += xi[p];
      pooled[static_cast<std::size_t>(i)] = acc / static_cast<double>(plane);
    }
    for (int o = 0; o < co; ++o) {
      double acc = b[static_cast<std::size_t>(o)];
      const double* wo = w.data() + static_cast<std::size_t>(o) * static_cast<std::size_t>(ci);
      for (int i = 0; i < ci; ++i) {
        acc += wo[i] * pooled[static_cast<std::size_t>(i)];
        ++macs;
      }
      y[static_cast<std::size_t>(s) * static_cast<std::size_t>(co) + static_cast<std::size_t>(o)] = acc;
    }
  }
}

inline void dense_backward(const double* x, int n, int ci, std::size_t plane, int co, const std::vector<double>& w,
                           const double* gy, std::vector<double>& dw, std::vector<double>& db, double* dx) {
  std::vector<double> pooled(static_cast<std::size_t>(ci));
  std::vector<double> dpooled(static_cast<std::size_t>(ci));
  for (int s = 0; s < n; ++s) {
    for (int i = 0; i < ci; ++i) {
      const double* xi = x + (static_cast<std::size_t>(s) * static_cast<std::size_t>(ci) + static_cast<std::size_t>(i)) * plane;
      double acc = 0.0;
      for (std::size_t p = 0; p < plane; ++p) acc += xi[p];
      pooled[static_cast<std::size_t>(i)] = acc / static_cast<double>(plane);
    }
    std::fill(dpooled.begin(), dpooled.end(), 0.0);
    for (int o = 0; o < co; ++o) {
      const double g = gy[static_cast<std::size_t>(s) * static_cast<std::size_t>(co) + static_cast<std::size_t>(o)];
      db[static_cast<std::size_t>(o)] += g;
      const std::size_t row = static_cast<std::size_t>(o) * static_cast<std::size_t>(ci);
      for (int i = 0; i < ci; ++i) {
        dw[row + static_cast<std::size_t>(i)] += g * pooled[static_cast<std::size_t>(i)];
        dpooled[static_cast<std::size_t>(i)] += g * w[row + static_cast<std::size_t>(i)];
      }
    }
    for (int i = 0; i < ci; ++i) {
      double* dxi = dx + (static_cast<std::size_t>(s) * static_cast<std::size_t>(ci) + static_cast<std::size_t>(i)) * plane;
      const double share = dpooled[static_cast<std::size_t>(i)] / static_cast<double>(plane);
      for (std::size_t p = 0; p < plane; ++p) dxi[p] += share;
    }
  }
}

inline bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double d) { return std::isfinite(d); });
}

}  // namespace detail

/// Runs the sub-network and keeps every intermediate needed for the backward pass.
inline ForwardTrace forward_trace(const SupernetState& state, const NetworkGraph& graph, const Subnet& sub,
                                  const Batch& batch) {
  if (batch.size() == 0) throw DataError("empty batch");
  if (batch.channels != graph.input_channels() || batch.height != graph.input_h() ||
      batch.width != graph.input_w()) {
    throw DataError("batch shape " + std::to_string(batch.channels) + "x" + std::to_string(batch.height) + "x" +
                    std::to_string(batch.width) + " does not match the network input");
  }
  if (state.layers.size() != graph.size() || sub.size() != graph.size()) {
    throw InvalidWidthError("state or sub-network does not match the graph");
  }
  const int n = static_cast<int>(batch.size());
  ForwardTrace t;
  t.values.push_back(batch.inputs);
  std::map<std::string, int> current{{std::string(kInputGroup), 0}};

  for (const auto& l : graph.layers()) {
    const auto li = static_cast<std::size_t>(l.id - 1);
    const auto& p = state.layers[li];
    const auto& sl = sub[li];
    LayerTrace lt;
    lt.in_id = current.at(l.input_group);
    lt.ci = static_cast<int>(sl.in_idx.size());
    lt.co = static_cast<int>(sl.out_idx.size());
    std::tie(lt.in_h, lt.in_w) = graph.input_resolution(l.id);
    const int k = l.kernel;
    const bool depthwise = l.kind == LayerKind::DepthwiseConv;

    const int wci = depthwise ? 1 : lt.ci;
    lt.weight.resize(static_cast<std::size_t>(lt.co) * static_cast<std::size_t>(wci) * static_cast<std::size_t>(k * k));
    lt.bias.resize(static_cast<std::size_t>(lt.co));
    for (int o = 0; o < lt.co; ++o) {
      const int fo = sl.out_idx[static_cast<std::size_t>(o)];
      lt.bias[static_cast<std::size_t>(o)] = p.bias[static_cast<std::size_t>(fo)];
      for (int i = 0; i < wci; ++i) {
        const int fi = depthwise ? 0 : sl.in_idx[static_cast<std::size_t>(i)];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            lt.weight[detail::widx(o, i, wci, k, ky, kx)] = p.weight[p.index(fo, fi, ky, kx)];
          }
        }
      }
    }

    const auto& x = t.values[static_cast<std::size_t>(lt.in_id)];
    const std::size_t out_plane = static_cast<std::size_t>(l.out_h) * static_cast<std::size_t>(l.out_w);
    lt.output.assign(static_cast<std::size_t>(n) * static_cast<std::size_t>(lt.co) * out_plane, 0.0);
    if (l.kind == LayerKind::Dense) {
      detail::dense_forward(x.data(), n, lt.ci,
                            static_cast<std::size_t>(lt.in_h) * static_cast<std::size_t>(lt.in_w), lt.co, lt.weight,
                            lt.bias, lt.output.data(), t.macs);
    } else {
      const detail::ConvGeometry geo(lt.in_h, lt.in_w, l.out_h, l.out_w, k);
      detail::conv_forward(l, geo, x.data(), n, lt.ci, lt.co, lt.weight, lt.bias, lt.output.data(), t.macs);
    }
    const bool classifier = l.width_group == kOutputGroup;
    if (!classifier) {
      for (auto& v : lt.output) v = v < 0.0 ? 0.0 : v;  // keeps NaN visible
    }
    if (!detail::all_finite(lt.output)) {
      throw TrainingError("non-finite activation in layer " + std::to_string(l.id), l.id);
    }

    std::vector<double> out = lt.output;
    if (graph.merges(l.id)) {
      lt.merge_id = current.at(l.width_group);
      const auto& prev = t.values[static_cast<std::size_t>(lt.merge_id)];
      for (std::size_t e = 0; e < out.size(); ++e) out[e] += prev[e];
    }
    lt.out_id = static_cast<int>(t.values.size());
    t.values.push_back(std::move(out));
    current[l.width_group] = lt.out_id;
    t.layers.push_back(std::move(lt));
  }

  // softmax cross-entropy over the classifier output
  const int classes = graph.num_classes();
  t.logits = t.values.back();
  t.probs.resize(t.logits.size());
  double total = 0.0;
  for (int s = 0; s < n; ++s) {
    const double* z = t.logits.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(classes);
    double* pr = t.probs.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(classes);
    const double zmax = *std::max_element(z, z + classes);
    double sum = 0.0;
    for (int c = 0; c < classes; ++c) sum += std::exp(z[c] - zmax);
    const double lse = zmax + std::log(sum);
    for (int c = 0; c < classes; ++c) pr[c] = std::exp(z[c] - lse);
    const int y = batch.labels[static_cast<std::size_t>(s)];
    if (y < 0 || y >= classes) throw DataError("label " + std::to_string(y) + " out of range");
    total += lse - z[y];
  }
  t.loss = total / n;
  if (!std::isfinite(t.loss)) throw TrainingError("non-finite loss", static_cast<int>(graph.size()));
  return t;
}

struct ForwardResult {
  double loss = 0.0;
  std::vector<double> logits;  // N x num_classes
  std::uint64_t macs = 0;
};

inline ForwardResult masked_forward(const SupernetState& state, const NetworkGraph& graph, const Subnet& sub,
                                    const Batch& batch) {
  auto t = forward_trace(state, graph, sub, batch);
  return {t.loss, std::move(t.logits), t.macs};
}

inline ForwardResult masked_forward(const SupernetState& state, const NetworkGraph& graph,
                                    const ChannelAssignment& assignment, const Batch& batch) {
  return masked_forward(state, graph, make_subnet(graph, assignment), batch);
}

// ---------------------------------------------------------------------------
// Backward and update

struct LayerGrad {
  std::vector<double> weight;  // compact, same layout as LayerTrace::weight
  std::vector<double> bias;
};

struct Gradients {
  double loss = 0.0;
  std::vector<LayerGrad> layers;
};

inline Gradients compute_gradients(const SupernetState& state, const NetworkGraph& graph, const Subnet& sub,
                                   const Batch& batch) {
  const ForwardTrace t = forward_trace(state, graph, sub, batch);
  const int n = static_cast<int>(batch.size());
  const int classes = graph.num_classes();

  std::vector<std::vector<double>> grads(t.values.size());
  auto grad_of = [&](int id) -> std::vector<double>& {
    auto& g = grads[static_cast<std::size_t>(id)];
    if (g.empty()) g.assign(t.values[static_cast<std::size_t>(id)].size(), 0.0);
    return g;
  };
  {
    auto& gz = grad_of(static_cast<int>(t.values.size()) - 1);
    for (int s = 0; s < n; ++s) {
      for (int c = 0; c < classes; ++c) {
        const std::size_t e = static_cast<std::size_t>(s) * static_cast<std::size_t>(classes) + static_cast<std::size_t>(c);
        gz[e] = (t.probs[e] - (batch.labels[static_cast<std::size_t>(s)] == c ? 1.0 : 0.0)) / n;
      }
    }
  }

  Gradients out;
  out.loss = t.loss;
  out.layers.resize(graph.size());
  for (auto it = graph.layers().rbegin(); it != graph.layers().rend(); ++it) {
    const auto& l = *it;
    const auto li = static_cast<std::size_t>(l.id - 1);
    const auto& lt = t.layers[li];
    std::vector<double> gy = grad_of(lt.out_id);
    if (lt.merge_id >= 0) {
      auto& gm = grad_of(lt.merge_id);
      for (std::size_t e = 0; e < gy.size(); ++e) gm[e] += gy[e];
    }
    if (l.width_group != kOutputGroup) {
      for (std::size_t e = 0; e < gy.size(); ++e) {
        if (lt.output[e] <= 0.0) gy[e] = 0.0;
      }
    }
    auto& lg = out.layers[li];
    lg.weight.assign(lt.weight.size(), 0.0);
    lg.bias.assign(lt.bias.size(), 0.0);
    const auto& x = t.values[static_cast<std::size_t>(lt.in_id)];
    auto& dx = grad_of(lt.in_id);
    if (l.kind == LayerKind::Dense) {
      detail::dense_backward(x.data(), n, lt.ci, static_cast<std::size_t>(lt.in_h) * static_cast<std::size_t>(lt.in_w),
                             lt.co, lt.weight, gy.data(), lg.weight, lg.bias, dx.data());
    } else {
      const detail::ConvGeometry geo(lt.in_h, lt.in_w, l.out_h, l.out_w, l.kernel);
      detail::conv_backward(l, geo, x.data(), n, lt.ci, lt.co, lt.weight, gy.data(), lg.weight, lg.bias, dx.data());
    }
    if (!detail::all_finite(lg.weight) || !detail::all_finite(lg.bias)) {
      throw TrainingError("non-finite gradient in layer " + std::to_string(l.id), l.id);
    }
  }
  return out;
}

struct SgdParams {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

/// SGD with momentum on the addressed slice only: v = mu*v + (g + wd*w); w -= lr*v.
/// A zero learning rate leaves the state untouched, momentum buffers included.
inline void apply_sgd(SupernetState& state, const NetworkGraph& graph, const Subnet& sub, const Gradients& grads,
                      const SgdParams& sgd) {
  if (!(sgd.lr >= 0.0) || sgd.momentum < 0.0 || sgd.momentum >= 1.0 || sgd.weight_decay < 0.0) {
    throw std::invalid_argument("sgd needs lr >= 0, momentum in [0, 1), weight_decay >= 0");
  }
  if (sgd.lr == 0.0) return;
  for (const auto& l : graph.layers()) {
    const auto li = static_cast<std::size_t>(l.id - 1);
    auto& p = state.layers[li];
    const auto& sl = sub[li];
    const auto& lg = grads.layers[li];
    const bool depthwise = l.kind == LayerKind::DepthwiseConv;
    const int ci = depthwise ? 1 : static_cast<int>(sl.in_idx.size());
    const int co = static_cast<int>(sl.out_idx.size());
    const int k = l.kernel;
    auto update = [&](double& w, double& v, double g) {
      v = sgd.momentum * v + (g + sgd.weight_decay * w);
      w -= sgd.lr * v;
    };
    for (int o = 0; o < co; ++o) {
      const int fo = sl.out_idx[static_cast<std::size_t>(o)];
      update(p.bias[static_cast<std::size_t>(fo)], p.bias_momentum[static_cast<std::size_t>(fo)],
             lg.bias[static_cast<std::size_t>(o)]);
      for (int i = 0; i < ci; ++i) {
        const int fi = depthwise ? 0 : sl.in_idx[static_cast<std::size_t>(i)];
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const std::size_t full = p.index(fo, fi, ky, kx);
            update(p.weight[full], p.weight_momentum[full], lg.weight[detail::widx(o, i, ci, k, ky, kx)]);
          }
        }
      }
    }
  }
  ++state.step;
}

/// One reverse-mode pass on the sub-network followed by one masked update.
/// Returns the batch loss before the update.
inline double backward_and_step(SupernetState& state, const NetworkGraph& graph, const Subnet& sub,
                                const Batch& batch, const SgdParams& sgd) {
  const Gradients g = compute_gradients(state, graph, sub, batch);
  apply_sgd(state, graph, sub, g, sgd);
  return g.loss;
}

inline double backward_and_step(SupernetState& state, const NetworkGraph& graph, const ChannelAssignment& assignment,
                                const Batch& batch, const SgdParams& sgd) {
  return backward_and_step(state, graph, make_subnet(graph, assignment), batch, sgd);
}

// ---------------------------------------------------------------------------
// Evaluation

/// Fraction of samples whose arg-max logit (lowest index on ties) is the label.
inline double evaluate(const SupernetState& state, const NetworkGraph& graph, const Subnet& sub,
                       const Dataset& data, std::size_t chunk = 256) {
  if (data.size() == 0) throw DataError("cannot evaluate on an empty dataset");
  const int classes = graph.num_classes();
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t stop = std::min(data.size(), start + chunk);
    idx.resize(stop - start);
    for (std::size_t i = start; i < stop; ++i) idx[i - start] = i;
    const Batch b = (start == 0 && stop == data.size()) ? data : data.subset(idx);
    const auto r = masked_forward(state, graph, sub, b);
    for (std::size_t s = 0; s < b.size(); ++s) {
      const double* z = r.logits.data() + s * static_cast<std::size_t>(classes);
      const auto best = static_cast<int>(std::max_element(z, z + classes) - z);
      if (best == b.labels[s]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline double evaluate(const SupernetState& state, const NetworkGraph& graph, const ChannelAssignment& assignment,
                       const Dataset& data) {
  return evaluate(state, graph, make_subnet(graph, assignment), data);
}

// ---------------------------------------------------------------------------
// Checkpoint: "CAFW1", u32 tensor count, then per tensor
// {u32 name length, name, u32 rank, u64 dims[rank], f64 payload}; little-endian.

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xffu));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) os.put(static_cast<char>((v >> (8 * b)) & 0xffu));
}
inline std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) {
    const int c = is.get();
    if (c == EOF) throw CheckpointError("truncated checkpoint");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SupernetState& state) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write checkpoint '" + path + "'");
  os.write("CAFW1", 5);
  detail::put_u32(os, static_cast<std::uint32_t>(state.layers.size() * 4 + 1));
  auto tensor = [&](const std::string& name, const std::vector<std::uint64_t>& dims, const std::vector<double>& data) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(dims.size()));
    for (auto d : dims) detail::put_u64(os, d);
    for (double v : data) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  };
  for (std::size_t i = 0; i < state.layers.size(); ++i) {
    const auto& p = state.layers[i];
    const std::string prefix = "layer" + std::to_string(i + 1) + ".";
    const std::vector<std::uint64_t> wdims{static_cast<std::uint64_t>(p.n_out), static_cast<std::uint64_t>(p.n_in),
                                           static_cast<std::uint64_t>(p.kernel), static_cast<std::uint64_t>(p.kernel)};
    const std::vector<std::uint64_t> bdims{static_cast<std::uint64_t>(p.n_out)};
    tensor(prefix + "weight", wdims, p.weight);
    tensor(prefix + "bias", bdims, p.bias);
    tensor(prefix + "weight_momentum", wdims, p.weight_momentum);
    tensor(prefix + "bias_momentum", bdims, p.bias_momentum);
  }
  tensor("step", {1}, {static_cast<double>(state.step)});
  if (!os) throw CheckpointError("failed writing checkpoint '" + path + "'");
}

/// Loads a checkpoint and checks every tensor shape against `graph`.
inline SupernetState load_checkpoint(const std::string& path, const NetworkGraph& graph) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint '" + path + "'");
  char magic[5];
  if (!is.read(magic, 5) || std::memcmp(magic, "CAFW1", 5) != 0) throw CheckpointError("bad checkpoint magic");
  SupernetState expect = SupernetState::initialize(graph, 0);
  const auto count = detail::get_uint(is, 4);
  if (count != expect.layers.size() * 4 + 1) throw CheckpointError("checkpoint tensor count does not match graph");
  std::map<std::string, std::pair<std::vector<std::uint64_t>, std::vector<double>*>> slots;
  for (std::size_t i = 0; i < expect.layers.size(); ++i) {
    auto& p = expect.layers[i];
    const std::string prefix = "layer" + std::to_string(i + 1) + ".";
    const std::vector<std::uint64_t> wdims{static_cast<std::uint64_t>(p.n_out), static_cast<std::uint64_t>(p.n_in),
                                           static_cast<std::uint64_t>(p.kernel), static_cast<std::uint64_t>(p.kernel)};
    const std::vector<std::uint64_t> bdims{static_cast<std::uint64_t>(p.n_out)};
    slots[prefix + "weight"] = {wdims, &p.weight};
    slots[prefix + "bias"] = {bdims, &p.bias};
    slots[prefix + "weight_momentum"] = {wdims, &p.weight_momentum};
    slots[prefix + "bias_momentum"] = {bdims, &p.bias_momentum};
  }
  std::vector<double> step(1);
  slots["step"] = {{1}, &step};
  for (std::uint64_t t = 0; t < count; ++t) {
    const auto len = detail::get_uint(is, 4);
    if (len > 4096) throw CheckpointError("implausible tensor name length");
    std::string name(len, '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(len))) throw CheckpointError("truncated checkpoint");
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError("unexpected tensor '" + name + "'");
    const auto rank = detail::get_uint(is, 4);
    std::vector<std::uint64_t> dims(rank);
    for (auto& d : dims) d = detail::get_uint(is, 8);
    if (dims != it->second.first) throw CheckpointError("tensor '" + name + "' has the wrong shape for this graph");
    for (auto& v : *it->second.second) v = std::bit_cast<double>(detail::get_uint(is, 8));
    slots.erase(it);
  }
  expect.step = static_cast<std::uint64_t>(step[0]);
  return expect;
}

}  // namespace cafewidth
