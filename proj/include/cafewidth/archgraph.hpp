#pragma once

// Network description, analytic FLOPs and per-group FLOPs sensitivity.
//
// A network is an ordered list of layers. Each layer reads the activation of
// its input_group and writes the activation of its width_group. Layers that
// write the same group share one searchable width. Two group names are
// reserved: "input" is the fixed network input and "output" is the fixed
// classifier output produced by the last layer.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cafewidth/errors.hpp"
#include <nlohmann/json.hpp>

namespace cafewidth {

using Flops = std::uint64_t;

inline constexpr std::string_view kInputGroup = "input";
inline constexpr std::string_view kOutputGroup = "output";

enum class LayerKind { Conv, DepthwiseConv, Dense };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::DepthwiseConv: return "depthwise";
    case LayerKind::Dense: return "dense";
  }
  return "?";
}

inline LayerKind parse_layer_kind(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "conv") return LayerKind::Conv;
  if (s == "depthwise" || s == "depthwiseconv" || s == "dwconv") return LayerKind::DepthwiseConv;
  if (s == "dense" || s == "fc" || s == "linear") return LayerKind::Dense;
  throw InvalidGraphError("unknown layer kind '" + s + "'");
}

struct LayerSpec {
  int id = 0;  // 1-based position in the graph
  LayerKind kind = LayerKind::Conv;
  int out_h = 1;
  int out_w = 1;
  int kernel = 1;
  int max_width = 1;
  std::string width_group;
  std::string input_group;
};

/// Integer value per searchable width group. The tag keeps channel counts and
/// bin counts from being mixed up.
template <class Tag>
class GroupMap {
 public:
  GroupMap() = default;
  GroupMap(std::initializer_list<std::pair<const std::string, int>> init) : values_(init) {}

  int& operator[](const std::string& g) { return values_[g]; }
  int at(const std::string& g) const {
    auto it = values_.find(g);
    if (it == values_.end()) throw InvalidWidthError("no entry for group '" + g + "'");
    return it->second;
  }
  bool contains(const std::string& g) const { return values_.count(g) != 0; }
  std::size_t size() const { return values_.size(); }
  auto begin() const { return values_.begin(); }
  auto end() const { return values_.end(); }
  const std::map<std::string, int>& values() const { return values_; }

  friend bool operator==(const GroupMap&, const GroupMap&) = default;
  friend auto operator<=>(const GroupMap& a, const GroupMap& b) { return a.values_ <=> b.values_; }

 private:
  std::map<std::string, int> values_;
};

template <class Tag>
void to_json(nlohmann::json& j, const GroupMap<Tag>& m) {
  j = m.values();
}
template <class Tag>
void from_json(const nlohmann::json& j, GroupMap<Tag>& m) {
  m = GroupMap<Tag>{};
  for (auto it = j.begin(); it != j.end(); ++it) m[it.key()] = it.value().template get<int>();
}

struct ChannelTag;
struct BinTag;
/// Channel count per group.
using WidthVector = GroupMap<ChannelTag>;
/// Number of selected bins per group.
using BinCounts = GroupMap<BinTag>;

class NetworkGraph {
 public:
  NetworkGraph() = default;

  /// Builds and validates. Layer ids are reassigned to 1..L in order.
  NetworkGraph(std::vector<LayerSpec> layers, int input_channels, int num_classes, int input_h,
               int input_w)
      : layers_(std::move(layers)),
        input_channels_(input_channels),
        num_classes_(num_classes),
        input_h_(input_h),
        input_w_(input_w) {
    for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].id = static_cast<int>(i) + 1;
    validate();
  }

  const std::vector<LayerSpec>& layers() const { return layers_; }
  const LayerSpec& layer(int id) const { return layers_.at(static_cast<std::size_t>(id - 1)); }
  std::size_t size() const { return layers_.size(); }
  int input_channels() const { return input_channels_; }
  int num_classes() const { return num_classes_; }
  int input_h() const { return input_h_; }
  int input_w() const { return input_w_; }

  /// Searchable groups in order of first production.
  const std::vector<std::string>& groups() const { return groups_; }
  bool is_searchable(const std::string& g) const { return group_max_.count(g) != 0; }

  int max_width(const std::string& g) const {
    if (g == kInputGroup) return input_channels_;
    if (g == kOutputGroup) return num_classes_;
    auto it = group_max_.find(g);
    if (it == group_max_.end()) throw InvalidWidthError("unknown width group '" + g + "'");
    return it->second;
  }

  /// Spatial size of the activation a layer reads.
  std::pair<int, int> input_resolution(int id) const { return in_res_.at(static_cast<std::size_t>(id - 1)); }

  /// True when the layer adds its output onto an existing activation of its group.
  bool merges(int id) const { return merges_.at(static_cast<std::size_t>(id - 1)); }

  WidthVector full_widths() const {
    WidthVector w;
    for (const auto& g : groups_) w[g] = group_max_.at(g);
    return w;
  }

  WidthVector min_widths() const {
    WidthVector w;
    for (const auto& g : groups_) w[g] = 1;
    return w;
  }

  /// Copy of this graph with each searchable group's maximum replaced.
  NetworkGraph with_max_widths(const WidthVector& maxima) const {
    std::vector<LayerSpec> layers = layers_;
    for (auto& l : layers) {
      if (l.width_group != kOutputGroup) l.max_width = maxima.at(l.width_group);
    }
    return NetworkGraph(std::move(layers), input_channels_, num_classes_, input_h_, input_w_);
  }

  /// Channel count flowing through `group` under `widths`; fixed groups ignore `widths`.
  int resolve(const std::string& group, const WidthVector& widths) const {
    if (group == kInputGroup) return input_channels_;
    if (group == kOutputGroup) return num_classes_;
    return widths.at(group);
  }

 private:
  void validate() {
    auto fail = [](const LayerSpec& l, const std::string& msg) {
      throw InvalidGraphError("layer " + std::to_string(l.id) + ": " + msg);
    };
    if (input_channels_ < 1) throw InvalidGraphError("input_channels must be >= 1");
    if (num_classes_ < 1) throw InvalidGraphError("num_classes must be >= 1");
    if (input_h_ < 1 || input_w_ < 1) throw InvalidGraphError("input resolution must be >= 1");
    if (layers_.empty()) throw InvalidGraphError("graph has no layers");

    std::map<std::string, std::pair<int, int>> res;  // current resolution per produced group
    res[std::string(kInputGroup)] = {input_h_, input_w_};
    std::set<std::string> consumed;
    groups_.clear();
    group_max_.clear();
    in_res_.clear();
    merges_.clear();

    for (const auto& l : layers_) {
      const bool last = l.id == static_cast<int>(layers_.size());
      if (l.max_width < 1) fail(l, "max_width must be >= 1");
      if (l.kernel < 1) fail(l, "kernel must be >= 1");
      if (l.out_h < 1 || l.out_w < 1) fail(l, "out_h and out_w must be >= 1");
      if (l.width_group.empty()) fail(l, "width_group is empty");
      if (l.width_group == kInputGroup) fail(l, "layers cannot produce the reserved 'input' group");
      if (last && l.width_group != kOutputGroup) fail(l, "the last layer must produce the 'output' group");
      if (!last && l.width_group == kOutputGroup) fail(l, "only the last layer may produce 'output'");
      if (last && l.max_width != num_classes_) fail(l, "classifier width must equal num_classes");
      if (last && (l.out_h != 1 || l.out_w != 1)) fail(l, "classifier output resolution must be 1x1");

      auto src = res.find(l.input_group);
      if (src == res.end()) {
        fail(l, "input_group '" + l.input_group + "' is not produced by an earlier layer");
      }
      const auto [in_h, in_w] = src->second;

      if (l.kind == LayerKind::DepthwiseConv) {
        if (l.input_group != l.width_group) fail(l, "depthwise layers need input_group == width_group");
      } else if (l.input_group == l.width_group) {
        fail(l, "only depthwise layers may read and write the same group");
      }
      if (l.kind == LayerKind::Dense) {
        if (l.out_h != 1 || l.out_w != 1 || l.kernel != 1) fail(l, "dense layers need out_h = out_w = kernel = 1");
      } else {
        if (l.out_h > in_h || l.out_w > in_w || in_h % l.out_h != 0 || in_w % l.out_w != 0) {
          fail(l, "output resolution must evenly divide the input resolution");
        }
      }

      if (l.width_group != kOutputGroup) {
        auto [it, inserted] = group_max_.emplace(l.width_group, l.max_width);
        if (inserted) {
          groups_.push_back(l.width_group);
        } else if (it->second != l.max_width) {
          fail(l, "group '" + l.width_group + "' has inconsistent max_width");
        }
      }

      bool merge = false;
      if (l.input_group != l.width_group) {
        consumed.insert(l.input_group);
        if (auto prev = res.find(l.width_group); prev != res.end()) {
          merge = true;
          if (prev->second != std::make_pair(l.out_h, l.out_w)) {
            fail(l, "merging into group '" + l.width_group + "' needs a matching resolution");
          }
        }
      }
      in_res_.emplace_back(in_h, in_w);
      merges_.push_back(merge);
      res[l.width_group] = {l.out_h, l.out_w};
    }
    for (const auto& g : groups_) {
      if (!consumed.count(g)) throw InvalidGraphError("group '" + g + "' is never consumed");
    }
  }

  std::vector<LayerSpec> layers_;
  int input_channels_ = 1;
  int num_classes_ = 1;
  int input_h_ = 1;
  int input_w_ = 1;
  std::vector<std::string> groups_;
  std::map<std::string, int> group_max_;
  std::vector<std::pair<int, int>> in_res_;
  std::vector<bool> merges_;
};

// ---------------------------------------------------------------------------
// FLOPs accounting (multiply-accumulates only)

inline Flops layer_flops(std::int64_t c_in, std::int64_t c_out, const LayerSpec& layer) {
  if (c_in < 0 || c_out < 0) throw InvalidWidthError("negative channel count");
  const Flops spatial = static_cast<Flops>(layer.out_h) * static_cast<Flops>(layer.out_w) *
                        static_cast<Flops>(layer.kernel) * static_cast<Flops>(layer.kernel);
  if (layer.kind == LayerKind::DepthwiseConv) {
    if (c_in != c_out) {
      throw InvalidWidthError("layer " + std::to_string(layer.id) + ": depthwise needs c_in == c_out");
    }
    return static_cast<Flops>(c_out) * spatial;
  }
  return static_cast<Flops>(c_in) * static_cast<Flops>(c_out) * spatial;
}

inline void check_widths(const NetworkGraph& graph, const WidthVector& widths) {
  for (const auto& g : graph.groups()) {
    const int c = widths.at(g);
    if (c < 1 || c > graph.max_width(g)) {
      throw InvalidWidthError("group '" + g + "' width " + std::to_string(c) + " outside [1, " +
                              std::to_string(graph.max_width(g)) + "]");
    }
  }
  for (const auto& [g, c] : widths) {
    if (!graph.is_searchable(g)) throw InvalidWidthError("width vector names unknown group '" + g + "'");
  }
}

inline Flops network_flops(const NetworkGraph& graph, const WidthVector& widths) {
  check_widths(graph, widths);
  Flops total = 0;
  for (const auto& l : graph.layers()) {
    total += layer_flops(graph.resolve(l.input_group, widths), graph.resolve(l.width_group, widths), l);
  }
  return total;
}

inline Flops supernet_flops(const NetworkGraph& graph) { return network_flops(graph, graph.full_widths()); }

/// FLOPs contributed by one channel of `group` with every neighbouring width at
/// its maximum: one output channel of each producer plus one input channel of
/// each consumer.
inline Flops sensitivity(const NetworkGraph& graph, const std::string& group) {
  if (!graph.is_searchable(group)) throw InvalidWidthError("group '" + group + "' is not searchable");
  Flops eps = 0;
  for (const auto& l : graph.layers()) {
    if (l.kind == LayerKind::DepthwiseConv) {
      // per-channel op; counted once as producer
      if (l.width_group == group) eps += layer_flops(1, 1, l);
      continue;
    }
    if (l.width_group == group) eps += layer_flops(graph.max_width(l.input_group), 1, l);
    if (l.input_group == group) eps += layer_flops(1, graph.max_width(l.width_group), l);
  }
  return eps;
}

// ---------------------------------------------------------------------------
// Architecture spec file

inline NetworkGraph graph_from_json(const nlohmann::json& j) {
  try {
    const int input_channels = j.at("input_channels").get<int>();
    const int num_classes = j.at("num_classes").get<int>();
    const auto& arr = j.at("layers");
    if (!arr.is_array() || arr.empty()) throw InvalidGraphError("'layers' must be a non-empty array");
    std::vector<LayerSpec> layers;
    std::string prev_group(kInputGroup);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const auto& lj = arr[i];
      const bool last = i + 1 == arr.size();
      LayerSpec l;
      l.id = static_cast<int>(i) + 1;
      try {
        l.kind = parse_layer_kind(lj.at("kind").get<std::string>());
        l.out_h = lj.value("out_h", 1);
        l.out_w = lj.value("out_w", 1);
        l.kernel = lj.value("kernel", 1);
        l.width_group = lj.value("width_group", last ? std::string(kOutputGroup) : std::string());
        l.max_width = lj.value("max_width", last ? num_classes : 0);
        l.input_group = lj.value("input_group", prev_group);
      } catch (const nlohmann::json::exception& e) {
        throw InvalidGraphError("layer " + std::to_string(l.id) + ": " + e.what());
      } catch (const InvalidGraphError& e) {
        throw InvalidGraphError("layer " + std::to_string(l.id) + ": " + e.what());
      }
      prev_group = l.width_group;
      layers.push_back(std::move(l));
    }
    // Input resolution defaults to the first layer's input, i.e. its output size.
    const int in_h = j.value("input_h", layers.front().out_h);
    const int in_w = j.value("input_w", layers.front().out_w);
    return NetworkGraph(std::move(layers), input_channels, num_classes, in_h, in_w);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidGraphError(std::string("architecture spec: ") + e.what());
  }
}

inline nlohmann::json graph_to_json(const NetworkGraph& g) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : g.layers()) {
    layers.push_back({{"kind", to_string(l.kind)},
                      {"out_h", l.out_h},
                      {"out_w", l.out_w},
                      {"kernel", l.kernel},
                      {"max_width", l.max_width},
                      {"width_group", l.width_group},
                      {"input_group", l.input_group}});
  }
  return {{"input_channels", g.input_channels()},
          {"num_classes", g.num_classes()},
          {"input_h", g.input_h()},
          {"input_w", g.input_w()},
          {"layers", layers}};
}

inline NetworkGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidGraphError("cannot open architecture spec '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidGraphError("architecture spec '" + path + "': " + e.what());
  }
  return graph_from_json(j);
}

}  // namespace cafewidth
