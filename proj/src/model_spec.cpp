#include "ghostv2/model_spec.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

#include "builtin_specs.hpp"

namespace ghostv2 {

namespace {

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
  if (!node.IsMap()) throw ConfigError(where + ": expected a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      std::string list;
      for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
      throw ConfigError(where + ": unknown key '" + key + "' (allowed: " + list + ")");
    }
  }
}

template <typename V>
void read(const YAML::Node& node, const char* key, V& out, const std::string& where) {
  if (!node[key]) return;
  try {
    out = node[key].as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where + ": key '" + key + "' has an invalid value");
  }
}

template <typename V>
void read_opt(const YAML::Node& node, const char* key, std::optional<V>& out, const std::string& where) {
  if (!node[key]) return;
  V v{};
  read(node, key, v, where);
  out = v;
}

void read_placement(const YAML::Node& node, std::optional<Placement>& out, const std::string& where) {
  std::optional<std::string> s;
  read_opt(node, "placement", s, where);
  if (s) out = parse_placement(*s);
}

BlockSpec parse_block(const YAML::Node& node, const std::string& where) {
  check_keys(node, {"dw_kernel", "expand", "out", "se", "stride", "placement", "kernel"}, where);
  BlockSpec b;
  if (!node["expand"] || !node["out"]) throw ConfigError(where + ": 'expand' and 'out' are required");
  read(node, "dw_kernel", b.dw_kernel, where);
  read(node, "expand", b.expand, where);
  read(node, "out", b.out, where);
  read(node, "se", b.se, where);
  read(node, "stride", b.stride, where);
  read_placement(node, b.placement, where);
  read_opt(node, "kernel", b.kernel, where);
  return b;
}

}  // namespace

void ModelSpec::validate() const {
  if (!(width > 0.0)) throw ConfigError("model: width must be positive");
  if (input_size < 1 || in_channels < 1) throw ConfigError("model: input_size and in_channels must be positive");
  if (!(bn_eps > 0.0)) throw ConfigError("model: bn_eps must be positive");
  if (stem.channels < 1 || (stem.stride != 1 && stem.stride != 2) || stem.kernel < 1 || stem.kernel % 2 == 0) {
    throw ConfigError("stem: channels must be positive, stride 1 or 2, kernel odd");
  }
  if (head.conv_channels < 1 || head.feature_size < 1 || head.num_classes < 1) {
    throw ConfigError("head: channel counts must be positive");
  }
  if (kernel_schedule.empty()) throw ConfigError("kernel_schedule: at least one rule is required");
  for (const auto& r : kernel_schedule) {
    if (r.kernel < 1 || r.kernel % 2 == 0) {
      throw ConfigError("kernel_schedule: kernel " + std::to_string(r.kernel) + " must be odd and positive");
    }
  }
  if (stages.empty()) throw ConfigError("model: at least one stage is required");
  try {
    DfcOptions o = dfc;
    o.k_h = o.k_w = 1;
    o.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("dfc: ") + e.what());
  }
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const StageSpec& st = stages[s];
    const std::string sname = "stage '" + (st.name.empty() ? std::to_string(s) : st.name) + "'";
    if (st.blocks.empty()) throw ConfigError(sname + ": no blocks");
    if (st.kernel && (*st.kernel < 1 || *st.kernel % 2 == 0)) throw ConfigError(sname + ": kernel must be odd");
    for (std::size_t b = 0; b < st.blocks.size(); ++b) {
      const BlockSpec& bs = st.blocks[b];
      const std::string where = sname + " block " + std::to_string(b);
      if (bs.expand < 1 || bs.out < 1) throw ConfigError(where + ": channel counts must be positive");
      if (bs.stride != 1 && bs.stride != 2) throw ConfigError(where + ": stride must be 1 or 2");
      if (bs.dw_kernel < 1 || bs.dw_kernel % 2 == 0) throw ConfigError(where + ": dw_kernel must be odd");
      if (bs.se < 0.0 || bs.se > 1.0) throw ConfigError(where + ": se must lie in [0, 1]");
      if (bs.kernel && (*bs.kernel < 1 || *bs.kernel % 2 == 0)) throw ConfigError(where + ": kernel must be odd");
    }
  }
}

int ModelSpec::scheduled_kernel(std::int64_t feature_size) const {
  for (const auto& r : kernel_schedule) {
    if (feature_size >= r.min_size) return r.kernel;
  }
  return kernel_schedule.back().kernel;
}

ModelSpec parse_model_spec(const std::string& yaml_text, const std::string& origin) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(origin + ": malformed YAML: " + e.what());
  }
  check_keys(root,
             {"name", "width", "input_size", "in_channels", "bn_eps", "stem", "placement", "dfc", "kernel_schedule",
              "stages", "head"},
             origin);
  ModelSpec spec;
  read(root, "name", spec.name, origin);
  read(root, "width", spec.width, origin);
  read(root, "input_size", spec.input_size, origin);
  read(root, "in_channels", spec.in_channels, origin);
  read(root, "bn_eps", spec.bn_eps, origin);
  if (root["placement"]) spec.placement = parse_placement(root["placement"].as<std::string>());
  if (const auto n = root["stem"]) {
    check_keys(n, {"channels", "stride", "kernel"}, origin + ": stem");
    read(n, "channels", spec.stem.channels, "stem");
    read(n, "stride", spec.stem.stride, "stem");
    read(n, "kernel", spec.stem.kernel, "stem");
  }
  if (const auto n = root["dfc"]) {
    check_keys(n, {"factor", "pool", "upsample", "scaling", "position"}, origin + ": dfc");
    read(n, "factor", spec.dfc.factor, "dfc");
    if (n["pool"]) spec.dfc.pool = parse_pool_kind(n["pool"].as<std::string>());
    if (n["upsample"]) spec.dfc.upsample = parse_resize_kind(n["upsample"].as<std::string>());
    if (n["scaling"]) spec.dfc.scaling = parse_scaling(n["scaling"].as<std::string>());
    if (n["position"]) spec.dfc.position = parse_scaling_position(n["position"].as<std::string>());
  }
  if (const auto n = root["kernel_schedule"]) {
    if (!n.IsSequence()) throw ConfigError(origin + ": kernel_schedule must be a list");
    spec.kernel_schedule.clear();
    for (std::size_t i = 0; i < n.size(); ++i) {
      const std::string where = origin + ": kernel_schedule[" + std::to_string(i) + "]";
      check_keys(n[i], {"min_size", "kernel"}, where);
      KernelRule r;
      read(n[i], "min_size", r.min_size, where);
      read(n[i], "kernel", r.kernel, where);
      spec.kernel_schedule.push_back(r);
    }
  }
  if (const auto n = root["head"]) {
    check_keys(n, {"conv_channels", "feature_size", "num_classes"}, origin + ": head");
    read(n, "conv_channels", spec.head.conv_channels, "head");
    read(n, "feature_size", spec.head.feature_size, "head");
    read(n, "num_classes", spec.head.num_classes, "head");
  }
  const auto stages = root["stages"];
  if (!stages || !stages.IsSequence()) throw ConfigError(origin + ": 'stages' list is required");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const YAML::Node st = stages[s];
    std::string where = origin + ": stages[" + std::to_string(s) + "]";
    check_keys(st, {"name", "placement", "kernel", "blocks"}, where);
    StageSpec stage;
    stage.name = "stage" + std::to_string(s);
    read(st, "name", stage.name, where);
    where = origin + ": stage '" + stage.name + "'";
    read_placement(st, stage.placement, where);
    read_opt(st, "kernel", stage.kernel, where);
    const auto blocks = st["blocks"];
    if (!blocks || !blocks.IsSequence()) throw ConfigError(where + ": 'blocks' list is required");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      stage.blocks.push_back(parse_block(blocks[b], where + " block " + std::to_string(b)));
    }
    spec.stages.push_back(std::move(stage));
  }
  spec.validate();
  return spec;
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model spec '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model_spec(ss.str(), path);
}

std::string builtin_model_spec_text(const std::string& name) {
  if (name == "default") return std::string(builtin::kDefaultSpec);
  if (name == "mini") return std::string(builtin::kMiniSpec);
  throw ConfigError("unknown built-in model spec '" + name + "' (expected default or mini)");
}

ModelSpec builtin_model_spec(const std::string& name) {
  return parse_model_spec(builtin_model_spec_text(name), "builtin:" + name);
}

ModelSpec resolve_model_spec(const std::string& name_or_path) {
  if (name_or_path == "default" || name_or_path == "mini") return builtin_model_spec(name_or_path);
  return load_model_spec(name_or_path);
}

}  // namespace ghostv2
