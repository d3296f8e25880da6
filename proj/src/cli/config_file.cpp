#include "chag/cli/config_file.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

#include "chag/cost/presets.hpp"
#include "chag/tensor/tensor.hpp"

namespace chag {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return x;
}

std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

double to_double(const std::string& key, const std::string& v) {
  double x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return x;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string shortest(double x) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

const std::vector<std::pair<std::string, Setter>>& setters() {
  static const std::vector<std::pair<std::string, Setter>> table = {
      {"preset", [](RunConfig&, const std::string&, const std::string&) {}},
      {"channels", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.channels = to_size(k, v); }},
      {"image_h", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image_h = to_size(k, v); }},
      {"image_w", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.image_w = to_size(k, v); }},
      {"patch", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.patch = to_size(k, v); }},
      {"embed", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.embed = to_size(k, v); }},
      {"depth", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.depth = to_size(k, v); }},
      {"heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.heads = to_size(k, v); }},
      {"mlp_ratio", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.mlp_ratio = to_size(k, v); }},
      {"agg_variant", [](RunConfig& c, const std::string&, const std::string& v) { c.model.agg_variant = parse_agg_variant(v); }},
      {"agg_layer_kind",
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.model.agg_layer_kind = c.strategy.agg_layer_kind = parse_agg_layer_kind(v);
       }},
      {"tree_max_group",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.model.tree_max_group = c.strategy.tree_max_group = to_size(k, v);
       }},
      {"mask_ratio", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.mask_ratio = to_double(k, v); }},
      {"decoder_depth", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder_depth = to_size(k, v); }},
      {"decoder_dim", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder_dim = to_size(k, v); }},
      {"decoder_heads", [](RunConfig& c, const std::string& k, const std::string& v) { c.model.decoder_heads = to_size(k, v); }},
      {"kind", [](RunConfig& c, const std::string&, const std::string& v) { c.strategy.kind = parse_strategy_kind(v); }},
      {"tp_degree",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.strategy.tp = c.parallel.tp = to_size(k, v); }},
      {"final_layer_tp_split",
       [](RunConfig& c, const std::string& k, const std::string& v) { c.strategy.final_layer_tp_split = to_bool(k, v); }},
      {"fsdp", [](RunConfig& c, const std::string& k, const std::string& v) { c.parallel.fsdp = to_size(k, v); }},
      {"dp", [](RunConfig& c, const std::string& k, const std::string& v) { c.parallel.dp = to_size(k, v); }},
      {"bytes_per_gpu", [](RunConfig& c, const std::string& k, const std::string& v) { c.hw.bytes_per_gpu = to_u64(k, v); }},
      {"gpus_per_node", [](RunConfig& c, const std::string& k, const std::string& v) { c.hw.gpus_per_node = to_size(k, v); }},
      {"batch", [](RunConfig& c, const std::string& k, const std::string& v) { c.batch = to_size(k, v); }},
      {"precision_bytes", [](RunConfig& c, const std::string& k, const std::string& v) { c.precision_bytes = to_size(k, v); }},
      {"rank_limit", [](RunConfig& c, const std::string& k, const std::string& v) { c.rank_limit = to_size(k, v); }},
      {"seed", [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); }},
      {"steps", [](RunConfig& c, const std::string& k, const std::string& v) { c.steps = to_size(k, v); }},
      {"lr", [](RunConfig& c, const std::string& k, const std::string& v) { c.lr = to_double(k, v); }},
      {"sweep_axis", [](RunConfig& c, const std::string&, const std::string& v) { c.sweep_axis = parse_sweep_axis(v); }},
      {"sweep_values",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         c.sweep_values.clear();
         for (const auto& x : split_list(v)) c.sweep_values.push_back(to_size(k, x));
       }},
      {"sweep_strategies",
       [](RunConfig& c, const std::string&, const std::string& v) {
         c.sweep_strategies = split_list(v);
         for (const auto& s : c.sweep_strategies) named_strategy(s, c.strategy);
       }},
  };
  return table;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, fn] : setters()) k.push_back(name);
    return k;
  }();
  return keys;
}

void RunConfig::validate() const {
  model.validate();
  strategy.validate(model);
  parallel.validate();
  hw.validate();
  if (parallel.tp != strategy.tp)
    throw ConfigError("tp_degree mismatch between strategy and parallel grid");
  if (batch == 0) throw ConfigError("batch must be >= 1");
  if (precision_bytes == 0) throw ConfigError("precision_bytes must be >= 1");
  if (rank_limit == 0) throw ConfigError("rank_limit must be >= 1");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
}

std::map<std::string, std::string> parse_config_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(no) + ": expected 'key = value', got '" + body + "'");
    std::string key = trim(std::string_view(body).substr(0, eq));
    std::string value = trim(std::string_view(body).substr(eq + 1));
    if (key.empty() || value.empty())
      throw ConfigError("line " + std::to_string(no) + ": empty key or value");
    const auto& keys = config_keys();
    if (std::find(keys.begin(), keys.end(), key) == keys.end())
      throw ConfigError("line " + std::to_string(no) + ": unknown key '" + key + "'");
    if (!kv.emplace(key, value).second)
      throw ConfigError("line " + std::to_string(no) + ": duplicate key '" + key + "'");
  }
  return kv;
}

RunConfig run_config_from(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  if (auto it = kv.find("preset"); it != kv.end()) {
    auto ch = kv.find("channels");
    c.model = preset_model(it->second, ch == kv.end() ? 512 : to_size("channels", ch->second));
    c.precision_bytes = kMixedPrecisionBytes;
    c.batch = 1;
  }
  for (const auto& [key, set] : setters()) {
    if (auto it = kv.find(key); it != kv.end()) set(c, key, it->second);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return run_config_from(parse_config_text(ss.str()));
}

std::string to_config_text(const RunConfig& c) {
  std::ostringstream os;
  const auto& m = c.model;
  std::string values;
  for (auto v : c.sweep_values) values += (values.empty() ? "" : ",") + std::to_string(v);
  os << "channels = " << m.channels << "\nimage_h = " << m.image_h << "\nimage_w = " << m.image_w
     << "\npatch = " << m.patch << "\nembed = " << m.embed << "\ndepth = " << m.depth << "\nheads = " << m.heads
     << "\nmlp_ratio = " << m.mlp_ratio << "\nagg_variant = " << to_string(m.agg_variant)
     << "\nagg_layer_kind = " << to_string(c.strategy.agg_layer_kind)
     << "\ntree_max_group = " << c.strategy.tree_max_group << "\nmask_ratio = " << shortest(m.mask_ratio)
     << "\ndecoder_depth = " << m.decoder_depth << "\ndecoder_dim = " << m.decoder_dim
     << "\ndecoder_heads = " << m.decoder_heads << "\nkind = " << to_string(c.strategy.kind)
     << "\ntp_degree = " << c.strategy.tp
     << "\nfinal_layer_tp_split = " << (c.strategy.final_layer_tp_split ? "true" : "false")
     << "\nfsdp = " << c.parallel.fsdp << "\ndp = " << c.parallel.dp << "\nbytes_per_gpu = " << c.hw.bytes_per_gpu
     << "\ngpus_per_node = " << c.hw.gpus_per_node << "\nbatch = " << c.batch
     << "\nprecision_bytes = " << c.precision_bytes << "\nrank_limit = " << c.rank_limit
     << "\nsteps = " << c.steps << "\nlr = " << shortest(c.lr) << "\nsweep_axis = " << to_string(c.sweep_axis) << '\n';
  if (c.seed) os << "seed = " << *c.seed << '\n';
  if (!values.empty()) os << "sweep_values = " << values << '\n';
  os << "sweep_strategies = " << join(c.sweep_strategies) << '\n';
  return os.str();
}

StrategyConfig named_strategy(std::string_view label, const StrategyConfig& base) {
  StrategyConfig s = base;
  if (label == "serial") {
    s = StrategyConfig{};
  } else if (label == "tp_only" || label == "tp") {
    s.kind = StrategyKind::tp_only;
  } else if (label == "dist_token") {
    s.kind = StrategyKind::dist_token;
  } else if (label == "dchag-L" || label == "dchag-C") {
    s.kind = StrategyKind::dchag;
    s.agg_layer_kind = label == "dchag-L" ? AggLayerKind::linear : AggLayerKind::cross_attention;
  } else {
    throw ConfigError("unknown strategy '" + std::string(label) +
                      "' (expected serial, tp_only, dist_token, dchag-L or dchag-C)");
  }
  return s;
}

}  // namespace chag
