#include "dlqat/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dlqat {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <typename T>
T parse_uint(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  T out{};
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + raw + "'");
  }
  return out;
}

int parse_int(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("key '" + key + "': expected an integer, got '" + raw + "'");
  }
  return out;
}

double parse_double(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  double out = 0.0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
    throw ConfigError("key '" + key + "': expected a number, got '" + raw + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true or false, got '" + raw + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& raw) {
  std::vector<int> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int(key, item));
  if (out.empty()) throw ConfigError("key '" + key + "': expected a comma-separated list");
  return out;
}

// Quantizer keys are gathered first and combined once every key is read.
struct QuantKeys {
  int bits = 4;
  std::string granularity = "per-channel";
  std::size_t group_size = 16;
  int activation_bits = 0;
};

using Setter = std::function<void(RunConfig&, QuantKeys&, const std::string& key, const std::string&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"model.d_model", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.d_model = parse_uint<std::size_t>(k, v); }},
      {"model.n_layers", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.n_layers = parse_uint<std::size_t>(k, v); }},
      {"model.n_heads", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.n_heads = parse_uint<std::size_t>(k, v); }},
      {"model.ffn_hidden", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.ffn_hidden = parse_uint<std::size_t>(k, v); }},
      {"model.context_length", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.context_length = parse_uint<std::size_t>(k, v); }},
      {"model.head_init_gain", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.head_init_gain = parse_double(k, v); }},
      {"model.quantize", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.quantize = parse_bool(k, v); }},
      {"quant.bits", [](RunConfig&, QuantKeys& q, auto& k, auto& v) { q.bits = parse_int(k, v); }},
      {"quant.granularity", [](RunConfig&, QuantKeys& q, auto&, auto& v) { q.granularity = trim(v); }},
      {"quant.group_size", [](RunConfig&, QuantKeys& q, auto& k, auto& v) { q.group_size = parse_uint<std::size_t>(k, v); }},
      {"quant.activation_bits", [](RunConfig&, QuantKeys& q, auto& k, auto& v) { q.activation_bits = parse_int(k, v); }},
      {"train.setting", [](RunConfig& c, QuantKeys&, auto& k, auto& v) {
         try {
           c.model.setting = setting_from_index(parse_int(k, v));
         } catch (const std::invalid_argument&) {
           throw ConfigError("key '" + k + "': setting must be 1-6, got '" + v + "'");
         }
       }},
      {"train.iters", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.train.total_iters = parse_uint<std::size_t>(k, v); }},
      {"train.warmup_sb_iters", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.train.warmup_sb_iters = parse_uint<std::size_t>(k, v); }},
      {"train.lr", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.train.learning_rate = parse_double(k, v); }},
      {"train.batch_size", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.train.batch_size = parse_uint<std::size_t>(k, v); }},
      {"train.seed", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.set_seed(parse_uint<std::uint64_t>(k, v)); }},
      {"train.rank", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.rank = parse_uint<std::size_t>(k, v); }},
      {"train.alpha", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.model.alpha = parse_double(k, v); }},
      {"train.weight_decay", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.train.adamw.weight_decay = parse_double(k, v); }},
      {"data.corpus", [](RunConfig& c, QuantKeys&, auto&, auto& v) { c.corpus_path = trim(v); }},
      {"data.split", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.split = parse_double(k, v); }},
      {"out.report", [](RunConfig& c, QuantKeys&, auto&, auto& v) { c.report_path = trim(v); }},
      {"out.pack", [](RunConfig& c, QuantKeys&, auto&, auto& v) { c.pack_path = trim(v); }},
      {"ablation.seeds", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.ablation_seeds = parse_uint<std::size_t>(k, v); }},
      {"ablation.bits", [](RunConfig& c, QuantKeys&, auto& k, auto& v) { c.ablation_bits = parse_int_list(k, v); }},
  };
  return table;
}

}  // namespace

RunConfig::RunConfig() {
  model.setting = AblationSetting::S5;
  set_seed(0);
}

void RunConfig::set_seed(std::uint64_t seed) {
  model.seed = seed;
  train.seed = seed;
}

void RunConfig::validate() const {
  try {
    model.validate();
    train.validate(model.setting);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (!(split > 0.0 && split < 1.0)) throw ConfigError("key 'data.split' must lie in (0, 1)");
  if (ablation_seeds < 1) throw ConfigError("key 'ablation.seeds' must be >= 1");
  for (int b : ablation_bits) {
    if (b < 2 || b > 8) throw ConfigError("key 'ablation.bits' entries must lie in [2, 8]");
  }
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j;
  j["model"] = {{"d_model", model.d_model},
                {"n_layers", model.n_layers},
                {"n_heads", model.n_heads},
                {"ffn_hidden", model.ffn_hidden},
                {"context_length", model.context_length},
                {"head_init_gain", model.head_init_gain},
                {"quantize", model.quantize}};
  j["quant"] = {{"bits", model.spec.bits},
                {"granularity", model.spec.is_per_channel() ? "per-channel" : "group"},
                {"group_size", model.spec.group_size.value_or(0)},
                {"activation_bits", model.activation_bits.value_or(0)}};
  j["train"] = {{"setting", setting_index(model.setting)},
                {"iters", train.total_iters},
                {"warmup_sb_iters", train.warmup_sb_iters},
                {"lr", train.learning_rate},
                {"batch_size", train.batch_size},
                {"seed", train.seed},
                {"rank", model.rank},
                {"alpha", model.alpha},
                {"weight_decay", train.adamw.weight_decay}};
  j["data"] = {{"corpus", corpus_path}, {"split", split}};
  j["out"] = {{"report", report_path}, {"pack", pack_path}};
  j["ablation"] = {{"seeds", ablation_seeds}, {"bits", ablation_bits}};
  return j;
}

RunConfig parse_run_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }

  RunConfig config;
  QuantKeys quant;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("unknown key '" + section + "' (keys must be inside a section)");
    for (const auto& [name, value] : body) {
      const std::string key = section + "." + name;
      auto it = setters().find(key);
      if (it == setters().end()) throw ConfigError("unknown key '" + key + "'");
      it->second(config, quant, key, value.data());
    }
  }

  if (quant.bits < 2 || quant.bits > 8) throw ConfigError("key 'quant.bits' must lie in [2, 8]");
  if (quant.granularity == "per-channel") {
    config.model.spec = QuantSpec::per_channel(quant.bits);
  } else if (quant.granularity == "group") {
    if (quant.group_size == 0) throw ConfigError("key 'quant.group_size' must be >= 1");
    config.model.spec = QuantSpec::grouped(quant.bits, quant.group_size);
  } else {
    throw ConfigError("key 'quant.granularity' must be 'per-channel' or 'group', got '" +
                      quant.granularity + "'");
  }
  if (quant.activation_bits != 0) {
    if (quant.activation_bits < 2 || quant.activation_bits > 8) {
      throw ConfigError("key 'quant.activation_bits' must be 0 or lie in [2, 8]");
    }
    config.model.activation_bits = quant.activation_bits;
  }
  config.validate();
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace dlqat
