#include "dipnet/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "dipnet/error.hpp"

namespace dipnet {

namespace {

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

int64_t parse_int(const std::string& v) {
  try {
    size_t used = 0;
    int64_t x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("expected an integer, got '" + v + "'");
  }
}

uint64_t parse_u64(const std::string& v) {
  try {
    size_t used = 0;
    uint64_t x = std::stoull(v, &used);
    if (used != v.size() || v.find('-') != std::string::npos) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
}

double parse_num(const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true/false, got '" + v + "'");
}

std::vector<double> parse_num_list(const std::string& v) {
  std::vector<double> out;
  std::istringstream is(v);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(parse_num(trim(item)));
  if (out.empty()) throw ConfigError("expected a comma-separated list, got '" + v + "'");
  return out;
}

std::array<int, 3> parse_int3(const std::string& v) {
  std::vector<double> xs = parse_num_list(v);
  if (xs.size() != 3) throw ConfigError("expected three comma-separated integers, got '" + v + "'");
  return {int(xs[0]), int(xs[1]), int(xs[2])};
}

std::string join(const std::vector<double>& xs) {
  std::string s;
  for (size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + g17(xs[i]);
  return s;
}

std::string join3(const std::array<int, 3>& xs) {
  return std::to_string(xs[0]) + "," + std::to_string(xs[1]) + "," + std::to_string(xs[2]);
}

struct Entry {
  const char* key;
  const char* section;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;  // null: directive, not state
};

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      // training
      {"mode", "training", [](RunConfig& c, const std::string& v) { c.train.mode = train_mode_from_name(v); },
       [](const RunConfig& c) { return train_mode_name(c.train.mode); }},
      {"sigma", "training", [](RunConfig& c, const std::string& v) { c.train.fixed_sigma = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.fixed_sigma); }},
      {"batch_size", "training", [](RunConfig& c, const std::string& v) { c.train.batch_size = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"max_steps", "training", [](RunConfig& c, const std::string& v) { c.train.max_steps = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.max_steps); }},
      {"lr0", "training", [](RunConfig& c, const std::string& v) { c.train.lr0 = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.lr0); }},
      {"lambda1", "training", [](RunConfig& c, const std::string& v) { c.train.lambda1 = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.lambda1); }},
      {"lambda2", "training", [](RunConfig& c, const std::string& v) { c.train.lambda2 = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.lambda2); }},
      {"lambda_grl", "training", [](RunConfig& c, const std::string& v) { c.train.lambda_grl = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.lambda_grl); }},
      {"grl_warmup", "training", [](RunConfig& c, const std::string& v) { c.train.grl_warmup = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.grl_warmup); }},
      {"adam_beta1", "training", [](RunConfig& c, const std::string& v) { c.train.adam.beta1 = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.adam.beta1); }},
      {"adam_beta2", "training", [](RunConfig& c, const std::string& v) { c.train.adam.beta2 = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.adam.beta2); }},
      {"adam_eps", "training", [](RunConfig& c, const std::string& v) { c.train.adam.eps = parse_num(v); },
       [](const RunConfig& c) { return g17(c.train.adam.eps); }},
      {"seed", "training", [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"metric_cadence", "training", [](RunConfig& c, const std::string& v) { c.train.metric_cadence = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.train.metric_cadence); }},
      {"eval_images", "training", [](RunConfig& c, const std::string& v) { c.train.eval_images = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.train.eval_images); }},
      {"probe_samples", "training", [](RunConfig& c, const std::string& v) { c.train.probe_samples = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.train.probe_samples); }},
      // model ("model = desk" swaps in the small preset; later keys refine it)
      {"model", "model",
       [](RunConfig& c, const std::string& v) {
         if (v == "desk") c.model = ModelConfig::desk();
         else if (v == "default") c.model = ModelConfig{};
         else throw ConfigError("unknown model preset '" + v + "' (expected desk or default)");
       },
       nullptr},
      {"input_channels", "model", [](RunConfig& c, const std::string& v) { c.model.input_channels = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.input_channels); }},
      {"base_channels", "model", [](RunConfig& c, const std::string& v) { c.model.base_channels = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.base_channels); }},
      {"low_level_blocks", "model", [](RunConfig& c, const std::string& v) { c.model.low_level_blocks = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.low_level_blocks); }},
      {"local_blocks", "model", [](RunConfig& c, const std::string& v) { c.model.local_blocks = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.local_blocks); }},
      {"global_fc_width", "model", [](RunConfig& c, const std::string& v) { c.model.global_fc_width = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.global_fc_width); }},
      {"num_noise_classes", "model", [](RunConfig& c, const std::string& v) { c.model.num_noise_classes = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.num_noise_classes); }},
      {"feat_disc_channels", "model", [](RunConfig& c, const std::string& v) { c.model.feat_disc_channels = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.feat_disc_channels); }},
      {"feat_disc_fc_width", "model", [](RunConfig& c, const std::string& v) { c.model.feat_disc_fc_width = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.model.feat_disc_fc_width); }},
      {"pixel_disc_channels", "model", [](RunConfig& c, const std::string& v) { c.model.pixel_disc_channels = parse_int3(v); },
       [](const RunConfig& c) { return join3(c.model.pixel_disc_channels); }},
      {"extractor_channels", "model", [](RunConfig& c, const std::string& v) { c.model.extractor_channels = parse_int3(v); },
       [](const RunConfig& c) { return join3(c.model.extractor_channels); }},
      {"input_image_skip", "model", [](RunConfig& c, const std::string& v) { c.model.input_image_skip = parse_bool(v); },
       [](const RunConfig& c) { return c.model.input_image_skip ? "true" : "false"; }},
      // data
      {"data_root", "data", [](RunConfig& c, const std::string& v) { c.data.root = v; },
       [](const RunConfig& c) { return c.data.root; }},
      {"synth_seed", "data", [](RunConfig& c, const std::string& v) { c.data.synth_seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.data.synth_seed); }},
      {"synth_count", "data", [](RunConfig& c, const std::string& v) { c.data.synth_count = int(parse_int(v)); },
       [](const RunConfig& c) { return std::to_string(c.data.synth_count); }},
      {"synth_size", "data", [](RunConfig& c, const std::string& v) { c.data.synth_size = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.data.synth_size); }},
      {"patch_size", "data", [](RunConfig& c, const std::string& v) { c.data.patch_size = parse_int(v); },
       [](const RunConfig& c) { return std::to_string(c.data.patch_size); }},
      {"sigma_set", "data", [](RunConfig& c, const std::string& v) { c.data.sigma_set = parse_num_list(v); },
       [](const RunConfig& c) { return join(c.data.sigma_set); }},
      {"sigma_lo", "data", [](RunConfig& c, const std::string& v) { c.data.sigma_lo = parse_num(v); },
       [](const RunConfig& c) { return g17(c.data.sigma_lo); }},
      {"sigma_hi", "data", [](RunConfig& c, const std::string& v) { c.data.sigma_hi = parse_num(v); },
       [](const RunConfig& c) { return g17(c.data.sigma_hi); }},
      {"data_seed", "data", [](RunConfig& c, const std::string& v) { c.data.seed = parse_u64(v); },
       [](const RunConfig& c) { return std::to_string(c.data.seed); }},
      // output
      {"out_dir", "output", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
       [](const RunConfig& c) { return c.out_dir; }},
  };
  return table;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Entry& e : entries()) {
    if (key == e.key) {
      e.set(*this, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig RunConfig::from_text(const std::string& text) {
  RunConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_text(ss.str());
}

void RunConfig::apply_overrides(const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw ConfigError("--set expects key=value, got '" + s + "'");
    set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
  }
}

void RunConfig::apply_env() {
  const char* v = std::getenv("DIPNET_SEED");
  if (v && *v) set("seed", v);
}

void RunConfig::validate() const {
  train.validate();
  model.validate();
  data.validate();
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

std::string RunConfig::resolved() const {
  std::string out = "# resolved configuration; parses back to the identical run\n";
  const char* section = "";
  for (const Entry& e : entries()) {
    if (!e.get) continue;
    if (std::string(section) != e.section) {
      section = e.section;
      out += std::string("\n# ") + section + "\n";
    }
    out += std::string(e.key) + " = " + e.get(*this) + "\n";
  }
  return out;
}

}  // namespace dipnet
