#include "paco/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "paco/errors.hpp"

namespace paco {

namespace {

std::string trim(const std::string &s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string &v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("expected a boolean, got '" + v + "'");
}

double parse_double(const std::string &v) {
  try {
    size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception &) {
    throw ConfigError("expected a number, got '" + v + "'");
  }
}

uint64_t parse_uint(const std::string &v) {
  try {
    size_t used = 0;
    unsigned long long u = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return u;
  } catch (const std::exception &) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
}

size_t lm_class_index(const std::string &name) {
  if (name == "background") return static_cast<size_t>(LmClass::background);
  if (name == "item") return static_cast<size_t>(LmClass::item);
  if (name == "block") return static_cast<size_t>(LmClass::block);
  if (name == "item_cluster") return static_cast<size_t>(LmClass::item_cluster);
  if (name == "user_cluster") return static_cast<size_t>(LmClass::user_cluster);
  throw ConfigError("unknown language-model class '" + name + "'");
}

void set_key(RunConfig &c, const std::string &key, const std::string &value) {
  if (key == "input") c.input = value;
  else if (key == "format") {
    if (value == "tsv") c.format = InputFormat::tsv;
    else if (value == "jsonl") c.format = InputFormat::jsonl;
    else throw ConfigError("format must be tsv or jsonl");
  }
  else if (key == "out_dir") c.out_dir = value;
  else if (key == "min_word_len") c.min_word_len = static_cast<uint32_t>(parse_uint(value));
  else if (key == "min_freq") c.min_freq = static_cast<uint32_t>(parse_uint(value));
  else if (key == "stopword_file") c.stopword_file = value;
  else if (key == "test_fraction") c.test_fraction = parse_double(value);
  else if (key == "rating_scale") c.rating_scale = parse_double(value);
  else if (key == "stencils") c.hyper.stencils = static_cast<uint32_t>(parse_uint(value));
  else if (key == "text_stencils") c.hyper.text_stencils = static_cast<uint32_t>(parse_uint(value));
  else if (key == "k_max") c.hyper.k_max = static_cast<uint32_t>(parse_uint(value));
  else if (key == "crp_delta") c.hyper.crp_delta = parse_double(value);
  else if (key == "alpha") c.hyper.alpha.fill(parse_double(value));
  else if (key == "beta") c.hyper.beta.fill(parse_double(value));
  else if (key.rfind("alpha_", 0) == 0) c.hyper.alpha[lm_class_index(key.substr(6))] = parse_double(value);
  else if (key.rfind("beta_", 0) == 0) c.hyper.beta[lm_class_index(key.substr(5))] = parse_double(value);
  else if (key == "sigma2") c.hyper.sigma2 = parse_double(value);
  else if (key == "sigma_l2") c.hyper.sigma_l2 = parse_double(value);
  else if (key == "gamma_shape") c.hyper.gamma_shape = parse_double(value);
  else if (key == "gamma_scale") c.hyper.gamma_scale = parse_double(value);
  else if (key == "eta_shape") c.hyper.eta_shape = parse_double(value);
  else if (key == "eta_scale") c.hyper.eta_scale = parse_double(value);
  else if (key == "resample_sigma2") c.hyper.resample_sigma2 = parse_bool(value);
  else if (key == "resample_sigma_l2") c.hyper.resample_sigma_l2 = parse_bool(value);
  else if (key == "burn_in") c.hyper.burn_in = static_cast<uint32_t>(parse_uint(value));
  else if (key == "n_samples") c.hyper.n_samples = static_cast<uint32_t>(parse_uint(value));
  else if (key == "seed") c.hyper.seed = parse_uint(value);
  else if (key == "threads") c.threads = static_cast<int>(parse_uint(value));
  else if (key == "checkpoint_interval") c.checkpoint_interval = static_cast<uint32_t>(parse_uint(value));
  else if (key == "metric_log_every") c.metric_log_every = static_cast<uint32_t>(parse_uint(value));
  else if (key == "stop_after") c.stop_after = static_cast<uint32_t>(parse_uint(value));
  else if (key == "top_k") c.top_k = static_cast<uint32_t>(parse_uint(value));
  else if (key == "inspect_pairs") {
    c.inspect_pairs.clear();
    std::stringstream ss(value);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      tok = trim(tok);
      if (!tok.empty()) c.inspect_pairs.push_back(tok);
    }
  }
  else throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig parse_config_file(const std::string &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  RunConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key=value at " + path + ":" + std::to_string(lineno));
    try {
      set_key(cfg, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    } catch (const ConfigError &e) {
      throw ConfigError(std::string(e.what()) + " at " + path + ":" + std::to_string(lineno));
    }
  }
  return cfg;
}

void apply_override(RunConfig &cfg, const std::string &assignment) {
  size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must be key=value, got '" + assignment + "'");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::validate() const {
  hyper.validate();
  if (input.empty()) throw ConfigError("input path is required");
  if (out_dir.empty()) throw ConfigError("out_dir is required");
  if (min_word_len < 1) throw ConfigError("min_word_len must be >= 1");
  if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0))
    throw ConfigError("test_fraction must be in (0,1)");
  if (!(rating_scale != 0.0)) throw ConfigError("rating_scale must be nonzero");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (hyper.n_samples < 1) throw ConfigError("n_samples must be >= 1");
  if (metric_log_every < 1) throw ConfigError("metric_log_every must be >= 1");
  for (const auto &p : inspect_pairs)
    if (p.find(':') == std::string::npos)
      throw ConfigError("inspect_pairs entries must be user:item, got '" + p + "'");
}

std::string RunConfig::canonical() const {
  std::map<std::string, std::string> kv;
  char buf[64];
  auto num = [&](double v) {
    snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  kv["input"] = input;
  kv["format"] = format == InputFormat::tsv ? "tsv" : "jsonl";
  kv["out_dir"] = out_dir;
  kv["min_word_len"] = std::to_string(min_word_len);
  kv["min_freq"] = std::to_string(min_freq);
  kv["stopword_file"] = stopword_file;
  kv["test_fraction"] = num(test_fraction);
  kv["rating_scale"] = num(rating_scale);
  kv["stencils"] = std::to_string(hyper.stencils);
  kv["text_stencils"] = std::to_string(hyper.text_stencils);
  kv["k_max"] = std::to_string(hyper.k_max);
  kv["crp_delta"] = num(hyper.crp_delta);
  static const char *cls[] = {"background", "item", "block", "item_cluster", "user_cluster"};
  for (size_t i = 0; i < kLmClassCount; ++i) {
    kv[std::string("alpha_") + cls[i]] = num(hyper.alpha[i]);
    kv[std::string("beta_") + cls[i]] = num(hyper.beta[i]);
  }
  kv["sigma2"] = num(hyper.sigma2);
  kv["sigma_l2"] = num(hyper.sigma_l2);
  kv["gamma_shape"] = num(hyper.gamma_shape);
  kv["gamma_scale"] = num(hyper.gamma_scale);
  kv["eta_shape"] = num(hyper.eta_shape);
  kv["eta_scale"] = num(hyper.eta_scale);
  kv["resample_sigma2"] = hyper.resample_sigma2 ? "true" : "false";
  kv["resample_sigma_l2"] = hyper.resample_sigma_l2 ? "true" : "false";
  kv["burn_in"] = std::to_string(hyper.burn_in);
  kv["n_samples"] = std::to_string(hyper.n_samples);
  kv["seed"] = std::to_string(hyper.seed);
  kv["checkpoint_interval"] = std::to_string(checkpoint_interval);
  kv["metric_log_every"] = std::to_string(metric_log_every);
  kv["top_k"] = std::to_string(top_k);
  std::string pairs;
  for (const auto &p : inspect_pairs) {
    if (!pairs.empty()) pairs += ",";
    pairs += p;
  }
  kv["inspect_pairs"] = pairs;
  // threads intentionally excluded: it must not affect results, and resumed
  // runs may use a different thread count.
  std::string out;
  for (const auto &e : kv) {
    out += e.first;
    out += "=";
    out += e.second;
    out += "\n";
  }
  return out;
}

uint64_t RunConfig::hash() const {
  // FNV-1a over the canonical dump
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace paco
