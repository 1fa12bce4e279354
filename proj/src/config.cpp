#include "hmnas/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "hmnas/error.hpp"
#include "hmnas/rng.hpp"

namespace hmnas {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const char* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("key '" + key + "': expected " + what + ", got '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::string key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename M>
Field int_field(std::string key, M member) {
  return {key, [member](const ExperimentConfig& c) { return std::to_string(member(const_cast<ExperimentConfig&>(c))); },
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<int>(key, v, "an integer"); }};
}

template <typename M>
Field double_field(std::string key, M member) {
  return {key, [member](const ExperimentConfig& c) { return fmt_double(member(const_cast<ExperimentConfig&>(c))); },
          [key, member](ExperimentConfig& c, const std::string& v) { member(c) = parse_number<double>(key, v, "a number"); }};
}

const std::vector<Field>& fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"seed", [](const C& c) { return std::to_string(c.seed); },
                 [](C& c, const std::string& s) { c.seed = parse_number<std::uint64_t>("seed", s, "an unsigned integer"); }});
    v.push_back({"dataset", [](const C& c) { return c.dataset; }, [](C& c, const std::string& s) { c.dataset = s; }});
    v.push_back({"out", [](const C& c) { return c.out; }, [](C& c, const std::string& s) { c.out = s; }});
    v.push_back(double_field("test_fraction", [](C& c) -> double& { return c.test_fraction; }));

    v.push_back(int_field("search.nodes_per_cell", [](C& c) -> int& { return c.search.nodes_per_cell; }));
    v.push_back(int_field("search.num_cells", [](C& c) -> int& { return c.search.num_cells; }));
    v.push_back(int_field("search.init_channels", [](C& c) -> int& { return c.search.init_channels; }));
    v.push_back({"search.ops",
                 [](const C& c) {
                   std::string s;
                   for (std::size_t i = 0; i < c.search.ops.size(); ++i) s += (i ? "," : "") + std::string(op_name(c.search.ops[i]));
                   return s;
                 },
                 [](C& c, const std::string& s) {
                   std::vector<OpKind> ops;
                   for (const auto& name : split_list(s)) {
                     const auto k = parse_op(name);
                     if (!k) throw ConfigError("key 'search.ops': unknown operation '" + name + "'");
                     ops.push_back(*k);
                   }
                   c.search.ops = ops;
                 }});
    v.push_back({"search.reduction_cells",
                 [](const C& c) {
                   if (!c.search.reduction_cells) return std::string("auto");
                   if (c.search.reduction_cells->empty()) return std::string("none");
                   std::string s;
                   for (std::size_t i = 0; i < c.search.reduction_cells->size(); ++i)
                     s += (i ? "," : "") + std::to_string((*c.search.reduction_cells)[i]);
                   return s;
                 },
                 [](C& c, const std::string& s) {
                   if (s == "auto") {
                     c.search.reduction_cells.reset();
                   } else if (s == "none") {
                     c.search.reduction_cells = std::vector<int>{};
                   } else {
                     std::vector<int> r;
                     for (const auto& x : split_list(s)) r.push_back(parse_number<int>("search.reduction_cells", x, "an integer list, auto or none"));
                     c.search.reduction_cells = r;
                   }
                 }});

    v.push_back(int_field("train.epochs", [](C& c) -> int& { return c.train.epochs; }));
    v.push_back(int_field("train.batch_size", [](C& c) -> int& { return c.train.batch_size; }));
    v.push_back(double_field("train.w_lr_init", [](C& c) -> double& { return c.train.w_lr_init; }));
    v.push_back(double_field("train.w_lr_min", [](C& c) -> double& { return c.train.w_lr_min; }));
    v.push_back(double_field("train.w_momentum", [](C& c) -> double& { return c.train.w_momentum; }));
    v.push_back(double_field("train.w_weight_decay", [](C& c) -> double& { return c.train.w_weight_decay; }));
    v.push_back(double_field("train.arch_lr", [](C& c) -> double& { return c.train.arch_lr; }));
    v.push_back(double_field("train.arch_weight_decay", [](C& c) -> double& { return c.train.arch_weight_decay; }));
    v.push_back(int_field("train.warmup_epochs", [](C& c) -> int& { return c.train.warmup_epochs; }));
    v.push_back(double_field("train.train_fraction", [](C& c) -> double& { return c.train.train_fraction; }));
    v.push_back(double_field("train.grad_clip", [](C& c) -> double& { return c.train.grad_clip; }));
    v.push_back({"train.sigma", [](const C& c) { return std::string(sigma_kind_name(c.train.sigma.kind)); },
                 [](C& c, const std::string& s) { c.train.sigma.kind = parse_sigma_kind(s); }});
    v.push_back(double_field("train.sigma_horizon", [](C& c) -> double& { return c.train.sigma.horizon; }));
    v.push_back(double_field("train.sigma_delay", [](C& c) -> double& { return c.train.sigma.delay; }));

    v.push_back(int_field("masker.epochs", [](C& c) -> int& { return c.masker.epochs; }));
    v.push_back(int_field("masker.batch_size", [](C& c) -> int& { return c.masker.batch_size; }));
    v.push_back(double_field("masker.lr_w_mask", [](C& c) -> double& { return c.masker.lr_w_mask; }));
    v.push_back(double_field("masker.lr_arch_mask", [](C& c) -> double& { return c.masker.lr_arch_mask; }));
    v.push_back(double_field("masker.lr_decay_factor", [](C& c) -> double& { return c.masker.lr_decay_factor; }));
    v.push_back(int_field("masker.lr_decay_after", [](C& c) -> int& { return c.masker.lr_decay_after; }));
    v.push_back(double_field("masker.mask_init", [](C& c) -> double& { return c.masker.mask_init; }));
    v.push_back(double_field("masker.tau", [](C& c) -> double& { return c.masker.tau; }));
    v.push_back(double_field("masker.clamp_lo", [](C& c) -> double& { return c.masker.clamp_lo; }));
    v.push_back(double_field("masker.clamp_hi", [](C& c) -> double& { return c.masker.clamp_hi; }));

    v.push_back(int_field("finetune.epochs", [](C& c) -> int& { return c.finetune.epochs; }));
    v.push_back(int_field("finetune.batch_size", [](C& c) -> int& { return c.finetune.batch_size; }));
    v.push_back(double_field("finetune.lr_init", [](C& c) -> double& { return c.finetune.lr_init; }));
    v.push_back(double_field("finetune.lr_min", [](C& c) -> double& { return c.finetune.lr_min; }));
    v.push_back(double_field("finetune.momentum", [](C& c) -> double& { return c.finetune.momentum; }));
    v.push_back(double_field("finetune.weight_decay", [](C& c) -> double& { return c.finetune.weight_decay; }));
    v.push_back(double_field("finetune.grad_clip", [](C& c) -> double& { return c.finetune.grad_clip; }));
    v.push_back({"finetune.init_mode", [](const C& c) { return std::string(init_mode_name(c.finetune.init_mode)); },
                 [](C& c, const std::string& s) { c.finetune.init_mode = parse_init_mode(s); }});
    v.push_back(double_field("finetune.target_loss", [](C& c) -> double& { return c.finetune.target_loss; }));

    v.push_back(int_field("ablation.random_archs", [](C& c) -> int& { return c.ablation.random_archs; }));
    return v;
  }();
  return f;
}

const Field& find_field(const std::string& key) {
  const Field* bare = nullptr;
  int matches = 0;
  for (const auto& f : fields()) {
    if (f.key == key) return f;
    const auto dot = f.key.find('.');
    if (dot != std::string::npos && f.key.compare(dot + 1, std::string::npos, key) == 0) {
      bare = &f;
      ++matches;
    }
  }
  if (matches == 1 && key.find('.') == std::string::npos) return *bare;
  if (matches > 1) throw ConfigError("ambiguous key '" + key + "'; use the module prefix (e.g. train." + key + ")");
  throw ConfigError("unknown key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.push_back(f.key);
  return k;
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  try {
    f.set(cfg, value);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.find("key '") != std::string::npos) throw;
    throw ConfigError("key '" + f.key + "': " + msg);
  }
}

std::string get_config_value(const ExperimentConfig& cfg, const std::string& key) { return find_field(key).get(cfg); }

void ExperimentConfig::validate() const {
  if (dataset.empty()) throw ConfigError("key 'dataset' must not be empty");
  if (out.empty()) throw ConfigError("key 'out' must not be empty");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("key 'test_fraction' must be in (0, 1)");
  if (ablation.random_archs < 1) throw ConfigError("key 'ablation.random_archs' must be at least 1");
  try {
    search.validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("search space: ") + e.what());
  }
  train.validate();
  masker.validate();
  finetune.validate();
}

void ExperimentConfig::apply_seeds() {
  train.seed = derive_seed(seed, "train");
  masker.seed = derive_seed(seed, "masker");
  finetune.seed = derive_seed(seed, "finetune");
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const { return echo_config(*this) == echo_config(o); }

ExperimentConfig parse_config_string(const std::string& text) {
  ExperimentConfig cfg;
  std::stringstream in(text);
  std::string raw;
  int line_no = 0;
  std::vector<std::pair<std::string, int>> seen;  // canonical key, line
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    try {
      set_config_value(cfg, key, trim(line.substr(eq + 1)));
      seen.push_back({find_field(key).key, line_no});
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    // point at the line that set the offending key, if one did
    const std::string msg = e.what();
    for (const auto& [key, ln] : seen) {
      const std::string bare = key.substr(key.find('.') + 1);
      if (msg.find(key) != std::string::npos || msg.find(bare) != std::string::npos)
        throw ConfigError("line " + std::to_string(ln) + ": key '" + key + "': " + msg);
    }
    throw;
  }
  cfg.apply_seeds();
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_string(ss.str());
}

void apply_overrides(ExperimentConfig& cfg, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    set_config_value(cfg, trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  cfg.validate();
  cfg.apply_seeds();
}

std::string echo_config(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace hmnas
