#include "merit/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "merit/errors.hpp"

namespace merit {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename N> N parse_number(std::string_view v) {
  N out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw ConfigError("expected a number, got '" + std::string(v) + "'");
  }
  return out;
}

double parse_real(std::string_view v) {
  const double x = parse_number<double>(v);
  if (!std::isfinite(x)) {
    throw ConfigError("expected a finite number, got '" + std::string(v) + "'");
  }
  return x;
}

bool parse_bool(std::string_view v) {
  if (v == "true" || v == "1" || v == "on") {
    return true;
  }
  if (v == "false" || v == "0" || v == "off") {
    return false;
  }
  throw ConfigError("expected true or false, got '" + std::string(v) + "'");
}

Precision parse_precision(std::string_view v) {
  if (v == "f64") {
    return Precision::f64;
  }
  if (v == "f32") {
    return Precision::f32;
  }
  throw ConfigError("precision must be f32 or f64, got '" + std::string(v) +
                    "'");
}

using Setter = std::function<void(TrainConfig &, std::string_view)>;

template <typename N> Setter set_integer(N TrainConfig::*field) {
  return [field](TrainConfig &c, std::string_view v) {
    c.*field = parse_number<N>(v);
  };
}

const std::map<std::string, Setter, std::less<>> &setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"model.n_layer",
       [](TrainConfig &c, std::string_view v) {
         c.model.n_layer = parse_number<std::size_t>(v);
       }},
      {"model.n_head",
       [](TrainConfig &c, std::string_view v) {
         c.model.n_head = parse_number<std::size_t>(v);
       }},
      {"model.d_model",
       [](TrainConfig &c, std::string_view v) {
         c.model.d_model = parse_number<std::size_t>(v);
       }},
      {"model.context_len",
       [](TrainConfig &c, std::string_view v) {
         c.model.context_len = parse_number<std::size_t>(v);
       }},
      {"model.vocab_size",
       [](TrainConfig &c, std::string_view v) {
         c.model.vocab_size = parse_number<std::size_t>(v);
       }},
      {"model.qk_norm",
       [](TrainConfig &c, std::string_view v) {
         c.model.qk_norm = parse_bool(v);
       }},
      {"optimizer",
       [](TrainConfig &c, std::string_view v) {
         c.optimizer = parse_optimizer_kind(v);
       }},
      {"hp.peak_lr",
       [](TrainConfig &c, std::string_view v) { c.hp.peak_lr = parse_real(v); }},
      {"hp.beta1",
       [](TrainConfig &c, std::string_view v) { c.hp.beta1 = parse_real(v); }},
      {"hp.beta2",
       [](TrainConfig &c, std::string_view v) { c.hp.beta2 = parse_real(v); }},
      {"hp.eps",
       [](TrainConfig &c, std::string_view v) { c.hp.eps = parse_real(v); }},
      {"hp.weight_decay",
       [](TrainConfig &c, std::string_view v) {
         c.hp.weight_decay = parse_real(v);
       }},
      {"hp.clip_threshold",
       [](TrainConfig &c, std::string_view v) {
         c.hp.clip_threshold = parse_real(v);
       }},
      {"hp.global_grad_clip",
       [](TrainConfig &c, std::string_view v) {
         c.hp.global_grad_clip = parse_real(v);
       }},
      {"merit.clip",
       [](TrainConfig &c, std::string_view v) { c.merit.clip = parse_bool(v); }},
      {"merit.elementwise",
       [](TrainConfig &c, std::string_view v) {
         c.merit.elementwise = parse_bool(v);
       }},
      {"merit.weightwise_bound",
       [](TrainConfig &c, std::string_view v) {
         c.merit.weightwise_bound = parse_bool(v);
       }},
      {"merit.vector_policy",
       [](TrainConfig &c, std::string_view v) {
         c.vector_policy = parse_vector_policy(v);
       }},
      {"sched.total_steps",
       [](TrainConfig &c, std::string_view v) {
         c.sched.total_steps = parse_number<std::int64_t>(v);
       }},
      {"sched.warmup_ratio",
       [](TrainConfig &c, std::string_view v) {
         c.sched.warmup_ratio = parse_real(v);
       }},
      {"sched.floor_fraction",
       [](TrainConfig &c, std::string_view v) {
         c.sched.floor_fraction = parse_real(v);
       }},
      {"batch_size_sequences", set_integer(&TrainConfig::batch_size_sequences)},
      {"grad_accum_steps", set_integer(&TrainConfig::grad_accum_steps)},
      {"data.corpus_path",
       [](TrainConfig &c, std::string_view v) {
         c.data.corpus_path = std::string(v);
       }},
      {"data.synthetic_length",
       [](TrainConfig &c, std::string_view v) {
         c.data.synthetic_length = parse_number<std::size_t>(v);
       }},
      {"data.synthetic_order",
       [](TrainConfig &c, std::string_view v) {
         c.data.synthetic_order = parse_number<std::size_t>(v);
       }},
      {"data.synthetic_branching",
       [](TrainConfig &c, std::string_view v) {
         c.data.synthetic_branching = parse_number<std::size_t>(v);
       }},
      {"seed", set_integer(&TrainConfig::seed)},
      {"eval_interval", set_integer(&TrainConfig::eval_interval)},
      {"log_interval", set_integer(&TrainConfig::log_interval)},
      {"eval_batches", set_integer(&TrainConfig::eval_batches)},
      {"out_dir",
       [](TrainConfig &c, std::string_view v) { c.out_dir = std::string(v); }},
      {"run_id",
       [](TrainConfig &c, std::string_view v) { c.run_id = std::string(v); }},
      {"precision",
       [](TrainConfig &c, std::string_view v) {
         c.precision = parse_precision(v);
       }},
      {"log_wall_time",
       [](TrainConfig &c, std::string_view v) {
         c.log_wall_time = parse_bool(v);
       }},
  };
  return table;
}

} // namespace

void TrainConfig::validate() const {
  model.validate();
  hp.validate();
  sched.validate();
  if (batch_size_sequences == 0) {
    throw ConfigError("batch_size_sequences must be positive");
  }
  if (grad_accum_steps == 0) {
    throw ConfigError("grad_accum_steps must be positive");
  }
  if (eval_interval <= 0 || log_interval <= 0) {
    throw ConfigError("eval_interval and log_interval must be positive");
  }
  if (eval_batches == 0) {
    throw ConfigError("eval_batches must be positive");
  }
  if (model.vocab_size < 256) {
    throw ConfigError("model.vocab_size must be at least 256 for byte data");
  }
  if (data.corpus_path.empty()) {
    if (data.synthetic_order == 0) {
      throw ConfigError("data.synthetic_order must be at least 1");
    }
    if (data.synthetic_branching == 0 ||
        data.synthetic_branching > 256) {
      throw ConfigError("data.synthetic_branching must lie in [1, 256]");
    }
    if (data.synthetic_length <= model.context_len) {
      throw ConfigError("data.synthetic_length must exceed model.context_len");
    }
  }
  if (out_dir.empty()) {
    throw ConfigError("out_dir must not be empty");
  }
}

TrainConfig parse_config(std::string_view text, const std::string &origin) {
  TrainConfig cfg;
  std::set<std::string, std::less<>> seen;
  bool chinchilla = false;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = std::min(text.find('\n', pos), text.size());
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) {
      line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) {
      continue;
    }
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(where + "expected 'key = value'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    if (value.empty()) {
      throw ConfigError(where + "missing value for '" + std::string(key) + "'");
    }
    if (!seen.insert(std::string(key)).second) {
      throw ConfigError(where + "duplicate key '" + std::string(key) + "'");
    }
    if (key == "preset") {
      if (value != "chinchilla") {
        throw ConfigError(where + "unknown preset '" + std::string(value) + "'");
      }
      chinchilla = true;
      continue;
    }
    const auto it = setters().find(key);
    if (it == setters().end()) {
      throw ConfigError(where + "unknown key '" + std::string(key) + "'");
    }
    try {
      it->second(cfg, value);
    } catch (const ConfigError &e) {
      throw ConfigError(where + std::string(key) + ": " + e.what());
    }
  }
  if (chinchilla && !seen.contains("sched.total_steps")) {
    cfg.sched.total_steps = chinchilla_steps(cfg);
  }
  try {
    cfg.validate();
  } catch (const ConfigError &e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("cannot read config file '" + path.string() + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.string());
}

std::size_t parameter_count(const ModelConfig &cfg) {
  const std::size_t d = cfg.d_model;
  const std::size_t per_layer = 2 * d + 4 * d * d + 8 * d * d;
  return cfg.vocab_size * d + cfg.context_len * d + cfg.n_layer * per_layer + d;
}

std::int64_t chinchilla_steps(const TrainConfig &cfg) {
  const double tokens = 20.0 * static_cast<double>(parameter_count(cfg.model));
  return static_cast<std::int64_t>(
      std::ceil(tokens / static_cast<double>(cfg.tokens_per_step())));
}

std::string_view to_string(Precision p) {
  return p == Precision::f32 ? "f32" : "f64";
}

} // namespace merit
