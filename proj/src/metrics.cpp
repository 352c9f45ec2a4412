#include "merit/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "merit/errors.hpp"

namespace merit {

using nlohmann::json;

namespace {

json number(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

json numbers(const std::vector<double> &xs) {
  json arr = json::array();
  for (double x : xs) {
    arr.push_back(number(x));
  }
  return arr;
}

double get_number(const json &j, const char *key) {
  const auto it = j.find(key);
  if (it == j.end()) {
    throw FormatError(std::string("missing field '") + key + "'");
  }
  if (it->is_null()) {
    return std::nan("");
  }
  if (!it->is_number()) {
    throw FormatError(std::string("field '") + key + "' is not a number");
  }
  return it->get<double>();
}

std::optional<double> get_optional(const json &j, const char *key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) {
    return std::nullopt;
  }
  if (!it->is_number()) {
    throw FormatError(std::string("field '") + key + "' is not a number");
  }
  return it->get<double>();
}

std::vector<double> get_numbers(const json &j, const char *key) {
  const auto it = j.find(key);
  if (it == j.end()) {
    return {};
  }
  if (!it->is_array()) {
    throw FormatError(std::string("field '") + key + "' is not an array");
  }
  std::vector<double> out;
  for (const auto &x : *it) {
    out.push_back(x.is_null() ? std::nan("") : x.get<double>());
  }
  return out;
}

} // namespace

double MetricsRecord::peak_max_logit() const {
  if (per_layer_max_logit.empty()) {
    return 0.0;
  }
  return *std::max_element(per_layer_max_logit.begin(),
                           per_layer_max_logit.end());
}

std::string to_json_line(const MetricsRecord &r) {
  json j;
  j["step"] = r.step;
  j["lr"] = number(r.lr);
  j["train_loss"] = r.train_loss ? number(*r.train_loss) : json(nullptr);
  j["val_loss"] = r.val_loss ? number(*r.val_loss) : json(nullptr);
  j["per_layer_max_logit"] = numbers(r.per_layer_max_logit);
  j["per_layer_attention_entropy"] = numbers(r.per_layer_attention_entropy);
  j["mean_attention_entropy"] = number(r.mean_attention_entropy);
  j["clip_fraction"] = number(r.clip_fraction);
  j["bound_fraction"] = number(r.bound_fraction);
  j["per_layer_clip_fraction"] = numbers(r.per_layer_clip_fraction);
  j["per_layer_bound_fraction"] = numbers(r.per_layer_bound_fraction);
  j["global_grad_norm"] = number(r.global_grad_norm);
  j["wall_ms"] = r.wall_ms;
  j["tokens_per_step"] = r.tokens_per_step;
  j["diverged"] = r.diverged;
  return j.dump();
}

MetricsRecord parse_metrics_line(const std::string &line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no) + ": ";
  try {
    const json j = json::parse(line);
    if (!j.is_object()) {
      throw FormatError("expected a JSON object");
    }
    MetricsRecord r;
    const auto step = j.find("step");
    if (step == j.end() || !step->is_number_integer()) {
      throw FormatError("missing integer field 'step'");
    }
    r.step = step->get<std::int64_t>();
    r.lr = get_number(j, "lr");
    r.train_loss = get_optional(j, "train_loss");
    r.val_loss = get_optional(j, "val_loss");
    r.per_layer_max_logit = get_numbers(j, "per_layer_max_logit");
    r.per_layer_attention_entropy = get_numbers(j, "per_layer_attention_entropy");
    r.mean_attention_entropy = get_number(j, "mean_attention_entropy");
    r.clip_fraction = get_number(j, "clip_fraction");
    r.bound_fraction = get_number(j, "bound_fraction");
    r.per_layer_clip_fraction = get_numbers(j, "per_layer_clip_fraction");
    r.per_layer_bound_fraction = get_numbers(j, "per_layer_bound_fraction");
    r.global_grad_norm = get_number(j, "global_grad_norm");
    r.wall_ms = j.value("wall_ms", std::int64_t{0});
    r.tokens_per_step = j.value("tokens_per_step", std::size_t{0});
    r.diverged = j.value("diverged", false);
    return r;
  } catch (const json::exception &e) {
    throw FormatError(where + e.what());
  } catch (const FormatError &e) {
    throw FormatError(where + e.what());
  }
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot read metrics file '" + path.string() + "'");
  }
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    try {
      MetricsRecord r = parse_metrics_line(line, line_no);
      if (!out.empty() && r.step <= out.back().step) {
        throw FormatError("line " + std::to_string(line_no) +
                          ": step does not increase");
      }
      out.push_back(std::move(r));
    } catch (const FormatError &e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

MetricsWriter::MetricsWriter(const std::filesystem::path &path)
    : path_(path), out_(path, std::ios::trunc) {
  if (!out_) {
    throw IoError("cannot write metrics file '" + path.string() + "'");
  }
}

void MetricsWriter::append(const MetricsRecord &r) {
  out_ << to_json_line(r) << '\n';
  out_.flush();
  if (!out_) {
    throw IoError("error while writing '" + path_.string() + "'");
  }
}

} // namespace merit
