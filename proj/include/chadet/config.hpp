#pragma once

#include <sstream>
#include <string>
#include <vector>

#include "chadet/losses.hpp"
#include "chadet/nn.hpp"
#include "chadet/trainer.hpp"

namespace chadet {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct Config {
  StageConfig stages;
  DepthRange range;
  LossWeights weights;
  std::string lr_preset = "synthetic";
  LrSchedule schedule = LrSchedule::synthetic();
  int batch_size = 4;
  int epochs = 10;
  int max_steps = 0;
  std::uint64_t seed = 0;
  std::string data_root;
  int n_points = 1500;
  int image_size = 64;

  void validate() const {
    stages.validate();
    range.validate();
    weights.validate();
    schedule.validate();
    require(batch_size > 0 && epochs > 0 && image_size > 0 && n_points >= 0,
            "config: sizes must be positive");
    stages.check_input_size(image_size, image_size);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_list(const std::string& v, int line) {
  std::string body = trim(v);
  if (body.size() < 2 || body.front() != '[' || body.back() != ']')
    throw ConfigError("line " + std::to_string(line) +
                      ": expected bracketed list, got '" + v + "'");
  body = body.substr(1, body.size() - 2);
  std::vector<std::string> out;
  std::istringstream is(body);
  std::string item;
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  return out;
}

inline std::vector<int> int_list(const std::string& v, int line) {
  std::vector<int> out;
  for (const auto& s : split_list(v, line)) {
    try {
      out.push_back(std::stoi(s));
    } catch (const std::logic_error&) {
      throw ConfigError("line " + std::to_string(line) +
                        ": expected integer, got '" + s + "'");
    }
  }
  return out;
}

inline double num(const std::string& v, int line) {
  try {
    size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != trim(v).size() && pos != v.size())
      throw ConfigError("line " + std::to_string(line) +
                        ": trailing characters in number '" + v + "'");
    return d;
  } catch (const std::logic_error&) {
    throw ConfigError("line " + std::to_string(line) +
                      ": expected number, got '" + v + "'");
  }
}

// Span syntax: [0-2:5e-5, 3-8:1e-4, ...]
inline LrSchedule parse_schedule(const std::string& v, int line) {
  LrSchedule sch;
  for (const auto& item : split_list(v, line)) {
    size_t dash = item.find('-');
    size_t colon = item.find(':');
    if (dash == std::string::npos || colon == std::string::npos ||
        dash > colon)
      throw ConfigError("line " + std::to_string(line) +
                        ": expected first-last:lr, got '" + item + "'");
    try {
      sch.spans.push_back({std::stoi(item.substr(0, dash)),
                           std::stoi(item.substr(dash + 1, colon - dash - 1)),
                           std::stod(item.substr(colon + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("line " + std::to_string(line) +
                        ": bad schedule span '" + item + "'");
    }
  }
  return sch;
}

}  // namespace detail

// key = value lines, '#' comments; lists are comma-separated in brackets.
// Unknown keys are errors reported with the line number.
inline Config parse_config(const std::string& text) {
  Config cfg;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  bool explicit_schedule = false;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = raw;
    size_t hash = s.find('#');
    if (hash != std::string::npos) s = s.substr(0, hash);
    s = detail::trim(s);
    if (s.empty()) continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line) +
                        ": expected key = value");
    std::string key = detail::trim(s.substr(0, eq));
    std::string val = detail::trim(s.substr(eq + 1));
    if (key == "channels") cfg.stages.channels = detail::int_list(val, line);
    else if (key == "windows") cfg.stages.windows = detail::int_list(val, line);
    else if (key == "heads") cfg.stages.heads = detail::int_list(val, line);
    else if (key == "min_depth") cfg.range.min_d = detail::num(val, line);
    else if (key == "max_depth") cfg.range.max_d = detail::num(val, line);
    else if (key == "w_p") cfg.weights.w_p = detail::num(val, line);
    else if (key == "w_1") cfg.weights.w_1 = detail::num(val, line);
    else if (key == "w_2") cfg.weights.w_2 = detail::num(val, line);
    else if (key == "w_d") cfg.weights.w_d = detail::num(val, line);
    else if (key == "w_s") cfg.weights.w_s = detail::num(val, line);
    else if (key == "lr_preset") {
      cfg.lr_preset = val;
      if (val == "synthetic") cfg.schedule = LrSchedule::synthetic();
      else if (val == "outdoor") cfg.schedule = LrSchedule::outdoor();
      else if (val == "indoor") cfg.schedule = LrSchedule::indoor();
      else
        throw ConfigError("line " + std::to_string(line) +
                          ": unknown lr preset '" + val + "'");
    } else if (key == "lr_schedule") {
      cfg.schedule = detail::parse_schedule(val, line);
      explicit_schedule = true;
    } else if (key == "batch_size")
      cfg.batch_size = static_cast<int>(detail::num(val, line));
    else if (key == "epochs") cfg.epochs = static_cast<int>(detail::num(val, line));
    else if (key == "max_steps")
      cfg.max_steps = static_cast<int>(detail::num(val, line));
    else if (key == "seed")
      cfg.seed = static_cast<std::uint64_t>(detail::num(val, line));
    else if (key == "data_root") cfg.data_root = val;
    else if (key == "n_points")
      cfg.n_points = static_cast<int>(detail::num(val, line));
    else if (key == "image_size")
      cfg.image_size = static_cast<int>(detail::num(val, line));
    else
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" +
                        key + "'");
  }
  (void)explicit_schedule;
  cfg.validate();
  return cfg;
}

}  // namespace chadet
