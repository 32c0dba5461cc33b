#include "kromhc/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kromhc/error.hpp"

namespace kromhc {

namespace {

constexpr std::array<std::string_view, 18> kKeys = {
    "scheme",       "n",          "factorization", "D",           "C",
    "heads",        "vocab_size", "seq_len",       "batch_size",  "steps",
    "learning_rate", "weight_decay", "seed",       "shared_alpha", "sk_iters",
    "output_dir",   "active_stream", "record_wall_ms"};

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
bool parse_unsigned(std::string_view s, T& out) {
  if (s.empty() || s.front() == '-' || s.front() == '+') return false;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_double(std::string_view s, double& out) {
  if (s.empty()) return false;
  const std::string buf(s);
  std::istringstream is(buf);
  is.imbue(std::locale::classic());
  is >> out;
  return is && is.peek() == std::char_traits<char>::eof() && std::isfinite(out);
}

bool parse_bool(std::string_view s, bool& out) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  if (lower == "true" || lower == "1" || lower == "yes" || lower == "on") {
    out = true;
    return true;
  }
  if (lower == "false" || lower == "0" || lower == "no" || lower == "off") {
    out = false;
    return true;
  }
  return false;
}

bool parse_factors(std::string_view s, std::vector<std::size_t>& out) {
  out.clear();
  if (trim(s).empty()) return true;
  while (true) {
    const auto comma = s.find(',');
    std::size_t f = 0;
    if (!parse_unsigned(trim(s.substr(0, comma)), f)) return false;
    out.push_back(f);
    if (comma == std::string_view::npos) return true;
    s.remove_prefix(comma + 1);
  }
}

class Assigner {
 public:
  explicit Assigner(RunConfig& cfg) : cfg_(cfg) {}

  void assign(std::string_view where, std::string_view key, std::string_view value) {
    auto bad = [&](std::string_view expected) {
      problems.push_back(std::string(where) + ": " + std::string(key) + " = '" + std::string(value) +
                         "' is not " + std::string(expected));
    };
    auto size_field = [&](std::size_t& field) {
      if (!parse_unsigned(value, field)) bad("a non-negative integer");
    };
    if (key == "scheme") {
      try {
        cfg_.scheme = parse_scheme(value);
      } catch (const ConfigError&) {
        bad("one of residual, hc, mhc, mhclite, kromhc");
      }
    } else if (key == "n") {
      size_field(cfg_.n);
    } else if (key == "factorization") {
      if (!parse_factors(value, cfg_.factorization)) bad("a comma-separated list of integers");
    } else if (key == "D") {
      size_field(cfg_.depth);
    } else if (key == "C") {
      size_field(cfg_.width);
    } else if (key == "heads") {
      size_field(cfg_.heads);
    } else if (key == "vocab_size") {
      size_field(cfg_.vocab_size);
    } else if (key == "seq_len") {
      size_field(cfg_.seq_len);
    } else if (key == "batch_size") {
      size_field(cfg_.batch_size);
    } else if (key == "steps") {
      size_field(cfg_.steps);
    } else if (key == "sk_iters") {
      size_field(cfg_.sk_iters);
    } else if (key == "learning_rate") {
      if (!parse_double(value, cfg_.learning_rate)) bad("a finite number");
    } else if (key == "weight_decay") {
      if (!parse_double(value, cfg_.weight_decay)) bad("a finite number");
    } else if (key == "seed") {
      if (!parse_unsigned(value, cfg_.seed)) bad("an unsigned 64-bit integer");
    } else if (key == "shared_alpha") {
      if (!parse_bool(value, cfg_.shared_alpha)) bad("a boolean");
    } else if (key == "record_wall_ms") {
      if (!parse_bool(value, cfg_.record_wall_ms)) bad("a boolean");
    } else if (key == "output_dir") {
      cfg_.output_dir = std::string(value);
    } else if (key == "active_stream") {
      if (value == "rotate") {
        cfg_.active_stream = ActiveStream::kRotate;
      } else if (value == "first") {
        cfg_.active_stream = ActiveStream::kFirst;
      } else {
        bad("rotate or first");
      }
    } else {
      problems.push_back(std::string(where) + ": unknown key '" + std::string(key) + "'");
    }
  }

  void assign_line(std::string_view where, std::string_view line, char sep) {
    const auto pos = line.find(sep);
    if (pos == std::string_view::npos) {
      problems.push_back(std::string(where) + ": expected 'key " + sep + " value', got '" +
                         std::string(line) + "'");
      return;
    }
    assign(where, trim(line.substr(0, pos)), trim(line.substr(pos + 1)));
  }

  std::vector<std::string> problems;

 private:
  RunConfig& cfg_;
};

}  // namespace

std::span<const std::string_view> config_keys() { return kKeys; }

LoadedConfig parse_config(std::string_view text, std::span<const std::string> overrides,
                          RunConfig base) {
  LoadedConfig out{std::move(base), {}};
  Assigner assigner(out.config);
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    assigner.assign_line("line " + std::to_string(line_no), line, '=');
  }
  for (const auto& o : overrides) assigner.assign_line("override '" + o + "'", o, '=');

  std::vector<std::string> problems = std::move(assigner.problems);
  if (problems.empty()) {
    for (auto& v : out.config.violations()) problems.push_back(std::move(v));
  }
  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  out.warnings = config_warnings(out.config);
  return out;
}

LoadedConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides,
                         RunConfig base) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), overrides, std::move(base));
}

std::vector<std::string> config_warnings(const RunConfig& cfg) {
  std::vector<std::string> out;
  if (cfg.scheme == Scheme::kKromHC && cfg.n >= 5) {
    const FactorSpec spec = cfg.factor_spec();
    if (spec.order() == 1) {
      out.push_back("n = " + std::to_string(cfg.n) +
                    " is prime, so KromHC runs with a single factor [" + std::to_string(cfg.n) +
                    "] and an n!-term permutation basis; the Kronecker factorization gives no "
                    "parameter savings for a large prime n");
    }
  }
  return out;
}

}  // namespace kromhc
