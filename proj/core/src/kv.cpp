#include "cats/kv.hpp"

#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cats/errors.hpp"

namespace cats::kv {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::int64_t to_int(const std::string& key, const std::string& text) {
  std::int64_t v = 0;
  const auto t = trim(text);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) {
    throw ConfigError("config key '" + key + "': '" + text + "' is not an integer");
  }
  return v;
}

}  // namespace

Record parse(const std::string& text) {
  Record r;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    r[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
  }
  return r;
}

Record read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string format(const Record& record) {
  std::string out;
  for (const auto& [k, v] : record) out += k + "=" + v + "\n";
  return out;
}

std::string get(const Record& r, const std::string& key, const std::string& fallback) {
  const auto it = r.find(key);
  return it == r.end() ? fallback : it->second;
}

std::int64_t get_int(const Record& r, const std::string& key, std::int64_t fallback) {
  const auto it = r.find(key);
  return it == r.end() ? fallback : to_int(key, it->second);
}

double get_double(const Record& r, const std::string& key, double fallback) {
  const auto it = r.find(key);
  if (it == r.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + it->second + "' is not a number");
  }
}

bool get_bool(const Record& r, const std::string& key, bool fallback) {
  const auto it = r.find(key);
  if (it == r.end()) return fallback;
  if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
  if (it->second == "false" || it->second == "0" || it->second == "no") return false;
  throw ConfigError("config key '" + key + "': '" + it->second + "' is not a boolean");
}

std::vector<std::int64_t> get_ints(const Record& r, const std::string& key, std::vector<std::int64_t> fallback) {
  const auto it = r.find(key);
  if (it == r.end()) return fallback;
  std::vector<std::int64_t> out;
  std::stringstream ss(it->second);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_int(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

Extent3 get_extent(const Record& r, const std::string& key, Extent3 fallback) {
  const auto it = r.find(key);
  if (it == r.end()) return fallback;
  const auto v = get_ints(r, key, {});
  if (v.size() == 1) return {v[0], v[0], v[0]};
  if (v.size() == 3) return {v[0], v[1], v[2]};
  throw ConfigError("config key '" + key + "' needs one or three integers");
}

std::string join(const std::vector<std::int64_t>& values) {
  std::string s;
  for (std::size_t i = 0; i < values.size(); ++i) s += (i ? "," : "") + std::to_string(values[i]);
  return s;
}

std::string join(const Extent3& values) { return join(std::vector<std::int64_t>(values.begin(), values.end())); }

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace cats::kv
