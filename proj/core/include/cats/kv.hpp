#pragma once

// Flat key=value records: the run configuration file format and the config
// block embedded in checkpoints. Lines starting with '#' and blank lines are
// ignored; whitespace around keys and values is trimmed.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cats/volume.hpp"

namespace cats::kv {

using Record = std::map<std::string, std::string>;

Record parse(const std::string& text);
Record read_file(const std::string& path);
std::string format(const Record& record);

std::string get(const Record& r, const std::string& key, const std::string& fallback);
std::int64_t get_int(const Record& r, const std::string& key, std::int64_t fallback);
double get_double(const Record& r, const std::string& key, double fallback);
bool get_bool(const Record& r, const std::string& key, bool fallback);
// Comma-separated integers, e.g. "3,6,12,24".
std::vector<std::int64_t> get_ints(const Record& r, const std::string& key, std::vector<std::int64_t> fallback);
// A single integer broadcast to three axes, or three comma-separated values.
Extent3 get_extent(const Record& r, const std::string& key, Extent3 fallback);

std::string join(const std::vector<std::int64_t>& values);
std::string join(const Extent3& values);
std::string format_double(double v);

}  // namespace cats::kv
