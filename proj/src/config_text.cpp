#include "lrmf/config_text.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>

#include "lrmf/format_error.hpp"

namespace lrmf {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigText::Section& ConfigText::section(const std::string& name) {
  for (Section& s : sections_)
    if (s.name == name) return s;
  sections_.push_back({name, {}});
  return sections_.back();
}

void ConfigText::set(const std::string& sec, const std::string& key, std::string value) {
  Section& s = section(sec);
  for (Entry& e : s.entries) {
    if (e.key == key) {
      e.value = std::move(value);
      return;
    }
  }
  s.entries.push_back({key, std::move(value)});
}

void ConfigText::set_double(const std::string& sec, const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", value);
  set(sec, key, buf);
}

void ConfigText::set_u64(const std::string& sec, const std::string& key, std::uint64_t value) {
  set(sec, key, std::to_string(value));
}

void ConfigText::set_bool(const std::string& sec, const std::string& key, bool value) {
  set(sec, key, value ? "true" : "false");
}

const ConfigText::Section* ConfigText::find_section(const std::string& name) const {
  for (const Section& s : sections_)
    if (s.name == name) return &s;
  return nullptr;
}

const std::string* ConfigText::find(const std::string& sec, const std::string& key) const {
  const Section* s = find_section(sec);
  if (!s) return nullptr;
  for (const Entry& e : s->entries)
    if (e.key == key) return &e.value;
  return nullptr;
}

const std::string& ConfigText::require(const std::string& sec, const std::string& key) const {
  const std::string* v = find(sec, key);
  if (!v) throw FormatError("config: missing entry " + sec + "." + key);
  return *v;
}

double ConfigText::get_double(const std::string& sec, const std::string& key) const {
  const std::string& v = require(sec, key);
  errno = 0;
  char* end = nullptr;
  double out = std::strtod(v.c_str(), &end);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE)
    throw FormatError("config: " + sec + "." + key + " is not a number: '" + v + "'");
  return out;
}

std::uint64_t ConfigText::get_u64(const std::string& sec, const std::string& key) const {
  const std::string& v = require(sec, key);
  errno = 0;
  char* end = nullptr;
  unsigned long long out = std::strtoull(v.c_str(), &end, 10);
  if (end != v.c_str() + v.size() || v.empty() || errno == ERANGE || v[0] == '-')
    throw FormatError("config: " + sec + "." + key + " is not a nonnegative integer: '" + v + "'");
  return out;
}

bool ConfigText::get_bool(const std::string& sec, const std::string& key) const {
  const std::string& v = require(sec, key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw FormatError("config: " + sec + "." + key + " is not a boolean: '" + v + "'");
}

std::string ConfigText::serialize() const {
  std::string out;
  for (std::size_t i = 0; i < sections_.size(); ++i) {
    if (i > 0) out += "\n";
    out += "[" + sections_[i].name + "]\n";
    for (const Entry& e : sections_[i].entries) out += e.key + " = " + e.value + "\n";
  }
  return out;
}

ConfigText ConfigText::parse(const std::string& text) {
  ConfigText cfg;
  Section* current = nullptr;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw FormatError("config: line " + std::to_string(line_no) + ": malformed section header");
      cfg.sections_.push_back({trim(t.substr(1, t.size() - 2)), {}});
      current = &cfg.sections_.back();
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw FormatError("config: line " + std::to_string(line_no) + ": expected 'key = value'");
    if (!current)
      throw FormatError("config: line " + std::to_string(line_no) + ": entry before any section");
    std::string key = trim(t.substr(0, eq));
    if (key.empty())
      throw FormatError("config: line " + std::to_string(line_no) + ": empty key");
    current->entries.push_back({std::move(key), trim(t.substr(eq + 1))});
  }
  return cfg;
}

}  // namespace lrmf
