#ifndef LRMF_CONFIG_TEXT_HPP
#define LRMF_CONFIG_TEXT_HPP

#include <cstdint>
#include <string>
#include <vector>

namespace lrmf {

/// Line-oriented configuration text: `[section]` headers, `key = value`
/// entries, `#` comments, blank lines ignored. Sections and keys keep
/// insertion order so a parse/serialize round-trip is byte-stable.
class ConfigText {
 public:
  struct Entry {
    std::string key;
    std::string value;
  };
  struct Section {
    std::string name;
    std::vector<Entry> entries;
  };

  /// Appends or overwrites; the section is created on first use.
  void set(const std::string& section, const std::string& key, std::string value);
  void set_double(const std::string& section, const std::string& key, double value);
  void set_u64(const std::string& section, const std::string& key, std::uint64_t value);
  void set_bool(const std::string& section, const std::string& key, bool value);

  /// nullptr when the section or key is absent.
  const std::string* find(const std::string& section, const std::string& key) const;
  const Section* find_section(const std::string& name) const;

  /// Throw FormatError naming section.key when absent or unparsable.
  const std::string& require(const std::string& section, const std::string& key) const;
  double get_double(const std::string& section, const std::string& key) const;
  std::uint64_t get_u64(const std::string& section, const std::string& key) const;
  bool get_bool(const std::string& section, const std::string& key) const;

  const std::vector<Section>& sections() const { return sections_; }

  /// Doubles rendered with set_double survive a round-trip bit-exactly
  /// (17 significant digits).
  std::string serialize() const;

  /// Throws FormatError with the line number on a malformed header, an entry
  /// without '=', or an entry before any section.
  static ConfigText parse(const std::string& text);

 private:
  Section& section(const std::string& name);
  std::vector<Section> sections_;
};

}  // namespace lrmf

#endif
