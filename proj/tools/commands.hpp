#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace dpgd::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// Bad flag combination or missing required value.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Config file or value that cannot be parsed.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum Exit : int { ok = 0, other = 1, usage = 2, missing = 3, malformed = 4, resolution = 5 };

struct Key {
  std::string name;
  std::string fallback;
  std::string help;
};

/// Resolved key/value configuration with typed accessors.
class Config {
 public:
  std::map<std::string, std::string> values;

  const std::string& str(const std::string& k) const;
  bool has(const std::string& k) const { return !str(k).empty(); }
  /// Decimal or fraction ("16/255").
  double num(const std::string& k) const;
  std::uint64_t uint(const std::string& k) const;
  long sint(const std::string& k) const;
  bool flag(const std::string& k) const;
  std::vector<std::string> list(const std::string& k) const;
  std::vector<std::size_t> sizes(const std::string& k) const;
  fs::path path(const std::string& k) const;
};

double parse_number(const std::string& text, const std::string& what);

/// "key = value" lines; '#' starts a comment.
std::map<std::string, std::string> read_config_file(const fs::path& p);

struct Context {
  std::string command;
  fs::path out;
  unsigned jobs = 1;
  bool deterministic = false;
};

/// What a command hands back for the manifest.
struct Result {
  json metrics = json::object();
  json seeds = json::object();
  std::vector<fs::path> inputs;  // files whose digests identify the run
};

struct Command {
  std::string name;
  std::string help;
  std::vector<Key> keys;
  std::function<Result(const Config&, const Context&)> run;
  bool writes_manifest = true;
};

const std::vector<Command>& commands();

/// Writes manifest.json for a finished command.
void write_manifest(const Context& ctx, const Config& cfg, const Result& r, double seconds, std::int64_t peak_bytes);

/// Parses argv and runs; returns the process exit code.
int run(int argc, char** argv);

}  // namespace dpgd::cli
