#include <chrono>
#include <cstdio>

#include <CLI11.hpp>

#include "commands.hpp"
#include "dpgd/io.hpp"
#include "dpgd/tensor.hpp"

namespace dpgd::cli {

int run(int argc, char** argv) {
  CLI::App app{"Diff-PGD desk laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "dpgd 0.1.0");

  struct Bound {
    const Command* cmd;
    CLI::App* sub;
    std::map<std::string, std::string> flags;
    std::map<std::string, CLI::Option*> opts;
    std::string config_file, replay, out;
    unsigned jobs = 1;
    bool deterministic = false;
  };
  std::vector<std::unique_ptr<Bound>> bound;
  for (const auto& cmd : commands()) {
    auto b = std::make_unique<Bound>();
    b->cmd = &cmd;
    b->sub = app.add_subcommand(cmd.name, cmd.help);
    for (const auto& k : cmd.keys) {
      std::string desc = k.help;
      if (!k.fallback.empty()) desc += (desc.empty() ? "" : " ") + std::string("(default ") + k.fallback + ")";
      b->opts[k.name] = b->sub->add_option("--" + k.name, b->flags[k.name], desc);
    }
    b->sub->add_option("--config", b->config_file, "key = value config file");
    b->sub->add_option("--replay", b->replay, "manifest.json whose config is reused");
    b->sub->add_option("--out", b->out, "output directory")->required();
    b->sub->add_option("--jobs", b->jobs, "samples processed in parallel")->check(CLI::Range(1u, 256u));
    b->sub->add_flag("--deterministic", b->deterministic, "single-threaded, bit-reproducible");
    bound.push_back(std::move(b));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? Exit::ok : Exit::usage;
  }

  Bound* b = nullptr;
  for (auto& x : bound)
    if (x->sub->parsed()) b = x.get();
  Context ctx{b->cmd->name, b->out, b->deterministic ? 1u : b->jobs, b->deterministic};

  try {
    // Precedence: defaults < replayed manifest < config file < flags.
    Config cfg;
    for (const auto& k : b->cmd->keys) cfg.values[k.name] = k.fallback;
    auto overlay = [&](const std::map<std::string, std::string>& src, const std::string& origin) {
      for (const auto& [k, v] : src) {
        if (!cfg.values.count(k)) throw ConfigError(origin + ": unknown key '" + k + "' for " + ctx.command);
        cfg.values[k] = v;
      }
    };
    if (!b->replay.empty()) {
      std::ifstream in(b->replay);
      if (!in) throw FileError("manifest not found: " + b->replay);
      json m;
      try {
        m = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError(b->replay + ": " + e.what());
      }
      if (m.value("command", "") != ctx.command)
        throw UsageError("manifest is for '" + m.value("command", "") + "', not '" + ctx.command + "'");
      overlay(m.at("config").get<std::map<std::string, std::string>>(), b->replay);
    }
    if (!b->config_file.empty()) overlay(read_config_file(b->config_file), b->config_file);
    for (const auto& [k, opt] : b->opts)
      if (opt->count()) cfg.values[k] = b->flags[k];

    const auto t0 = std::chrono::steady_clock::now();
    memory::reset_peak();
    std::filesystem::create_directories(ctx.out);
    const Result r = b->cmd->run(cfg, ctx);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_manifest(ctx, cfg, r, secs, memory::peak());
    return Exit::ok;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "dpgd: usage error: %s\n", e.what());
    return Exit::usage;
  } catch (const FileError& e) {
    std::fprintf(stderr, "dpgd: missing file: %s\n", e.what());
    return Exit::missing;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "dpgd: malformed config: %s\n", e.what());
    return Exit::malformed;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "dpgd: malformed file: %s\n", e.what());
    return Exit::malformed;
  } catch (const ResolutionError& e) {
    std::fprintf(stderr, "dpgd: resolution mismatch: %s\n", e.what());
    return Exit::resolution;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "dpgd: error: %s\n", e.what());
    return Exit::other;
  }
}

}  // namespace dpgd::cli

int main(int argc, char** argv) { return dpgd::cli::run(argc, argv); }
