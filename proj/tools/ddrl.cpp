// ddrl: train, evaluate, verify and serve rewards from the command line.
//
//   ddrl sft    [--config FILE] [--section.key=value ...]
//   ddrl rl     [--config FILE] [--section.key=value ...]
//   ddrl eval   [--config FILE] [--section.key=value ...]
//   ddrl verify {theorem1|kl_equivalence|gradients|advantages} [--config FILE] [...]
//   ddrl serve  [--config FILE] [--serve.bind=HOST:PORT] [--reward.workers=N] ...
//
// Settings layer as file < DDRL__SECTION__KEY environment variables < flags.
// Exit status: 0 success, 1 invalid configuration or arguments, 2 runtime
// failure, 3 verification failure.

#include <CLI11.hpp>

#include <iostream>
#include <string>
#include <vector>

#include "ddrl/cli/commands.hpp"

extern char** environ;

namespace {

enum Exit { kOk = 0, kValidation = 1, kRuntime = 2, kVerification = 3 };

// "--a.b=v" or "--a.b v" pairs from the arguments CLI11 left over.
std::vector<std::pair<std::string, std::string>> dotted_flags(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  std::vector<std::string> bad;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) {
      bad.push_back(a + ": unexpected argument (settings are --section.key=value)");
      continue;
    }
    const auto eq = a.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(a.substr(2, eq - 2), a.substr(eq + 1));
    } else if (i + 1 < extras.size()) {
      out.emplace_back(a.substr(2), extras[++i]);
    } else {
      bad.push_back(a + ": missing value");
    }
  }
  if (!bad.empty()) throw ddrl::cli::ValidationError(bad);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace ddrl::cli;

  CLI::App app{"Data-regularized diffusion RL on synthetic tasks"};
  app.require_subcommand(1);
  std::string config_file;
  std::string suite;
  auto add = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", config_file, "JSON run configuration");
    return sub;
  };
  add("sft", "Pretrain by diffusion loss on task data");
  add("rl", "Reward fine-tuning (rl.algorithm selects the method)");
  add("eval", "Sample a checkpoint and compare it with the tilted target");
  CLI::App* verify = add("verify", "Run a property suite; exit 3 on failure");
  verify->add_option("suite", suite, "theorem1 | kl_equivalence | gradients | advantages")->required();
  add("serve", "Run the reward service until SIGINT/SIGTERM");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kValidation;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string cmd = sub->get_name();
  try {
    const RunConfig cfg = load_config(config_file, env_overrides(environ), dotted_flags(sub->remaining()));
    const Context ctx(cfg);
    if (cmd == "sft") {
      cmd_sft(ctx);
    } else if (cmd == "rl") {
      cmd_rl(ctx);
    } else if (cmd == "eval") {
      cmd_eval(ctx);
    } else if (cmd == "verify") {
      if (!cmd_verify(suite, ctx)) return kVerification;
    } else if (cmd == "serve") {
      cmd_serve(ctx);
    }
    return kOk;
  } catch (const ValidationError& e) {
    std::cerr << "ddrl " << cmd << ": " << e.what() << "\n";
    return kValidation;
  } catch (const ddrl::ConfigError& e) {
    std::cerr << "ddrl " << cmd << ": invalid configuration: " << e.what() << "\n";
    return kValidation;
  } catch (const ddrl::ArgumentError& e) {
    std::cerr << "ddrl " << cmd << ": " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "ddrl " << cmd << ": " << e.what() << "\n";
    return kRuntime;
  }
}
