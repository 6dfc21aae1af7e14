#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "dycaf/harness.hpp"

namespace {

struct Args {
  std::string config;
  std::string out;
  unsigned long long seed = 0;
  bool has_seed = false;
};

int dispatch(const std::string& command, const Args& args) {
  dycaf::RunConfig cfg = dycaf::RunConfig::from_file(args.config);
  if (args.has_seed) cfg.seed = static_cast<dycaf::u64>(args.seed);

  dycaf::RunReport report;
  if (command == "gradcheck") {
    report = dycaf::cmd_gradcheck(cfg);
  } else if (command == "solve") {
    report = dycaf::cmd_solve(cfg);
  } else if (command == "ablate") {
    report = dycaf::cmd_ablate(cfg);
  } else {
    report = dycaf::cmd_bench(cfg);
  }

  std::cout << report.json_text << "\n";
  if (!args.out.empty()) {
    std::ofstream out(args.out, std::ios::binary);
    if (!out) {
      std::cerr << "error: cannot write report to " << args.out << "\n";
      return 2;
    }
    out << report.json_text << "\n";
  }
  return report.exit_code();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"numerical checks for the fusion/attention feature neck"};
  app.require_subcommand(1);

  Args args;
  const std::pair<const char*, const char*> kCommands[] = {
      {"gradcheck", "compare analytic gradients against finite differences"},
      {"solve", "run the equilibrium solver and the brute-force iteration oracle"},
      {"ablate", "run all mechanism on/off combinations and compare"},
      {"bench", "time repeated forward passes, single- and multi-threaded"},
  };
  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts;
  for (const auto& [name, desc] : kCommands) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", args.config, "path to a key=value config file")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", args.out, "also write the JSON report to this file");
    seed_opts.push_back(sub->add_option("--seed", args.seed, "override the config seed"));
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  std::string command;
  for (size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) {
      command = kCommands[i].first;
      args.has_seed = seed_opts[i]->count() > 0;
    }
  }

  try {
    return dispatch(command, args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
