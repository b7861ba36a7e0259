#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <iostream>

#include "cultura/error.hpp"
#include "cultura/pipeline.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("cultura"));
  spdlog::set_pattern("[%l] %v");

  CLI::App app{"Cultural expressiveness evaluation pipeline"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  Common common;
  std::string chosen;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"scrape", "Ingest forum posts and sample the question subset"},
      {"collect", "Collect responses from every configured backend"},
      {"aggregate", "Select two reference answers per question from user responses"},
      {"evaluate", "Compute metrics.csv and stats.json"},
      {"calibrate", "Fit CE weights to annotations and run the sensitivity analysis"},
      {"finetune", "Train a low-rank adapter and compare before/after"},
      {"report", "Write tables, figures and projections"},
      {"run-all", "Run every stage in order"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", common.config, "Pipeline config file")->required();
    sub->add_option("--seed", common.seed, "Override the config seed");
    sub->add_option("-o,--out", common.out, "Output root; the run directory is <out>/<run-id>");
    sub->callback([&chosen, n = name] { chosen = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  if (quiet) spdlog::set_level(spdlog::level::warn);

  try {
    cultura::pipeline::RunOptions opts;
    opts.config_path = common.config;
    opts.seed = common.seed;
    if (common.out) opts.out_root = *common.out;
    auto run = cultura::pipeline::Run::open(opts);
    run.run_stage(chosen);
    std::cout << run.dir().string() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "cultura: " << chosen << " failed: " << one_line(e.what()) << "\n";
    return 1;
  }
}
