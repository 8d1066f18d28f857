#include <iostream>

#include "CLI11.hpp"
#include "demist/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Joint adherent mist and raindrop removal: synthesis, training, restoration, evaluation"};
  app.require_subcommand(1);

  demist::CommandOptions options;
  std::string config_path;
  std::uint64_t seed = 0;
  std::string variant;
  std::string out;

  for (const auto& name : demist::command_names()) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "key = value config file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--variant", variant, "full, non_cam, non_ca, non_sa or non_sd");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--set", options.overrides, "extra key=value setting (repeatable)");
  }

  CLI11_PARSE(app, argc, argv);

  try {
    auto* sub = app.get_subcommands().front();
    if (sub->count("--config")) options.config = config_path;
    if (sub->count("--seed")) options.seed = seed;
    if (sub->count("--variant")) options.variant = variant;
    if (sub->count("--out")) options.out = out;
    demist::run_command(sub->get_name(), demist::resolve_config(options), std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
