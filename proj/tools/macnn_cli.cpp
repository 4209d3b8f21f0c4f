// macnn: command-line entry point for every pipeline stage.

#include <iostream>

#include "CLI11.hpp"
#include "macnn/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Microaneurysm detection with a two-stage CNN"};
  app.set_version_flag("--version", macnn::version_text());
  app.require_subcommand(1);

  struct Args {
    std::string config, data, out, prob_maps;
    std::optional<std::uint64_t> seed;
    std::size_t threads = 1;
    std::optional<std::size_t> fold;
    bool quiet = false;
  } args;

  const std::map<std::string, std::string> help = {
      {"gen-synthetic", "generate a synthetic annotated dataset into --out"},
      {"preprocess", "median background subtraction of --data images"},
      {"train-basic", "train the basic network"},
      {"infer-basic", "probability maps from the basic network"},
      {"train-final", "train the final network on stage-2 samples"},
      {"infer", "probability maps from the final network"},
      {"postprocess", "disk smoothing and candidate extraction"},
      {"evaluate", "match candidates and write the FROC curve"},
      {"froc-report", "operating points, CPM and published reference rows"},
      {"pipeline", "all stages with cross-validation"},
  };
  for (const auto& name : macnn::subcommands()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("--config", args.config, "configuration file (key = value)")->required();
    sub->add_option("--data", args.data, "dataset directory with images/ and annotations.csv");
    sub->add_option("--out", args.out, "run directory")->required();
    sub->add_option("--prob-maps", args.prob_maps, "probability map directory read by this stage");
    sub->add_option("--seed", args.seed, "override the configured seed");
    sub->add_option("--threads", args.threads, "worker threads; 1 is the reference mode")->check(CLI::PositiveNumber);
    sub->add_option("--fold", args.fold, "hold out this fold when training and inferring");
    sub->add_flag("--quiet", args.quiet, "no progress output");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return macnn::exit_code(macnn::ErrorKind::usage);
  }

  try {
    macnn::RunContext ctx;
    ctx.config_path = args.config;
    ctx.config = macnn::load_config(args.config);
    if (args.seed) ctx.config.seed = *args.seed;
    ctx.data = args.data;
    ctx.out = args.out;
    ctx.prob_maps = args.prob_maps;
    ctx.threads = args.threads;
    ctx.fold = args.fold;
    ctx.quiet = args.quiet;
    macnn::run_subcommand(app.get_subcommands().front()->get_name(), ctx);
  } catch (const macnn::Error& e) {
    std::cerr << "macnn: " << macnn::to_string(e.kind()) << " error: " << e.what() << '\n';
    return macnn::exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "macnn: unexpected error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
