// pcpe: train, evaluate and serve the persona-coded poly-encoder scorer.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcpe/commands.hpp"
#include "pcpe/errors.hpp"

namespace {

struct Flag {
  const char* name;
  const char* key;
  const char* help;
};

// Value flags shared by every subcommand; each maps onto a RunConfig key.
const std::vector<Flag> kValueFlags = {
    {"--data", "data", "dialogue file (JSON lines)"},
    {"--valid", "valid", "validation dialogue file"},
    {"--schema", "schema", "persona schema: text or kv"},
    {"--m", "m", "number of poly codes"},
    {"--fusion", "fusion", "s-attn, m-attn or col-fuse"},
    {"--baseline", "baseline", "none, poly or pcpe-text"},
    {"--ablation", "ablation", "none, mean, sum, concat or margin"},
    {"--batch-size", "batch_size", "training batch size"},
    {"--epochs", "epochs", "training epochs"},
    {"--eval-every-steps", "eval_every_steps", "validation cadence in steps (0: per epoch)"},
    {"--patience", "patience", "stop after this many evaluations without improvement"},
    {"--seed", "seed", "random seed"},
    {"--threads", "threads", "evaluation threads (0: all cores)"},
    {"--checkpoint", "checkpoint", "checkpoint path"},
    {"--cache", "cache", "embedding cache path"},
    {"--log", "log", "JSONL training log (default: stdout)"},
};

const std::vector<Flag> kSynthFlags = {
    {"--out", "out_dir", "output directory for train.jsonl and valid.jsonl"},
    {"--n-dialogues", "n_dialogues", "training dialogues"},
    {"--n-valid", "n_valid", "validation dialogues"},
    {"--n-attributes", "n_attributes", "attributes per speaker"},
    {"--n-values", "n_values_per_attribute", "values per attribute"},
    {"--vocab-size", "vocab_size", "filler vocabulary size"},
    {"--n-candidates", "n_candidates", "candidates per validation dialogue"},
    {"--signal-strength", "signal_strength", "probability the response carries the persona value"},
};

struct Parsed {
  std::string config_path;
  std::vector<std::pair<const char*, std::optional<std::string>>> values;
  bool strict = false;
};

void add_flags(CLI::App* sub, Parsed& p, const std::vector<Flag>& flags) {
  for (const auto& f : flags) {
    p.values.emplace_back(f.key, std::nullopt);
    auto& slot = p.values.back().second;
    sub->add_option_function<std::string>(f.name, [&slot](const std::string& v) { slot = v; }, f.help);
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persona-coded poly-encoder response scorer"};
  app.require_subcommand(1);

  Parsed parsed;
  // Option callbacks hold references into `values`; it must not reallocate.
  parsed.values.reserve(5 * kValueFlags.size() + kSynthFlags.size());
  std::vector<CLI::App*> subs;
  for (const char* name : {"train", "eval", "score", "cache", "synth"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", parsed.config_path, "key = value configuration file");
    sub->add_flag("--strict", parsed.strict, "strict candidate-count and cache checks");
    subs.push_back(sub);
  }
  subs[0]->description("train a model and keep the best checkpoint");
  subs[1]->description("evaluate a checkpoint on a validation file");
  subs[2]->description("rank the candidates of one dialogue read from stdin");
  subs[3]->description("precompute candidate and persona embeddings");
  subs[4]->description("write a synthetic persona-determined corpus");
  for (CLI::App* sub : subs) {
    add_flags(sub, parsed, kValueFlags);
    if (sub == subs[4]) add_flags(sub, parsed, kSynthFlags);
  }

  CLI11_PARSE(app, argc, argv);

  try {
    pcpe::RunConfig cfg;
    if (!parsed.config_path.empty()) cfg.load_file(parsed.config_path);
    for (const auto& [key, value] : parsed.values) {
      if (value) cfg.set(key, *value);
    }
    if (parsed.strict) cfg.set("strict", "true");

    const std::string cmd = app.get_subcommands().front()->get_name();
    if (cmd == "train") return pcpe::cmd_train(cfg, std::cout, std::cerr);
    if (cmd == "eval") return pcpe::cmd_eval(cfg, std::cout, std::cerr);
    if (cmd == "score") return pcpe::cmd_score(cfg, std::cin, std::cout, std::cerr);
    if (cmd == "cache") return pcpe::cmd_cache(cfg, std::cout, std::cerr);
    return pcpe::cmd_synth(cfg, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return pcpe::exit_code_for(e);
  }
}
