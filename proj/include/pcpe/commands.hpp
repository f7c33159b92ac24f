#pragma once

// The train / eval / score / cache / synth commands behind the CLI.

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "pcpe/corpus.hpp"
#include "pcpe/metrics.hpp"
#include "pcpe/model.hpp"

namespace pcpe {

/// Every run setting. Keys in the config file and `set` match the field
/// names; `explicit_keys` records which ones were given.
struct RunConfig {
  std::string data;
  std::string valid;
  std::string schema = "text";
  // encoder
  std::size_t d = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t max_positions = 64;
  double dropout = 0.1;
  bool share_t2_t3 = true;
  bool share_all = false;
  std::size_t l_q = 32;
  std::size_t l_p = 16;
  std::size_t l_c = 16;
  // model
  std::size_t m = 0;
  std::string fusion = "s-attn";
  std::string baseline = "none";
  bool prefuse_personas = true;
  std::string ablation = "none";
  // training
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t eval_every_steps = 0;
  std::size_t patience = 0;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::size_t min_freq = 1;
  std::size_t threads = 0;
  // files
  std::string checkpoint;
  std::string cache;
  std::string log;
  bool strict = false;
  // synth
  std::string out_dir;
  std::size_t n_dialogues = 4000;
  std::size_t n_valid = 500;
  std::size_t n_attributes = 4;
  std::size_t n_values_per_attribute = 20;
  std::size_t vocab_size = 200;
  std::size_t n_candidates = 20;
  double signal_strength = 0.95;

  std::set<std::string> explicit_keys;

  /// Assigns one key from its text form. Unknown keys and malformed values
  /// are ConfigErrors.
  void set(const std::string& key, const std::string& value);
  bool is_set(const std::string& key) const { return explicit_keys.count(key) > 0; }
  /// Flat `key = value` lines; '#' starts a comment.
  void load_file(const std::filesystem::path& path);

  ModelConfig model_config() const;
  SynthSpec synth_spec() const;
  /// Fully resolved settings, defaults included.
  std::string to_json() const;
};

/// Vocabulary files stored next to a checkpoint.
std::filesystem::path vocab_path(const std::filesystem::path& checkpoint);
std::filesystem::path attributes_path(const std::filesystem::path& checkpoint);
void save_vocabularies(const std::filesystem::path& checkpoint, const Vocabularies& v);
Vocabularies load_vocabularies(const std::filesystem::path& checkpoint, PersonaSchema schema);

/// Loads the checkpoint, applying any model keys set in `cfg` on top of the
/// stored config. Mismatched parameters are ConfigErrors.
Model load_model(const RunConfig& cfg);

/// Each command writes machine-readable output to `out` and diagnostics to
/// `err`, and returns the process exit code for success.
int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_score(const RunConfig& cfg, std::istream& in, std::ostream& out, std::ostream& err);
int cmd_cache(const RunConfig& cfg, std::ostream& out, std::ostream& err);
int cmd_synth(const RunConfig& cfg, std::ostream& out, std::ostream& err);

/// Exit code for an exception escaping a command.
int exit_code_for(const std::exception& e);

}  // namespace pcpe
