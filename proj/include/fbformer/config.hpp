#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fbformer/tensor.hpp"

namespace fbf {

/// Four-stage MetaFormer encoder shape.
struct EncoderConfig {
  std::string variant = "S12";
  std::array<int, 4> dims{64, 128, 320, 512};
  std::array<int, 4> depths{2, 2, 6, 2};
  std::array<int, 4> heads{1, 2, 5, 8};
  double mlp_ratio = 4.0;

  /// S12, S24 or S36; anything else is a ConfigError naming the valid set.
  static EncoderConfig preset(const std::string& variant);
  void validate() const;
  int hidden_dim(int stage) const;
};

struct DecoderConfig {
  int channels = 128;
  bool topdown = true;
  /// Upper bound on group-norm groups; the effective count is gcd(channels, norm_groups).
  int norm_groups = 32;

  void validate() const;
  int groups_for(int ch) const;
};

enum class FeedbackMode : std::uint8_t { none, lite, attn_self, attn_st };

const char* to_string(FeedbackMode mode);
FeedbackMode parse_feedback_mode(const std::string& name);

struct FeedbackConfig {
  FeedbackMode mode = FeedbackMode::lite;
  double beta_init = 1.0;
  /// Average-pool factor applied before feedback attention (H/4 -> H/16 at 4).
  int attn_downsample = 4;
  /// Attention baselines: train on both rounds (true) or on round 2 only.
  bool train_both_rounds = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  FeedbackConfig feedback;
  int num_classes = 5;
  DType dtype = DType::f32;
  std::uint64_t init_seed = 0;

  void validate() const;
};

struct LossConfig {
  double lambda1 = 0.7;
  double lambda2 = 0.3;
  double lambda3 = 0.4;
  double alpha = 0.5;

  void validate() const;
};

struct TrainConfig {
  int epochs = 500;
  int batch_size = 4;
  double lr0 = 1e-3;
  std::uint64_t seed = 0;
  int eval_every = 5;
  bool augment = true;

  void validate() const;
};

struct DataConfig {
  std::string root;
  int tile = 256;
  std::string protocol = "drosophila-5fold";
  int fold = 0;
};

/// Everything a CLI run reads from its config file.
struct RunConfig {
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  DataConfig data;
};

/// Flat `key = value` text: one pair per line, `#` comments, values are
/// numbers, booleans, bare or quoted strings, or `[a, b, ...]` lists.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::int64_t get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

/// Builds a RunConfig from parsed keys. Unknown keys are rejected.
RunConfig run_config_from(const KeyValueConfig& kv);
RunConfig load_run_config(const std::string& path);

/// Canonical text form covering every field; parse(canonical(c)) == c.
std::string canonical_text(const RunConfig& cfg);
std::string canonical_text(const ModelConfig& cfg);
/// FNV-1a of canonical_text; changes iff some field changes.
std::uint64_t config_digest(const RunConfig& cfg);
std::string hex64(std::uint64_t value);

}  // namespace fbf
