#pragma once
// Run configuration: one JSON document with nested sections, dotted-key
// overrides from the command line, and a stable content hash for provenance.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdiff/augment.hpp"
#include "sdiff/distill.hpp"
#include "sdiff/formulations.hpp"

namespace sdiff {

struct OptimizerConfig {
    std::string name = "adamw";  // adam | adamw
    double lr = 4e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 0;  // linear warmup from 0
    void validate() const;
};

struct TrainConfig {
    int batch_size = 64;
    int steps = 5000;  // total optimizer steps (epochs > 0 overrides)
    int epochs = 0;
    int log_every = 10;
    int checkpoint_every = 0;  // 0 = only the final checkpoint
    int nan_patience = 50;
    std::string dataset = "synthetic:shapes:2048";
    void validate() const;
};

struct EvalConfig {
    double probe_time = -1;  // < 0 = the formulation's probing default
    int probe_epochs = 15;
    double probe_lr = 4e-3;
    int probe_batch = 256;
    double probe_weight_decay = 0.0;
    std::uint64_t noise_seed = 1234;
    int holdout = 512;  // test split size of the dataset
    bool use_ema = false;
    void validate() const;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Formulation formulation;
    BackboneSpec backbone;
    SelfCondConfig selfcond;
    AugConfig augment = AugConfig::none();
    bool contrastive_enabled = false;
    ContrastiveConfig contrastive;
    OptimizerConfig optimizer;
    TrainConfig train;
    SamplerConfig sampler;
    EvalConfig eval;

    void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Missing keys keep defaults; unknown keys raise ConfigError naming the key.
RunConfig run_config_from_json(const nlohmann::json& j);

/// "a.b.c=value": value parsed as JSON when possible, otherwise taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Reads a config file (or the defaults when path is empty) and applies overrides.
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// 16 hex digits of FNV-1a over the canonical JSON form.
std::string config_hash(const RunConfig& c);
std::string hash_hex(const std::string& bytes);

}  // namespace sdiff
