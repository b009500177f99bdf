#pragma once
// Tap-layer selection by short training runs: every candidate layer is trained
// with the same init, data order and noise draws, and candidates are ranked by
// the mean training loss over the final epoch.

#include <cstdint>
#include <string>
#include <vector>

#include "sdiff/trainloop.hpp"

namespace sdiff {

struct CandidateResult {
    int layer = 0;
    std::vector<double> seed_losses;  // final-epoch mean per seed
    double mean_loss = 0;
    bool failed = false;
    std::string note;
};

struct ProfileReport {
    std::vector<CandidateResult> ranking;  // ascending mean loss, ties -> lower layer
    std::vector<CandidateResult> failed;
    std::vector<std::uint64_t> seeds;
    int short_epochs = 0;
    std::int64_t steps_per_run = 0;
    std::string config_hash;

    int selected() const;
    nlohmann::json to_json() const;
    std::string to_text() const;
};

/// Pure reduction: drops failed or non-finite candidates into `failed`,
/// sorts the rest. Result does not depend on input order.
ProfileReport rank_candidates(std::vector<CandidateResult> results);

struct ProfileOptions {
    std::vector<int> candidates;
    int short_epochs = 20;
    std::vector<std::uint64_t> seeds{0};
    int workers = 1;  // concurrent candidate runs
};

/// `base` supplies everything except selfcond.tap_layer (and the seed, taken
/// from options.seeds). A run whose loss goes non-finite is marked failed.
ProfileReport profile_layers(const RunConfig& base, const ImageDataset& train, const ProfileOptions& opt);

/// Mean loss over the last `window` non-skipped records; NaN if none.
double final_window_loss(const std::vector<StepRecord>& records, std::int64_t window);

}  // namespace sdiff
