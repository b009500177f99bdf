#pragma once
// Command surface. Each verb is a function of (config, seed, dataset) to files
// under <out>/<run-id>/ and prints one summary line.

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdiff/config.hpp"

namespace sdiff::cli {

/// Exit statuses.
constexpr int kOk = 0, kFailure = 1, kUsage = 2, kMissing = 3, kNumeric = 4;

/// Runs one verb; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// $SDIFF_OUT if set, otherwise "runs".
std::string default_out_root();
/// config hash + "-s" + seed
std::string run_id(const RunConfig& c);

/// {verb, config_hash, code_version, seed, inputs}
nlohmann::json provenance(const std::string& verb, const std::string& config_hash, std::uint64_t seed,
                          const std::vector<std::string>& inputs);
/// Provenance recorded in an artifact (JSON report, SVG metadata, metrics
/// stream via its run directory, checkpoint or sample archive); null if none.
nlohmann::json read_provenance(const std::string& path);
/// Tree of provenance records obtained by following `inputs` from `path`.
nlohmann::json provenance_chain(const std::string& path);

/// kind: loss_curves | layer_bars | cka_heatmap | metric_evolution. `key`
/// selects the plotted field (empty: loss_diff for curves, val for evolution).
/// Writes svg_path and its CSV sidecar. ConfigError("inputs") on an empty set.
void emit_plot(const std::string& kind, const std::vector<std::string>& inputs, const std::string& svg_path,
               const std::string& key = "");

}  // namespace sdiff::cli
