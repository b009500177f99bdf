#pragma once
// Training runs: Adam/AdamW with role-based weight decay, EMA teacher,
// optional contrastive self-distillation, NaN watchdog, metrics streams and
// atomic, resumable checkpoints. Every step's randomness is a function of
// (seed, step), so a resumed run replays the uninterrupted one.

#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sdiff/config.hpp"
#include "sdiff/io/archive.hpp"

namespace sdiff {

/// Biases and positional embeddings are excluded; [CLS] and everything else decays.
bool weight_decay_applies(Role role, const std::string& name);

template <class T>
class Optimizer {
public:
    struct Slot {
        std::string key;
        Param<T>* param;
        bool decay;
        Tensor<T> m, v;
        std::int64_t count = 0;
    };

    Optimizer(OptimizerConfig cfg, std::vector<std::pair<std::string, Param<T>*>> params);

    /// Linear warmup to cfg.lr over warmup_steps, then constant. `step` is 1-based.
    double lr_at(std::int64_t step) const;
    /// Applies one update using current gradients. Parameters without a
    /// gradient are skipped (no moment decay). Non-negative parameters are
    /// projected back to >= 0.
    void step(std::int64_t step_index);
    void zero_grad();
    double grad_norm() const;

    void save(Archive& a) const;
    void load(const Archive& a);
    const std::vector<Slot>& slots() const { return slots_; }

private:
    OptimizerConfig cfg_;
    std::vector<Slot> slots_;
};

struct StepRecord {
    std::int64_t step = 0;
    double loss = 0, loss_diff = 0, loss_moco = 0;
    double lr = 0, grad_norm = 0;
    bool skipped = false;  // non-finite loss; no update applied
    double seconds = 0;    // wall time of the step (not part of the deterministic stream)
};

nlohmann::json to_json(const StepRecord& r, bool with_timing = false);

struct DataSplit {
    ImageDataset train, test;
};
/// The last eval.holdout samples form the test split.
DataSplit split_for_run(const RunConfig& cfg);

class Trainer {
public:
    using T = float;

    Trainer(RunConfig cfg, ImageDataset train);

    /// Runs step number step_count() + 1.
    StepRecord step();
    /// Runs until `total_steps()` (or `n` more steps if given).
    void run(std::optional<std::int64_t> n = std::nullopt, const std::function<void(const StepRecord&)>& cb = {});

    std::int64_t step_count() const { return step_; }
    std::int64_t total_steps() const;
    const std::vector<StepRecord>& records() const { return records_; }

    /// Metrics go to <dir>/metrics.jsonl and <dir>/timing.jsonl; checkpoints to <dir>/checkpoints.
    /// A fresh run truncates the streams; `resume` keeps records up to the current step.
    void set_output_dir(const std::string& dir, bool resume = false);
    const std::string& output_dir() const { return out_dir_; }

    Archive checkpoint() const;
    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<Trainer> resume(const std::string& path, std::optional<ImageDataset> train = std::nullopt);

    const RunConfig& config() const { return cfg_; }
    Backbone<T>& model() { return *model_; }
    Backbone<T>& ema_model() { return *ema_; }
    const Denoiser<T>& denoiser() const { return *den_; }
    const Denoiser<T>& ema_denoiser() const { return *ema_den_; }
    ContrastiveHeads<T>* heads() { return heads_.get(); }
    const ImageDataset& train_data() const { return data_; }
    Optimizer<T>& optimizer() { return *opt_; }

private:
    void load_state(const Archive& a);
    void write_record(const StepRecord& r);
    void maybe_checkpoint();

    RunConfig cfg_;
    ImageDataset data_;
    std::unique_ptr<Backbone<T>> model_, ema_;
    std::unique_ptr<Denoiser<T>> den_, ema_den_;
    std::unique_ptr<ContrastiveHeads<T>> heads_;
    std::unique_ptr<ParamStore<T>> uw_store_;
    std::unique_ptr<UncertaintyWeight<T>> uw_;
    std::unique_ptr<Optimizer<T>> opt_;
    std::int64_t step_ = 0;
    int nan_streak_ = 0;
    std::vector<StepRecord> records_;
    std::string out_dir_;
    std::ofstream metrics_, timing_;
};

/// Reads the student or EMA weights of a checkpoint into a freshly built model.
std::unique_ptr<Backbone<float>> load_model(const Archive& ckpt, bool ema);
RunConfig checkpoint_config(const Archive& ckpt);

}  // namespace sdiff
