#include "sdiff/trainloop.hpp"
#include "sdiff/version.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

namespace sdiff {

bool weight_decay_applies(Role role, const std::string& name) {
    switch (role) {
        case Role::untagged: throw ConfigError("parameter has no role tag", name);
        case Role::bias:
        case Role::pos_embed: return false;
        default: return true;
    }
}

template <class T>
Optimizer<T>::Optimizer(OptimizerConfig cfg, std::vector<std::pair<std::string, Param<T>*>> params)
    : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (auto& [key, p] : params) {
        if (!p->var.defined()) throw StructureError("optimizer given an unallocated parameter: " + key);
        slots_.push_back({key, p, weight_decay_applies(p->role, key), Tensor<T>(p->shape), Tensor<T>(p->shape), 0});
    }
}

template <class T>
double Optimizer<T>::lr_at(std::int64_t step) const {
    if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
        return cfg_.lr * static_cast<double>(step) / static_cast<double>(cfg_.warmup_steps);
    return cfg_.lr;
}

template <class T>
void Optimizer<T>::step(std::int64_t step_index) {
    const double lr = lr_at(step_index);
    const double b1 = cfg_.beta1, b2 = cfg_.beta2, wd = cfg_.weight_decay;
    const bool decoupled = cfg_.name == "adamw";
    for (Slot& s : slots_) {
        Var<T>& var = s.param->var;
        if (!var.has_grad()) continue;
        ++s.count;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.count));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.count));
        Tensor<T>& w = var.mutable_value();
        const Tensor<T>& g = var.grad();
        const bool dec = s.decay && wd > 0;
        for (std::int64_t i = 0; i < w.numel(); ++i) {
            double gi = g[i];
            if (dec && !decoupled) gi += wd * w[i];
            const double m = b1 * s.m[i] + (1 - b1) * gi;
            const double v = b2 * s.v[i] + (1 - b2) * gi * gi;
            s.m[i] = static_cast<T>(m);
            s.v[i] = static_cast<T>(v);
            double wi = w[i];
            if (dec && decoupled) wi -= lr * wd * wi;
            wi -= lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
            if (s.param->nonneg && wi < 0) wi = 0;
            w[i] = static_cast<T>(wi);
        }
    }
}

template <class T>
void Optimizer<T>::zero_grad() {
    for (Slot& s : slots_) s.param->var.zero_grad();
}

template <class T>
double Optimizer<T>::grad_norm() const {
    double n = 0;
    for (const Slot& s : slots_)
        if (s.param->var.has_grad())
            for (T g : s.param->var.grad().storage()) n += static_cast<double>(g) * g;
    return std::sqrt(n);
}

template <class T>
void Optimizer<T>::save(Archive& a) const {
    nlohmann::json counts = nlohmann::json::object();
    for (const Slot& s : slots_) {
        a.put("opt.m/" + s.key, s.m);
        a.put("opt.v/" + s.key, s.v);
        counts[s.key] = s.count;
    }
    a.meta["optimizer_counts"] = counts;
}

template <class T>
void Optimizer<T>::load(const Archive& a) {
    const auto& counts = a.meta.at("optimizer_counts");
    for (Slot& s : slots_) {
        s.m = a.get<T>("opt.m/" + s.key);
        s.v = a.get<T>("opt.v/" + s.key);
        if (s.m.shape() != s.param->shape || s.v.shape() != s.param->shape)
            throw StructureError("optimizer state shape mismatch for " + s.key);
        s.count = counts.at(s.key).template get<std::int64_t>();
    }
}

template class Optimizer<float>;
template class Optimizer<double>;

nlohmann::json to_json(const StepRecord& r, bool with_timing) {
    nlohmann::json j = {{"step", r.step},           {"loss", r.loss}, {"loss_diff", r.loss_diff},
                        {"loss_moco", r.loss_moco}, {"lr", r.lr},     {"grad_norm", r.grad_norm},
                        {"skipped", r.skipped}};
    if (with_timing) j["seconds"] = r.seconds;
    return j;
}

DataSplit split_for_run(const RunConfig& cfg) {
    ImageDataset all = load_dataset(cfg.train.dataset, Rng::derive(cfg.seed, "dataset"));
    if (all.size() <= cfg.eval.holdout) throw ConfigError("dataset smaller than the holdout split", "eval.holdout");
    auto [train, test] = all.split(all.size() - cfg.eval.holdout);
    return {std::move(train), std::move(test)};
}

namespace {

template <class T>
void put_params(Archive& a, const std::string& prefix, const ParamStore<T>& s) {
    for (const auto& p : s.list()) a.put(prefix + p.name, p.var.value());
}

template <class T>
void get_params(const Archive& a, const std::string& prefix, ParamStore<T>& s) {
    for (auto& p : s.list()) {
        Tensor<T> v = a.get<T>(prefix + p.name);
        if (v.shape() != p.shape) throw StructureError("checkpoint shape mismatch for " + prefix + p.name);
        p.var.mutable_value() = std::move(v);
    }
}

}  // namespace

Trainer::Trainer(RunConfig cfg, ImageDataset train) : cfg_(std::move(cfg)), data_(std::move(train)) {
    cfg_.validate();
    const auto& b = cfg_.backbone;
    if (data_.image_size() != b.image_size || data_.channels() != b.in_channels)
        throw ConfigError("dataset images are " + std::to_string(data_.channels()) + "x" + std::to_string(data_.image_size()) +
                              " but the backbone expects " + std::to_string(b.in_channels) + "x" + std::to_string(b.image_size),
                          "backbone.image_size");
    if (b.num_classes > 0 && b.num_classes < data_.num_classes())
        throw ConfigError("fewer classes than the dataset", "backbone.num_classes");
    if (data_.size() / cfg_.train.batch_size < 1) throw ConfigError("batch larger than the dataset", "train.batch_size");

    const std::uint64_t mseed = Rng::derive(cfg_.seed, "model");
    model_ = make_backbone<T>(b, cfg_.selfcond, mseed);
    ema_ = make_backbone<T>(b, cfg_.selfcond, mseed);
    copy_params(model_->params(), ema_->params());
    den_ = std::make_unique<Denoiser<T>>(*model_, cfg_.formulation);
    ema_den_ = std::make_unique<Denoiser<T>>(*ema_, cfg_.formulation);

    std::vector<std::pair<std::string, Param<T>*>> params;
    for (auto& p : model_->params().list()) params.emplace_back("model/" + p.name, &p);
    if (cfg_.contrastive_enabled) {
        heads_ = std::make_unique<ContrastiveHeads<T>>(distill_feature_width(*model_, cfg_.contrastive.target_source),
                                                       cfg_.contrastive, Rng::derive(cfg_.seed, "heads"));
        for (auto& p : heads_->proj->params().list()) params.emplace_back("head.proj/" + p.name, &p);
        for (auto& p : heads_->pred->params().list()) params.emplace_back("head.pred/" + p.name, &p);
    }
    if (cfg_.formulation.weighting == LossWeighting::uncertainty) {
        uw_store_ = std::make_unique<ParamStore<T>>(Rng::derive(cfg_.seed, "uncertainty"));
        uw_ = std::make_unique<UncertaintyWeight<T>>(Scope<T>(uw_store_.get(), "u"));
        for (auto& p : uw_store_->list()) params.emplace_back("uw/" + p.name, &p);
    }
    opt_ = std::make_unique<Optimizer<T>>(cfg_.optimizer, std::move(params));
}

std::int64_t Trainer::total_steps() const {
    if (cfg_.train.epochs > 0) return static_cast<std::int64_t>(cfg_.train.epochs) * (data_.size() / cfg_.train.batch_size);
    return cfg_.train.steps;
}

StepRecord Trainer::step() {
    const auto t0 = std::chrono::steady_clock::now();
    const std::int64_t s = step_ + 1;
    const std::int64_t B = cfg_.train.batch_size, per_epoch = data_.size() / B;
    const std::int64_t epoch = (s - 1) / per_epoch, pos = (s - 1) % per_epoch;
    const auto order = epoch_order(data_.size(), Rng::derive(cfg_.seed, "data_order"), epoch);
    const std::vector<std::int64_t> idx(order.begin() + pos * B, order.begin() + (pos + 1) * B);
    const Batch batch = data_.gather(idx);
    const std::uint64_t step_seed = Rng::derive(cfg_.seed, "step", static_cast<std::uint64_t>(s));

    StepRecord r;
    r.step = s;
    r.lr = opt_->lr_at(s);
    Var<T> total;
    if (heads_) {
        auto terms = contrastive_step(*den_, *ema_den_, *heads_, batch, cfg_.contrastive, cfg_.augment, step_seed, uw_.get());
        total = terms.total;
        r.loss_diff = terms.diff.value().item();
        r.loss_moco = terms.moco.value().item();
    } else {
        auto terms = diffusion_step(*den_, batch, cfg_.augment, step_seed, {}, uw_.get());
        total = terms.loss;
        r.loss_diff = total.value().item();
    }
    r.loss = total.value().item();
    opt_->zero_grad();
    backward(total);
    r.grad_norm = opt_->grad_norm();
    if (!std::isfinite(r.loss) || !std::isfinite(r.grad_norm)) {
        r.skipped = true;
        opt_->zero_grad();
        if (++nan_streak_ >= cfg_.train.nan_patience) {
            std::ostringstream os;
            os << "non-finite loss for " << nan_streak_ << " consecutive steps (last at step " << s << ", lr " << r.lr
               << ", loss " << r.loss << ", grad norm " << r.grad_norm << "); aborting";
            throw NumericError(os.str());
        }
    } else {
        nan_streak_ = 0;
        opt_->step(s);
        opt_->zero_grad();
        ema_update(ema_->params(), model_->params(), cfg_.contrastive.ema_decay);
        if (heads_) heads_->ema_step(cfg_.contrastive.ema_decay);
    }
    step_ = s;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    records_.push_back(r);
    write_record(r);
    maybe_checkpoint();
    return r;
}

void Trainer::run(std::optional<std::int64_t> n, const std::function<void(const StepRecord&)>& cb) {
    const std::int64_t end = n ? step_ + *n : total_steps();
    while (step_ < end) {
        const StepRecord r = step();
        if (cb) cb(r);
    }
    if (!out_dir_.empty()) save_checkpoint(out_dir_ + "/checkpoints/final.sdar");
}

namespace {

// Keeps the records of steps <= last; used when a resumed run reopens its streams.
void truncate_stream(const std::string& path, std::int64_t last) {
    std::ifstream in(path);
    if (!in) return;
    std::string kept, line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("step") || j["step"].get<std::int64_t>() > last) break;
        kept += line + "\n";
    }
    in.close();
    write_atomic(path, kept);
}

}  // namespace

void Trainer::set_output_dir(const std::string& dir, bool resume) {
    out_dir_ = dir;
    std::filesystem::create_directories(dir + "/checkpoints");
    const std::string m = dir + "/metrics.jsonl", t = dir + "/timing.jsonl";
    if (resume) {
        truncate_stream(m, step_);
        truncate_stream(t, step_);
    }
    const auto mode = resume ? std::ios::app : std::ios::trunc;
    metrics_.open(m, std::ios::out | mode);
    timing_.open(t, std::ios::out | mode);
    if (!metrics_ || !timing_) throw IoError("cannot open metrics streams in " + dir);
}

void Trainer::write_record(const StepRecord& r) {
    if (!metrics_.is_open()) return;
    if (r.step % cfg_.train.log_every != 0 && r.step != total_steps() && !r.skipped) return;
    metrics_ << to_json(r).dump() << '\n';
    metrics_.flush();
    timing_ << nlohmann::json{{"step", r.step}, {"seconds", r.seconds}}.dump() << '\n';
    timing_.flush();
}

void Trainer::maybe_checkpoint() {
    if (out_dir_.empty() || cfg_.train.checkpoint_every <= 0 || step_ % cfg_.train.checkpoint_every != 0) return;
    save_checkpoint(out_dir_ + "/checkpoints/step_" + std::to_string(step_) + ".sdar");
}

Archive Trainer::checkpoint() const {
    Archive a;
    a.meta["format"] = "sdiff-checkpoint";
    a.meta["format_version"] = kArchiveVersion;
    a.meta["step"] = step_;
    a.meta["nan_streak"] = nan_streak_;
    a.meta["config"] = to_json(cfg_);
    a.meta["config_hash"] = config_hash(cfg_);
    a.meta["code_version"] = code_version();
    put_params(a, "student/", model_->params());
    put_params(a, "ema/", ema_->params());
    if (heads_) {
        put_params(a, "head.proj/", heads_->proj->params());
        put_params(a, "head.pred/", heads_->pred->params());
        put_params(a, "head.ema_proj/", heads_->ema_proj->params());
    }
    if (uw_store_) put_params(a, "uw/", *uw_store_);
    opt_->save(a);
    return a;
}

void Trainer::save_checkpoint(const std::string& path) const { checkpoint().save(path); }

void Trainer::load_state(const Archive& a) {
    get_params(a, "student/", model_->params());
    get_params(a, "ema/", ema_->params());
    if (heads_) {
        get_params(a, "head.proj/", heads_->proj->params());
        get_params(a, "head.pred/", heads_->pred->params());
        get_params(a, "head.ema_proj/", heads_->ema_proj->params());
    }
    if (uw_store_) get_params(a, "uw/", *uw_store_);
    opt_->load(a);
    step_ = a.meta.at("step").get<std::int64_t>();
    nan_streak_ = a.meta.value("nan_streak", 0);
}

RunConfig checkpoint_config(const Archive& a) {
    if (a.meta.value("format", std::string()) != "sdiff-checkpoint") throw IoError("archive is not a checkpoint");
    return run_config_from_json(a.meta.at("config"));
}

std::unique_ptr<Trainer> Trainer::resume(const std::string& path, std::optional<ImageDataset> train) {
    const Archive a = Archive::load(path);
    RunConfig cfg = checkpoint_config(a);
    auto t = std::make_unique<Trainer>(cfg, train ? std::move(*train) : split_for_run(cfg).train);
    t->load_state(a);
    return t;
}

std::unique_ptr<Backbone<float>> load_model(const Archive& ckpt, bool ema) {
    const RunConfig cfg = checkpoint_config(ckpt);
    auto m = make_backbone<float>(cfg.backbone, cfg.selfcond, Rng::derive(cfg.seed, "model"));
    get_params(ckpt, ema ? "ema/" : "student/", m->params());
    return m;
}

}  // namespace sdiff
