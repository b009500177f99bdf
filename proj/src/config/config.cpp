#include "sdiff/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>

namespace sdiff {

using nlohmann::json;

namespace {

// Reads keys of one section, remembering which were consumed so leftovers
// can be reported as unknown.
class Section {
public:
    Section(const json& j, std::string name) : name_(std::move(name)) {
        if (j.is_null()) return;
        if (!j.is_object()) throw ConfigError("must be an object", name_);
        j_ = &j;
    }
    template <class V>
    void get(const char* key, V& out) {
        if (!j_ || !j_->contains(key)) return;
        seen_.insert(key);
        try {
            out = j_->at(key).get<V>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("bad value: ") + e.what(), field(key));
        }
    }
    template <class E, class P>
    void get_enum(const char* key, E& out, P parse) {
        std::string s;
        if (!j_ || !j_->contains(key)) return;
        get(key, s);
        try {
            out = parse(s);
        } catch (const ConfigError& e) {
            throw ConfigError(e.what(), field(key));
        }
    }
    const json& sub(const char* key) {
        static const json null;
        if (!j_ || !j_->contains(key)) return null;
        seen_.insert(key);
        return j_->at(key);
    }
    bool has(const char* key) const { return j_ && j_->contains(key); }
    void finish() const {
        if (!j_) return;
        for (auto it = j_->begin(); it != j_->end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError("unknown key", field(it.key()));
    }
    std::string field(const std::string& key) const { return name_.empty() ? key : name_ + "." + key; }

private:
    const json* j_ = nullptr;
    std::string name_;
    std::set<std::string> seen_;
};

json formulation_json(const Formulation& f) {
    return {{"kind", to_string(f.kind)},
            {"T", f.T},
            {"beta_min", f.beta_min},
            {"beta_max", f.beta_max},
            {"sigma_min", f.sigma_min},
            {"sigma_max", f.sigma_max},
            {"sigma_data", f.sigma_data},
            {"p_mean", f.p_mean},
            {"p_std", f.p_std},
            {"t_sampler", to_string(f.t_sampler)},
            {"prediction", to_string(f.prediction)},
            {"weighting", to_string(f.weighting)}};
}

Formulation formulation_from(const json& j) {
    Section s(j, "formulation");
    FormKind kind = FormKind::rf;
    s.get_enum("kind", kind, parse_form_kind);
    Formulation f = kind == FormKind::ddpm ? Formulation::ddpm() : kind == FormKind::edm ? Formulation::edm() : Formulation::rf();
    s.get("T", f.T);
    s.get("beta_min", f.beta_min);
    s.get("beta_max", f.beta_max);
    s.get("sigma_min", f.sigma_min);
    s.get("sigma_max", f.sigma_max);
    s.get("sigma_data", f.sigma_data);
    s.get("p_mean", f.p_mean);
    s.get("p_std", f.p_std);
    s.get_enum("t_sampler", f.t_sampler, parse_time_sampler);
    s.get_enum("prediction", f.prediction, parse_pred_kind);
    s.get_enum("weighting", f.weighting, parse_loss_weighting);
    s.finish();
    return f;
}

json backbone_json(const BackboneSpec& b) {
    return {{"family", to_string(b.family)},
            {"image_size", b.image_size},
            {"in_channels", b.in_channels},
            {"hidden", b.hidden},
            {"depth", b.depth},
            {"channel_mult", b.channel_mult},
            {"blocks_per_res", b.blocks_per_res},
            {"attn_resolutions", b.attn_resolutions},
            {"heads", b.heads},
            {"patch", b.patch},
            {"mlp_ratio", b.mlp_ratio},
            {"dropout", b.dropout},
            {"num_classes", b.num_classes},
            {"aug_cond", b.aug_cond},
            {"freq_dim", b.freq_dim},
            {"norm_groups", b.norm_groups},
            {"ada_gn", b.ada_gn},
            {"planted_layer", b.planted_layer},
            {"planted_strength", b.planted_strength},
            {"planted_classes", b.planted_classes}};
}

BackboneSpec backbone_from(const json& j) {
    Section s(j, "backbone");
    BackboneSpec b;
    std::string preset;
    s.get("preset", preset);
    if (!preset.empty()) {
        try {
            b = paper_spec(preset);
        } catch (const ConfigError& e) {
            throw ConfigError(e.what(), "backbone.preset");
        }
    }
    s.get_enum("family", b.family, parse_family);
    s.get("image_size", b.image_size);
    s.get("in_channels", b.in_channels);
    s.get("hidden", b.hidden);
    s.get("depth", b.depth);
    s.get("channel_mult", b.channel_mult);
    s.get("blocks_per_res", b.blocks_per_res);
    s.get("attn_resolutions", b.attn_resolutions);
    s.get("heads", b.heads);
    s.get("patch", b.patch);
    s.get("mlp_ratio", b.mlp_ratio);
    s.get("dropout", b.dropout);
    s.get("num_classes", b.num_classes);
    s.get("aug_cond", b.aug_cond);
    s.get("freq_dim", b.freq_dim);
    s.get("norm_groups", b.norm_groups);
    s.get("ada_gn", b.ada_gn);
    s.get("planted_layer", b.planted_layer);
    s.get("planted_strength", b.planted_strength);
    s.get("planted_classes", b.planted_classes);
    s.finish();
    return b;
}

json augment_json(const AugConfig& a) {
    return {{"p", a.p},
            {"p_flip", a.p_flip},
            {"p_rot90", a.p_rot90},
            {"p_translate", a.p_translate},
            {"p_scale", a.p_scale},
            {"p_rotate", a.p_rotate},
            {"p_aniso", a.p_aniso},
            {"translate_max", a.translate_max},
            {"integer_translate", a.integer_translate},
            {"scale_std", a.scale_std},
            {"rotate_max", a.rotate_max},
            {"aniso_std", a.aniso_std}};
}

AugConfig augment_from(const json& j) {
    Section s(j, "augment");
    AugConfig a = AugConfig::none();
    s.get("p", a.p);
    s.get("p_flip", a.p_flip);
    s.get("p_rot90", a.p_rot90);
    s.get("p_translate", a.p_translate);
    s.get("p_scale", a.p_scale);
    s.get("p_rotate", a.p_rotate);
    s.get("p_aniso", a.p_aniso);
    s.get("translate_max", a.translate_max);
    s.get("integer_translate", a.integer_translate);
    s.get("scale_std", a.scale_std);
    s.get("rotate_max", a.rotate_max);
    s.get("aniso_std", a.aniso_std);
    s.finish();
    return a;
}

}  // namespace

void OptimizerConfig::validate() const {
    if (name != "adam" && name != "adamw") throw ConfigError("must be adam or adamw", "optimizer.name");
    if (!(lr > 0)) throw ConfigError("must be > 0", "optimizer.lr");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("must be in [0, 1)", "optimizer.beta1");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("must be in [0, 1)", "optimizer.beta2");
    if (!(eps > 0)) throw ConfigError("must be > 0", "optimizer.eps");
    if (!(weight_decay >= 0)) throw ConfigError("must be >= 0", "optimizer.weight_decay");
    if (warmup_steps < 0) throw ConfigError("must be >= 0", "optimizer.warmup_steps");
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("must be >= 1", "train.batch_size");
    if (steps < 0 || epochs < 0) throw ConfigError("must be >= 0", "train.steps");
    if (log_every < 1) throw ConfigError("must be >= 1", "train.log_every");
    if (checkpoint_every < 0) throw ConfigError("must be >= 0", "train.checkpoint_every");
    if (nan_patience < 1) throw ConfigError("must be >= 1", "train.nan_patience");
    if (dataset.empty()) throw ConfigError("must name a dataset", "train.dataset");
}

void EvalConfig::validate() const {
    if (probe_epochs < 1) throw ConfigError("must be >= 1", "eval.probe_epochs");
    if (!(probe_lr > 0)) throw ConfigError("must be > 0", "eval.probe_lr");
    if (probe_batch < 1) throw ConfigError("must be >= 1", "eval.probe_batch");
    if (holdout < 1) throw ConfigError("must be >= 1", "eval.holdout");
}

void RunConfig::validate() const {
    formulation.validate();
    augment.validate();
    optimizer.validate();
    train.validate();
    eval.validate();
    validate_sampler(formulation, sampler);
    if (backbone.aug_cond == false && augment.p > 0)
        throw ConfigError("augmentation without backbone.aug_cond would leak transforms into samples", "augment.p");
    if (contrastive_enabled) {
        contrastive.validate(formulation);
        if (selfcond.tap_layer <= 0) throw ConfigError("contrastive distillation needs a tap", "selfcond.tap_layer");
    }
    // Building the model in dry mode runs every structural check.
    (void)param_count(backbone, selfcond);
}

json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["formulation"] = formulation_json(c.formulation);
    j["backbone"] = backbone_json(c.backbone);
    j["selfcond"] = {{"mode", to_string(c.selfcond.mode)},
                     {"tap_layer", c.selfcond.tap_layer},
                     {"init_policy", to_string(c.selfcond.init_policy)},
                     {"mask_cls_aug", c.selfcond.mask_cls_aug}};
    j["augment"] = augment_json(c.augment);
    j["contrastive"] = {{"enabled", c.contrastive_enabled},
                        {"gamma", c.contrastive.gamma},
                        {"temperature", c.contrastive.temperature},
                        {"ema_decay", c.contrastive.ema_decay},
                        {"target_time", c.contrastive.target_time},
                        {"target_source", to_string(c.contrastive.target_source)},
                        {"proj_dim", c.contrastive.proj_dim},
                        {"freq_dim", c.contrastive.freq_dim}};
    j["optimizer"] = {{"name", c.optimizer.name},       {"lr", c.optimizer.lr},   {"beta1", c.optimizer.beta1},
                      {"beta2", c.optimizer.beta2},     {"eps", c.optimizer.eps}, {"weight_decay", c.optimizer.weight_decay},
                      {"warmup_steps", c.optimizer.warmup_steps}};
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"steps", c.train.steps},
                  {"epochs", c.train.epochs},
                  {"log_every", c.train.log_every},
                  {"checkpoint_every", c.train.checkpoint_every},
                  {"nan_patience", c.train.nan_patience},
                  {"dataset", c.train.dataset}};
    j["sampler"] = {{"solver", to_string(c.sampler.solver)},
                    {"steps", c.sampler.steps},
                    {"rho", c.sampler.rho},
                    {"cfg_scale", c.sampler.cfg_scale},
                    {"cfg_interval", {c.sampler.cfg_interval.first, c.sampler.cfg_interval.second}},
                    {"timestep_shift", c.sampler.timestep_shift},
                    {"rtol", c.sampler.rtol},
                    {"atol", c.sampler.atol},
                    {"max_nfe", c.sampler.max_nfe}};
    j["eval"] = {{"probe_time", c.eval.probe_time},   {"probe_epochs", c.eval.probe_epochs},
                 {"probe_lr", c.eval.probe_lr},       {"probe_batch", c.eval.probe_batch},
                 {"probe_weight_decay", c.eval.probe_weight_decay},
                 {"noise_seed", c.eval.noise_seed},   {"holdout", c.eval.holdout},
                 {"use_ema", c.eval.use_ema}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    Section root(j, "");
    RunConfig c;
    root.get("seed", c.seed);
    c.formulation = formulation_from(root.sub("formulation"));
    c.backbone = backbone_from(root.sub("backbone"));
    {
        Section s(root.sub("selfcond"), "selfcond");
        s.get_enum("mode", c.selfcond.mode, parse_selfcond_mode);
        s.get("tap_layer", c.selfcond.tap_layer);
        s.get_enum("init_policy", c.selfcond.init_policy, parse_init_policy);
        s.get("mask_cls_aug", c.selfcond.mask_cls_aug);
        s.finish();
    }
    c.augment = augment_from(root.sub("augment"));
    {
        Section s(root.sub("contrastive"), "contrastive");
        s.get("enabled", c.contrastive_enabled);
        s.get("gamma", c.contrastive.gamma);
        s.get("temperature", c.contrastive.temperature);
        s.get("ema_decay", c.contrastive.ema_decay);
        s.get("target_time", c.contrastive.target_time);
        s.get_enum("target_source", c.contrastive.target_source, parse_target_source);
        s.get("proj_dim", c.contrastive.proj_dim);
        s.get("freq_dim", c.contrastive.freq_dim);
        s.finish();
    }
    {
        Section s(root.sub("optimizer"), "optimizer");
        s.get("name", c.optimizer.name);
        s.get("lr", c.optimizer.lr);
        s.get("beta1", c.optimizer.beta1);
        s.get("beta2", c.optimizer.beta2);
        s.get("eps", c.optimizer.eps);
        s.get("weight_decay", c.optimizer.weight_decay);
        s.get("warmup_steps", c.optimizer.warmup_steps);
        s.finish();
    }
    {
        Section s(root.sub("train"), "train");
        s.get("batch_size", c.train.batch_size);
        s.get("steps", c.train.steps);
        s.get("epochs", c.train.epochs);
        s.get("log_every", c.train.log_every);
        s.get("checkpoint_every", c.train.checkpoint_every);
        s.get("nan_patience", c.train.nan_patience);
        s.get("dataset", c.train.dataset);
        s.finish();
    }
    {
        Section s(root.sub("sampler"), "sampler");
        s.get_enum("solver", c.sampler.solver, parse_solver);
        s.get("steps", c.sampler.steps);
        s.get("rho", c.sampler.rho);
        s.get("cfg_scale", c.sampler.cfg_scale);
        std::vector<double> iv{c.sampler.cfg_interval.first, c.sampler.cfg_interval.second};
        s.get("cfg_interval", iv);
        if (iv.size() != 2) throw ConfigError("must be [lo, hi]", "sampler.cfg_interval");
        c.sampler.cfg_interval = {iv[0], iv[1]};
        s.get("timestep_shift", c.sampler.timestep_shift);
        s.get("rtol", c.sampler.rtol);
        s.get("atol", c.sampler.atol);
        s.get("max_nfe", c.sampler.max_nfe);
        s.finish();
    }
    {
        Section s(root.sub("eval"), "eval");
        s.get("probe_time", c.eval.probe_time);
        s.get("probe_epochs", c.eval.probe_epochs);
        s.get("probe_lr", c.eval.probe_lr);
        s.get("probe_batch", c.eval.probe_batch);
        s.get("probe_weight_decay", c.eval.probe_weight_decay);
        s.get("noise_seed", c.eval.noise_seed);
        s.get("holdout", c.eval.holdout);
        s.get("use_ema", c.eval.use_ema);
        s.finish();
    }
    root.finish();
    // A formulation switch without an explicit solver picks one that supports it.
    if (!j.contains("sampler") || !j["sampler"].contains("solver")) {
        if (c.formulation.kind == FormKind::ddpm) c.sampler.solver = Solver::euler_ddim;
        if (c.formulation.kind == FormKind::edm) {
            c.sampler.solver = Solver::heun;
            c.sampler.steps = 18;
            c.sampler.cfg_interval = {0.0, 80.0};
        }
        if (c.formulation.kind == FormKind::ddpm) c.sampler.cfg_interval = {0.0, 1000.0};
    }
    return c;
}

void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
    const std::string path = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &j;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError("empty key in override", path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            return;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot open config " + path);
        try {
            j = json::parse(in, nullptr, true, true);
        } catch (const json::exception& e) {
            throw ConfigError(std::string("malformed config: ") + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    RunConfig c = run_config_from_json(j);
    c.validate();
    return c;
}

std::string hash_hex(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string config_hash(const RunConfig& c) { return hash_hex(to_json(c).dump()); }

}  // namespace sdiff
