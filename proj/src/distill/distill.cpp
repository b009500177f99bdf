#include "sdiff/distill.hpp"

#include <cmath>

namespace sdiff {

std::string to_string(TargetSource s) { return s == TargetSource::cls ? "cls" : "pooled"; }

TargetSource parse_target_source(const std::string& s) {
    if (s == "pooled") return TargetSource::pooled;
    if (s == "cls") return TargetSource::cls;
    throw ConfigError("unknown target source '" + s + "' (pooled|cls)", "contrastive.target_source");
}

double default_probe_time(const Formulation& f, Family family) {
    if (family == Family::dit && f.kind == FormKind::rf) return 0.25;
    switch (f.kind) {
        case FormKind::ddpm: return 11;
        case FormKind::edm: return 0.06;
        case FormKind::rf: return 0.06;
    }
    return 0;
}

double ContrastiveConfig::resolved_target_time(const Formulation& f, Family family) const {
    return target_time < 0 ? default_probe_time(f, family) : target_time;
}

void ContrastiveConfig::validate(const Formulation& f) const {
    if (!(gamma >= 0) || !std::isfinite(gamma)) throw ConfigError("must be >= 0", "contrastive.gamma");
    if (!(temperature > 0)) throw ConfigError("must be > 0", "contrastive.temperature");
    if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("must be in (0, 1)", "contrastive.ema_decay");
    if (proj_dim < 0) throw ConfigError("must be >= 0", "contrastive.proj_dim");
    if (freq_dim <= 0 || freq_dim % 2) throw ConfigError("must be a positive even number", "contrastive.freq_dim");
    const double t = resolved_target_time(f);
    try {
        (void)alpha_sigma(f, t);
    } catch (const DomainError& e) {
        throw ConfigError(std::string("t* outside the formulation's domain: ") + e.what(), "contrastive.target_time");
    }
    if (t == f.t_clean()) throw ConfigError("t* must be a noisy time", "contrastive.target_time");
}

template <class T>
void ema_update(ParamStore<T>& teacher, const ParamStore<T>& student, double decay) {
    if (!(decay >= 0 && decay <= 1)) throw DomainError("EMA decay must be in [0, 1]");
    if (teacher.list().size() != student.list().size())
        throw StructureError("EMA parameter sets differ in size: " + std::to_string(teacher.list().size()) + " vs " +
                             std::to_string(student.list().size()));
    const T d = static_cast<T>(decay), e = static_cast<T>(1.0 - decay);
    for (auto& p : teacher.list()) {
        const Param<T>* s = student.find(p.name);
        if (!s) throw StructureError("EMA: student has no parameter '" + p.name + "'");
        if (s->shape != p.shape) throw StructureError("EMA: shape mismatch for '" + p.name + "'");
        Tensor<T>& tv = p.var.mutable_value();
        const Tensor<T>& sv = s->var.value();
        for (std::int64_t i = 0; i < tv.numel(); ++i) tv[i] = d * tv[i] + e * sv[i];
    }
}

template <class T>
ProjectionHead<T>::ProjectionHead(std::int64_t in, std::int64_t out, int freq_dim, std::uint64_t seed)
    : in_(in), out_(out), store_(seed) {
    Scope<T> root(&store_);
    temb_ = nn::TimestepEmbedder<T>(root.sub("time"), freq_dim, in, in);
    fc1_ = nn::Linear<T>(root.sub("fc1"), in, 4 * in);
    fc2_ = nn::Linear<T>(root.sub("fc2"), 4 * in, 4 * in);
    fc3_ = nn::Linear<T>(root.sub("fc3"), 4 * in, out);
}

template <class T>
Var<T> ProjectionHead<T>::operator()(const Var<T>& feature, std::span<const double> t) const {
    if (feature.shape().size() != 2 || feature.dim(1) != in_)
        throw ShapeError("projection head expects [B, " + std::to_string(in_) + "], got " + to_string(feature.shape()));
    const T eps = T(1e-5);
    Var<T> h = ag::add(feature, temb_(t));
    h = ag::relu(ag::batch_standardize(fc1_(h), eps));
    h = ag::relu(ag::batch_standardize(fc2_(h), eps));
    return fc3_(h);
}

template <class T>
PredictionHead<T>::PredictionHead(std::int64_t dim, std::uint64_t seed) : store_(seed) {
    Scope<T> root(&store_);
    fc1_ = nn::Linear<T>(root.sub("fc1"), dim, 4 * dim);
    fc2_ = nn::Linear<T>(root.sub("fc2"), 4 * dim, dim);
}

template <class T>
Var<T> PredictionHead<T>::operator()(const Var<T>& z) const {
    return fc2_(ag::relu(ag::batch_standardize(fc1_(z), T(1e-5))));
}

template <class T>
Var<T> info_nce(const Var<T>& q, const Var<T>& k, double temperature) {
    if (q.shape().size() != 2 || k.shape().size() != 2) throw ShapeError("info_nce expects [B, D] inputs");
    const std::int64_t B = q.dim(0);
    if (B == 0) throw DomainError("info_nce on an empty batch");
    if (k.dim(0) != B || k.dim(1) != q.dim(1)) throw ShapeError("info_nce: q and k shapes differ");
    if (!(temperature > 0)) throw DomainError("temperature must be positive");
    const Var<T> qn = ag::l2_normalize(q), kn = ag::l2_normalize(k);
    const Var<T> logits = ag::mul_scalar(ag::linear(qn, ag::permute(kn, {1, 0})), static_cast<T>(1.0 / temperature));
    std::vector<int> pos(static_cast<std::size_t>(B));
    for (std::int64_t i = 0; i < B; ++i) pos[static_cast<std::size_t>(i)] = static_cast<int>(i);
    return ag::cross_entropy(logits, pos);
}

template <class T>
ContrastiveHeads<T>::ContrastiveHeads(std::int64_t width, const ContrastiveConfig& cfg, std::uint64_t seed) {
    const std::int64_t out = cfg.proj_dim > 0 ? cfg.proj_dim : width;
    proj = std::make_unique<ProjectionHead<T>>(width, out, cfg.freq_dim, Rng::derive(seed, "proj_head"));
    ema_proj = std::make_unique<ProjectionHead<T>>(width, out, cfg.freq_dim, Rng::derive(seed, "proj_head"));
    pred = std::make_unique<PredictionHead<T>>(out, Rng::derive(seed, "pred_head"));
    copy_params(proj->params(), ema_proj->params());
}

template <class T>
void ContrastiveHeads<T>::ema_step(double decay) {
    ema_update(ema_proj->params(), proj->params(), decay);
}

template <class T>
std::vector<Param<T>*> ContrastiveHeads<T>::trainable() {
    std::vector<Param<T>*> v;
    for (auto& p : proj->params().list()) v.push_back(&p);
    for (auto& p : pred->params().list()) v.push_back(&p);
    return v;
}

template <class T>
std::int64_t distill_feature_width(const Backbone<T>& net, TargetSource src) {
    const int tap = net.selfcond().tap_layer;
    if (tap <= 0) throw ConfigError("contrastive distillation needs a self-conditioning tap", "selfcond.tap_layer");
    if (src == TargetSource::cls) {
        if (!net.token_based()) throw ConfigError("cls target needs a token backbone", "contrastive.target_source");
        if (net.selfcond().mode != SelfCondMode::cls_token)
            throw ConfigError("cls target needs selfcond.mode = cls_token", "contrastive.target_source");
        return net.spec().hidden;
    }
    return net.tap_width(tap);
}

template <class T>
Var<T> distill_feature(const ForwardOutput<T>& out, int tap, TargetSource src) {
    if (src == TargetSource::cls) {
        if (!out.cls_state.defined()) throw ConfigError("model produced no summary token", "contrastive.target_source");
        return out.cls_state;
    }
    return pool_feature(out.tap(tap));
}

template <class T>
View<T> make_view(const Batch& batch, const AugConfig& aug, const Formulation& f, std::uint64_t step_seed,
                  std::string_view tag) {
    const std::string base(tag);
    const std::int64_t B = batch.x.dim(0);
    View<T> v;
    Rng ra = Rng::substream(step_seed, base + "/aug");
    AugmentedBatch ab = augment_batch(batch.x, aug, ra);
    v.x0 = ab.images.template cast<T>();
    v.aug = std::move(ab.labels);
    Rng rt = Rng::substream(step_seed, base + "/time");
    for (std::int64_t b = 0; b < B; ++b) v.t.push_back(sample_training_time(f, rt));
    Rng rn = Rng::substream(step_seed, base + "/noise");
    v.eps = Tensor<T>::randn(v.x0.shape(), rn);
    return v;
}

template <class T>
std::vector<int> model_labels(const Backbone<T>& net, const Batch& batch) {
    return net.spec().num_classes > 0 ? batch.labels : std::vector<int>{};
}

namespace {

template <class T>
Conditioning make_cond(const Backbone<T>& net, const Batch& batch, const Tensor<double>& aug) {
    Conditioning c;
    c.labels = model_labels(net, batch);
    if (net.spec().aug_cond) c.aug = aug;
    if (net.spec().planted_strength > 0) c.planted = batch.labels;
    return c;
}

}  // namespace

template <class T>
DiffusionTerms<T> diffusion_on_view(const Denoiser<T>& model, const Batch& batch, const View<T>& v,
                                    std::uint64_t step_seed, const std::vector<int>& taps, const UncertaintyWeight<T>* u) {
    Rng drop = Rng::substream(step_seed, "view1/dropout");
    ForwardOptions o;
    o.taps = taps;
    o.train = true;
    o.rng = &drop;
    return diffusion_objective(model, v.x0, v.t, v.eps, make_cond(model.backbone(), batch, v.aug), o, u);
}

template <class T>
DiffusionTerms<T> diffusion_step(const Denoiser<T>& model, const Batch& batch, const AugConfig& aug,
                                 std::uint64_t step_seed, const std::vector<int>& taps, const UncertaintyWeight<T>* u) {
    return diffusion_on_view(model, batch, make_view<T>(batch, aug, model.formulation(), step_seed, "view1"), step_seed,
                             taps, u);
}

template <class T>
ContrastiveTerms<T> contrastive_step(const Denoiser<T>& model, const Denoiser<T>& teacher, ContrastiveHeads<T>& heads,
                                     const Batch& batch, const ContrastiveConfig& cfg, const AugConfig& aug,
                                     std::uint64_t step_seed, const UncertaintyWeight<T>* u) {
    const Formulation& f = model.formulation();
    cfg.validate(f);
    const Backbone<T>& net = model.backbone();
    const int tap = net.selfcond().tap_layer;
    (void)distill_feature_width(net, cfg.target_source);  // validates the source

    ContrastiveTerms<T> r;
    const std::vector<int> taps = cfg.target_source == TargetSource::pooled ? std::vector<int>{tap} : std::vector<int>{};
    const View<T> v1 = make_view<T>(batch, aug, f, step_seed, "view1");
    DiffusionTerms<T> d1 = diffusion_on_view(model, batch, v1, step_seed, taps, u);
    r.diff = d1.loss;
    r.online_t = v1.t;
    if (cfg.gamma == 0) {
        r.total = r.diff;
        r.moco = ag::constant(Tensor<T>::scalar(T(0)));
        return r;
    }

    // Second view through the online model (features only).
    const View<T> v2 = make_view<T>(batch, aug, f, step_seed, "view2");
    Rng drop2 = Rng::substream(step_seed, "view2/dropout");
    ForwardOptions o2;
    o2.taps = taps;
    o2.train = true;
    o2.rng = &drop2;
    const Var<T> x2 = ag::constant(perturb(f, v2.x0, v2.t, v2.eps));
    const ForwardOutput<T> out2 = model.predict(x2, v2.t, make_cond(net, batch, v2.aug), o2);

    auto net_times = [&](const std::vector<double>& t) {
        std::vector<double> n;
        for (double s : t) n.push_back(network_time(f, s));
        return n;
    };
    const Var<T> q1 = (*heads.pred)((*heads.proj)(distill_feature(d1.out, tap, cfg.target_source), net_times(r.online_t)));
    const Var<T> q2 = (*heads.pred)((*heads.proj)(distill_feature(out2, tap, cfg.target_source), net_times(v2.t)));

    // Teacher: both views at the fixed probing time, no graph.
    r.teacher_time = cfg.resolved_target_time(f, model.backbone().spec().family);
    const std::vector<double> tstar(static_cast<std::size_t>(batch.x.dim(0)), r.teacher_time);
    Var<T> k1, k2;
    {
        NoGradGuard ng;
        ForwardOptions ot;
        ot.taps = taps;
        auto teacher_key = [&](const View<T>& v, const char* tag) {
            Rng rn = Rng::substream(step_seed, std::string(tag) + "/teacher_noise");
            const Tensor<T> eps = Tensor<T>::randn(v.x0.shape(), rn);
            const Var<T> xt = ag::constant(perturb(f, v.x0, tstar, eps));
            const ForwardOutput<T> o = teacher.predict(xt, tstar, make_cond(teacher.backbone(), batch, v.aug), ot);
            return (*heads.ema_proj)(distill_feature(o, tap, cfg.target_source), net_times(tstar)).detach();
        };
        k1 = teacher_key(v1, "view1");
        k2 = teacher_key(v2, "view2");
    }
    r.moco = ag::add(info_nce(q1, k2, cfg.temperature), info_nce(q2, k1, cfg.temperature));
    r.total = ag::add(r.diff, ag::mul_scalar(r.moco, static_cast<T>(cfg.gamma)));
    return r;
}

#define SDIFF_INSTANTIATE(T)                                                                                          \
    template void ema_update(ParamStore<T>&, const ParamStore<T>&, double);                                           \
    template class ProjectionHead<T>;                                                                                 \
    template class PredictionHead<T>;                                                                                 \
    template Var<T> info_nce(const Var<T>&, const Var<T>&, double);                                                   \
    template struct ContrastiveHeads<T>;                                                                              \
    template std::int64_t distill_feature_width(const Backbone<T>&, TargetSource);                                   \
    template Var<T> distill_feature(const ForwardOutput<T>&, int, TargetSource);                                     \
    template View<T> make_view(const Batch&, const AugConfig&, const Formulation&, std::uint64_t, std::string_view); \
    template std::vector<int> model_labels(const Backbone<T>&, const Batch&);                                        \
    template DiffusionTerms<T> diffusion_step(const Denoiser<T>&, const Batch&, const AugConfig&, std::uint64_t,     \
                                              const std::vector<int>&, const UncertaintyWeight<T>*);                 \
    template ContrastiveTerms<T> contrastive_step(const Denoiser<T>&, const Denoiser<T>&, ContrastiveHeads<T>&,       \
                                                  const Batch&, const ContrastiveConfig&, const AugConfig&,          \
                                                  std::uint64_t, const UncertaintyWeight<T>*);

SDIFF_INSTANTIATE(float)
SDIFF_INSTANTIATE(double)

#undef SDIFF_INSTANTIATE

}  // namespace sdiff
