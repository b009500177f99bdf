#include "app.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "plots.hpp"
#include "sdiff/eval.hpp"
#include "sdiff/profiler.hpp"
#include "sdiff/trainloop.hpp"
#include "sdiff/version.hpp"

namespace sdiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string default_out_root() {
    const char* e = std::getenv("SDIFF_OUT");
    return e && *e ? e : "runs";
}

std::string run_id(const RunConfig& c) { return config_hash(c) + "-s" + std::to_string(c.seed); }

json provenance(const std::string& verb, const std::string& config_hash, std::uint64_t seed,
                const std::vector<std::string>& inputs) {
    return {{"verb", verb},
            {"config_hash", config_hash},
            {"code_version", code_version()},
            {"seed", seed},
            {"inputs", inputs}};
}

namespace {

void ensure_parent(const std::string& path) {
    const auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

void write_json(const std::string& path, const json& j) {
    ensure_parent(path);
    write_atomic(path, j.dump(2) + "\n");
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

json read_json(const std::string& path) {
    const std::string text = read_text(path);
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(path + " is not valid JSON (" + e.what() + ")", "inputs");
    }
}

std::string unescape_xml(std::string s) {
    const std::pair<const char*, const char*> rep[] = {{"&lt;", "<"}, {"&gt;", ">"}, {"&quot;", "\""}, {"&amp;", "&"}};
    for (const auto& [from, to] : rep)
        for (std::size_t p = 0; (p = s.find(from, p)) != std::string::npos; p += std::strlen(to))
            s.replace(p, std::strlen(from), to);
    return s;
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

// Names made unique by a numeric suffix, in input order.
std::vector<std::string> unique_names(std::vector<std::string> names) {
    std::map<std::string, int> seen;
    for (auto& n : names)
        if (seen[n]++) n += "#" + std::to_string(seen[n]);
    return names;
}

// A trained checkpoint, opened for evaluation.
struct Model {
    std::string path;
    Archive ckpt;
    RunConfig cfg;  // checkpoint config plus eval/sampler overrides
    std::string base_hash, base_id;
    std::int64_t step = 0;
    bool ema = false;
    std::unique_ptr<Backbone<float>> net;
    std::unique_ptr<Denoiser<float>> den;

    std::string weights() const { return ema ? "ema" : "student"; }
};

std::unique_ptr<Model> open_model(const std::string& path, const std::vector<std::string>& sets, bool ema) {
    if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
    auto m = std::make_unique<Model>();
    m->path = path;
    m->ckpt = Archive::load(path);
    const RunConfig base = checkpoint_config(m->ckpt);
    m->base_hash = config_hash(base);
    m->base_id = run_id(base);
    json j = to_json(base);
    for (const auto& s : sets) {
        // Only evaluation-side settings can change without retraining.
        if (s.rfind("eval.", 0) != 0 && s.rfind("sampler.", 0) != 0)
            throw ConfigError("only eval.* and sampler.* can be overridden for a trained checkpoint",
                              s.substr(0, s.find('=')));
        apply_override(j, s);
    }
    m->cfg = run_config_from_json(j);
    m->cfg.validate();
    m->step = m->ckpt.meta.value("step", std::int64_t{0});
    m->ema = ema || m->cfg.eval.use_ema;
    m->net = load_model(m->ckpt, m->ema);
    m->den = std::make_unique<Denoiser<float>>(*m->net, base.formulation);
    return m;
}

double resolve_t(double t, const Model& m) {
    if (t >= 0) return t;
    if (m.cfg.eval.probe_time >= 0) return m.cfg.eval.probe_time;
    return default_extraction_time(m.cfg.formulation, m.cfg.backbone.family);
}

ProbeConfig probe_config(const RunConfig& c) {
    ProbeConfig p;
    p.epochs = c.eval.probe_epochs;
    p.lr = c.eval.probe_lr;
    p.batch = c.eval.probe_batch;
    p.weight_decay = c.eval.probe_weight_decay;
    p.seed = c.seed;
    return p;
}

json model_provenance(const std::string& verb, const Model& m, std::vector<std::string> extra_inputs = {}) {
    std::vector<std::string> inputs{m.path};
    inputs.insert(inputs.end(), extra_inputs.begin(), extra_inputs.end());
    json p = provenance(verb, m.base_hash, m.cfg.seed, inputs);
    p["run_id"] = m.base_id;
    return p;
}

std::string latest_checkpoint(const std::string& dir) {
    if (fs::exists(dir + "/final.sdar")) return dir + "/final.sdar";
    std::string best;
    long long best_step = -1;
    if (fs::is_directory(dir))
        for (const auto& e : fs::directory_iterator(dir)) {
            const std::string n = e.path().filename().string();
            if (n.rfind("step_", 0) != 0 || e.path().extension() != ".sdar") continue;
            const long long s = std::atoll(n.c_str() + 5);
            if (s > best_step) best_step = s, best = e.path().string();
        }
    if (best.empty()) throw IoError("no checkpoint to resume in " + dir);
    return best;
}

Tensor<float> first_rows(const Tensor<float>& x, std::int64_t n) {
    if (n <= 0 || n >= x.dim(0)) return x;
    Shape s = x.shape();
    const std::int64_t per = x.numel() / x.dim(0);
    s[0] = n;
    return Tensor<float>(s, std::vector<float>(x.ptr(), x.ptr() + n * per));
}

std::string figure_metadata(const std::string& kind, const std::vector<std::string>& inputs) {
    std::set<std::string> hashes;
    for (const auto& in : inputs) {
        const json p = read_provenance(in);
        if (p.is_object() && p.contains("config_hash") && p["config_hash"].is_string())
            hashes.insert(p["config_hash"].get<std::string>());
    }
    std::string h = hashes.size() == 1 ? *hashes.begin() : hashes.empty() ? "" : "mixed";
    json p = provenance("report", h, 0, inputs);
    p.erase("seed");
    p["plot"] = kind;
    p["input_config_hashes"] = hashes;
    return p.dump();
}

double field(const json& j, const std::string& key, const std::string& path) {
    if (j.contains(key) && j[key].is_number()) return j[key].get<double>();
    if (j.contains("best") && j["best"].contains(key) && j["best"][key].is_number())
        return j["best"][key].get<double>();
    throw ConfigError(path + " has no numeric field '" + key + "'", "key");
}

void plot_loss_curves(const std::vector<std::string>& inputs, const std::string& svg, const std::string& key,
                      const std::string& meta) {
    std::vector<plots::Series> series;
    std::vector<std::string> names;
    for (const auto& in : inputs) {
        plots::Series s;
        std::istringstream lines(read_text(in));
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            json r;
            try {
                r = json::parse(line);
            } catch (const json::exception&) {
                throw ConfigError(in + " is not a metrics stream", "inputs");
            }
            if (r.value("skipped", false)) continue;
            if (!r.contains(key)) throw ConfigError(in + " records have no '" + key + "'", "key");
            s.x.push_back(r.at("step").get<double>());
            s.y.push_back(r[key].get<double>());
        }
        const auto parent = fs::path(in).parent_path().filename().string();
        names.push_back(parent.empty() ? stem(in) : parent);
        series.push_back(std::move(s));
    }
    names = unique_names(names);
    for (std::size_t i = 0; i < series.size(); ++i) series[i].name = names[i];
    plots::line_plot(svg, {"training loss", "step", key, false, meta}, series);
}

void plot_layer_bars(const std::vector<std::string>& inputs, const std::string& svg, const std::string& key,
                     const std::string& meta) {
    std::set<int> all_layers;
    std::vector<std::map<int, double>> values;
    std::vector<std::string> names;
    std::string metric = "accuracy";
    for (const auto& in : inputs) {
        const json j = read_json(in);
        if (!j.contains("grid") || !j.contains("times") || !j.contains("best"))
            throw ConfigError(in + " is not a sweep report", "inputs");
        // The row at the best probing time, as in a per-layer comparison at fixed t.
        const auto times = j["times"].get<std::vector<double>>();
        const double bt = j["best"]["t"].get<double>();
        const auto ti = std::size_t(std::find(times.begin(), times.end(), bt) - times.begin());
        if (ti >= times.size()) throw ConfigError(in + ": best time not in the grid", "inputs");
        std::map<int, double> row;
        for (const auto& cell : j["grid"][ti]) {
            const int l = cell.at("layer").get<int>();
            row[l] = cell.at(key).get<double>();
            all_layers.insert(l);
        }
        metric = j["best"].value("metric", metric);
        values.push_back(row);
        if (j.contains("checkpoint_step"))
            names.push_back("step " + std::to_string(j["checkpoint_step"].get<long long>()));
        else
            names.push_back(stem(j["best"].value("checkpoint", in)));
    }
    names = unique_names(names);
    std::vector<std::string> cats;
    for (int l : all_layers) cats.push_back(std::to_string(l));
    std::vector<plots::Series> series;
    for (std::size_t i = 0; i < values.size(); ++i) {
        plots::Series s{names[i], {}, {}};
        for (int l : all_layers) {
            auto it = values[i].find(l);
            s.x.push_back(l);
            s.y.push_back(it == values[i].end() ? NAN : it->second);
        }
        series.push_back(std::move(s));
    }
    plots::bar_plot(svg, {"linear probe " + metric + " by layer", "layer", metric, false, meta}, cats, series);
}

void plot_cka(const std::vector<std::string>& inputs, const std::string& svg, const std::string& meta) {
    if (inputs.size() != 1) throw ConfigError("cka_heatmap takes exactly one CKA report", "inputs");
    const json j = read_json(inputs[0]);
    if (!j.contains("matrix")) throw ConfigError(inputs[0] + " is not a CKA report", "inputs");
    const auto m = j["matrix"].get<std::vector<std::vector<double>>>();
    std::vector<std::string> rows, cols;
    for (int l : j.at("layers_a").get<std::vector<int>>()) rows.push_back(std::to_string(l));
    for (int l : j.at("layers_b").get<std::vector<int>>()) cols.push_back(std::to_string(l));
    const bool inter = !j.value("model_b", std::string()).empty();
    plots::heatmap(svg,
                   {"linear CKA at t=" + plots::fmt(j.value("t", 0.0)), inter ? "layer (model b)" : "layer",
                    "layer", false, meta},
                   m, rows, cols, 0, 1);
}

void plot_metric_evolution(const std::vector<std::string>& inputs, const std::string& svg, std::string key,
                           const std::string& meta) {
    std::map<std::string, std::vector<std::pair<double, double>>> runs;
    std::vector<std::string> order;
    for (const auto& in : inputs) {
        const json j = read_json(in);
        if (!j.contains("checkpoint_step")) throw ConfigError(in + " has no checkpoint_step", "inputs");
        const std::string k = !key.empty() ? key : j.contains("frechet") ? "frechet" : "val";
        if (key.empty()) key = k;
        std::string run = "run";
        if (j.contains("provenance")) {
            const auto& p = j["provenance"];
            run = p.value("run_id", p.value("config_hash", run));
            if (p.contains("weights")) run += " " + p["weights"].get<std::string>();
        }
        if (!runs.count(run)) order.push_back(run);
        runs[run].emplace_back(j["checkpoint_step"].get<double>(), field(j, k, in));
    }
    std::vector<plots::Series> series;
    for (const auto& r : order) {
        auto pts = runs[r];
        std::sort(pts.begin(), pts.end());
        plots::Series s{r, {}, {}};
        for (auto [x, y] : pts) s.x.push_back(x), s.y.push_back(y);
        series.push_back(std::move(s));
    }
    plots::line_plot(svg, {"metric evolution", "training step", key, false, meta}, series);
}

}  // namespace

json read_provenance(const std::string& path) {
    if (!fs::exists(path)) throw IoError("artifact not found: " + path);
    const std::string ext = fs::path(path).extension().string();
    if (ext == ".svg") {
        const std::string text = read_text(path);
        const auto a = text.find("<metadata>"), b = text.find("</metadata>");
        if (a == std::string::npos || b == std::string::npos) return nullptr;
        return json::parse(unescape_xml(text.substr(a + 10, b - a - 10)), nullptr, false);
    }
    if (ext == ".csv") {
        const std::string svg = fs::path(path).replace_extension(".svg").string();
        return fs::exists(svg) ? read_provenance(svg) : json(nullptr);
    }
    if (ext == ".json") {
        const json j = json::parse(read_text(path), nullptr, false);
        return j.is_object() && j.contains("provenance") ? j["provenance"] : json(nullptr);
    }
    if (ext == ".jsonl") {
        const auto p = fs::path(path).parent_path() / "provenance.json";
        return fs::exists(p) ? read_provenance(p.string()) : json(nullptr);
    }
    if (ext == ".sdar") {
        const Archive a = Archive::load(path);
        if (a.meta.contains("provenance")) return a.meta["provenance"];
        if (a.meta.value("format", std::string()) == "sdiff-checkpoint") {
            const json& c = a.meta.at("config");
            json p = {{"verb", "train"},
                      {"config_hash", a.meta.value("config_hash", std::string())},
                      {"code_version", a.meta.value("code_version", std::string("unknown"))},
                      {"seed", c.value("seed", std::uint64_t{0})},
                      {"step", a.meta.value("step", std::int64_t{0})},
                      {"inputs", {c.at("train").value("dataset", std::string())}}};
            return p;
        }
    }
    return nullptr;
}

json provenance_chain(const std::string& path) {
    std::function<json(const std::string&, int)> walk = [&](const std::string& p, int depth) {
        json node = {{"path", p}};
        if (!fs::exists(p)) {
            node["missing"] = true;
            return node;
        }
        const json prov = read_provenance(p);
        node["provenance"] = prov;
        if (depth < 32 && prov.is_object() && prov.contains("inputs")) {
            node["inputs"] = json::array();
            for (const auto& in : prov["inputs"]) {
                const std::string s = in.get<std::string>();
                node["inputs"].push_back(fs::exists(s) ? walk(s, depth + 1) : json{{"ref", s}});
            }
        }
        return node;
    };
    return walk(path, 0);
}

void emit_plot(const std::string& kind, const std::vector<std::string>& inputs, const std::string& svg_path,
               const std::string& key) {
    if (inputs.empty()) throw ConfigError("no reports given", "inputs");
    for (const auto& in : inputs)
        if (!fs::exists(in)) throw IoError("report not found: " + in);
    const std::string meta = figure_metadata(kind, inputs);
    try {
        if (kind == "loss_curves") return plot_loss_curves(inputs, svg_path, key.empty() ? "loss_diff" : key, meta);
        if (kind == "layer_bars") return plot_layer_bars(inputs, svg_path, key.empty() ? "val" : key, meta);
        if (kind == "cka_heatmap") return plot_cka(inputs, svg_path, meta);
        if (kind == "metric_evolution") return plot_metric_evolution(inputs, svg_path, key, meta);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed report (") + e.what() + ")", "inputs");
    }
    throw ConfigError("unknown plot kind '" + kind + "' (loss_curves | layer_bars | cka_heatmap | metric_evolution)",
                      "plot");
}

namespace {

struct Common {
    std::string config;
    std::vector<std::string> sets;
    std::string out = default_out_root();
    std::string seed;
};

RunConfig resolve_config(const Common& c, std::vector<std::string> extra = {}) {
    std::vector<std::string> sets = c.sets;
    sets.insert(sets.end(), extra.begin(), extra.end());
    if (!c.seed.empty()) sets.push_back("seed=" + c.seed);
    RunConfig cfg = load_run_config(c.config, sets);
    cfg.validate();
    return cfg;
}

std::string run_dir(const Common& c, const std::string& id) { return (fs::path(c.out) / id).string(); }

struct TrainOpts {
    bool resume = false;
    std::string profile;
};

void do_train(const Common& c, const TrainOpts& o, std::ostream& out) {
    std::vector<std::string> extra;
    if (!o.profile.empty()) {
        const json r = read_json(o.profile);
        if (!r.contains("selected")) throw NumericError("profile report " + o.profile + " selected no layer");
        extra.push_back("selfcond.tap_layer=" + std::to_string(r["selected"].get<int>()));
    }
    const RunConfig cfg = resolve_config(c, extra);
    const std::string id = run_id(cfg), dir = run_dir(c, id);
    std::unique_ptr<Trainer> tr;
    json p = {{"run_id", id}};
    if (o.resume) {
        const std::string from = latest_checkpoint(dir + "/checkpoints");
        tr = Trainer::resume(from);
        if (config_hash(tr->config()) != config_hash(cfg))
            throw ConfigError("differs from the configuration of " + from, "config");
        tr->set_output_dir(dir, true);
        p["resumed_from"] = from;
    } else {
        tr = std::make_unique<Trainer>(cfg, split_for_run(cfg).train);
        tr->set_output_dir(dir);
    }
    std::vector<std::string> inputs{cfg.train.dataset};
    if (!o.profile.empty()) inputs.push_back(o.profile);
    p["provenance"] = provenance("train", config_hash(cfg), cfg.seed, inputs);
    write_json(dir + "/config.json", to_json(cfg));
    write_json(dir + "/provenance.json", p);

    tr->run();
    emit_plot("loss_curves", {dir + "/metrics.jsonl"}, dir + "/plots/loss_curves.svg");
    out << "train " << id << ": " << tr->step_count() << " steps";
    if (!tr->records().empty()) out << ", final loss " << plots::fmt(tr->records().back().loss);
    out << ", checkpoint " << dir << "/checkpoints/final.sdar\n";
}

struct SampleOpts {
    std::string ckpt;
    std::int64_t n = 64;
    bool student = false;
    std::string solver;
    int steps = 0;
};

void do_sample(const Common& c, const SampleOpts& o, std::ostream& out) {
    std::vector<std::string> sets = c.sets;
    if (!o.solver.empty()) sets.push_back("sampler.solver=" + o.solver);
    if (o.steps > 0) sets.push_back("sampler.steps=" + std::to_string(o.steps));
    if (o.n < 1) throw ConfigError("must be >= 1", "n");
    auto m = open_model(o.ckpt, sets, !o.student);
    m->ema = !o.student;
    std::vector<int> labels;
    if (m->cfg.backbone.num_classes > 0)
        for (std::int64_t i = 0; i < o.n; ++i) labels.push_back(int(i % m->cfg.backbone.num_classes));
    Rng rng = Rng::substream(m->cfg.seed, "sample");
    const SampleResult r = sample(*m->den, m->cfg.sampler, o.n, rng, labels);
    for (std::int64_t i = 0; i < r.x.numel(); ++i)
        if (!std::isfinite(r.x[i])) throw NumericError("sampler produced non-finite values");
    Archive a;
    a.put("images", r.x.cast<float>());
    if (!labels.empty()) a.put("labels", labels);
    a.meta = {{"format", "sdiff-samples"},
              {"nfe", r.nfe},
              {"checkpoint_step", m->step},
              {"sampler", to_json(m->cfg)["sampler"]},
              {"provenance", model_provenance("sample", *m)}};
    a.meta["provenance"]["weights"] = m->weights();
    const std::string name = stem(o.ckpt) + "_" + m->weights() + "_" + to_string(m->cfg.sampler.solver) +
                             std::to_string(m->cfg.sampler.steps) + "_n" + std::to_string(o.n);
    const std::string path = run_dir(c, m->base_id) + "/samples/" + name + ".sdar";
    ensure_parent(path);
    a.save(path);
    plots::image_grid_ppm(fs::path(path).replace_extension(".ppm").string(), a.get<float>("images"),
                          int(std::ceil(std::sqrt(double(o.n)))));
    out << "sample: " << o.n << " images, " << r.nfe << " evaluations, " << path << "\n";
}

struct ProbeOpts {
    std::string ckpt;
    int layer = 0;
    std::vector<int> layers;
    std::vector<double> times;
    double t = -1;
    std::string reduce = "pooled";
    std::string upsample = "bilinear";
    bool ema = false;
};

std::pair<std::vector<LayerFeatures>, std::vector<LayerFeatures>> features_pair(const Model& m, const DataSplit& d,
                                                                                ExtractOptions eo) {
    auto tr = extract_features(*m.den, d.train, eo);
    eo.noise_seed = Rng::derive(eo.noise_seed, "val");
    return {std::move(tr), extract_features(*m.den, d.test, eo)};
}

void do_probe(const Common& c, const ProbeOpts& o, std::ostream& out) {
    const Reduce red = parse_reduce(o.reduce);
    if (red == Reduce::tokens) throw ConfigError("image-level probes use pooled or cls features", "reduce");
    auto m = open_model(o.ckpt, c.sets, o.ema);
    const DataSplit d = split_for_run(m->cfg);
    ExtractOptions eo;
    eo.t = resolve_t(o.t, *m);
    eo.layers = {o.layer};
    eo.reduce = red;
    eo.noise_seed = m->cfg.eval.noise_seed;
    const auto [ftr, fva] = features_pair(*m, d, eo);
    ProbeReport r = linear_probe(ftr[0].x, d.train.labels(), fva[0].x, d.test.labels(), probe_config(m->cfg));
    r.layer = o.layer;
    r.t = eo.t;
    r.checkpoint = o.ckpt;
    json j = r.to_json();
    j["reduce"] = o.reduce;
    j["checkpoint_step"] = m->step;
    j["provenance"] = model_provenance("probe", *m);
    j["provenance"]["weights"] = m->weights();
    const std::string path = run_dir(c, m->base_id) + "/reports/probe_L" + std::to_string(o.layer) + "_t" +
                             plots::fmt(eo.t) + (o.reduce == "pooled" ? "" : "_" + o.reduce) + "_" + stem(o.ckpt) + "_" +
                             m->weights() + ".json";
    write_json(path, j);
    out << "probe: layer " << o.layer << " t=" << plots::fmt(eo.t) << " val accuracy " << plots::fmt(r.val_acc)
        << " (" << path << ")\n";
}

void do_sweep(const Common& c, const ProbeOpts& o, std::ostream& out) {
    auto m = open_model(o.ckpt, c.sets, o.ema);
    const DataSplit d = split_for_run(m->cfg);
    const std::vector<int> layers = o.layers.empty() ? m->net->tap_layers() : o.layers;
    const std::vector<double> times = o.times.empty() ? std::vector<double>{resolve_t(-1, *m)} : o.times;
    const SweepResult s =
        sweep(*m->den, d.train, d.test, layers, times, probe_config(m->cfg), m->cfg.eval.noise_seed, o.ckpt);
    json j = s.to_json();
    j["checkpoint_step"] = m->step;
    j["provenance"] = model_provenance("sweep", *m);
    j["provenance"]["weights"] = m->weights();
    const std::string dir = run_dir(c, m->base_id), name = stem(o.ckpt) + "_" + m->weights();
    const std::string path = dir + "/reports/sweep_" + name + ".json";
    write_json(path, j);
    emit_plot("layer_bars", {path}, dir + "/plots/layer_bars_" + name + ".svg");
    out << "sweep: best layer " << s.best().layer << " t=" << plots::fmt(s.best().t) << " val accuracy "
        << plots::fmt(s.best().val_acc) << " (" << path << ")\n";
}

void do_dense(const Common& c, const ProbeOpts& o, std::ostream& out) {
    if (o.layers.empty()) throw ConfigError("at least one layer is required", "layers");
    const Upsample up = o.upsample == "nearest"    ? Upsample::nearest
                        : o.upsample == "bilinear" ? Upsample::bilinear
                                                   : throw ConfigError("nearest | bilinear", "upsample");
    auto m = open_model(o.ckpt, c.sets, o.ema);
    const DataSplit d = split_for_run(m->cfg);
    if (!d.train.has_dense()) throw ConfigError("dataset has no dense labels", "train.dataset");
    ExtractOptions eo;
    eo.t = resolve_t(o.t, *m);
    eo.layers = o.layers;
    eo.reduce = Reduce::tokens;
    eo.noise_seed = m->cfg.eval.noise_seed;
    const auto [ftr, fva] = features_pair(*m, d, eo);
    const std::int64_t s = d.train.image_size();
    const DenseProbeData tr = make_dense_data(ftr, d.train.dense(), s, s, d.train.dense_classes());
    const DenseProbeData va = make_dense_data(fva, d.test.dense(), s, s, d.test.dense_classes());
    ProbeReport r = dense_probe(tr, va, probe_config(m->cfg), up);
    r.t = eo.t;
    r.checkpoint = o.ckpt;
    json j = r.to_json();
    j["layers"] = o.layers;
    j["upsample"] = o.upsample;
    j["checkpoint_step"] = m->step;
    j["provenance"] = model_provenance("dense-probe", *m);
    j["provenance"]["weights"] = m->weights();
    std::string tag;
    for (int l : o.layers) tag += (tag.empty() ? "" : "-") + std::to_string(l);
    const std::string path = run_dir(c, m->base_id) + "/reports/dense_probe_L" + tag + "_" + stem(o.ckpt) + "_" +
                             m->weights() + ".json";
    write_json(path, j);
    out << "dense-probe: layers " << tag << " mIoU " << plots::fmt(r.val_acc) << " (" << path << ")\n";
}

struct ProfileOpts {
    std::vector<int> candidates;
    int epochs = 20;
    std::vector<std::uint64_t> seeds;
    int workers = 1;
};

void do_profile(const Common& c, const ProfileOpts& o, std::ostream& out) {
    const RunConfig cfg = resolve_config(c);
    if (o.workers < 1) throw ConfigError("must be >= 1", "workers");
    ProfileOptions po;
    po.candidates = o.candidates;
    po.short_epochs = o.epochs;
    po.seeds = o.seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : o.seeds;
    po.workers = o.workers;
    const ProfileReport rep = profile_layers(cfg, split_for_run(cfg).train, po);
    const std::string dir = run_dir(c, run_id(cfg));
    json j = rep.to_json();
    j["provenance"] = provenance("profile-layers", config_hash(cfg), cfg.seed, {cfg.train.dataset});
    j["provenance"]["run_id"] = run_id(cfg);
    write_json(dir + "/reports/profile.json", j);
    ensure_parent(dir + "/reports/profile.txt");
    write_atomic(dir + "/reports/profile.txt", rep.to_text());
    const int sel = rep.selected();  // NumericError when every candidate diverged
    out << "profile-layers: selected layer " << sel << " (" << dir << "/reports/profile.json)\n";
}

struct CkaOpts {
    std::string ckpt, ckpt_b;
    std::vector<int> layers, layers_b;
    double t = -1;
    std::int64_t n = 256;
    std::string reduce = "pooled";
    bool ema = false;
};

void do_cka(const Common& c, const CkaOpts& o, std::ostream& out) {
    const Reduce red = parse_reduce(o.reduce);
    auto a = open_model(o.ckpt, c.sets, o.ema);
    const DataSplit d = split_for_run(a->cfg);
    const ImageDataset imgs = o.n > 0 && o.n < d.test.size() ? d.test.split(o.n).first : d.test;
    ExtractOptions eo;
    eo.t = resolve_t(o.t, *a);
    eo.layers = o.layers.empty() ? a->net->tap_layers() : o.layers;
    eo.reduce = red;
    eo.noise_seed = a->cfg.eval.noise_seed;
    const auto fa = extract_features(*a->den, imgs, eo);
    std::unique_ptr<Model> b;
    std::vector<LayerFeatures> fb;
    if (!o.ckpt_b.empty()) {
        b = open_model(o.ckpt_b, c.sets, o.ema);
        ExtractOptions eb = eo;
        eb.t = o.t >= 0 ? o.t : resolve_t(-1, *b);
        eb.layers = o.layers_b.empty() ? b->net->tap_layers() : o.layers_b;
        fb = extract_features(*b->den, imgs, eb);
    }
    CKAMatrix cm = cka_map(fa, b ? &fb : nullptr);
    cm.t = eo.t;
    cm.model_a = o.ckpt;
    cm.model_b = o.ckpt_b;
    json j = cm.to_json();
    j["reduce"] = o.reduce;
    j["n"] = imgs.size();
    j["checkpoint_step"] = a->step;
    j["provenance"] = model_provenance("cka", *a, b ? std::vector<std::string>{o.ckpt_b} : std::vector<std::string>{});
    j["provenance"]["weights"] = a->weights();
    const std::string dir = run_dir(c, a->base_id);
    const std::string name = "cka_" + stem(o.ckpt) + (b ? "_vs_" + b->base_id + "_" + stem(o.ckpt_b) : "") + "_" +
                             a->weights() + "_" + o.reduce + "_t" + plots::fmt(eo.t);
    write_json(dir + "/reports/" + name + ".json", j);
    emit_plot("cka_heatmap", {dir + "/reports/" + name + ".json"}, dir + "/plots/" + name + ".svg");
    out << "cka: " << cm.m.rows() << "x" << cm.m.cols() << " map (" << dir << "/reports/" << name << ".json)\n";
}

struct FrechetOpts {
    std::vector<std::string> archives;
    std::string embedder = "random64";
    std::int64_t n = 0;
    std::string report;
};

void do_frechet(const Common& c, const FrechetOpts& o, std::ostream& out) {
    if (o.archives.size() != 2) throw ConfigError("exactly two sample archives are required", "archives");
    std::vector<Tensor<float>> imgs;
    std::vector<Archive> arcs;
    for (const auto& p : o.archives) {
        if (!fs::exists(p)) throw IoError("sample archive not found: " + p);
        arcs.push_back(Archive::load(p));
        if (!arcs.back().has("images")) throw ConfigError(p + " holds no 'images' array", "archives");
        imgs.push_back(first_rows(arcs.back().get<float>("images"), o.n));
    }
    const std::int64_t da = imgs[0].numel() / imgs[0].dim(0), db = imgs[1].numel() / imgs[1].dim(0);
    if (da != db) throw ShapeError("sample archives hold images of different sizes");
    const auto emb = make_embedder(o.embedder, da);
    const GaussianStats ga = gaussian_stats(emb->embed(imgs[0])), gb = gaussian_stats(emb->embed(imgs[1]));
    const double fd = frechet_distance(ga.mu, ga.cov, gb.mu, gb.cov);

    const json pa = arcs[0].meta.value("provenance", json::object());
    json j = {{"frechet", fd}, {"embedder", emb->name()}, {"n_a", imgs[0].dim(0)}, {"n_b", imgs[1].dim(0)}};
    if (arcs[0].meta.contains("checkpoint_step")) j["checkpoint_step"] = arcs[0].meta["checkpoint_step"];
    j["provenance"] = provenance("frechet", pa.value("config_hash", std::string()), pa.value("seed", std::uint64_t{0}),
                                 o.archives);
    if (pa.contains("run_id")) j["provenance"]["run_id"] = pa["run_id"];
    if (pa.contains("weights")) j["provenance"]["weights"] = pa["weights"];
    std::string path = o.report;
    if (path.empty()) {
        const std::string base = pa.contains("run_id") ? run_dir(c, pa["run_id"].get<std::string>()) : c.out;
        path = base + "/reports/frechet_" + stem(o.archives[0]) + "__" + stem(o.archives[1]) + "_" + emb->name() +
               ".json";
        std::replace(path.begin() + std::ptrdiff_t(base.size()), path.end(), ':', '-');
    }
    write_json(path, j);
    out << "frechet " << plots::fmt(fd) << " (" << emb->name() << ", " << imgs[0].dim(0) << " vs " << imgs[1].dim(0)
        << " samples, " << path << ")\n";
}

struct ReportOpts {
    std::string provenance;
    std::string plot;
    std::vector<std::string> inputs;
    std::string key;
    std::string output;
};

void do_report(const Common& c, const ReportOpts& o, std::ostream& out) {
    if (!o.provenance.empty()) {
        const json chain = provenance_chain(o.provenance);
        if (chain.value("missing", false)) throw IoError("artifact not found: " + o.provenance);
        if (!o.output.empty()) write_json(o.output, chain);
        out << chain.dump(2) << "\n";
        return;
    }
    if (o.plot.empty()) throw ConfigError("give --provenance <artifact> or --plot <kind>", "report");
    const std::string svg = o.output.empty() ? c.out + "/plots/" + o.plot + ".svg" : o.output;
    emit_plot(o.plot, o.inputs, svg, o.key);
    out << "report: " << o.plot << " from " << o.inputs.size() << " input(s), " << svg << " and "
        << plots::sidecar_path(svg) << "\n";
}

void add_common(CLI::App* s, Common& c, bool config = true) {
    if (config) s->add_option("--config", c.config, "run config (JSON); defaults when omitted");
    s->add_option("--set", c.sets, "dotted-key override key=value (repeatable)")->allow_extra_args(false);
    s->add_option("--out", c.out, "output root (default $SDIFF_OUT or ./runs)");
    s->add_option("--seed", c.seed, "root seed (overrides the config)");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Diffusion training with self-conditioning and representation diagnostics", "sdiff"};
    app.require_subcommand(1);
    Common c;
    TrainOpts to;
    SampleOpts so;
    ProbeOpts po;
    ProfileOpts pf;
    CkaOpts co;
    FrechetOpts fo;
    ReportOpts ro;

    auto* train = app.add_subcommand("train", "train a model: checkpoints, metrics streams, loss plot");
    add_common(train, c);
    train->add_flag("--resume", to.resume, "continue from the latest checkpoint of this run");
    train->add_option("--profile", to.profile, "profile-layers report; trains with its selected tap layer");

    auto* samp = app.add_subcommand("sample", "draw samples from a checkpoint");
    add_common(samp, c, false);
    samp->add_option("--ckpt", so.ckpt, "checkpoint")->required();
    samp->add_option("--n", so.n, "number of samples");
    samp->add_flag("--student", so.student, "use the trained weights instead of the EMA");
    samp->add_option("--solver", so.solver, "solver override");
    samp->add_option("--steps", so.steps, "solver steps override");

    auto eval_common = [&](CLI::App* s) {
        add_common(s, c, false);
        s->add_option("--ckpt", po.ckpt, "checkpoint")->required();
        s->add_option("--t", po.t, "noise level (default: the formulation's probing time)");
        s->add_flag("--ema", po.ema, "evaluate the EMA weights");
    };
    auto* probe = app.add_subcommand("probe", "linear probe on one layer");
    eval_common(probe);
    probe->add_option("--layer", po.layer, "tap layer")->required();
    probe->add_option("--reduce", po.reduce, "pooled | cls");

    auto* sw = app.add_subcommand("sweep", "linear probes over layers x noise levels");
    eval_common(sw);
    sw->add_option("--layers", po.layers, "tap layers (default: all)")->delimiter(',');
    sw->add_option("--times", po.times, "noise levels (default: the probing time)")->delimiter(',');

    auto* dense = app.add_subcommand("dense-probe", "per-pixel linear probe, mIoU");
    eval_common(dense);
    dense->add_option("--layers", po.layers, "tap layers, concatenated")->required()->delimiter(',');
    dense->add_option("--upsample", po.upsample, "nearest | bilinear");

    auto* prof = app.add_subcommand("profile-layers", "rank self-conditioning tap layers by short runs");
    add_common(prof, c);
    prof->add_option("--candidates", pf.candidates, "candidate layers, e.g. 2,3,4,5")->required()->delimiter(',');
    prof->add_option("--epochs", pf.epochs, "epochs per short run");
    prof->add_option("--seeds", pf.seeds, "seeds averaged per candidate (default: the run seed)")->delimiter(',');
    prof->add_option("--workers", pf.workers, "concurrent runs");

    auto* cka = app.add_subcommand("cka", "linear CKA between layers of one or two checkpoints");
    add_common(cka, c, false);
    cka->add_option("--ckpt", co.ckpt, "checkpoint")->required();
    cka->add_option("--ckpt-b", co.ckpt_b, "second checkpoint (inter-model map)");
    cka->add_option("--layers", co.layers, "layers of the first model (default: all)")->delimiter(',');
    cka->add_option("--layers-b", co.layers_b, "layers of the second model (default: all)")->delimiter(',');
    cka->add_option("--t", co.t, "noise level");
    cka->add_option("--n", co.n, "images from the test split");
    cka->add_option("--reduce", co.reduce, "pooled | tokens | cls");
    cka->add_flag("--ema", co.ema, "use EMA weights");

    auto* fr = app.add_subcommand("frechet", "Frechet distance between two sample archives");
    add_common(fr, c, false);
    fr->add_option("archives", fo.archives, "two sample archives")->required()->expected(2);
    fr->add_option("--embedder", fo.embedder, "pixels | random<dim>[:seed]");
    fr->add_option("--n", fo.n, "use the first n samples of each archive");
    fr->add_option("--report", fo.report, "report path");

    auto* rep = app.add_subcommand("report", "provenance chains and figures from reports");
    add_common(rep, c, false);
    rep->add_option("--provenance", ro.provenance, "artifact whose provenance chain to print");
    rep->add_option("--plot", ro.plot, "loss_curves | layer_bars | cka_heatmap | metric_evolution");
    rep->add_option("--inputs", ro.inputs, "input reports or metrics streams");
    rep->add_option("--key", ro.key, "plotted field");
    rep->add_option("--output", ro.output, "output path");

    try {
        std::vector<std::string> rev(args.rbegin(), args.rend());
        app.parse(rev);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err) == 0 ? kOk : kUsage;
    }

    try {
        if (*train) do_train(c, to, out);
        else if (*samp) do_sample(c, so, out);
        else if (*probe) do_probe(c, po, out);
        else if (*sw) do_sweep(c, po, out);
        else if (*dense) do_dense(c, po, out);
        else if (*prof) do_profile(c, pf, out);
        else if (*cka) do_cka(c, co, out);
        else if (*fr) do_frechet(c, fo, out);
        else if (*rep) do_report(c, ro, out);
        return kOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << "\n";
        return kMissing;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return kNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kFailure;
    }
}

}  // namespace sdiff::cli
