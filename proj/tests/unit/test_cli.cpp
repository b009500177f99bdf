#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "app.hpp"
#include "doctest.h"
#include "plots.hpp"
#include "sdiff/io/archive.hpp"

using namespace sdiff;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
    int code;
    std::string out, err;
};

Result invoke(std::vector<std::string> args) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    return {code, o.str(), e.str()};
}

std::string tmp(const std::string& name) {
    auto p = fs::temp_directory_path() / ("sdiff_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string tiny_config(const std::string& dir) {
    const json j = {{"seed", 3},
                    {"formulation", {{"kind", "rf"}}},
                    {"backbone",
                     {{"family", "dit"}, {"image_size", 16}, {"hidden", 16}, {"depth", 2}, {"heads", 2}, {"patch", 4},
                      {"freq_dim", 32}}},
                    {"optimizer", {{"lr", 1e-3}}},
                    {"train",
                     {{"batch_size", 8}, {"steps", 20}, {"log_every", 2}, {"checkpoint_every", 10},
                      {"dataset", "synthetic:shapes:96"}}},
                    {"sampler", {{"steps", 8}}},
                    {"eval", {{"holdout", 32}, {"probe_epochs", 3}}}};
    const std::string p = dir + "/tiny.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

std::string only_run_dir(const std::string& out) {
    std::vector<std::string> d;
    for (const auto& e : fs::directory_iterator(out))
        if (e.is_directory() && e.path().filename() != "plots") d.push_back(e.path().string());
    REQUIRE(d.size() == 1);
    return d[0];
}

std::string strip_metadata(std::string svg) {
    return std::regex_replace(svg, std::regex("<metadata>[^<]*</metadata>\n"), "");
}

}  // namespace

TEST_CASE("cli train twice gives byte-identical metrics streams") {
    const std::string d = tmp("det"), cfg = tiny_config(d);
    const auto a = invoke({"train", "--config", cfg, "--seed", "7", "--out", d + "/a"});
    const auto b = invoke({"train", "--config", cfg, "--seed", "7", "--out", d + "/b"});
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    const std::string ra = only_run_dir(d + "/a"), rb = only_run_dir(d + "/b");
    CHECK(fs::path(ra).filename() == fs::path(rb).filename());
    CHECK(fs::path(ra).filename().string().ends_with("-s7"));
    CHECK(slurp(ra + "/metrics.jsonl") == slurp(rb + "/metrics.jsonl"));
    CHECK(slurp(ra + "/checkpoints/final.sdar") == slurp(rb + "/checkpoints/final.sdar"));
    for (const char* f : {"config.json", "provenance.json", "plots/loss_curves.svg", "plots/loss_curves.csv",
                          "checkpoints/step_10.sdar"})
        CHECK(fs::exists(ra + "/" + f));
    // A different seed is a different run directory and a different stream.
    REQUIRE(invoke({"train", "--config", cfg, "--seed", "8", "--out", d + "/a"}).code == 0);
    CHECK(fs::exists(d + "/a/" + fs::path(ra).filename().string().substr(0, 16) + "-s7"));
}

TEST_CASE("cli resume after interruption replays the same streams") {
    const std::string d = tmp("resume"), cfg = tiny_config(d);
    REQUIRE(invoke({"train", "--config", cfg, "--out", d}).code == 0);
    const std::string r = only_run_dir(d);
    const std::string metrics = slurp(r + "/metrics.jsonl"), final_ckpt = slurp(r + "/checkpoints/final.sdar");
    // Simulate a crash after step 10: later checkpoints gone, a partial record left behind.
    fs::remove(r + "/checkpoints/final.sdar");
    fs::remove(r + "/checkpoints/step_20.sdar");
    std::ofstream(r + "/metrics.jsonl", std::ios::app) << "{\"step\": 12, \"loss\": 1e9}\n";
    const auto res = invoke({"train", "--config", cfg, "--out", d, "--resume"});
    REQUIRE(res.code == 0);
    CHECK(slurp(r + "/metrics.jsonl") == metrics);
    CHECK(slurp(r + "/checkpoints/final.sdar") == final_ckpt);
    CHECK(json::parse(slurp(r + "/provenance.json"))["resumed_from"].get<std::string>().ends_with("step_10.sdar"));

    // Resuming with a different config is refused.
    const auto bad = invoke({"train", "--config", cfg, "--out", d, "--resume", "--set", "optimizer.lr=0.5"});
    CHECK(bad.code == 3);  // different run id, so nothing to resume
}

TEST_CASE("cli eval verbs, frechet and provenance chain") {
    const std::string d = tmp("eval"), cfg = tiny_config(d);
    REQUIRE(invoke({"train", "--config", cfg, "--out", d}).code == 0);
    const std::string r = only_run_dir(d), ck = r + "/checkpoints/final.sdar";

    auto s = invoke({"sample", "--ckpt", ck, "--n", "8", "--out", d});
    REQUIRE(s.code == 0);
    const std::string samples = r + "/samples/final_ema_euler_rf8_n8.sdar";
    REQUIRE(fs::exists(samples));
    CHECK(fs::exists(r + "/samples/final_ema_euler_rf8_n8.ppm"));
    const Archive sa = Archive::load(samples);
    CHECK(sa.shape("images") == Shape{8, 3, 16, 16});
    CHECK(sa.meta["nfe"] == 8);

    SUBCASE("frechet on identical archives is exactly zero") {
        fs::copy_file(samples, d + "/copy.sdar");
        for (const char* emb : {"random64", "pixels"}) {
            const auto f = invoke({"frechet", samples, d + "/copy.sdar", "--embedder", emb, "--out", d,
                                "--report", d + "/fd.json"});
            REQUIRE(f.code == 0);
            CHECK(json::parse(slurp(d + "/fd.json"))["frechet"].get<double>() == 0.0);
            CHECK(f.out.rfind("frechet 0 ", 0) == 0);
        }
    }
    SUBCASE("probe and sweep reports feed layer_bars and metric_evolution") {
        REQUIRE(invoke({"probe", "--ckpt", ck, "--layer", "1", "--out", d}).code == 0);
        REQUIRE(invoke({"probe", "--ckpt", r + "/checkpoints/step_10.sdar", "--layer", "1", "--out", d}).code == 0);
        const json p = json::parse(slurp(r + "/reports/probe_L1_t0.25_final_student.json"));
        CHECK(p["checkpoint_step"] == 20);
        CHECK(p["t"] == 0.25);  // DiT under RF
        CHECK(p["provenance"]["config_hash"].get<std::string>().size() == 16);
        CHECK(p["provenance"]["code_version"].is_string());

        const auto sw = invoke({"sweep", "--ckpt", ck, "--layers", "1,2", "--times", "0.25,0.5", "--out", d});
        REQUIRE(sw.code == 0);
        const json j = json::parse(slurp(r + "/reports/sweep_final_student.json"));
        CHECK(j["grid"].size() == 2);
        CHECK(j["grid"][0].size() == 2);
        CHECK(fs::exists(r + "/plots/layer_bars_final_student.svg"));

        const auto ev = invoke({"report", "--plot", "metric_evolution", "--inputs",
                             r + "/reports/probe_L1_t0.25_step_10_student.json",
                             r + "/reports/probe_L1_t0.25_final_student.json", "--output", d + "/evo.svg"});
        REQUIRE(ev.code == 0);
        const std::string csv = slurp(d + "/evo.csv");
        CHECK(csv.find("\n10,") != std::string::npos);
        CHECK(csv.find("\n20,") != std::string::npos);

        // figure -> sweep report -> checkpoint -> dataset
        const auto pr = invoke({"report", "--provenance", r + "/plots/layer_bars_final_student.svg"});
        REQUIRE(pr.code == 0);
        const json chain = json::parse(pr.out);
        CHECK(chain["provenance"]["plot"] == "layer_bars");
        const json& rep = chain["inputs"][0];
        CHECK(rep["provenance"]["verb"] == "sweep");
        const json& ckpt = rep["inputs"][0];
        CHECK(ckpt["provenance"]["verb"] == "train");
        CHECK(ckpt["provenance"]["step"] == 20);
        CHECK(ckpt["inputs"][0]["ref"] == "synthetic:shapes:96");
    }
    SUBCASE("cka report renders a unit-diagonal heatmap") {
        REQUIRE(invoke({"cka", "--ckpt", ck, "--n", "24", "--out", d}).code == 0);
        const json j = json::parse(slurp(r + "/reports/cka_final_student_pooled_t0.25.json"));
        for (std::size_t i = 0; i < j["matrix"].size(); ++i)
            CHECK(j["matrix"][i][i].get<double>() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(fs::exists(r + "/plots/cka_final_student_pooled_t0.25.svg"));
        const std::string csv = slurp(r + "/plots/cka_final_student_pooled_t0.25.csv");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);  // header + 2 layers
    }
    SUBCASE("dense probe writes an mIoU report") {
        REQUIRE(invoke({"dense-probe", "--ckpt", ck, "--layers", "1,2", "--upsample", "nearest", "--out", d}).code == 0);
        const json j = json::parse(slurp(r + "/reports/dense_probe_L1-2_final_student.json"));
        CHECK(j["metric"] == "miou");
        CHECK(j["val"].get<double>() >= 0.0);
        CHECK(j["val"].get<double>() <= 1.0);
    }
}

TEST_CASE("cli loss_curves overlays streams with one table column each") {
    const std::string d = tmp("loss");
    fs::create_directories(d + "/runA");
    fs::create_directories(d + "/runB");
    std::ofstream(d + "/runA/metrics.jsonl") << "{\"step\":1,\"loss\":2.0,\"loss_diff\":2.0,\"skipped\":false}\n"
                                                "{\"step\":2,\"loss\":1.5,\"loss_diff\":1.5,\"skipped\":false}\n";
    std::ofstream(d + "/runB/metrics.jsonl") << "{\"step\":2,\"loss\":1.0,\"loss_diff\":0.9,\"skipped\":false}\n"
                                                "{\"step\":3,\"loss\":0.0,\"loss_diff\":0.0,\"skipped\":true}\n";
    const auto r = invoke({"report", "--plot", "loss_curves", "--inputs", d + "/runA/metrics.jsonl",
                        d + "/runB/metrics.jsonl", "--output", d + "/loss.svg"});
    REQUIRE(r.code == 0);
    CHECK(slurp(d + "/loss.csv") == "step,runA,runB\n1,2,\n2,1.5,0.9\n");
    CHECK(invoke({"report", "--plot", "loss_curves", "--key", "nope", "--inputs", d + "/runA/metrics.jsonl"}).code == 2);
}

TEST_CASE("cli layer_bars golden layout") {
    const std::string g = SDIFF_GOLDEN_DIR, d = tmp("golden");
    cli::emit_plot("layer_bars", {g + "/sweep_step100.json", g + "/sweep_step200.json"}, d + "/bars.svg");
    const std::string svg = slurp(d + "/bars.svg");
    CHECK(svg.find("<metadata>") != std::string::npos);
    CHECK(strip_metadata(svg) == slurp(g + "/layer_bars.svg"));
    CHECK(slurp(d + "/bars.csv") == slurp(g + "/layer_bars.csv"));

    // Independent of the golden bytes: 8 bars, heights proportional to the
    // best-time accuracies (t = 0.25 for both inputs).
    std::regex bar("<rect x=\"[0-9.]+\" y=\"[0-9.]+\" width=\"[0-9.]+\" height=\"([0-9.]+)\" fill=\"#");
    std::vector<double> h;
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), bar); it != std::sregex_iterator(); ++it)
        h.push_back(std::stod((*it)[1]));
    const std::vector<double> acc{0.5, 0.55, 0.625, 0.7, 0.75, 0.875, 0.5625, 0.6};  // layer-major
    REQUIRE(h.size() == acc.size() + 2);  // two legend swatches follow the bars
    for (std::size_t i = 1; i < acc.size(); ++i) CHECK(h[i] / h[0] == doctest::Approx(acc[i] / acc[0]).epsilon(0.01));
}

TEST_CASE("cli exit codes") {
    const std::string d = tmp("codes"), cfg = tiny_config(d);
    auto r = invoke({"train", "--config", cfg, "--set", "backbone.hiddn=4", "--out", d});
    CHECK(r.code == 2);
    CHECK(r.err.find("backbone.hiddn") != std::string::npos);
    r = invoke({"train", "--config", cfg, "--set", "train.batch_size=0", "--out", d});
    CHECK(r.code == 2);
    CHECK(r.err.find("train.batch_size") != std::string::npos);
    CHECK(invoke({"train", "--config", d + "/absent.json", "--out", d}).code == 3);
    CHECK(invoke({"probe", "--ckpt", d + "/absent.sdar", "--layer", "1", "--out", d}).code == 3);
    CHECK(invoke({"frechet", d + "/a.sdar", d + "/b.sdar"}).code == 3);
    CHECK(invoke({"report", "--plot", "layer_bars", "--out", d}).code == 2);  // empty report set
    CHECK(invoke({"report", "--plot", "pie", "--inputs", cfg, "--out", d}).code == 2);
    CHECK(invoke({"nonsense"}).code == 2);
    CHECK(invoke({"probe", "--layer", "1"}).code == 2);  // --ckpt required
    CHECK(invoke({"--help"}).code == 0);
    // Every step non-finite: the watchdog gives up.
    r = invoke({"train", "--config", cfg, "--set", "optimizer.lr=1e30", "--set", "train.nan_patience=1", "--out", d});
    CHECK(r.code == 4);

    // The installed binary maps the same way.
    const std::string cmd = std::string(SDIFF_CLI_PATH) + " report --plot layer_bars --out " + d + " 2>/dev/null";
    const int st = std::system(cmd.c_str());
    CHECK(WIFEXITED(st));
    CHECK(WEXITSTATUS(st) == 2);
}

TEST_CASE("cli profile-layers selects the planted layer") {
    const std::string d = tmp("profile");
    const json j = {{"seed", 0},
                    {"formulation", {{"kind", "rf"}}},
                    {"backbone",
                     {{"family", "dit"}, {"image_size", 16}, {"hidden", 32}, {"depth", 6}, {"heads", 2}, {"patch", 4},
                      {"freq_dim", 32}, {"planted_layer", 3}, {"planted_strength", 10}}},
                    {"selfcond", {{"mode", "adaptive"}, {"tap_layer", 3}}},
                    {"optimizer", {{"lr", 1e-3}}},
                    {"train", {{"batch_size", 16}, {"log_every", 1}, {"dataset", "synthetic:planted:384"}}},
                    {"eval", {{"holdout", 128}}}};
    std::ofstream(d + "/planted.json") << j.dump();
    const auto r = invoke({"profile-layers", "--config", d + "/planted.json", "--candidates", "2,3,4,5", "--epochs", "10",
                        "--out", d});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("selected layer 3") != std::string::npos);
    const std::string run = only_run_dir(d);
    const json rep = json::parse(slurp(run + "/reports/profile.json"));
    CHECK(rep["selected"] == 3);
    CHECK(rep["ranking"].size() == 4);
    CHECK(slurp(run + "/reports/profile.txt").find("selected 3") != std::string::npos);

    // The report drives training of the selected tap.
    const auto t = invoke({"train", "--config", d + "/planted.json", "--set", "selfcond.tap_layer=2", "--set",
                        "train.steps=2", "--profile", run + "/reports/profile.json", "--out", d + "/t"});
    REQUIRE(t.code == 0);
    const json c = json::parse(slurp(only_run_dir(d + "/t") + "/config.json"));
    CHECK(c["selfcond"]["tap_layer"] == 3);
}
