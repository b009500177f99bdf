#include "sdiff/profiler.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace sdiff {

int ProfileReport::selected() const {
    if (ranking.empty()) throw NumericError("every profiled candidate failed");
    return ranking.front().layer;
}

nlohmann::json ProfileReport::to_json() const {
    auto row = [](const CandidateResult& c) {
        nlohmann::json j = {{"layer", c.layer}, {"mean_loss", c.mean_loss}, {"seed_losses", c.seed_losses}};
        if (c.failed) j["note"] = c.note;
        return j;
    };
    nlohmann::json j;
    j["ranking"] = nlohmann::json::array();
    for (const auto& c : ranking) j["ranking"].push_back(row(c));
    j["failed"] = nlohmann::json::array();
    for (const auto& c : failed) j["failed"].push_back(row(c));
    j["seeds"] = seeds;
    j["short_epochs"] = short_epochs;
    j["steps_per_run"] = steps_per_run;
    j["config_hash"] = config_hash;
    if (!ranking.empty()) j["selected"] = ranking.front().layer;
    return j;
}

std::string ProfileReport::to_text() const {
    std::ostringstream o;
    o << "# rank layer mean_loss";
    for (auto s : seeds) o << " seed" << s;
    o << "\n";
    char buf[64];
    int rank = 1;
    for (const auto& c : ranking) {
        o << rank++ << ' ' << c.layer;
        std::snprintf(buf, sizeof buf, " %.6f", c.mean_loss);
        o << buf;
        for (double l : c.seed_losses) {
            std::snprintf(buf, sizeof buf, " %.6f", l);
            o << buf;
        }
        o << "\n";
    }
    for (const auto& c : failed) o << "- " << c.layer << " failed: " << c.note << "\n";
    if (!ranking.empty()) o << "selected " << ranking.front().layer << "\n";
    return o.str();
}

ProfileReport rank_candidates(std::vector<CandidateResult> results) {
    ProfileReport r;
    for (auto& c : results) {
        if (!c.failed && !std::isfinite(c.mean_loss)) {
            c.failed = true;
            if (c.note.empty()) c.note = "non-finite loss";
        }
        (c.failed ? r.failed : r.ranking).push_back(std::move(c));
    }
    auto by = [](const CandidateResult& a, const CandidateResult& b) {
        return a.mean_loss != b.mean_loss ? a.mean_loss < b.mean_loss : a.layer < b.layer;
    };
    std::sort(r.ranking.begin(), r.ranking.end(), by);
    std::sort(r.failed.begin(), r.failed.end(), [](const auto& a, const auto& b) { return a.layer < b.layer; });
    return r;
}

double final_window_loss(const std::vector<StepRecord>& records, std::int64_t window) {
    double sum = 0;
    std::int64_t n = 0;
    const std::int64_t start = std::max<std::int64_t>(0, static_cast<std::int64_t>(records.size()) - window);
    for (auto i = static_cast<std::size_t>(start); i < records.size(); ++i) {
        if (records[i].skipped) continue;
        sum += records[i].loss;
        ++n;
    }
    return n ? sum / double(n) : std::nan("");
}

ProfileReport profile_layers(const RunConfig& base, const ImageDataset& train, const ProfileOptions& opt) {
    if (opt.candidates.empty()) throw ConfigError("no candidate layers", "candidates");
    if (opt.seeds.empty()) throw ConfigError("no seeds", "seeds");
    if (opt.short_epochs < 1) throw ConfigError("short_epochs must be >= 1", "short_epochs");
    if (base.selfcond.mode == SelfCondMode::off) throw ConfigError("profiling needs a self-conditioning mode", "selfcond.mode");

    const std::int64_t per_epoch = train.size() / base.train.batch_size;
    if (per_epoch < 1) throw ConfigError("dataset smaller than one batch", "train.batch_size");
    const std::int64_t steps = per_epoch * opt.short_epochs;

    // Validate every candidate up front so a bad layer fails fast with its field.
    for (int layer : opt.candidates) {
        RunConfig c = base;
        c.selfcond.tap_layer = layer;
        c.validate();
    }

    struct Job {
        std::size_t cand, seed;
    };
    std::vector<Job> jobs;
    for (std::size_t i = 0; i < opt.candidates.size(); ++i)
        for (std::size_t s = 0; s < opt.seeds.size(); ++s) jobs.push_back({i, s});

    std::vector<std::vector<double>> losses(opt.candidates.size(), std::vector<double>(opt.seeds.size()));
    std::vector<std::string> notes(opt.candidates.size());
    std::atomic<std::size_t> next{0};
    std::mutex note_mu;
    auto worker = [&] {
        for (std::size_t j; (j = next++) < jobs.size();) {
            const Job job = jobs[j];
            RunConfig c = base;
            c.selfcond.tap_layer = opt.candidates[job.cand];
            c.seed = opt.seeds[job.seed];
            c.train.steps = static_cast<int>(steps);
            c.train.epochs = 0;
            c.train.checkpoint_every = 0;
            double loss;
            try {
                Trainer t(c, train);
                t.run();
                loss = final_window_loss(t.records(), per_epoch);
            } catch (const NumericError& e) {
                loss = std::nan("");
                std::lock_guard<std::mutex> g(note_mu);
                notes[job.cand] = e.what();
            }
            losses[job.cand][job.seed] = loss;
        }
    };
    const int nw = std::max(1, std::min<int>(opt.workers, static_cast<int>(jobs.size())));
    std::vector<std::thread> pool;
    for (int w = 1; w < nw; ++w) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    std::vector<CandidateResult> results;
    for (std::size_t i = 0; i < opt.candidates.size(); ++i) {
        CandidateResult c;
        c.layer = opt.candidates[i];
        c.seed_losses = losses[i];
        double sum = 0;
        for (double l : losses[i]) sum += l;
        c.mean_loss = sum / double(losses[i].size());
        if (!std::isfinite(c.mean_loss)) {
            c.failed = true;
            c.note = notes[i].empty() ? "non-finite loss" : notes[i];
            std::cerr << "warning: candidate layer " << c.layer << " diverged (" << c.note << "); excluded\n";
        }
        results.push_back(std::move(c));
    }
    ProfileReport r = rank_candidates(std::move(results));
    r.seeds = opt.seeds;
    r.short_epochs = opt.short_epochs;
    r.steps_per_run = steps;
    r.config_hash = config_hash(base);
    return r;
}

}  // namespace sdiff
