// Acceptance run: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `prs2_acceptance 1 3 5`.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <sys/wait.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <prs2/prs2.hpp>
#include <prs2/verify.hpp>

#include "oracles.hpp"

using namespace prs2;
namespace fs = std::filesystem;

#ifndef PRS2_CLI_PATH
#error "PRS2_CLI_PATH must name the prs2 executable"
#endif

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

std::string slurp(const fs::path& p)
{
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

int run_cli(const std::string& args, const fs::path& stdout_file)
{
    const std::string cmd = std::string("\"") + PRS2_CLI_PATH + "\" " + args + " >\"" + stdout_file.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch_dir(const std::string& name)
{
    const fs::path d = fs::temp_directory_path() / ("prs2_acceptance_" + name);
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

// ---------------------------------------------------------------- 1

struct TableRow {
    const char* model;
    double d, f, h;
    int rd, rf, rh, sum;
};

Outcome rank_sums()
{
    const std::vector<std::pair<std::string, std::vector<TableRow>>> tables{
        {"glas",
         {{"DCAN", 83.9, 81.4, 102.9, 8, 8, 8, 24},
          {"MILD-Net", 87.5, 87.9, 73.7, 6, 5, 6, 17},
          {"SADL", 87.3, 88.9, 76.7, 7, 3, 7, 17},
          {"Rota-Net", 88.4, 87.2, 68.4, 5, 6, 5, 16},
          {"FullNet", 88.5, 88.9, 63.0, 4, 3, 4, 11},
          {"DSE", 89.9, 89.4, 55.9, 2, 1, 2, 5},
          {"SS", 89.6, 86.9, 62.8, 3, 7, 3, 13},
          {"Ours", 90.6, 89.0, 55.1, 1, 2, 1, 4}}},
        {"crag",
         {{"DCAN", 79.4, 73.6, 218.8, 5, 5, 5, 15},
          {"MILD-Net", 87.5, 82.5, 160.1, 4, 3, 4, 11},
          {"DSE", 88.9, 83.5, 120.1, 2, 2, 2, 6},
          {"SS", 87.6, 81.6, 145.0, 3, 4, 3, 10},
          {"Ours", 89.2, 84.3, 113.1, 1, 1, 1, 3}}},
    };
    const fs::path dir = scratch_dir("rank");
    std::ostringstream sums;
    for (const auto& [name, rows] : tables) {
        std::ofstream csv(dir / (name + ".csv"));
        csv << "model,obj_d,obj_f,obj_h\n";
        for (const auto& r : rows) csv << r.model << ',' << r.d << ',' << r.f << ',' << r.h << '\n';
        csv.close();
        const fs::path out = dir / (name + "_ranks.csv");
        if (run_cli("rank " + (dir / (name + ".csv")).string() + " --out " + out.string(), dir / "log.txt") != 0) {
            return {false, "rank command failed: " + slurp(dir / "log.txt")};
        }
        std::istringstream lines(slurp(out));
        std::string line;
        std::getline(lines, line);
        std::vector<std::string> got;
        while (std::getline(lines, line)) got.push_back(line);
        if (got.size() != rows.size()) return {false, name + ": expected " + std::to_string(rows.size()) + " rows"};
        sums << name << ' ';
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::ostringstream want;
            const auto& r = rows[i];
            want << r.model << ',' << r.d << ',' << r.rd << ',' << r.f << ',' << r.rf << ',' << r.h << ',' << r.rh << ','
                 << r.sum;
            if (got[i] != want.str()) return {false, name + ": got '" + got[i] + "', expected '" + want.str() + "'"};
            sums << (i ? "/" : "") << r.sum;
        }
        sums << "; ";
    }
    fs::remove_all(dir);
    return {true, sums.str() + "all ranks exact, Obj-F tie at 88.9 ranked 3,3 then 5"};
}

// ---------------------------------------------------------------- 2

Outcome metric_identities()
{
    const auto samples = synth_samples(50, 2024);
    double worst_dice = 0.0, worst_h = 0.0, worst_f = 0.0;
    for (const Sample& s : samples) {
        worst_dice = std::max(worst_dice, std::abs(object_dice(s.mask, s.mask) - 1.0));
        worst_f = std::max(worst_f, std::abs(object_f1(s.mask, s.mask) - 1.0));
        worst_h = std::max(worst_h, std::abs(object_hausdorff(s.mask, s.mask)));
    }
    const bool ok = worst_dice <= 1e-12 && worst_f == 0.0 && worst_h == 0.0;
    std::ostringstream os;
    os << "50 maps; max |Obj-D - 1| " << worst_dice << ", max |Obj-F - 1| " << worst_f << ", max Obj-H " << worst_h;
    return {ok, os.str()};
}

// ---------------------------------------------------------------- 3

Outcome oracle_equivalence()
{
    std::mt19937_64 rng(31337);
    std::uniform_int_distribution<std::size_t> extent(3, 12);
    std::size_t cases = 0, hausdorff_cases = 0;
    std::map<std::string, std::size_t> mismatches{{"object_dice", 0},     {"object_f1", 0},
                                                  {"object_hausdorff", 0}, {"overlap_matrix", 0},
                                                  {"connected_components", 0}, {"morphological_opening", 0}};
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t h = extent(rng), w = extent(rng);
        const InstanceMap p = oracle::random_instances(h, w, rng, 3), g = oracle::random_instances(h, w, rng, 3);
        ++cases;
        if (object_dice(p, g) != oracle::object_dice(p, g)) ++mismatches["object_dice"];
        if (object_f1(p, g) != oracle::object_f1(p, g)) ++mismatches["object_f1"];
        if (!p.empty() && !g.empty()) {
            ++hausdorff_cases;
            if (object_hausdorff(p, g) != oracle::object_hausdorff(p, g)) ++mismatches["object_hausdorff"];
        }
        const OverlapMatrix o = overlap_matrix(p, g);
        const auto ref = oracle::overlaps(p, g);
        for (std::size_t i = 0; i < p.count(); ++i)
            for (std::size_t j = 0; j < g.count(); ++j)
                if (o(i, j) != ref[i][j]) {
                    ++mismatches["overlap_matrix"];
                    i = p.count();
                    break;
                }
        const BinaryMask m = oracle::random_mask(h, w, rng, 0.55);
        for (int conn : {4, 8})
            if (connected_components(m, static_cast<Connectivity>(conn)).labels() != oracle::flood_fill(m, conn))
                ++mismatches["connected_components"];
        for (int size : {2, 3})
            if (morphological_opening(m, size) != oracle::opening_by_placements(m, size))
                ++mismatches["morphological_opening"];
    }
    std::ostringstream os;
    os << cases << " random pairs (" << hausdorff_cases << " with Obj-H defined)";
    bool ok = hausdorff_cases >= 100;
    for (const auto& [name, n] : mismatches) {
        if (n) {
            ok = false;
            os << "; " << name << " mismatched " << n << " times";
        }
    }
    if (ok) os << "; all six operations match their oracles exactly";
    return {ok, os.str()};
}

// ---------------------------------------------------------------- 4

Outcome gradient_suites()
{
    const std::vector<std::string> names{"ce", "dice", "smooth_l1", "objdice", "pr_backward",
                                         "conv-input", "conv-weight", "conv-bias"};
    double worst = 0.0;
    std::string worst_name;
    std::ostringstream failures;
    for (const auto& name : names) {
        for (std::uint64_t seed = 1; seed <= 20; ++seed) {
            const SuiteResult r = run_gradient_suite(name, seed, 3);
            if (r.max_rel_error > worst) {
                worst = r.max_rel_error;
                worst_name = name;
            }
            if (!r.passed) failures << ' ' << name << "@seed" << seed << " (" << r.detail << ')';
        }
    }
    if (!failures.str().empty()) return {false, "failed:" + failures.str()};
    std::ostringstream os;
    os << names.size() << " suites x 20 seeds x 3 trials; max rel err " << std::scientific << std::setprecision(2)
       << worst << " (" << worst_name << ") < 1e-4";
    return {true, os.str()};
}

// ---------------------------------------------------------------- 5

Outcome prm_properties()
{
    std::ostringstream failures;
    std::size_t checked = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (const PropertyResult& p : prm_invariants(seed, 20)) {
            ++checked;
            if (!p.passed) failures << ' ' << p.name << "@seed" << seed << " (" << p.detail << ')';
        }
    }
    if (!failures.str().empty()) return {false, "failed:" + failures.str()};
    return {true, std::to_string(checked) +
                      " property checks (column sums, attention bounds, l_pr symmetry, 1x1 case) over 5 seeds"};
}

// ---------------------------------------------------------------- 6

Outcome loss_ablation()
{
    // Frozen protocol: 80 images (60 labeled), 30 epochs x 20 steps at lr 1e-4, seeds 1-3.
    const ToyDataset data = synth_generate(80, 1);
    const std::vector<LossToggles> variants{LossToggles::dice_only(), LossToggles::ce_only(), LossToggles::ce_dice(),
                                            LossToggles::full()};
    struct Means {
        double dice = 0, f1 = 0, touching_f1 = 0;
    };
    std::vector<Means> means(variants.size());
    const std::vector<std::uint64_t> seeds{1, 2, 3};
    EvalOptions all, touching;
    touching.touching_only = true;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        for (std::uint64_t seed : seeds) {
            TrainConfig cfg;
            cfg.seed = seed;
            cfg.toggles = variants[v];
            cfg.epochs_phase1 = 30;
            cfg.steps_per_epoch = 20;
            const TrainResult r = train_phase1(ToyModel::create(seed), data.labeled, cfg);
            const MetricReport rep = evaluate_model(r.model, data.test, all);
            const MetricReport touch = evaluate_model(r.model, data.test, touching);
            means[v].dice += rep.obj_dice / double(seeds.size());
            means[v].f1 += rep.obj_f1 / double(seeds.size());
            means[v].touching_f1 += touch.obj_f1 / double(seeds.size());
        }
    }
    const Means& full = means.back();
    const Means& ce_dice = means[2];
    bool ok = full.touching_f1 > ce_dice.touching_f1;
    std::ostringstream os;
    for (std::size_t v = 0; v < variants.size(); ++v) {
        ok = ok && full.dice >= means[v].dice;
        os << (v ? "; " : "") << variants[v].label() << " Obj-D " << fmt(means[v].dice) << " touching Obj-F "
           << fmt(means[v].touching_f1);
    }
    return {ok, os.str()};
}

// ---------------------------------------------------------------- 7

Outcome semi_supervised_trend()
{
    // Frozen protocol: 80 images, one pass over the labeled split per epoch,
    // 60 epochs per phase, seeds 1-3.
    AblationOptions opt;
    opt.config.steps_per_epoch = 0;
    opt.config.epochs_phase1 = 60;
    opt.config.epochs_phase2 = 60;
    const AblationReport rep = ablation_run({0.2, 0.5}, {1, 2, 3}, opt);
    const AblationSummary& lo = rep.summary[0];
    const AblationSummary& hi = rep.summary[1];
    const bool ok = lo.joint_obj_dice.mean >= lo.supervised_obj_dice.mean &&
                    hi.joint_obj_dice.mean >= hi.supervised_obj_dice.mean &&
                    hi.supervised_obj_dice.mean >= lo.supervised_obj_dice.mean &&
                    hi.joint_obj_dice.mean >= lo.joint_obj_dice.mean;
    std::ostringstream os;
    for (const auto& s : rep.summary) {
        os << (s.fraction == 0.2 ? "" : "; ") << int(s.fraction * 100) << "% labeled: supervised Obj-D "
           << fmt(s.supervised_obj_dice.mean) << " +- " << fmt(s.supervised_obj_dice.sd, 3) << ", joint Obj-D "
           << fmt(s.joint_obj_dice.mean) << " +- " << fmt(s.joint_obj_dice.sd, 3);
    }
    return {ok, os.str()};
}

// ---------------------------------------------------------------- 8

Outcome pipeline_determinism()
{
    const fs::path dir = scratch_dir("train");
    std::ofstream(dir / "run.cfg") << "seed=3\ncount=24\nlabeled_fraction=0.5\nepochs_phase1=2\nepochs_phase2=2\n"
                                      "steps_per_epoch=3\n";
    for (const char* run : {"a", "b"}) {
        if (run_cli("train-toy --config " + (dir / "run.cfg").string() + " --out " + (dir / run).string(),
                    dir / "log.txt") != 0) {
            return {false, std::string("train-toy run ") + run + " failed: " + slurp(dir / "log.txt")};
        }
    }
    std::ostringstream os;
    for (const char* f : {"phase1.ckpt", "final.ckpt", "train_log.ndjson", "test_metrics.json"}) {
        const std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
        if (a.empty() || a != b) return {false, std::string(f) + " differs between runs"};
        os << f << ' ' << a.size() << " B; ";
    }
    fs::remove_all(dir);
    return {true, os.str() + "byte-identical across two runs"};
}

} // namespace

int main(int argc, char** argv)
{
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"rank-sum reproduction", rank_sums},
        {"metric identities", metric_identities},
        {"oracle equivalence", oracle_equivalence},
        {"gradient suites", gradient_suites},
        {"PRM invariants", prm_properties},
        {"loss ablation", loss_ablation},
        {"semi-supervised trend", semi_supervised_trend},
        {"pipeline determinism", pipeline_determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int number = static_cast<int>(i + 1);
        if (!selected.empty() && !selected.count(number)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << (o.passed ? "PASS" : "FAIL") << " [" << number << "] " << criteria[i].first << ": " << o.detail
                  << " (" << fmt(secs, 1) << " s)" << std::endl;
        if (!o.passed) ++failures;
    }
    return failures ? 1 : 0;
}
