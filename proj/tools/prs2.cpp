// prs2: evaluation, ranking, toy training, synthetic data and gradient checks.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <prs2/prs2.hpp>
#include <prs2/verify.hpp>

namespace fs = std::filesystem;
using namespace prs2;

namespace {

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- value parsing

double parse_double(const std::string& key, const std::string& v)
{
    std::size_t used = 0;
    double d = 0.0;
    try {
        d = std::stod(v, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != v.size()) throw ConfigFileError("bad value for " + key + ": '" + v + "'");
    return d;
}

std::size_t parse_size(const std::string& key, const std::string& v)
{
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) {
        throw ConfigFileError("bad value for " + key + ": '" + v + "' (expected a non-negative integer)");
    }
    try {
        return static_cast<std::size_t>(std::stoull(v));
    } catch (const std::exception&) {
        throw ConfigFileError("bad value for " + key + ": '" + v + "' (out of range)");
    }
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigFileError("bad value for " + key + ": '" + v + "' (expected true/false)");
}

Connectivity parse_connectivity(const std::string& key, const std::string& v)
{
    if (v == "4") return Connectivity::Four;
    if (v == "8") return Connectivity::Eight;
    throw ConfigFileError("bad value for " + key + ": '" + v + "' (expected 4 or 8)");
}

LossToggles parse_loss(const std::string& key, const std::string& v)
{
    LossToggles t{false, false, false};
    std::stringstream ss(v);
    std::string part;
    while (std::getline(ss, part, '+')) {
        part = trim(part);
        if (part == "ce") t.ce = true;
        else if (part == "dice") t.dice = true;
        else if (part == "objdice") t.objdice = true;
        else throw ConfigFileError("bad value for " + key + ": unknown loss term '" + part + "'");
    }
    if (!t.ce && !t.dice && !t.objdice) throw ConfigFileError(key + " enables no loss term");
    return t;
}

std::size_t thread_cap()
{
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("PRS2_THREADS")) {
        try {
            n = parse_size("PRS2_THREADS", env);
        } catch (const ConfigFileError& e) {
            throw UsageError(e.what());
        }
        if (n == 0) throw UsageError("PRS2_THREADS must be >= 1");
    }
    return n;
}

void ensure_dir(const fs::path& dir)
{
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create output directory " + dir.string());
}

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out)
{
    std::ofstream os(p, mode);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

// ---------------------------------------------------------------- evaluate

struct EvaluateArgs {
    std::string pred_dir, gt_dir, out_dir = "eval_out";
    std::string connectivity = "4";
    std::size_t opening = 0;
    double overlap_threshold = 0.5;
    std::string hausdorff = "boundary";
    bool skip_missing = false;
};

std::map<std::string, fs::path> images_by_stem(const fs::path& dir)
{
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !is_supported_image(entry.path())) continue;
        const std::string stem = entry.path().stem().string();
        if (auto [it, fresh] = out.emplace(stem, entry.path()); !fresh) {
            throw UsageError("ambiguous mask name '" + stem + "' in " + dir.string() + ": " + it->second.filename().string() +
                             " and " + entry.path().filename().string());
        }
    }
    return out;
}

int cmd_evaluate(const EvaluateArgs& a)
{
    MetricOptions mopt;
    mopt.overlap_threshold = a.overlap_threshold;
    if (a.hausdorff == "boundary") mopt.hausdorff_mode = HausdorffMode::Boundary;
    else if (a.hausdorff == "region") mopt.hausdorff_mode = HausdorffMode::Region;
    else throw UsageError("--hausdorff must be boundary or region");
    const Connectivity conn = parse_connectivity("--connectivity", a.connectivity);

    const auto preds = images_by_stem(a.pred_dir);
    const auto gts = images_by_stem(a.gt_dir);
    std::vector<std::string> missing;
    std::vector<std::string> names;
    for (const auto& [stem, _] : gts)
        if (preds.count(stem)) names.push_back(stem);
        else missing.push_back("no prediction for " + stem);
    for (const auto& [stem, _] : preds)
        if (!gts.count(stem)) missing.push_back("no ground truth for " + stem);
    if (!missing.empty()) {
        for (const auto& m : missing) std::cerr << (a.skip_missing ? "warning: " : "error: ") << m << '\n';
        if (!a.skip_missing) throw UsageError(std::to_string(missing.size()) + " unpaired file(s); use --skip-missing to ignore");
    }
    if (names.empty()) throw UsageError("no paired masks found");

    // per-image work in parallel; results land in filename order
    std::vector<ImageMetrics> results(names.size());
    std::vector<std::exception_ptr> errors(names.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i; (i = next++) < names.size();) {
            try {
                const InstanceMap gt = load_instance_mask(gts.at(names[i]), {conn, 0});
                const InstanceMap pred = load_instance_mask(preds.at(names[i]), {conn, a.opening});
                results[i] = evaluate_image(names[i], pred, gt, mopt);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    const std::size_t n_threads = std::min(thread_cap(), names.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    const MetricReport rep = aggregate(std::move(results));
    ensure_dir(a.out_dir);
    nlohmann::json j = to_json(rep);
    j["options"] = {{"connectivity", a.connectivity == "8" ? 8 : 4},
                    {"opening", a.opening},
                    {"overlap_threshold", a.overlap_threshold},
                    {"hausdorff", a.hausdorff}};
    open_out(fs::path(a.out_dir) / "metrics.json") << j.dump(2) << '\n';
    auto csv = open_out(fs::path(a.out_dir) / "metrics.csv");
    write_csv(csv, rep);
    std::cout << "images " << rep.per_image.size() << "  obj_dice " << rep.obj_dice << "  obj_f1 " << rep.obj_f1
              << "  obj_hausdorff " << rep.obj_hausdorff << '\n';
    return 0;
}

// ---------------------------------------------------------------- rank

int cmd_rank(const std::string& input, const std::string& output)
{
    std::ifstream is(input);
    if (!is) throw IoError("cannot open " + input);
    const auto scores = parse_scores_csv(is, {"obj_d", "obj_f", "obj_h"}, input);
    const RankTable table = rank_sum_objects(scores);
    if (output.empty()) {
        write_csv(std::cout, table);
    } else {
        auto os = open_out(output);
        write_csv(os, table);
    }
    return 0;
}

// ---------------------------------------------------------------- train-toy

struct ToyRunConfig {
    TrainConfig train{};
    std::size_t count = 80;
    std::uint64_t data_seed = 1;
    double labeled_fraction = 1.0;
    TtaRotation tta_rotation = TtaRotation::HalfTurn;
};

const std::vector<std::pair<std::string, std::string>>& toy_keys()
{
    static const std::vector<std::pair<std::string, std::string>> keys{
        {"seed", "model, split and sampling seed"},
        {"data_seed", "synthetic dataset seed"},
        {"count", "synthetic images (a quarter become the test set)"},
        {"labeled_fraction", "fraction of training images kept labeled"},
        {"alpha", "relation loss weight"},
        {"lr_phase1", "learning rate, supervised initialization"},
        {"lr_phase2", "learning rate, joint fine-tuning"},
        {"batch_seg", "segmentation batch size"},
        {"batch_pr", "images per relation batch (even)"},
        {"epochs_phase1", "epochs, supervised initialization"},
        {"epochs_phase2", "epochs, joint fine-tuning"},
        {"steps_per_epoch", "optimizer steps per epoch (0: one pass over the labeled split)"},
        {"patience", "early-stopping patience in epochs"},
        {"validation_fraction", "labeled fraction held out for validation"},
        {"loss", "segmentation loss terms, e.g. ce+dice+objdice"},
        {"connectivity", "4 or 8"},
        {"opening", "square opening size applied before labeling"},
        {"augment", "random flips/rotations during training"},
        {"tta_rotation", "half or quarter"},
    };
    return keys;
}

void apply_key(ToyRunConfig& c, const std::string& k, const std::string& v)
{
    TrainConfig& t = c.train;
    if (k == "seed") t.seed = parse_size(k, v);
    else if (k == "data_seed") c.data_seed = parse_size(k, v);
    else if (k == "count") c.count = parse_size(k, v);
    else if (k == "labeled_fraction") c.labeled_fraction = parse_double(k, v);
    else if (k == "alpha") t.alpha = parse_double(k, v);
    else if (k == "lr_phase1") t.lr_phase1 = parse_double(k, v);
    else if (k == "lr_phase2") t.lr_phase2 = parse_double(k, v);
    else if (k == "batch_seg") t.batch_seg = parse_size(k, v);
    else if (k == "batch_pr") t.batch_pr = parse_size(k, v);
    else if (k == "epochs_phase1") t.epochs_phase1 = parse_size(k, v);
    else if (k == "epochs_phase2") t.epochs_phase2 = parse_size(k, v);
    else if (k == "steps_per_epoch") t.steps_per_epoch = parse_size(k, v);
    else if (k == "patience") t.patience = parse_size(k, v);
    else if (k == "validation_fraction") t.validation_fraction = parse_double(k, v);
    else if (k == "loss") t.toggles = parse_loss(k, v);
    else if (k == "connectivity") t.connectivity = parse_connectivity(k, v);
    else if (k == "opening") t.opening_size = parse_size(k, v);
    else if (k == "augment") t.augment = parse_bool(k, v);
    else if (k == "tta_rotation") {
        if (v == "half") c.tta_rotation = TtaRotation::HalfTurn;
        else if (v == "quarter") c.tta_rotation = TtaRotation::QuarterTurn;
        else throw ConfigFileError("bad value for tta_rotation: '" + v + "' (expected half or quarter)");
    } else {
        throw ConfigFileError("unknown key '" + k + "'");
    }
}

std::string describe(const ToyRunConfig& c)
{
    const TrainConfig& t = c.train;
    std::ostringstream os;
    os.precision(17);
    os << "seed=" << t.seed << "\ndata_seed=" << c.data_seed << "\ncount=" << c.count
       << "\nlabeled_fraction=" << c.labeled_fraction << "\nalpha=" << t.alpha << "\nlr_phase1=" << t.lr_phase1
       << "\nlr_phase2=" << t.lr_phase2 << "\nbatch_seg=" << t.batch_seg << "\nbatch_pr=" << t.batch_pr
       << "\nepochs_phase1=" << t.epochs_phase1 << "\nepochs_phase2=" << t.epochs_phase2
       << "\nsteps_per_epoch=" << t.steps_per_epoch << "\npatience=" << t.patience
       << "\nvalidation_fraction=" << t.validation_fraction << "\nloss=" << t.toggles.label()
       << "\nconnectivity=" << static_cast<int>(t.connectivity) << "\nopening=" << t.opening_size
       << "\naugment=" << (t.augment ? "true" : "false")
       << "\ntta_rotation=" << (c.tta_rotation == TtaRotation::HalfTurn ? "half" : "quarter") << '\n';
    return os.str();
}

void save_checkpoint(const fs::path& p, ToyModel& m)
{
    auto os = open_out(p, std::ios::binary);
    write_checkpoint(os, m.parameters());
    if (!os) throw IoError("write failed for " + p.string());
}

int cmd_train_toy(const std::string& config_path, const std::map<std::string, std::string>& overrides,
                  const std::string& out_dir)
{
    std::set<std::string> allowed;
    for (const auto& [k, _] : toy_keys()) allowed.insert(k);
    std::map<std::string, std::string> values;
    if (!config_path.empty()) values = read_key_value_file(config_path, allowed);
    for (const auto& [k, v] : overrides) values[k] = v;

    ToyRunConfig cfg;
    for (const auto& [k, v] : values) apply_key(cfg, k, v);
    cfg.train.validate();

    ensure_dir(out_dir);
    const fs::path out(out_dir);
    open_out(out / "config.txt") << describe(cfg);

    ToyDataset ds = synth_generate(cfg.count, cfg.data_seed);
    if (cfg.labeled_fraction < 1.0) ds = with_labeled_fraction(std::move(ds), cfg.labeled_fraction, cfg.train.seed);
    std::cout << "data: " << ds.labeled.size() << " labeled, " << ds.unlabeled.size() << " unlabeled, "
              << ds.test.size() << " test\n";

    TrainResult p1 = train_phase1(ToyModel::create(cfg.train.seed), ds.labeled, cfg.train);
    save_checkpoint(out / "phase1.ckpt", p1.model);
    std::cout << "phase 1: " << p1.log.steps.size() << " steps, best validation Obj-D " << p1.log.best_val_obj_dice
              << " (epoch " << p1.log.best_epoch << ")\n";

    TrainResult p2 = train_joint(p1.model, ds, cfg.train);
    save_checkpoint(out / "final.ckpt", p2.model);
    std::cout << "phase 2: " << p2.log.steps.size() << " steps, best validation Obj-D " << p2.log.best_val_obj_dice
              << " (epoch " << p2.log.best_epoch << ")\n";

    TrainLog log = p1.log;
    log.steps.insert(log.steps.end(), p2.log.steps.begin(), p2.log.steps.end());
    log.epochs.insert(log.epochs.end(), p2.log.epochs.begin(), p2.log.epochs.end());
    {
        auto os = open_out(out / "train_log.ndjson");
        write_ndjson(os, log);
    }

    EvalOptions eval;
    eval.post = {0.5, cfg.train.opening_size, cfg.train.connectivity};
    auto scored = [&](const ToyModel& m) {
        MetricReport all, touching;
        std::vector<ImageMetrics> images, touch_images;
        for (const Sample& s : ds.test) {
            const InstanceMap pred = predict_tta(m, s.image, eval.post, cfg.tta_rotation);
            ImageMetrics im = evaluate_image("toy_" + std::to_string(s.id), pred, s.mask, eval.metrics);
            if (s.touching) touch_images.push_back(im);
            images.push_back(std::move(im));
        }
        return std::pair{aggregate(std::move(images)), aggregate(std::move(touch_images))};
    };
    const auto [sup, sup_touch] = scored(p1.model);
    const auto [joint, joint_touch] = scored(p2.model);
    auto brief = [](const MetricReport& r) {
        return nlohmann::json{{"obj_dice", r.obj_dice},
                              {"obj_f1", r.obj_f1},
                              {"obj_hausdorff", std::isfinite(r.obj_hausdorff) ? nlohmann::json(r.obj_hausdorff)
                                                                               : nlohmann::json(nullptr)},
                              {"images", r.per_image.size()}};
    };
    nlohmann::json j{{"supervised", brief(sup)},
                     {"supervised_touching", brief(sup_touch)},
                     {"prs2", to_json(joint)},
                     {"prs2_touching", brief(joint_touch)}};
    open_out(out / "test_metrics.json") << j.dump(2) << '\n';
    std::cout << "test (TTA): supervised Obj-D " << sup.obj_dice << ", PRS2 Obj-D " << joint.obj_dice << ", Obj-F "
              << joint.obj_f1 << ", Obj-H " << joint.obj_hausdorff << '\n';
    return 0;
}

// ---------------------------------------------------------------- synth

int cmd_synth(std::size_t count, std::uint64_t seed, const std::string& out_dir, const std::string& format)
{
    if (format != "png" && format != "pgm") throw UsageError("--format must be png or pgm");
    if (count == 0) throw UsageError("--count must be positive");
    const fs::path out(out_dir);
    ensure_dir(out / "images");
    ensure_dir(out / "masks");
    auto manifest = open_out(out / "manifest.csv");
    manifest << "name,instances,touching\n";
    for (std::size_t i = 0; i < count; ++i) {
        const Sample s = synth_sample(seed, i);
        char name[32];
        std::snprintf(name, sizeof name, "toy_%04zu", i);
        const std::string file = std::string(name) + "." + format;
        write_gray(out / "images" / file, tensor_to_gray(s.image));
        write_gray(out / "masks" / file, instances_to_gray(s.mask));
        manifest << name << ',' << s.mask.count() << ',' << (s.touching ? 1 : 0) << '\n';
    }
    std::cout << "wrote " << count << " image/mask pairs to " << out.string() << '\n';
    return 0;
}

// ---------------------------------------------------------------- prm-check

int cmd_prm_check(std::uint64_t seed, std::size_t trials, const std::string& out_dir)
{
    bool ok = true;
    double worst = 0.0;
    const auto suites = run_gradient_suites(seed, trials);
    for (const auto& s : suites) {
        std::cout << (s.passed ? "PASS " : "FAIL ") << s.name << "  max rel err " << s.max_rel_error;
        if (!s.passed) std::cout << "  (" << s.detail << ')';
        std::cout << '\n';
        ok = ok && s.passed;
        worst = std::max(worst, s.max_rel_error);
    }
    for (const auto& p : prm_invariants(seed, trials)) {
        std::cout << (p.passed ? "PASS " : "FAIL ") << p.name;
        if (!p.passed) std::cout << "  (" << p.detail << ')';
        std::cout << '\n';
        ok = ok && p.passed;
    }

    // attention summaries for a pair of synthetic images through an untrained encoder
    const fs::path out(out_dir);
    ensure_dir(out);
    const ToyModel model = ToyModel::create(seed);
    const Sample a = synth_sample(seed, 0), b = synth_sample(seed, 1);
    const FeaturePair pair{model.encode(a.image).features, model.encode(b.image).features};
    const RelationOutput rel = pr_forward(pair);
    const std::vector<std::pair<std::string, const Tensor*>> exports{
        {"toy_0000_sigma_f", &pair.f_a}, {"toy_0000_sigma_ftilde", &rel.f_tilde_a},
        {"toy_0001_sigma_f", &pair.f_b}, {"toy_0001_sigma_ftilde", &rel.f_tilde_b}};
    for (const auto& [name, t] : exports) {
        const AttentionSummary s = export_attention_summary(*t);
        write_gray(out / (name + ".pgm"), to_gray(s.image));
        if (s.degenerate) std::cout << "note: " << name << " is constant\n";
    }

    if (!ok) {
        std::cout << "verification FAILED\n";
        return 1;
    }
    std::cout << "all " << suites.size() << " gradient suites passed, max rel err < 1e-4 (observed " << worst << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"prs2: object-level gland segmentation metrics, losses and a toy semi-supervised pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "prs2 0.1.0");

    EvaluateArgs ev;
    auto* evaluate = app.add_subcommand("evaluate", "Score predicted instance masks against ground truth");
    evaluate->add_option("--pred", ev.pred_dir, "Directory of predicted masks")->required();
    evaluate->add_option("--gt", ev.gt_dir, "Directory of ground-truth masks")->required();
    evaluate->add_option("--out", ev.out_dir, "Output directory for metrics.json / metrics.csv")->capture_default_str();
    evaluate->add_option("--connectivity", ev.connectivity, "Labeling connectivity for binary masks")
        ->check(CLI::IsMember({"4", "8"}))
        ->capture_default_str();
    evaluate->add_option("--opening", ev.opening, "Square opening applied to predictions before labeling (0: none)")
        ->capture_default_str();
    evaluate->add_option("--overlap-threshold", ev.overlap_threshold, "Obj-F overlap fraction of the GT object")
        ->capture_default_str();
    evaluate->add_option("--hausdorff", ev.hausdorff, "Hausdorff point sets")
        ->check(CLI::IsMember({"boundary", "region"}))
        ->capture_default_str();
    evaluate->add_flag("--skip-missing", ev.skip_missing, "Warn about unpaired files instead of aborting");

    std::string rank_in, rank_out;
    auto* rank = app.add_subcommand("rank", "Competition ranks and rank sums from a model,obj_d,obj_f,obj_h CSV");
    rank->add_option("csv", rank_in, "Input CSV")->required();
    rank->add_option("--out", rank_out, "Output CSV (default: stdout)");

    std::string config_path, train_out = "toy_run";
    std::map<std::string, std::string> flag_values;
    std::map<std::string, CLI::Option*> flag_options;
    auto* train = app.add_subcommand("train-toy", "Two-phase training on synthetic glands");
    train->add_option("--config", config_path, "key=value configuration file");
    train->add_option("--out", train_out, "Output directory")->capture_default_str();
    {
        const ToyRunConfig defaults;
        std::map<std::string, std::string> shown;
        std::istringstream lines(describe(defaults));
        for (std::string line; std::getline(lines, line);) {
            const auto eq = line.find('=');
            shown[line.substr(0, eq)] = line.substr(eq + 1);
        }
        for (const auto& [key, help] : toy_keys()) {
            std::string flag = "--" + key;
            std::replace(flag.begin(), flag.end(), '_', '-');
            flag_options[key] = train->add_option(flag, flag_values[key], help + " [default: " + shown[key] + "]");
        }
    }

    std::size_t synth_count = 60;
    std::uint64_t synth_seed = 1;
    std::string synth_out = "synth", synth_format = "png";
    auto* synth = app.add_subcommand("synth", "Write synthetic image/mask pairs");
    synth->add_option("--count", synth_count, "Number of samples")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Dataset seed")->capture_default_str();
    synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
    synth->add_option("--format", synth_format, "png or pgm")->capture_default_str();

    std::uint64_t check_seed = 7;
    std::size_t check_trials = 20;
    std::string check_out = "prm_check";
    auto* check = app.add_subcommand("prm-check", "Finite-difference gradient suites and relation-module invariants");
    check->add_option("--seed", check_seed, "Seed")->capture_default_str();
    check->add_option("--trials", check_trials, "Random trials per suite")->capture_default_str();
    check->add_option("--out", check_out, "Directory for attention summaries")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*evaluate) return cmd_evaluate(ev);
        if (*rank) return cmd_rank(rank_in, rank_out);
        if (*train) {
            std::map<std::string, std::string> overrides;
            for (const auto& [key, opt] : flag_options)
                if (opt->count() > 0) overrides[key] = flag_values[key];
            return cmd_train_toy(config_path, overrides, train_out);
        }
        if (*synth) return cmd_synth(synth_count, synth_seed, synth_out, synth_format);
        if (*check) return cmd_prm_check(check_seed, check_trials, check_out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigFileError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return 2;
    } catch (const ImageFormatError& e) {
        std::cerr << "format error: " << e.what() << '\n';
        return 1;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
