#pragma once

// Two-phase training: supervised initialization on labeled images, then joint
// fine-tuning with the relation loss on pairs drawn from all training images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "losses.hpp"
#include "metrics.hpp"
#include "model.hpp"
#include "prm.hpp"
#include "synth.hpp"

namespace prs2 {

struct TrainConfig {
    double alpha = 1.0;
    double lr_phase1 = 1e-4;
    double lr_phase2 = 5e-5;
    std::size_t batch_seg = 5;
    std::size_t batch_pr = 10; // images, i.e. batch_pr / 2 pairs
    std::size_t epochs_phase1 = 30;
    std::size_t epochs_phase2 = 30;
    std::size_t steps_per_epoch = 0; // 0: ceil(|train| / batch_seg)
    std::size_t patience = 10;
    double validation_fraction = 0.2;
    LossToggles toggles{};
    Connectivity connectivity = Connectivity::Four;
    std::size_t opening_size = 3;
    bool augment = true;
    std::uint64_t seed = 0;

    void validate() const
    {
        if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0");
        if (!(validation_fraction > 0.0 && validation_fraction < 1.0)) {
            throw ConfigError("validation_fraction must lie in (0, 1)");
        }
        if (!(lr_phase1 > 0.0) || !(lr_phase2 > 0.0)) throw ConfigError("learning rates must be positive");
        if (batch_seg == 0) throw ConfigError("batch_seg must be positive");
        if (batch_pr < 2 || batch_pr % 2) throw ConfigError("batch_pr must be a positive even number of images");
        if (opening_size == 0) throw ConfigError("opening_size must be >= 1");
    }
};

struct StepRecord {
    std::size_t step = 0;
    int phase = 1;
    double l_ce = 0.0, l_dice = 0.0, l_objdice = 0.0, l_seg = 0.0, l_pr = 0.0, l_total = 0.0;
    double lr = 0.0;
    double alpha = 0.0;
    double encoder_grad_seg = 0.0; // encoder gradient norm from the segmentation path
    double encoder_grad_pr = 0.0;  // ... and from the relation path (already alpha-scaled)
};

struct EpochRecord {
    int phase = 1;
    std::size_t epoch = 0;
    double val_obj_dice = 0.0;
    bool improved = false;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    double best_val_obj_dice = -1.0;
    std::size_t best_epoch = 0;
};

inline nlohmann::json to_json(const StepRecord& r)
{
    return {{"type", "step"}, {"step", r.step},   {"phase", r.phase},       {"l_ce", r.l_ce},     {"l_dice", r.l_dice},
            {"l_objdice", r.l_objdice},           {"l_seg", r.l_seg},       {"l_pr", r.l_pr},     {"l_total", r.l_total},
            {"lr", r.lr},     {"alpha", r.alpha}, {"enc_grad_seg", r.encoder_grad_seg}, {"enc_grad_pr", r.encoder_grad_pr}};
}

inline nlohmann::json to_json(const EpochRecord& r)
{
    return {{"type", "epoch"}, {"phase", r.phase}, {"epoch", r.epoch}, {"val_obj_dice", r.val_obj_dice},
            {"improved", r.improved}};
}

/// Newline-delimited JSON, step and epoch records in chronological order.
inline void write_ndjson(std::ostream& os, const TrainLog& log)
{
    std::size_t e = 0;
    for (const auto& s : log.steps) {
        while (e < log.epochs.size() && (log.epochs[e].phase < s.phase)) os << to_json(log.epochs[e++]).dump() << '\n';
        os << to_json(s).dump() << '\n';
    }
    for (; e < log.epochs.size(); ++e) os << to_json(log.epochs[e]).dump() << '\n';
}

// ---------------------------------------------------------------- geometric transforms

enum class Flip { None, Horizontal, Vertical };

/// Dihedral transform: optional flip followed by `quarter_turns` clockwise
/// 90-degree rotations. Works on C x H x W tensors with H == W.
struct Transform {
    Flip flip = Flip::None;
    int quarter_turns = 0;

    Tensor apply(const Tensor& x) const
    {
        Tensor y = x;
        if (flip != Flip::None) y = flipped(y, flip);
        for (int i = 0; i < ((quarter_turns % 4) + 4) % 4; ++i) y = rotated(y);
        return y;
    }

    Tensor invert(const Tensor& y) const
    {
        Tensor x = y;
        for (int i = 0; i < (4 - ((quarter_turns % 4) + 4) % 4) % 4; ++i) x = rotated(x);
        if (flip != Flip::None) x = flipped(x, flip);
        return x;
    }

    InstanceMap apply(const InstanceMap& m) const
    {
        Tensor t({1, m.height(), m.width()});
        for (std::size_t i = 0; i < m.labels().size(); ++i) t[i] = m[i];
        const Tensor r = apply(t);
        LabelGrid g(r.extent(1), r.extent(2), 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<int>(r[i]);
        return InstanceMap::from_labels(g);
    }

    static Tensor flipped(const Tensor& x, Flip f)
    {
        const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
        Tensor y = Tensor::like(x);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t col = 0; col < w; ++col)
                    y(ch, r, col) = f == Flip::Horizontal ? x(ch, r, w - 1 - col) : x(ch, h - 1 - r, col);
        return y;
    }

    // clockwise: (r, c) -> (c, n - 1 - r)
    static Tensor rotated(const Tensor& x)
    {
        const std::size_t c = x.extent(0), h = x.extent(1), w = x.extent(2);
        if (h != w) throw DimensionError("rotation needs square images, got " + shape_string(x.shape()));
        Tensor y = Tensor::like(x);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t col = 0; col < w; ++col) y(ch, col, h - 1 - r) = x(ch, r, col);
        return y;
    }
};

/// The eight symmetries of the square.
inline std::vector<Transform> dihedral_group()
{
    std::vector<Transform> g;
    for (Flip f : {Flip::None, Flip::Horizontal})
        for (int q = 0; q < 4; ++q) g.push_back({f, q});
    return g;
}

enum class TtaRotation { HalfTurn, QuarterTurn };

/// Identity, horizontal flip, vertical flip and one rotation. With a half
/// turn the set is a group, so the average is exactly flip-equivariant.
inline std::vector<Transform> tta_transforms(TtaRotation rot = TtaRotation::HalfTurn)
{
    return {{Flip::None, 0}, {Flip::Horizontal, 0}, {Flip::Vertical, 0},
            {Flip::None, rot == TtaRotation::HalfTurn ? 2 : 1}};
}

/// Mean of inverse-transformed predictions over `transforms`.
template <class Predictor>
Tensor tta_average(Predictor&& predict, const Tensor& image, const std::vector<Transform>& transforms)
{
    Tensor acc;
    for (const Transform& t : transforms) {
        Tensor p = t.invert(predict(t.apply(image)));
        if (acc.size() == 0) acc = std::move(p);
        else acc += p;
    }
    acc *= 1.0 / static_cast<double>(transforms.size());
    return acc;
}

struct PostProcess {
    double threshold = 0.5;
    std::size_t opening_size = 3;
    Connectivity connectivity = Connectivity::Four;
};

/// Foreground channel > threshold, square opening, connected components.
inline InstanceMap probabilities_to_instances(const Tensor& probs, const PostProcess& pp = {})
{
    const std::size_t h = probs.extent(1), w = probs.extent(2);
    BinaryMask fg(h, w, 0);
    for (std::size_t i = 0; i < h * w; ++i) fg[i] = probs[h * w + i] > pp.threshold ? 1 : 0;
    if (pp.opening_size > 1) fg = morphological_opening(fg, pp.opening_size);
    return connected_components(fg, pp.connectivity);
}

template <class Predictor>
InstanceMap predict_tta(Predictor&& predict, const Tensor& image, const PostProcess& pp = {},
                        TtaRotation rot = TtaRotation::HalfTurn)
{
    return probabilities_to_instances(tta_average(predict, image, tta_transforms(rot)), pp);
}

inline InstanceMap predict_tta(const ToyModel& model, const Tensor& image, const PostProcess& pp = {},
                               TtaRotation rot = TtaRotation::HalfTurn)
{
    return predict_tta([&](const Tensor& x) { return model.predict(x); }, image, pp, rot);
}

// ---------------------------------------------------------------- evaluation

struct EvalOptions {
    bool tta = true;
    PostProcess post{};
    MetricOptions metrics{};
    bool touching_only = false;
};

inline MetricReport evaluate_model(const ToyModel& model, const std::vector<Sample>& samples, const EvalOptions& opt = {})
{
    std::vector<ImageMetrics> per_image;
    for (const Sample& s : samples) {
        if (opt.touching_only && !s.touching) continue;
        const InstanceMap pred = opt.tta ? predict_tta(model, s.image, opt.post)
                                         : probabilities_to_instances(model.predict(s.image), opt.post);
        per_image.push_back(evaluate_image("toy_" + std::to_string(s.id), pred, s.mask, opt.metrics));
    }
    return aggregate(std::move(per_image));
}

// ---------------------------------------------------------------- training

namespace detail {

struct TrainSplit {
    std::vector<const Sample*> train;
    std::vector<const Sample*> validation;
};

// Holds out round(fraction * n) labeled images (at least one when n >= 2).
inline TrainSplit split_validation(const std::vector<Sample>& labeled, double fraction, std::mt19937_64& rng)
{
    std::vector<const Sample*> order;
    for (const auto& s : labeled) order.push_back(&s);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
    if (order.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, order.size() - 1);
    else n_val = 0;
    TrainSplit s;
    s.validation.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
    s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
    return s;
}

inline Transform random_transform(std::mt19937_64& rng)
{
    const auto g = dihedral_group();
    return g[std::uniform_int_distribution<std::size_t>(0, g.size() - 1)(rng)];
}

inline double validation_score(const ToyModel& model, const std::vector<const Sample*>& val, const TrainConfig& cfg)
{
    if (val.empty()) return 0.0;
    EvalOptions opt;
    opt.tta = false;
    opt.post = {0.5, cfg.opening_size, cfg.connectivity};
    double total = 0.0;
    for (const Sample* s : val) {
        const InstanceMap pred = probabilities_to_instances(model.predict(s->image), opt.post);
        total += object_dice(pred, s->mask);
    }
    return total / static_cast<double>(val.size());
}

// Mean segmentation loss over a batch; parameter gradients are accumulated
// (already divided by the batch size).
inline LossBundle segmentation_batch(ToyModel& model, const std::vector<const Sample*>& batch, const TrainConfig& cfg,
                                     std::mt19937_64& rng)
{
    LossBundle mean;
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const Sample* s : batch) {
        Tensor image = s->image;
        InstanceMap mask = s->mask;
        if (cfg.augment) {
            const Transform t = random_transform(rng);
            image = t.apply(image);
            mask = t.apply(mask);
        }
        const SegmentationCache cache = model.segment(image);
        LossBundle b = segmentation_loss(cache.probs, mask, cfg.toggles, cfg.connectivity);
        mean.l_ce += b.l_ce * inv;
        mean.l_dice += b.l_dice * inv;
        mean.l_objdice += b.l_objdice * inv;
        model.segment_backward(cache, b.grads.at("probs") * inv);
    }
    mean.l_seg = mean.l_ce + mean.l_dice + mean.l_objdice;
    mean.l_total = mean.l_seg;
    return mean;
}

// Mean relation loss over `pairs` image pairs (detached targets), gradients
// scaled by `scale` and accumulated into the shared encoder.
inline double relation_batch(ToyModel& model, const std::vector<std::pair<const Tensor*, const Tensor*>>& pairs,
                             double scale)
{
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(pairs.size());
    for (const auto& [xa, xb] : pairs) {
        const EncoderCache ea = model.encode(*xa);
        const EncoderCache eb = model.encode(*xb);
        const FeaturePair fp{ea.features, eb.features};
        const RelationOutput out = pr_forward(fp);
        total += out.l_pr * inv;
        if (scale == 0.0) continue;
        const PairGradients g = pr_backward(out, fp);
        model.encode_backward(ea, g.f_a * (scale * inv));
        model.encode_backward(eb, g.f_b * (scale * inv));
    }
    return total;
}

inline std::vector<const Sample*> draw_batch(const std::vector<const Sample*>& pool, std::vector<std::size_t>& order,
                                             std::size_t& cursor, std::size_t size, std::mt19937_64& rng)
{
    std::vector<const Sample*> batch;
    while (batch.size() < size) {
        if (cursor >= order.size()) {
            std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        batch.push_back(pool[order[cursor++]]);
    }
    return batch;
}

} // namespace detail

struct TrainResult {
    ToyModel model;
    TrainLog log;
};

inline std::size_t steps_per_epoch(const TrainConfig& cfg, std::size_t n_train)
{
    if (cfg.steps_per_epoch) return cfg.steps_per_epoch;
    return std::max<std::size_t>(1, (n_train + cfg.batch_seg - 1) / cfg.batch_seg);
}

/// Supervised initialization on the labeled images. A `validation_fraction`
/// share is held out; the returned model is the one with the best
/// validation Obj-D (early stop after `patience` epochs without gain).
inline TrainResult train_phase1(ToyModel model, const std::vector<Sample>& labeled, const TrainConfig& cfg)
{
    cfg.validate();
    if (labeled.empty()) throw ConfigError("train_phase1: no labeled images");
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    const detail::TrainSplit split = detail::split_validation(labeled, cfg.validation_fraction, rng);

    TrainResult res{model, {}};
    Adam opt(cfg.lr_phase1);
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t spe = steps_per_epoch(cfg, split.train.size());

    ToyModel best = model;
    double best_score = detail::validation_score(model, split.validation, cfg);
    std::size_t since_best = 0, step = 0;
    res.log.epochs.push_back({1, 0, best_score, true});
    for (std::size_t epoch = 1; epoch <= cfg.epochs_phase1; ++epoch) {
        for (std::size_t s = 0; s < spe; ++s) {
            model.parameters().zero_grad();
            auto batch = detail::draw_batch(split.train, order, cursor, std::min(cfg.batch_seg, split.train.size()), rng);
            LossBundle b = detail::segmentation_batch(model, batch, cfg, rng);
            StepRecord rec{step++, 1, b.l_ce, b.l_dice, b.l_objdice, b.l_seg, 0.0, b.l_seg, opt.learning_rate(), 0.0,
                           model.parameters().grad_norm("enc."), 0.0};
            res.log.steps.push_back(rec);
            opt.step(model.parameters());
        }
        const double score = detail::validation_score(model, split.validation, cfg);
        const bool improved = score > best_score;
        res.log.epochs.push_back({1, epoch, score, improved});
        if (improved) {
            best_score = score;
            best = model;
            res.log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    res.log.best_val_obj_dice = best_score;
    res.model = split.validation.empty() ? model : best;
    return res;
}

/// Joint fine-tuning: each step takes a labeled batch for L_seg and
/// batch_pr / 2 image pairs drawn uniformly (with replacement) from all
/// training images for L_PR; the shared encoder receives both gradients.
inline TrainResult train_joint(ToyModel model, const ToyDataset& data, const TrainConfig& cfg)
{
    cfg.validate();
    if (data.labeled.empty()) throw ConfigError("train_joint: no labeled images");
    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    // same split as phase 1
    const detail::TrainSplit split = detail::split_validation(data.labeled, cfg.validation_fraction, rng);
    rng.seed(cfg.seed ^ 0xd1b54a32d192ed03ULL);

    std::vector<const Tensor*> pool;
    for (const Sample* s : split.train) pool.push_back(&s->image);
    for (const Sample& s : data.unlabeled) pool.push_back(&s.image);
    if (pool.size() < 2) throw ConfigError("train_joint: need at least two training images to form pairs");

    TrainResult res{model, {}};
    Adam opt(cfg.lr_phase2);
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    const std::size_t spe = steps_per_epoch(cfg, split.train.size());
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);

    ToyModel best = model;
    double best_score = detail::validation_score(model, split.validation, cfg);
    std::size_t since_best = 0, step = 0;
    res.log.epochs.push_back({2, 0, best_score, true});
    std::vector<Tensor> augmented(cfg.batch_pr);
    for (std::size_t epoch = 1; epoch <= cfg.epochs_phase2; ++epoch) {
        for (std::size_t s = 0; s < spe; ++s) {
            model.parameters().zero_grad();
            auto batch = detail::draw_batch(split.train, order, cursor, std::min(cfg.batch_seg, split.train.size()), rng);
            LossBundle seg = detail::segmentation_batch(model, batch, cfg, rng);
            const double enc_seg = model.parameters().grad_norm("enc.");

            std::vector<std::pair<const Tensor*, const Tensor*>> pairs;
            for (std::size_t k = 0; k + 1 < cfg.batch_pr; k += 2) {
                std::size_t a = pick(rng), b = pick(rng);
                while (b == a) b = pick(rng);
                augmented[k] = cfg.augment ? detail::random_transform(rng).apply(*pool[a]) : *pool[a];
                augmented[k + 1] = cfg.augment ? detail::random_transform(rng).apply(*pool[b]) : *pool[b];
                pairs.emplace_back(&augmented[k], &augmented[k + 1]);
            }
            ParameterStore before_pr = model.parameters();
            const double l_pr = detail::relation_batch(model, pairs, cfg.alpha);
            double enc_pr = 0.0;
            {
                double sq = 0.0;
                for (std::size_t k = 0; k < model.parameters().all().size(); ++k) {
                    const auto& p = model.parameters().all()[k];
                    if (!p.name.starts_with("enc.")) continue;
                    for (std::size_t i = 0; i < p.grad.size(); ++i) {
                        const double d = p.grad[i] - before_pr.all()[k].grad[i];
                        sq += d * d;
                    }
                }
                enc_pr = std::sqrt(sq);
            }
            const LossBundle total = total_loss(seg, l_pr, cfg.alpha);
            res.log.steps.push_back({step++, 2, total.l_ce, total.l_dice, total.l_objdice, total.l_seg, total.l_pr,
                                     total.l_total, opt.learning_rate(), cfg.alpha, enc_seg, enc_pr});
            opt.step(model.parameters());
        }
        const double score = detail::validation_score(model, split.validation, cfg);
        const bool improved = score > best_score;
        res.log.epochs.push_back({2, epoch, score, improved});
        if (improved) {
            best_score = score;
            best = model;
            res.log.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    res.log.best_val_obj_dice = best_score;
    res.model = split.validation.empty() ? model : best;
    return res;
}

// ---------------------------------------------------------------- ablation

struct AblationEntry {
    double fraction = 0.0;
    std::uint64_t seed = 0;
    double supervised_obj_dice = 0.0;
    double supervised_obj_f1 = 0.0;
    double joint_obj_dice = 0.0;
    double joint_obj_f1 = 0.0;
};

struct MeanSd {
    double mean = 0.0;
    double sd = 0.0;
};

inline MeanSd mean_sd(const std::vector<double>& v)
{
    MeanSd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() > 1) {
        for (double x : v) r.sd += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(r.sd / static_cast<double>(v.size() - 1));
    }
    return r;
}

struct AblationSummary {
    double fraction = 0.0;
    MeanSd supervised_obj_dice, supervised_obj_f1, joint_obj_dice, joint_obj_f1;
};

struct AblationReport {
    std::vector<AblationEntry> entries;
    std::vector<AblationSummary> summary; // one per fraction, input order
};

struct AblationOptions {
    std::size_t image_count = 80;
    std::uint64_t data_seed = 1;
    TrainConfig config{};
    /// Called after each (fraction, seed) run; may be empty.
    std::function<void(const AblationEntry&)> progress;
};

/// For each labeled fraction and seed: phase 1 alone (supervised S-Net) and
/// phase 1 followed by joint training with the remaining images unlabeled.
/// Both are scored with TTA on the shared test split.
inline AblationReport ablation_run(const std::vector<double>& fractions, const std::vector<std::uint64_t>& seeds,
                                   const AblationOptions& opt = {})
{
    const ToyDataset base = synth_generate(opt.image_count, opt.data_seed);
    for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw ConfigError("ablation fraction must lie in (0, 1]");
        if (std::llround(f * static_cast<double>(base.labeled.size())) < 1) {
            throw ConfigError("fraction " + std::to_string(f) + " yields no labeled image");
        }
    }
    AblationReport rep;
    EvalOptions eval;
    eval.post.opening_size = opt.config.opening_size;
    eval.post.connectivity = opt.config.connectivity;
    for (double f : fractions) {
        AblationSummary sum;
        sum.fraction = f;
        std::vector<double> sd, sf, jd, jf;
        for (std::uint64_t seed : seeds) {
            const ToyDataset data = with_labeled_fraction(base, f, seed);
            TrainConfig cfg = opt.config;
            cfg.seed = seed;
            const TrainResult p1 = train_phase1(ToyModel::create(seed), data.labeled, cfg);
            const MetricReport sup = evaluate_model(p1.model, data.test, eval);
            const TrainResult p2 = train_joint(p1.model, data, cfg);
            const MetricReport joint = evaluate_model(p2.model, data.test, eval);
            AblationEntry e{f, seed, sup.obj_dice, sup.obj_f1, joint.obj_dice, joint.obj_f1};
            rep.entries.push_back(e);
            if (opt.progress) opt.progress(e);
            sd.push_back(e.supervised_obj_dice);
            sf.push_back(e.supervised_obj_f1);
            jd.push_back(e.joint_obj_dice);
            jf.push_back(e.joint_obj_f1);
        }
        sum.supervised_obj_dice = mean_sd(sd);
        sum.supervised_obj_f1 = mean_sd(sf);
        sum.joint_obj_dice = mean_sd(jd);
        sum.joint_obj_f1 = mean_sd(jf);
        rep.summary.push_back(sum);
    }
    return rep;
}

} // namespace prs2
