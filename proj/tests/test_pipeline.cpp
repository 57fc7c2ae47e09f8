#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include <prs2/train.hpp>

using namespace prs2;

namespace {

TrainConfig small_config(std::uint64_t seed)
{
    TrainConfig c;
    c.seed = seed;
    c.epochs_phase1 = 2;
    c.epochs_phase2 = 2;
    c.steps_per_epoch = 2;
    c.batch_seg = 2;
    c.batch_pr = 4;
    return c;
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b)
{
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].id != b[i].id || !(a[i].image == b[i].image) || !(a[i].mask == b[i].mask) ||
            a[i].touching != b[i].touching)
            return false;
    }
    return true;
}

} // namespace

TEST(Synth, Deterministic)
{
    const ToyDataset a = synth_generate(12, 3), b = synth_generate(12, 3);
    EXPECT_TRUE(same_samples(a.labeled, b.labeled));
    EXPECT_TRUE(same_samples(a.test, b.test));
    const ToyDataset c = synth_generate(12, 4);
    EXPECT_FALSE(same_samples(a.labeled, c.labeled));
}

TEST(Synth, SamplesAreValid)
{
    const ToyDataset ds = synth_generate(24, 9);
    EXPECT_EQ(ds.test.size(), 6u);
    EXPECT_EQ(ds.labeled.size(), 18u);
    for (const auto* part : {&ds.labeled, &ds.test}) {
        for (const Sample& s : *part) {
            EXPECT_EQ(s.image.shape(), (Shape{1, 64, 64}));
            EXPECT_TRUE(s.mask.is_valid());
            EXPECT_GE(s.mask.count(), 1u);
            EXPECT_LE(s.mask.count(), 6u);
            for (double v : s.image.data()) {
                EXPECT_GE(v, 0.0);
                EXPECT_LE(v, 1.0);
            }
        }
    }
    EXPECT_THROW(synth_generate(3, 1), ConfigError);
}

TEST(Synth, TouchingPairsAreCommon)
{
    const auto samples = synth_samples(200, 17);
    const auto touching = std::count_if(samples.begin(), samples.end(), [](const Sample& s) { return s.touching; });
    EXPECT_GE(touching, 80);
}

TEST(Synth, NearTouchingGapIsOneOrTwoPixels)
{
    const auto samples = synth_samples(60, 23);
    std::size_t checked = 0;
    for (const Sample& s : samples) {
        if (!s.touching) continue;
        std::size_t best = 100;
        for (std::size_t i = 1; i <= s.mask.count(); ++i)
            for (std::size_t j = i + 1; j <= s.mask.count(); ++j)
                best = std::min(best, mask_gap(s.mask.instance_mask(int(i)), s.mask.instance_mask(int(j))));
        EXPECT_GE(best, 1u);
        EXPECT_LE(best, 2u);
        ++checked;
    }
    EXPECT_GT(checked, 0u);
}

TEST(Synth, LabeledFractionPartitions)
{
    const ToyDataset base = synth_generate(40, 2);
    const ToyDataset ds = with_labeled_fraction(base, 0.2, 5);
    EXPECT_EQ(ds.labeled.size(), 6u);
    EXPECT_EQ(ds.unlabeled.size(), 24u);
    std::set<std::size_t> ids;
    for (const auto* part : {&ds.labeled, &ds.unlabeled, &ds.test})
        for (const Sample& s : *part) EXPECT_TRUE(ids.insert(s.id).second) << "duplicate id " << s.id;
    EXPECT_EQ(ids.size(), 40u);
    EXPECT_THROW(with_labeled_fraction(base, 0.0, 1), ConfigError);
    EXPECT_THROW(with_labeled_fraction(base, 0.01, 1), ConfigError);
}

TEST(Model, EncoderStorageIsShared)
{
    ToyModel m = ToyModel::create(1);
    SegNet seg(m);
    PrNet pr(m);
    EXPECT_EQ(&seg.parameter("enc.conv1.weight"), &pr.parameter("enc.conv1.weight"));
    const Tensor x = synth_sample(1, 0).image;
    const Tensor before = pr.features(x);
    seg.parameter("enc.conv1.bias").value[0] += 0.5;
    EXPECT_FALSE(pr.features(x) == before);
    EXPECT_EQ(before.shape(), (Shape{16, 16, 16}));
    EXPECT_EQ(seg.predict(x).shape(), (Shape{2, 64, 64}));
}

TEST(Model, CheckpointRoundTrip)
{
    const ToyModel a = ToyModel::create(5);
    ToyModel b = ToyModel::create(6);
    EXPECT_FALSE(a.parameters() == b.parameters());
    std::stringstream ss;
    write_checkpoint(ss, a.parameters());
    read_checkpoint(ss, b.parameters());
    EXPECT_TRUE(a.parameters() == b.parameters());

    std::stringstream bad("XXXX\x01");
    EXPECT_THROW(read_checkpoint(bad, b.parameters()), FormatError);
    std::string bytes;
    {
        std::ostringstream os;
        write_checkpoint(os, a.parameters());
        bytes = os.str();
    }
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_checkpoint(truncated, b.parameters()), FormatError);
}

TEST(Model, SegmentationGradientMatchesFiniteDifferences)
{
    ToyModel m = ToyModel::create(3);
    const Sample s = synth_sample(2, 0);
    Tensor image({1, 16, 16});
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 0; c < 16; ++c) image(0, r, c) = s.image(0, r * 4, c * 4);
    LabelGrid g(16, 16, 0);
    for (std::size_t r = 4; r < 10; ++r)
        for (std::size_t c = 3; c < 9; ++c) g(r, c) = 1;
    const InstanceMap gt = InstanceMap::from_labels(g);
    auto loss = [&](ToyModel& mm) {
        return segmentation_loss(mm.predict(image), gt, LossToggles::ce_dice()).l_seg;
    };
    m.parameters().zero_grad();
    const auto cache = m.segment(image);
    m.segment_backward(cache, segmentation_loss(cache.probs, gt, LossToggles::ce_dice()).grads.at("probs"));
    const Parameter& p = m.parameters().at("dec.conv1.weight");
    for (std::size_t i = 0; i < 20; ++i) {
        ToyModel plus = m, minus = m;
        const double h = 1e-6;
        plus.parameters().at("dec.conv1.weight").value[i] += h;
        minus.parameters().at("dec.conv1.weight").value[i] -= h;
        const double fd = (loss(plus) - loss(minus)) / (2 * h);
        EXPECT_NEAR(p.grad[i], fd, 1e-6 + 1e-4 * std::abs(fd));
    }
}

TEST(Training, EmptyLabeledSetRejected)
{
    EXPECT_THROW(train_phase1(ToyModel::create(1), {}, small_config(1)), ConfigError);
    ToyDataset tiny = synth_generate(4, 1);
    tiny.labeled.resize(1);
    TrainConfig c = small_config(1);
    c.validation_fraction = 0.5;
    EXPECT_THROW(train_joint(ToyModel::create(1), tiny, c), ConfigError);
}

TEST(Training, ConfigValidation)
{
    TrainConfig c;
    c.alpha = -1;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.validation_fraction = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch_pr = 3;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, SingleSampleOverfits)
{
    const std::vector<Sample> one{synth_sample(4, 0)};
    TrainConfig c;
    c.lr_phase1 = 3e-3;
    c.epochs_phase1 = 500;
    c.steps_per_epoch = 1;
    c.batch_seg = 1;
    c.patience = 1000;
    c.augment = false;
    c.toggles = LossToggles::ce_dice();
    const TrainResult r = train_phase1(ToyModel::create(4), one, c);
    ASSERT_EQ(r.log.steps.size(), 500u);
    double best = 1e9;
    for (const auto& s : r.log.steps) best = std::min(best, s.l_seg);
    EXPECT_LT(best, 0.05);
}

TEST(Training, ValidationSplitIsDisjoint)
{
    const ToyDataset ds = synth_generate(20, 3);
    std::mt19937_64 rng(1);
    const auto split = detail::split_validation(ds.labeled, 0.2, rng);
    EXPECT_EQ(split.validation.size(), 3u);
    EXPECT_EQ(split.train.size() + split.validation.size(), ds.labeled.size());
    for (const Sample* v : split.validation)
        EXPECT_EQ(std::find(split.train.begin(), split.train.end(), v), split.train.end());
}

TEST(Training, JointLogIdentitiesAndBothEncoderPaths)
{
    const ToyDataset ds = with_labeled_fraction(synth_generate(24, 5), 0.5, 2);
    const TrainConfig c = small_config(2);
    const TrainResult p1 = train_phase1(ToyModel::create(2), ds.labeled, c);
    const TrainResult p2 = train_joint(p1.model, ds, c);
    ASSERT_FALSE(p2.log.steps.empty());
    for (const StepRecord& s : p2.log.steps) {
        EXPECT_EQ(s.phase, 2);
        EXPECT_NEAR(s.l_total, s.l_seg + s.alpha * s.l_pr, 1e-9);
        EXPECT_NEAR(s.l_seg, s.l_ce + s.l_dice + s.l_objdice, 1e-12);
        EXPECT_GT(s.l_pr, 0.0);
        EXPECT_GT(s.encoder_grad_seg, 0.0);
        EXPECT_GT(s.encoder_grad_pr, 0.0);
    }
}

TEST(Training, AlphaZeroIsSupervisedFineTuning)
{
    const ToyDataset ds = with_labeled_fraction(synth_generate(24, 5), 0.5, 2);
    TrainConfig c = small_config(3);
    c.alpha = 0.0;
    const TrainResult p2 = train_joint(ToyModel::create(3), ds, c);
    for (const StepRecord& s : p2.log.steps) {
        EXPECT_EQ(s.l_total, s.l_seg);
        EXPECT_EQ(s.encoder_grad_pr, 0.0);
    }
}

TEST(Training, BitReproducible)
{
    const ToyDataset ds = with_labeled_fraction(synth_generate(16, 7), 0.5, 1);
    const TrainConfig c = small_config(9);
    auto run = [&] {
        const TrainResult p1 = train_phase1(ToyModel::create(9), ds.labeled, c);
        return train_joint(p1.model, ds, c);
    };
    const TrainResult a = run(), b = run();
    EXPECT_TRUE(a.model.parameters() == b.model.parameters());
    std::ostringstream la, lb;
    write_ndjson(la, a.log);
    write_ndjson(lb, b.log);
    EXPECT_EQ(la.str(), lb.str());
}

TEST(Transforms, InverseRoundTrip)
{
    const Tensor x = synth_sample(3, 1).image;
    for (const Transform& t : dihedral_group()) EXPECT_EQ(t.invert(t.apply(x)), x);
}

TEST(Tta, EquivariantPredictorIsUnchanged)
{
    // a pixelwise predictor commutes with every transform
    auto pixelwise = [](const Tensor& x) {
        Tensor p({2, x.extent(1), x.extent(2)});
        const std::size_t n = x.extent(1) * x.extent(2);
        for (std::size_t i = 0; i < n; ++i) {
            p[n + i] = x[i];
            p[i] = 1.0 - x[i];
        }
        return p;
    };
    const Tensor x = synth_sample(6, 0).image;
    const Tensor avg = tta_average(pixelwise, x, tta_transforms());
    const Tensor single = pixelwise(x);
    for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(avg[i], single[i], 1e-15);
}

TEST(Tta, SymmetricInputWithModel)
{
    // an image symmetric under every TTA transform; the averaged output is
    // then symmetric too, and equals the single prediction symmetrized
    Tensor x({1, 64, 64});
    for (std::size_t r = 0; r < 64; ++r)
        for (std::size_t c = 0; c < 64; ++c) {
            const double dr = double(r) - 31.5, dc = double(c) - 31.5;
            x(0, r, c) = (dr * dr / 400.0 + dc * dc / 150.0) < 1.0 ? 0.8 : 0.2;
        }
    const ToyModel m = ToyModel::create(8);
    auto predict = [&](const Tensor& v) { return m.predict(v); };
    const Tensor avg = tta_average(predict, x, tta_transforms());
    const Tensor single = m.predict(x);
    Tensor expected = Tensor::like(single);
    for (const Transform& t : tta_transforms()) expected += t.invert(single);
    expected *= 0.25;
    for (std::size_t i = 0; i < avg.size(); ++i) EXPECT_NEAR(avg[i], expected[i], 1e-12);
}

TEST(Tta, HorizontalFlipEquivariance)
{
    const ToyModel m = ToyModel::create(10);
    const Tensor x = synth_sample(10, 0).image;
    auto predict = [&](const Tensor& v) { return m.predict(v); };
    const Transform flip{Flip::Horizontal, 0};
    const Tensor a = flip.apply(tta_average(predict, x, tta_transforms()));
    const Tensor b = tta_average(predict, flip.apply(x), tta_transforms());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
    const InstanceMap pred = predict_tta(m, x);
    EXPECT_TRUE(pred.is_valid());
}

TEST(Ablation, BadFractionsRejected)
{
    AblationOptions opt;
    opt.image_count = 8;
    EXPECT_THROW(ablation_run({0.0}, {1}, opt), ConfigError);
    EXPECT_THROW(ablation_run({0.05}, {1}, opt), ConfigError);
    EXPECT_THROW(ablation_run({1.5}, {1}, opt), ConfigError);
}

TEST(Evaluation, TouchingSubset)
{
    const ToyDataset ds = synth_generate(16, 11);
    const ToyModel m = ToyModel::create(1);
    EvalOptions all, touch;
    all.tta = touch.tta = false;
    touch.touching_only = true;
    const std::size_t n_touch = static_cast<std::size_t>(
        std::count_if(ds.test.begin(), ds.test.end(), [](const Sample& s) { return s.touching; }));
    EXPECT_EQ(evaluate_model(m, ds.test, all).per_image.size(), ds.test.size());
    EXPECT_EQ(evaluate_model(m, ds.test, touch).per_image.size(), n_touch);
}
