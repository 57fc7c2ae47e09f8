#pragma once

// Small shared-encoder segmentation network, Adam, and the checkpoint format.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "tensor.hpp"

namespace prs2 {

struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

/// Flat, ordered parameter storage. Both network paths index into the same
/// storage, so there is exactly one copy of every encoder weight.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor value)
    {
        Tensor g = Tensor::like(value);
        params_.push_back({std::move(name), std::move(value), std::move(g)});
        return params_.back();
    }

    Parameter& at(std::string_view name)
    {
        for (auto& p : params_)
            if (p.name == name) return p;
        throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    }
    const Parameter& at(std::string_view name) const { return const_cast<ParameterStore*>(this)->at(name); }

    std::vector<Parameter>& all() noexcept { return params_; }
    const std::vector<Parameter>& all() const noexcept { return params_; }

    void zero_grad()
    {
        for (auto& p : params_) p.grad = Tensor::like(p.value);
    }

    double grad_norm(std::string_view prefix = {}) const
    {
        double s = 0.0;
        for (const auto& p : params_) {
            if (!std::string_view(p.name).starts_with(prefix)) continue;
            for (double g : p.grad.data()) s += g * g;
        }
        return std::sqrt(s);
    }

    friend bool operator==(const ParameterStore& a, const ParameterStore& b)
    {
        if (a.params_.size() != b.params_.size()) return false;
        for (std::size_t i = 0; i < a.params_.size(); ++i) {
            if (a.params_[i].name != b.params_[i].name || !(a.params_[i].value == b.params_[i].value)) return false;
        }
        return true;
    }

private:
    std::vector<Parameter> params_;
};

struct EncoderCache {
    Tensor input;
    Tensor z1, a1, z2, a2, z3;
    Tensor features; // relu(z3), 16 x 16 x 16 for a 64 x 64 input
};

struct SegmentationCache {
    EncoderCache enc;
    Tensor u1, z4, a4, u2;
    Tensor logits;
    Tensor probs; // 2 x H x W softmax over channels
};

/// Encoder: conv3x3 (1->8) / conv3x3 s2 (8->16) / conv3x3 s2 (16->16), ReLU
/// after each. Decoder: x2 nearest upsample + conv3x3 (16->8) + ReLU, x2
/// upsample + conv3x3 (8->2), softmax over channels.
class ToyModel {
public:
    static constexpr std::size_t kFeatureChannels = 16;

    static ToyModel create(std::uint64_t seed)
    {
        ToyModel m;
        std::mt19937_64 rng(seed);
        auto conv = [&](const std::string& name, std::size_t cout, std::size_t cin) {
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(cin * 9)));
            Tensor w({cout, cin, 3, 3});
            for (double& v : w.data()) v = dist(rng);
            m.params_.add(name + ".weight", std::move(w));
            m.params_.add(name + ".bias", Tensor({cout}, 0.0));
        };
        conv("enc.conv1", 8, 1);
        conv("enc.conv2", kFeatureChannels, 8);
        conv("enc.conv3", kFeatureChannels, kFeatureChannels);
        conv("dec.conv1", 8, kFeatureChannels);
        conv("dec.conv2", 2, 8);
        return m;
    }

    ParameterStore& parameters() noexcept { return params_; }
    const ParameterStore& parameters() const noexcept { return params_; }

    Kernel kernel(const std::string& layer) const
    {
        return {params_.at(layer + ".weight").value, params_.at(layer + ".bias").value};
    }

    EncoderCache encode(const Tensor& image) const
    {
        EncoderCache c;
        c.input = image;
        c.z1 = conv2d(image, kernel("enc.conv1"), {1, 1});
        c.a1 = relu(c.z1);
        c.z2 = conv2d(c.a1, kernel("enc.conv2"), {2, 1});
        c.a2 = relu(c.z2);
        c.z3 = conv2d(c.a2, kernel("enc.conv3"), {2, 1});
        c.features = relu(c.z3);
        return c;
    }

    /// Accumulates encoder parameter gradients for d loss / d features.
    void encode_backward(const EncoderCache& c, const Tensor& dfeatures)
    {
        Tensor d = relu_backward(c.z3, dfeatures);
        d = accumulate("enc.conv3", c.a2, {2, 1}, d);
        d = relu_backward(c.z2, d);
        d = accumulate("enc.conv2", c.a1, {2, 1}, d);
        d = relu_backward(c.z1, d);
        accumulate("enc.conv1", c.input, {1, 1}, d);
    }

    SegmentationCache segment(const Tensor& image) const
    {
        SegmentationCache c;
        c.enc = encode(image);
        c.u1 = upsample_nearest(c.enc.features, 2);
        c.z4 = conv2d(c.u1, kernel("dec.conv1"), {1, 1});
        c.a4 = relu(c.z4);
        c.u2 = upsample_nearest(c.a4, 2);
        c.logits = conv2d(c.u2, kernel("dec.conv2"), {1, 1});
        c.probs = softmax_axis(c.logits, 0);
        return c;
    }

    Tensor predict(const Tensor& image) const { return segment(image).probs; }

    /// Accumulates all parameter gradients for d loss / d probs.
    void segment_backward(const SegmentationCache& c, const Tensor& dprobs)
    {
        Tensor d = softmax_axis_backward(c.probs, dprobs, 0);
        d = accumulate("dec.conv2", c.u2, {1, 1}, d);
        d = upsample_nearest_backward(d, 2);
        d = relu_backward(c.z4, d);
        d = accumulate("dec.conv1", c.u1, {1, 1}, d);
        d = upsample_nearest_backward(d, 2);
        encode_backward(c.enc, d);
    }

private:
    Tensor accumulate(const std::string& layer, const Tensor& input, ConvGeometry g, const Tensor& dy)
    {
        ConvGradients grads = conv2d_backward(input, kernel(layer), g, dy);
        params_.at(layer + ".weight").grad += grads.weight;
        params_.at(layer + ".bias").grad += grads.bias;
        return std::move(grads.input);
    }

    ParameterStore params_;
};

/// Segmentation path (encoder + decoder) over a model's storage.
class SegNet {
public:
    explicit SegNet(ToyModel& m) : model_(&m) {}
    Tensor predict(const Tensor& image) const { return model_->predict(image); }
    Parameter& parameter(std::string_view name) { return model_->parameters().at(name); }

private:
    ToyModel* model_;
};

/// Relation path (encoder only) over the same storage.
class PrNet {
public:
    explicit PrNet(ToyModel& m) : model_(&m) {}
    Tensor features(const Tensor& image) const { return model_->encode(image).features; }
    Parameter& parameter(std::string_view name) { return model_->parameters().at(name); }

private:
    ToyModel* model_;
};

// ---------------------------------------------------------------- Adam

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
    }

    double learning_rate() const noexcept { return lr_; }

    void step(ParameterStore& store)
    {
        auto& params = store.all();
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.push_back(Tensor::like(p.value));
                v_.push_back(Tensor::like(p.value));
            }
        }
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params.size(); ++k) {
            auto& p = params[k];
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = p.grad[i];
                m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g;
                v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g * g;
                const double mhat = m_[k][i] / c1, vhat = v_[k][i] / c2;
                p.value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    std::vector<Tensor> m_, v_;
    std::uint64_t t_ = 0;
};

// ---------------------------------------------------------------- checkpoints

// Layout (little-endian):
//   "PRS2" | version u8 (=1) | blocks until EOF, each:
//   name_len u32 | name bytes | rank u32 | extents u64 x rank | values f64 x prod(extents)
inline constexpr char kCheckpointMagic[4] = {'P', 'R', 'S', '2'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

template <class T>
void put_le(std::ostream& os, T v)
{
    unsigned char buf[sizeof(T)];
    std::uint64_t bits = 0;
    if constexpr (std::is_floating_point_v<T>) std::memcpy(&bits, &v, sizeof(T));
    else bits = static_cast<std::uint64_t>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(bits >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
bool get_le(std::istream& is, T& v)
{
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    if constexpr (std::is_floating_point_v<T>) std::memcpy(&v, &bits, sizeof(T));
    else v = static_cast<T>(bits);
    return true;
}

} // namespace detail

inline void write_checkpoint(std::ostream& os, const ParameterStore& store)
{
    os.write(kCheckpointMagic, 4);
    detail::put_le<std::uint8_t>(os, kCheckpointVersion);
    for (const auto& p : store.all()) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
        os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(p.value.rank()));
        for (std::size_t e : p.value.shape()) detail::put_le<std::uint64_t>(os, e);
        for (double v : p.value.data()) detail::put_le<double>(os, v);
    }
}

/// Reads every block and overwrites the same-named parameters of `store`.
/// Unknown names and shape mismatches are format errors.
inline void read_checkpoint(std::istream& is, ParameterStore& store)
{
    char magic[4];
    std::uint8_t version = 0;
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
    if (!detail::get_le(is, version) || version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint32_t name_len = 0;
    while (detail::get_le(is, name_len)) {
        std::string name(name_len, '\0');
        std::uint32_t rank = 0;
        if (!is.read(name.data(), name_len) || !detail::get_le(is, rank)) throw FormatError("checkpoint: truncated block");
        Shape shape(rank);
        for (auto& e : shape)
            if (!detail::get_le(is, e)) throw FormatError("checkpoint: truncated shape of '" + name + "'");
        Tensor t(shape);
        for (double& v : t.data())
            if (!detail::get_le(is, v)) throw FormatError("checkpoint: truncated values of '" + name + "'");
        Parameter* p = nullptr;
        try {
            p = &store.at(name);
        } catch (const std::out_of_range&) {
            throw FormatError("checkpoint: unknown parameter '" + name + "'");
        }
        if (p->value.shape() != shape) {
            throw FormatError("checkpoint: '" + name + "' has shape " + shape_string(shape) + ", model expects " +
                              shape_string(p->value.shape()));
        }
        p->value = std::move(t);
    }
}

} // namespace prs2
