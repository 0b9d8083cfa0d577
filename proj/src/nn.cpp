#include "prem/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace prem {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw std::logic_error("duplicate parameter name: " + name);
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
}

std::size_t ParamStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

void ParamStore::copy_values_from(const ParamStore& other) {
    for (auto& [name, t] : params_) {
        const Tensor& src = other.get(name);
        if (src.shape() != t.shape()) throw ShapeError("parameter shape mismatch for " + name);
        auto dst = t.mutable_values();
        std::copy(src.values().begin(), src.values().end(), dst.begin());
    }
}

std::vector<double> Initializer::xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(count);
    for (auto& x : v) x = dist(rng_);
    return v;
}

std::vector<double> Initializer::normal(double stddev, std::size_t count) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(count);
    for (auto& x : v) x = dist(rng_);
    return v;
}

Linear Linear::create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                      Initializer& init, bool bias) {
    Linear l;
    l.weight = store.add(name + ".weight", Tensor::parameter({in, out}, init.xavier_uniform(in, out, in * out)));
    l.has_bias = bias;
    if (bias) l.bias = store.add(name + ".bias", Tensor::parameter({out}, std::vector<double>(out, 0.0)));
    return l;
}

Tensor Linear::operator()(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return has_bias ? add(y, bias) : y;
}

LayerNorm LayerNorm::create(ParamStore& store, const std::string& name, std::size_t dim) {
    LayerNorm n;
    n.gain = store.add(name + ".gain", Tensor::parameter({dim}, std::vector<double>(dim, 1.0)));
    n.bias = store.add(name + ".bias", Tensor::parameter({dim}, std::vector<double>(dim, 0.0)));
    return n;
}

AttentionWeights AttentionWeights::create(ParamStore& store, const std::string& name, std::size_t dim,
                                          Initializer& init) {
    // No key bias: it shifts every logit of a query row equally and softmax cancels it.
    return {Linear::create(store, name + ".wq", dim, dim, init),
            Linear::create(store, name + ".wk", dim, dim, init, false),
            Linear::create(store, name + ".wv", dim, dim, init), Linear::create(store, name + ".wo", dim, dim, init)};
}

Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, std::size_t heads,
                            const std::vector<bool>& mask, const AttentionWeights& weights) {
    const std::size_t dim = query.dim(1);
    if (heads == 0 || dim % heads != 0)
        throw ShapeError("hidden size " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                         " heads");
    if (key.dim(0) != value.dim(0)) throw ShapeError("attention key/value length mismatch");
    if (!mask.empty() && mask.size() != query.dim(0) * key.dim(0))
        throw ShapeError("attention mask must be Lq x Lk");
    const std::size_t head_dim = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

    Tensor q = weights.wq(query);
    Tensor k = weights.wk(key);
    Tensor v = weights.wv(value);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t b = h * head_dim, e = b + head_dim;
        Tensor qh = heads == 1 ? q : slice_cols(q, b, e);
        Tensor kh = heads == 1 ? k : slice_cols(k, b, e);
        Tensor vh = heads == 1 ? v : slice_cols(v, b, e);
        Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        outs.push_back(matmul(masked_softmax(scores, mask), vh));
    }
    Tensor merged = heads == 1 ? outs.front() : concat(outs, 1);
    return weights.wo(merged);
}

TransformerLayer TransformerLayer::create(ParamStore& store, const std::string& name, std::size_t dim,
                                          std::size_t intermediate, std::size_t heads, bool cross,
                                          Initializer& init) {
    if (heads == 0 || dim % heads != 0)
        throw ShapeError("hidden size " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                         " heads");
    TransformerLayer l;
    l.heads = heads;
    l.self_attn = AttentionWeights::create(store, name + ".self_attn", dim, init);
    l.norm_self = LayerNorm::create(store, name + ".norm_self", dim);
    l.has_cross = cross;
    if (cross) {
        l.cross_attn = AttentionWeights::create(store, name + ".cross_attn", dim, init);
        l.norm_cross = LayerNorm::create(store, name + ".norm_cross", dim);
    }
    l.ff_in = Linear::create(store, name + ".ff_in", dim, intermediate, init);
    l.ff_out = Linear::create(store, name + ".ff_out", intermediate, dim, init);
    l.norm_ff = LayerNorm::create(store, name + ".norm_ff", dim);
    return l;
}

Tensor TransformerLayer::operator()(const Tensor& x, const std::vector<bool>& self_mask) const {
    if (has_cross) throw std::logic_error("cross-attention layer needs a memory sequence");
    Tensor h = norm_self(add(x, multi_head_attention(x, x, x, heads, self_mask, self_attn)));
    return norm_ff(add(h, ff_out(relu(ff_in(h)))));
}

Tensor TransformerLayer::operator()(const Tensor& x, const Tensor& memory, const std::vector<bool>& self_mask) const {
    Tensor h = norm_self(add(x, multi_head_attention(x, x, x, heads, self_mask, self_attn)));
    if (has_cross) h = norm_cross(add(h, multi_head_attention(h, memory, memory, heads, {}, cross_attn)));
    return norm_ff(add(h, ff_out(relu(ff_in(h)))));
}

std::vector<bool> diagonal_mask(std::size_t length) {
    std::vector<bool> mask(length * length, true);
    for (std::size_t i = 0; i < length; ++i) mask[i * length + i] = false;
    return mask;
}

}  // namespace prem
