#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "prem/tensor.hpp"

namespace prem {

/// Named parameter registry. Names are dotted paths (`retriever.query_tf.attn.wq`);
/// iteration order is lexicographic, which fixes checkpoint and optimizer order.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor value);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    const std::map<std::string, Tensor>& all() const { return params_; }
    std::map<std::string, Tensor>& all() { return params_; }
    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;

    void zero_grad();
    /// Overwrite values (not storage) from another store with identical names/shapes.
    void copy_values_from(const ParamStore& other);

private:
    std::map<std::string, Tensor> params_;
};

/// Deterministic initializer stream.
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    std::vector<double> xavier_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t count);
    std::vector<double> normal(double stddev, std::size_t count);

private:
    std::mt19937_64 rng_;
};

struct Linear {
    Tensor weight;  // in x out
    Tensor bias;    // out; unused when has_bias is false
    bool has_bias = true;

    static Linear create(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
                         Initializer& init, bool bias = true);
    Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    static LayerNorm create(ParamStore& store, const std::string& name, std::size_t dim);
    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

struct AttentionWeights {
    Linear wq, wk, wv, wo;

    static AttentionWeights create(ParamStore& store, const std::string& name, std::size_t dim,
                                   Initializer& init);
};

/// Scaled dot-product attention per head, heads concatenated and projected by
/// `wo`. `mask` is Lq x Lk (true = blocked) or empty.
Tensor multi_head_attention(const Tensor& query, const Tensor& key, const Tensor& value, std::size_t heads,
                            const std::vector<bool>& mask, const AttentionWeights& weights);

/// Post-LN encoder block: self-attn -> add&norm -> [cross-attn -> add&norm] -> FFN(ReLU) -> add&norm.
struct TransformerLayer {
    AttentionWeights self_attn;
    LayerNorm norm_self;
    bool has_cross = false;
    AttentionWeights cross_attn;
    LayerNorm norm_cross;
    Linear ff_in, ff_out;
    LayerNorm norm_ff;
    std::size_t heads = 1;

    static TransformerLayer create(ParamStore& store, const std::string& name, std::size_t dim,
                                   std::size_t intermediate, std::size_t heads, bool cross, Initializer& init);

    Tensor operator()(const Tensor& x, const std::vector<bool>& self_mask = {}) const;
    Tensor operator()(const Tensor& x, const Tensor& memory, const std::vector<bool>& self_mask = {}) const;
};

/// Mask that lets each position attend only to itself.
std::vector<bool> diagonal_mask(std::size_t length);

}  // namespace prem
