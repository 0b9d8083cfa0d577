#include "prem/encoder.hpp"

#include <numeric>
#include <stdexcept>

namespace prem {

const char* pooling_name(PoolingMode mode) {
    switch (mode) {
        case PoolingMode::modality_specific:
            return "modality_specific";
        case PoolingMode::mean:
            return "mean";
        case PoolingMode::max:
            return "max";
    }
    return "?";
}

PoolingMode parse_pooling(const std::string& name) {
    if (name == "modality_specific") return PoolingMode::modality_specific;
    if (name == "mean") return PoolingMode::mean;
    if (name == "max") return PoolingMode::max;
    throw std::invalid_argument("unknown pooling mode '" + name + "' (expected modality_specific, mean or max)");
}

Tensor query_features(const Query& query) {
    if (query.tokens.empty()) throw DataError("query '" + query.id + "' has no tokens");
    const std::size_t d = query.tokens.front().size();
    std::vector<double> v;
    v.reserve(query.tokens.size() * d);
    for (const auto& t : query.tokens) v.insert(v.end(), t.begin(), t.end());
    return Tensor::from({query.tokens.size(), d}, std::move(v));
}

VideoFeatures video_features(const Video& video, const FeatureDims& dims, ModalityMask mask) {
    const std::size_t len = video.clips.size();
    std::vector<double> img(len * dims.image, 0.0), sub(len * dims.subtitle, 0.0);
    for (std::size_t c = 0; c < len; ++c) {
        const auto& clip = video.clips[c];
        if (mask.image) std::copy(clip.image.begin(), clip.image.end(), img.begin() + c * dims.image);
        if (mask.subtitle && clip.subtitle)
            std::copy(clip.subtitle->begin(), clip.subtitle->end(), sub.begin() + c * dims.subtitle);
    }
    return {Tensor::from({len, dims.image}, std::move(img)), Tensor::from({len, dims.subtitle}, std::move(sub))};
}

MultimodalEncoder::MultimodalEncoder(ParamStore& store, const std::string& prefix, const FeatureDims& inputs,
                                     const ModelDims& dims, Initializer& init)
    : dims_(dims) {
    const std::size_t d = dims.hidden;
    query_proj_ = Linear::create(store, prefix + ".query_proj", inputs.text, d, init);
    image_proj_ = Linear::create(store, prefix + ".image_proj", inputs.image, d, init);
    subtitle_proj_ = Linear::create(store, prefix + ".subtitle_proj", inputs.subtitle, d, init);
    pos_emb_ = store.add(prefix + ".pos_emb", Tensor::parameter({dims.max_positions, d}, init.normal(0.02, dims.max_positions * d)));
    mod_emb_ = store.add(prefix + ".mod_emb", Tensor::parameter({2, d}, init.normal(0.02, 2 * d)));
    query_tf_ = TransformerLayer::create(store, prefix + ".query_tf", d, dims.intermediate, dims.heads, false, init);
    video_tf_ = TransformerLayer::create(store, prefix + ".video_tf", d, dims.intermediate, dims.heads, false, init);
    pool_image_ = Linear::create(store, prefix + ".pool_image", d, 1, init, false);
    pool_subtitle_ = Linear::create(store, prefix + ".pool_subtitle", d, 1, init, false);
}

Tensor MultimodalEncoder::positions(std::size_t count) const {
    if (count > dims_.max_positions)
        throw ShapeError("sequence of " + std::to_string(count) + " exceeds max_positions " +
                         std::to_string(dims_.max_positions));
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), 0);
    return embedding_lookup(pos_emb_, idx);
}

ModalityQueryReps MultimodalEncoder::encode_query(const Tensor& tokens, PoolingMode mode) const {
    const std::size_t len = tokens.dim(0);
    Tensor x = add(query_proj_(tokens), positions(len));
    ModalityQueryReps out;
    out.tokens = query_tf_(x);

    switch (mode) {
        case PoolingMode::modality_specific: {
            // o = W_d w, alpha = softmax(o), q_d = sum alpha_j w_j
            Tensor a_img = softmax(pool_image_(out.tokens), 0);
            Tensor a_sub = softmax(pool_subtitle_(out.tokens), 0);
            out.q_image = matmul(transpose(a_img), out.tokens);
            out.q_subtitle = matmul(transpose(a_sub), out.tokens);
            out.alpha_image = a_img.to_vector();
            out.alpha_subtitle = a_sub.to_vector();
            break;
        }
        case PoolingMode::mean: {
            Tensor weights = Tensor::full({1, len}, 1.0 / static_cast<double>(len));
            out.q_image = matmul(weights, out.tokens);
            out.q_subtitle = out.q_image;
            out.alpha_image = weights.to_vector();
            out.alpha_subtitle = out.alpha_image;
            break;
        }
        case PoolingMode::max: {
            out.q_image = max_pool_over_axis(out.tokens, 0).values.reshape({1, dims_.hidden});
            out.q_subtitle = out.q_image;
            break;
        }
    }
    return out;
}

VideoEncoding MultimodalEncoder::encode_video(const VideoFeatures& features, const EncodeOptions& options) const {
    const std::size_t len = features.image.dim(0);
    if (len == 0) throw DataError("video has no clips");
    Tensor pe = positions(len);
    const std::size_t img_idx[1] = {0};
    const std::size_t sub_idx[1] = {1};
    Tensor img = add(add(image_proj_(features.image), pe), embedding_lookup(mod_emb_, img_idx));
    Tensor sub = add(add(subtitle_proj_(features.subtitle), pe), embedding_lookup(mod_emb_, sub_idx));
    Tensor joint = concat({img, sub}, 0);
    std::vector<bool> mask;
    if (options.diagonal_attention) mask = diagonal_mask(2 * len);
    Tensor h = video_tf_(joint, mask);
    return {slice_rows(h, 0, len), slice_rows(h, len, 2 * len)};
}

Tensor similarity_row(const Tensor& query, const Tensor& reps) {
    return matmul(l2_normalize(query), transpose(l2_normalize(reps)));
}

}  // namespace prem
