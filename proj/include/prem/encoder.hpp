#pragma once

#include <string>
#include <vector>

#include "prem/corpus.hpp"
#include "prem/nn.hpp"

namespace prem {

struct ModelDims {
    std::size_t hidden = 32;
    std::size_t intermediate = 128;
    std::size_t heads = 4;
    std::size_t max_positions = 128;

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

enum class PoolingMode { modality_specific, mean, max };

const char* pooling_name(PoolingMode mode);
PoolingMode parse_pooling(const std::string& name);

/// Which input channels the model sees; a removed channel is fed as zeros.
struct ModalityMask {
    bool image = true;
    bool subtitle = true;

    friend bool operator==(const ModalityMask&, const ModalityMask&) = default;
};

/// Query token features as an Lq x D_txt tensor.
Tensor query_features(const Query& query);

struct VideoFeatures {
    Tensor image;     // L x D_img
    Tensor subtitle;  // L x D_sub, zeros where absent
};

VideoFeatures video_features(const Video& video, const FeatureDims& dims, ModalityMask mask = {});

struct ModalityQueryReps {
    Tensor tokens;      // contextual token reps, Lq x D
    Tensor q_image;     // 1 x D
    Tensor q_subtitle;  // 1 x D
    std::vector<double> alpha_image;
    std::vector<double> alpha_subtitle;
};

struct VideoEncoding {
    Tensor image;     // L x D
    Tensor subtitle;  // L x D
    std::size_t length() const { return image.dim(0); }
};

struct EncodeOptions {
    /// Diagnostic: every position attends only to itself.
    bool diagonal_attention = false;
};

/// Query Transformer + modality-specific pooling, and the joint image/subtitle
/// video Transformer. Parameters live under `<prefix>.`.
class MultimodalEncoder {
public:
    MultimodalEncoder() = default;
    MultimodalEncoder(ParamStore& store, const std::string& prefix, const FeatureDims& inputs, const ModelDims& dims,
                      Initializer& init);

    ModalityQueryReps encode_query(const Tensor& tokens, PoolingMode mode) const;
    VideoEncoding encode_video(const VideoFeatures& features, const EncodeOptions& options = {}) const;

    const ModelDims& dims() const { return dims_; }

private:
    Tensor positions(std::size_t count) const;

    ModelDims dims_;
    Linear query_proj_, image_proj_, subtitle_proj_;
    Tensor pos_emb_;  // max_positions x D
    Tensor mod_emb_;  // 2 x D (image, subtitle)
    TransformerLayer query_tf_, video_tf_;
    Linear pool_image_, pool_subtitle_;  // D -> 1, no bias
};

/// 1 x L cosine similarities between a 1 x D query vector and L x D reps.
Tensor similarity_row(const Tensor& query, const Tensor& reps);

}  // namespace prem
