#pragma once

#include <span>
#include <vector>

#include "prem/corpus.hpp"
#include "prem/encoder.hpp"
#include "prem/span.hpp"

namespace prem {

struct LocalizerConfig {
    ModelDims dims;
    PoolingMode pooling = PoolingMode::modality_specific;
    ModalityMask modalities;
    bool use_gates = true;
    std::size_t fusion_layers = 2;
    std::size_t conv_width = 3;

    friend bool operator==(const LocalizerConfig&, const LocalizerConfig&) = default;
};

struct GatedClips {
    Tensor image;     // L x D
    Tensor subtitle;  // L x D
};

/// d_hat_j = l2norm((d_j W) ⊙ q_d) ⊙ d_j for both modalities. `gate_*` are D x D.
GatedClips apply_gates(const VideoEncoding& video, const ModalityQueryReps& query, const Tensor& gate_image,
                       const Tensor& gate_subtitle);

/// c_j = FC([I_j ; s_j]) with image columns first.
Tensor fuse_clips(const Tensor& gated_image, const Tensor& gated_subtitle, const Linear& fc);

struct BoundaryScores {
    Tensor start;  // L x 1
    Tensor end;    // L x 1
    std::size_t length() const { return start.dim(0); }
};

struct BoundaryLoss {
    Tensor start;  // L^st
    Tensor end;    // L^ed
};

/// Softmax cross-entropy of the ground-truth boundary over the clips of the
/// positive video and every negative video together (Shared-Norm). With no
/// negatives this is plain per-video normalization.
BoundaryLoss shared_norm_terms(const BoundaryScores& positive, std::span<const BoundaryScores> negatives,
                               const Span& gt);
/// L^st + L^ed.
Tensor shared_norm_loss(const BoundaryScores& positive, std::span<const BoundaryScores> negatives, const Span& gt);

/// Mean BCE with label 1 for positive logits and 0 for negative logits.
Tensor adversarial_bce(const Tensor& positive_logits, const Tensor& negative_logits);

/// L^st + L^ed + gamma * L^c.
Tensor total_loss(const Tensor& start_loss, const Tensor& end_loss, const Tensor& adversarial, double gamma);

/// Top `top` spans by l_st(start) + l_ed(end) among admissible spans. At most
/// `cap` candidates are ranked (highest first) before the cut.
std::vector<ScoredSpan> top_moments(std::span<const double> start_scores, std::span<const double> end_scores,
                                    LengthLimits limits, std::size_t top, std::size_t cap = 512);

/// Focus-then-fuse localizer. Parameters live under `localizer.*`; the span
/// classifier branch under `localizer.adv.*`.
class LocalizerModel {
public:
    LocalizerModel(const FeatureDims& inputs, const LocalizerConfig& config, std::uint64_t seed);

    LocalizerModel(const LocalizerModel&) = delete;
    LocalizerModel& operator=(const LocalizerModel&) = delete;
    LocalizerModel(LocalizerModel&&) = default;

    ModalityQueryReps encode_query(const Query& query) const;
    VideoEncoding encode_video(const Video& video) const;

    GatedClips gates(const VideoEncoding& video, const ModalityQueryReps& query) const;
    Tensor fuse(const GatedClips& gated) const;
    /// Clip self-attention, clip-to-token cross-attention and FFN, per layer.
    Tensor fuse_with_query(const Tensor& fused_clips, const Tensor& query_tokens) const;
    BoundaryScores boundary_scores(const Tensor& context) const;

    struct VideoPass {
        Tensor fused;  // gated+fused clips, input of the span classifier branch
        BoundaryScores scores;
    };
    VideoPass forward(const ModalityQueryReps& query, const VideoEncoding& video) const;

    /// Span-classifier logits (N x 1): max-pool of the adversarial Transformer
    /// output over each span, then a 3-layer MLP.
    Tensor span_logits(const Tensor& fused_clips, std::span<const Span> spans) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const LocalizerConfig& config() const { return config_; }
    const FeatureDims& inputs() const { return inputs_; }

    const Linear& fusion_fc() const { return fuse_fc_; }

private:
    struct ConvHead {
        Tensor k1, b1, k2, b2;
        Linear out;
    };
    ConvHead make_head(const std::string& name, Initializer& init);
    Tensor run_head(const ConvHead& head, const Tensor& context) const;

    FeatureDims inputs_;
    LocalizerConfig config_;
    ParamStore params_;
    MultimodalEncoder encoder_;
    Tensor gate_image_, gate_subtitle_;
    Linear fuse_fc_;
    std::vector<TransformerLayer> fusion_;
    ConvHead start_head_, end_head_;
    TransformerLayer adv_tf_;
    Linear adv_fc1_, adv_fc2_, adv_fc3_;
};

}  // namespace prem
