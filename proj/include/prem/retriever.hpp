#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prem/corpus.hpp"
#include "prem/encoder.hpp"

namespace prem {

struct RetrieverConfig {
    ModelDims dims;
    PoolingMode pooling = PoolingMode::modality_specific;
    ModalityMask modalities;

    friend bool operator==(const RetrieverConfig&, const RetrieverConfig&) = default;
};

/// Late-fusion video retriever: query and video are encoded independently and
/// scored by max-pooled cosine similarity. Parameters are named `retriever.*`.
class RetrieverModel {
public:
    RetrieverModel(const FeatureDims& inputs, const RetrieverConfig& config, std::uint64_t seed);

    RetrieverModel(const RetrieverModel&) = delete;
    RetrieverModel& operator=(const RetrieverModel&) = delete;
    RetrieverModel(RetrieverModel&&) = default;

    ModalityQueryReps encode_query(const Query& query) const;
    VideoEncoding encode_video(const Video& video, const EncodeOptions& options = {}) const;

    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const RetrieverConfig& config() const { return config_; }
    const FeatureDims& inputs() const { return inputs_; }

private:
    FeatureDims inputs_;
    RetrieverConfig config_;
    ParamStore params_;
    MultimodalEncoder encoder_;
};

struct VideoScore {
    double phi_image = 0.0;
    double phi_subtitle = 0.0;
    double score = 0.0;  // S^R
    std::size_t image_index = 0;
    std::size_t subtitle_index = 0;
};

/// phi_d = max_j cos(q_d, d_j); S^R = mean of the active modalities' phi.
VideoScore score_video(const ModalityQueryReps& query, const VideoEncoding& video, ModalityMask modalities = {});

struct ClipPair {
    std::size_t image = 0;
    std::size_t subtitle = 0;
};

struct RelevanceSample {
    ClipPair strong;
    std::optional<ClipPair> weak;  // absent when the span covers the whole video
    double strong_score = 0.0;     // S^R_++
    double weak_score = 0.0;       // S^R_+ (valid only when weak is set)
};

/// Strong = per-modality argmax inside the span; weak = argmax outside it.
RelevanceSample sample_relevance(const ModalityQueryReps& query, const VideoEncoding& video, const Span& span,
                                 ModalityMask modalities = {});

/// Same selection rule on precomputed similarity rows (image, subtitle).
RelevanceSample sample_relevance(std::span<const double> image_sims, std::span<const double> subtitle_sims,
                                 const Span& span, ModalityMask modalities = {});

struct ContrastiveConfig {
    double temperature = 0.01;
    double lambda = 0.5;
    ModalityMask modalities;
};

struct ContrastiveItem {
    const ModalityQueryReps* query = nullptr;
    std::size_t video = 0;  // index into the batch's video encodings
    Span span;
};

struct ContrastiveBreakdown {
    double strong = 0.0;        // mean L^v_++
    double weak = 0.0;          // mean L^v_+ over queries that have a weak sample
    double video_to_query = 0.0;  // mean L^q
};

/// Batch-mean of L^v_++ + lambda*L^v_+ + L^q with in-batch negatives (every
/// other distinct video in the batch).
Tensor contrastive_loss(std::span<const ContrastiveItem> items, std::span<const VideoEncoding> videos,
                        const ContrastiveConfig& config, ContrastiveBreakdown* breakdown = nullptr);

struct RankedVideo {
    std::string video_id;
    double score = 0.0;
};

/// Video encodings for a whole corpus (pure; reused across queries).
std::vector<VideoEncoding> encode_corpus(const RetrieverModel& model, const Corpus& corpus);

/// Unit-normalized clip representations of every video, stacked and
/// transposed (D x total clips) so one product scores the whole corpus.
class VideoIndex {
public:
    VideoIndex() = default;
    explicit VideoIndex(std::span<const VideoEncoding> encodings);

    std::size_t size() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
    /// Per-video S^R for one query, in encoding order.
    std::vector<VideoScore> score_all(const ModalityQueryReps& query, ModalityMask modalities = {}) const;

private:
    Tensor image_t_, subtitle_t_;
    std::vector<std::size_t> offsets_;
};

/// Exhaustive ranking by descending S^R, ties by video id; at most `k` results.
std::vector<RankedVideo> rank_videos(const RetrieverModel& model, const Corpus& corpus,
                                     std::span<const VideoEncoding> encodings, const ModalityQueryReps& query,
                                     std::size_t k);
std::vector<RankedVideo> rank_videos(const RetrieverModel& model, const Corpus& corpus, const VideoIndex& index,
                                     const ModalityQueryReps& query, std::size_t k);

std::vector<RankedVideo> retrieve_topk(const RetrieverModel& model, const Corpus& corpus, const Query& query,
                                       std::size_t k);

}  // namespace prem
