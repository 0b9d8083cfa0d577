#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prem/corpus.hpp"
#include "prem/localizer.hpp"
#include "prem/retriever.hpp"

namespace prem {

struct TrainConfig {
    std::size_t retriever_epochs = 30;
    std::size_t retriever_batch = 32;
    std::size_t localizer_epochs = 15;
    std::size_t localizer_batch = 32;
    std::size_t negatives = 4;      // hard negative videos per query for Shared-Norm
    std::size_t mining_pool = 100;  // sample negatives from this many top-ranked videos
    double lambda = 0.5;            // weak-relevance weight
    double gamma = 0.8;             // adversarial weight
    double temperature = 0.01;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    bool use_adversarial = true;
    bool use_shared_norm = true;
    double positive_iou = 0.7;
    std::size_t adversarial_top = 5;
    std::size_t mining_span_cap = 512;
    bool select_best_by_val = true;
    std::uint64_t seed = 1;

    void validate() const;
    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct InferenceConfig {
    std::size_t top_k = 10;
    LengthLimits limits{1, 24};
    double nms_iou = 0.7;
    std::size_t max_results = 100;
    /// Divisor of S^R in the moment score; the contrastive temperature by default.
    double retrieval_divisor = 0.01;

    void validate() const;
};

struct LossRecord {
    std::size_t epoch = 0;
    std::string split;
    double loss = 0.0;

    friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

using ProgressFn = std::function<void(const std::string&)>;

struct RetrieverTrainResult {
    RetrieverModel model;
    std::vector<LossRecord> curve;
    std::size_t best_epoch = 0;
    double best_val_r10 = -1.0;
    std::vector<double> step_losses;  // training loss of every optimizer step
};

/// Contrastive training with in-batch negatives; the parameters with the best
/// validation VR R@10 are kept when a validation split is given.
RetrieverTrainResult train_retriever(const Corpus& train, const Corpus* val, const RetrieverConfig& model_config,
                                     const TrainConfig& config, const ProgressFn& progress = {});

/// Per query (same order as corpus.queries()): indices of `negatives` videos
/// sampled uniformly without replacement from the top `mining_pool` ranked
/// non-target videos.
std::vector<std::vector<std::size_t>> mine_hard_negatives(const RetrieverModel& retriever, const Corpus& corpus,
                                                          std::size_t negatives, std::size_t mining_pool,
                                                          std::uint64_t seed);

struct LocalizerStepLoss {
    double boundary = 0.0;
    double adversarial = 0.0;
    double total = 0.0;
};

/// Localizer loss for one query: positive video plus the given negative videos.
Tensor localizer_query_loss(const LocalizerModel& model, const Corpus& corpus, const Query& query,
                            std::span<const std::size_t> negative_videos, const TrainConfig& config,
                            const LengthLimits& limits, LocalizerStepLoss* parts = nullptr);

struct LocalizerTrainResult {
    LocalizerModel model;
    std::vector<LossRecord> curve;
    std::vector<double> step_losses;
};

LocalizerTrainResult train_localizer(const Corpus& train, const RetrieverModel& retriever,
                                     const LocalizerConfig& model_config, const TrainConfig& config,
                                     const InferenceConfig& inference, const ProgressFn& progress = {});

struct MomentPrediction {
    std::string video_id;
    Span span;
    double score = 0.0;

    friend bool operator==(const MomentPrediction&, const MomentPrediction&) = default;
};

struct QueryPrediction {
    std::string query_id;
    std::vector<RankedVideo> videos;  // VR ranking
    std::vector<MomentPrediction> moments;
};

/// Two-stage inference over one corpus; encodings of both models are computed
/// once and reused for every query.
class InferenceEngine {
public:
    InferenceEngine(const RetrieverModel& retriever, const LocalizerModel* localizer, const Corpus& corpus,
                    InferenceConfig config);

    std::vector<RankedVideo> rank(const Query& query) const;
    /// Every admissible span of one video with S = S^R/divisor + l_st + l_ed, after
    /// per-video NMS.
    std::vector<MomentPrediction> localize(const Query& query, std::size_t video_index, double retrieval_score) const;
    /// VCMR: top-K videos, pooled moments sorted by S, at most max_results.
    QueryPrediction infer(const Query& query) const;
    /// SVMR: moments restricted to the query's ground-truth video.
    QueryPrediction infer_in_target(const Query& query) const;

    /// Raw boundary scores of one video (start, end).
    std::pair<std::vector<double>, std::vector<double>> boundary(const Query& query, std::size_t video_index) const;

    const InferenceConfig& config() const { return config_; }

private:
    const RetrieverModel& retriever_;
    const LocalizerModel* localizer_;
    const Corpus& corpus_;
    InferenceConfig config_;
    std::vector<VideoEncoding> retriever_enc_;
    VideoIndex retriever_index_;
    std::vector<VideoEncoding> localizer_enc_;
};

enum class Task { vr, svmr, vcmr };
Task parse_task(const std::string& name);
const char* task_name(Task task);

struct MetricsReport {
    std::map<std::size_t, double> vr;                             // K -> percent
    std::map<double, std::map<std::size_t, double>> svmr, vcmr;  // IoU -> K -> percent
    std::size_t missing = 0;                                      // queries with no prediction
};

inline const std::vector<std::size_t> kVrRanks{1, 5, 10, 100};
inline const std::vector<std::size_t> kMomentRanks{1, 10, 100};
inline const std::vector<double> kIouThresholds{0.5, 0.7};

/// R@K for the task. A query absent from `predictions` counts as a miss.
MetricsReport evaluate(const std::vector<QueryPrediction>& predictions, const Corpus& corpus, Task task);

}  // namespace prem
