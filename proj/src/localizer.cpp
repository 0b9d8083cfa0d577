#include "prem/localizer.hpp"

#include <algorithm>
#include <stdexcept>

namespace prem {

GatedClips apply_gates(const VideoEncoding& video, const ModalityQueryReps& query, const Tensor& gate_image,
                       const Tensor& gate_subtitle) {
    auto gate = [](const Tensor& reps, const Tensor& weight, const Tensor& q) {
        return mul(l2_normalize(mul(matmul(reps, weight), q)), reps);
    };
    return {gate(video.image, gate_image, query.q_image), gate(video.subtitle, gate_subtitle, query.q_subtitle)};
}

Tensor fuse_clips(const Tensor& gated_image, const Tensor& gated_subtitle, const Linear& fc) {
    if (gated_image.dim(0) != gated_subtitle.dim(0))
        throw ShapeError("fuse_clips: image and subtitle sequences differ in length");
    return fc(concat({gated_image, gated_subtitle}, 1));
}

BoundaryLoss shared_norm_terms(const BoundaryScores& positive, std::span<const BoundaryScores> negatives,
                               const Span& gt) {
    if (gt.start > gt.end || gt.end >= positive.length())
        throw std::out_of_range("ground-truth span outside the positive video");
    std::vector<Tensor> starts{positive.start}, ends{positive.end};
    for (const auto& n : negatives) {
        starts.push_back(n.start);
        ends.push_back(n.end);
    }
    Tensor all_start = starts.size() == 1 ? positive.start : concat(starts, 0);
    Tensor all_end = ends.size() == 1 ? positive.end : concat(ends, 0);
    // Positive video occupies the first rows of the concatenation.
    return {cross_entropy(all_start, gt.start), cross_entropy(all_end, gt.end)};
}

Tensor shared_norm_loss(const BoundaryScores& positive, std::span<const BoundaryScores> negatives, const Span& gt) {
    BoundaryLoss terms = shared_norm_terms(positive, negatives, gt);
    return add(terms.start, terms.end);
}

Tensor adversarial_bce(const Tensor& positive_logits, const Tensor& negative_logits) {
    if (positive_logits.numel() == 0 || negative_logits.numel() == 0)
        throw std::invalid_argument("adversarial loss needs at least one positive and one negative");
    Tensor logits = concat({positive_logits.reshape({positive_logits.numel()}),
                            negative_logits.reshape({negative_logits.numel()})},
                           0);
    std::vector<double> labels(logits.numel(), 0.0);
    std::fill_n(labels.begin(), positive_logits.numel(), 1.0);
    return bce_with_logits(logits, labels);
}

Tensor total_loss(const Tensor& start_loss, const Tensor& end_loss, const Tensor& adversarial, double gamma) {
    return add(add(start_loss, end_loss), scale(adversarial, gamma));
}

std::vector<ScoredSpan> top_moments(std::span<const double> start_scores, std::span<const double> end_scores,
                                    LengthLimits limits, std::size_t top, std::size_t cap) {
    if (start_scores.size() != end_scores.size()) throw ShapeError("boundary score lengths differ");
    std::vector<ScoredSpan> cands;
    for (const Span& s : enumerate_spans(start_scores.size(), limits))
        cands.push_back({s, start_scores[s.start] + end_scores[s.end]});
    auto better = [](const ScoredSpan& a, const ScoredSpan& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.span < b.span;
    };
    const std::size_t keep = std::min({cands.size(), cap, top});
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), better);
    cands.resize(keep);
    return cands;
}

// ---------------------------------------------------------------------------

LocalizerModel::LocalizerModel(const FeatureDims& inputs, const LocalizerConfig& config, std::uint64_t seed)
    : inputs_(inputs), config_(config) {
    if (config.conv_width % 2 == 0) throw std::invalid_argument("conv_width must be odd");
    if (config.fusion_layers == 0) throw std::invalid_argument("fusion_layers must be positive");
    Initializer init(seed);
    FeatureDims in = inputs;
    if (in.subtitle == 0) in.subtitle = 1;
    const std::size_t d = config.dims.hidden;
    encoder_ = MultimodalEncoder(params_, "localizer.enc", in, config.dims, init);
    gate_image_ = params_.add("localizer.gate_image", Tensor::parameter({d, d}, init.xavier_uniform(d, d, d * d)));
    gate_subtitle_ =
        params_.add("localizer.gate_subtitle", Tensor::parameter({d, d}, init.xavier_uniform(d, d, d * d)));
    fuse_fc_ = Linear::create(params_, "localizer.fuse", 2 * d, d, init);
    for (std::size_t l = 0; l < config.fusion_layers; ++l)
        fusion_.push_back(TransformerLayer::create(params_, "localizer.fusion" + std::to_string(l), d,
                                                   config.dims.intermediate, config.dims.heads, true, init));
    start_head_ = make_head("localizer.start_head", init);
    end_head_ = make_head("localizer.end_head", init);
    adv_tf_ = TransformerLayer::create(params_, "localizer.adv.tf", d, config.dims.intermediate, config.dims.heads,
                                       false, init);
    adv_fc1_ = Linear::create(params_, "localizer.adv.fc1", d, d, init);
    adv_fc2_ = Linear::create(params_, "localizer.adv.fc2", d, d, init);
    adv_fc3_ = Linear::create(params_, "localizer.adv.fc3", d, 1, init);
}

LocalizerModel::ConvHead LocalizerModel::make_head(const std::string& name, Initializer& init) {
    const std::size_t d = config_.dims.hidden, w = config_.conv_width;
    ConvHead h;
    h.k1 = params_.add(name + ".conv1.kernel", Tensor::parameter({w, d, d}, init.xavier_uniform(w * d, w * d, w * d * d)));
    h.b1 = params_.add(name + ".conv1.bias", Tensor::parameter({d}, std::vector<double>(d, 0.0)));
    h.k2 = params_.add(name + ".conv2.kernel", Tensor::parameter({w, d, d}, init.xavier_uniform(w * d, w * d, w * d * d)));
    h.b2 = params_.add(name + ".conv2.bias", Tensor::parameter({d}, std::vector<double>(d, 0.0)));
    h.out = Linear::create(params_, name + ".out", d, 1, init);
    return h;
}

Tensor LocalizerModel::run_head(const ConvHead& head, const Tensor& context) const {
    Tensor h = relu(conv1d(context, head.k1, head.b1));
    return head.out(conv1d(h, head.k2, head.b2));
}

ModalityQueryReps LocalizerModel::encode_query(const Query& query) const {
    return encoder_.encode_query(query_features(query), config_.pooling);
}

VideoEncoding LocalizerModel::encode_video(const Video& video) const {
    FeatureDims dims = inputs_;
    if (dims.subtitle == 0) dims.subtitle = 1;
    return encoder_.encode_video(video_features(video, dims, config_.modalities));
}

GatedClips LocalizerModel::gates(const VideoEncoding& video, const ModalityQueryReps& query) const {
    if (!config_.use_gates) return {video.image, video.subtitle};
    return apply_gates(video, query, gate_image_, gate_subtitle_);
}

Tensor LocalizerModel::fuse(const GatedClips& gated) const { return fuse_clips(gated.image, gated.subtitle, fuse_fc_); }

Tensor LocalizerModel::fuse_with_query(const Tensor& fused_clips, const Tensor& query_tokens) const {
    Tensor h = fused_clips;
    for (const auto& layer : fusion_) h = layer(h, query_tokens);
    return h;
}

BoundaryScores LocalizerModel::boundary_scores(const Tensor& context) const {
    return {run_head(start_head_, context), run_head(end_head_, context)};
}

LocalizerModel::VideoPass LocalizerModel::forward(const ModalityQueryReps& query, const VideoEncoding& video) const {
    VideoPass pass;
    pass.fused = fuse(gates(video, query));
    pass.scores = boundary_scores(fuse_with_query(pass.fused, query.tokens));
    return pass;
}

Tensor LocalizerModel::span_logits(const Tensor& fused_clips, std::span<const Span> spans) const {
    if (spans.empty()) throw std::invalid_argument("span_logits needs at least one span");
    Tensor h = adv_tf_(fused_clips);
    std::vector<Tensor> feats;
    feats.reserve(spans.size());
    for (const Span& s : spans) {
        if (s.end >= h.dim(0) || s.start > s.end) throw std::out_of_range("span outside video");
        feats.push_back(max_pool_over_axis(slice_rows(h, s.start, s.end + 1), 0).values.reshape({1, h.dim(1)}));
    }
    Tensor x = feats.size() == 1 ? feats.front() : concat(feats, 0);
    return adv_fc3_(relu(adv_fc2_(relu(adv_fc1_(x)))));
}

}  // namespace prem
