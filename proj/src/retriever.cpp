#include "prem/retriever.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace prem {

RetrieverModel::RetrieverModel(const FeatureDims& inputs, const RetrieverConfig& config, std::uint64_t seed)
    : inputs_(inputs), config_(config) {
    Initializer init(seed);
    FeatureDims in = inputs;
    // Corpora without a subtitle channel still get a 1-wide projection so the
    // parameter namespace stays fixed.
    if (in.subtitle == 0) in.subtitle = 1;
    encoder_ = MultimodalEncoder(params_, "retriever", in, config.dims, init);
}

ModalityQueryReps RetrieverModel::encode_query(const Query& query) const {
    return encoder_.encode_query(query_features(query), config_.pooling);
}

VideoEncoding RetrieverModel::encode_video(const Video& video, const EncodeOptions& options) const {
    FeatureDims dims = inputs_;
    if (dims.subtitle == 0) dims.subtitle = 1;
    return encoder_.encode_video(video_features(video, dims, config_.modalities), options);
}

namespace {

struct ArgMax {
    std::size_t index = 0;
    double value = -std::numeric_limits<double>::infinity();
    bool found = false;
};

// Lowest index wins ties; `skip` excludes [skip_lo, skip_hi].
ArgMax argmax_range(std::span<const double> row, std::size_t lo, std::size_t hi, std::size_t skip_lo = 1,
                    std::size_t skip_hi = 0) {
    ArgMax best;
    for (std::size_t j = lo; j < hi; ++j) {
        if (j >= skip_lo && j <= skip_hi) continue;
        if (!best.found || row[j] > best.value) {
            best = {j, row[j], true};
        }
    }
    return best;
}

double combine(double image, double subtitle, ModalityMask m) {
    if (m.image && m.subtitle) return (image + subtitle) / 2.0;
    return m.image ? image : subtitle;
}

Tensor combine(const Tensor& image, const Tensor& subtitle, ModalityMask m, double factor) {
    if (m.image && m.subtitle) return scale(add(image, subtitle), 0.5 * factor);
    return scale(m.image ? image : subtitle, factor);
}

void check_modalities(ModalityMask m) {
    if (!m.image && !m.subtitle) throw std::invalid_argument("at least one modality must be active");
}

}  // namespace

VideoScore score_video(const ModalityQueryReps& query, const VideoEncoding& video, ModalityMask modalities) {
    check_modalities(modalities);
    const Tensor img = similarity_row(query.q_image, video.image);
    const Tensor sub = similarity_row(query.q_subtitle, video.subtitle);
    const auto bi = argmax_range(img.values(), 0, img.numel());
    const auto bs = argmax_range(sub.values(), 0, sub.numel());
    VideoScore s;
    s.phi_image = bi.value;
    s.phi_subtitle = bs.value;
    s.image_index = bi.index;
    s.subtitle_index = bs.index;
    s.score = combine(s.phi_image, s.phi_subtitle, modalities);
    return s;
}

RelevanceSample sample_relevance(std::span<const double> image_sims, std::span<const double> subtitle_sims,
                                 const Span& span, ModalityMask modalities) {
    check_modalities(modalities);
    const std::size_t len = image_sims.size();
    if (subtitle_sims.size() != len) throw ShapeError("similarity rows differ in length");
    if (span.start > span.end || span.end >= len) throw std::out_of_range("span outside video");
    RelevanceSample r;
    const auto si = argmax_range(image_sims, span.start, span.end + 1);
    const auto ss = argmax_range(subtitle_sims, span.start, span.end + 1);
    r.strong = {si.index, ss.index};
    r.strong_score = combine(si.value, ss.value, modalities);
    const auto wi = argmax_range(image_sims, 0, len, span.start, span.end);
    const auto ws = argmax_range(subtitle_sims, 0, len, span.start, span.end);
    if (wi.found) {
        r.weak = ClipPair{wi.index, ws.index};
        r.weak_score = combine(wi.value, ws.value, modalities);
    }
    return r;
}

RelevanceSample sample_relevance(const ModalityQueryReps& query, const VideoEncoding& video, const Span& span,
                                 ModalityMask modalities) {
    const Tensor img = similarity_row(query.q_image, video.image);
    const Tensor sub = similarity_row(query.q_subtitle, video.subtitle);
    return sample_relevance(img.values(), sub.values(), span, modalities);
}

Tensor contrastive_loss(std::span<const ContrastiveItem> items, std::span<const VideoEncoding> videos,
                        const ContrastiveConfig& config, ContrastiveBreakdown* breakdown) {
    check_modalities(config.modalities);
    const std::size_t batch = items.size();
    if (batch < 2) throw std::invalid_argument("contrastive loss needs a batch of at least 2 queries");
    if (!(config.temperature > 0.0)) throw std::invalid_argument("temperature must be positive");

    std::vector<Tensor> qi, qs, ri, rs;
    for (const auto& it : items) {
        if (it.video >= videos.size()) throw std::out_of_range("contrastive item references unknown video");
        qi.push_back(it.query->q_image);
        qs.push_back(it.query->q_subtitle);
    }
    std::vector<std::size_t> offset(videos.size() + 1, 0);
    for (std::size_t v = 0; v < videos.size(); ++v) {
        ri.push_back(videos[v].image);
        rs.push_back(videos[v].subtitle);
        offset[v + 1] = offset[v] + videos[v].length();
    }
    const std::size_t total = offset.back();
    // Row b holds cos(q_b, every clip of every batch video).
    const Tensor sim_img = matmul(l2_normalize(concat(qi, 0)), transpose(l2_normalize(concat(ri, 0))));
    const Tensor sim_sub = matmul(l2_normalize(concat(qs, 0)), transpose(l2_normalize(concat(rs, 0))));
    const auto vi = sim_img.values();
    const auto vs = sim_sub.values();

    auto row = [&](std::span<const double> all, std::size_t b) { return all.subspan(b * total, total); };
    // Flat index of the per-modality max of query b over video v.
    auto video_max = [&](std::size_t b, std::size_t v) {
        const auto a = argmax_range(row(vi, b), offset[v], offset[v + 1]);
        const auto s = argmax_range(row(vs, b), offset[v], offset[v + 1]);
        return std::pair{b * total + a.index, b * total + s.index};
    };
    const double inv_t = 1.0 / config.temperature;

    std::vector<Tensor> losses;
    double sum_strong = 0.0, sum_weak = 0.0, sum_v2q = 0.0;
    std::size_t weak_count = 0;
    std::vector<std::size_t> strong_img(batch), strong_sub(batch);

    for (std::size_t b = 0; b < batch; ++b) {
        const auto& it = items[b];
        const std::size_t v = it.video;
        const std::size_t len = videos[v].length();
        if (it.span.start > it.span.end || it.span.end >= len) throw std::out_of_range("span outside video");
        const auto img_row = row(vi, b).subspan(offset[v], len);
        const auto sub_row = row(vs, b).subspan(offset[v], len);
        const RelevanceSample rel = sample_relevance(img_row, sub_row, it.span, config.modalities);
        strong_img[b] = b * total + offset[v] + rel.strong.image;
        strong_sub[b] = b * total + offset[v] + rel.strong.subtitle;

        std::vector<std::size_t> neg_img, neg_sub;
        for (std::size_t u = 0; u < videos.size(); ++u) {
            if (u == v) continue;
            auto [a, s] = video_max(b, u);
            neg_img.push_back(a);
            neg_sub.push_back(s);
        }

        auto info_nce = [&](std::size_t pos_img, std::size_t pos_sub) {
            std::vector<std::size_t> ii{pos_img}, ss{pos_sub};
            ii.insert(ii.end(), neg_img.begin(), neg_img.end());
            ss.insert(ss.end(), neg_sub.begin(), neg_sub.end());
            Tensor logits = combine(gather(sim_img, ii), gather(sim_sub, ss), config.modalities, inv_t);
            return cross_entropy(logits, 0);
        };

        Tensor l_strong = info_nce(strong_img[b], strong_sub[b]);
        sum_strong += l_strong.item();
        Tensor l_query = l_strong;
        if (rel.weak) {
            Tensor l_weak = info_nce(b * total + offset[v] + rel.weak->image, b * total + offset[v] + rel.weak->subtitle);
            sum_weak += l_weak.item();
            ++weak_count;
            l_query = add(l_query, scale(l_weak, config.lambda));
        }
        losses.push_back(l_query);
    }

    // Video-to-query: the target video against every batch query that is not
    // annotated in it; positive logit is the strong-sample score.
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t v = items[b].video;
        std::vector<std::size_t> ii{strong_img[b]}, ss{strong_sub[b]};
        for (std::size_t o = 0; o < batch; ++o) {
            if (items[o].video == v) continue;
            auto [a, s] = video_max(o, v);
            ii.push_back(a);
            ss.push_back(s);
        }
        Tensor logits = combine(gather(sim_img, ii), gather(sim_sub, ss), config.modalities, inv_t);
        Tensor l_v2q = cross_entropy(logits, 0);
        sum_v2q += l_v2q.item();
        losses[b] = add(losses[b], l_v2q);
    }

    if (breakdown) {
        const double n = static_cast<double>(batch);
        breakdown->strong = sum_strong / n;
        breakdown->weak = weak_count ? sum_weak / static_cast<double>(weak_count) : 0.0;
        breakdown->video_to_query = sum_v2q / n;
    }
    return mean(concat(losses, 0));
}

std::vector<VideoEncoding> encode_corpus(const RetrieverModel& model, const Corpus& corpus) {
    std::vector<VideoEncoding> out;
    out.reserve(corpus.videos().size());
    for (const auto& v : corpus.videos()) out.push_back(model.encode_video(v));
    return out;
}

VideoIndex::VideoIndex(std::span<const VideoEncoding> encodings) {
    if (encodings.empty()) throw DataError("cannot index an empty corpus");
    std::vector<Tensor> img, sub;
    offsets_.push_back(0);
    for (const auto& e : encodings) {
        if (e.image.dim(0) != e.subtitle.dim(0)) throw ShapeError("modalities differ in clip count");
        img.push_back(l2_normalize(e.image.detach()));
        sub.push_back(l2_normalize(e.subtitle.detach()));
        offsets_.push_back(offsets_.back() + e.image.dim(0));
    }
    image_t_ = transpose(concat(img, 0));
    subtitle_t_ = transpose(concat(sub, 0));
}

std::vector<VideoScore> VideoIndex::score_all(const ModalityQueryReps& query, ModalityMask modalities) const {
    check_modalities(modalities);
    const Tensor img = matmul(l2_normalize(query.q_image.detach()), image_t_);
    const Tensor sub = matmul(l2_normalize(query.q_subtitle.detach()), subtitle_t_);
    std::vector<VideoScore> out(size());
    for (std::size_t v = 0; v < out.size(); ++v) {
        const std::size_t lo = offsets_[v], hi = offsets_[v + 1];
        const auto bi = argmax_range(img.values(), lo, hi);
        const auto bs = argmax_range(sub.values(), lo, hi);
        auto& s = out[v];
        s.phi_image = bi.value;
        s.phi_subtitle = bs.value;
        s.image_index = bi.index - lo;
        s.subtitle_index = bs.index - lo;
        s.score = combine(s.phi_image, s.phi_subtitle, modalities);
    }
    return out;
}

std::vector<RankedVideo> rank_videos(const RetrieverModel& model, const Corpus& corpus, const VideoIndex& index,
                                     const ModalityQueryReps& query, std::size_t k) {
    if (corpus.videos().empty()) throw DataError("cannot retrieve from an empty corpus");
    if (k == 0) throw std::invalid_argument("K must be at least 1");
    if (index.size() != corpus.videos().size()) throw std::invalid_argument("index does not match corpus");
    const auto scores = index.score_all(query, model.config().modalities);
    std::vector<RankedVideo> ranked;
    ranked.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) ranked.push_back({corpus.videos()[i].id, scores[i].score});
    std::sort(ranked.begin(), ranked.end(), [](const RankedVideo& a, const RankedVideo& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.video_id < b.video_id;
    });
    if (ranked.size() > k) ranked.resize(k);
    return ranked;
}

std::vector<RankedVideo> rank_videos(const RetrieverModel& model, const Corpus& corpus,
                                     std::span<const VideoEncoding> encodings, const ModalityQueryReps& query,
                                     std::size_t k) {
    if (corpus.videos().empty()) throw DataError("cannot retrieve from an empty corpus");
    if (encodings.size() != corpus.videos().size()) throw std::invalid_argument("encodings do not match corpus");
    return rank_videos(model, corpus, VideoIndex(encodings), query, k);
}

std::vector<RankedVideo> retrieve_topk(const RetrieverModel& model, const Corpus& corpus, const Query& query,
                                       std::size_t k) {
    const auto encodings = encode_corpus(model, corpus);
    return rank_videos(model, corpus, encodings, model.encode_query(query), k);
}

}  // namespace prem
