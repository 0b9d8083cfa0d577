#include "prem/span.hpp"

#include <algorithm>

namespace prem {

double iou(const Span& a, const Span& b) {
    const std::size_t lo = std::max(a.start, b.start);
    const std::size_t hi = std::min(a.end, b.end);
    const std::size_t inter = hi >= lo ? hi - lo + 1 : 0;
    const std::size_t uni = a.length() + b.length() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<Span> sample_positive_spans(const Span& gt, std::size_t video_len, double threshold) {
    std::vector<Span> out;
    // A span with IoU > 0 must overlap gt, so only starts/ends near it matter,
    // but the full scan stays cheap at clip granularity.
    for (std::size_t s = 0; s < video_len; ++s)
        for (std::size_t e = s; e < video_len; ++e) {
            const Span cand{s, e};
            if (iou(cand, gt) > threshold) out.push_back(cand);
        }
    return out;
}

std::vector<Span> enumerate_spans(std::size_t video_len, LengthLimits limits) {
    std::vector<Span> out;
    if (video_len == 0) return out;
    std::size_t lo = std::max<std::size_t>(1, std::min(limits.min_len, video_len));
    std::size_t hi = std::min(std::max(limits.max_len, lo), video_len);
    for (std::size_t s = 0; s < video_len; ++s)
        for (std::size_t len = lo; len <= hi && s + len <= video_len; ++len) out.push_back({s, s + len - 1});
    return out;
}

void sort_by_score(std::vector<ScoredSpan>& spans) {
    std::stable_sort(spans.begin(), spans.end(), [](const ScoredSpan& a, const ScoredSpan& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.span < b.span;
    });
}

std::vector<ScoredSpan> non_maximum_suppression(std::vector<ScoredSpan> spans, double iou_threshold,
                                                std::size_t limit) {
    sort_by_score(spans);
    std::vector<ScoredSpan> kept;
    for (const auto& cand : spans) {
        if (kept.size() >= limit) break;
        bool suppressed = false;
        for (const auto& k : kept)
            if (iou(k.span, cand.span) >= iou_threshold) {
                suppressed = true;
                break;
            }
        if (!suppressed) kept.push_back(cand);
    }
    return kept;
}

}  // namespace prem
