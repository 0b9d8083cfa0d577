#pragma once

#include <cstddef>
#include <vector>

namespace prem {

/// Inclusive clip-index interval.
struct Span {
    std::size_t start = 0;
    std::size_t end = 0;

    std::size_t length() const { return end - start + 1; }
    bool contains(std::size_t clip) const { return clip >= start && clip <= end; }
    friend bool operator==(const Span&, const Span&) = default;
    friend auto operator<=>(const Span&, const Span&) = default;
};

/// |A ∩ B| / |A ∪ B| over inclusive clip-index sets.
double iou(const Span& a, const Span& b);

/// Every span inside [0, video_len) whose IoU with `gt` exceeds `threshold`,
/// ordered by (start, end).
std::vector<Span> sample_positive_spans(const Span& gt, std::size_t video_len, double threshold = 0.7);

struct LengthLimits {
    std::size_t min_len = 1;
    std::size_t max_len = 24;
};

/// All (start, end) with start <= end < video_len and length within limits.
/// Limits are clamped to the video so the result is never empty.
std::vector<Span> enumerate_spans(std::size_t video_len, LengthLimits limits);

struct ScoredSpan {
    Span span;
    double score = 0.0;
};

/// Sort by descending score, ties by (start, end) ascending.
void sort_by_score(std::vector<ScoredSpan>& spans);

/// Sorts by score, then greedy suppression: keep the best, drop any later
/// span with IoU >= threshold against a kept one. Stops after `limit` kept.
std::vector<ScoredSpan> non_maximum_suppression(std::vector<ScoredSpan> spans, double iou_threshold,
                                                std::size_t limit = static_cast<std::size_t>(-1));

}  // namespace prem
