#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "prem/span.hpp"

namespace prem {

/// Malformed or inconsistent corpus data.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Modality { image, subtitle };

const char* modality_name(Modality m);

struct ClipFeature {
    std::vector<double> image;
    std::optional<std::vector<double>> subtitle;

    friend bool operator==(const ClipFeature&, const ClipFeature&) = default;
};

struct Video {
    std::string id;
    std::vector<ClipFeature> clips;

    friend bool operator==(const Video&, const Video&) = default;
};

/// Ground truth kept by the synthetic generator; absent for external data.
struct PlantedSignal {
    Modality modality = Modality::image;
    std::vector<double> concept_vector;

    friend bool operator==(const PlantedSignal&, const PlantedSignal&) = default;
};

struct Query {
    std::string id;
    std::vector<std::vector<double>> tokens;
    std::string target_video;
    Span span;
    std::optional<PlantedSignal> planted;

    friend bool operator==(const Query&, const Query&) = default;
};

struct FeatureDims {
    std::size_t image = 0;
    std::size_t subtitle = 0;
    std::size_t text = 0;

    friend bool operator==(const FeatureDims&, const FeatureDims&) = default;
};

class Corpus {
public:
    Corpus() = default;
    /// Validates every invariant; throws DataError naming the offending item.
    Corpus(std::string split, FeatureDims dims, std::vector<Video> videos, std::vector<Query> queries);

    const std::string& split() const { return split_; }
    const FeatureDims& dims() const { return dims_; }
    const std::vector<Video>& videos() const { return videos_; }
    const std::vector<Query>& queries() const { return queries_; }

    std::size_t video_index(const std::string& id) const;
    const Video& video(const std::string& id) const { return videos_[video_index(id)]; }
    /// True when at least one clip carries a subtitle vector.
    bool has_subtitles() const;

    /// Subtitle as the model sees it: zeros of length dims().subtitle when absent.
    std::vector<double> materialized_subtitle(const ClipFeature& clip) const;

    friend bool operator==(const Corpus& a, const Corpus& b) {
        return a.split_ == b.split_ && a.dims_ == b.dims_ && a.videos_ == b.videos_ && a.queries_ == b.queries_;
    }

private:
    std::string split_;
    FeatureDims dims_;
    std::vector<Video> videos_;
    std::vector<Query> queries_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct SyntheticSpec {
    std::size_t video_count = 100;
    /// Videos in the train split; 0 means video_count. Other splits use video_count.
    std::size_t train_video_count = 0;
    std::size_t clips_per_video = 16;
    std::size_t image_dim = 16;
    std::size_t subtitle_dim = 16;
    std::size_t text_dim = 16;
    std::size_t queries_per_video = 5;
    std::size_t moment_len_min = 1;
    std::size_t moment_len_max = 3;
    double visual_ratio = 0.5;
    double noise_sigma = 0.05;
    std::uint64_t seed = 1;

    std::size_t tokens_min = 6;
    std::size_t tokens_max = 14;
    /// Share of a query's tokens that carry the concept; the rest are filler words.
    double content_token_ratio = 0.5;
    /// Concept strength on clips directly next to the span (weak relevance).
    double adjacent_attenuation = 0.5;
    /// Probability that a clip outside any subtitle-planted span has no subtitle.
    double subtitle_drop_rate = 0.1;
    /// Use coordinate-embedding projections instead of random orthonormal ones.
    bool identity_projections = false;

    /// Throws DataError when counts or ranges are infeasible.
    void validate() const;
    std::size_t concept_dim() const;
    std::size_t videos_in(const std::string& split) const;

    friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

/// Latent-to-feature maps shared by every split generated from one seed.
struct SyntheticProjections {
    std::vector<std::vector<double>> image;     // image_dim x concept_dim
    std::vector<std::vector<double>> subtitle;  // subtitle_dim x concept_dim
    std::vector<std::vector<double>> text;      // text_dim x concept_dim
    std::vector<double> visual_word;            // text_dim word-type offsets
    std::vector<double> dialogue_word;
    std::vector<std::vector<double>> filler_words;
};

SyntheticProjections make_projections(const SyntheticSpec& spec);
std::vector<double> project(const std::vector<std::vector<double>>& matrix, const std::vector<double>& v);

/// One split of a synthetic corpus. Deterministic in (spec, split).
Corpus generate(const SyntheticSpec& spec, const std::string& split = "train");

struct CorpusStats {
    std::size_t videos = 0;
    std::size_t queries = 0;
    double mean_span_len = 0.0;
    double mean_video_len = 0.0;
    double span_ratio() const { return mean_video_len > 0 ? mean_span_len / mean_video_len : 0.0; }
};

CorpusStats corpus_stats(const Corpus& corpus);

// ---------------------------------------------------------------------------
// Storage: <root>/corpus.meta.json plus <root>/<split>/{videos,queries}.jsonl.

/// Writes the split's jsonl files and records the split (and dims) in the
/// root meta file, creating it when missing.
void save_corpus(const Corpus& corpus, const std::filesystem::path& root,
                 const std::optional<SyntheticSpec>& spec = std::nullopt);
Corpus load_corpus(const std::filesystem::path& root, const std::string& split);
std::optional<SyntheticSpec> load_corpus_spec(const std::filesystem::path& root);

}  // namespace prem
