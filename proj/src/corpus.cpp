#include "prem/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"
#include "prem/json_io.hpp"

namespace prem {

using nlohmann::json;

const char* modality_name(Modality m) { return m == Modality::image ? "image" : "subtitle"; }

// ---------------------------------------------------------------------------
// Corpus

Corpus::Corpus(std::string split, FeatureDims dims, std::vector<Video> videos, std::vector<Query> queries)
    : split_(std::move(split)), dims_(dims), videos_(std::move(videos)), queries_(std::move(queries)) {
    if (dims_.image == 0 || dims_.text == 0) throw DataError("image and text dimensions must be positive");
    for (std::size_t i = 0; i < videos_.size(); ++i) {
        const Video& v = videos_[i];
        if (!index_.emplace(v.id, i).second) throw DataError("duplicate video id '" + v.id + "'");
        if (v.clips.empty()) throw DataError("video '" + v.id + "' has no clips");
        for (std::size_t c = 0; c < v.clips.size(); ++c) {
            const auto& clip = v.clips[c];
            if (clip.image.size() != dims_.image)
                throw DataError("video '" + v.id + "' clip " + std::to_string(c) + ": image dimension " +
                                std::to_string(clip.image.size()) + ", expected " + std::to_string(dims_.image));
            if (clip.subtitle && clip.subtitle->size() != dims_.subtitle)
                throw DataError("video '" + v.id + "' clip " + std::to_string(c) + ": subtitle dimension " +
                                std::to_string(clip.subtitle->size()) + ", expected " +
                                std::to_string(dims_.subtitle));
        }
    }
    for (const Query& q : queries_) {
        if (q.tokens.empty()) throw DataError("query '" + q.id + "' has no tokens");
        for (const auto& t : q.tokens)
            if (t.size() != dims_.text)
                throw DataError("query '" + q.id + "': token dimension " + std::to_string(t.size()) +
                                ", expected " + std::to_string(dims_.text));
        auto it = index_.find(q.target_video);
        if (it == index_.end())
            throw DataError("query '" + q.id + "' references missing video id '" + q.target_video + "'");
        const auto len = videos_[it->second].clips.size();
        if (q.span.start > q.span.end || q.span.end >= len)
            throw DataError("query '" + q.id + "' span [" + std::to_string(q.span.start) + "," +
                            std::to_string(q.span.end) + "] outside video '" + q.target_video + "' of " +
                            std::to_string(len) + " clips");
    }
}

std::size_t Corpus::video_index(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw DataError("unknown video id '" + id + "'");
    return it->second;
}

bool Corpus::has_subtitles() const {
    for (const auto& v : videos_)
        for (const auto& c : v.clips)
            if (c.subtitle) return true;
    return false;
}

std::vector<double> Corpus::materialized_subtitle(const ClipFeature& clip) const {
    if (clip.subtitle) return *clip.subtitle;
    return std::vector<double>(dims_.subtitle, 0.0);
}

// ---------------------------------------------------------------------------
// Synthetic generation

void SyntheticSpec::validate() const {
    if (video_count == 0 || clips_per_video == 0 || queries_per_video == 0)
        throw DataError("synthetic spec counts must be positive");
    if (image_dim == 0 || subtitle_dim == 0 || text_dim == 0) throw DataError("feature dimensions must be positive");
    if (moment_len_min == 0 || moment_len_min > moment_len_max)
        throw DataError("moment_len_range must satisfy 1 <= min <= max");
    if (moment_len_max > clips_per_video)
        throw DataError("moment_len_range max " + std::to_string(moment_len_max) + " exceeds clips_per_video " +
                        std::to_string(clips_per_video));
    if (tokens_min == 0 || tokens_min > tokens_max) throw DataError("token count range must satisfy 1 <= min <= max");
    if (!(visual_ratio >= 0.0 && visual_ratio <= 1.0)) throw DataError("visual_ratio must lie in [0, 1]");
    if (!(noise_sigma >= 0.0)) throw DataError("noise_sigma must be nonnegative");
    if (!(content_token_ratio > 0.0 && content_token_ratio <= 1.0))
        throw DataError("content_token_ratio must lie in (0, 1]");
    if (!(subtitle_drop_rate >= 0.0 && subtitle_drop_rate <= 1.0))
        throw DataError("subtitle_drop_rate must lie in [0, 1]");
}

std::size_t SyntheticSpec::concept_dim() const { return std::min({image_dim, subtitle_dim, text_dim}); }

std::size_t SyntheticSpec::videos_in(const std::string& split) const {
    return split == "train" && train_video_count > 0 ? train_video_count : video_count;
}

namespace {

using Matrix = std::vector<std::vector<double>>;

std::uint64_t split_salt(const std::string& split) {
    // FNV-1a
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : split) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::vector<double> gaussian(std::mt19937_64& rng, std::size_t n, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    std::vector<double> v(n);
    for (auto& x : v) x = stddev * dist(rng);
    return v;
}

void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
        for (double& x : v) x /= n;
}

// rows x cols with orthonormal columns (rows >= cols).
Matrix orthonormal_columns(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
    std::vector<std::vector<double>> basis;
    while (basis.size() < cols) {
        auto v = gaussian(rng, rows, 1.0);
        for (const auto& b : basis) {
            double d = 0.0;
            for (std::size_t i = 0; i < rows; ++i) d += v[i] * b[i];
            for (std::size_t i = 0; i < rows; ++i) v[i] -= d * b[i];
        }
        double n = 0.0;
        for (double x : v) n += x * x;
        if (n < 1e-10) continue;
        normalize(v);
        basis.push_back(std::move(v));
    }
    Matrix m(rows, std::vector<double>(cols));
    for (std::size_t c = 0; c < cols; ++c)
        for (std::size_t r = 0; r < rows; ++r) m[r][c] = basis[c][r];
    return m;
}

Matrix identity_embedding(std::size_t rows, std::size_t cols) {
    Matrix m(rows, std::vector<double>(cols, 0.0));
    for (std::size_t i = 0; i < cols; ++i) m[i][i] = 1.0;
    return m;
}

void axpy(std::vector<double>& y, double a, const std::vector<double>& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

struct PlacedQuery {
    Modality modality;
    Span span;
};

// Same-channel spans never overlap, so every in-span clip carries exactly one concept.
std::vector<PlacedQuery> place_queries(const SyntheticSpec& spec, std::mt19937_64& rng) {
    std::bernoulli_distribution visual(spec.visual_ratio);
    std::uniform_int_distribution<std::size_t> len_dist(spec.moment_len_min, spec.moment_len_max);
    std::vector<PlacedQuery> placed(spec.queries_per_video);
    for (auto& p : placed) p.modality = visual(rng) ? Modality::image : Modality::subtitle;

    for (int restart = 0; restart < 200; ++restart) {
        std::vector<bool> used_img(spec.clips_per_video, false), used_sub(spec.clips_per_video, false);
        bool ok = true;
        for (auto& p : placed) {
            auto& used = p.modality == Modality::image ? used_img : used_sub;
            bool found = false;
            for (int attempt = 0; attempt < 200 && !found; ++attempt) {
                const std::size_t len = len_dist(rng);
                std::uniform_int_distribution<std::size_t> start_dist(0, spec.clips_per_video - len);
                const std::size_t s = start_dist(rng);
                bool free = true;
                for (std::size_t c = s; c < s + len; ++c) free = free && !used[c];
                if (!free) continue;
                for (std::size_t c = s; c < s + len; ++c) used[c] = true;
                p.span = {s, s + len - 1};
                found = true;
            }
            if (!found) {
                ok = false;
                break;
            }
        }
        if (ok) return placed;
    }
    throw DataError("cannot place " + std::to_string(spec.queries_per_video) + " non-overlapping moments in a " +
                    std::to_string(spec.clips_per_video) + "-clip video");
}

}  // namespace

SyntheticProjections make_projections(const SyntheticSpec& spec) {
    std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ull + 17);
    const std::size_t dc = spec.concept_dim();
    SyntheticProjections p;
    if (spec.identity_projections) {
        p.image = identity_embedding(spec.image_dim, dc);
        p.subtitle = identity_embedding(spec.subtitle_dim, dc);
        p.text = identity_embedding(spec.text_dim, dc);
    } else {
        p.image = orthonormal_columns(rng, spec.image_dim, dc);
        p.subtitle = orthonormal_columns(rng, spec.subtitle_dim, dc);
        p.text = orthonormal_columns(rng, spec.text_dim, dc);
    }
    p.visual_word = gaussian(rng, spec.text_dim, 1.0);
    p.dialogue_word = gaussian(rng, spec.text_dim, 1.0);
    normalize(p.visual_word);
    normalize(p.dialogue_word);
    for (int i = 0; i < 8; ++i) {
        auto f = gaussian(rng, spec.text_dim, 1.0);
        normalize(f);
        p.filler_words.push_back(std::move(f));
    }
    return p;
}

std::vector<double> project(const Matrix& matrix, const std::vector<double>& v) {
    std::vector<double> out(matrix.size(), 0.0);
    for (std::size_t r = 0; r < matrix.size(); ++r)
        for (std::size_t c = 0; c < v.size(); ++c) out[r] += matrix[r][c] * v[c];
    return out;
}

Corpus generate(const SyntheticSpec& spec, const std::string& split) {
    spec.validate();
    const SyntheticProjections proj = make_projections(spec);
    std::mt19937_64 rng(spec.seed ^ split_salt(split));
    const std::size_t dc = spec.concept_dim();
    const double bg_img = 1.0 / std::sqrt(static_cast<double>(spec.image_dim));
    const double bg_sub = 1.0 / std::sqrt(static_cast<double>(spec.subtitle_dim));
    const double word_type_scale = 0.5;

    std::uniform_int_distribution<std::size_t> token_count(spec.tokens_min, spec.tokens_max);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<std::size_t> filler_pick(0, proj.filler_words.size() - 1);

    std::vector<Video> videos;
    std::vector<Query> queries;
    const std::size_t video_total = spec.videos_in(split);
    for (std::size_t vi = 0; vi < video_total; ++vi) {
        char vid_buf[64];
        std::snprintf(vid_buf, sizeof vid_buf, "%s_v%04zu", split.c_str(), vi);
        Video video{vid_buf, {}};
        std::vector<std::vector<double>> img(spec.clips_per_video), sub(spec.clips_per_video);
        for (std::size_t c = 0; c < spec.clips_per_video; ++c) {
            img[c] = gaussian(rng, spec.image_dim, bg_img);
            sub[c] = gaussian(rng, spec.subtitle_dim, bg_sub);
        }
        std::vector<bool> sub_required(spec.clips_per_video, false);

        const auto placed = place_queries(spec, rng);
        std::vector<std::vector<bool>> owned(2, std::vector<bool>(spec.clips_per_video, false));
        for (const auto& p : placed)
            for (std::size_t c = p.span.start; c <= p.span.end; ++c) owned[p.modality == Modality::image ? 0 : 1][c] = true;

        for (std::size_t qi = 0; qi < placed.size(); ++qi) {
            const auto& p = placed[qi];
            auto latent = gaussian(rng, dc, 1.0);
            normalize(latent);

            const bool is_image = p.modality == Modality::image;
            const auto& channel_proj = is_image ? proj.image : proj.subtitle;
            auto& channel = is_image ? img : sub;
            const auto& own = owned[is_image ? 0 : 1];
            const auto signal = project(channel_proj, latent);
            for (std::size_t c = p.span.start; c <= p.span.end; ++c) {
                channel[c] = gaussian(rng, signal.size(), spec.noise_sigma);
                axpy(channel[c], 1.0, signal);
                if (!is_image) sub_required[c] = true;
            }
            for (long adj : {static_cast<long>(p.span.start) - 1, static_cast<long>(p.span.end) + 1}) {
                if (adj < 0 || adj >= static_cast<long>(spec.clips_per_video)) continue;
                const auto c = static_cast<std::size_t>(adj);
                if (own[c]) continue;
                axpy(channel[c], spec.adjacent_attenuation, signal);
                if (!is_image) sub_required[c] = true;
            }

            Query q;
            char qid_buf[80];
            std::snprintf(qid_buf, sizeof qid_buf, "%s_q%04zu_%zu", split.c_str(), vi, qi);
            q.id = qid_buf;
            q.target_video = video.id;
            q.span = p.span;
            q.planted = PlantedSignal{p.modality, latent};
            const auto text_signal = project(proj.text, latent);
            const auto& word_type = is_image ? proj.visual_word : proj.dialogue_word;
            const std::size_t n_tokens = token_count(rng);
            std::size_t n_content = 0;
            for (std::size_t t = 0; t < n_tokens; ++t) {
                const bool last_chance = n_content == 0 && t + 1 == n_tokens;
                const bool content = last_chance || unit(rng) < spec.content_token_ratio;
                std::vector<double> tok;
                if (content) {
                    tok = gaussian(rng, spec.text_dim, spec.noise_sigma);
                    axpy(tok, 1.0, text_signal);
                    axpy(tok, word_type_scale, word_type);
                    ++n_content;
                } else {
                    tok = gaussian(rng, spec.text_dim, spec.noise_sigma);
                    axpy(tok, 1.0, proj.filler_words[filler_pick(rng)]);
                }
                q.tokens.push_back(std::move(tok));
            }
            queries.push_back(std::move(q));
        }

        for (std::size_t c = 0; c < spec.clips_per_video; ++c) {
            ClipFeature clip;
            clip.image = std::move(img[c]);
            const bool drop = !sub_required[c] && unit(rng) < spec.subtitle_drop_rate;
            if (!drop) clip.subtitle = std::move(sub[c]);
            video.clips.push_back(std::move(clip));
        }
        videos.push_back(std::move(video));
    }
    return Corpus(split, {spec.image_dim, spec.subtitle_dim, spec.text_dim}, std::move(videos), std::move(queries));
}

CorpusStats corpus_stats(const Corpus& corpus) {
    CorpusStats s;
    s.videos = corpus.videos().size();
    s.queries = corpus.queries().size();
    double clips = 0.0;
    for (const auto& v : corpus.videos()) clips += static_cast<double>(v.clips.size());
    if (s.videos) s.mean_video_len = clips / static_cast<double>(s.videos);
    double span = 0.0;
    for (const auto& q : corpus.queries()) span += static_cast<double>(q.span.length());
    if (s.queries) s.mean_span_len = span / static_cast<double>(s.queries);
    return s;
}

// ---------------------------------------------------------------------------
// Storage

namespace {

constexpr const char* kMetaFile = "corpus.meta.json";
constexpr const char* kFormat = "prem-corpus-1";

void write_number_array(std::ostream& os, const std::vector<double>& v) {
    char buf[32];
    os << '[';
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ',';
        std::snprintf(buf, sizeof buf, "%.17g", v[i]);
        os << buf;
    }
    os << ']';
}

std::vector<double> read_number_array(const json& j, std::size_t expected, const std::string& what) {
    if (!j.is_array()) throw DataError(what + " must be an array of numbers");
    std::vector<double> v;
    v.reserve(j.size());
    for (const auto& x : j) {
        if (!x.is_number()) throw DataError(what + " contains a non-number");
        v.push_back(x.get<double>());
    }
    if (expected && v.size() != expected)
        throw DataError(what + " has dimension " + std::to_string(v.size()) + ", expected " + std::to_string(expected));
    return v;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot open " + path.string() + " for writing");
    return out;
}

json read_meta(const std::filesystem::path& root) {
    const auto path = root / kMetaFile;
    std::ifstream in(path);
    if (!in) throw DataError("missing " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw DataError(path.string() + ": " + e.what());
    }
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& f) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            f(json::parse(line));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const DataError& e) {
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

}  // namespace

void save_corpus(const Corpus& corpus, const std::filesystem::path& root, const std::optional<SyntheticSpec>& spec) {
    namespace fs = std::filesystem;
    const fs::path dir = root / corpus.split();
    fs::create_directories(dir);

    json meta;
    if (fs::exists(root / kMetaFile)) {
        meta = read_meta(root);
        if (meta.contains("dims") &&
            (meta["dims"]["image"] != corpus.dims().image || meta["dims"]["subtitle"] != corpus.dims().subtitle ||
             meta["dims"]["text"] != corpus.dims().text))
            throw DataError("corpus dims disagree with existing " + (root / kMetaFile).string());
    }
    meta["format"] = kFormat;
    meta["dims"] = {{"image", corpus.dims().image}, {"subtitle", corpus.dims().subtitle}, {"text", corpus.dims().text}};
    std::vector<std::string> splits = meta.value("splits", std::vector<std::string>{});
    if (std::find(splits.begin(), splits.end(), corpus.split()) == splits.end()) splits.push_back(corpus.split());
    meta["splits"] = splits;
    if (spec) meta["spec"] = *spec;
    {
        auto out = open_out(root / kMetaFile);
        out << meta.dump(2) << '\n';
    }

    auto vout = open_out(dir / "videos.jsonl");
    for (const auto& v : corpus.videos()) {
        vout << "{\"id\":" << json(v.id).dump() << ",\"clips\":[";
        for (std::size_t c = 0; c < v.clips.size(); ++c) {
            if (c) vout << ',';
            vout << "{\"image\":";
            write_number_array(vout, v.clips[c].image);
            vout << ",\"subtitle\":";
            if (v.clips[c].subtitle)
                write_number_array(vout, *v.clips[c].subtitle);
            else
                vout << "null";
            vout << '}';
        }
        vout << "]}\n";
    }
    auto qout = open_out(dir / "queries.jsonl");
    for (const auto& q : corpus.queries()) {
        qout << "{\"id\":" << json(q.id).dump() << ",\"video_id\":" << json(q.target_video).dump()
             << ",\"span\":[" << q.span.start << ',' << q.span.end << "],\"tokens\":[";
        for (std::size_t t = 0; t < q.tokens.size(); ++t) {
            if (t) qout << ',';
            write_number_array(qout, q.tokens[t]);
        }
        qout << ']';
        if (q.planted) {
            qout << ",\"modality\":\"" << modality_name(q.planted->modality) << "\",\"concept\":";
            write_number_array(qout, q.planted->concept_vector);
        }
        qout << "}\n";
    }
}

Corpus load_corpus(const std::filesystem::path& root, const std::string& split) {
    const json meta = read_meta(root);
    FeatureDims dims;
    try {
        dims.image = meta.at("dims").at("image").get<std::size_t>();
        dims.subtitle = meta.at("dims").at("subtitle").get<std::size_t>();
        dims.text = meta.at("dims").at("text").get<std::size_t>();
    } catch (const json::exception& e) {
        throw DataError((root / kMetaFile).string() + ": " + e.what());
    }
    const auto dir = root / split;

    std::vector<Video> videos;
    for_each_line(dir / "videos.jsonl", [&](const json& j) {
        Video v;
        v.id = j.at("id").get<std::string>();
        for (const auto& c : j.at("clips")) {
            ClipFeature clip;
            clip.image = read_number_array(c.at("image"), dims.image, "video '" + v.id + "' image");
            const auto& s = c.at("subtitle");
            if (!s.is_null()) clip.subtitle = read_number_array(s, dims.subtitle, "video '" + v.id + "' subtitle");
            v.clips.push_back(std::move(clip));
        }
        videos.push_back(std::move(v));
    });

    std::vector<Query> queries;
    for_each_line(dir / "queries.jsonl", [&](const json& j) {
        Query q;
        q.id = j.at("id").get<std::string>();
        q.target_video = j.at("video_id").get<std::string>();
        const auto& span = j.at("span");
        if (!span.is_array() || span.size() != 2) throw DataError("span must be [start, end]");
        q.span = {span[0].get<std::size_t>(), span[1].get<std::size_t>()};
        for (const auto& t : j.at("tokens")) q.tokens.push_back(read_number_array(t, dims.text, "query '" + q.id + "' token"));
        if (j.contains("modality")) {
            PlantedSignal p;
            const auto m = j.at("modality").get<std::string>();
            if (m == "image")
                p.modality = Modality::image;
            else if (m == "subtitle")
                p.modality = Modality::subtitle;
            else
                throw DataError("unknown modality '" + m + "'");
            p.concept_vector = read_number_array(j.at("concept"), 0, "query '" + q.id + "' concept");
            q.planted = std::move(p);
        }
        queries.push_back(std::move(q));
    });

    return Corpus(split, dims, std::move(videos), std::move(queries));
}

std::optional<SyntheticSpec> load_corpus_spec(const std::filesystem::path& root) {
    const json meta = read_meta(root);
    if (!meta.contains("spec")) return std::nullopt;
    return meta.at("spec").get<SyntheticSpec>();
}

}  // namespace prem
