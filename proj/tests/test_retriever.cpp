#include <cmath>
#include <random>

#include "doctest.h"
#include "prem/retriever.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace prem;

namespace {

SyntheticSpec tiny_spec(std::uint64_t seed = 1) {
    SyntheticSpec s;
    s.video_count = 6;
    s.clips_per_video = 6;
    s.image_dim = s.subtitle_dim = s.text_dim = 6;
    s.queries_per_video = 2;
    s.moment_len_max = 2;
    s.seed = seed;
    return s;
}

RetrieverConfig tiny_config(PoolingMode pooling = PoolingMode::modality_specific) {
    RetrieverConfig c;
    c.dims = {8, 16, 2, 16};
    c.pooling = pooling;
    return c;
}

Tensor rows(std::size_t n, std::size_t d, const std::vector<double>& v) { return Tensor::from({n, d}, v); }

ModalityQueryReps reps(const std::vector<double>& qi, const std::vector<double>& qs) {
    ModalityQueryReps r;
    r.q_image = Tensor::from({1, qi.size()}, qi);
    r.q_subtitle = Tensor::from({1, qs.size()}, qs);
    r.tokens = r.q_image;
    return r;
}

double brute_score(const ModalityQueryReps& q, const VideoEncoding& v) {
    double bi = -2.0, bs = -2.0;
    for (std::size_t j = 0; j < v.length(); ++j) {
        auto img = v.image.values().subspan(j * v.image.dim(1), v.image.dim(1));
        auto sub = v.subtitle.values().subspan(j * v.subtitle.dim(1), v.subtitle.dim(1));
        bi = std::max(bi, cosine_value(q.q_image.values(), img));
        bs = std::max(bs, cosine_value(q.q_subtitle.values(), sub));
    }
    return (bi + bs) / 2.0;
}

}  // namespace

TEST_CASE("query pooling") {
    const auto corpus = generate(tiny_spec());
    RetrieverModel model(corpus.dims(), tiny_config(), 3);
    SUBCASE("single token") {
        Query q = corpus.queries()[0];
        q.tokens.resize(1);
        const auto r = model.encode_query(q);
        CHECK(r.alpha_image == std::vector<double>{1.0});
        CHECK(r.alpha_subtitle == std::vector<double>{1.0});
        CHECK(r.q_image.to_vector() == r.tokens.to_vector());
        CHECK(r.q_subtitle.to_vector() == r.tokens.to_vector());
    }
    SUBCASE("attention weights are distributions") {
        for (const auto& q : corpus.queries()) {
            const auto r = model.encode_query(q);
            for (const auto* alpha : {&r.alpha_image, &r.alpha_subtitle}) {
                double s = 0.0;
                for (double a : *alpha) {
                    CHECK(a >= 0.0);
                    s += a;
                }
                CHECK(std::abs(s - 1.0) <= 1e-9);
            }
            CHECK(r.q_image.to_vector() != r.q_subtitle.to_vector());
        }
    }
    SUBCASE("mean and max pooling collapse the modalities") {
        for (auto mode : {PoolingMode::mean, PoolingMode::max}) {
            RetrieverModel m(corpus.dims(), tiny_config(mode), 3);
            for (const auto& q : corpus.queries()) {
                const auto r = m.encode_query(q);
                CHECK(r.q_image.to_vector() == r.q_subtitle.to_vector());
            }
        }
    }
    SUBCASE("empty query") {
        Query q = corpus.queries()[0];
        q.tokens.clear();
        CHECK_THROWS(model.encode_query(q));
    }
}

TEST_CASE("video encoder") {
    const auto corpus = generate(tiny_spec());
    RetrieverModel model(corpus.dims(), tiny_config(), 3);
    const Video& v = corpus.videos()[0];

    SUBCASE("one clip without subtitle") {
        const Video one{"one", {{v.clips[0].image, std::nullopt}}};
        const auto e = model.encode_video(one);
        CHECK(e.length() == 1);
        for (double x : e.subtitle.values()) CHECK(std::isfinite(x));
    }
    SUBCASE("clip order matters") {
        Video swapped = v;
        std::swap(swapped.clips[0], swapped.clips[1]);
        const auto a = model.encode_video(v), b = model.encode_video(swapped);
        const auto row = [](const Tensor& t, std::size_t r) {
            auto s = t.values().subspan(r * t.dim(1), t.dim(1));
            return std::vector<double>(s.begin(), s.end());
        };
        CHECK(row(a.image, 0) != row(b.image, 1));
    }
    SUBCASE("diagonal attention isolates clips") {
        Video perturbed = v;
        for (double& x : perturbed.clips[3].image) x += 1.0;
        const EncodeOptions diag{true};
        const auto a = model.encode_video(v, diag), b = model.encode_video(perturbed, diag);
        const std::size_t d = a.image.dim(1);
        for (std::size_t j = 0; j < v.clips.size(); ++j) {
            auto ai = a.image.values().subspan(j * d, d), bi = b.image.values().subspan(j * d, d);
            const bool same = std::equal(ai.begin(), ai.end(), bi.begin());
            CHECK(same == (j != 3));
            auto as = a.subtitle.values().subspan(j * d, d), bs = b.subtitle.values().subspan(j * d, d);
            CHECK(std::equal(as.begin(), as.end(), bs.begin()));
        }
        // Full attention propagates the change.
        const auto fa = model.encode_video(v), fb = model.encode_video(perturbed);
        CHECK(fa.image.values()[0] != fb.image.values()[0]);
    }
}

TEST_CASE("score_video constructions") {
    SUBCASE("constant video") {
        const VideoEncoding v{rows(3, 2, {1, 2, 1, 2, 1, 2}), rows(3, 2, {0, 1, 0, 1, 0, 1})};
        const auto s = score_video(reps({1, 0}, {1, 1}), v);
        CHECK(s.image_index == 0);
        CHECK(s.subtitle_index == 0);
        CHECK(s.phi_image == cosine_value(std::vector<double>{1, 0}, std::vector<double>{1, 2}));
        CHECK(s.score == (s.phi_image + s.phi_subtitle) / 2.0);
    }
    SUBCASE("orthogonal image, matching subtitle") {
        const VideoEncoding v{rows(2, 2, {0, 1, 0, 2}), rows(2, 2, {1, 0, 0.3, 0.7})};
        const auto s = score_video(reps({1, 0}, {0.3, 0.7}), v);
        CHECK(s.phi_image == 0.0);
        CHECK(s.phi_subtitle == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(s.score == doctest::Approx(0.5).epsilon(1e-15));
        CHECK(s.subtitle_index == 1);
    }
    SUBCASE("single modality") {
        const VideoEncoding v{rows(1, 2, {1, 0}), rows(1, 2, {0, 1})};
        CHECK(score_video(reps({1, 0}, {1, 0}), v, {true, false}).score == 1.0);
        CHECK(score_video(reps({1, 0}, {1, 0}), v, {false, true}).score == 0.0);
        CHECK_THROWS(score_video(reps({1, 0}, {1, 0}), v, {false, false}));
    }
}

TEST_CASE("score_video matches a brute-force double loop on random pairs") {
    std::mt19937_64 rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t len = 1 + rng() % 7;
        const auto q = reps(prem::testing::random_param({5}, rng()).to_vector(),
                            prem::testing::random_param({5}, rng()).to_vector());
        const VideoEncoding v{prem::testing::random_param({len, 5}, rng()), prem::testing::random_param({len, 5}, rng())};
        const auto s = score_video(q, v);
        CHECK(std::abs(s.score - brute_score(q, v)) <= 1e-12);
        CHECK(s.score >= -1.0);
        CHECK(s.score <= 1.0);
    }
}

TEST_CASE("relevance sampling") {
    const std::vector<double> img{0.9, 0.1, 0.2}, sub{0.3, 0.8, 0.1};
    auto r = sample_relevance(img, sub, {0, 0});
    CHECK(r.strong.image == 0);
    CHECK(r.strong.subtitle == 0);
    REQUIRE(r.weak);
    CHECK(r.weak->image == 2);
    CHECK(r.weak->subtitle == 1);
    CHECK(r.strong_score == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(r.weak_score == doctest::Approx(0.5).epsilon(1e-15));

    r = sample_relevance(img, sub, {0, 2});
    CHECK_FALSE(r.weak);
    CHECK(r.strong.subtitle == 1);
    CHECK_THROWS(sample_relevance(img, sub, {1, 3}));
}

TEST_CASE("strong samples stay inside the span and weak ones outside") {
    for (std::uint64_t seed = 1; seed <= 100; ++seed) {
        auto spec = tiny_spec(seed);
        spec.video_count = 2;
        const auto corpus = generate(spec);
        RetrieverModel model(corpus.dims(), tiny_config(), seed);
        for (const auto& q : corpus.queries()) {
            const auto r = sample_relevance(model.encode_query(q), model.encode_video(corpus.video(q.target_video)),
                                            q.span);
            CHECK(q.span.contains(r.strong.image));
            CHECK(q.span.contains(r.strong.subtitle));
            if (r.weak) {
                CHECK_FALSE(q.span.contains(r.weak->image));
                CHECK_FALSE(q.span.contains(r.weak->subtitle));
            }
        }
    }
}

TEST_CASE("contrastive loss closed forms") {
    // Two identical videos and queries: the strong logits tie, so L^v_++ = L^q = ln 2.
    const VideoEncoding v{rows(2, 2, {1, 0, 0, 1}), rows(2, 2, {1, 1, 1, -1})};
    const auto q = reps({1, 0.5}, {0.2, 1});
    const std::vector<VideoEncoding> videos{v, v};
    const std::vector<ContrastiveItem> items{{&q, 0, {0, 0}}, {&q, 1, {0, 0}}};
    ContrastiveBreakdown b;
    const double loss = contrastive_loss(items, videos, {}, &b).item();
    CHECK(std::abs(b.strong - std::log(2.0)) <= 1e-9);
    CHECK(std::abs(b.video_to_query - std::log(2.0)) <= 1e-9);
    CHECK(std::abs(loss - (b.strong + 0.5 * b.weak + b.video_to_query)) <= 1e-12);

    // A perfect match against an orthogonal negative drives L^v_++ to zero.
    const VideoEncoding pos{rows(1, 2, {1, 0}), rows(1, 2, {1, 0})};
    const VideoEncoding neg{rows(1, 2, {0, 1}), rows(1, 2, {0, 1})};
    const auto qa = reps({1, 0}, {1, 0}), qb = reps({0, 1}, {0, 1});
    const std::vector<VideoEncoding> pv{pos, neg};
    const std::vector<ContrastiveItem> sharp{{&qa, 0, {0, 0}}, {&qb, 1, {0, 0}}};
    contrastive_loss(sharp, pv, {}, &b);
    CHECK(b.strong < 1e-40);

    CHECK_THROWS_AS(contrastive_loss(std::span(items).first(1), videos, {}), std::invalid_argument);
    CHECK_THROWS_AS(contrastive_loss(items, videos, {0.0, 0.5, {}}), std::invalid_argument);
}

TEST_CASE("corpus ranking") {
    const auto corpus = generate(tiny_spec());
    RetrieverModel model(corpus.dims(), tiny_config(), 4);
    const auto enc = encode_corpus(model, corpus);
    std::vector<std::string> ids;
    for (const auto& v : corpus.videos()) ids.push_back(v.id);

    SUBCASE("precomputed index equals brute force and on-the-fly retrieval") {
        for (const auto& q : corpus.queries()) {
            const auto qr = model.encode_query(q);
            const auto fast = rank_videos(model, corpus, VideoIndex(enc), qr, ids.size());
            const auto naive = prem::testing::naive_rank(qr, enc, ids, {});
            REQUIRE(fast.size() == naive.size());
            for (std::size_t i = 0; i < fast.size(); ++i) {
                CHECK(fast[i].video_id == naive[i].video_id);
                CHECK(fast[i].score == naive[i].score);
                const auto& e = enc[corpus.video_index(fast[i].video_id)];
                CHECK(fast[i].score == score_video(qr, e).score);
            }
            const auto fresh = retrieve_topk(model, corpus, q, 3);
            REQUIRE(fresh.size() == 3);
            for (std::size_t i = 0; i < 3; ++i) CHECK(fresh[i].score == fast[i].score);
        }
    }
    SUBCASE("K beyond the corpus returns a permutation") {
        auto r = retrieve_topk(model, corpus, corpus.queries()[0], 100);
        CHECK(r.size() == ids.size());
        std::vector<std::string> got;
        for (const auto& x : r) got.push_back(x.video_id);
        std::sort(got.begin(), got.end());
        CHECK(got == ids);
        CHECK_THROWS_AS(retrieve_topk(model, corpus, corpus.queries()[0], 0), std::invalid_argument);
    }
    SUBCASE("single-video corpus") {
        const Corpus one("test", corpus.dims(), {corpus.videos()[0]}, {});
        const auto r = retrieve_topk(model, one, corpus.queries()[0], 5);
        REQUIRE(r.size() == 1);
        CHECK(r[0].video_id == corpus.videos()[0].id);
    }
}

TEST_CASE("retriever parameters share one namespace") {
    RetrieverModel model({6, 6, 6}, tiny_config(), 1);
    for (const auto& [name, t] : model.params().all()) CHECK(name.rfind("retriever.", 0) == 0);
}

TEST_CASE("pooling mode leaves the parameter set untouched") {
    auto layout = [](PoolingMode mode) {
        auto cfg = tiny_config();
        cfg.pooling = mode;
        RetrieverModel model({6, 6, 6}, cfg, 1);
        std::vector<std::pair<std::string, std::vector<double>>> out;
        for (const auto& [name, t] : model.params().all()) out.emplace_back(name, std::vector<double>(t.values().begin(), t.values().end()));
        return out;
    };
    const auto base = layout(PoolingMode::modality_specific);
    CHECK(layout(PoolingMode::mean) == base);
    CHECK(layout(PoolingMode::max) == base);
}
