#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "prem/localizer.hpp"
#include "prem/retriever.hpp"
#include "support/gradcheck.hpp"

using namespace prem;
using prem::testing::random_param;

namespace {

SyntheticSpec tiny_spec() {
    SyntheticSpec s;
    s.video_count = 4;
    s.clips_per_video = 7;
    s.image_dim = s.subtitle_dim = s.text_dim = 6;
    s.queries_per_video = 2;
    s.moment_len_max = 2;
    return s;
}

LocalizerConfig tiny_config() {
    LocalizerConfig c;
    c.dims = {8, 16, 2, 16};
    return c;
}

Tensor column(const std::vector<double>& v) { return Tensor::from({v.size(), 1}, v); }

BoundaryScores scores(const std::vector<double>& st, const std::vector<double>& ed) { return {column(st), column(ed)}; }

void fill(Tensor t, double value) {
    for (double& x : t.mutable_values()) x = value;
}

}  // namespace

TEST_CASE("modality gates") {
    const std::size_t d = 3;
    std::vector<double> eye(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    const Tensor identity = Tensor::from({d, d}, eye);
    const VideoEncoding video{Tensor::from({2, d}, {0, 1, 0, 1, 0, 0}), Tensor::from({2, d}, {0, 0, 1, 0, 1, 0})};

    SUBCASE("zero query annihilates") {
        ModalityQueryReps q;
        q.q_image = q.q_subtitle = Tensor::zeros({1, d});
        const auto g = apply_gates(video, q, identity, identity);
        for (double x : g.image.values()) CHECK(x == 0.0);
        for (double x : g.subtitle.values()) CHECK(x == 0.0);
    }
    SUBCASE("identity gate on one-hot clips returns the clip") {
        ModalityQueryReps q;
        q.q_image = q.q_subtitle = Tensor::full({1, d}, 1.0);
        const auto g = apply_gates(video, q, identity, identity);
        CHECK(g.image.to_vector() == video.image.to_vector());
        CHECK(g.subtitle.to_vector() == video.subtitle.to_vector());
    }
    SUBCASE("gate weights pass finite differences") {
        Tensor wi = random_param({d, d}, 1), ws = random_param({d, d}, 2);
        const VideoEncoding v{random_param({4, d}, 3).detach(), random_param({4, d}, 4).detach()};
        ModalityQueryReps q;
        q.q_image = random_param({1, d}, 5).detach();
        q.q_subtitle = random_param({1, d}, 6).detach();
        const Tensor w = random_param({4, d}, 7).detach();
        auto r = prem::testing::check_gradients({{"gate_image", wi}, {"gate_subtitle", ws}}, [&] {
            const auto g = apply_gates(v, q, wi, ws);
            return add(sum(mul(g.image, w)), sum(mul(g.subtitle, w)));
        });
        CHECK(r.max_rel_err < 1e-4);
    }
}

TEST_CASE("clip fusion") {
    const Tensor img = random_param({3, 2}, 1).detach(), sub = random_param({3, 2}, 2).detach();
    Linear fc{Tensor::zeros({4, 2}), Tensor::zeros({2}), true};
    const Tensor zero = fuse_clips(img, sub, fc);
    for (double x : zero.values()) CHECK(x == 0.0);
    Linear select{Tensor::from({4, 2}, {1, 0, 0, 1, 0, 0, 0, 0}), Tensor::zeros({2}), true};
    const Tensor out = fuse_clips(img, sub, select);
    CHECK(out.shape() == Shape{3, 2});
    CHECK(out.to_vector() == img.to_vector());
    CHECK_THROWS_AS(fuse_clips(img, random_param({2, 2}, 3), fc), ShapeError);
}

TEST_CASE("fusion with the query") {
    const auto corpus = generate(tiny_spec());
    LocalizerModel model(corpus.dims(), tiny_config(), 5);
    SUBCASE("single clip, single token") {
        const Tensor out = model.fuse_with_query(random_param({1, 8}, 1).detach(), random_param({1, 8}, 2).detach());
        CHECK(out.shape() == Shape{1, 8});
        for (double x : out.values()) CHECK(std::isfinite(x));
    }
    SUBCASE("cross-attention is live") {
        const Tensor clips = random_param({5, 8}, 3).detach(), tokens = random_param({4, 8}, 4).detach();
        const Tensor a = model.fuse_with_query(clips, tokens);
        const Tensor b = model.fuse_with_query(clips, Tensor::zeros({4, 8}));
        CHECK(a.to_vector() != b.to_vector());
    }
    SUBCASE("gradients reach clips and tokens") {
        Tensor clips = random_param({5, 8}, 3), tokens = random_param({4, 8}, 4);
        const Tensor w = random_param({5, 8}, 5).detach();
        Tape tape;
        TapeScope scope(tape);
        tape.backward(sum(mul(model.fuse_with_query(clips, tokens), w)));
        auto nonzero = [](const std::vector<double>& g) {
            return std::any_of(g.begin(), g.end(), [](double x) { return x != 0.0; });
        };
        CHECK(nonzero(clips.grad()));
        CHECK(nonzero(tokens.grad()));
    }
}

TEST_CASE("boundary heads") {
    const auto corpus = generate(tiny_spec());
    LocalizerModel model(corpus.dims(), tiny_config(), 6);
    const auto one = model.boundary_scores(random_param({1, 8}, 1).detach());
    CHECK(one.length() == 1);
    CHECK(one.end.numel() == 1);

    // Shifting the context down one row moves interior scores by one position.
    const std::size_t len = 9;
    const Tensor ctx = random_param({len, 8}, 2).detach();
    std::vector<double> shifted(len * 8, 0.0);
    std::copy_n(ctx.values().begin(), (len - 1) * 8, shifted.begin() + 8);
    const auto a = model.boundary_scores(ctx), b = model.boundary_scores(Tensor::from({len, 8}, shifted));
    // Two width-3 layers see two rows each way; the last input row falls off the end.
    for (std::size_t t = 3; t + 3 <= len; ++t) {
        CHECK(b.start[t] == a.start[t - 1]);
        CHECK(b.end[t] == a.end[t - 1]);
    }
}

TEST_CASE("Shared-Norm loss") {
    CHECK(shared_norm_loss(scores({0.7}, {-1.3}), {}, {0, 0}).item() == 0.0);
    const auto two = shared_norm_terms(scores({0.4, 0.4}, {2.0, 2.0}), {}, {0, 1});
    CHECK(std::abs(two.start.item() - std::log(2.0)) <= 1e-15);
    CHECK(std::abs(two.end.item() - std::log(2.0)) <= 1e-15);
    CHECK_THROWS_AS(shared_norm_loss(scores({1, 2}, {1, 2}), {}, {1, 2}), std::out_of_range);

    std::mt19937_64 rng(3);
    std::normal_distribution<double> n(0.0, 2.0);
    for (int trial = 0; trial < 20; ++trial) {
        auto rnd = [&](std::size_t len) {
            std::vector<double> v(len);
            for (auto& x : v) x = n(rng);
            return v;
        };
        const auto ps = rnd(6), pe = rnd(6);
        const std::vector<BoundaryScores> negs{scores(rnd(4), rnd(4)), scores(rnd(9), rnd(9))};
        const Span gt{1, 3};
        // Direct evaluation over the concatenated clip scores.
        auto direct = [&](const std::vector<double>& pos, std::size_t idx, bool start) {
            double z = 0.0;
            for (double x : pos) z += std::exp(x);
            for (const auto& ng : negs)
                for (double x : (start ? ng.start : ng.end).values()) z += std::exp(x);
            return -(pos[idx] - std::log(z));
        };
        const auto terms = shared_norm_terms(scores(ps, pe), negs, gt);
        CHECK(std::abs(terms.start.item() - direct(ps, gt.start, true)) <= 1e-12);
        CHECK(std::abs(terms.end.item() - direct(pe, gt.end, false)) <= 1e-12);
        // The implied distribution over all clips of all videos sums to one.
        double mass = 0.0;
        for (std::size_t j = 0; j < ps.size(); ++j)
            mass += std::exp(-shared_norm_terms(scores(ps, pe), negs, {j, j}).start.item());
        for (const auto& ng : negs)
            for (double x : ng.start.values()) mass += std::exp(x - direct(ps, 0, true) - ps[0]);
        CHECK(std::abs(mass - 1.0) <= 1e-12);
    }
}

TEST_CASE("adversarial BCE") {
    CHECK(std::abs(adversarial_bce(Tensor::zeros({3, 1}), Tensor::zeros({5, 1})).item() - std::log(2.0)) <= 1e-9);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int i = 0; i < 20; ++i) {
        const double x = n(rng);
        // The same span labelled both ways costs at least ln 2.
        CHECK(adversarial_bce(Tensor::from({1, 1}, {x}), Tensor::from({1, 1}, {x})).item() >= std::log(2.0) - 1e-15);
    }
    CHECK_THROWS_AS(adversarial_bce(Tensor::zeros({0}), Tensor::zeros({1})), std::exception);
}

TEST_CASE("zeroed classifier output gives BCE ln 2") {
    const auto corpus = generate(tiny_spec());
    LocalizerModel model(corpus.dims(), tiny_config(), 7);
    fill(model.params().get("localizer.adv.fc3.weight"), 0.0);
    fill(model.params().get("localizer.adv.fc3.bias"), 0.0);
    const auto& q = corpus.queries()[0];
    const auto pass = model.forward(model.encode_query(q), model.encode_video(corpus.video(q.target_video)));
    const std::vector<Span> pos = sample_positive_spans(q.span, pass.scores.length());
    const std::vector<Span> neg{{0, 0}, {2, 4}};
    const Tensor lp = model.span_logits(pass.fused, pos), ln = model.span_logits(pass.fused, neg);
    for (double x : lp.values()) CHECK(x == 0.0);
    CHECK(std::abs(adversarial_bce(lp, ln).item() - std::log(2.0)) <= 1e-9);
}

TEST_CASE("total loss") {
    const Tensor st = Tensor::scalar(1.0), ed = Tensor::scalar(2.0), c = Tensor::scalar(0.5);
    CHECK(total_loss(st, ed, c, 0.8).item() == doctest::Approx(3.4).epsilon(1e-15));
    const auto sn = scores({0.1, 0.5, -0.2}, {0.3, 0.0, 0.9});
    const auto terms = shared_norm_terms(sn, {}, {0, 1});
    CHECK(total_loss(terms.start, terms.end, Tensor::scalar(7.0), 0.0).item() ==
          shared_norm_loss(sn, {}, {0, 1}).item());

    // Gradient of the total is the weighted sum of component gradients.
    Tensor x = random_param({4, 1}, 9), y = random_param({4, 1}, 10), z = random_param({3, 1}, 11);
    auto grads = [&](int which) {
        x.zero_grad();
        y.zero_grad();
        z.zero_grad();
        Tape tape;
        TapeScope scope(tape);
        const auto t = shared_norm_terms({x, y}, {}, {1, 2});
        const Tensor adv = adversarial_bce(z, x);
        const Tensor loss = which == 0 ? total_loss(t.start, t.end, adv, 0.8)
                            : which == 1 ? t.start
                            : which == 2 ? t.end
                                         : adv;
        tape.backward(loss);
        std::vector<double> g = x.grad();
        for (double v : y.grad()) g.push_back(v);
        for (double v : z.grad()) g.push_back(v);
        return g;
    };
    const auto all = grads(0), gs = grads(1), ge = grads(2), gc = grads(3);
    for (std::size_t i = 0; i < all.size(); ++i) CHECK(std::abs(all[i] - (gs[i] + ge[i] + 0.8 * gc[i])) <= 1e-12);
}

TEST_CASE("moment candidates") {
    const std::vector<double> st{0.5, 0.1}, ed{0.2, 0.9};
    const auto top = top_moments(st, ed, {1, 24}, 5);
    REQUIRE(top.size() == 3);
    CHECK(top[0].span == Span{0, 1});
    CHECK(top[1].span == Span{1, 1});
    CHECK(top[2].span == Span{0, 0});
    CHECK(top[0].score == 0.5 + 0.9);
    // Minimum length above the video length still yields the whole video.
    CHECK(top_moments(st, ed, {3, 7}, 5).size() == 1);

    std::mt19937_64 rng(12);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t len = 1 + rng() % 20;
        std::vector<double> s(len), e(len);
        for (auto& x : s) x = n(rng);
        for (auto& x : e) x = n(rng);
        const LengthLimits lim{1 + rng() % 3, 3 + rng() % 6};
        std::vector<ScoredSpan> brute;
        for (std::size_t a = 0; a < len; ++a)
            for (std::size_t b = a; b < len; ++b) {
                const std::size_t l = b - a + 1;
                if (len >= lim.min_len && (l < lim.min_len || l > lim.max_len)) continue;
                if (len < lim.min_len && l != len) continue;
                brute.push_back({{a, b}, s[a] + e[b]});
            }
        std::stable_sort(brute.begin(), brute.end(), [](const ScoredSpan& x, const ScoredSpan& y) {
            return x.score != y.score ? x.score > y.score : x.span < y.span;
        });
        const auto got = top_moments(s, e, lim, 5);
        REQUIRE(got.size() == std::min<std::size_t>(5, brute.size()));
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].span == brute[i].span);
            CHECK(got[i].score == brute[i].score);
        }
    }
}

TEST_CASE("positive spans depend on indices only") {
    // Same call, any content: the function never sees features.
    CHECK(sample_positive_spans({2, 4}, 10) == sample_positive_spans({2, 4}, 10));
    CHECK(sample_positive_spans({5, 8}, 16).size() == 5);
}

TEST_CASE("parameter namespaces") {
    const FeatureDims dims{6, 6, 6};
    LocalizerModel loc(dims, tiny_config(), 1);
    RetrieverConfig rc;
    rc.dims = tiny_config().dims;
    RetrieverModel ret(dims, rc, 1);
    std::set<std::string> names;
    std::size_t adv = 0;
    for (const auto& [name, t] : loc.params().all()) {
        CHECK(name.rfind("localizer.", 0) == 0);
        adv += name.rfind("localizer.adv.", 0) == 0;
        names.insert(name);
    }
    CHECK(adv > 0);
    for (const auto& [name, t] : ret.params().all()) CHECK(names.count(name) == 0);
}
