#include "prem/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_map>

#include "prem/optim.hpp"

namespace prem {

void TrainConfig::validate() const {
    if (retriever_epochs == 0 || localizer_epochs == 0) throw std::invalid_argument("epoch counts must be positive");
    if (retriever_batch < 2) throw std::invalid_argument("retriever batch must be at least 2");
    if (localizer_batch == 0) throw std::invalid_argument("localizer batch must be positive");
    if (mining_pool == 0) throw std::invalid_argument("mining pool must be positive");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!(learning_rate > 0.0) || weight_decay < 0.0) throw std::invalid_argument("invalid optimizer settings");
    if (!(positive_iou >= 0.0 && positive_iou < 1.0)) throw std::invalid_argument("positive_iou must lie in [0, 1)");
    if (adversarial_top == 0) throw std::invalid_argument("adversarial_top must be positive");
}

void InferenceConfig::validate() const {
    if (top_k == 0) throw std::invalid_argument("top_k must be at least 1");
    if (limits.min_len == 0 || limits.min_len > limits.max_len)
        throw std::invalid_argument("moment length limits must satisfy 1 <= min <= max");
    if (!(nms_iou > 0.0 && nms_iou <= 1.0)) throw std::invalid_argument("NMS IoU threshold must lie in (0, 1]");
    if (max_results == 0) throw std::invalid_argument("max_results must be positive");
    if (!(retrieval_divisor > 0.0)) throw std::invalid_argument("retrieval_divisor must be positive");
}

namespace {

void report(const ProgressFn& progress, const std::string& msg) {
    if (progress) progress(msg);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

double val_recall_at(const RetrieverModel& model, const Corpus& corpus, std::size_t k) {
    if (corpus.queries().empty()) return 0.0;
    const VideoIndex index(encode_corpus(model, corpus));
    std::size_t hits = 0;
    for (const auto& q : corpus.queries()) {
        const auto ranked = rank_videos(model, corpus, index, model.encode_query(q), k);
        for (const auto& r : ranked)
            if (r.video_id == q.target_video) {
                ++hits;
                break;
            }
    }
    return 100.0 * static_cast<double>(hits) / static_cast<double>(corpus.queries().size());
}

// Contrastive loss of one batch of query indices; records on the active tape if any.
Tensor retriever_batch_loss(const RetrieverModel& model, const Corpus& corpus, std::span<const std::size_t> batch,
                            const ContrastiveConfig& cfg) {
    std::vector<ModalityQueryReps> reps;
    reps.reserve(batch.size());
    std::unordered_map<std::size_t, std::size_t> slot;
    std::vector<VideoEncoding> videos;
    std::vector<ContrastiveItem> items(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Query& q = corpus.queries()[batch[i]];
        reps.push_back(model.encode_query(q));
        const std::size_t vi = corpus.video_index(q.target_video);
        auto [it, fresh] = slot.emplace(vi, videos.size());
        if (fresh) videos.push_back(model.encode_video(corpus.videos()[vi]));
        items[i].video = it->second;
        items[i].span = q.span;
    }
    for (std::size_t i = 0; i < batch.size(); ++i) items[i].query = &reps[i];
    return contrastive_loss(items, videos, cfg);
}

std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order, std::size_t batch, std::size_t min_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t b = 0; b < order.size(); b += batch) {
        std::vector<std::size_t> chunk(order.begin() + static_cast<std::ptrdiff_t>(b),
                                       order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), b + batch)));
        if (chunk.size() < min_size && !out.empty())
            out.back().insert(out.back().end(), chunk.begin(), chunk.end());
        else
            out.push_back(std::move(chunk));
    }
    return out;
}

std::vector<std::vector<double>> snapshot(const ParamStore& params) {
    std::vector<std::vector<double>> s;
    for (const auto& [_, t] : params.all()) s.push_back(t.to_vector());
    return s;
}

void restore(ParamStore& params, const std::vector<std::vector<double>>& s) {
    std::size_t i = 0;
    for (auto& [_, t] : params.all()) {
        auto dst = t.mutable_values();
        std::copy(s[i].begin(), s[i].end(), dst.begin());
        ++i;
    }
}

}  // namespace

RetrieverTrainResult train_retriever(const Corpus& train, const Corpus* val, const RetrieverConfig& model_config,
                                     const TrainConfig& config, const ProgressFn& progress) {
    config.validate();
    if (train.queries().empty()) throw DataError("training split has no queries");
    if (train.videos().size() < 2) throw DataError("training split needs at least two videos for negatives");

    RetrieverTrainResult result{RetrieverModel(train.dims(), model_config, config.seed), {}, 0, -1.0, {}};
    RetrieverModel& model = result.model;
    AdamW optimizer({config.learning_rate, config.weight_decay});
    std::mt19937_64 rng(config.seed ^ 0xA5A5A5A5ull);
    const ContrastiveConfig cfg{config.temperature, config.lambda, model_config.modalities};

    std::vector<std::size_t> order(train.queries().size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::vector<double>> best;

    for (std::size_t epoch = 1; epoch <= config.retriever_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t steps = 0;
        for (const auto& batch : make_batches(order, config.retriever_batch, 2)) {
            if (batch.size() < 2) continue;
            Tape tape;
            TapeScope scope(tape);
            Tensor loss = retriever_batch_loss(model, train, batch, cfg);
            if (!std::isfinite(loss.item()))
                throw NumericalError("retriever loss diverged at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(steps + 1));
            model.params().zero_grad();
            tape.backward(loss);
            optimizer.step(model.params());
            total += loss.item();
            result.step_losses.push_back(loss.item());
            ++steps;
        }
        const double train_loss = total / static_cast<double>(std::max<std::size_t>(steps, 1));
        result.curve.push_back({epoch, "train", train_loss});
        std::string line = "retriever epoch " + std::to_string(epoch) + " train_loss " + fmt_double(train_loss);

        if (val && val->queries().size() >= 2) {
            std::vector<std::size_t> vorder(val->queries().size());
            std::iota(vorder.begin(), vorder.end(), 0);
            double vtotal = 0.0;
            std::size_t vsteps = 0;
            for (const auto& batch : make_batches(vorder, config.retriever_batch, 2)) {
                if (batch.size() < 2) continue;
                vtotal += retriever_batch_loss(model, *val, batch, cfg).item();
                ++vsteps;
            }
            const double val_loss = vtotal / static_cast<double>(std::max<std::size_t>(vsteps, 1));
            result.curve.push_back({epoch, "val", val_loss});
            const double r10 = val_recall_at(model, *val, 10);
            line += " val_loss " + fmt_double(val_loss) + " val_R@10 " + fmt_double(r10);
            if (config.select_best_by_val && r10 > result.best_val_r10) {
                result.best_val_r10 = r10;
                result.best_epoch = epoch;
                best = snapshot(model.params());
            }
        }
        report(progress, line);
    }
    if (!best.empty()) restore(model.params(), best);
    else result.best_epoch = config.retriever_epochs;
    return result;
}

std::vector<std::vector<std::size_t>> mine_hard_negatives(const RetrieverModel& retriever, const Corpus& corpus,
                                                          std::size_t negatives, std::size_t mining_pool,
                                                          std::uint64_t seed) {
    if (corpus.videos().size() < negatives + 1)
        throw DataError("corpus of " + std::to_string(corpus.videos().size()) + " videos cannot supply " +
                        std::to_string(negatives) + " negatives per query");
    const VideoIndex index(encode_corpus(retriever, corpus));
    std::vector<std::vector<std::size_t>> out;
    out.reserve(corpus.queries().size());
    for (std::size_t qi = 0; qi < corpus.queries().size(); ++qi) {
        const Query& q = corpus.queries()[qi];
        const auto ranked = rank_videos(retriever, corpus, index, retriever.encode_query(q), corpus.videos().size());
        std::vector<std::size_t> pool;
        for (const auto& r : ranked) {
            if (r.video_id == q.target_video) continue;
            pool.push_back(corpus.video_index(r.video_id));
            if (pool.size() == mining_pool) break;
        }
        std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + qi);
        // Partial Fisher-Yates: first `negatives` entries become a uniform sample.
        const std::size_t take = std::min(negatives, pool.size());
        for (std::size_t i = 0; i < take; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
        }
        pool.resize(take);
        out.push_back(std::move(pool));
    }
    return out;
}

Tensor localizer_query_loss(const LocalizerModel& model, const Corpus& corpus, const Query& query,
                            std::span<const std::size_t> negative_videos, const TrainConfig& config,
                            const LengthLimits& limits, LocalizerStepLoss* parts) {
    const ModalityQueryReps q = model.encode_query(query);
    const Video& target = corpus.video(query.target_video);
    const auto pos = model.forward(q, model.encode_video(target));

    const bool need_negatives = config.use_shared_norm || config.use_adversarial;
    std::vector<LocalizerModel::VideoPass> negs;
    if (need_negatives)
        for (std::size_t vi : negative_videos) negs.push_back(model.forward(q, model.encode_video(corpus.videos()[vi])));

    std::vector<BoundaryScores> neg_scores;
    if (config.use_shared_norm)
        for (const auto& n : negs) neg_scores.push_back(n.scores);
    const BoundaryLoss boundary = shared_norm_terms(pos.scores, neg_scores, query.span);

    Tensor adversarial = Tensor::scalar(0.0);
    const bool adversarial_on = config.use_adversarial && !negs.empty();
    if (adversarial_on) {
        const auto positives = sample_positive_spans(query.span, target.clips.size(), config.positive_iou);
        Tensor pos_logits = model.span_logits(pos.fused, positives);
        std::vector<Tensor> neg_logits;
        for (const auto& n : negs) {
            // Selection uses current scores but carries no gradient.
            const auto mined = top_moments(n.scores.start.values(), n.scores.end.values(), limits,
                                           config.adversarial_top, config.mining_span_cap);
            std::vector<Span> spans;
            for (const auto& m : mined) spans.push_back(m.span);
            neg_logits.push_back(model.span_logits(n.fused, spans));
        }
        adversarial = adversarial_bce(pos_logits, concat(neg_logits, 0));
    }
    Tensor loss = adversarial_on ? total_loss(boundary.start, boundary.end, adversarial, config.gamma)
                                 : add(boundary.start, boundary.end);
    if (parts) {
        parts->boundary = boundary.start.item() + boundary.end.item();
        parts->adversarial = adversarial.item();
        parts->total = loss.item();
    }
    return loss;
}

LocalizerTrainResult train_localizer(const Corpus& train, const RetrieverModel& retriever,
                                     const LocalizerConfig& model_config, const TrainConfig& config,
                                     const InferenceConfig& inference, const ProgressFn& progress) {
    config.validate();
    if (train.queries().empty()) throw DataError("training split has no queries");
    LocalizerTrainResult result{LocalizerModel(train.dims(), model_config, config.seed + 7919), {}, {}};
    LocalizerModel& model = result.model;

    // Hard negatives are sampled once from the trained retriever.
    const std::size_t n_neg = std::min(config.negatives, train.videos().size() - 1);
    const auto negatives = mine_hard_negatives(retriever, train, n_neg, config.mining_pool, config.seed);
    report(progress, "mined " + std::to_string(n_neg) + " hard negatives for " +
                         std::to_string(train.queries().size()) + " queries");

    AdamW optimizer({config.learning_rate, config.weight_decay});
    std::mt19937_64 rng(config.seed ^ 0x5A5A5A5Aull);
    std::vector<std::size_t> order(train.queries().size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 1; epoch <= config.localizer_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t steps = 0;
        for (const auto& batch : make_batches(order, config.localizer_batch, 1)) {
            Tape tape;
            TapeScope scope(tape);
            std::vector<Tensor> losses;
            for (std::size_t qi : batch)
                losses.push_back(localizer_query_loss(model, train, train.queries()[qi], negatives[qi], config,
                                                      inference.limits));
            Tensor loss = mean(concat(losses, 0));
            if (!std::isfinite(loss.item()))
                throw NumericalError("localizer loss diverged at epoch " + std::to_string(epoch) + " step " +
                                     std::to_string(steps + 1));
            model.params().zero_grad();
            tape.backward(loss);
            optimizer.step(model.params());
            total += loss.item();
            result.step_losses.push_back(loss.item());
            ++steps;
        }
        const double train_loss = total / static_cast<double>(std::max<std::size_t>(steps, 1));
        result.curve.push_back({epoch, "train", train_loss});
        report(progress, "localizer epoch " + std::to_string(epoch) + " train_loss " + fmt_double(train_loss));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Inference

InferenceEngine::InferenceEngine(const RetrieverModel& retriever, const LocalizerModel* localizer,
                                 const Corpus& corpus, InferenceConfig config)
    : retriever_(retriever), localizer_(localizer), corpus_(corpus), config_(config) {
    config_.validate();
    if (corpus.videos().empty()) throw DataError("cannot run inference on an empty corpus");
    retriever_enc_ = encode_corpus(retriever, corpus);
    retriever_index_ = VideoIndex(retriever_enc_);
    if (localizer_) {
        localizer_enc_.reserve(corpus.videos().size());
        for (const auto& v : corpus.videos()) localizer_enc_.push_back(localizer_->encode_video(v));
    }
}

std::vector<RankedVideo> InferenceEngine::rank(const Query& query) const {
    return rank_videos(retriever_, corpus_, retriever_index_, retriever_.encode_query(query), corpus_.videos().size());
}

std::pair<std::vector<double>, std::vector<double>> InferenceEngine::boundary(const Query& query,
                                                                              std::size_t video_index) const {
    if (!localizer_) throw std::logic_error("inference engine has no localizer");
    const auto pass = localizer_->forward(localizer_->encode_query(query), localizer_enc_.at(video_index));
    return {pass.scores.start.to_vector(), pass.scores.end.to_vector()};
}

std::vector<MomentPrediction> InferenceEngine::localize(const Query& query, std::size_t video_index,
                                                        double retrieval_score) const {
    const auto [st, ed] = boundary(query, video_index);
    const double base = retrieval_score / config_.retrieval_divisor;
    std::vector<ScoredSpan> cands;
    for (const Span& s : enumerate_spans(st.size(), config_.limits)) cands.push_back({s, base + st[s.start] + ed[s.end]});
    const auto kept = non_maximum_suppression(std::move(cands), config_.nms_iou, config_.max_results);
    std::vector<MomentPrediction> out;
    out.reserve(kept.size());
    for (const auto& k : kept) out.push_back({corpus_.videos()[video_index].id, k.span, k.score});
    return out;
}

namespace {

void sort_moments(std::vector<MomentPrediction>& moments) {
    std::stable_sort(moments.begin(), moments.end(), [](const MomentPrediction& a, const MomentPrediction& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.video_id != b.video_id) return a.video_id < b.video_id;
        return a.span < b.span;
    });
}

}  // namespace

QueryPrediction InferenceEngine::infer(const Query& query) const {
    QueryPrediction p;
    p.query_id = query.id;
    p.videos = rank(query);
    if (localizer_) {
        const std::size_t k = std::min(config_.top_k, p.videos.size());
        for (std::size_t i = 0; i < k; ++i) {
            auto m = localize(query, corpus_.video_index(p.videos[i].video_id), p.videos[i].score);
            p.moments.insert(p.moments.end(), m.begin(), m.end());
        }
        sort_moments(p.moments);
        if (p.moments.size() > config_.max_results) p.moments.resize(config_.max_results);
    }
    if (p.videos.size() > std::max(config_.max_results, config_.top_k))
        p.videos.resize(std::max(config_.max_results, config_.top_k));
    return p;
}

QueryPrediction InferenceEngine::infer_in_target(const Query& query) const {
    QueryPrediction p;
    p.query_id = query.id;
    const std::size_t vi = corpus_.video_index(query.target_video);
    const auto q = retriever_.encode_query(query);
    const double sr = score_video(q, retriever_enc_[vi], retriever_.config().modalities).score;
    p.videos.push_back({query.target_video, sr});
    p.moments = localize(query, vi, sr);
    return p;
}

// ---------------------------------------------------------------------------
// Metrics

Task parse_task(const std::string& name) {
    if (name == "vr") return Task::vr;
    if (name == "svmr") return Task::svmr;
    if (name == "vcmr") return Task::vcmr;
    throw std::invalid_argument("unknown task '" + name + "' (expected vr, svmr or vcmr)");
}

const char* task_name(Task task) {
    switch (task) {
        case Task::vr:
            return "vr";
        case Task::svmr:
            return "svmr";
        case Task::vcmr:
            return "vcmr";
    }
    return "?";
}

MetricsReport evaluate(const std::vector<QueryPrediction>& predictions, const Corpus& corpus, Task task) {
    std::unordered_map<std::string, const QueryPrediction*> by_id;
    for (const auto& p : predictions) by_id.emplace(p.query_id, &p);

    MetricsReport report;
    const auto& queries = corpus.queries();
    const double n = static_cast<double>(std::max<std::size_t>(queries.size(), 1));

    std::map<std::size_t, std::size_t> vr_hits;
    std::map<double, std::map<std::size_t, std::size_t>> moment_hits;
    for (const auto& q : queries) {
        auto it = by_id.find(q.id);
        if (it == by_id.end()) {
            ++report.missing;
            continue;
        }
        const QueryPrediction& p = *it->second;
        if (task == Task::vr) {
            std::size_t rank = std::numeric_limits<std::size_t>::max();
            for (std::size_t i = 0; i < p.videos.size(); ++i)
                if (p.videos[i].video_id == q.target_video) {
                    rank = i;
                    break;
                }
            for (std::size_t k : kVrRanks)
                if (rank < k) ++vr_hits[k];
            continue;
        }
        std::vector<const MomentPrediction*> ranked;
        for (const auto& m : p.moments)
            if (task == Task::vcmr || m.video_id == q.target_video) ranked.push_back(&m);
        for (double thr : kIouThresholds)
            for (std::size_t k : kMomentRanks) {
                bool hit = false;
                for (std::size_t i = 0; i < std::min(k, ranked.size()) && !hit; ++i)
                    hit = ranked[i]->video_id == q.target_video && iou(ranked[i]->span, q.span) >= thr;
                if (hit) ++moment_hits[thr][k];
            }
    }
    if (report.missing)
        std::cerr << "warning: " << report.missing << " queries have no predictions; counted as misses\n";

    if (task == Task::vr) {
        for (std::size_t k : kVrRanks) report.vr[k] = 100.0 * static_cast<double>(vr_hits[k]) / n;
    } else {
        auto& table = task == Task::svmr ? report.svmr : report.vcmr;
        for (double thr : kIouThresholds)
            for (std::size_t k : kMomentRanks) table[thr][k] = 100.0 * static_cast<double>(moment_hits[thr][k]) / n;
    }
    return report;
}

}  // namespace prem
