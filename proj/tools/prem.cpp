// prem: corpus generation, stage-wise training and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "prem/checkpoint.hpp"
#include "prem/corpus.hpp"
#include "prem/json_io.hpp"
#include "prem/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prem;

namespace {

enum Exit { ok = 0, config_error = 2, data_error = 3, numerical_error = 4 };

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::string pooling;
    bool no_gates = false;
    bool no_adversarial = false;
    bool no_shared_norm = false;
};

RunConfig resolve_config(const std::string& path, const Overrides& o) {
    RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
    if (o.seed) {
        c.synthetic.seed = *o.seed;
        c.train.seed = *o.seed;
    }
    if (!o.pooling.empty()) {
        try {
            c.pooling = parse_pooling(o.pooling);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (o.no_gates) c.use_gates = false;
    if (o.no_adversarial) c.train.use_adversarial = false;
    if (o.no_shared_norm) c.train.use_shared_norm = false;
    c.validate();
    return c;
}

fs::path sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

void progress(const std::string& msg) { std::cerr << msg << '\n'; }

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
}

std::string loss_csv(const std::vector<LossRecord>& curve) {
    std::string s = "epoch,split,loss\n";
    char buf[64];
    for (const auto& r : curve) {
        std::snprintf(buf, sizeof buf, "%.17g", r.loss);
        s += std::to_string(r.epoch) + "," + r.split + "," + buf + "\n";
    }
    return s;
}

bool has_prefix(const checkpoint::Archive& a, const std::string& prefix) {
    for (const auto& [name, _] : a)
        if (name.rfind(prefix, 0) == 0) return true;
    return false;
}

// ---------------------------------------------------------------------------

int cmd_gen(const std::string& config_path, const std::string& out, const Overrides& o) {
    const RunConfig c = resolve_config(config_path, o);
    const fs::path root(out);
    fs::create_directories(root);
    // Rewrite meta from scratch so reruns are byte-identical.
    fs::remove(root / "corpus.meta.json");
    for (const char* split : {"train", "val", "test"}) {
        const Corpus corpus = generate(c.synthetic, split);
        save_corpus(corpus, root, c.synthetic);
        const CorpusStats s = corpus_stats(corpus);
        std::printf("%-5s videos %zu queries %zu mean span ratio %.4f\n", split, s.videos, s.queries, s.span_ratio());
    }
    return ok;
}

int cmd_train(const std::string& stage, const std::string& config_path, const std::string& corpus_root,
              const std::string& ckpt, std::string csv, const Overrides& o) {
    if (stage != "retriever" && stage != "localizer") throw ConfigError("--stage must be retriever or localizer");
    const RunConfig c = resolve_config(config_path, o);
    const Corpus train = load_corpus(corpus_root, "train");
    if (csv.empty()) csv = ckpt + "." + stage + ".loss.csv";

    checkpoint::Archive archive;
    std::vector<LossRecord> curve;
    if (stage == "retriever") {
        std::optional<Corpus> val;
        if (fs::exists(fs::path(corpus_root) / "val" / "queries.jsonl")) val = load_corpus(corpus_root, "val");
        auto result = train_retriever(train, val ? &*val : nullptr, c.retriever_config(), c.train, progress);
        checkpoint::export_params(result.model.params(), archive);
        curve = std::move(result.curve);
        if (result.best_val_r10 >= 0.0)
            std::printf("retriever: best epoch %zu val R@10 %.2f\n", result.best_epoch, result.best_val_r10);
    } else {
        if (!fs::exists(ckpt))
            throw DataError("localizer stage needs a trained retriever checkpoint at " + ckpt +
                            " for hard-negative mining; run --stage retriever first");
        archive = checkpoint::read(ckpt);
        if (!has_prefix(archive, "retriever."))
            throw DataError("checkpoint " + ckpt + " has no retriever weights; hard-negative mining needs them");
        RetrieverModel retriever(train.dims(), c.retriever_config(), c.train.seed);
        checkpoint::import_params(archive, retriever.params());
        auto result = train_localizer(train, retriever, c.localizer_config(), c.train, c.inference, progress);
        for (auto it = archive.begin(); it != archive.end();)
            it = it->first.rfind("localizer.", 0) == 0 ? archive.erase(it) : std::next(it);
        checkpoint::export_params(result.model.params(), archive);
        curve = std::move(result.curve);
    }
    if (fs::path(ckpt).has_parent_path()) fs::create_directories(fs::path(ckpt).parent_path());
    checkpoint::write(ckpt, archive);
    write_text(sidecar(ckpt), dump_run_config(c));
    write_text(csv, loss_csv(curve));
    std::printf("wrote %s (%zu tensors) and %s\n", ckpt.c_str(), archive.size(), csv.c_str());
    return ok;
}

nlohmann::ordered_json metrics_json(const MetricsReport& r, Task task) {
    nlohmann::ordered_json j;
    auto ranks = [](const std::map<std::size_t, double>& m) {
        nlohmann::ordered_json o = nlohmann::ordered_json::object();
        for (const auto& [k, v] : m) o["R@" + std::to_string(k)] = v;
        return o;
    };
    if (task == Task::vr) {
        j["VR"] = ranks(r.vr);
    } else {
        nlohmann::ordered_json t = nlohmann::ordered_json::object();
        for (const auto& [thr, m] : task == Task::svmr ? r.svmr : r.vcmr) {
            char key[32];
            std::snprintf(key, sizeof key, "IoU=%.1f", thr);
            t[key] = ranks(m);
        }
        j[task == Task::svmr ? "SVMR" : "VCMR"] = t;
    }
    j["missing"] = r.missing;
    return j;
}

void print_table(const nlohmann::ordered_json& metrics) {
    for (const auto& [task, body] : metrics.items()) {
        if (task == "missing") continue;
        std::printf("%s\n", task.c_str());
        if (task == "VR") {
            for (const auto& [k, v] : body.items()) std::printf("  %-6s %7.2f\n", k.c_str(), v.get<double>());
            continue;
        }
        for (const auto& [thr, ranks] : body.items()) {
            std::printf("  %s", thr.c_str());
            for (const auto& [k, v] : ranks.items()) std::printf("  %s %7.2f", k.c_str(), v.get<double>());
            std::printf("\n");
        }
    }
}

int cmd_eval(const std::string& task_str, const std::string& ckpt, const std::string& corpus_root,
             const std::string& out, const std::string& split, std::string config_path,
             const std::string& predictions_path, bool random_init, const Overrides& o) {
    Task task;
    try {
        task = parse_task(task_str);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (config_path.empty() && !ckpt.empty() && fs::exists(sidecar(ckpt))) config_path = sidecar(ckpt).string();
    const RunConfig c = resolve_config(config_path, o);
    const Corpus corpus = load_corpus(corpus_root, split);

    RetrieverModel retriever(corpus.dims(), c.retriever_config(), c.train.seed);
    std::optional<LocalizerModel> localizer;
    if (task != Task::vr) localizer.emplace(corpus.dims(), c.localizer_config(), c.train.seed + 7919);
    if (!random_init) {
        if (ckpt.empty()) throw ConfigError("--ckpt is required unless --random-init is given");
        if (!fs::exists(ckpt)) throw DataError("checkpoint not found: " + ckpt);
        const auto archive = checkpoint::read(ckpt);
        checkpoint::import_params(archive, retriever.params());
        if (localizer) {
            if (!has_prefix(archive, "localizer."))
                throw DataError("checkpoint " + ckpt + " has no localizer weights; run --stage localizer first");
            checkpoint::import_params(archive, localizer->params());
        }
    }

    const InferenceEngine engine(retriever, localizer ? &*localizer : nullptr, corpus, c.inference);
    std::vector<QueryPrediction> preds;
    preds.reserve(corpus.queries().size());
    for (const auto& q : corpus.queries())
        preds.push_back(task == Task::svmr ? engine.infer_in_target(q) : engine.infer(q));

    const auto metrics = metrics_json(evaluate(preds, corpus, task), task);
    write_text(out, metrics.dump(2) + "\n");
    print_table(metrics);

    if (!predictions_path.empty()) {
        std::string lines;
        for (const auto& p : preds) {
            json j{{"query_id", p.query_id}};
            if (task == Task::vr) {
                json ids = json::array(), scores = json::array();
                for (const auto& v : p.videos) {
                    ids.push_back(v.video_id);
                    scores.push_back(v.score);
                }
                j["video_ids"] = ids;
                j["scores"] = scores;
            } else {
                json moments = json::array();
                for (const auto& m : p.moments)
                    moments.push_back(
                        {{"video_id", m.video_id}, {"start", m.span.start}, {"end", m.span.end}, {"score", m.score}});
                j["moments"] = moments;
            }
            lines += j.dump() + "\n";
        }
        write_text(predictions_path, lines);
    }
    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage video corpus moment retrieval on feature corpora"};
    app.require_subcommand(0, 1);
    bool dump_defaults = false;
    app.add_flag("--dump-defaults", dump_defaults, "Print the full default config as JSON and exit");

    Overrides o;
    std::uint64_t seed = 0;
    auto add_overrides = [&](CLI::App* sub) {
        sub->add_option("--seed", seed, "Override synthetic and training seeds");
        sub->add_option("--pooling", o.pooling, "Query pooling: modality_specific, mean or max");
        sub->add_flag("--no-gates", o.no_gates, "Disable modality-specific gates");
        sub->add_flag("--no-adversarial", o.no_adversarial, "Disable the adversarial span classifier");
        sub->add_flag("--no-shared-norm", o.no_shared_norm, "Normalize boundary scores per video only");
    };

    std::string config, out, corpus, ckpt, stage, task, csv, predictions, split = "test";
    bool random_init = false;

    auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus (train, val and test splits)");
    gen->add_option("--config", config, "Run config JSON");
    gen->add_option("--out", out, "Output corpus directory")->required();
    add_overrides(gen);

    auto* train = app.add_subcommand("train", "Train one stage and write the shared checkpoint");
    train->add_option("--stage", stage, "retriever or localizer")->required();
    train->add_option("--config", config, "Run config JSON");
    train->add_option("--corpus", corpus, "Corpus directory")->required();
    train->add_option("--ckpt", ckpt, "Checkpoint path")->required();
    train->add_option("--loss-csv", csv, "Loss curve CSV (default: <ckpt>.<stage>.loss.csv)");
    add_overrides(train);

    auto* eval = app.add_subcommand("eval", "Run inference and write metrics JSON");
    eval->add_option("--task", task, "vr, svmr or vcmr")->required();
    eval->add_option("--ckpt", ckpt, "Checkpoint path");
    eval->add_option("--corpus", corpus, "Corpus directory")->required();
    eval->add_option("--out", out, "Metrics JSON path")->required();
    eval->add_option("--split", split, "Corpus split to evaluate");
    eval->add_option("--config", config, "Run config JSON (default: <ckpt>.json)");
    eval->add_option("--predictions", predictions, "Also write per-query predictions as JSON lines");
    eval->add_flag("--random-init", random_init, "Evaluate untrained models");
    add_overrides(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : config_error;
    }
    for (auto* sub : {gen, train, eval})
        if (sub->count("--seed")) o.seed = seed;

    try {
        if (dump_defaults) {
            std::cout << dump_run_config(RunConfig{});
            return ok;
        }
        if (*gen) return cmd_gen(config, out, o);
        if (*train) return cmd_train(stage, config, corpus, ckpt, csv, o);
        if (*eval) return cmd_eval(task, ckpt, corpus, out, split, config, predictions, random_init, o);
        std::cout << app.help();
        return config_error;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return config_error;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return numerical_error;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << '\n';
        return data_error;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << '\n';
        return data_error;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return data_error;
    }
}
