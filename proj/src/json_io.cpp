#include "prem/json_io.hpp"

#include <fstream>
#include <set>

namespace prem {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) throw ConfigError(std::string("unknown key '") + key + "' in " + what);
}

template <typename T>
void read(const json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        it->get_to(out);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

}  // namespace

void to_json(json& j, const SyntheticSpec& s) {
    j = json{{"video_count", s.video_count},
             {"train_video_count", s.train_video_count},
             {"clips_per_video", s.clips_per_video},
             {"image_dim", s.image_dim},
             {"subtitle_dim", s.subtitle_dim},
             {"text_dim", s.text_dim},
             {"queries_per_video", s.queries_per_video},
             {"moment_len_min", s.moment_len_min},
             {"moment_len_max", s.moment_len_max},
             {"visual_ratio", s.visual_ratio},
             {"noise_sigma", s.noise_sigma},
             {"seed", s.seed},
             {"tokens_min", s.tokens_min},
             {"tokens_max", s.tokens_max},
             {"content_token_ratio", s.content_token_ratio},
             {"adjacent_attenuation", s.adjacent_attenuation},
             {"subtitle_drop_rate", s.subtitle_drop_rate},
             {"identity_projections", s.identity_projections}};
}

void from_json(const json& j, SyntheticSpec& s) {
    check_keys(j,
               {"video_count", "train_video_count", "clips_per_video", "image_dim", "subtitle_dim", "text_dim", "queries_per_video",
                "moment_len_min", "moment_len_max", "visual_ratio", "noise_sigma", "seed", "tokens_min", "tokens_max",
                "content_token_ratio", "adjacent_attenuation", "subtitle_drop_rate", "identity_projections"},
               "synthetic");
    read(j, "video_count", s.video_count);
    read(j, "train_video_count", s.train_video_count);
    read(j, "clips_per_video", s.clips_per_video);
    read(j, "image_dim", s.image_dim);
    read(j, "subtitle_dim", s.subtitle_dim);
    read(j, "text_dim", s.text_dim);
    read(j, "queries_per_video", s.queries_per_video);
    read(j, "moment_len_min", s.moment_len_min);
    read(j, "moment_len_max", s.moment_len_max);
    read(j, "visual_ratio", s.visual_ratio);
    read(j, "noise_sigma", s.noise_sigma);
    read(j, "seed", s.seed);
    read(j, "tokens_min", s.tokens_min);
    read(j, "tokens_max", s.tokens_max);
    read(j, "content_token_ratio", s.content_token_ratio);
    read(j, "adjacent_attenuation", s.adjacent_attenuation);
    read(j, "subtitle_drop_rate", s.subtitle_drop_rate);
    read(j, "identity_projections", s.identity_projections);
}

void to_json(json& j, const ModelDims& d) {
    j = json{{"hidden", d.hidden}, {"intermediate", d.intermediate}, {"heads", d.heads},
             {"max_positions", d.max_positions}};
}

void from_json(const json& j, ModelDims& d) {
    check_keys(j, {"hidden", "intermediate", "heads", "max_positions"}, "model");
    read(j, "hidden", d.hidden);
    read(j, "intermediate", d.intermediate);
    read(j, "heads", d.heads);
    read(j, "max_positions", d.max_positions);
}

void to_json(json& j, const TrainConfig& c) {
    j = json{{"retriever_epochs", c.retriever_epochs},
             {"retriever_batch", c.retriever_batch},
             {"localizer_epochs", c.localizer_epochs},
             {"localizer_batch", c.localizer_batch},
             {"negatives", c.negatives},
             {"mining_pool", c.mining_pool},
             {"lambda", c.lambda},
             {"gamma", c.gamma},
             {"temperature", c.temperature},
             {"learning_rate", c.learning_rate},
             {"weight_decay", c.weight_decay},
             {"use_adversarial", c.use_adversarial},
             {"use_shared_norm", c.use_shared_norm},
             {"positive_iou", c.positive_iou},
             {"adversarial_top", c.adversarial_top},
             {"mining_span_cap", c.mining_span_cap},
             {"select_best_by_val", c.select_best_by_val},
             {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
    check_keys(j,
               {"retriever_epochs", "retriever_batch", "localizer_epochs", "localizer_batch", "negatives",
                "mining_pool", "lambda", "gamma", "temperature", "learning_rate", "weight_decay", "use_adversarial",
                "use_shared_norm", "positive_iou", "adversarial_top", "mining_span_cap", "select_best_by_val", "seed"},
               "train");
    read(j, "retriever_epochs", c.retriever_epochs);
    read(j, "retriever_batch", c.retriever_batch);
    read(j, "localizer_epochs", c.localizer_epochs);
    read(j, "localizer_batch", c.localizer_batch);
    read(j, "negatives", c.negatives);
    read(j, "mining_pool", c.mining_pool);
    read(j, "lambda", c.lambda);
    read(j, "gamma", c.gamma);
    read(j, "temperature", c.temperature);
    read(j, "learning_rate", c.learning_rate);
    read(j, "weight_decay", c.weight_decay);
    read(j, "use_adversarial", c.use_adversarial);
    read(j, "use_shared_norm", c.use_shared_norm);
    read(j, "positive_iou", c.positive_iou);
    read(j, "adversarial_top", c.adversarial_top);
    read(j, "mining_span_cap", c.mining_span_cap);
    read(j, "select_best_by_val", c.select_best_by_val);
    read(j, "seed", c.seed);
}

void to_json(json& j, const InferenceConfig& c) {
    j = json{{"top_k", c.top_k},
             {"min_len", c.limits.min_len},
             {"max_len", c.limits.max_len},
             {"nms_iou", c.nms_iou},
             {"max_results", c.max_results},
             {"retrieval_divisor", c.retrieval_divisor}};
}

void from_json(const json& j, InferenceConfig& c) {
    check_keys(j, {"top_k", "min_len", "max_len", "nms_iou", "max_results", "retrieval_divisor"}, "inference");
    read(j, "top_k", c.top_k);
    read(j, "min_len", c.limits.min_len);
    read(j, "max_len", c.limits.max_len);
    read(j, "nms_iou", c.nms_iou);
    read(j, "max_results", c.max_results);
    read(j, "retrieval_divisor", c.retrieval_divisor);
}

void to_json(json& j, const RunConfig& c) {
    j = json{{"synthetic", c.synthetic},
             {"model", c.model},
             {"pooling", pooling_name(c.pooling)},
             {"modalities", {{"image", c.modalities.image}, {"subtitle", c.modalities.subtitle}}},
             {"use_gates", c.use_gates},
             {"fusion_layers", c.fusion_layers},
             {"train", c.train},
             {"inference", c.inference}};
}

void from_json(const json& j, RunConfig& c) {
    check_keys(j, {"synthetic", "model", "pooling", "modalities", "use_gates", "fusion_layers", "train", "inference"},
               "config");
    read(j, "synthetic", c.synthetic);
    read(j, "model", c.model);
    if (auto it = j.find("pooling"); it != j.end()) {
        if (!it->is_string()) throw ConfigError("pooling must be a string");
        try {
            c.pooling = parse_pooling(it->get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    if (auto it = j.find("modalities"); it != j.end()) {
        check_keys(*it, {"image", "subtitle"}, "modalities");
        read(*it, "image", c.modalities.image);
        read(*it, "subtitle", c.modalities.subtitle);
    }
    read(j, "use_gates", c.use_gates);
    read(j, "fusion_layers", c.fusion_layers);
    read(j, "train", c.train);
    read(j, "inference", c.inference);
}

void RunConfig::validate() const {
    try {
        synthetic.validate();
        train.validate();
        inference.validate();
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    if (model.hidden == 0 || model.heads == 0 || model.hidden % model.heads != 0)
        throw ConfigError("model.hidden must be a positive multiple of model.heads");
    if (model.intermediate == 0) throw ConfigError("model.intermediate must be positive");
    if (model.max_positions < synthetic.clips_per_video)
        throw ConfigError("model.max_positions is smaller than clips_per_video");
    if (!modalities.image && !modalities.subtitle) throw ConfigError("at least one modality must be enabled");
    if (fusion_layers == 0) throw ConfigError("fusion_layers must be positive");
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    RunConfig c;
    try {
        from_json(j, c);
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
    c.validate();
    return c;
}

std::string dump_run_config(const RunConfig& config) { return json(config).dump(2) + "\n"; }

}  // namespace prem
