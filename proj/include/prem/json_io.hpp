#pragma once

#include <stdexcept>
#include <string>

#include "json.hpp"
#include "prem/corpus.hpp"
#include "prem/encoder.hpp"
#include "prem/localizer.hpp"
#include "prem/pipeline.hpp"
#include "prem/retriever.hpp"

namespace prem {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Everything a CLI run needs besides paths.
struct RunConfig {
    SyntheticSpec synthetic;
    ModelDims model;
    PoolingMode pooling = PoolingMode::modality_specific;
    ModalityMask modalities;
    bool use_gates = true;
    std::size_t fusion_layers = 2;
    TrainConfig train;
    InferenceConfig inference;

    RetrieverConfig retriever_config() const { return {model, pooling, modalities}; }
    LocalizerConfig localizer_config() const { return {model, pooling, modalities, use_gates, fusion_layers, 3}; }
    /// Throws ConfigError on any invalid value.
    void validate() const;
};

// Readers accept partial objects (missing keys keep defaults) and reject
// unknown keys with ConfigError.
void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);
void to_json(nlohmann::json& j, const ModelDims& d);
void from_json(const nlohmann::json& j, ModelDims& d);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const InferenceConfig& c);
void from_json(const nlohmann::json& j, InferenceConfig& c);
void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_run_config(const std::string& path);
std::string dump_run_config(const RunConfig& config);

}  // namespace prem
