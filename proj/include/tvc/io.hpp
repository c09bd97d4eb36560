#pragma once

// Persistence: dataset directories (JSON manifest + one flat little-endian
// float64 file per subject per role), chain/checkpoint containers with an
// integrity trailer, model-config files, and small CSV helpers.

#include "tvc/model.hpp"
#include "tvc/predict.hpp"
#include "tvc/sampler.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace tvc {

inline constexpr int kDatasetFormatVersion = 1;
inline constexpr int kChainFormatVersion = 1;

struct DatasetBundle {
  Dataset data;
  // synthetic ground truth, empty when absent
  DenseTensorD intercept_true;
  DenseTensorD slope_true;
  std::vector<DenseTensorD> effect_true;
  nlohmann::json generation;  // null for observational data
};

void save_dataset(const std::string& dir, const DatasetBundle& bundle);
DatasetBundle load_dataset(const std::string& dir);

void save_chain(const std::string& path, const Chain& chain);
Chain load_chain(const std::string& path);

void save_checkpoint(const std::string& path, const SamplerCheckpoint& ckpt);
SamplerCheckpoint load_checkpoint(const std::string& path);

ModelConfig load_config(const std::string& path);  // partial files override defaults
void save_config(const std::string& path, const ModelConfig& cfg);
nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

void save_prediction(const std::string& dir, const PredictionResult& pred,
                     const std::vector<Index>& test_subjects, const Shape& shape);

// CSV writer: header row then numeric rows, fixed precision.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows);

}  // namespace tvc
