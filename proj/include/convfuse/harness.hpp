// SPDX-License-Identifier: Apache-2.0

// End-to-end pipeline: corpus assembly, training, evaluation, map export and
// the four-row component ablation.

#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "convfuse/backbone.hpp"
#include "convfuse/checkpoint.hpp"
#include "convfuse/config.hpp"
#include "convfuse/data.hpp"

namespace convfuse {

struct Corpus {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

/// Synthetic train/test splits from disjoint seeds, or the two splits of
/// `dataset_dir` when it is set.
Corpus load_corpus(const RunConfig& config);

struct BatchLoss {
  ad::Var total;
  ad::Var seg;
  ad::Var cls;
};

/// Gateway, maps and losses on top of already computed encoder outputs.
BatchLoss loss_from_outputs(const GroupedModel& model, const VisionOutputs& vision, const TextOutputs& text,
                            const Tensor& masks, std::span<const int> labels, const LossConfig& loss);
BatchLoss batch_loss(const GroupedModel& model, const std::vector<const Sample*>& batch, const LossConfig& loss);

struct StepRecord {
  std::size_t step = 0;
  double total = 0.0;
  double seg = 0.0;
  double cls = 0.0;

  bool operator==(const StepRecord&) const = default;
};

struct TrainResult {
  GroupedModel model;
  std::vector<StepRecord> trace;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Adam over the trainable parameters only. Each record holds the losses of
/// the batch before that step's update. A non-finite loss raises
/// TrainingError carrying a checkpoint of the parameters at that step.
TrainResult train(const RunConfig& config, const std::vector<Sample>& samples, const StepCallback& on_step = {});

struct Prediction {
  std::string id;
  int label = 0;
  double p_abnormal = 0.0;
  double map_max = 0.0;
  double score = 0.0;
  Tensor map;  ///< (H, W) at pixel resolution
};

std::vector<Prediction> predict(const GroupedModel& model, const std::vector<Sample>& samples, std::size_t batch_size);

struct MetricsReport {
  double pixel_auroc = 0.0;
  double pixel_ap = 0.0;
  double image_auroc = 0.0;
  double image_ap = 0.0;
  std::size_t images = 0;
  std::size_t anomalous_images = 0;
  std::size_t pixels = 0;
  std::size_t anomalous_pixels = 0;
  std::vector<std::array<double, 2>> gate_entropy;  ///< [level][state], nats
  std::string config_text;

  bool operator==(const MetricsReport&) const = default;
};

/// Pixel metrics pool every map pixel against the masks; image metrics use
/// the prediction scores. Entropies and the config echo are left empty.
MetricsReport score_predictions(const std::vector<Prediction>& predictions, const std::vector<Sample>& samples);
MetricsReport evaluate(const GroupedModel& model, const std::vector<Sample>& samples, const RunConfig& config);

/// Metrics table (4 decimals), counts, gate entropies and the config echo.
std::string format_report(const MetricsReport& report);

/// Writes <dir>/<id>.pgm (16-bit maps) and <dir>/scores.txt.
void export_maps(const std::filesystem::path& dir, const std::vector<Prediction>& predictions);

struct AblationVariant {
  std::string name;
  bool conv_lora = false;
  bool dfg = false;
};
/// baseline, +conv_lora, +dfg, full.
const std::array<AblationVariant, 4>& ablation_variants();

struct MetricRow {
  double pixel_auroc = 0.0;
  double pixel_ap = 0.0;
  double image_auroc = 0.0;
  double image_ap = 0.0;
};

struct AblationRow {
  AblationVariant variant;
  std::size_t trainable_params = 0;
  std::vector<MetricRow> per_seed;
  MetricRow mean;
};

struct AblationTable {
  std::vector<std::uint64_t> seeds;  ///< offsets added to the model and data seeds
  std::array<AblationRow, 4> rows;
};

/// Variant config for one row and seed offset.
RunConfig ablation_config(const RunConfig& base, const AblationVariant& variant, std::size_t seed_offset);

using AblationCallback = std::function<void(const AblationVariant&, std::size_t seed_offset, const MetricRow&)>;
AblationTable ablate(const RunConfig& config, const AblationCallback& on_run = {});

/// Seed-mean table: header plus 4 rows x 4 metrics.
std::string ablation_csv(const AblationTable& table);
std::string ablation_seed_csv(const AblationTable& table);
std::string ablation_census_csv(const AblationTable& table);

}  // namespace convfuse
