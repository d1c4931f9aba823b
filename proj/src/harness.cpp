// SPDX-License-Identifier: Apache-2.0

#include "convfuse/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "convfuse/error.hpp"
#include "convfuse/losses.hpp"
#include "convfuse/metrics.hpp"
#include "convfuse/optimizer.hpp"
#include "convfuse/random.hpp"

namespace convfuse {

namespace fs = std::filesystem;

namespace {

std::vector<const Sample*> gather(const std::vector<Sample>& samples, std::span<const std::size_t> idx) {
  std::vector<const Sample*> out;
  for (std::size_t i : idx) out.push_back(&samples.at(i));
  return out;
}

std::string fmt4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

MetricRow metric_row(const MetricsReport& r) { return {r.pixel_auroc, r.pixel_ap, r.image_auroc, r.image_ap}; }

}  // namespace

Corpus load_corpus(const RunConfig& config) {
  if (!config.dataset_dir.empty())
    return {load_dataset(config.dataset_dir, "train"), load_dataset(config.dataset_dir, "test")};
  return {gen_synthetic(config.train_params(), derive_seed(config.data_seed, "data.train")),
          gen_synthetic(config.test_params(), derive_seed(config.data_seed, "data.test"))};
}

BatchLoss loss_from_outputs(const GroupedModel& model, const VisionOutputs& vision, const TextOutputs& text,
                            const Tensor& masks, std::span<const int> labels, const LossConfig& loss) {
  const ModelConfig& mc = model.config();
  const AnomalyMaps maps = model.gateway().forward(vision.levels, text.levels, mc.patch_grid(), mc.pixel_grid());
  BatchLoss result;
  result.seg = seg_loss(maps.upsampled, masks, loss);
  result.cls = cls_loss(vision.cls_final, text.anchor(), mc.temperature, labels).loss;
  result.total = total_loss(result.seg, result.cls, loss);
  return result;
}

BatchLoss batch_loss(const GroupedModel& model, const std::vector<const Sample*>& batch, const LossConfig& loss) {
  std::vector<int> labels;
  for (const Sample* s : batch) labels.push_back(s->label);
  const ad::Var images = ad::constant(images_tensor(batch));
  return loss_from_outputs(model, model.vision_forward(images), model.text_forward(), masks_tensor(batch), labels, loss);
}

TrainResult train(const RunConfig& config, const std::vector<Sample>& samples, const StepCallback& on_step) {
  config.validate();
  if (samples.empty()) throw ConfigError("train: empty training set");
  TrainResult result{build_model(config.model, config.model_seed), {}};
  Adam adam(result.model.trainable_parameters(), {.learning_rate = config.optim.learning_rate});

  Rng rng(derive_seed(config.data_seed, "batches"));
  std::vector<std::size_t> order(samples.size());
  std::size_t cursor = order.size();
  const std::size_t bs = std::min(config.optim.batch_size, samples.size());

  for (std::size_t step = 0; step < config.optim.steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < bs) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    adam.zero_grad();
    BatchLoss loss;
    try {
      loss = batch_loss(result.model, gather(samples, idx), config.loss);
    } catch (const TrainingError& e) {
      throw TrainingError(std::string("diverged at step ") + std::to_string(step) + ": " + e.what(),
                          static_cast<long>(step), serialize_checkpoint(make_checkpoint(result.model, config, step)));
    }
    const StepRecord rec{step, loss.total.value().item(), loss.seg.value().item(), loss.cls.value().item()};
    result.trace.push_back(rec);
    if (on_step) on_step(rec);
    ad::backward(loss.total);
    adam.step();
  }
  return result;
}

std::vector<Prediction> predict(const GroupedModel& model, const std::vector<Sample>& samples, std::size_t batch_size) {
  ad::NoGradGuard no_grad;
  std::vector<Prediction> out;
  const double tau = model.config().temperature;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, samples.size() - start);
    std::vector<const Sample*> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(&samples[start + i]);
    const ModelOutputs res = model.forward(ad::constant(images_tensor(batch)));
    const Tensor p = abnormal_probability(res.vision.cls_final, res.text.anchor(), tau).value();
    const Tensor& maps = res.maps.upsampled.value();
    const std::size_t h = maps.dim(1), w = maps.dim(2);
    for (std::size_t i = 0; i < n; ++i) {
      Prediction pr;
      pr.id = batch[i]->id;
      pr.label = batch[i]->label;
      pr.p_abnormal = p[i];
      const auto vals = maps.values().subspan(i * h * w, h * w);
      pr.map = Tensor({h, w}, std::vector<double>(vals.begin(), vals.end()));
      pr.map_max = *std::max_element(vals.begin(), vals.end());
      pr.score = image_score(pr.p_abnormal, pr.map_max);
      out.push_back(std::move(pr));
    }
  }
  return out;
}

MetricsReport score_predictions(const std::vector<Prediction>& preds, const std::vector<Sample>& samples) {
  if (preds.empty()) throw MetricError("evaluate: empty dataset");
  if (preds.size() != samples.size()) throw MetricError("score_predictions: prediction and sample counts differ");
  MetricsReport r;
  std::vector<double> pixel_scores, image_scores;
  std::vector<int> pixel_labels, image_labels;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto vals = preds[i].map.values();
    if (vals.size() != samples[i].mask.size()) throw MetricError("map size differs from mask for '" + samples[i].id + "'");
    pixel_scores.insert(pixel_scores.end(), vals.begin(), vals.end());
    for (std::uint8_t m : samples[i].mask) pixel_labels.push_back(m ? 1 : 0);
    image_scores.push_back(preds[i].score);
    image_labels.push_back(samples[i].label);
  }
  r.images = preds.size();
  r.anomalous_images = static_cast<std::size_t>(std::count(image_labels.begin(), image_labels.end(), 1));
  r.pixels = pixel_labels.size();
  r.anomalous_pixels = static_cast<std::size_t>(std::count(pixel_labels.begin(), pixel_labels.end(), 1));
  r.pixel_auroc = auroc(pixel_scores, pixel_labels);
  r.pixel_ap = average_precision(pixel_scores, pixel_labels);
  r.image_auroc = auroc(image_scores, image_labels);
  r.image_ap = average_precision(image_scores, image_labels);
  return r;
}

MetricsReport evaluate(const GroupedModel& model, const std::vector<Sample>& samples, const RunConfig& config) {
  if (samples.empty()) throw MetricError("evaluate: empty dataset");
  MetricsReport r = score_predictions(predict(model, samples, config.eval_batch), samples);
  r.config_text = config_echo(config);

  // Gate entropy needs the per-level weights, which predict() does not keep.
  ad::NoGradGuard no_grad;
  const std::size_t levels = model.config().groups;
  r.gate_entropy.assign(levels, {0.0, 0.0});
  for (std::size_t start = 0; start < samples.size(); start += config.eval_batch) {
    const std::size_t n = std::min(config.eval_batch, samples.size() - start);
    std::vector<const Sample*> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(&samples[start + i]);
    const VisionOutputs vis = model.vision_forward(ad::constant(images_tensor(batch)));
    const LevelWeights w = model.gateway().mode() == FusionMode::Dynamic ? model.gateway().dynamic_weights(vis.levels)
                                                                       : model.gateway().static_weights(n);
    for (std::size_t l = 0; l < levels; ++l)
      for (std::size_t s = 0; s < 2; ++s) r.gate_entropy[l][s] += mean_entropy(w[l][s].value()) * static_cast<double>(n);
  }
  for (auto& e : r.gate_entropy)
    for (double& v : e) v /= static_cast<double>(samples.size());
  return r;
}

std::string format_report(const MetricsReport& r) {
  std::string out = "pixel_auroc,pixel_ap,image_auroc,image_ap\n";
  out += fmt4(r.pixel_auroc) + "," + fmt4(r.pixel_ap) + "," + fmt4(r.image_auroc) + "," + fmt4(r.image_ap) + "\n\n";
  out += "images,anomalous_images,pixels,anomalous_pixels\n";
  out += std::to_string(r.images) + "," + std::to_string(r.anomalous_images) + "," + std::to_string(r.pixels) + "," +
         std::to_string(r.anomalous_pixels) + "\n\n";
  out += "level,state,mean_gate_entropy\n";
  for (std::size_t l = 0; l < r.gate_entropy.size(); ++l)
    for (SemanticState s : kSemanticStates)
      out += std::to_string(l) + "," + state_name(s) + "," + fmt4(r.gate_entropy[l][index_of(s)]) + "\n";
  out += "\n";
  std::string echo;
  for (std::size_t pos = 0; pos < r.config_text.size();) {
    const std::size_t nl = r.config_text.find('\n', pos);
    echo += "# " + r.config_text.substr(pos, nl - pos) + "\n";
    pos = nl == std::string::npos ? r.config_text.size() : nl + 1;
  }
  return out + echo;
}

void export_maps(const fs::path& dir, const std::vector<Prediction>& predictions) {
  fs::create_directories(dir);
  std::ofstream index(dir / "scores.txt");
  if (!index) throw LoadError("cannot write " + (dir / "scores.txt").string());
  for (const auto& p : predictions) {
    Graymap g{p.map.dim(1), p.map.dim(0), 65535, {}};
    for (double v : p.map.values())
      g.values.push_back(static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0)));
    write_pgm(dir / (p.id + ".pgm"), g);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", p.score);
    index << p.id << ' ' << buf << '\n';
  }
}

const std::array<AblationVariant, 4>& ablation_variants() {
  static const std::array<AblationVariant, 4> v{{
      {"baseline", false, false},
      {"+conv_lora", true, false},
      {"+dfg", false, true},
      {"full", true, true},
  }};
  return v;
}

RunConfig ablation_config(const RunConfig& base, const AblationVariant& variant, std::size_t seed_offset) {
  RunConfig cfg = base;
  cfg.model.conv_lora = variant.conv_lora;
  cfg.model.dynamic_fusion = variant.dfg;
  cfg.model_seed = base.model_seed + seed_offset;
  cfg.data_seed = base.data_seed + seed_offset;
  return cfg;
}

AblationTable ablate(const RunConfig& config, const AblationCallback& on_run) {
  config.validate();
  AblationTable table;
  for (std::size_t r = 0; r < 4; ++r) table.rows[r].variant = ablation_variants()[r];
  for (std::size_t s = 0; s < config.ablation_seeds; ++s) {
    table.seeds.push_back(s);
    const Corpus corpus = load_corpus(ablation_config(config, ablation_variants()[0], s));
    for (auto& row : table.rows) {
      const RunConfig cfg = ablation_config(config, row.variant, s);
      const TrainResult tr = train(cfg, corpus.train);
      row.trainable_params = count_scalars(tr.model.parameters(), true);
      const MetricRow m = metric_row(evaluate(tr.model, corpus.test, cfg));
      row.per_seed.push_back(m);
      if (on_run) on_run(row.variant, s, m);
    }
  }
  for (auto& row : table.rows) {
    const double n = static_cast<double>(row.per_seed.size());
    for (const auto& m : row.per_seed) {
      row.mean.pixel_auroc += m.pixel_auroc / n;
      row.mean.pixel_ap += m.pixel_ap / n;
      row.mean.image_auroc += m.image_auroc / n;
      row.mean.image_ap += m.image_ap / n;
    }
  }
  return table;
}

std::string ablation_csv(const AblationTable& table) {
  std::string out = "config,pixel_auroc,pixel_ap,image_auroc,image_ap\n";
  for (const auto& row : table.rows)
    out += row.variant.name + "," + fmt4(row.mean.pixel_auroc) + "," + fmt4(row.mean.pixel_ap) + "," +
           fmt4(row.mean.image_auroc) + "," + fmt4(row.mean.image_ap) + "\n";
  return out;
}

std::string ablation_seed_csv(const AblationTable& table) {
  std::string out = "config,seed,pixel_auroc,pixel_ap,image_auroc,image_ap\n";
  for (const auto& row : table.rows)
    for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
      const auto& m = row.per_seed[i];
      out += row.variant.name + "," + std::to_string(table.seeds.at(i)) + "," + fmt4(m.pixel_auroc) + "," +
             fmt4(m.pixel_ap) + "," + fmt4(m.image_auroc) + "," + fmt4(m.image_ap) + "\n";
    }
  return out;
}

std::string ablation_census_csv(const AblationTable& table) {
  std::string out = "config,conv_lora,dfg,trainable_params\n";
  for (const auto& row : table.rows)
    out += row.variant.name + "," + (row.variant.conv_lora ? "on" : "off") + "," + (row.variant.dfg ? "on" : "off") +
           "," + std::to_string(row.trainable_params) + "\n";
  return out;
}

}  // namespace convfuse
