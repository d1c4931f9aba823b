// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "convfuse/error.hpp"
#include "convfuse/gateway.hpp"
#include "convfuse/harness.hpp"
#include "convfuse/kernels.hpp"
#include "convfuse/losses.hpp"
#include "test_util.hpp"

namespace convfuse {
namespace {

RunConfig small_run() {
  RunConfig cfg;
  cfg.model.image_size = 16;
  cfg.model.channels = 16;
  cfg.model.heads = 2;
  cfg.model.rank = 2;
  cfg.model.gate_hidden = 8;
  cfg.train_samples = 24;
  cfg.test_samples = 16;
  cfg.optim.steps = 6;
  cfg.optim.batch_size = 4;
  cfg.eval_batch = 5;
  return cfg;
}

// ---- training ---------------------------------------------------------------------

TEST(Train, ZeroStepsIsInitialization) {
  RunConfig cfg = small_run();
  cfg.optim.steps = 0;
  const Corpus corpus = load_corpus(cfg);
  const TrainResult tr = train(cfg, corpus.train);
  EXPECT_TRUE(tr.trace.empty());
  const GroupedModel init = build_model(cfg.model, cfg.model_seed);
  EXPECT_EQ(make_checkpoint(tr.model, cfg, 0), make_checkpoint(init, cfg, 0));
}

// Step-0 loss from plain-value pieces: frozen features, uniform fusion
// weights (zero-init gate output layers), plain losses.
double step0_oracle(const RunConfig& cfg, const std::vector<Sample>& samples) {
  const GroupedModel m = build_model(cfg.model, cfg.model_seed);
  std::vector<const Sample*> batch;
  for (const Sample& s : samples) batch.push_back(&s);
  const VisionOutputs vis = m.vision_forward(ad::constant(images_tensor(batch)));
  const TextOutputs text = m.text_forward();
  const std::size_t n = cfg.model.groups, b = batch.size(), c = cfg.model.channels;
  const Grid grid = cfg.model.patch_grid();
  Tensor fused({2, c});
  for (const auto& t : text.levels)
    for (std::size_t i = 0; i < 2 * c; ++i) fused[i] += t.value()[i] / static_cast<double>(n);
  Tensor agg({b, grid.height, grid.width});
  for (const auto& v : vis.levels) {
    const Tensor lm = level_anomaly_map(v.value(), fused.values().subspan(0, c), fused.values().subspan(c, c),
                                        cfg.model.temperature);
    for (std::size_t i = 0; i < agg.size(); ++i) agg[i] += lm[i] / static_cast<double>(n);
  }
  const Tensor up = kernels::bilinear_upsample(agg, cfg.model.pixel_grid());
  std::vector<int> labels;
  for (const Sample* s : batch) labels.push_back(s->label);
  const double seg = seg_loss(up, masks_tensor(batch), cfg.loss);
  const double cls = cls_loss(vis.cls_final.value(), text.anchor().value(), cfg.model.temperature, labels);
  return total_loss(seg, cls, cfg.loss);
}

TEST(Train, StepZeroLossMatchesForwardOracle) {
  RunConfig cfg = small_run();
  cfg.optim.steps = 1;
  cfg.optim.batch_size = cfg.train_samples;  // whole set, so batch order is irrelevant
  const Corpus corpus = load_corpus(cfg);
  const TrainResult tr = train(cfg, corpus.train);
  ASSERT_EQ(tr.trace.size(), 1u);
  EXPECT_NEAR(tr.trace[0].total, step0_oracle(cfg, corpus.train), 1e-12);
  EXPECT_NEAR(tr.trace[0].total, tr.trace[0].seg + cfg.loss.cls_weight * tr.trace[0].cls, 1e-14);
}

TEST(Train, DefaultConfigLowersTheLossIn200Steps) {
  RunConfig cfg;
  cfg.optim.steps = 200;
  const Corpus corpus = load_corpus(cfg);
  std::vector<const Sample*> all;
  for (const Sample& s : corpus.train) all.push_back(&s);
  const double before = batch_loss(build_model(cfg.model, cfg.model_seed), all, cfg.loss).total.value().item();
  const TrainResult tr = train(cfg, corpus.train);
  const double after = batch_loss(tr.model, all, cfg.loss).total.value().item();
  EXPECT_LT(after, before);
  EXPECT_EQ(tr.trace.size(), 200u);
}

TEST(Train, DeterministicPerSeeds) {
  const RunConfig cfg = small_run();
  const Corpus corpus = load_corpus(cfg);
  const TrainResult a = train(cfg, corpus.train), b = train(cfg, corpus.train);
  EXPECT_EQ(a.trace, b.trace);
  EXPECT_EQ(serialize_checkpoint(make_checkpoint(a.model, cfg, 6)), serialize_checkpoint(make_checkpoint(b.model, cfg, 6)));
}

TEST(Train, OnlyTrainablesMove) {
  const RunConfig cfg = small_run();
  const TrainResult tr = train(cfg, load_corpus(cfg).train);
  const GroupedModel init = build_model(cfg.model, cfg.model_seed);
  const auto a = tr.model.parameters(), b = init.parameters();
  bool moved = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].trainable()) EXPECT_EQ(a[i].var.value(), b[i].var.value()) << a[i].name;
    else moved |= a[i].var.value() != b[i].var.value();
  }
  EXPECT_TRUE(moved);
}

TEST(Train, DivergenceCarriesStepAndSnapshot) {
  RunConfig cfg = small_run();
  cfg.optim.learning_rate = 1e300;
  cfg.optim.steps = 50;
  try {
    train(cfg, load_corpus(cfg).train);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GT(e.step(), 0);
    const Checkpoint snap = deserialize_checkpoint(e.snapshot());
    EXPECT_EQ(static_cast<long>(snap.step), e.step());
  }
}

// ---- evaluation -------------------------------------------------------------------

TEST(Evaluate, BitIdenticalAcrossCalls) {
  const RunConfig cfg = small_run();
  const Corpus corpus = load_corpus(cfg);
  const TrainResult tr = train(cfg, corpus.train);
  const MetricsReport a = evaluate(tr.model, corpus.test, cfg), b = evaluate(tr.model, corpus.test, cfg);
  EXPECT_EQ(a, b);
  EXPECT_EQ(format_report(a), format_report(b));
  EXPECT_EQ(a.images, 16u);
  EXPECT_EQ(a.pixels, 16u * 256u);
  EXPECT_EQ(a.gate_entropy.size(), 3u);
  for (double m : {a.pixel_auroc, a.pixel_ap, a.image_auroc, a.image_ap}) {
    EXPECT_GE(m, 0.0);
    EXPECT_LE(m, 1.0);
  }
  // Batch size does not change the predictions beyond roundoff.
  RunConfig one = cfg;
  one.eval_batch = 1;
  EXPECT_NEAR(evaluate(tr.model, corpus.test, one).pixel_auroc, a.pixel_auroc, 1e-9);
}

std::vector<Prediction> predictions_from(const std::vector<Sample>& samples, double noise, std::mt19937_64& rng,
                                         bool random_scores = false) {
  std::normal_distribution<double> eps(0.0, noise);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::vector<Prediction> out;
  for (const Sample& s : samples) {
    Prediction p;
    p.id = s.id;
    p.label = s.label;
    p.map = Tensor({s.height, s.width});
    for (std::size_t k = 0; k < s.mask.size(); ++k) p.map[k] = random_scores ? uni(rng) : s.mask[k] + eps(rng);
    p.score = random_scores ? uni(rng) : s.label + eps(rng);
    out.push_back(std::move(p));
  }
  return out;
}

TEST(Evaluate, OracleScoresExceedPointNineNine) {
  const Corpus corpus = load_corpus(RunConfig{});
  std::mt19937_64 rng(1);
  const MetricsReport r = score_predictions(predictions_from(corpus.test, 1e-3, rng), corpus.test);
  EXPECT_GT(r.pixel_auroc, 0.99);
  EXPECT_GT(r.pixel_ap, 0.99);
  EXPECT_GT(r.image_auroc, 0.99);
  EXPECT_GT(r.image_ap, 0.99);
}

TEST(Evaluate, RandomScoresStayInTheNullBand) {
  // Under the null the Mann-Whitney statistic has sd sqrt((n1+n0+1)/(12 n1 n0)).
  const Corpus corpus = load_corpus(RunConfig{});
  const double n1 = 50, n0 = 50;
  const double sd = std::sqrt((n1 + n0 + 1) / (12 * n1 * n0));
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const MetricsReport r = score_predictions(predictions_from(corpus.test, 0.0, rng, true), corpus.test);
    EXPECT_EQ(r.anomalous_images, 50u);
    EXPECT_LT(std::abs(r.image_auroc - 0.5), 3 * sd) << "seed " << seed;
  }
}

TEST(Evaluate, SingleClassIsUndefined) {
  RunConfig cfg = small_run();
  cfg.data.anomaly_rate = 0.0;
  const Corpus corpus = load_corpus(cfg);
  EXPECT_THROW(evaluate(build_model(cfg.model, 1), corpus.test, cfg), MetricError);
}

TEST(Evaluate, TrainThenEvalFromCheckpointReproducesReport) {
  const RunConfig cfg = small_run();
  const Corpus corpus = load_corpus(cfg);
  const TrainResult tr = train(cfg, corpus.train);
  const Checkpoint ckpt = deserialize_checkpoint(serialize_checkpoint(make_checkpoint(tr.model, cfg, 6)));
  const RunConfig back = checkpoint_config(ckpt);
  EXPECT_EQ(evaluate(restore_model(ckpt), load_corpus(back).test, back), evaluate(tr.model, corpus.test, cfg));
}

TEST(ExportMaps, GraymapsAndScoreIndex) {
  const RunConfig cfg = small_run();
  const Corpus corpus = load_corpus(cfg);
  const auto preds = predict(build_model(cfg.model, 1), corpus.test, 4);
  const auto dir = std::filesystem::temp_directory_path() / "convfuse_test_maps";
  std::filesystem::remove_all(dir);
  export_maps(dir, preds);
  const Graymap g = read_pgm(dir / (preds[3].id + ".pgm"));
  EXPECT_EQ(g.maxval, 65535u);
  EXPECT_EQ(g.width, 16u);
  for (std::size_t k = 0; k < g.values.size(); ++k) EXPECT_NEAR(g.values[k] / 65535.0, preds[3].map[k], 0.5 / 65535 + 1e-12);
  std::ifstream scores(dir / "scores.txt");
  std::string id;
  double score = 0;
  std::size_t lines = 0;
  while (scores >> id >> score) {
    EXPECT_EQ(id, preds[lines].id);
    EXPECT_NEAR(score, preds[lines].score, 1e-8 * std::abs(preds[lines].score));
    ++lines;
  }
  EXPECT_EQ(lines, preds.size());
  std::filesystem::remove_all(dir);
}

// ---- ablation ---------------------------------------------------------------------

TEST(Ablation, VariantsAndSwitches) {
  const auto& v = ablation_variants();
  EXPECT_EQ(v[0].name, "baseline");
  EXPECT_FALSE(v[0].conv_lora || v[0].dfg);
  EXPECT_TRUE(v[1].conv_lora && !v[1].dfg);
  EXPECT_TRUE(!v[2].conv_lora && v[2].dfg);
  EXPECT_TRUE(v[3].conv_lora && v[3].dfg);
  const RunConfig c = ablation_config(small_run(), v[2], 3);
  EXPECT_EQ(c.model_seed, 4u);
  EXPECT_EQ(c.data_seed, 4u);
  EXPECT_TRUE(c.model.dynamic_fusion);
  EXPECT_FALSE(c.model.conv_lora);
}

TEST(Ablation, OffOffRowEqualsIndependentBaselineRun) {
  RunConfig cfg = small_run();
  cfg.ablation_seeds = 1;
  cfg.optim.steps = 3;
  const AblationTable table = ablate(cfg);
  RunConfig base = cfg;
  base.model.conv_lora = false;
  base.model.dynamic_fusion = false;
  const Corpus corpus = load_corpus(base);
  const MetricsReport r = evaluate(train(base, corpus.train).model, corpus.test, base);
  const MetricRow& row = table.rows[0].per_seed[0];
  EXPECT_EQ(row.pixel_auroc, r.pixel_auroc);
  EXPECT_EQ(row.pixel_ap, r.pixel_ap);
  EXPECT_EQ(row.image_auroc, r.image_auroc);
  EXPECT_EQ(row.image_ap, r.image_ap);
  // Census: baseline trains strictly fewer parameters than the full model.
  EXPECT_LT(table.rows[0].trainable_params, table.rows[3].trainable_params);
  EXPECT_LT(table.rows[0].trainable_params, table.rows[1].trainable_params);
  EXPECT_LT(table.rows[0].trainable_params, table.rows[2].trainable_params);
  // Exactly four rows of four metrics.
  const std::string csv = ablation_csv(table);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), ','), 5 * 4);
}

TEST(Ablation, OneHotDiagonalGatesReproduceStaticFusionAtStepZero) {
  RunConfig full = small_run();
  RunConfig stat = full;
  stat.model.dynamic_fusion = false;
  const GroupedModel a = build_model(full.model, 1), b = build_model(stat.model, 1);
  const Corpus corpus = load_corpus(full);
  std::vector<const Sample*> batch;
  for (std::size_t i = 0; i < 4; ++i) batch.push_back(&corpus.train[i]);
  const ad::Var img = ad::constant(images_tensor(batch));
  const VisionOutputs va = a.vision_forward(img);
  const TextOutputs ta = a.text_forward();
  const AnomalyMaps forced =
      a.gateway().forward_with_weights(va.levels, ta.levels, a.gateway().static_weights(4), full.model.patch_grid(),
                                       full.model.pixel_grid());
  EXPECT_EQ(forced.upsampled.value(), b.forward(img).maps.upsampled.value());
}

}  // namespace
}  // namespace convfuse
