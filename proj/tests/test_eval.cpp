#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mmoe/eval.hpp"
#include "mmoe/io.hpp"

using namespace mmoe;

namespace {

struct World {
  Ensemble ens;
  LabeledDataset train, test;
};

World trained_world(std::uint64_t seed, int n_classes = 4, int per_class = 40, int epochs = 2) {
  EnsembleConfig cfg;
  cfg.trunk = make_conv_trunk({{4, 3}, {8, 3}}, 1);
  cfg.n_fc_hidden = 1;
  cfg.expert_fc_width = 16;
  cfg.mediator_fc_width = 16;
  cfg.shared_prefix_convs = 1;
  cfg.confidence_attach_conv = 2;
  cfg.input_shape = {1, 12, 12};
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < n_classes; ++c) pairs.emplace_back(c, c < n_classes / 2 ? 0 : 1);
  World w{make_ensemble(cfg, GatingConfig{2.0, 0.6}, SuperclassMap::from_pairs(pairs), seed),
          synth_dataset(derive_seed(seed, "train"), n_classes, per_class, 12),
          synth_dataset(derive_seed(seed, "test"), n_classes, per_class / 2, 12)};
  TrainConfig tcfg;
  tcfg.epochs = epochs;
  tcfg.batch_size = 16;
  tcfg.seed = derive_seed(seed, "t");
  train_mediator(w.ens, w.train, tcfg);
  build_experts(w.ens, derive_seed(seed, "b"));
  for (int i = 0; i < w.ens.n_experts(); ++i) train_expert(w.ens, i, w.train, tcfg);
  train_confidence_heads(w.ens, w.train, tcfg);
  return w;
}

}  // namespace

TEST_CASE("expected params formula on the synthetic accounting example") {
  ParamAccounting counts;
  counts.fixed = 300.0;
  counts.expert_suffix = {100.0, 100.0};
  counts.mediator_tail = 200.0;
  const std::vector<double> p_stop = {0.5, 0.5};
  CHECK(expected_params_formula(counts, p_stop, 0.25) == doctest::Approx(450.0));
}

TEST_CASE("margin summaries: hand computation") {
  const std::vector<double> correct = {6.0, 7.0, 5.0};
  const std::vector<double> wrong = {2.0, 1.0, 3.0};
  CHECK(summarize_margins(correct).mean == doctest::Approx(6.0));
  CHECK(summarize_margins(wrong).mean == doctest::Approx(2.0));
  CHECK(summarize_margins({}).count == 0);
}

TEST_CASE("rates stay in range and stop counts match the records") {
  const World w = trained_world(51);
  const EvalCache cache = build_eval_cache(w.ens, w.test);
  for (EvalMode mode : {EvalMode::SingleBaseline, EvalMode::Branching, EvalMode::Unmediated,
                        EvalMode::MMoE}) {
    const MetricsReport rep = evaluate_cached(cache, w.ens.gating, mode);
    CHECK(rep.top1 >= 0.0);
    CHECK(rep.top1 <= 1.0);
    CHECK(rep.false_stop_rate >= 0.0);
    CHECK(rep.false_stop_rate <= 1.0);
    CHECK(rep.mediator_rate >= 0.0);
    CHECK(rep.mediator_rate <= 1.0);
    for (double p : rep.p_stop) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
    }

    const auto records = prediction_records(cache, w.ens.gating, mode);
    std::vector<double> p_stop(rep.p_stop.size(), 0.0);
    double params = 0.0;
    for (const PredictionRecord& r : records) {
      for (int i : r.decision.stopped) p_stop[static_cast<std::size_t>(i)] += 1.0;
      params += r.params_loaded;
    }
    for (std::size_t i = 0; i < p_stop.size(); ++i) {
      CHECK(rep.p_stop[i] ==
            doctest::Approx(p_stop[i] / static_cast<double>(records.size())).epsilon(1e-12));
    }
    CHECK(rep.expected_params ==
          doctest::Approx(params / static_cast<double>(records.size())).epsilon(1e-12));
  }
}

TEST_CASE("cached evaluation reproduces predict() bit for bit") {
  const World w = trained_world(52);
  const EvalCache cache = build_eval_cache(w.ens, w.test);
  for (std::size_t i = 0; i < w.test.size(); ++i) {
    const PredictionRecord a = eval_sample(cache, i, w.ens.gating, EvalMode::MMoE);
    const PredictionRecord b =
        predict(w.ens, w.test.sample(i), w.ens.gating, static_cast<int>(i), w.test.labels[i]);
    REQUIRE(a.scores.s == b.scores.s);
    REQUIRE(a.decision.active == b.decision.active);
    REQUIRE(a.decision.stopped == b.decision.stopped);
    REQUIRE(a.fused == b.fused);
    REQUIRE(a.predicted == b.predicted);
    REQUIRE(a.params_loaded == b.params_loaded);
    REQUIRE(b.decision.mediator_invoked == (b.decision.active.size() > 1));
  }
}

TEST_CASE("threshold sweep rows equal fresh evaluations") {
  const World w = trained_world(53);
  const std::vector<double> t_list = {0.5, 1.0, 2.0, 4.0, 8.0};
  const auto rows = threshold_sweep(w.ens, w.test, t_list);
  REQUIRE(rows.size() == t_list.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    GatingConfig cfg = w.ens.gating;
    cfg.threshold = t_list[i];
    const MetricsReport fresh = evaluate(w.ens, w.test, cfg, EvalMode::MMoE);
    CHECK(rows[i].metrics.top1 == fresh.top1);
    CHECK(rows[i].metrics.p_stop == fresh.p_stop);
    CHECK(rows[i].metrics.false_stop_rate == fresh.false_stop_rate);
    CHECK(rows[i].metrics.expected_params == fresh.expected_params);
  }
}

TEST_CASE("monotone trends across the threshold sweep") {
  const World w = trained_world(54);
  const std::vector<double> t_list = {0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0, 14.0};
  const auto rows = threshold_sweep(w.ens, w.test, t_list);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i].metrics.expected_params >= rows[i - 1].metrics.expected_params);
    CHECK(rows[i].metrics.false_stop_rate <= rows[i - 1].metrics.false_stop_rate);
    for (std::size_t e = 0; e < rows[i].metrics.p_stop.size(); ++e) {
      CHECK(rows[i].metrics.p_stop[e] <= rows[i - 1].metrics.p_stop[e]);
    }
  }
}

TEST_CASE("analytic accounting equals the empirical mean") {
  const World w = trained_world(55);
  const EvalCache cache = build_eval_cache(w.ens, w.test);
  for (double t : {0.5, 2.0, 6.0}) {
    GatingConfig cfg = w.ens.gating;
    cfg.threshold = t;
    const MetricsReport rep = evaluate_cached(cache, cfg, EvalMode::MMoE);
    const double analytic =
        expected_params_formula(cache.counts, rep.p_stop, rep.mediator_rate);
    CHECK(std::abs(analytic - rep.expected_params) / rep.expected_params < 1e-6);
  }
}

TEST_CASE("very large threshold loads every parameter exactly") {
  const World w = trained_world(56);
  GatingConfig cfg = w.ens.gating;
  cfg.threshold = 1e9;
  const MetricsReport rep = evaluate(w.ens, w.test, cfg, EvalMode::MMoE);
  const ParamAccounting counts = count_ensemble_params(w.ens);
  CHECK(rep.expected_params == counts.total_all);
  CHECK(rep.mediator_rate == 1.0);
  for (double p : rep.p_stop) CHECK(p == 0.0);
  CHECK(rep.false_stop_rate == 0.0);
}

TEST_CASE("reference counts: traditional MoE and the single model") {
  const World w = trained_world(60);
  const ParamAccounting counts = count_ensemble_params(w.ens);
  double trad = 0.0;
  for (const ExpertSlot& e : w.ens.experts) trad += static_cast<double>(param_count(e.net));
  CHECK(counts.traditional_moe == trad);
  CHECK(counts.mediator_full == static_cast<double>(param_count(w.ens.mediator)));
  CHECK(counts.mediator_full == counts.shared_prefix + counts.mediator_tail);
  // The shared prefix is counted once in the fixed part.
  double fixed = counts.shared_prefix;
  for (std::size_t i = 0; i < counts.expert_head.size(); ++i) {
    fixed += counts.expert_head[i] + counts.expert_prefix_to_j[i];
  }
  CHECK(counts.fixed == fixed);
}

TEST_CASE("single-expert ensemble never runs the mediator") {
  EnsembleConfig cfg;
  cfg.trunk = make_conv_trunk({{4, 3}}, 1);
  cfg.n_fc_hidden = 1;
  cfg.expert_fc_width = 8;
  cfg.mediator_fc_width = 8;
  cfg.shared_prefix_convs = 0;
  cfg.confidence_attach_conv = 1;
  cfg.input_shape = {1, 8, 8};
  std::vector<std::pair<int, int>> pairs = {{0, 0}, {1, 0}, {2, 0}};
  Ensemble ens = make_ensemble(cfg, GatingConfig{2.0, 0.6}, SuperclassMap::from_pairs(pairs), 61);
  const LabeledDataset train = synth_dataset(62, 3, 20, 8);
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.seed = 63;
  train_mediator(ens, train, tcfg);
  build_experts(ens, 64);
  train_expert(ens, 0, train, tcfg);
  train_confidence_heads(ens, train, tcfg);

  const MetricsReport rep = evaluate(ens, train, ens.gating, EvalMode::MMoE);
  CHECK(rep.mediator_rate == 0.0);
  CHECK(rep.p_stop == std::vector<double>{0.0});
  const ParamAccounting counts = count_ensemble_params(ens);
  // Fixed part + the single expert's suffix, mediator never invoked.
  CHECK(rep.expected_params ==
        doctest::Approx(counts.fixed + counts.expert_suffix[0]).epsilon(1e-12));

  const PredictionRecord rec = predict(ens, train.sample(0), ens.gating);
  CHECK(rec.decision.active == std::vector<int>{0});
  CHECK_FALSE(rec.mediator_executed);
  // The prediction equals the scattered argmax of the only expert.
  CHECK(rec.predicted == argmax_lowest(rec.fused));
}

TEST_CASE("unmediated mode forces the mediator weight to zero") {
  const World w = trained_world(57);
  const EvalCache cache = build_eval_cache(w.ens, w.test);
  const MetricsReport mmoe_rep = evaluate_cached(cache, w.ens.gating, EvalMode::MMoE);
  const MetricsReport unmed = evaluate_cached(cache, w.ens.gating, EvalMode::Unmediated);
  CHECK(unmed.mediator_rate == 0.0);
  CHECK(unmed.p_stop == mmoe_rep.p_stop);  // same gating, different fusion
  CHECK(unmed.expected_params < mmoe_rep.expected_params);

  const auto records = prediction_records(cache, w.ens.gating, EvalMode::Unmediated);
  for (const PredictionRecord& r : records) {
    CHECK(r.weights.mediator_weight == 0.0);
    CHECK_FALSE(r.mediator_executed);
    double sum = r.weights.mediator_weight;
    for (double v : r.weights.expert_weights) sum += v;
    CHECK(std::abs(sum - 1.0) < 1e-9);  // renormalized over active experts
  }
}

TEST_CASE("branching bookkeeping: one active expert, no mediator") {
  const World w = trained_world(58);
  const EvalCache cache = build_eval_cache(w.ens, w.test);
  const MetricsReport rep = evaluate_cached(cache, w.ens.gating, EvalMode::Branching);
  CHECK(rep.mediator_rate == 0.0);
  double p_sum = 0.0;
  for (double p : rep.p_stop) p_sum += p;
  CHECK(p_sum == doctest::Approx(static_cast<double>(w.ens.n_experts() - 1)));
  CHECK(rep.false_stop_rate == doctest::Approx(1.0 - rep.superclass_top1));
}

TEST_CASE("csv writers emit stable headers") {
  const World w = trained_world(59);
  const std::vector<double> t_list = {1.0, 2.0};
  const auto rows = threshold_sweep(w.ens, w.test, t_list);
  const std::string csv = sweep_csv(rows);
  CHECK(csv.rfind("T,top1,p_stop_0,p_stop_1,false_stop,mediator_rate,expected_params\n", 0) == 0);

  const MetricsReport rep = evaluate(w.ens, w.test, w.ens.gating, EvalMode::MMoE);
  const std::string mcsv = metrics_csv(rep);
  CHECK(mcsv.find("mode,n_samples,top1,superclass_top1,p_stop_0,p_stop_1,false_stop,") == 0);

  const std::vector<SharedSweepRow> srows = {{0, 0.5}, {2, 0.25}};
  CHECK(shared_sweep_csv(srows) == "k,top1\n0,0.5\n2,0.25\n");
}

TEST_CASE("shared layers sweep: deterministic rows for fixed seeds") {
  EnsembleConfig cfg;
  cfg.trunk = make_conv_trunk({{4, 3}, {8, 3}}, 1);
  cfg.n_fc_hidden = 1;
  cfg.expert_fc_width = 16;
  cfg.mediator_fc_width = 16;
  cfg.shared_prefix_convs = 1;
  cfg.confidence_attach_conv = 2;
  cfg.input_shape = {1, 12, 12};
  std::vector<std::pair<int, int>> pairs;
  for (int c = 0; c < 4; ++c) pairs.emplace_back(c, c < 2 ? 0 : 1);
  const SuperclassMap map = SuperclassMap::from_pairs(pairs);
  const LabeledDataset train = synth_dataset(71, 4, 30, 12);
  const LabeledDataset test = synth_dataset(72, 4, 15, 12);
  TrainConfig tcfg;
  tcfg.epochs = 1;
  tcfg.seed = 73;
  const std::vector<int> k_list = {0, 2};
  const auto rows1 = shared_layers_sweep(cfg, GatingConfig{2.0, 0.6}, map, train, test, k_list,
                                         tcfg);
  const auto rows2 = shared_layers_sweep(cfg, GatingConfig{2.0, 0.6}, map, train, test, k_list,
                                         tcfg);
  REQUIRE(rows1.size() == 2);
  CHECK(rows1[0].k == 0);
  CHECK(rows1[1].k == 2);
  for (std::size_t i = 0; i < rows1.size(); ++i) {
    CHECK(rows1[i].top1 == rows2[i].top1);
  }
}
