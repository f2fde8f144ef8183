#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

#include "caft/common/error.hpp"
#include "caft/data/dataset.hpp"
#include "caft/data/target_grid.hpp"
#include "caft/engine/ops.hpp"
#include "caft/engine/tape.hpp"
#include "caft/training/losses.hpp"
#include "caft/training/lora.hpp"
#include "caft/training/plan.hpp"
#include "caft/training/schedule.hpp"
#include "caft/training/trainer.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace caft;
using namespace caft::training;
using caft::engine::bit_equal;
using caft::engine::Tensor;
using caft::model::CaftModel;
namespace fs = std::filesystem;

namespace {

std::vector<data::EncodedExample> random_examples(std::size_t n, std::size_t vocab, std::size_t max_len,
                                                  std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<data::EncodedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 6 + rng() % (max_len - 5);
    data::EncodedExample e;
    e.ids.push_back(data::kBosId);
    for (std::size_t j = 1; j < len; ++j) e.ids.push_back(static_cast<engine::TokenId>(3 + rng() % (vocab - 3)));
    e.completion_start = 1 + rng() % 3;
    out.push_back(std::move(e));
  }
  return out;
}

// A learnable toy task: each sequence counts upward modulo the vocabulary.
std::vector<data::EncodedExample> counting_examples(std::size_t n, std::size_t vocab, std::size_t max_len,
                                                    std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<data::EncodedExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = 6 + rng() % (max_len - 5);
    data::EncodedExample e;
    e.ids.push_back(data::kBosId);
    std::size_t v = rng() % (vocab - 3);
    for (std::size_t j = 1; j < len; ++j, v = (v + 1) % (vocab - 3)) e.ids.push_back(static_cast<engine::TokenId>(3 + v));
    e.completion_start = 1;
    out.push_back(std::move(e));
  }
  return out;
}

std::map<std::string, Tensor> snapshot(const CaftModel& m) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : const_cast<CaftModel&>(m).parameters()) out[name] = t.clone();
  return out;
}

std::set<std::string> changed(const std::map<std::string, Tensor>& before, CaftModel& after) {
  std::set<std::string> out;
  for (const auto& [name, t] : after.parameters()) {
    const auto it = before.find(name);
    if (it == before.end() || !bit_equal(it->second, t)) out.insert(name);
  }
  return out;
}

std::set<std::string> names_in(CaftModel& m, const std::set<model::ParameterGroup>& groups) {
  std::set<std::string> out;
  for (const auto& [name, t] : m.parameters()) {
    if (groups.contains(model::parameter_group(name))) out.insert(name);
  }
  return out;
}

TrainPlan fast_plan(Phase phase) {
  TrainPlan p = default_plan(phase);
  p.epochs = 2;
  p.batch_size = 8;
  p.peak_lr = 1e-2;
  p.warmup_steps = 0;
  p.early_stop.enabled = false;
  p.seed = 5;
  return p;
}

// Logits of shape (1, 1, V) whose CE against target 0 is exactly `ce` up to rounding.
Tensor logits_with_ce(std::size_t vocab, double ce) {
  std::vector<double> v(vocab, 0.0);
  const double p = std::exp(-ce);
  v[0] = std::log(p * static_cast<double>(vocab - 1) / (1.0 - p));
  return Tensor({1, 1, vocab}, v);
}

std::vector<double> grads_of(CaftModel& m) {
  std::vector<double> g;
  for (auto& [name, t] : m.parameters()) {
    if (!t.has_grad()) continue;
    g.insert(g.end(), t.grad().begin(), t.grad().end());
  }
  return g;
}

void clear_grads(CaftModel& m) {
  for (auto& [name, t] : m.parameters()) t.clear_grad();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "caft_training_test";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("gamma schedule examples") {
  const std::size_t T = 1000;
  CHECK(gamma(0, T, GammaKind::kRSine) == 1.0);
  CHECK(gamma(T, T, GammaKind::kRSine) == 0.0);
  CHECK(gamma(T / 2, T, GammaKind::kRSine) == doctest::Approx(std::sin(std::numbers::pi / 4)).epsilon(1e-12));
  CHECK(std::fabs(gamma(T / 2, T, GammaKind::kRSine) - 0.70710678) < 1e-8);
  CHECK(gamma(0, T, GammaKind::kSine) == 0.0);
  CHECK(gamma(T, T, GammaKind::kSine) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gamma(17, T, GammaKind::kConstant) == 1.0);
  CHECK(gamma(T + 5, T, GammaKind::kRSine) == 0.0);
  CHECK(gamma(T + 5, T, GammaKind::kSine) == 0.0);
  CHECK_THROWS_AS(gamma(0, 0, GammaKind::kRSine), ContractError);
}

TEST_CASE("rsine gamma is nonincreasing on a 1000-step grid (property)") {
  const std::size_t T = 1000;
  double prev = gamma(0, T, GammaKind::kRSine);
  for (std::size_t t = 1; t <= T; ++t) {
    const double g = gamma(t, T, GammaKind::kRSine);
    REQUIRE(g <= prev);
    REQUIRE(g >= 0.0);
    prev = g;
  }
}

TEST_CASE("gamma kind parsing") {
  CHECK(parse_gamma_kind("rsine") == GammaKind::kRSine);
  CHECK(parse_gamma_kind("RSine") == GammaKind::kRSine);
  CHECK(parse_gamma_kind("sine") == GammaKind::kSine);
  CHECK(parse_gamma_kind("constant") == GammaKind::kConstant);
  CHECK_THROWS_AS(parse_gamma_kind("cosine"), ConfigError);
}

TEST_CASE("auxiliary weight vectors") {
  const auto w = aux_head_weights(0.8, 5);
  const std::vector<double> expected{1.0, 0.8, 0.64, 0.512};
  REQUIRE(w.size() == expected.size());
  for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::fabs(w[i] - expected[i]) < 1e-15);
  const auto c = caft_aux_weights(0.8, 5);
  const std::vector<double> expected_c{0.8, 0.64, 0.512, 0.4096};
  for (std::size_t i = 0; i < c.size(); ++i) CHECK(std::fabs(c[i] - expected_c[i]) < 1e-15);
  CHECK(aux_head_weights(0.8, 1).empty());

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ws = aux_head_weights(u(rng), 8);
    for (std::size_t i = 1; i < ws.size(); ++i) REQUIRE(ws[i] < ws[i - 1]);
  }
}

TEST_CASE("learning-rate schedule: linear warmup then cosine to the floor") {
  const LrSchedule lr{1e-4, 10, 110, 0.1};
  CHECK(lr.at(0) == doctest::Approx(1e-5));
  CHECK(lr.at(9) == doctest::Approx(1e-4));
  CHECK(lr.at(10) == doctest::Approx(1e-4));
  CHECK(lr.at(60) == doctest::Approx(0.55e-4));
  CHECK(lr.at(110) == doctest::Approx(1e-5));
  CHECK(lr.at(500) == doctest::Approx(1e-5));
  for (std::size_t s = 11; s <= 110; ++s) REQUIRE(lr.at(s) <= lr.at(s - 1));
}

TEST_CASE("schedule validation") {
  LossSchedule s;
  CHECK_NOTHROW(s.validate());
  s.alpha = 0.0;
  s.beta = -1.0;
  s.total_steps = 0;
  try {
    s.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("caft_alpha") != std::string::npos);
    CHECK(msg.find("caft_beta") != std::string::npos);
    CHECK(msg.find("total_steps") != std::string::npos);
  }
}

TEST_CASE("caft_loss hand-computed example") {
  // alpha 0.8, beta 0.01, gamma 1, five heads with CE 1 each.
  model::HeadOutputs out;
  for (int k = 0; k < 5; ++k) out.logits.push_back(logits_with_ce(7, 1.0));
  data::TargetGrid g1;
  g1.batch = 1;
  g1.seq = 1;
  g1.n_future = 5;
  g1.targets.assign(5, 0);
  g1.mask.assign(5, 1);
  LossSchedule s;
  s.gamma_kind = GammaKind::kConstant;
  const CaftLoss loss = caft_loss(out, g1, s, 0);
  for (double ce : loss.record.per_head_ce) CHECK(std::fabs(ce - 1.0) < 1e-12);
  CHECK(std::fabs(loss.total.item() - 1.023616) < 1e-10);
  CHECK(std::fabs(loss.record.ln_unscaled - (1.0 + 0.8 + 0.64 + 0.512)) < 1e-10);
  CHECK(loss.record.gamma_value == 1.0);
}

TEST_CASE("caft_loss equals the manual weighted sum (property)") {
  std::mt19937_64 rng(41);
  std::uniform_real_distribution<double> ua(0.01, 0.99), ub(0.0, 0.1);
  const CaftModel m = CaftModel::create(caft::testing::tiny_config(5), 8);
  const auto examples = random_examples(6, 23, 12, 2);
  const data::Batch batch = data::make_batch(examples, 5);
  const model::HeadOutputs out = m.forward(batch.tokens);
  const auto ce = per_head_ce(out, batch.grid);
  for (int trial = 0; trial < 30; ++trial) {
    LossSchedule s;
    s.alpha = ua(rng);
    s.beta = ub(rng);
    s.total_steps = 200;
    const std::size_t t = rng() % 201;
    const double g = gamma(t, 200, GammaKind::kRSine);
    double manual = ce[0].item();
    for (std::size_t k = 2; k <= 5; ++k) manual += s.beta * g * std::pow(s.alpha, double(k - 1)) * ce[k - 1].item();
    const CaftLoss l = caft_loss(out, batch.grid, s, t);
    CHECK(std::fabs(l.total.item() - manual) < 1e-10);
    CHECK(l.record.l1 == ce[0].item());
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::fabs(l.record.per_head_ppl[k] - std::exp(l.record.per_head_ce[k])) < 1e-9);

    s.literal_formula = true;
    double literal = 0.0;
    for (std::size_t k = 1; k <= 5; ++k) literal += s.beta * g * std::pow(s.alpha, double(k - 1)) * ce[k - 1].item();
    CHECK(std::fabs(caft_loss(out, batch.grid, s, t).total.item() - literal) < 1e-10);
  }
}

TEST_CASE("beta = 0 and t = T give exactly the plain CE1 gradient") {
  CaftModel m = CaftModel::create(caft::testing::tiny_config(5), 9);
  const auto examples = random_examples(4, 23, 12, 4);
  const data::Batch batch = data::make_batch(examples, 5);

  auto grad_with = [&](const std::function<Tensor(const model::HeadOutputs&)>& loss_fn) {
    clear_grads(m);
    engine::Tape tape;
    const Tensor loss = loss_fn(m.forward(batch.tokens));
    tape.backward(loss);
    return grads_of(m);
  };
  const auto reference = grad_with([&](const model::HeadOutputs& out) { return per_head_ce(out, batch.grid)[0]; });

  LossSchedule beta0;
  beta0.beta = 0.0;
  beta0.total_steps = 10;
  CHECK(grad_with([&](const model::HeadOutputs& out) { return caft_loss(out, batch.grid, beta0, 3).total; }) ==
        reference);
  CHECK(caft_loss(m.forward(batch.tokens), batch.grid, beta0, 3).total.item() ==
        per_head_ce(m.forward(batch.tokens), batch.grid)[0].item());

  LossSchedule end;
  end.total_steps = 10;
  CHECK(grad_with([&](const model::HeadOutputs& out) { return caft_loss(out, batch.grid, end, 10).total; }) ==
        reference);

  LossSchedule active;
  active.beta = 0.05;
  active.total_steps = 10;
  CHECK(grad_with([&](const model::HeadOutputs& out) { return caft_loss(out, batch.grid, active, 0).total; }) !=
        reference);
}

TEST_CASE("aux_head_loss examples") {
  const CaftModel m = CaftModel::create(caft::testing::tiny_config(5), 10);
  const auto examples = random_examples(5, 23, 12, 6);
  const data::Batch batch = data::make_batch(examples, 5);
  const model::HeadOutputs out = m.forward(batch.tokens);
  const auto ce = per_head_ce(out, batch.grid);

  model::HeadOutputs two{{out.logits[0], out.logits[1]}};
  CHECK(aux_head_loss(two, batch.grid, 1.0).item() == doctest::Approx(ce[1].item()).epsilon(1e-14));

  double manual = 0.0;
  const std::vector<double> w{1.0, 0.8, 0.64, 0.512};
  for (std::size_t k = 2; k <= 5; ++k) manual += w[k - 2] * ce[k - 1].item();
  CHECK(std::fabs(aux_head_loss(out, batch.grid, 0.8).item() - manual) < 1e-12);

  data::TargetGrid masked = batch.grid;
  std::fill(masked.mask.begin(), masked.mask.end(), 0);
  CHECK(aux_head_loss(out, masked, 0.8).item() == 0.0);

  model::HeadOutputs one{{out.logits[0]}};
  CHECK_THROWS_AS(aux_head_loss(one, batch.grid, 0.8), ContractError);
}

TEST_CASE("full CAFT loss gradient matches finite differences") {
  std::mt19937_64 rng(77);
  for (int instance = 0; instance < 20; ++instance) {
    CAPTURE(instance);
    CaftModel m = CaftModel::create(caft::testing::tiny_config(4), 100 + instance);
    for (auto& [name, t] : m.parameters()) caft::testing::perturb(t, rng, 0.05);
    const auto examples = random_examples(2, 23, 10, 200 + instance);
    const data::Batch batch = data::make_batch(examples, 4);
    LossSchedule s;
    s.beta = 0.3;
    s.total_steps = 20;
    const std::size_t t = rng() % 20;
    auto loss = [&] { return caft_loss(m.forward(batch.tokens), batch.grid, s, t).total; };
    clear_grads(m);
    {
      engine::Tape tape;
      Tensor l = loss();
      tape.backward(l);
    }
    double worst = 0.0;
    for (auto& [name, p] : m.parameters()) {
      if (name.find("head.") == 0 && name.find(".ln") != std::string::npos) continue;
      const auto idx = caft::testing::sample_indices(p.size(), 2, rng);
      const auto numeric = caft::testing::numeric_gradient(p, [&] { return loss().item(); }, idx);
      worst = std::max(worst, caft::testing::max_relative_error(p, numeric, idx));
    }
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("phase defaults and plan validation") {
  CHECK(default_plan(Phase::kNextTokenFull).peak_lr == 5e-6);
  CHECK(default_plan(Phase::kCaftFull).peak_lr == 1e-5);
  CHECK(default_plan(Phase::kCaftLora).peak_lr == 1e-5);
  const TrainPlan aux = default_plan(Phase::kAuxHeadTraining);
  CHECK(aux.epochs == 4);
  CHECK(aux.batch_size == 64);
  CHECK(aux.peak_lr == 1e-4);
  CHECK(aux.warmup_steps == 300);
  CHECK_FALSE(aux.early_stop.enabled);
  const TrainPlan ft = default_plan(Phase::kCaftLora);
  CHECK(ft.epochs == 5);
  CHECK(ft.batch_size == 32);
  CHECK(ft.lora.rank == 8);
  CHECK(ft.lora.alpha == 16.0);
  CHECK(ft.lora.dropout == 0.10);

  TrainPlan bad = default_plan(Phase::kNextTokenFull);
  bad.epochs = 0;
  bad.aux_task_pretrain_epochs = 1;
  bad.lora.rank = 0;
  try {
    bad.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epochs") != std::string::npos);
    CHECK(msg.find("aux_task_pretrain_epochs") != std::string::npos);
    CHECK(msg.find("lora_rank") != std::string::npos);
  }
  CHECK(parse_phase("caft_lora") == Phase::kCaftLora);
  CHECK_THROWS_AS(parse_phase("caft"), ConfigError);
}

TEST_CASE("freeze integrity: changed parameters equal the unfrozen set for every phase") {
  const auto train = random_examples(24, 23, 12, 11);
  const auto valid = random_examples(6, 23, 12, 12);
  const CaftModel base = CaftModel::create(caft::testing::tiny_config(5), 13);
  for (Phase phase : {Phase::kPretrain, Phase::kAuxHeadTraining, Phase::kCaftFull, Phase::kCaftLora,
                      Phase::kNextTokenFull, Phase::kNextTokenLora}) {
    CAPTURE(to_string(phase));
    CaftModel m = base.clone();
    const auto before = snapshot(m);
    TrainPlan plan = fast_plan(phase);
    LossSchedule s;
    s.beta = 0.5;
    TrainResult r;
    if (phase == Phase::kPretrain) {
      r = pretrain(m, train, valid, plan);
    } else if (phase == Phase::kAuxHeadTraining) {
      r = train_aux_heads(m, train, valid, plan, s);
    } else if (is_caft(phase)) {
      r = caft_finetune(m, train, valid, plan, s);
    } else {
      r = next_token_finetune(m, train, valid, plan);
    }
    CHECK(r.total_steps == 2 * steps_per_epoch(train.size(), plan.batch_size));
    CHECK(r.epochs.size() == 2);
    const auto diff = changed(before, m);
    if (is_lora(phase)) {
      CHECK(m.has_adapters());
      for (const auto& name : diff) CHECK(model::parameter_group(name) == model::ParameterGroup::kAdapters);
      CHECK(diff == names_in(m, {model::ParameterGroup::kAdapters}));
    } else {
      CHECK(diff == names_in(m, trainable_groups(phase)));
    }
    if (is_caft(phase) || is_next_token(phase)) {
      CHECK(bit_equal(before.at("unembed.weight"), m.unembedding()));
    }
  }
}

TEST_CASE("pretraining then rebuilding the aux heads restores copy-initialization") {
  const auto train = counting_examples(24, 23, 12, 15);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(1), 16);
  pretrain(m, train, train, fast_plan(Phase::kPretrain));
  m.rebuild_aux_heads(4);
  CHECK(m.n_heads() == 4);
  CHECK(m.config().n_future == 4);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : m.parameters()) by_name[name] = t;
  for (const auto& [name, t] : by_name) {
    if (name.rfind("head.1.", 0) != 0) continue;
    for (int k = 2; k <= 4; ++k) CHECK(bit_equal(t, by_name.at("head." + std::to_string(k) + name.substr(6))));
  }
  // deep copies: touching head 1 leaves head 2 alone
  m.head_block(1).ln_f.gain.at(0) += 1.0;
  CHECK(m.head_block(2).ln_f.gain.at(0) != m.head_block(1).ln_f.gain.at(0));
  CHECK_THROWS_AS(m.rebuild_aux_heads(0), ContractError);
}

TEST_CASE("aux-head training keeps head-1 logits bit-identical") {
  const auto train = counting_examples(48, 23, 12, 21);
  const auto valid = counting_examples(12, 23, 12, 22);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(5), 23);
  const model::TokenBatch probe = caft::testing::random_batch(3, 10, 23, 24);
  const Tensor head1_before = m.forward_head(m.forward_trunk(probe), 1);
  TrainPlan plan = default_plan(Phase::kAuxHeadTraining);
  plan.batch_size = 8;
  plan.peak_lr = 3e-3;
  plan.warmup_steps = 4;
  const TrainResult r = train_aux_heads(m, train, valid, plan, LossSchedule{});
  REQUIRE(r.epochs.size() == 4);
  CHECK(bit_equal(m.forward_head(m.forward_trunk(probe), 1), head1_before));
  for (std::size_t k = 1; k < 5; ++k) CHECK(r.epochs.back().valid_ce[k] < r.epochs.front().valid_ce[k]);
  for (const auto& e : r.epochs) CHECK(e.valid_ce.size() == 5);

  TrainPlan wrong = plan;
  wrong.phase = Phase::kCaftFull;
  CHECK_THROWS_AS(train_aux_heads(m, train, valid, wrong, LossSchedule{}), ContractError);
  CaftModel single = CaftModel::create(caft::testing::tiny_config(1), 1);
  CHECK_THROWS_AS(train_aux_heads(single, train, valid, plan, LossSchedule{}), ContractError);
}

TEST_CASE("CAFT contract errors") {
  const auto train = random_examples(8, 23, 12, 31);
  CaftModel single = CaftModel::create(caft::testing::tiny_config(1), 1);
  try {
    caft_finetune(single, train, train, fast_plan(Phase::kCaftFull), LossSchedule{});
    FAIL("expected ContractError");
  } catch (const ContractError& e) {
    CHECK(std::string(e.what()).find("train-aux") != std::string::npos);
  }
  CaftModel m = CaftModel::create(caft::testing::tiny_config(3), 1);
  CHECK_THROWS_AS(caft_finetune(m, train, train, fast_plan(Phase::kNextTokenFull), LossSchedule{}), ContractError);
  CHECK_THROWS_AS(next_token_finetune(m, train, train, fast_plan(Phase::kCaftFull)), ContractError);
  CHECK_THROWS_AS(next_token_finetune(m, {}, train, fast_plan(Phase::kNextTokenFull)), InputError);
}

TEST_CASE("beta = 0 CAFT and next-token fine-tuning produce identical weights") {
  const auto train = random_examples(20, 23, 12, 41);
  const auto valid = random_examples(6, 23, 12, 42);
  const CaftModel base = CaftModel::create(caft::testing::tiny_config(4), 43);
  for (Phase pair : {Phase::kCaftFull, Phase::kCaftLora}) {
    CAPTURE(to_string(pair));
    CaftModel a = base.clone();
    CaftModel b = base.clone();
    TrainPlan pa = fast_plan(pair);
    pa.epochs = 3;
    pa.early_stop = {true, 1};
    TrainPlan pb = pa;
    pb.phase = pair == Phase::kCaftFull ? Phase::kNextTokenFull : Phase::kNextTokenLora;
    LossSchedule s;
    s.beta = 0.0;
    const TrainResult ra = caft_finetune(a, train, valid, pa, s);
    const TrainResult rb = next_token_finetune(b, train, valid, pb);
    CHECK(ra.batch_hashes == rb.batch_hashes);
    CHECK(ra.best_epoch == rb.best_epoch);
    const auto pa_params = a.parameters();
    const auto pb_params = b.parameters();
    REQUIRE(pa_params.size() == pb_params.size());
    for (std::size_t i = 0; i < pa_params.size(); ++i) {
      CAPTURE(pa_params[i].name);
      CHECK(bit_equal(pa_params[i].tensor, pb_params[i].tensor));
    }
  }
}

TEST_CASE("batch order is a seeded permutation") {
  const auto o1 = epoch_order(50, 7, 1);
  CHECK(o1 == epoch_order(50, 7, 1));
  CHECK(o1 != epoch_order(50, 7, 2));
  CHECK(o1 != epoch_order(50, 8, 1));
  auto sorted = o1;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(steps_per_epoch(50, 8) == 7);
  CHECK(steps_per_epoch(48, 8) == 6);
}

TEST_CASE("early stoppage halts within patience and restores the best weights") {
  // Random tokens with a large step size: validation L1 soon rises.
  const auto train = random_examples(16, 23, 12, 51);
  const auto valid = random_examples(16, 23, 12, 52);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(1), 53);
  TrainPlan plan = fast_plan(Phase::kNextTokenFull);
  plan.epochs = 40;
  plan.peak_lr = 3e-2;
  plan.early_stop = {true, 2};
  std::map<std::size_t, std::map<std::string, Tensor>> weights;
  TrainerHooks hooks;
  hooks.on_epoch_end = [&](const EpochRecord& e, CaftModel& model, const ResumeState&) { weights[e.epoch] = snapshot(model); };
  const TrainResult r = next_token_finetune(m, train, valid, plan, hooks);
  REQUIRE(r.early_stopped);
  CHECK(r.epochs.size() < 40);
  CHECK(r.epochs.size() == r.best_epoch + plan.early_stop.patience);
  double best = 1e300;
  for (const auto& e : r.epochs) best = std::min(best, e.valid_l1);
  CHECK(r.epochs[r.best_epoch - 1].valid_l1 == best);
  CHECK(changed(weights.at(r.best_epoch), m).empty());
  CHECK(mean_head_ce(m, valid, 1)[0] == best);
}

TEST_CASE("held-out CE2 warning fires on an unreliable model") {
  model::ModelConfig cfg = caft::testing::tiny_config(3);
  cfg.vocab_size = 181;
  CaftModel m = CaftModel::create(cfg, 61);
  const auto data = random_examples(8, 181, 12, 62);
  const double ce2 = mean_head_ce(m, data, 2)[1];
  CHECK(ce2 == doctest::Approx(std::log(181.0)).epsilon(0.02));
  const auto w = aux_reliability_warning(m, data, 4.0);
  REQUIRE(w.has_value());
  CHECK(w->find("head 2") != std::string::npos);
  CHECK_FALSE(aux_reliability_warning(m, data, 10.0).has_value());

  TrainPlan plan = fast_plan(Phase::kCaftFull);
  plan.epochs = 1;
  plan.peak_lr = 1e-6;
  const TrainResult r = caft_finetune(m, data, data, plan, LossSchedule{});
  CHECK(r.warnings.size() == 2);
}

TEST_CASE("task-specific aux pretraining runs before CAFT") {
  const auto train = counting_examples(16, 23, 12, 71);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(3), 72);
  TrainPlan plan = fast_plan(Phase::kCaftFull);
  plan.aux_task_pretrain_epochs = 1;
  const TrainResult r = caft_finetune(m, train, train, plan, LossSchedule{});
  REQUIRE(r.epochs.size() == 3);
  CHECK(r.epochs[0].stage == "aux_task_pretrain");
  CHECK(r.epochs[1].stage == "caft_full");
  CHECK(r.total_steps == 3 * steps_per_epoch(16, plan.batch_size));
}

TEST_CASE("CAFT leaves aux heads and the unembedding bit-unchanged") {
  const auto train = counting_examples(16, 23, 12, 81);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(4), 82);
  const auto before = snapshot(m);
  caft_finetune(m, train, train, fast_plan(Phase::kCaftFull), LossSchedule{});
  const auto diff = changed(before, m);
  for (const auto& name : diff) {
    CHECK(model::parameter_group(name) != model::ParameterGroup::kAuxHeads);
    CHECK(model::parameter_group(name) != model::ParameterGroup::kUnembedding);
  }
  CHECK_FALSE(diff.empty());
}

TEST_CASE("metrics stream has one line per step and per epoch") {
  const fs::path path = scratch("metrics.jsonl");
  fs::remove(path);
  const auto train = random_examples(16, 23, 12, 91);
  CaftModel m = CaftModel::create(caft::testing::tiny_config(3), 92);
  TrainResult r;
  {
    MetricsWriter writer(path);
    TrainerHooks hooks;
    hooks.metrics = &writer;
    r = caft_finetune(m, train, train, fast_plan(Phase::kCaftFull), LossSchedule{}, hooks);
  }
  std::ifstream in(path);
  std::string line;
  std::size_t steps = 0, epochs = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    if (j.at("kind") == "step") {
      ++steps;
      const auto ce = j.at("per_head_ce").get<std::vector<double>>();
      const auto ppl = j.at("per_head_ppl").get<std::vector<double>>();
      REQUIRE(ce.size() == 3);
      for (std::size_t k = 0; k < 3; ++k) CHECK(std::fabs(ppl[k] - std::exp(ce[k])) < 1e-9);
    } else {
      ++epochs;
    }
  }
  CHECK(steps == r.steps.size());
  CHECK(epochs == r.epochs.size());
  // gamma follows the run-global rsine schedule
  CHECK(r.steps.front().gamma_value == 1.0);
  CHECK(r.steps.back().gamma_value < r.steps.front().gamma_value);
}

TEST_CASE("resuming from an epoch boundary reproduces an uninterrupted run") {
  const auto train = random_examples(20, 23, 12, 101);
  const auto valid = random_examples(6, 23, 12, 102);
  const CaftModel base = CaftModel::create(caft::testing::tiny_config(3), 103);
  TrainPlan plan = fast_plan(Phase::kCaftFull);
  plan.epochs = 3;
  plan.early_stop = {true, 3};
  plan.peak_lr = 1e-3;

  CaftModel straight = base.clone();
  caft_finetune(straight, train, valid, plan, LossSchedule{});

  const fs::path state_path = scratch("resume.bin");
  std::optional<CaftModel> saved;
  {
    CaftModel first = base.clone();
    TrainPlan one = plan;
    TrainerHooks hooks;
    hooks.on_epoch_end = [&](const EpochRecord& e, CaftModel& model, const ResumeState& state) {
      if (e.epoch != 1) return;
      saved = model.clone();
      save_resume_state(state_path, state);
      throw InputError("interrupted");
    };
    CHECK_THROWS_AS(caft_finetune(first, train, valid, one, LossSchedule{}, hooks), InputError);
  }
  REQUIRE(saved.has_value());
  const ResumeState state = load_resume_state(state_path);
  CHECK(state.epochs_done == 1);
  CHECK(state.stage == "caft_full");
  TrainerHooks resume;
  resume.resume = &state;
  caft_finetune(*saved, train, valid, plan, LossSchedule{}, resume);
  const auto a = straight.parameters();
  const auto b = saved->parameters();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CAPTURE(a[i].name);
    CHECK(bit_equal(a[i].tensor, b[i].tensor));
  }
}

TEST_CASE("LoRA: zero-initialized adapters are exact no-ops") {
  CaftModel m = CaftModel::create(caft::testing::tiny_config(3), 111);
  const model::TokenBatch probe = caft::testing::random_batch(2, 9, 23, 112);
  const auto before = m.forward(probe);
  attach_lora(m, LoraConfig{}, 3);
  CHECK(m.has_adapters());
  const auto after = m.forward(probe);
  for (std::size_t k = 1; k <= 3; ++k) CHECK(bit_equal(before.head(k), after.head(k)));
  CHECK_THROWS_AS(attach_lora(m, LoraConfig{}, 3), ContractError);

  // Merging zero adapters leaves the weights bitwise unchanged.
  const auto weights = snapshot(m);
  lora_merge(m);
  CHECK_FALSE(m.has_adapters());
  for (auto& [name, t] : m.parameters()) CHECK(bit_equal(weights.at(name), t));
  CHECK_THROWS_AS(lora_merge(m), ContractError);
}

TEST_CASE("LoRA: merged forward matches adapter forward") {
  std::mt19937_64 rng(121);
  for (int trial = 0; trial < 5; ++trial) {
    CaftModel m = CaftModel::create(caft::testing::tiny_config(2), 122 + trial);
    attach_lora(m, LoraConfig{4, 8.0, 0.1}, trial);
    m.visit_adaptable_linears([&](const std::string&, model::Linear& l) { caft::testing::perturb(l.lora->b, rng, 0.2); });
    const model::TokenBatch probe = caft::testing::random_batch(3, 10, 23, 123 + trial);
    const auto adapted = m.forward(probe);
    lora_merge(m);
    const auto merged = m.forward(probe);
    double worst = 0.0;
    for (std::size_t k = 1; k <= 2; ++k) {
      for (std::size_t i = 0; i < adapted.head(k).size(); ++i) {
        worst = std::max(worst, std::fabs(adapted.head(k).at(i) - merged.head(k).at(i)));
      }
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("LoRA: merge rejects mismatched adapters") {
  std::mt19937_64 rng(131);
  model::Linear layer = model::make_linear(4, 6, 0.1, rng);
  model::LoraAdapter bad{Tensor::zeros({4, 2}), Tensor::zeros({3, 6}), 2, 16.0, 0.0};
  CHECK_THROWS_AS(lora_merge(layer, bad), ContractError);
  model::LoraAdapter wrong_shape{Tensor::zeros({5, 2}), Tensor::zeros({2, 6}), 2, 16.0, 0.0};
  CHECK_THROWS_AS(lora_merge(layer, wrong_shape), ContractError);
  model::LoraAdapter wrong_rank{Tensor::zeros({4, 2}), Tensor::zeros({2, 6}), 3, 16.0, 0.0};
  CHECK_THROWS_AS(lora_merge(layer, wrong_rank), ContractError);
}

TEST_CASE("LoRA: hand-computed merge") {
  model::Linear layer{Tensor({2, 2}, {1, 0, 0, 1}), Tensor::zeros({2}), std::nullopt};
  model::LoraAdapter ad{Tensor({2, 1}, {1, 2}), Tensor({1, 2}, {3, 4}), 1, 2.0, 0.0};
  lora_merge(layer, ad);
  // W + 2 * [1;2][3 4] = [[7, 8], [12, 17]]
  CHECK(layer.weight.at(0) == 7.0);
  CHECK(layer.weight.at(1) == 8.0);
  CHECK(layer.weight.at(2) == 12.0);
  CHECK(layer.weight.at(3) == 17.0);
}
