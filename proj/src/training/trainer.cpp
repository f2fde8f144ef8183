#include "caft/training/trainer.hpp"

#include <cmath>
#include <limits>

#include <spdlog/spdlog.h>

#include "caft/common/error.hpp"
#include "caft/common/hash.hpp"
#include "caft/engine/tape.hpp"
#include "caft/model/checkpoint.hpp"

namespace caft::training {

namespace {

enum class LossKind { kAux, kCaft, kNextToken };

struct Stage {
  std::string name;
  LossKind kind;
  TrainPlan plan;
  LossSchedule schedule;
  bool check_aux_reliability = false;
};

MetricsRecord mean_of(std::span<const MetricsRecord> steps) {
  MetricsRecord m;
  if (steps.empty()) return m;
  m.per_head_ce.assign(steps.front().per_head_ce.size(), 0.0);
  for (const auto& s : steps) {
    for (std::size_t k = 0; k < m.per_head_ce.size(); ++k) m.per_head_ce[k] += s.per_head_ce[k];
    m.gamma_value += s.gamma_value;
    m.l1 += s.l1;
    m.ln_unscaled += s.ln_unscaled;
    m.total += s.total;
    m.learning_rate += s.learning_rate;
  }
  const double n = static_cast<double>(steps.size());
  for (double& c : m.per_head_ce) {
    c /= n;
    m.per_head_ppl.push_back(std::exp(c));
  }
  m.gamma_value /= n;
  m.l1 /= n;
  m.ln_unscaled /= n;
  m.total /= n;
  m.learning_rate /= n;
  m.step = steps.back().step;
  m.epoch = steps.back().epoch;
  return m;
}

std::vector<engine::NamedTensor> snapshot_trainable(model::CaftModel& model) {
  std::vector<engine::NamedTensor> out;
  for (auto& [name, t] : model.parameters()) {
    if (t.requires_grad()) out.push_back({name, t.clone()});
  }
  return out;
}

void restore_snapshot(model::CaftModel& model, std::span<const engine::NamedTensor> snapshot) {
  std::map<std::string, const engine::Tensor*> by_name;
  for (const auto& nt : snapshot) by_name[nt.name] = &nt.tensor;
  model.visit_parameters([&](const std::string& name, engine::Tensor& t) {
    const auto it = by_name.find(name);
    if (it == by_name.end()) return;
    if (it->second->shape() != t.shape()) throw ContractError("snapshot shape mismatch for '" + name + "'");
    std::copy(it->second->data().begin(), it->second->data().end(), t.data().begin());
  });
}

void warn(TrainResult& result, const std::string& text) {
  spdlog::warn("{}", text);
  result.warnings.push_back(text);
}

// One training stage: freeze, optimize for plan.epochs with per-epoch
// held-out evaluation, early stoppage and best-snapshot restore.
void run_stage(model::CaftModel& model, std::span<const data::EncodedExample> train,
               std::span<const data::EncodedExample> valid, Stage stage, const TrainerHooks& hooks,
               TrainResult& result) {
  const TrainPlan& plan = stage.plan;
  plan.validate();
  if (train.empty()) throw InputError(stage.name + ": training set is empty");
  if (valid.empty()) throw InputError(stage.name + ": validation set is empty");

  if (is_lora(plan.phase) && !model.has_adapters()) attach_lora(model, plan.lora, plan.seed);
  apply_freeze(model, plan.phase);
  std::vector<engine::NamedTensor> params = model.parameters();

  const std::size_t per_epoch = steps_per_epoch(train.size(), plan.batch_size);
  const std::size_t total = per_epoch * plan.epochs;
  stage.schedule.total_steps = total;
  stage.schedule.validate();
  const LrSchedule lr{plan.peak_lr, plan.warmup_steps, total, plan.lr_floor_ratio};
  engine::AdamW optimizer({plan.peak_lr, 0.9, 0.999, 1e-8, plan.weight_decay});

  const std::size_t grid_heads = stage.kind == LossKind::kNextToken ? 1 : model.n_heads();
  const std::size_t eval_heads = grid_heads;

  std::size_t step = 0;
  std::size_t first_epoch = 1;
  double best_l1 = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t bad_epochs = 0;
  std::vector<engine::NamedTensor> best_snapshot;
  if (hooks.resume != nullptr && hooks.resume->stage == stage.name) {
    const ResumeState& r = *hooks.resume;
    first_epoch = r.epochs_done + 1;
    step = r.step;
    optimizer.restore(r.optimizer_steps, r.moments);
    best_l1 = r.best_l1;
    best_epoch = r.best_epoch;
    bad_epochs = r.bad_epochs;
    best_snapshot = r.best_snapshot;
    spdlog::info("{}: resuming after epoch {} (step {})", stage.name, r.epochs_done, step);
  }

  if (stage.check_aux_reliability && first_epoch == 1) {
    if (auto w = aux_reliability_warning(model, valid, plan.ce2_warning_threshold)) warn(result, *w + " (before training)");
  }

  for (std::size_t epoch = first_epoch; epoch <= plan.epochs; ++epoch) {
    model.set_training(true, plan.seed * 1000003ULL + epoch);
    const auto order = epoch_order(train.size(), plan.seed, epoch);
    const std::size_t first_record = result.steps.size();
    for (std::size_t start = 0; start < order.size(); start += plan.batch_size) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(plan.batch_size, order.size() - start));
      const data::Batch batch = data::make_batch(train, idx, grid_heads);
      result.batch_hashes.push_back(data::batch_hash(batch));

      engine::Tape tape;
      const model::TrunkState z = model.forward_trunk(batch.tokens);
      MetricsRecord rec;
      engine::Tensor loss;
      switch (stage.kind) {
        case LossKind::kNextToken: {
          const model::HeadOutputs out{{model.forward_head(z, 1)}};
          loss = per_head_ce(out, batch.grid)[0];
          rec.per_head_ce = {loss.item()};
          rec.per_head_ppl = {std::exp(loss.item())};
          rec.l1 = loss.item();
          rec.total = loss.item();
          break;
        }
        case LossKind::kAux: {
          const model::HeadOutputs out = model.forward_heads(z);
          const auto ce = per_head_ce(out, batch.grid);
          std::vector<engine::Tensor> aux(ce.begin() + 1, ce.end());
          loss = engine::weighted_sum(aux, aux_head_weights(stage.schedule.alpha, out.n_heads()));
          for (const auto& c : ce) {
            rec.per_head_ce.push_back(c.item());
            rec.per_head_ppl.push_back(std::exp(c.item()));
          }
          rec.l1 = rec.per_head_ce[0];
          rec.ln_unscaled = loss.item();
          rec.total = loss.item();
          rec.gamma_value = 1.0;
          break;
        }
        case LossKind::kCaft: {
          CaftLoss c = caft_loss(model.forward_heads(z), batch.grid, stage.schedule, step);
          loss = c.total;
          rec = std::move(c.record);
          break;
        }
      }
      tape.backward(loss);
      rec.step = step;
      rec.epoch = epoch;
      rec.learning_rate = lr.at(step);
      optimizer.step(params, rec.learning_rate);
      if (!std::isfinite(rec.total)) throw NumericError(stage.name + ": loss became non-finite at step " + std::to_string(step));
      if (hooks.metrics) {
        nlohmann::json j = to_json(rec);
        j["kind"] = "step";
        j["stage"] = stage.name;
        hooks.metrics->write(j);
      }
      result.steps.push_back(std::move(rec));
      ++step;
    }
    model.set_training(false);

    EpochRecord er;
    er.stage = stage.name;
    er.epoch = epoch;
    er.step = step;
    er.train_mean = mean_of(std::span(result.steps).subspan(first_record));
    er.valid_ce = mean_head_ce(model, valid, eval_heads);
    for (double c : er.valid_ce) er.valid_ppl.push_back(std::exp(c));
    er.valid_l1 = er.valid_ce[0];

    if (plan.early_stop.enabled) {
      if (er.valid_l1 < best_l1) {
        best_l1 = er.valid_l1;
        best_epoch = epoch;
        bad_epochs = 0;
        best_snapshot = snapshot_trainable(model);
        er.improved = true;
      } else {
        ++bad_epochs;
      }
    } else {
      best_epoch = epoch;
      er.improved = true;
    }
    if (hooks.metrics) {
      nlohmann::json j = to_json(er);
      j["kind"] = "epoch";
      hooks.metrics->write(j);
    }
    spdlog::info("{} epoch {}/{}: train total {:.4f}, valid L1 {:.4f}{}", stage.name, epoch, plan.epochs,
                 er.train_mean.total, er.valid_l1, er.improved ? " *" : "");
    if (stage.check_aux_reliability) {
      if (auto w = aux_reliability_warning(model, valid, plan.ce2_warning_threshold)) {
        warn(result, *w + " (after epoch " + std::to_string(epoch) + ")");
      }
    }
    result.epochs.push_back(er);

    if (hooks.on_epoch_end) {
      ResumeState state{stage.name, epoch, step, optimizer.step_count(), optimizer.moments(), best_l1,
                        best_epoch, bad_epochs, best_snapshot};
      hooks.on_epoch_end(er, model, state);
    }
    if (plan.early_stop.enabled && bad_epochs >= plan.early_stop.patience) {
      spdlog::info("{}: early stop after epoch {} (best epoch {})", stage.name, epoch, best_epoch);
      result.early_stopped = true;
      break;
    }
  }

  if (plan.early_stop.enabled && !best_snapshot.empty() && best_epoch != result.epochs.back().epoch) {
    restore_snapshot(model, best_snapshot);
    spdlog::info("{}: restored weights from epoch {}", stage.name, best_epoch);
  }
  result.best_epoch = best_epoch;
  result.total_steps += step;
  for (auto& [name, t] : model.parameters()) t.clear_grad();
}

}  // namespace

nlohmann::json to_json(const EpochRecord& r) {
  return {{"stage", r.stage},         {"epoch", r.epoch},         {"step", r.step},
          {"train", to_json(r.train_mean)}, {"valid_ce", r.valid_ce}, {"valid_ppl", r.valid_ppl},
          {"valid_l1", r.valid_l1},   {"improved", r.improved}};
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open metrics file '" + path.string() + "'");
}

void MetricsWriter::write(const nlohmann::json& record) {
  out_ << record.dump() << '\n';
  out_.flush();
  if (!out_) throw IoError("write failed for metrics file '" + path_.string() + "'");
}

void save_resume_state(const std::filesystem::path& path, const ResumeState& s) {
  model::TensorArchive archive;
  archive.header = {{"kind", "train_state"},
                    {"stage", s.stage},
                    {"epochs_done", s.epochs_done},
                    {"step", s.step},
                    {"optimizer_steps", s.optimizer_steps},
                    {"best_l1", std::isfinite(s.best_l1) ? nlohmann::json(s.best_l1) : nlohmann::json(nullptr)},
                    {"best_epoch", s.best_epoch},
                    {"bad_epochs", s.bad_epochs}};
  for (const auto& [name, m] : s.moments) {
    archive.tensors.push_back({"moment1/" + name, engine::Tensor({m.first.size()}, m.first)});
    archive.tensors.push_back({"moment2/" + name, engine::Tensor({m.second.size()}, m.second)});
  }
  for (const auto& nt : s.best_snapshot) archive.tensors.push_back({"best/" + nt.name, nt.tensor});
  model::write_archive(path, archive);
}

ResumeState load_resume_state(const std::filesystem::path& path) {
  model::TensorArchive a = model::read_archive(path);
  if (a.header.value("kind", "") != "train_state") throw FormatError(path.string() + ": not a train_state archive");
  ResumeState s;
  try {
    s.stage = a.header.at("stage").get<std::string>();
    s.epochs_done = a.header.at("epochs_done").get<std::size_t>();
    s.step = a.header.at("step").get<std::size_t>();
    s.optimizer_steps = a.header.at("optimizer_steps").get<std::uint64_t>();
    s.best_l1 = a.header.at("best_l1").is_null() ? std::numeric_limits<double>::infinity()
                                                 : a.header.at("best_l1").get<double>();
    s.best_epoch = a.header.at("best_epoch").get<std::size_t>();
    s.bad_epochs = a.header.at("bad_epochs").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  for (auto& nt : a.tensors) {
    const auto data = nt.tensor.data();
    if (nt.name.starts_with("moment1/")) {
      s.moments[nt.name.substr(8)].first.assign(data.begin(), data.end());
    } else if (nt.name.starts_with("moment2/")) {
      s.moments[nt.name.substr(8)].second.assign(data.begin(), data.end());
    } else if (nt.name.starts_with("best/")) {
      s.best_snapshot.push_back({nt.name.substr(5), nt.tensor});
    } else {
      throw FormatError(path.string() + ": unexpected tensor '" + nt.name + "'");
    }
  }
  return s;
}

std::optional<std::string> aux_reliability_warning(const model::CaftModel& model,
                                                   std::span<const data::EncodedExample> heldout, double threshold) {
  if (model.n_heads() < 2) return std::nullopt;
  const double ce2 = mean_head_ce(model, heldout, 2)[1];
  if (!(ce2 > threshold)) return std::nullopt;
  return fmt::format("held-out CE of head 2 is {:.3f} > {:.1f}: auxiliary heads look unreliable for this task; "
                     "consider aux_task_pretrain_epochs or retraining the heads",
                     ce2, threshold);
}

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size) {
  return (n_examples + batch_size - 1) / batch_size;
}

std::vector<std::size_t> epoch_order(std::size_t n_examples, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ULL * epoch));
  for (std::size_t i = n_examples; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

TrainResult train_aux_heads(model::CaftModel& model, std::span<const data::EncodedExample> train,
                            std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                            const LossSchedule& schedule, const TrainerHooks& hooks) {
  if (plan.phase != Phase::kAuxHeadTraining) {
    throw ContractError("train_aux_heads needs plan.phase = aux_head_training, got " + to_string(plan.phase));
  }
  if (model.n_heads() < 2) throw ContractError("train_aux_heads: model has n_future = 1, so there are no aux heads to train");
  if (model.has_adapters()) throw ContractError("train_aux_heads: merge LoRA adapters first");
  TrainResult result;
  run_stage(model, train, valid, {"aux_head_training", LossKind::kAux, plan, schedule, false}, hooks, result);
  return result;
}

TrainResult caft_finetune(model::CaftModel& model, std::span<const data::EncodedExample> train,
                          std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                          const LossSchedule& schedule, const TrainerHooks& hooks) {
  if (!is_caft(plan.phase)) {
    throw ContractError("caft_finetune needs a caft_full or caft_lora plan, got " + to_string(plan.phase));
  }
  if (model.n_heads() < 2) {
    throw ContractError("caft_finetune: model has no auxiliary heads; run train-aux (train_aux_heads) first");
  }
  TrainResult result;
  const bool resuming_main = hooks.resume != nullptr && hooks.resume->stage == to_string(plan.phase);
  if (plan.aux_task_pretrain_epochs > 0 && !resuming_main) {
    TrainPlan pre = plan;
    pre.phase = Phase::kAuxHeadTraining;
    pre.epochs = plan.aux_task_pretrain_epochs;
    pre.peak_lr = plan.aux_pretrain_lr;
    pre.early_stop.enabled = false;
    pre.aux_task_pretrain_epochs = 0;
    LossSchedule aux_only = schedule;
    aux_only.gamma_kind = GammaKind::kConstant;
    run_stage(model, train, valid, {"aux_task_pretrain", LossKind::kAux, pre, aux_only, false}, hooks, result);
  }
  run_stage(model, train, valid, {to_string(plan.phase), LossKind::kCaft, plan, schedule, true}, hooks, result);
  return result;
}

TrainResult pretrain(model::CaftModel& model, std::span<const data::EncodedExample> train,
                     std::span<const data::EncodedExample> valid, const TrainPlan& plan, const TrainerHooks& hooks) {
  if (plan.phase != Phase::kPretrain) throw ContractError("pretrain needs plan.phase = pretrain, got " + to_string(plan.phase));
  if (model.has_adapters()) throw ContractError("pretrain: model has LoRA adapters attached");
  TrainResult result;
  run_stage(model, train, valid, {"pretrain", LossKind::kNextToken, plan, LossSchedule{}, false}, hooks, result);
  return result;
}

TrainResult next_token_finetune(model::CaftModel& model, std::span<const data::EncodedExample> train,
                                std::span<const data::EncodedExample> valid, const TrainPlan& plan,
                                const TrainerHooks& hooks) {
  if (!is_next_token(plan.phase)) {
    throw ContractError("next_token_finetune needs a next_token_full or next_token_lora plan, got " +
                        to_string(plan.phase));
  }
  TrainResult result;
  LossSchedule unused;
  run_stage(model, train, valid, {to_string(plan.phase), LossKind::kNextToken, plan, unused, false}, hooks, result);
  return result;
}

}  // namespace caft::training
