// SPDX-License-Identifier: Apache-2.0
#include "trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "error.hpp"
#include "ops.hpp"

namespace rexmoe {

namespace {

std::vector<std::int64_t> shape_vec(const Tensor& t) { return {t.shape().begin(), t.shape().end()}; }

}  // namespace

Trainer::Trainer(RunConfig cfg, Corpus corpus) : cfg_(std::move(cfg)), corpus_(std::move(corpus)) {
  cfg_.validate();
  if (static_cast<std::int64_t>(corpus_.size()) < cfg_.train.seq_len + 1)
    throw ConfigError("corpus has " + std::to_string(corpus_.size()) + " bytes, fewer than one sequence of " +
                      std::to_string(cfg_.train.seq_len + 1));
  model_ = std::make_unique<Model>(cfg_.model, cfg_.train.global_seed);
  for (auto& np : model_->named_parameters()) {
    names_.push_back(np.name);
    params_.push_back(np.tensor);
  }
  opt_ = AdamW(cfg_.train.adam, params_);
}

void check_masks_respected(const Model& model, const PsrSchedule& psr, std::uint64_t seed,
                           std::int64_t iteration, const ForwardResult& fr) {
  for (int l = 0; l < static_cast<int>(fr.routing.size()); ++l) {
    const auto& group = model.group_of(l);
    const auto full = static_cast<std::int64_t>(group.pool->size());
    if (pool_size_at(psr, iteration, group.size()) >= full) continue;
    const auto mask = sample_mask(psr, iteration, l, seed, group.size());
    for (auto s : fr.routing[l].slots)
      if (!mask.keep[s])
        throw Error(ErrorKind::Internal, "masked slot " + std::to_string(s) + " selected at step " +
                                             std::to_string(iteration) + " layer " + std::to_string(l));
  }
}

StepReport Trainer::step() {
  const auto t = next_step_;
  const auto& tc = cfg_.train;
  const auto rows = next_batch(corpus_, t, tc.global_seed, tc.batch_size, tc.seq_len);
  const auto split = split_batch(rows, tc.batch_size, tc.seq_len);

  for (auto& p : params_) p.clear_grad();
  Tape tape;
  TapeScope scope(tape);
  ForwardOptions fo;
  fo.iteration = t;
  fo.mask_mode = MaskMode::Psr;
  fo.schedule = &cfg_.psr;
  fo.seed = tc.global_seed;
  fo.aux_loss_coeff = tc.aux_loss_coeff;
  ForwardResult fr = model_->forward(split.inputs, tc.batch_size, tc.seq_len, fo);
  Tensor loss = cross_entropy(fr.logits, split.targets);
  const double ce = loss.item();
  if (!std::isfinite(ce))
    throw NumericError("non-finite loss " + std::to_string(ce) + " at step " + std::to_string(t));
  if (fr.aux_loss.defined()) loss = add(loss, fr.aux_loss);
  check_masks_respected(*model_, cfg_.psr, tc.global_seed, t, fr);

  tape.backward(loss);
  tape.clear();
  const double norm = clip_grads(params_, tc.clip_norm);
  if (!std::isfinite(norm))
    throw NumericError("non-finite gradient norm at step " + std::to_string(t));
  const double lr = lr_at(tc.lr, t);
  opt_.step(params_, lr);

  StepReport r;
  r.step = t;
  r.loss = ce;
  r.lr = lr;
  r.pool_size = pool_size_at(cfg_.psr, t);
  r.grad_norm = norm;
  r.trace = make_trace(cfg_.model);
  append_forward(r.trace, t, fr);
  ++next_step_;
  return r;
}

Checkpoint Trainer::to_checkpoint() const {
  Checkpoint ck;
  ck.config_json = run_config_to_json(cfg_);
  const auto& m = opt_.first_moments();
  const auto& v = opt_.second_moments();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto shape = shape_vec(params_[i]);
    const auto d = params_[i].data();
    ck.tensors.push_back({names_[i], shape, {d.begin(), d.end()}});
    ck.optimizer.push_back({"m." + names_[i], shape, m[i]});
    ck.optimizer.push_back({"v." + names_[i], shape, v[i]});
  }
  ck.step = static_cast<std::uint64_t>(next_step_);
  ck.rng.global_seed = cfg_.train.global_seed;
  ck.rng.data_counter = static_cast<std::uint64_t>(next_step_);
  ck.rng.mask_counter = static_cast<std::uint64_t>(next_step_);
  return ck;
}

void Trainer::save_checkpoint(const std::string& path) const { write_checkpoint(path, to_checkpoint()); }

void Trainer::load_checkpoint(const std::string& path) { restore(read_checkpoint(path)); }

void Trainer::restore(const Checkpoint& ck) {
  // Everything is checked before any state is touched.
  const RunConfig stored = parse_run_config(ck.config_json);
  if (!same_architecture(stored, cfg_))
    throw ConfigError("checkpoint architecture does not match the runtime config");
  if (ck.rng.global_seed != cfg_.train.global_seed)
    throw ConfigError("checkpoint global_seed " + std::to_string(ck.rng.global_seed) +
                      " does not match runtime seed " + std::to_string(cfg_.train.global_seed));
  if (ck.rng.data_counter != ck.step || ck.rng.mask_counter != ck.step)
    throw ConfigError("checkpoint RNG counters disagree with its step");
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  for (const auto& t : ck.optimizer) by_name[t.name] = &t;
  if (ck.tensors.size() != params_.size() || ck.optimizer.size() != 2 * params_.size())
    throw ConfigError("checkpoint tensor count does not match the model");
  std::vector<const StoredTensor*> w(params_.size()), m(params_.size()), v(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto shape = shape_vec(params_[i]);
    auto find = [&](const std::string& name) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + name + "'");
      if (it->second->shape != shape)
        throw ConfigError("checkpoint tensor '" + name + "' has shape " + shape_string(it->second->shape) +
                          ", model expects " + shape_string(shape));
      return it->second;
    };
    w[i] = find(names_[i]);
    m[i] = find("m." + names_[i]);
    v[i] = find("v." + names_[i]);
  }

  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto d = params_[i].data();
    std::copy(w[i]->data.begin(), w[i]->data.end(), d.begin());
    opt_.first_moments()[i] = m[i]->data;
    opt_.second_moments()[i] = v[i]->data;
  }
  next_step_ = static_cast<std::int64_t>(ck.step);
  opt_.set_steps_taken(next_step_);
}

std::unique_ptr<Model> model_from_checkpoint(const Checkpoint& ck, const RunConfig* runtime) {
  const RunConfig stored = parse_run_config(ck.config_json);
  if (runtime && !same_architecture(stored, *runtime))
    throw ConfigError("checkpoint architecture does not match the runtime config");
  auto model = std::make_unique<Model>(stored.model, stored.train.global_seed);
  std::map<std::string, const StoredTensor*> by_name;
  for (const auto& t : ck.tensors) by_name[t.name] = &t;
  auto params = model->named_parameters();
  if (params.size() != ck.tensors.size()) throw ConfigError("checkpoint tensor count does not match the model");
  for (auto& np : params) {
    auto it = by_name.find(np.name);
    if (it == by_name.end()) throw ConfigError("checkpoint is missing tensor '" + np.name + "'");
    if (it->second->shape != shape_vec(np.tensor))
      throw ConfigError("checkpoint tensor '" + np.name + "' has shape " + shape_string(it->second->shape) +
                        ", model expects " + shape_string(np.tensor.shape()));
  }
  for (auto& np : params) {
    const auto& src = by_name.at(np.name)->data;
    std::copy(src.begin(), src.end(), np.tensor.data().begin());
  }
  return model;
}

std::string checkpoint_path_for(const std::string& out_dir, std::int64_t step) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "step_%06lld.rxmo", static_cast<long long>(step));
  return (std::filesystem::path(out_dir) / "checkpoints" / buf).string();
}

std::string final_checkpoint_path(const std::string& out_dir) {
  return (std::filesystem::path(out_dir) / "checkpoints" / "final.rxmo").string();
}

std::string metrics_row(const StepReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%lld,%.17g", static_cast<long long>(r.step), r.loss, r.lr,
                static_cast<long long>(r.pool_size), r.grad_norm);
  return buf;
}

void run_training(Trainer& trainer, const TrainRunOptions& opt) {
  const auto& tc = trainer.config().train;
  const auto until = opt.until_step < 0 ? tc.total_steps : opt.until_step;
  std::filesystem::create_directories(opt.out_dir);
  const bool fresh = trainer.next_step() == 0;
  const auto mode = fresh ? std::ios::trunc : std::ios::app;
  const auto dir = std::filesystem::path(opt.out_dir);
  std::ofstream metrics(dir / "metrics.csv", std::ios::out | mode);
  if (!metrics) throw IoError("cannot open " + (dir / "metrics.csv").string());
  if (fresh) metrics << "step,loss,lr,pool_size,grad_norm\n";
  std::ofstream trace;
  if (tc.trace_every > 0) {
    trace.open(dir / "trace.jsonl", std::ios::out | mode);
    if (!trace) throw IoError("cannot open " + (dir / "trace.jsonl").string());
  }

  while (trainer.next_step() < until) {
    const StepReport r = trainer.step();
    metrics << metrics_row(r) << '\n';
    if (tc.trace_every > 0 && r.step % tc.trace_every == 0)
      for (const auto& rec : r.trace.records) write_trace_record(trace, rec);
    if (opt.on_step) opt.on_step(r);
    const auto done = trainer.next_step();
    if (tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0) {
      metrics.flush();
      trainer.save_checkpoint(checkpoint_path_for(opt.out_dir, done));
    }
  }
  metrics.flush();
  if (!metrics) throw IoError("write failed for " + (dir / "metrics.csv").string());
  if (trace.is_open()) {
    trace.flush();
    if (!trace) throw IoError("write failed for " + (dir / "trace.jsonl").string());
  }
  trainer.save_checkpoint(final_checkpoint_path(opt.out_dir));
}

}  // namespace rexmoe
