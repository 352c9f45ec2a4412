#include "merit/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <spdlog/spdlog.h>

#include "merit/errors.hpp"

namespace merit {

RunStreams RunStreams::from_seed(std::uint64_t seed) {
  return {mix64(seed ^ 0x1001), mix64(seed ^ 0x2002), mix64(seed ^ 0x3003),
          mix64(seed ^ 0x4004)};
}

template <typename T>
LossAndGrads<T> accumulate_gradients(const Model<T> &model,
                                     std::span<const Batch> micro_batches) {
  if (micro_batches.empty()) {
    throw DomainError("accumulate_gradients: no micro-batches");
  }
  const T weight = T(1) / static_cast<T>(micro_batches.size());
  LossAndGrads<T> total;
  total.grads = model.params.zeros_like();
  for (const Batch &b : micro_batches) {
    LossAndGrads<T> lg = loss_and_grads(model, b.tokens, b.targets);
    total.loss += lg.loss / static_cast<double>(micro_batches.size());
    for (std::size_t p = 0; p < total.grads.size(); ++p) {
      axpy(weight, lg.grads[p], total.grads[p]);
    }
    if (total.probes.empty()) {
      total.probes = lg.probes;
      for (auto &pr : total.probes) {
        pr.attention_entropy /= static_cast<double>(micro_batches.size());
      }
      continue;
    }
    for (std::size_t l = 0; l < lg.probes.size(); ++l) {
      total.probes[l].max_logit =
          std::max(total.probes[l].max_logit, lg.probes[l].max_logit);
      total.probes[l].attention_entropy +=
          lg.probes[l].attention_entropy /
          static_cast<double>(micro_batches.size());
    }
  }
  return total;
}

template <typename T>
double evaluate_split(const Model<T> &model,
                      std::span<const std::int32_t> split,
                      std::uint64_t stream, std::size_t batches,
                      std::size_t batch_size) {
  double sum = 0;
  for (std::size_t i = 0; i < batches; ++i) {
    const Batch b = next_batch(split, stream, i, batch_size,
                               model.config.context_len);
    sum += loss(model, b.tokens, b.targets);
  }
  return sum / static_cast<double>(batches);
}

// ---- Trainer ------------------------------------------------------------------

namespace {

template <typename T>
Model<T> initial_model(const TrainConfig &cfg, const RunStreams &streams) {
  SeededRng rng(streams.init);
  return init_model<T>(cfg.model, rng);
}

void check_corpus(const TrainConfig &cfg, const Corpus &corpus) {
  const std::size_t need = cfg.model.context_len + 1;
  if (corpus.train.size() < need) {
    throw ConfigError("training split has " +
                      std::to_string(corpus.train.size()) +
                      " tokens, need at least " + std::to_string(need));
  }
  if (corpus.val.size() < need) {
    throw ConfigError("validation split has " +
                      std::to_string(corpus.val.size()) +
                      " tokens, need at least " + std::to_string(need));
  }
}

} // namespace

template <typename T>
Trainer<T>::Trainer(TrainConfig cfg, const Corpus &corpus)
    : cfg_(std::move(cfg)), corpus_(corpus),
      streams_(RunStreams::from_seed(cfg_.seed)),
      model_(initial_model<T>(cfg_, streams_)),
      optimizer_(cfg_.optimizer, cfg_.hp, cfg_.merit, cfg_.vector_policy) {
  cfg_.validate();
  check_corpus(cfg_, corpus_);
}

template <typename T>
std::vector<Batch> Trainer<T>::batches_for_step(std::int64_t step) const {
  std::vector<Batch> out;
  const std::uint64_t base =
      static_cast<std::uint64_t>(step - 1) * cfg_.grad_accum_steps;
  for (std::size_t k = 0; k < cfg_.grad_accum_steps; ++k) {
    out.push_back(next_batch(corpus_.train, streams_.train, base + k,
                             cfg_.batch_size_sequences,
                             cfg_.model.context_len));
  }
  return out;
}

template <typename T> StepOutcome Trainer<T>::step() {
  if (finished()) {
    throw DomainError("Trainer::step: all " +
                      std::to_string(cfg_.sched.total_steps) +
                      " steps are done");
  }
  StepOutcome out;
  out.step = steps_done_ + 1;
  out.lr = cosine_lr(out.step, cfg_.sched, cfg_.hp.peak_lr);

  const std::vector<Batch> micro = batches_for_step(out.step);
  LossAndGrads<T> lg = accumulate_gradients(model_, std::span<const Batch>(micro));
  out.loss = lg.loss;
  out.probes = lg.probes;
  out.grad_norm = cfg_.hp.global_grad_clip > 0
                      ? global_grad_clip(lg.grads, cfg_.hp.global_grad_clip)
                      : global_grad_clip(lg.grads, HUGE_VAL);
  if (!std::isfinite(out.loss) || !std::isfinite(out.grad_norm)) {
    out.diverged = true;
    return out;
  }
  const StepReport report = optimizer_.step(model_.params, lg.grads, out.lr);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < model_.params.size(); ++i) {
    names.push_back(model_.params.name(i));
  }
  out.triggers =
      diagnostics::summarize_triggers(report, names, cfg_.model.n_layer);
  ++steps_done_;
  return out;
}

template <typename T> double Trainer<T>::evaluate() const {
  return evaluate_split(model_, corpus_.val, streams_.val, cfg_.eval_batches,
                        cfg_.batch_size_sequences);
}

template <typename T>
std::vector<AttentionProbe> Trainer<T>::probe() const {
  const Batch b = next_batch(corpus_.train, streams_.probe, 0,
                             cfg_.batch_size_sequences, cfg_.model.context_len);
  return forward(model_, b.tokens).probes;
}

template <typename T> Checkpoint<T> Trainer<T>::checkpoint() const {
  Checkpoint<T> c;
  c.config = cfg_.model;
  c.step = steps_done_;
  c.optimizer = cfg_.optimizer;
  c.params = model_.params;
  c.state = optimizer_.state();
  return c;
}

// ---- train --------------------------------------------------------------------

namespace {

MetricsRecord make_record(const TrainConfig &cfg, const StepOutcome &o) {
  MetricsRecord r;
  r.step = o.step;
  r.lr = o.lr;
  r.train_loss = o.loss;
  r.global_grad_norm = o.grad_norm;
  r.tokens_per_step = cfg.tokens_per_step();
  double entropy = 0;
  for (const auto &p : o.probes) {
    r.per_layer_max_logit.push_back(p.max_logit);
    r.per_layer_attention_entropy.push_back(p.attention_entropy);
    entropy += p.attention_entropy;
  }
  if (!o.probes.empty()) {
    r.mean_attention_entropy = entropy / static_cast<double>(o.probes.size());
  }
  r.clip_fraction = o.triggers.clip_fraction;
  r.bound_fraction = o.triggers.bound_fraction;
  for (const auto &l : o.triggers.per_layer) {
    r.per_layer_clip_fraction.push_back(l.clip_fraction);
    r.per_layer_bound_fraction.push_back(l.bound_fraction);
  }
  return r;
}

template <typename T> TrainResult train_impl(const TrainConfig &cfg) {
  cfg.validate();
  const Corpus corpus = make_corpus(cfg.data, cfg.seed);
  Trainer<T> trainer(cfg, corpus);

  const std::filesystem::path dir = cfg.out_dir;
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError("cannot create output directory '" + dir.string() +
                  "': " + ec.message());
  }
  TrainResult result;
  result.metrics_path = dir / "metrics.jsonl";
  result.checkpoint_path = dir / "final.ckpt";
  MetricsWriter writer(result.metrics_path);

  const auto start = std::chrono::steady_clock::now();
  const std::int64_t total = cfg.sched.total_steps;
  spdlog::info("training {} ({}) for {} steps, {} tokens/step",
               cfg.run_id.empty() ? std::string(to_string(cfg.optimizer))
                                  : cfg.run_id,
               to_string(cfg.precision), total, cfg.tokens_per_step());
  while (!trainer.finished()) {
    const StepOutcome o = trainer.step();
    if (!result.first_train_loss && std::isfinite(o.loss)) {
      result.first_train_loss = o.loss;
    }
    if (o.diverged) {
      MetricsRecord r;
      r.step = o.step;
      r.lr = o.lr;
      r.global_grad_norm = o.grad_norm;
      r.tokens_per_step = cfg.tokens_per_step();
      r.diverged = true;
      writer.append(r);
      result.diverged = true;
      spdlog::warn("step {}: non-finite loss or gradient, stopping", o.step);
      break;
    }
    result.final_train_loss = o.loss;
    const bool eval = o.step % cfg.eval_interval == 0 || o.step == total;
    const bool log = eval || o.step % cfg.log_interval == 0;
    if (!log) {
      continue;
    }
    MetricsRecord r = make_record(cfg, o);
    if (eval) {
      r.val_loss = trainer.evaluate();
      result.final_val_loss = r.val_loss;
    }
    if (cfg.log_wall_time) {
      r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - start)
                      .count();
    }
    writer.append(r);
    spdlog::info("step {:>6} lr {:.3e} loss {:.4f}{} mal {:.3f}", o.step,
                 o.lr, o.loss,
                 r.val_loss ? fmt::format(" val {:.4f}", *r.val_loss) : "",
                 r.peak_max_logit());
  }
  result.steps_run = trainer.steps_done();
  save_checkpoint(trainer.checkpoint(), result.checkpoint_path);
  return result;
}

} // namespace

TrainResult train(const TrainConfig &cfg) {
  return cfg.precision == Precision::f32 ? train_impl<float>(cfg)
                                         : train_impl<double>(cfg);
}

double evaluate(const Checkpoint<double> &ckpt, const TrainConfig &cfg,
                Split split) {
  if (!(ckpt.config == cfg.model)) {
    throw ConfigError("checkpoint model shape differs from the config");
  }
  const Corpus corpus = make_corpus(cfg.data, cfg.seed);
  check_corpus(cfg, corpus);
  const RunStreams streams = RunStreams::from_seed(cfg.seed);
  const Model<double> model = ckpt.model();
  return split == Split::val
             ? evaluate_split(model, corpus.val, streams.val, cfg.eval_batches,
                              cfg.batch_size_sequences)
             : evaluate_split(model, corpus.train, streams.train,
                              cfg.eval_batches, cfg.batch_size_sequences);
}

// ---- compare ------------------------------------------------------------------

void check_comparable(const TrainConfig &a, const TrainConfig &b) {
  auto fail = [](const char *what) {
    throw ConfigError(std::string("compared runs must share ") + what);
  };
  if (!(a.model == b.model)) {
    fail("the model config");
  }
  if (!(a.data == b.data)) {
    fail("the data settings");
  }
  if (a.seed != b.seed) {
    fail("the seed");
  }
  if (a.batch_size_sequences != b.batch_size_sequences ||
      a.grad_accum_steps != b.grad_accum_steps) {
    fail("the batch layout");
  }
  if (a.sched.total_steps != b.sched.total_steps ||
      a.sched.warmup_ratio != b.sched.warmup_ratio ||
      a.sched.floor_fraction != b.sched.floor_fraction) {
    fail("the schedule");
  }
  if (a.eval_interval != b.eval_interval || a.eval_batches != b.eval_batches) {
    fail("the evaluation settings");
  }
  if (a.precision != b.precision) {
    fail("the precision");
  }
}

CompareResult compare(std::vector<TrainConfig> cfgs,
                      const std::filesystem::path &out_dir) {
  if (cfgs.empty()) {
    throw ConfigError("compare needs at least one config");
  }
  for (const auto &c : cfgs) {
    c.validate();
    check_comparable(cfgs.front(), c);
  }
  CompareResult result;
  std::set<std::string> used;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    std::string id = cfgs[i].run_id.empty()
                         ? std::string(to_string(cfgs[i].optimizer))
                         : cfgs[i].run_id;
    if (used.contains(id)) {
      id += "_" + std::to_string(i);
    }
    if (!used.insert(id).second) {
      throw ConfigError("duplicate run id '" + id + "'");
    }
    cfgs[i].run_id = id;
    cfgs[i].out_dir = (out_dir / id).string();
    result.run_ids.push_back(id);
  }

  std::map<std::int64_t, std::vector<std::pair<std::size_t, MetricsRecord>>>
      by_step;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    result.runs.push_back(train(cfgs[i]));
    for (auto &r : read_metrics(result.runs.back().metrics_path)) {
      if (r.val_loss || r.diverged) {
        by_step[r.step].emplace_back(i, std::move(r));
      }
    }
  }

  result.csv_path = out_dir / "compare.csv";
  std::ofstream out(result.csv_path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write '" + result.csv_path.string() + "'");
  }
  out << "step,run_id,val_loss,peak_mal,clip_fraction,bound_fraction\n";
  for (const auto &[step, rows] : by_step) {
    for (const auto &[i, r] : rows) {
      auto num = [](double x) {
        return std::isfinite(x) ? fmt::format("{}", x) : std::string("nan");
      };
      out << step << ',' << result.run_ids[i] << ','
          << (r.val_loss ? num(*r.val_loss) : "nan") << ','
          << num(r.peak_max_logit()) << ',' << num(r.clip_fraction) << ','
          << num(r.bound_fraction) << '\n';
    }
  }
  if (!out) {
    throw IoError("error while writing '" + result.csv_path.string() + "'");
  }
  return result;
}

// ---- learning-rate sweep ------------------------------------------------------

namespace {

template <typename T>
SweepRow sweep_one(TrainConfig cfg, const Corpus &corpus, double lr) {
  SweepRow row;
  row.lr = lr;
  row.seed = cfg.seed;
  cfg.hp.peak_lr = lr;
  Trainer<T> trainer(cfg, corpus);
  for (const auto &p : trainer.probe()) {
    row.initial_max_logit.push_back(p.max_logit);
  }
  row.peak_max_logit = row.initial_max_logit;
  while (!trainer.finished()) {
    const StepOutcome o = trainer.step();
    if (o.diverged) {
      row.diverged = true;
      row.final_loss = o.loss;
      return row;
    }
    row.final_loss = o.loss;
    const auto probes = trainer.probe();
    for (std::size_t l = 0; l < probes.size(); ++l) {
      if (!std::isfinite(probes[l].max_logit)) {
        row.diverged = true;
      }
      row.peak_max_logit[l] =
          std::max(row.peak_max_logit[l], probes[l].max_logit);
    }
    if (row.diverged) {
      return row;
    }
  }
  return row;
}

} // namespace

std::vector<SweepRow> lr_logit_sweep(const TrainConfig &cfg,
                                     std::vector<double> lrs,
                                     std::int64_t steps,
                                     OptimizerKind optimizer,
                                     std::vector<std::uint64_t> seeds) {
  if (lrs.empty()) {
    throw DomainError("lr_logit_sweep: empty learning-rate list");
  }
  if (steps < 1) {
    throw DomainError("lr_logit_sweep: steps must be at least 1");
  }
  for (double lr : lrs) {
    if (!(lr >= 0) || !std::isfinite(lr)) {
      throw DomainError("lr_logit_sweep: learning rates must be finite and "
                        "non-negative");
    }
  }
  if (seeds.empty()) {
    seeds.push_back(cfg.seed);
  }
  std::stable_sort(lrs.begin(), lrs.end());
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    TrainConfig run = cfg;
    run.seed = seed;
    run.optimizer = optimizer;
    run.sched.total_steps = steps;
    run.validate();
    const Corpus corpus = make_corpus(run.data, run.seed);
    for (double lr : lrs) {
      rows.push_back(run.precision == Precision::f32
                         ? sweep_one<float>(run, corpus, lr)
                         : sweep_one<double>(run, corpus, lr));
      spdlog::info("lr {:.3e} seed {}: peak mal {:.3f}{}", lr, seed,
                   *std::max_element(rows.back().peak_max_logit.begin(),
                                     rows.back().peak_max_logit.end()),
                   rows.back().diverged ? " (diverged)" : "");
    }
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const SweepRow &a, const SweepRow &b) {
                     return a.lr < b.lr;
                   });
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow> &rows,
                     const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw IoError("cannot write '" + path.string() + "'");
  }
  out << "lr,seed,layer,initial_mal,peak_mal,final_loss,diverged\n";
  for (const auto &r : rows) {
    for (std::size_t l = 0; l < r.peak_max_logit.size(); ++l) {
      out << fmt::format("{},{},{},{},{},{},{}\n", r.lr, r.seed, l,
                         r.initial_max_logit[l], r.peak_max_logit[l],
                         r.final_loss, r.diverged ? 1 : 0);
    }
  }
  if (!out) {
    throw IoError("error while writing '" + path.string() + "'");
  }
}

// ---- gradient check -----------------------------------------------------------

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

GradCheckResult gradient_check(const TrainConfig &cfg, std::size_t coords,
                               double eps, bool corrupt) {
  if (coords == 0) {
    throw DomainError("gradient_check: need at least one coordinate");
  }
  cfg.validate();
  const Corpus corpus = make_corpus(cfg.data, cfg.seed);
  check_corpus(cfg, corpus);
  const RunStreams streams = RunStreams::from_seed(cfg.seed);
  SeededRng init(streams.init);
  Model<double> model = init_model<double>(cfg.model, init);
  const Batch b = next_batch(corpus.train, streams.train, 0,
                             cfg.batch_size_sequences, cfg.model.context_len);
  const LossAndGrads<double> lg = loss_and_grads(model, b.tokens, b.targets);

  SeededRng pick(streams.probe);
  GradCheckResult res;
  for (std::size_t k = 0; k < coords; ++k) {
    const std::size_t p = k % model.params.size();
    const Coordinate c{p, pick.below(model.params[p].numel())};
    double analytic = lg.grads[p][c.offset];
    if (corrupt) {
      analytic = analytic * 1.5 + 1e-3;
    }
    const double numeric =
        finite_diff_grad(model, b.tokens, b.targets, c, eps);
    const double err = relative_error(analytic, numeric);
    ++res.coords;
    if (res.coords == 1 || err > res.max_rel_error) {
      res.max_rel_error = err;
      res.worst_param = model.params.name(p);
      res.worst_offset = c.offset;
    }
  }
  return res;
}

#define MERIT_INSTANTIATE_HARNESS(T)                                           \
  template LossAndGrads<T> accumulate_gradients<T>(const Model<T> &,           \
                                                   std::span<const Batch>);    \
  template double evaluate_split<T>(const Model<T> &,                          \
                                    std::span<const std::int32_t>,             \
                                    std::uint64_t, std::size_t, std::size_t);  \
  template class Trainer<T>;

MERIT_INSTANTIATE_HARNESS(float)
MERIT_INSTANTIATE_HARNESS(double)

#undef MERIT_INSTANTIATE_HARNESS

} // namespace merit
