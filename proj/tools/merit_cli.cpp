// merit: train, compare and inspect small transformers under MERIT and the
// baseline optimizers.
//
// Exit codes: 0 success, 1 usage/config/format/I/O error, 2 divergence.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "merit/diagnostics.hpp"
#include "merit/errors.hpp"
#include "merit/harness.hpp"

namespace fs = std::filesystem;
namespace dg = merit::diagnostics;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitDiverged = 2;

constexpr double kGradCheckTolerance = 1e-4;

void configure_logging() {
  const char *env = std::getenv("MERIT_LOG");
  const std::string level = env ? env : "info";
  spdlog::set_level(spdlog::level::from_str(level));
  spdlog::set_pattern("[%l] %v");
}

std::ofstream open_output(const fs::path &path) {
  if (path.has_parent_path()) {
    fs::create_directories(path.parent_path());
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) {
    throw merit::IoError("cannot write '" + path.string() + "'");
  }
  return out;
}

std::string fmt_opt(const std::optional<double> &x) {
  return x ? fmt::format("{:.6f}", *x) : std::string("n/a");
}

// ---- train / compare / evaluate ----------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int run_train(const TrainArgs &a) {
  merit::TrainConfig cfg = merit::load_config(a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
  }
  if (!a.out.empty()) {
    cfg.out_dir = a.out;
  }
  const merit::TrainResult res = merit::train(cfg);
  std::cout << "steps " << res.steps_run << "  train_loss "
            << fmt_opt(res.final_train_loss) << "  val_loss "
            << fmt_opt(res.final_val_loss) << "\n"
            << "metrics " << res.metrics_path.string() << "\n"
            << "checkpoint " << res.checkpoint_path.string() << "\n";
  if (res.diverged) {
    std::cout << "diverged\n";
    return kExitDiverged;
  }
  return kExitOk;
}

struct CompareArgs {
  std::vector<std::string> configs;
  std::string out;
};

int run_compare(const CompareArgs &a) {
  std::vector<merit::TrainConfig> cfgs;
  for (const auto &p : a.configs) {
    cfgs.push_back(merit::load_config(p));
  }
  const fs::path out = a.out.empty() ? fs::path(cfgs.front().out_dir) : fs::path(a.out);
  const merit::CompareResult res = merit::compare(cfgs, out);
  for (std::size_t i = 0; i < res.runs.size(); ++i) {
    std::cout << res.run_ids[i] << ": val_loss "
              << fmt_opt(res.runs[i].final_val_loss)
              << (res.runs[i].diverged ? "  (diverged)" : "") << "\n";
  }
  std::cout << "csv " << res.csv_path.string() << "\n";
  // A diverged arm is a result, not a failure of the comparison.
  return kExitOk;
}

struct EvaluateArgs {
  std::string ckpt;
  std::string config;
  std::string split = "val";
};

int run_evaluate(const EvaluateArgs &a) {
  const merit::TrainConfig cfg = merit::load_config(a.config);
  const auto ckpt = merit::load_checkpoint_f64(a.ckpt);
  const double loss = merit::evaluate(
      ckpt, cfg, a.split == "train" ? merit::Split::train : merit::Split::val);
  std::cout << fmt::format("{} loss {:.6f} nats\n", a.split, loss);
  return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------------

struct GradCheckArgs {
  std::string config;
  std::size_t coords = 100;
  double eps = 1e-4;
  bool corrupt = false;
};

merit::TrainConfig toy_config() {
  merit::TrainConfig cfg;
  cfg.model.n_layer = 2;
  cfg.model.n_head = 2;
  cfg.model.d_model = 32;
  cfg.model.context_len = 16;
  cfg.batch_size_sequences = 2;
  cfg.data.synthetic_length = 10000;
  return cfg;
}

int run_gradcheck(const GradCheckArgs &a) {
  const merit::TrainConfig cfg =
      a.config.empty() ? toy_config() : merit::load_config(a.config);
  const auto res = merit::gradient_check(cfg, a.coords, a.eps, a.corrupt);
  std::cout << fmt::format(
      "coords {}  max_rel_error {:.3e}  worst {}[{}]\n", res.coords,
      res.max_rel_error, res.worst_param, res.worst_offset);
  return res.max_rel_error <= kGradCheckTolerance ? kExitOk : kExitError;
}

// ---- diagnose ---------------------------------------------------------------------

struct DiagnoseArgs {
  std::string ckpt;
  std::string which;
  std::string config;
  std::string fixture;
  std::string out;
  std::size_t probes = 100;
  std::size_t iters = 500;
};

/// Data settings for diagnostics that need a batch: the given config, or
/// defaults around the checkpoint's model shape.
merit::TrainConfig data_config(const DiagnoseArgs &a,
                               const merit::ModelConfig &model) {
  merit::TrainConfig cfg =
      a.config.empty() ? merit::TrainConfig{} : merit::load_config(a.config);
  cfg.model = model;
  cfg.validate();
  return cfg;
}

merit::Batch diagnostic_batch(const merit::TrainConfig &cfg) {
  const merit::Corpus corpus = merit::make_corpus(cfg.data, cfg.seed);
  return merit::next_batch(corpus.val, merit::RunStreams::from_seed(cfg.seed).val,
                           0, cfg.batch_size_sequences, cfg.model.context_len);
}

void write_curvature(std::ostream &out, const dg::CurvatureReport &r) {
  out << "top_eigenvalue,trace_estimate,probes_used,power_iters,residual\n"
      << fmt::format("{},{},{},{},{}\n", r.top_eigenvalue, r.trace_estimate,
                     r.probes_used, r.power_iters, r.residual);
}

int run_diagnose(const DiagnoseArgs &a) {
  const fs::path out_path =
      a.out.empty() ? fs::path(a.which + ".csv") : fs::path(a.out);

  if (!a.fixture.empty()) {
    if (a.fixture == "quadratic") {
      if (a.which != "curvature") {
        throw merit::ConfigError("fixture 'quadratic' only supports "
                                 "--which curvature");
      }
      // f(w) = 0.5 sum_i (i+1) w_i^2: eigenvalues 1..10, trace 55.
      const dg::GradientFn grad = [](std::span<const double> w) {
        std::vector<double> g(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) {
          g[i] = static_cast<double>(i + 1) * w[i];
        }
        return g;
      };
      const std::vector<double> w(10, 1.0);
      const auto r = dg::top_eigenvalue(grad, w, {a.iters, 1e-10, a.probes, 0});
      auto out = open_output(out_path);
      write_curvature(out, r);
      std::cout << fmt::format("top_eigenvalue {:.6f}  trace {:.4f}\n",
                               r.top_eigenvalue, r.trace_estimate);
      return kExitOk;
    }
    if (a.fixture == "identical-rows") {
      if (a.which != "similarity") {
        throw merit::ConfigError("fixture 'identical-rows' only supports "
                                 "--which similarity");
      }
      const auto w = merit::Tensor<double>::matrix(
          4, 3, {1, -2, 3, 1, -2, 3, 1, -2, 3, 1, -2, 3});
      const auto s = dg::rowcol_similarity(w);
      auto out = open_output(out_path);
      out << "param,row_sim,col_sim\n"
          << fmt::format("identical-rows,{},{}\n", s.row_sim, s.col_sim);
      std::cout << fmt::format("row_sim {:.6f}  col_sim {:.6f}\n", s.row_sim,
                               s.col_sim);
      return kExitOk;
    }
    throw merit::ConfigError("unknown fixture '" + a.fixture + "'");
  }

  if (a.ckpt.empty()) {
    throw merit::ConfigError("--ckpt is required unless --fixture is given");
  }
  const auto ckpt = merit::load_checkpoint_f64(a.ckpt);
  const merit::Model<double> model = ckpt.model();
  auto out = open_output(out_path);

  if (a.which == "norm-gap") {
    out << "param,rows,cols,l2_norm,max_norm,norm_gap_ratio\n";
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto &w = model.params[i];
      if (w.rank() != 2 || merit::max_norm(w) == 0) {
        continue;
      }
      const double r = dg::norm_gap_ratio(w);
      out << fmt::format("{},{},{},{},{},{}\n", model.params.name(i), w.rows(),
                         w.cols(), merit::l2_norm(w), merit::max_norm(w), r);
      sum += r;
      ++n;
    }
    std::cout << fmt::format("{} matrices  mean norm_gap_ratio {:.6f}\n", n,
                             n ? sum / static_cast<double>(n) : 0.0);
  } else if (a.which == "similarity") {
    out << "param,row_sim,col_sim\n";
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto &w = model.params[i];
      if (w.rank() != 2) {
        continue;
      }
      try {
        const auto s = dg::rowcol_similarity(w);
        out << fmt::format("{},{},{}\n", model.params.name(i), s.row_sim,
                           s.col_sim);
      } catch (const merit::DomainError &e) {
        spdlog::warn("{}: {}", model.params.name(i), e.what());
      }
    }
    std::cout << "similarity written to " << out_path.string() << "\n";
  } else if (a.which == "curvature") {
    const auto cfg = data_config(a, model.config);
    const merit::Batch b = diagnostic_batch(cfg);
    const auto grad = dg::model_gradient_fn(model, b.tokens, b.targets);
    const auto flat = dg::flatten(model.params);
    const auto r =
        dg::top_eigenvalue(grad, flat, {a.iters, 1e-8, a.probes, cfg.seed});
    write_curvature(out, r);
    std::cout << fmt::format("top_eigenvalue {:.6f}  trace {:.4f}  residual "
                             "{:.3e}\n",
                             r.top_eigenvalue, r.trace_estimate, r.residual);
  } else if (a.which == "bound-check") {
    const auto cfg = data_config(a, model.config);
    const merit::Batch b = diagnostic_batch(cfg);
    out << "layer,max_q,max_k,input_abs_sum,bound,observed_max_logit,holds\n";
    bool all = true;
    for (const auto &c : dg::check_logit_bounds(model, b.tokens)) {
      out << fmt::format("{},{},{},{},{},{},{}\n", c.layer, c.max_q, c.max_k,
                         c.input_abs_sum, c.bound, c.observed_max_logit,
                         c.holds() ? 1 : 0);
      all = all && c.holds();
    }
    std::cout << (all ? "bound holds in every layer\n"
                      : "bound VIOLATED in some layer\n");
  }
  return kExitOk;
}

// ---- lr-sweep ---------------------------------------------------------------------

struct SweepArgs {
  std::string config;
  std::vector<double> lrs;
  std::int64_t steps = 50;
  std::string optimizer;
  std::vector<std::uint64_t> seeds;
  std::string out;
};

int run_sweep(const SweepArgs &a) {
  const merit::TrainConfig cfg = merit::load_config(a.config);
  const auto kind = a.optimizer.empty() ? cfg.optimizer
                                        : merit::parse_optimizer_kind(a.optimizer);
  const auto rows = merit::lr_logit_sweep(cfg, a.lrs, a.steps, kind, a.seeds);
  const fs::path out =
      a.out.empty() ? fs::path(cfg.out_dir) / "lr_sweep.csv" : fs::path(a.out);
  if (out.has_parent_path()) {
    fs::create_directories(out.parent_path());
  }
  merit::write_sweep_csv(rows, out);
  for (const auto &r : rows) {
    const double peak =
        *std::max_element(r.peak_max_logit.begin(), r.peak_max_logit.end());
    std::cout << fmt::format("lr {:<10.4g} seed {:<4} peak_mal {:.4f}{}\n", r.lr,
                             r.seed, peak, r.diverged ? "  diverged" : "");
  }
  std::cout << "csv " << out.string() << "\n";
  return kExitOk;
}

// ---- export-plots -----------------------------------------------------------------

struct ExportArgs {
  std::vector<std::string> metrics;
  std::string out;
};

int run_export(const ExportArgs &a) {
  std::vector<std::string> ids;
  std::vector<std::vector<merit::MetricsRecord>> runs;
  std::map<std::string, int> seen;
  for (const auto &p : a.metrics) {
    const fs::path path(p);
    std::string id = path.parent_path().filename().string();
    if (id.empty() || id == ".") {
      id = path.stem().string();
    }
    if (seen[id]++ > 0) {
      id += "_" + std::to_string(seen[id] - 1);
    }
    ids.push_back(id);
    runs.push_back(merit::read_metrics(path));
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  auto loss = open_output(dir / "loss.csv");
  auto mal = open_output(dir / "mal.csv");
  auto clip = open_output(dir / "clip_ratio.csv");
  auto bound = open_output(dir / "bound_ratio.csv");
  loss << "run_id,step,lr,train_loss,val_loss\n";
  mal << "run_id,step,layer,max_logit,attention_entropy\n";
  clip << "run_id,step,layer,clip_fraction\n";
  bound << "run_id,step,layer,bound_fraction\n";
  auto num = [](double x) {
    return std::isfinite(x) ? fmt::format("{}", x) : std::string("nan");
  };
  auto opt = [&](const std::optional<double> &x) {
    return x ? num(*x) : std::string();
  };
  for (std::size_t i = 0; i < runs.size(); ++i) {
    for (const auto &r : runs[i]) {
      loss << ids[i] << ',' << r.step << ',' << num(r.lr) << ','
           << opt(r.train_loss) << ',' << opt(r.val_loss) << '\n';
      for (std::size_t l = 0; l < r.per_layer_max_logit.size(); ++l) {
        mal << ids[i] << ',' << r.step << ',' << l << ','
            << num(r.per_layer_max_logit[l]) << ','
            << (l < r.per_layer_attention_entropy.size()
                    ? num(r.per_layer_attention_entropy[l])
                    : std::string())
            << '\n';
      }
      clip << ids[i] << ',' << r.step << ",all," << num(r.clip_fraction) << '\n';
      for (std::size_t l = 0; l < r.per_layer_clip_fraction.size(); ++l) {
        clip << ids[i] << ',' << r.step << ',' << l << ','
             << num(r.per_layer_clip_fraction[l]) << '\n';
      }
      bound << ids[i] << ',' << r.step << ",all," << num(r.bound_fraction)
            << '\n';
      for (std::size_t l = 0; l < r.per_layer_bound_fraction.size(); ++l) {
        bound << ids[i] << ',' << r.step << ',' << l << ','
              << num(r.per_layer_bound_fraction[l]) << '\n';
      }
    }
  }
  std::cout << "wrote loss.csv mal.csv clip_ratio.csv bound_ratio.csv to "
            << dir.string() << "\n";
  return kExitOk;
}

} // namespace

int main(int argc, char **argv) {
  configure_logging();
  CLI::App app{"Train and inspect small transformers with MERIT, LAMB, "
               "maxLAMB and AdamW"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto *train = app.add_subcommand("train", "Train one config");
  train->add_option("--config", train_args.config, "Config file")->required();
  train->add_option("--seed", train_args.seed, "Override the config seed");
  train->add_option("--out", train_args.out, "Override out_dir");

  CompareArgs compare_args;
  auto *compare = app.add_subcommand(
      "compare", "Train several configs on identical data and tabulate");
  compare->add_option("--configs", compare_args.configs, "Config files")
      ->required()
      ->expected(1, -1);
  compare->add_option("--out", compare_args.out,
                      "Output directory (default: first config's out_dir)");

  EvaluateArgs eval_args;
  auto *evaluate = app.add_subcommand("evaluate", "Loss of a checkpoint");
  evaluate->add_option("--ckpt", eval_args.ckpt, "Checkpoint")->required();
  evaluate->add_option("--config", eval_args.config, "Config naming the data")
      ->required();
  evaluate->add_option("--split", eval_args.split, "val or train")
      ->check(CLI::IsMember({"val", "train"}));

  GradCheckArgs gc_args;
  auto *gradcheck = app.add_subcommand(
      "gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--config", gc_args.config,
                        "Config (default: 2-layer toy model)");
  gradcheck->add_option("--coords", gc_args.coords, "Coordinates to check")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--eps", gc_args.eps, "Difference step")
      ->check(CLI::PositiveNumber);
  gradcheck->add_flag("--corrupt-grad", gc_args.corrupt)->group("");

  DiagnoseArgs diag_args;
  auto *diagnose = app.add_subcommand("diagnose", "Run a diagnostic");
  diagnose->add_option("--ckpt", diag_args.ckpt, "Checkpoint");
  diagnose
      ->add_option("--which", diag_args.which,
                   "norm-gap | similarity | curvature | bound-check")
      ->required()
      ->check(CLI::IsMember(
          {"norm-gap", "similarity", "curvature", "bound-check"}));
  diagnose->add_option("--config", diag_args.config,
                       "Config naming the data (curvature, bound-check)");
  diagnose->add_option("--fixture", diag_args.fixture,
                       "Built-in fixture instead of a checkpoint: quadratic "
                       "(curvature) or identical-rows (similarity)");
  diagnose->add_option("--probes", diag_args.probes, "Hutchinson probes")
      ->check(CLI::PositiveNumber);
  diagnose->add_option("--iters", diag_args.iters, "Power iterations")
      ->check(CLI::PositiveNumber);
  diagnose->add_option("--out", diag_args.out, "CSV path (default <which>.csv)");

  SweepArgs sweep_args;
  auto *sweep = app.add_subcommand(
      "lr-sweep", "Peak max attention logit per layer across learning rates");
  sweep->add_option("--config", sweep_args.config, "Config file")->required();
  sweep->add_option("--lrs", sweep_args.lrs, "Learning rates")
      ->required()
      ->delimiter(',');
  sweep->add_option("--steps", sweep_args.steps, "Steps per run")
      ->check(CLI::PositiveNumber);
  sweep->add_option("--optimizer", sweep_args.optimizer,
                    "Override the config optimizer");
  sweep->add_option("--seeds", sweep_args.seeds, "Seeds")->delimiter(',');
  sweep->add_option("--out", sweep_args.out,
                    "CSV path (default <out_dir>/lr_sweep.csv)");

  ExportArgs export_args;
  auto *exporter = app.add_subcommand(
      "export-plots", "Tidy CSVs from metrics files for plotting");
  exporter->add_option("--metrics", export_args.metrics, "metrics.jsonl files")
      ->required()
      ->expected(1, -1);
  exporter->add_option("--out", export_args.out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp &e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp &e) {
    return app.exit(e);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return kExitError;
  }

  try {
    if (train->parsed()) {
      return run_train(train_args);
    }
    if (compare->parsed()) {
      return run_compare(compare_args);
    }
    if (evaluate->parsed()) {
      return run_evaluate(eval_args);
    }
    if (gradcheck->parsed()) {
      return run_gradcheck(gc_args);
    }
    if (diagnose->parsed()) {
      return run_diagnose(diag_args);
    }
    if (sweep->parsed()) {
      return run_sweep(sweep_args);
    }
    if (exporter->parsed()) {
      return run_export(export_args);
    }
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitError;
  }
  return kExitError;
}
