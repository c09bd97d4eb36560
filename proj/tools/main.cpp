// Command-line surface: simulate / fit / predict / select-rank / diagnose /
// report.  Exit codes: 0 success, 1 usage, 2 data validation, 3 numerical.

#include "tvc/io.hpp"
#include "tvc/metrics.hpp"
#include "tvc/predict.hpp"
#include "tvc/select.hpp"
#include "tvc/simgen.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

using namespace tvc;
using nlohmann::json;

namespace {

Shape parse_index_list(const std::string& s) {
  Shape out;
  std::size_t pos = 0;
  while (pos < s.size()) {
    std::size_t next = s.find(',', pos);
    if (next == std::string::npos) next = s.size();
    out.push_back(std::stoll(s.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (out.empty()) throw std::invalid_argument("empty index list: '" + s + "'");
  return out;
}

int cmd_simulate(const std::string& scenario, const std::string& strategy,
                 const std::string& construction, const std::string& shape_str, Index n_train,
                 Index n_test, double sigma, Index gen_rank, Index patch, std::uint64_t seed,
                 const std::string& out) {
  SimDesign d;
  d.scenario = scenario_from_string(scenario);
  if (strategy.size() != 1) throw std::invalid_argument("strategy must be one of a, b, c, d");
  d.strategy = strategy[0];
  if (construction == "i") d.construction = 1;
  else if (construction == "ii") d.construction = 2;
  else throw std::invalid_argument("construction must be i or ii");
  d.shape = parse_index_list(shape_str);
  d.n_train = n_train;
  d.n_test = n_test;
  d.noise_sd = sigma;
  d.gen_rank = gen_rank;
  d.patch = patch;
  d.seed = seed;

  SimDataset sim = generate(d);

  DatasetBundle bundle;
  bundle.data = std::move(sim.data);
  bundle.intercept_true = std::move(sim.intercept_true);
  bundle.slope_true = std::move(sim.slope_true);
  bundle.effect_true = std::move(sim.effect_true);
  bundle.generation = {
      {"scenario", scenario},
      {"strategy", strategy},
      {"construction", construction},
      {"seed", seed},
      {"noise_sd", sigma},
      {"gen_rank", gen_rank},
      {"patch", patch},
      {"intercept_margin_sd", d.intercept_margin_sd},
      {"slope_margin_sd", d.slope_margin_sd},
      {"pyramid_value", d.pyramid_value},
      {"map_gp_var", d.map_gp_var},
      {"lengthscale_factor", d.lengthscale_factor},
      {"map_phi2", sim.map_phi2},
  };
  save_dataset(out, bundle);
  std::cout << "wrote dataset: " << out << " (" << bundle.data.n_subjects()
            << " subjects, map phi2 " << sim.map_phi2 << ")\n";
  return 0;
}

int cmd_fit(const std::string& data_dir, const std::string& out, const std::string& config_path,
            const std::string& resume_path, std::uint64_t seed, Index iters, double burnin,
            Index rank, Index patch, double tau_mask, int threads, Index thin,
            const std::string& ckpt_path, Index ckpt_every) {
  DatasetBundle bundle = load_dataset(data_dir);

  RunOptions opts;
  opts.checkpoint_path = ckpt_path;
  opts.checkpoint_every = ckpt_every;

  Chain chain;
  if (!resume_path.empty()) {
    SamplerCheckpoint ckpt = load_checkpoint(resume_path);
    chain = resume_chain(ckpt, bundle.data, opts);
  } else {
    ModelConfig cfg = config_path.empty() ? ModelConfig{} : load_config(config_path);
    if (iters > 0) cfg.iterations = iters;
    if (burnin > 0) cfg.burnin_fraction = burnin;
    if (rank > 0) cfg.rank = rank;
    if (patch > 0) cfg.patch_size = patch;
    if (tau_mask > 0) cfg.mask_threshold = tau_mask;
    if (threads >= 0) cfg.threads = threads;
    if (thin > 0) cfg.thinning = thin;
    cfg.covariate_count = bundle.data.n_covariates();
    chain = run_chain(cfg, bundle.data, seed, opts);
  }
  save_chain(out, chain);

  double mean_iter = 0;
  for (double s : chain.iter_seconds) mean_iter += s;
  mean_iter /= static_cast<double>(std::max<std::size_t>(chain.iter_seconds.size(), 1));
  std::cout << "wrote chain: " << out << "\n"
            << "  retained states: " << chain.n_retained() << "\n"
            << "  lengthscale acceptance: " << chain.phi2_accept.rate() << "\n"
            << "  mean seconds/iteration: " << mean_iter << "\n";
  return 0;
}

int cmd_predict(const std::string& chain_path, const std::string& data_dir, const std::string& out,
                int threads, double level) {
  const Chain chain = load_chain(chain_path);
  DatasetBundle bundle = load_dataset(data_dir);
  const Dataset& ds = bundle.data;
  if (ds.n_test() == 0) throw DataError("predict: dataset has no test subjects");

  PredictOptions popts;
  popts.threads = threads;
  popts.interval_level = level;
  const PredictionResult pred = kriging_predict(chain, ds, popts);
  save_prediction(out, pred, ds.test_idx, ds.shape);

  std::vector<DenseTensorD> truth;
  for (Index idx : ds.test_idx) truth.push_back(ds.y[static_cast<std::size_t>(idx)]);
  const double rpe_val = rpe(truth, pred.mean);
  const PearsonResult corr_voxel = pearson(truth, pred.mean, PearsonMode::PerVoxelAverage);
  const PearsonResult corr_pooled = pearson(truth, pred.mean, PearsonMode::Pooled);

  json metrics;
  metrics["rpe"] = rpe_val;
  metrics["pearson_per_voxel_avg"] = corr_voxel.value;
  metrics["pearson_pooled"] = corr_pooled.value;
  metrics["skipped_voxels"] = corr_voxel.skipped_voxels;
  metrics["kriging_fallbacks"] = pred.kriging_fallbacks;
  if (!bundle.generation.is_null()) metrics["generation"] = bundle.generation;
  if (!bundle.effect_true.empty() && !chain.states.empty() &&
      chain.states.front().state.atoms.size() > 0)
    metrics["effect_rpe_per_voxel_avg"] = effect_estimation_rpe(chain, ds, bundle.effect_true);

  // per-voxel table
  {
    std::vector<std::vector<double>> rows;
    std::vector<double> a(static_cast<std::size_t>(ds.n_test())), b(a.size());
    for (Index v = 0; v < ds.n_voxels(); ++v) {
      double num = 0, den = 0;
      for (Index j = 0; j < ds.n_test(); ++j) {
        const double t = truth[static_cast<std::size_t>(j)][v];
        const double p = pred.mean[static_cast<std::size_t>(j)][v];
        num += (t - p) * (t - p);
        den += t * t;
        a[static_cast<std::size_t>(j)] = t;
        b[static_cast<std::size_t>(j)] = p;
      }
      double corr = std::numeric_limits<double>::quiet_NaN();
      try {
        corr = pearson_pair(a, b);
      } catch (const std::invalid_argument&) {
      }
      rows.push_back({static_cast<double>(v), den > 0 ? std::sqrt(num / den) : 0.0, corr});
    }
    write_csv(out + "/metrics_per_voxel.csv", {"voxel", "rpe", "pearson"}, rows);
  }

  std::ofstream mf(out + "/metrics.json");
  mf << metrics.dump(2) << "\n";
  std::cout << "prediction RPE " << rpe_val << ", per-voxel correlation " << corr_voxel.value
            << " -> " << out << "\n";
  return 0;
}

int cmd_select_rank(const std::string& data_dir, const std::string& ranks_str,
                    const std::string& out, std::uint64_t seed, Index iters, Index patch,
                    double tau_mask, int threads, Index thin) {
  DatasetBundle bundle = load_dataset(data_dir);
  ModelConfig cfg;
  if (iters > 0) cfg.iterations = iters;
  if (patch > 0) cfg.patch_size = patch;
  if (tau_mask > 0) cfg.mask_threshold = tau_mask;
  if (threads >= 0) cfg.threads = threads;
  if (thin > 0) cfg.thinning = thin;
  cfg.covariate_count = bundle.data.n_covariates();

  const Shape raw = parse_index_list(ranks_str);
  const RankSweepResult res = rank_sweep(cfg, bundle.data, raw, seed);

  std::vector<std::vector<double>> rows;
  for (const auto& r : res.rows)
    rows.push_back({static_cast<double>(r.rank), r.d_bar, r.p_d, r.dic, r.seconds});
  write_csv(out, {"rank", "d_bar", "p_d", "dic", "seconds"}, rows);
  std::cout << "selected rank: " << res.selected_rank << " (report: " << out << ")\n";
  return 0;
}

int cmd_diagnose(const std::string& chain_path, const std::string& out) {
  const Chain chain = load_chain(chain_path);
  std::filesystem::create_directories(out);

  const Index n_voxels = static_cast<Index>(chain.trace_voxels.size());
  if (n_voxels == 0 || chain.traces.rows() < 20)
    throw DataError("diagnose: chain has no usable traces");

  std::vector<std::vector<double>> rows;
  std::vector<double> zs;
  Index degenerate = 0;
  for (Index c = 0; c < n_voxels; ++c) {
    std::vector<double> trace(static_cast<std::size_t>(chain.traces.rows()));
    for (Index i = 0; i < chain.traces.rows(); ++i)
      trace[static_cast<std::size_t>(i)] = chain.traces(i, c);
    const GewekeResult g = geweke_z(trace);
    if (g.degenerate) ++degenerate;
    zs.push_back(g.z);
    rows.push_back({static_cast<double>(chain.trace_voxels[static_cast<std::size_t>(c)]), g.z,
                    g.degenerate ? 1.0 : 0.0});
  }
  write_csv(out + "/geweke.csv", {"voxel", "z", "degenerate"}, rows);

  double mean = 0;
  for (double z : zs) mean += z;
  mean /= static_cast<double>(zs.size());
  double sd = 0;
  for (double z : zs) sd += (z - mean) * (z - mean);
  sd = std::sqrt(sd / std::max(1.0, static_cast<double>(zs.size()) - 1.0));
  std::vector<double> abs_z;
  abs_z.reserve(zs.size());
  for (double z : zs) abs_z.push_back(std::abs(z));
  std::nth_element(abs_z.begin(), abs_z.begin() + static_cast<std::ptrdiff_t>(abs_z.size() / 2),
                   abs_z.end());
  const double median_abs = abs_z[abs_z.size() / 2];
  write_csv(out + "/geweke_summary.csv",
            {"mean_z", "sd_z", "median_abs_z", "n_voxels", "degenerate"},
            {{mean, sd, median_abs, static_cast<double>(zs.size()), static_cast<double>(degenerate)}});

  // trace files for a few voxels
  const Index keep = std::min<Index>(n_voxels, 8);
  std::vector<std::string> header{"iteration"};
  for (Index c = 0; c < keep; ++c)
    header.push_back("voxel_" + std::to_string(chain.trace_voxels[static_cast<std::size_t>(c)]));
  std::vector<std::vector<double>> trows;
  for (Index i = 0; i < chain.traces.rows(); ++i) {
    std::vector<double> row{static_cast<double>(i)};
    for (Index c = 0; c < keep; ++c) row.push_back(chain.traces(i, c));
    trows.push_back(std::move(row));
  }
  write_csv(out + "/traces.csv", header, trows);

  std::cout << "median |geweke z| = " << median_abs << " over " << zs.size() << " voxels -> "
            << out << "\n";
  return 0;
}

int cmd_report(const std::vector<std::string>& inputs, const std::string& out) {
  struct Group {
    std::vector<double> rpe, corr;
  };
  std::map<std::string, Group> groups;
  for (const auto& path : inputs) {
    std::ifstream f(path);
    if (!f) throw DataError("missing metrics file: " + path);
    const json m = json::parse(f);
    std::string label = "?";
    if (m.contains("generation")) {
      const auto& g = m.at("generation");
      label = g.value("scenario", "?") + "." + g.value("strategy", "?") + "." +
              g.value("construction", "?");
    }
    groups[label].rpe.push_back(m.at("rpe").get<double>());
    groups[label].corr.push_back(m.at("pearson_per_voxel_avg").get<double>());
  }

  std::ofstream f(out);
  if (!f) throw DataError("cannot write report: " + out);
  auto mean_sd = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    s = v.size() > 1 ? std::sqrt(s / static_cast<double>(v.size() - 1)) : 0.0;
    return std::make_pair(m, s);
  };
  f << "setting,n,rpe_mean,rpe_sd,corr_mean,corr_sd\n";
  for (const auto& [label, g] : groups) {
    const auto [rm, rs] = mean_sd(g.rpe);
    const auto [cm, cs] = mean_sd(g.corr);
    f << label << "," << g.rpe.size() << "," << rm << "," << rs << "," << cm << "," << cs << "\n";
  }
  std::cout << "wrote report: " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Bayesian tensor-on-tensor varying-coefficient regression"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "generate a synthetic benchmark dataset");
  std::string scenario = "1", strategy = "a", construction = "i", shape_str = "8,8,8";
  Index n_train = 100, n_test = 20, gen_rank = 2, sim_patch = 3;
  double sigma = 0.1;
  std::uint64_t sim_seed = 0;
  std::string sim_out;
  sim->add_option("--scenario", scenario, "outcome scenario: 1, 2, 3, 3alt or 4");
  sim->add_option("--strategy", strategy, "input strategy: a, b, c or d");
  sim->add_option("--construction", construction, "slope construction: i (CP) or ii (pyramid)");
  sim->add_option("--shape", shape_str, "tensor shape, comma separated");
  sim->add_option("--ntrain", n_train, "training subjects");
  sim->add_option("--ntest", n_test, "test subjects");
  sim->add_option("--sigma", sigma, "residual noise standard deviation");
  sim->add_option("--gen-rank", gen_rank, "generator CP rank");
  sim->add_option("--patch", sim_patch, "patch edge for patch-based scenarios");
  sim->add_option("--seed", sim_seed, "master seed");
  sim->add_option("--out", sim_out, "output dataset directory")->required();

  auto* fit = app.add_subcommand("fit", "run the posterior sampler");
  std::string fit_data, fit_out, fit_config, fit_resume, fit_ckpt;
  std::uint64_t fit_seed = 0;
  Index fit_iters = 0, fit_rank = 0, fit_patch = 0, fit_thin = 0, fit_ckpt_every = 0;
  double fit_burnin = 0, fit_tau = 0;
  int fit_threads = -1;
  fit->add_option("--data", fit_data, "dataset directory")->required();
  fit->add_option("--out", fit_out, "output chain file")->required();
  fit->add_option("--config", fit_config, "model config file (json)");
  fit->add_option("--seed", fit_seed, "master seed");
  fit->add_option("--iters", fit_iters, "MCMC iterations");
  fit->add_option("--burnin", fit_burnin, "burn-in fraction in (0,1)");
  fit->add_option("--rank", fit_rank, "CP rank");
  fit->add_option("--patch", fit_patch, "patch edge (odd)");
  fit->add_option("--tau-mask", fit_tau, "group-mask threshold in (0,1]");
  fit->add_option("--threads", fit_threads, "worker threads (0 = all cores)");
  fit->add_option("--thin", fit_thin, "retain every k-th post-burn-in state");
  fit->add_option("--checkpoint", fit_ckpt, "checkpoint file path");
  fit->add_option("--checkpoint-every", fit_ckpt_every, "checkpoint cadence in iterations");
  fit->add_option("--resume", fit_resume, "resume from a checkpoint file");

  auto* pre = app.add_subcommand("predict", "kriging prediction for the test split");
  std::string pre_chain, pre_data, pre_out;
  int pre_threads = 0;
  double pre_level = 0.95;
  pre->add_option("--chain", pre_chain, "chain file")->required();
  pre->add_option("--data", pre_data, "dataset directory")->required();
  pre->add_option("--out", pre_out, "output prediction directory")->required();
  pre->add_option("--threads", pre_threads, "worker threads (0 = all cores)");
  pre->add_option("--level", pre_level, "credible interval level");

  auto* sel = app.add_subcommand("select-rank", "DIC sweep over candidate CP ranks");
  std::string sel_data, sel_ranks = "1,2,3,4", sel_out = "rank_report.csv";
  std::uint64_t sel_seed = 0;
  Index sel_iters = 0, sel_patch = 0, sel_thin = 0;
  double sel_tau = 0;
  int sel_threads = -1;
  sel->add_option("--data", sel_data, "dataset directory")->required();
  sel->add_option("--ranks", sel_ranks, "candidate ranks, comma separated");
  sel->add_option("--out", sel_out, "report CSV path");
  sel->add_option("--seed", sel_seed, "shared master seed for every rank fit");
  sel->add_option("--iters", sel_iters, "MCMC iterations per fit");
  sel->add_option("--patch", sel_patch, "patch edge (odd)");
  sel->add_option("--tau-mask", sel_tau, "group-mask threshold");
  sel->add_option("--threads", sel_threads, "worker threads");
  sel->add_option("--thin", sel_thin, "thinning");

  auto* dia = app.add_subcommand("diagnose", "convergence diagnostics and trace export");
  std::string dia_chain, dia_out;
  dia->add_option("--chain", dia_chain, "chain file")->required();
  dia->add_option("--out", dia_out, "output directory")->required();

  auto* rep = app.add_subcommand("report", "aggregate prediction metrics into a summary table");
  std::vector<std::string> rep_inputs;
  std::string rep_out = "summary.csv";
  rep->add_option("--inputs", rep_inputs, "metrics.json files")->required();
  rep->add_option("--out", rep_out, "summary CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (sim->parsed())
      return cmd_simulate(scenario, strategy, construction, shape_str, n_train, n_test, sigma,
                          gen_rank, sim_patch, sim_seed, sim_out);
    if (fit->parsed())
      return cmd_fit(fit_data, fit_out, fit_config, fit_resume, fit_seed, fit_iters, fit_burnin,
                     fit_rank, fit_patch, fit_tau, fit_threads, fit_thin, fit_ckpt, fit_ckpt_every);
    if (pre->parsed()) return cmd_predict(pre_chain, pre_data, pre_out, pre_threads, pre_level);
    if (sel->parsed())
      return cmd_select_rank(sel_data, sel_ranks, sel_out, sel_seed, sel_iters, sel_patch, sel_tau,
                             sel_threads, sel_thin);
    if (dia->parsed()) return cmd_diagnose(dia_chain, dia_out);
    if (rep->parsed()) return cmd_report(rep_inputs, rep_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data validation: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "data validation: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
