#pragma once

#include <cstdlib>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "msenc/analysis.hpp"
#include "msenc/dataset.hpp"
#include "msenc/metrics.hpp"
#include "msenc/model.hpp"
#include "msenc/optim.hpp"
#include "msenc/pca.hpp"
#include "msenc/synth.hpp"
#include "msenc/train.hpp"

namespace msenc::cli {

namespace detail {

// Output directory built under a temporary sibling and renamed into place on
// commit; dropped if the command fails first.
class StagedDir {
 public:
  explicit StagedDir(fs::path target) : target_(normalize(std::move(target))), staged_(io::temp_sibling(target_)) {
    if (target_.has_parent_path()) fs::create_directories(target_.parent_path());
    fs::remove_all(staged_);
    fs::create_directories(staged_);
  }
  StagedDir(const StagedDir&) = delete;
  StagedDir& operator=(const StagedDir&) = delete;
  ~StagedDir() {
    if (committed_) return;
    std::error_code ec;
    fs::remove_all(staged_, ec);
  }

  const fs::path& path() const { return staged_; }
  void commit() {
    io::commit_directory(staged_, target_);
    committed_ = true;
  }

  static fs::path normalize(fs::path p) {
    p = p.lexically_normal();
    if (!p.has_filename() && p.has_parent_path()) p = p.parent_path();
    return p;
  }

 private:
  fs::path target_;
  fs::path staged_;
  bool committed_ = false;
};

// Registers options whose values land in a JSON object only when the flag was
// actually given, so they can be laid over a config file.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {}

  template <typename V>
  CLI::Option* add(const std::string& flag, const std::string& key, const std::string& help) {
    auto holder = std::make_shared<V>();
    CLI::Option* o = app_->add_option(flag, *holder, help);
    setters_.push_back([o, holder, key](json& j) {
      if (o->count() > 0) j[key] = *holder;
    });
    return o;
  }

  CLI::Option* add_switch(const std::string& flag, const std::string& key, const std::string& help) {
    CLI::Option* o = app_->add_flag(flag, help);
    setters_.push_back([o, key](json& j) {
      if (o->count() > 0) j[key] = true;
    });
    return o;
  }

  json overlay(json j) const {
    for (const auto& set : setters_) set(j);
    return j;
  }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> setters_;
};

struct Command {
  CLI::App* app = nullptr;
  std::unique_ptr<Flags> flags;
  std::string config_path;
  std::string out_dir;
};

inline json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j = io::read_json(path);
  require(j.is_object(), ErrorKind::Usage, "config file " + path + " must hold a JSON object");
  return j;
}

inline int resolve_threads(const json& cfg) {
  if (cfg.contains("threads")) return cfg.at("threads").get<int>();
  if (const char* env = std::getenv("MSENC_THREADS"); env && *env) {
    try {
      return std::stoi(env);
    } catch (const std::exception&) {
      fail(ErrorKind::Usage, std::string("MSENC_THREADS is not an integer: ") + env);
    }
  }
  return 1;
}

inline std::string required_string(const json& cfg, const char* key, const char* flag) {
  require(cfg.contains(key) && cfg.at(key).is_string() && !cfg.at(key).get<std::string>().empty(), ErrorKind::Usage,
          std::string(flag) + " is required");
  return cfg.at(key).get<std::string>();
}

inline fs::path resolve_pca_dir(const fs::path& p) {
  if (fs::exists(p / "params.json")) return p;
  if (fs::exists(p / "pca" / "params.json")) return p / "pca";
  fail(ErrorKind::MissingEmbedding, "no PCA embedding at " + p.string() + " (run fit-pca first)");
}

inline fs::path resolve_checkpoint_dir(const fs::path& p) {
  if (fs::exists(p / "params.json")) return p;
  if (fs::exists(p / "best" / "params.json")) return p / "best";
  fail(ErrorKind::MissingBlob, "no checkpoint at " + p.string());
}

inline void check_compatible(const ModelConfig& c, const Dataset& d) {
  require(c.layer_shapes == d.manifest.layer_shapes, ErrorKind::ShapeMismatch, "checkpoint layer shapes differ from the dataset");
  require(c.activity_dim == d.activity_dim(), ErrorKind::ShapeMismatch, "checkpoint activity dimension differs from the dataset");
  require(c.num_subjects == d.num_subjects(), ErrorKind::ShapeMismatch, "checkpoint subject count differs from the dataset");
}

inline std::vector<Index> select_samples(const Dataset& d, const std::string& which, std::uint64_t split_seed) {
  if (which == "all") {
    std::vector<Index> all(static_cast<std::size_t>(d.size()));
    for (Index i = 0; i < d.size(); ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }
  const SplitAssignment split = split_samples(d.manifest, {}, split_seed);
  if (which == "train") return split.indices(Split::Train);
  if (which == "val") return split.indices(Split::Val);
  if (which == "test") return split.indices(Split::Test);
  fail(ErrorKind::Usage, "--split must be train|val|test|all, got '" + which + "'");
}

inline double mean_layer_elements(const std::vector<LayerShape>& shapes) {
  double total = 0.0;
  for (const auto& s : shapes) total += double(s.size());
  return total / double(shapes.size());
}

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace detail

// --- synth ------------------------------------------------------------------

inline int cmd_synth(const json& cfg, const std::string& out_dir, std::ostream& out) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  SynthSpec spec = synth_spec_from_json(cfg);
  const bool reshape = cfg.contains("layers") || cfg.contains("height") || cfg.contains("width") || cfg.contains("channels");
  if (reshape) {
    const LayerShape first = spec.layer_shapes.front();
    const Index layers = cfg.value("layers", static_cast<Index>(spec.layer_shapes.size()));
    require(layers >= 1, ErrorKind::Usage, "--layers must be >= 1");
    spec.layer_shapes.assign(static_cast<std::size_t>(layers),
                             LayerShape{cfg.value("height", first.height), cfg.value("width", first.width),
                                        cfg.value("channels", first.channels)});
  }
  json echo = to_json(spec);
  echo["command"] = "synth";

  detail::StagedDir staged(out_dir);
  const SynthResult r = synthesize_dataset(spec, staged.path());
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "wrote " << r.dataset.size() << " samples, " << spec.subjects << " subjects, V=" << spec.activity_dim
      << " to " << out_dir << "\n";
  return 0;
}

// --- fit-pca ----------------------------------------------------------------

inline int cmd_fit_pca(const json& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  const std::string data = detail::required_string(cfg, "data", "--data");
  const Index k = cfg.value("dim", Index{2048});
  const auto split_seed = cfg.value("split_seed", std::uint64_t{0});
  const std::string method_name = cfg.value("method", std::string("auto"));
  const Index export_maps = cfg.value("export_maps", Index{0});
  PcaMethod method = PcaMethod::Auto;
  if (method_name == "svd") method = PcaMethod::Svd;
  else if (method_name == "gram") method = PcaMethod::Gram;
  else require(method_name == "auto", ErrorKind::Usage, "--method must be auto|svd|gram");
  require(export_maps >= 0, ErrorKind::Usage, "--export-maps must be >= 0");

  const Dataset d = load_dataset(data);
  const std::vector<Index> rows = detail::select_samples(d, "train", split_seed);
  const Matrix<double> activity = gather_targets<double>(d, rows);
  std::vector<std::string> warnings;
  const PcaEmbedding<double> e = fit_pca(activity, k, method, &warnings);
  for (const auto& w : warnings) err << "warning=" << detail::one_line(w) << "\n";

  json echo = {{"command", "fit-pca"},   {"data", data},         {"dim", k},
               {"split_seed", split_seed}, {"method", method_name}, {"export_maps", export_maps}};
  json meta = {{"fit", {{"dim", k}, {"split_seed", split_seed}, {"method", method_name}, {"train_rows", rows.size()}}},
               {"warnings", warnings}};

  detail::StagedDir staged(out_dir);
  save_pca(e, staged.path() / "pca", meta);
  if (export_maps > 0) {
    const Matrix<float> maps = export_pc_maps(e, export_maps).cast<float>();
    io::write_f32(staged.path() / "pc_maps.f32", {maps.data(), static_cast<std::size_t>(maps.size())});
    io::write_json(staged.path() / "pc_maps.json",
                   {{"file", "pc_maps.f32"}, {"shape", {maps.rows(), maps.cols()}}, {"dtype", "f32"}});
  }
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "pca rank " << e.rank << " of K=" << k << " from " << rows.size() << " train rows\n";
  return 0;
}

// --- train ------------------------------------------------------------------

inline int cmd_train(const json& cfg, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  const std::string data = detail::required_string(cfg, "data", "--data");
  const std::string preset = cfg.value("preset", std::string("phase1"));
  const auto split_seed = cfg.value("split_seed", std::uint64_t{0});
  const int threads = detail::resolve_threads(cfg);
  require(threads >= 1, ErrorKind::Usage, "--threads must be >= 1");

  const Dataset d = load_dataset(data);
  TrainConfig tc = presets::by_name(preset, detail::mean_layer_elements(d.manifest.layer_shapes));
  apply_json(tc, cfg);
  tc.validate();
  if (tc.loss_mask == LossMask::SubjectValid) err << "note=loss_mask=subject_valid\n";

  json echo = to_json(tc);
  echo["command"] = "train";
  echo["data"] = data;
  echo["preset"] = preset;
  echo["split_seed"] = split_seed;
  echo["threads"] = threads;

  HeadModel<double> model;
  if (cfg.contains("init")) {
    const std::string init = cfg.at("init").get<std::string>();
    model = load_checkpoint<double>(detail::resolve_checkpoint_dir(init));
    detail::check_compatible(model.config, d);
    echo["init"] = init;
  } else {
    const std::string pca = cfg.value("pca", (fs::path(data) / "pca").string());
    const PcaEmbedding<double> e = load_pca<double>(detail::resolve_pca_dir(pca));
    require(e.activity_dim() == d.activity_dim(), ErrorKind::ShapeMismatch, "PCA activity dimension differs from the dataset");
    ModelConfig mc;
    mc.layer_shapes = d.manifest.layer_shapes;
    mc.latent_dim = cfg.value("latent_dim", Index{1024});
    mc.embedding_dim = e.embedding_dim();
    mc.activity_dim = d.activity_dim();
    mc.num_subjects = d.num_subjects();
    Rng rng(tc.seed);
    model = init_model(mc, e, rng);
    echo["pca"] = pca;
    echo["latent_dim"] = mc.latent_dim;
  }

  const SplitAssignment split = split_samples(d.manifest, {}, split_seed);
  std::string log;
  TrainOptions opt;
  opt.threads = threads;
  opt.on_metrics = [&](const MetricsRecord& r) {
    const json j = to_json(r);
    log += j.dump() + "\n";
    out << "step=" << r.step << " lr=" << r.lr << " train_mse=" << r.train_mse;
    if (r.val_mse) out << " val_mse=" << *r.val_mse;
    if (r.val_median_r2) out << " val_median_r2=" << *r.val_median_r2;
    out << "\n";
  };
  const TrainResult<double> res = train(tc, std::move(model), d, split, opt);

  // Checkpoint metadata leaves out filesystem paths so identical runs from
  // different locations produce identical bytes.
  json run = echo;
  for (const char* key : {"data", "pca", "init"}) run.erase(key);
  auto snapshot = [&](std::int64_t step) {
    for (const auto& r : res.log)
      if (r.step == step) return to_json(r);
    return json(nullptr);
  };

  detail::StagedDir staged(out_dir);
  save_checkpoint(res.best, staged.path() / "best",
                  {{"config", run}, {"step", res.best_step}, {"metrics", snapshot(res.best_step)}}, tc.decay_norm_params);
  save_checkpoint(res.last, staged.path() / "last",
                  {{"config", run}, {"step", tc.total_steps}, {"metrics", snapshot(tc.total_steps)}}, tc.decay_norm_params);
  io::write_text_atomic(staged.path() / "metrics.jsonl", log);
  io::write_json(staged.path() / "summary.json",
                 {{"best_step", res.best_step},
                  {"best_val_median_r2", res.best_val_r2 ? finite_or_null(*res.best_val_r2) : json(nullptr)},
                  {"total_steps", tc.total_steps},
                  {"loss_mask", tc.loss_mask == LossMask::None ? "none" : "subject_valid"}});
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "best step " << res.best_step << "\n";
  return 0;
}

// --- eval / predict -----------------------------------------------------------

inline int cmd_eval(const json& cfg, const std::string& out_dir, std::ostream& out) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  const std::string data = detail::required_string(cfg, "data", "--data");
  const std::string checkpoint = detail::required_string(cfg, "checkpoint", "--checkpoint");
  const std::string which = cfg.value("split", std::string("test"));
  const std::string routing = cfg.value("subject", std::string("auto"));
  const auto split_seed = cfg.value("split_seed", std::uint64_t{0});
  const bool no_clip = cfg.value("no_clip", false);
  const int threads = detail::resolve_threads(cfg);
  require(routing == "auto" || routing == "group", ErrorKind::Usage, "--subject must be auto|group for eval");

  const Dataset d = load_dataset(data);
  HeadModel<double> model = load_checkpoint<double>(detail::resolve_checkpoint_dir(checkpoint));
  detail::check_compatible(model.config, d);
  const std::vector<Index> samples = detail::select_samples(d, which, split_seed);
  require(samples.size() >= 2, ErrorKind::InvalidArgument, "evaluation needs at least 2 samples");

  EvaluateOptions eo;
  if (d.noise_ceiling) eo.noise_ceiling = &*d.noise_ceiling;
  if (!d.roi_masks.empty()) eo.roi_masks = &d.roi_masks;
  eo.challenge.clip_at_one = !no_clip;
  const SplitEvaluation ev = evaluate_samples(model, d, samples, LossMask::None, routing == "group", threads, eo);

  const json echo = {{"command", "eval"},         {"data", data},       {"checkpoint", checkpoint},
                     {"split", which},            {"subject", routing}, {"split_seed", split_seed},
                     {"no_clip", no_clip},        {"threads", threads}};
  detail::StagedDir staged(out_dir);
  write_report(ev.report, staged.path(), {{"mse", ev.mse}, {"split", which}, {"routing", routing}, {"samples", samples.size()}});
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "median_r2=" << ev.report.group_median << " mse=" << ev.mse;
  if (ev.report.challenge_score) out << " challenge_score=" << *ev.report.challenge_score;
  out << "\n";
  return 0;
}

inline int cmd_predict(const json& cfg, const std::string& out_dir, std::ostream& out) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  const std::string data = detail::required_string(cfg, "data", "--data");
  const std::string checkpoint = detail::required_string(cfg, "checkpoint", "--checkpoint");
  const std::string which = cfg.value("split", std::string("all"));
  const std::string routing = cfg.value("subject", std::string("auto"));
  const auto split_seed = cfg.value("split_seed", std::uint64_t{0});
  const int threads = detail::resolve_threads(cfg);

  const Dataset d = load_dataset(data);
  HeadModel<double> model = load_checkpoint<double>(detail::resolve_checkpoint_dir(checkpoint));
  detail::check_compatible(model.config, d);
  const std::vector<Index> samples = detail::select_samples(d, which, split_seed);

  std::vector<SubjectId> subjects = gather_subjects(d, samples);
  if (routing == "group") {
    std::fill(subjects.begin(), subjects.end(), SubjectId::group());
  } else if (routing != "auto") {
    int s = -1;
    try {
      std::size_t used = 0;
      s = std::stoi(routing, &used);
      require(used == routing.size(), ErrorKind::Usage, "");
    } catch (const std::exception&) {
      fail(ErrorKind::Usage, "--subject must be auto|group|<index>, got '" + routing + "'");
    }
    require(s >= 0, ErrorKind::SubjectOutOfRange, "subject index must be >= 0");
    model.encoder.check_subject(SubjectId(s));
    std::fill(subjects.begin(), subjects.end(), SubjectId(s));
  }
  const Matrix<float> pred = predict_chunked<double>(
                                 model, static_cast<Index>(samples.size()),
                                 [&](Index begin, Index len) {
                                   return gather_features<double>(
                                       d, std::span<const Index>(samples).subspan(static_cast<std::size_t>(begin),
                                                                                  static_cast<std::size_t>(len)));
                                 },
                                 subjects, threads)
                                 .cast<float>();

  const json echo = {{"command", "predict"}, {"data", data},           {"checkpoint", checkpoint}, {"split", which},
                     {"subject", routing},   {"split_seed", split_seed}, {"threads", threads}};
  detail::StagedDir staged(out_dir);
  io::write_f32(staged.path() / "predictions.f32", {pred.data(), static_cast<std::size_t>(pred.size())});
  io::write_json(staged.path() / "predictions.json", {{"file", "predictions.f32"},
                                                      {"shape", {pred.rows(), pred.cols()}},
                                                      {"dtype", "f32"},
                                                      {"samples", samples},
                                                      {"routing", routing}});
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "wrote " << pred.rows() << " x " << pred.cols() << " predictions\n";
  return 0;
}

// --- params -----------------------------------------------------------------

inline void print_param_table(const ParamReport& r, const ModelConfig& c, std::ostream& out) {
  auto row = [&](const std::string& name, const std::string& value) {
    out << std::left << std::setw(34) << name << std::right << std::setw(18) << value << "\n";
  };
  auto num = [](std::int64_t x) {
    std::string s = std::to_string(x);
    for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
    return s;
  };
  auto ratio = [](double x) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(1) << x << "x";
    return s.str();
  };
  row("block", "parameters");
  for (std::size_t l = 0; l < r.projection_per_layer.size(); ++l)
    row("projection.layer" + std::to_string(l) + " (" + to_string(c.layer_shapes[l]) + ")",
        num(r.projection_per_layer[l]));
  row("  of which batch norm", num(r.batchnorm));
  row("shared encoder", num(r.shared));
  row("subject encoders (" + std::to_string(c.num_subjects) + " x " + num(r.subject_each) + ")", num(r.subject));
  row("pca embedding (frozen)", num(r.pca));
  row("trainable total", num(r.trainable_total));
  row("frozen total", num(r.frozen_total));
  row("grand total", num(r.grand_total));
  row("naive dense regression", num(r.naive_dense_total));
  row("projection savings", ratio(r.projection_savings_ratio));
  row("end-to-end savings", ratio(r.end_to_end_savings_ratio));
}

inline int cmd_params(const json& cfg, const std::string& out_dir, std::ostream& out) {
  ModelConfig c;
  json echo = {{"command", "params"}};
  if (cfg.contains("checkpoint")) {
    const std::string checkpoint = cfg.at("checkpoint").get<std::string>();
    c = load_checkpoint<float>(detail::resolve_checkpoint_dir(checkpoint)).config;
    echo["checkpoint"] = checkpoint;
  } else {
    const std::string preset = cfg.value("preset", std::string("base-arch"));
    require(preset == "base-arch", ErrorKind::Usage, "params knows the base-arch preset only, got '" + preset + "'");
    require(cfg.contains("activity_dim"), ErrorKind::Usage, "--activity-dim is required with --preset base-arch");
    c = presets::base_arch(cfg.at("activity_dim").get<Index>(), cfg.value("subjects", Index{8}));
    echo["preset"] = preset;
    echo["activity_dim"] = c.activity_dim;
    echo["subjects"] = c.num_subjects;
  }
  const ParamReport r = count_params(c);
  const json report = to_json(r);
  print_param_table(r, c, out);
  out << report.dump(2) << "\n";
  if (!out_dir.empty()) {
    detail::StagedDir staged(out_dir);
    io::write_json(staged.path() / "params_report.json", report);
    io::write_json(staged.path() / "config.json", echo);
    staged.commit();
  }
  return 0;
}

// --- cluster-maps -------------------------------------------------------------

inline int cmd_cluster_maps(const json& cfg, const std::string& out_dir, std::ostream& out) {
  require(!out_dir.empty(), ErrorKind::Usage, "--out is required");
  const std::string checkpoint = detail::required_string(cfg, "checkpoint", "--checkpoint");
  const int k = cfg.value("k", 8);
  const auto seed = cfg.value("seed", std::uint64_t{0});
  const int layer = cfg.value("layer", -1);

  const HeadModel<double> model = load_checkpoint<double>(detail::resolve_checkpoint_dir(checkpoint));
  const int num_layers = static_cast<int>(model.layers.size());
  require(layer >= -1 && layer < num_layers, ErrorKind::Usage, "--layer must be -1 (all) or in [0, L)");
  std::vector<int> chosen;
  if (layer >= 0) chosen.push_back(layer);
  else
    for (int l = 0; l < num_layers; ++l) chosen.push_back(l);
  const LayerShape grid = model.layers[static_cast<std::size_t>(chosen.front())].shape;
  for (int l : chosen)
    require(model.layers[static_cast<std::size_t>(l)].shape.positions() == grid.positions(), ErrorKind::ShapeMismatch,
            "layers have different spatial grids; pick one with --layer");

  // One row per (layer, latent) pooling map.
  const Index d = model.config.latent_dim;
  Matrix<double> maps(static_cast<Index>(chosen.size()) * d, grid.positions());
  for (std::size_t i = 0; i < chosen.size(); ++i)
    maps.middleRows(static_cast<Index>(i) * d, d) = model.layers[static_cast<std::size_t>(chosen[i])].spatial_map.transpose();
  const GmmResult g = cluster_pooling_maps(maps, k, seed);

  Matrix<float> exemplars(k, grid.positions());
  json exemplar_ids = json::array();
  for (int c = 0; c < k; ++c) {
    const Index row = g.exemplars[static_cast<std::size_t>(c)];
    exemplars.row(c) = maps.row(row).cast<float>();
    exemplar_ids.push_back({{"layer", chosen[static_cast<std::size_t>(row / d)]}, {"latent", row % d}});
  }
  std::vector<Index> sizes(static_cast<std::size_t>(k), 0);
  for (int a : g.assignments) ++sizes[static_cast<std::size_t>(a)];
  const Matrix<float> means = g.model.means.cast<float>();
  const Matrix<float> variances = g.model.variances.cast<float>();

  const json echo = {{"command", "cluster-maps"}, {"checkpoint", checkpoint}, {"k", k}, {"seed", seed}, {"layer", layer}};
  const json summary = {{"k", k},
                        {"grid", {grid.height, grid.width}},
                        {"weights", std::vector<double>(g.model.weights.data(), g.model.weights.data() + k)},
                        {"cluster_sizes", sizes},
                        {"exemplars", exemplar_ids},
                        {"log_likelihood_trace", g.model.log_likelihood_trace},
                        {"iterations", g.model.iterations},
                        {"converged", g.model.converged},
                        {"reinitializations", g.model.reinitializations},
                        {"arrays",
                         {{"exemplars", {{"file", "exemplars.f32"}, {"shape", {k, grid.height, grid.width}}}},
                          {"means", {{"file", "means.f32"}, {"shape", {k, grid.height, grid.width}}}},
                          {"variances", {{"file", "variances.f32"}, {"shape", {k, grid.height, grid.width}}}}}}};
  detail::StagedDir staged(out_dir);
  io::write_f32(staged.path() / "exemplars.f32", {exemplars.data(), static_cast<std::size_t>(exemplars.size())});
  io::write_f32(staged.path() / "means.f32", {means.data(), static_cast<std::size_t>(means.size())});
  io::write_f32(staged.path() / "variances.f32", {variances.data(), static_cast<std::size_t>(variances.size())});
  io::write_json(staged.path() / "summary.json", summary);
  io::write_json(staged.path() / "config.json", echo);
  staged.commit();
  out << "clustered " << maps.rows() << " maps into " << k << " components in " << g.model.iterations << " iterations\n";
  return 0;
}

// --- entry point ----------------------------------------------------------------

// Parses argv, runs one command and maps failures to exit codes 1 (usage),
// 2 (data) and 3 (numeric) with a single `error=<Kind> detail=...` line.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Multi-subject linear encoding head: data, PCA, training, evaluation and analysis"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::map<std::string, detail::Command> commands;
  auto add = [&](const std::string& name, const std::string& help) -> detail::Command& {
    detail::Command& c = commands[name];
    c.app = app.add_subcommand(name, help);
    c.flags = std::make_unique<detail::Flags>(c.app);
    c.app->add_option("--config", c.config_path, "JSON config file; flags override it");
    return c;
  };
  auto add_out = [](detail::Command& c, bool required) {
    auto* o = c.app->add_option("--out", c.out_dir, "output directory (written atomically)");
    if (required) o->required();
  };

  {
    auto& c = add("synth", "write a synthetic dataset generated by a planted head");
    add_out(c, true);
    auto& f = *c.flags;
    f.add<Index>("--subjects", "subjects", "number of subjects S");
    f.add<Index>("--layers", "layers", "number of feature layers L");
    f.add<Index>("--height", "height", "feature grid height");
    f.add<Index>("--width", "width", "feature grid width");
    f.add<Index>("--channels", "channels", "feature channels C");
    f.add<Index>("--latent-dim", "latent_dim", "planted latent dimension D");
    f.add<Index>("--embedding-dim", "embedding_dim", "planted embedding dimension K");
    f.add<Index>("--activity-dim", "activity_dim", "activity dimension V");
    f.add<Index>("--samples", "samples", "number of samples N");
    f.add<double>("--noise", "noise", "target noise sigma");
    f.add<std::uint64_t>("--seed", "seed", "generator seed");
    f.add<Index>("--feature-rank", "feature_rank", "rank of the shared feature structure");
    f.add<double>("--feature-noise", "feature_noise", "isotropic feature noise");
    f.add<double>("--subject-scale", "subject_scale", "planted subject map scale");
    f.add<double>("--missing-fraction", "missing_fraction", "fraction of vertices invalid per subject");
    f.add<Index>("--rois", "num_rois", "number of contiguous ROI masks");
  }
  {
    auto& c = add("fit-pca", "fit the frozen PCA activity embedding on the train split");
    add_out(c, true);
    auto& f = *c.flags;
    f.add<std::string>("--data", "data", "dataset directory or manifest");
    f.add<Index>("--dim", "dim", "embedding dimension K (default 2048)");
    f.add<std::uint64_t>("--split-seed", "split_seed", "split seed");
    f.add<std::string>("--method", "method", "auto|svd|gram");
    f.add<Index>("--export-maps", "export_maps", "also write the first N component maps");
  }
  {
    auto& c = add("train", "train the head with the PCA embedding frozen");
    add_out(c, true);
    auto& f = *c.flags;
    f.add<std::string>("--data", "data", "dataset directory or manifest");
    f.add<std::string>("--pca", "pca", "fit-pca output (default <data>/pca)");
    f.add<std::string>("--init", "init", "start from this checkpoint instead of a fresh init");
    f.add<std::string>("--preset", "preset", "phase1|phase2|phase1-desk");
    f.add<Index>("--latent-dim", "latent_dim", "latent dimension D (default 1024)");
    f.add<std::uint64_t>("--split-seed", "split_seed", "split seed");
    f.add<std::int64_t>("--batch-size", "batch_size", "minibatch size");
    f.add<double>("--lr", "peak_lr", "peak learning rate");
    f.add<double>("--min-lr", "min_lr", "final learning rate");
    f.add<double>("--beta1", "beta1", "AdamW beta1");
    f.add<double>("--beta2", "beta2", "AdamW beta2");
    f.add<double>("--eps", "eps", "AdamW epsilon");
    f.add<double>("--weight-decay", "weight_decay", "decoupled weight decay");
    f.add<double>("--dropout", "feature_dropout", "feature dropout rate");
    f.add<std::int64_t>("--steps", "total_steps", "optimizer steps");
    f.add<std::int64_t>("--warmup", "warmup_steps", "linear warmup steps");
    f.add<std::uint64_t>("--seed", "seed", "init, shuffle and dropout seed");
    f.add<std::int64_t>("--eval-interval", "eval_interval", "steps between validation passes");
    f.add<std::string>("--loss-mask", "loss_mask", "none|subject_valid");
    f.add_switch("--decay-norm-params", "decay_norm_params", "apply weight decay to batch-norm gain/bias too");
    f.add<int>("--threads", "threads", "worker threads (fallback MSENC_THREADS)");
  }
  for (const char* name : {"eval", "predict"}) {
    const bool is_eval = std::string(name) == "eval";
    auto& c = add(name, is_eval ? "score a checkpoint with vertex-wise R^2" : "write predictions for a split");
    add_out(c, true);
    auto& f = *c.flags;
    f.add<std::string>("--data", "data", "dataset directory or manifest");
    f.add<std::string>("--checkpoint", "checkpoint", "checkpoint directory or train output");
    f.add<std::string>("--split", "split", is_eval ? "train|val|test|all (default test)" : "train|val|test|all (default all)");
    f.add<std::uint64_t>("--split-seed", "split_seed", "split seed");
    f.add<std::string>("--subject", "subject", is_eval ? "auto|group" : "auto|group|<index>");
    f.add<int>("--threads", "threads", "worker threads (fallback MSENC_THREADS)");
    if (is_eval) f.add_switch("--no-clip", "no_clip", "do not clip normalized R^2 at 1");
  }
  {
    auto& c = add("params", "parameter accounting for a preset or checkpoint");
    add_out(c, false);
    auto& f = *c.flags;
    f.add<std::string>("--preset", "preset", "base-arch");
    f.add<Index>("--activity-dim", "activity_dim", "activity dimension V");
    f.add<Index>("--subjects", "subjects", "number of subjects (default 8)");
    f.add<std::string>("--checkpoint", "checkpoint", "count a checkpoint's configuration instead");
  }
  {
    auto& c = add("cluster-maps", "Gaussian-mixture clustering of learned spatial pooling maps");
    add_out(c, true);
    auto& f = *c.flags;
    f.add<std::string>("--checkpoint", "checkpoint", "checkpoint directory or train output");
    f.add<int>("--k", "k", "number of components (default 8)");
    f.add<std::uint64_t>("--seed", "seed", "k-means++ seed");
    f.add<int>("--layer", "layer", "layer to cluster, -1 for all (default)");
  }

  auto report = [&](const std::string& kind, const std::string& detail, int code) {
    err << "error=" << kind << " detail=" << detail::one_line(detail) << "\n";
    return code;
  };
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return report("Usage", e.what(), 1);
  }

  try {
    for (auto& [name, c] : commands) {
      if (!c.app->parsed()) continue;
      const json cfg = c.flags->overlay(detail::load_config(c.config_path));
      if (name == "synth") return cmd_synth(cfg, c.out_dir, out);
      if (name == "fit-pca") return cmd_fit_pca(cfg, c.out_dir, out, err);
      if (name == "train") return cmd_train(cfg, c.out_dir, out, err);
      if (name == "eval") return cmd_eval(cfg, c.out_dir, out);
      if (name == "predict") return cmd_predict(cfg, c.out_dir, out);
      if (name == "params") return cmd_params(cfg, c.out_dir, out);
      if (name == "cluster-maps") return cmd_cluster_maps(cfg, c.out_dir, out);
    }
    return report("Usage", "no command given", 1);
  } catch (const Error& e) {
    return report(std::string(to_string(e.kind())), e.detail(), static_cast<int>(category(e.kind())));
  } catch (const json::exception& e) {
    return report("Usage", std::string("config: ") + e.what(), 1);
  } catch (const fs::filesystem_error& e) {
    return report("IoError", e.what(), 2);
  } catch (const std::exception& e) {
    return report("Internal", e.what(), 2);
  }
}

}  // namespace msenc::cli
