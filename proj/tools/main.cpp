// Command-line front end: dataset generation, training, evaluation, ablation
// sweeps, histogram plotting and the parameter census.
//
// Every subcommand accepts --config/--seed/--out. The R3CNN_DETERMINISTIC
// environment variable (default on) pins all randomness to the configured
// seed; setting it to 0/false/off draws a fresh seed per run unless --seed
// is given explicitly.

#include <CLI11.hpp>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "r3cnn/config.hpp"
#include "r3cnn/inference.hpp"
#include "r3cnn/io.hpp"
#include "r3cnn/metrics.hpp"
#include "r3cnn/plot.hpp"
#include "r3cnn/r3loop.hpp"
#include "r3cnn/synthdata.hpp"

namespace fs = std::filesystem;
using namespace r3cnn;

namespace {

bool deterministic_mode() {
  const char* v = std::getenv("R3CNN_DETERMINISTIC");
  if (!v) return true;
  const std::string s(v);
  return !(s == "0" || s == "false" || s == "off");
}

struct CommonOpts {
  std::string config_path;
  std::optional<std::int64_t> seed;
  std::string out_dir;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config file (key = value)");
    cmd->add_option("--seed", seed, "override the run seed");
    cmd->add_option("--out", out_dir, "output directory");
  }

  RunConfig load() const {
    Config c = config_path.empty() ? Config{} : Config::parse_file(config_path);
    RunConfig rc = RunConfig::from_config(c);
    if (seed) {
      rc.seed = static_cast<std::uint64_t>(*seed);
    } else if (!deterministic_mode()) {
      rc.seed = static_cast<std::uint64_t>(
          std::chrono::steady_clock::now().time_since_epoch().count());
    }
    if (!out_dir.empty()) rc.out_dir = out_dir;
    return rc;
  }
};

void persist_config(const RunConfig& rc, const fs::path& dir) {
  fs::create_directories(dir);
  rc.to_config().save((dir / "config.txt").string());
}

// Seed hierarchy: one run seed, independent child streams per purpose.
constexpr std::uint64_t kInitStream = 0x696e6974;  // weight init
constexpr std::uint64_t kValStream = 0x76616c;     // validation dataset

SceneSpec val_spec(const RunConfig& rc) {
  SceneSpec s = rc.scene;
  s.seed = Rng::mix(rc.scene.seed, kValStream);
  return s;
}

int cmd_gen_data(const CommonOpts& opts, std::optional<std::int64_t> count) {
  RunConfig rc = opts.load();
  if (count) rc.train_scenes = static_cast<std::size_t>(*count);
  const fs::path out(rc.out_dir);
  persist_config(rc, out);
  const std::string train_manifest =
      write_dataset(rc.scene, rc.train_scenes, (out / "data" / "train").string());
  const std::string val_manifest =
      write_dataset(val_spec(rc), rc.val_scenes, (out / "data" / "val").string());
  std::cout << "train_manifest = " << train_manifest << "\n"
            << "val_manifest = " << val_manifest << "\n";
  return 0;
}

DatasetManifest require_manifest(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.txt";
  if (!fs::exists(manifest))
    throw std::runtime_error("dataset manifest not found: " + manifest.string());
  return read_manifest(manifest.string());
}

struct TrainResult {
  TrainLog log;
  std::string checkpoint;
};

TrainResult do_train(const RunConfig& rc, const fs::path& data_dir,
                     const fs::path& out) {
  const DatasetManifest manifest = require_manifest(data_dir / "train");
  const TrainingSet data = load_training_set(manifest);

  R3Cnn<float> model(rc.model);
  Rng init_rng(Rng::mix(rc.seed, kInitStream));
  model.init(init_rng);

  TrainResult result;
  result.log = fit(data, rc.schedule, model, rc.optim, rc.loss, rc.sampler,
                   rc.rpn_train, rc.seed);

  fs::create_directories(out);
  result.checkpoint = (out / "model.ck").string();
  model.save(result.checkpoint);
  {
    std::ofstream f(out / "train_log.txt");
    write_train_log(f, result.log);
  }
  if (!result.log.epochs.empty())
    write_histogram_csv((out / "hist.csv").string(),
                        result.log.epochs.back().hist);
  return result;
}

int cmd_train(const CommonOpts& opts, const std::string& data_opt) {
  const RunConfig rc = opts.load();
  const fs::path out(rc.out_dir);
  const fs::path data = data_opt.empty() ? out / "data" : fs::path(data_opt);
  persist_config(rc, out);
  const TrainResult r = do_train(rc, data, out);
  std::cout << "checkpoint = " << r.checkpoint << "\n"
            << "epochs = " << r.log.epochs.size() << "\n"
            << "diverged = " << (r.log.diverged ? "true" : "false") << "\n";
  if (!r.log.epochs.empty())
    std::cout << "final_loss = " << r.log.epochs.back().mean_total << "\n";
  return r.log.diverged ? 1 : 0;
}

struct EvalResult {
  APResult box, mask;
};

EvalResult do_eval(const RunConfig& rc, const fs::path& data_dir,
                   const std::string& checkpoint, std::size_t eval_loops) {
  const DatasetManifest manifest = require_manifest(data_dir / "val");

  R3Cnn<float> model(rc.model);
  model.load(checkpoint);

  LoopSchedule schedule = rc.schedule;
  schedule.eval_loops = eval_loops;

  std::vector<DetectionResult> detections;
  std::vector<GroundTruth> gts;
  for (const auto& rec : manifest.scenes) {
    const Image img = generate_scene(manifest.spec, rec.index).first;
    Tensor<float> x = image_to_tensor<float>(img);
    detections.push_back(run_inference(x, model, schedule, rc.post));
    gts.push_back(rec.gt);
  }
  EvalResult r;
  r.box = compute_ap(detections, gts, coco_iou_thresholds(), ApTask::kBox);
  r.mask = compute_ap(detections, gts, coco_iou_thresholds(), ApTask::kMask);
  return r;
}

int cmd_eval(const CommonOpts& opts, const std::string& data_opt,
             const std::string& checkpoint_opt,
             std::optional<std::int64_t> eval_loops) {
  const RunConfig rc = opts.load();
  const fs::path out(rc.out_dir);
  const fs::path data = data_opt.empty() ? out / "data" : fs::path(data_opt);
  const std::string checkpoint =
      checkpoint_opt.empty() ? (out / "model.ck").string() : checkpoint_opt;
  const std::size_t loops =
      eval_loops ? static_cast<std::size_t>(*eval_loops) : rc.schedule.eval_loops;

  const EvalResult r = do_eval(rc, data, checkpoint, loops);
  fs::create_directories(out);
  {
    std::ofstream f(out / "metrics.txt");
    f << "eval_loops = " << loops << "\n";
    write_metrics_report(f, r.box, r.mask);
  }
  std::cout << "eval_loops = " << loops << "\n";
  write_metrics_report(std::cout, r.box, r.mask);
  return 0;
}

// Threshold ladder for a given loop count: 0.5, 0.6, 0.7, then capped at 0.7.
std::vector<double> threshold_ladder(std::size_t loops, bool decreasing) {
  std::vector<double> t;
  for (std::size_t i = 0; i < loops; ++i)
    t.push_back(std::min(0.5 + 0.1 * static_cast<double>(i), 0.7));
  if (decreasing) std::reverse(t.begin(), t.end());
  return t;
}

struct AblateRow {
  std::size_t train_loops, eval_loops;
  std::string order;
};

int cmd_ablate(const CommonOpts& opts, const std::string& data_opt,
               const std::string& sweep) {
  const RunConfig base = opts.load();
  const fs::path out(base.out_dir);
  const fs::path data = data_opt.empty() ? out / "data" : fs::path(data_opt);
  persist_config(base, out);

  std::vector<AblateRow> rows;
  if (sweep == "train-loops") {
    for (std::size_t lt : {1, 2, 3, 4}) rows.push_back({lt, lt, "inc"});
  } else if (sweep == "eval-loops") {
    for (std::size_t le : {1, 2, 3, 4, 5})
      rows.push_back({base.schedule.train_loops, le, "inc"});
  } else if (sweep == "order") {
    const std::size_t lt = base.schedule.train_loops;
    rows.push_back({lt, lt, "inc"});
    rows.push_back({lt, lt, "dec"});
  } else {
    std::cerr << "unknown sweep '" << sweep
              << "' (expected train-loops, eval-loops or order)\n";
    return 2;
  }

  const fs::path results_path = out / "results.csv";
  std::ofstream results(results_path);
  results << "train_loops,eval_loops,order,box_ap,mask_ap,status\n";

  for (const AblateRow& row : rows) {
    const std::string model_tag =
        "lt" + std::to_string(row.train_loops) + "_" + row.order;
    const std::string row_tag = model_tag + "_le" + std::to_string(row.eval_loops);
    const fs::path row_dir = out / "ablate" / row_tag;
    const fs::path row_file = row_dir / "row.csv";
    try {
      if (!fs::exists(row_file)) {
        RunConfig rc = base;
        rc.schedule.train_loops = row.train_loops;
        rc.schedule.eval_loops = row.eval_loops;
        rc.schedule.thresholds =
            threshold_ladder(row.train_loops, row.order == "dec");
        rc.schedule.loop_loss_weights.assign(row.train_loops, 1.0);

        // grid points with the same trained model share its checkpoint
        const fs::path model_dir = out / "ablate" / model_tag;
        const fs::path checkpoint = model_dir / "model.ck";
        if (!fs::exists(checkpoint)) {
          RunConfig tc = rc;
          tc.out_dir = model_dir.string();
          persist_config(tc, model_dir);
          do_train(tc, data, model_dir);
        }
        const EvalResult r =
            do_eval(rc, data, checkpoint.string(), row.eval_loops);
        fs::create_directories(row_dir);
        std::ofstream rf(row_file);
        rf << row.train_loops << "," << row.eval_loops << "," << row.order
           << "," << r.box.ap << "," << r.mask.ap << ",ok\n";
      }
      std::ifstream rf(row_file);
      std::string line;
      std::getline(rf, line);
      results << line << "\n";
      std::cout << line << "\n";
    } catch (const std::exception& e) {
      // partial failure: record the row and keep sweeping
      results << row.train_loops << "," << row.eval_loops << "," << row.order
              << ",,,failed: " << e.what() << "\n";
      std::cerr << row_tag << " failed: " << e.what() << "\n";
    }
  }
  std::cout << "results = " << results_path.string() << "\n";
  return 0;
}

int cmd_plot_hist(const CommonOpts& opts, const std::string& csv_path) {
  const RunConfig rc = opts.load();
  const fs::path out(rc.out_dir);
  const std::string input =
      csv_path.empty() ? (out / "hist.csv").string() : csv_path;
  std::ifstream f(input);
  if (!f) {
    std::cerr << "cannot open histogram CSV: " << input << "\n";
    return 1;
  }
  const std::vector<HistogramRow> rows = read_histogram_csv(f);
  if (rows.empty())
    std::cerr << "warning: empty histogram CSV, rendering empty axes\n";
  fs::create_directories(out);
  const std::string png = (out / "hist.png").string();
  plot::render_histogram_png(rows, png);
  std::cout << "plot = " << png << "\n";
  return 0;
}

int cmd_count_params(const CommonOpts& opts) {
  const RunConfig rc = opts.load();
  rc.schedule.validate();
  const ParamCensus census = count_parameters(rc.model);
  std::ostringstream report;
  for (const auto& [module, n] : census.per_module)
    if (module != "backbone" && module != "rpn")
      report << "params." << module << " = " << n << "\n";
  report << "params.backbone = " << census.backbone << "\n";
  report << "params.rpn = " << census.rpn << "\n";
  report << "params.heads = " << census.heads << "\n";
  report << "params.total = " << census.total << "\n";
  std::cout << report.str();
  if (!rc.out_dir.empty()) {
    fs::create_directories(rc.out_dir);
    std::ofstream f(fs::path(rc.out_dir) / "params.txt");
    f << report.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"recursively refined two-stage instance segmentation"};
  app.require_subcommand(1);

  CommonOpts gen_opts, train_opts, eval_opts, ablate_opts, plot_opts, count_opts;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen_opts.attach(gen);
  std::optional<std::int64_t> gen_count;
  gen->add_option("--count", gen_count, "override the train scene count");

  auto* train = app.add_subcommand("train", "train a model");
  train_opts.attach(train);
  std::string train_data;
  train->add_option("--data", train_data, "dataset directory (default <out>/data)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_opts.attach(eval);
  std::string eval_data, eval_checkpoint;
  std::optional<std::int64_t> eval_loops;
  eval->add_option("--data", eval_data, "dataset directory (default <out>/data)");
  eval->add_option("--checkpoint", eval_checkpoint,
                   "checkpoint path (default <out>/model.ck)");
  eval->add_option("--eval-loops", eval_loops, "refinement loops at inference");

  auto* ablate = app.add_subcommand("ablate", "run an ablation sweep");
  ablate_opts.attach(ablate);
  std::string ablate_data, ablate_sweep = "order";
  ablate->add_option("--data", ablate_data, "dataset directory (default <out>/data)");
  ablate->add_option("--sweep", ablate_sweep,
                     "sweep axis: train-loops, eval-loops or order");

  auto* plot = app.add_subcommand("plot-hist", "render a histogram CSV to PNG");
  plot_opts.attach(plot);
  std::string plot_csv;
  plot->add_option("csv", plot_csv, "histogram CSV (default <out>/hist.csv)");

  auto* count = app.add_subcommand("count-params", "parameter census");
  count_opts.attach(count);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts, gen_count);
    if (train->parsed()) return cmd_train(train_opts, train_data);
    if (eval->parsed())
      return cmd_eval(eval_opts, eval_data, eval_checkpoint, eval_loops);
    if (ablate->parsed()) return cmd_ablate(ablate_opts, ablate_data, ablate_sweep);
    if (plot->parsed()) return cmd_plot_hist(plot_opts, plot_csv);
    if (count->parsed()) return cmd_count_params(count_opts);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
