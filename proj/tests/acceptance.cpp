// Acceptance suite: end-to-end checks of the training/evaluation pipeline.
// Prints one PASS/FAIL line per criterion and exits non-zero on any failure.
//
// Training runs are expensive, so every trained model and every evaluation is
// cached under $R3CNN_ACCEPT_DIR (default ./acceptance_out); re-running the
// binary reuses finished artifacts. Delete the directory for a cold run.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "r3cnn/config.hpp"
#include "r3cnn/inference.hpp"
#include "r3cnn/io.hpp"
#include "r3cnn/metrics.hpp"
#include "r3cnn/r3loop.hpp"
#include "r3cnn/synthdata.hpp"

namespace fs = std::filesystem;
using namespace r3cnn;

namespace {

// ---------------------------------------------------------------------------
// Pinned experiment scale and tolerances
// ---------------------------------------------------------------------------

constexpr std::size_t kImageSize = 128;
constexpr std::size_t kTrainScenes = 2000;
constexpr std::size_t kValScenes = 200;
constexpr std::size_t kEpochs = 12;
const std::vector<std::uint64_t> kSeeds = {1, 2, 3};

// AP values are fractions in [0,1]; one "AP point" is 0.01.
constexpr double kLoopBenefitMargin = 0.010;   // criterion 1 and 3
constexpr double kEvalLoopDropMargin = 0.010;  // criterion 2
constexpr double kPlateauTolerance = 0.005;    // criterion 2
constexpr double kIncDecGap = 0.015;           // criterion 3
constexpr double kIoUOracleTol = 1e-6;         // criterion 7
constexpr double kRoundTripTol = 1e-6;         // criterion 7
constexpr double kGradRelTol = 1e-3;           // criterion 7
constexpr double kApOracleTol = 1e-9;          // criterion 7

bool g_all_pass = true;

void report(int criterion, const std::string& name, bool pass,
            const std::string& detail) {
  std::cout << "criterion " << criterion << " [" << name << "] "
            << (pass ? "PASS" : "FAIL") << " — " << detail << "\n";
  std::cout.flush();
  if (!pass) g_all_pass = false;
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

fs::path artifact_dir() {
  const char* env = std::getenv("R3CNN_ACCEPT_DIR");
  return fs::path(env ? env : "acceptance_out");
}

RunConfig base_config() {
  RunConfig rc;  // library defaults are the desk-scale experiment settings
  rc.scene.image_size = kImageSize;
  rc.scene.seed = 7;
  rc.train_scenes = kTrainScenes;
  rc.val_scenes = kValScenes;
  rc.optim.epochs = kEpochs;
  return rc;
}

struct Variant {
  std::string tag;
  std::vector<double> thresholds;
};

const Variant kInc3{"inc3", {0.5, 0.6, 0.7}};
const Variant kDec3{"dec3", {0.7, 0.6, 0.5}};
const Variant kOne{"one", {0.5}};

RunConfig variant_config(const Variant& v, std::uint64_t seed) {
  RunConfig rc = base_config();
  rc.seed = seed;
  rc.schedule.thresholds = v.thresholds;
  rc.schedule.train_loops = v.thresholds.size();
  rc.schedule.eval_loops = v.thresholds.size();
  rc.schedule.loop_loss_weights.assign(v.thresholds.size(), 1.0);
  return rc;
}

// ---------------------------------------------------------------------------
// Cached training and evaluation
// ---------------------------------------------------------------------------

TrainingSet& train_data() {
  static TrainingSet data = [] {
    std::cerr << "[setup] rendering " << kTrainScenes << " training scenes\n";
    TrainingSet set;
    set.spec = base_config().scene;
    for (std::size_t i = 0; i < kTrainScenes; ++i) {
      auto [img, gt] = generate_scene(set.spec, i);
      set.indices.push_back(i);
      set.gts.push_back(std::move(gt));
      set.images.push_back(std::move(img));
    }
    return set;
  }();
  return data;
}

struct ValScene {
  Image image;
  GroundTruth gt;
};

std::vector<ValScene>& val_data() {
  static std::vector<ValScene> data = [] {
    std::cerr << "[setup] rendering " << kValScenes << " validation scenes\n";
    SceneSpec spec = base_config().scene;
    spec.seed = Rng::mix(spec.seed, 0x76616cULL);
    std::vector<ValScene> v;
    for (std::size_t i = 0; i < kValScenes; ++i) {
      auto [img, gt] = generate_scene(spec, i);
      v.push_back({std::move(img), std::move(gt)});
    }
    return v;
  }();
  return data;
}

std::string run_dir_name(const Variant& v, std::uint64_t seed) {
  return "run_" + v.tag + "_seed" + std::to_string(seed);
}

// Trains (or reuses) one model; returns the checkpoint path.
fs::path ensure_trained(const Variant& v, std::uint64_t seed) {
  const fs::path dir = artifact_dir() / run_dir_name(v, seed);
  const fs::path ck = dir / "model.ck";
  if (fs::exists(ck)) return ck;
  std::cerr << "[train] " << run_dir_name(v, seed) << "\n";
  const RunConfig rc = variant_config(v, seed);
  R3Cnn<float> model(rc.model);
  Rng init_rng(Rng::mix(rc.seed, 0x696e6974ULL));
  model.init(init_rng);
  const TrainLog log = fit(train_data(), rc.schedule, model, rc.optim, rc.loss,
                           rc.sampler, rc.rpn_train, rc.seed);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "train_log.txt");
    write_train_log(f, log);
  }
  if (!log.epochs.empty())
    write_histogram_csv((dir / "hist.csv").string(), log.epochs.back().hist);
  if (log.diverged)
    std::cerr << "[train] WARNING: " << run_dir_name(v, seed) << " diverged\n";
  model.save((dir / "model.ck").string());
  return ck;
}

struct ApPair {
  double box = 0, mask = 0;
};

// Evaluates (or reuses) one checkpoint at a given loop count.
ApPair ensure_evaluated(const Variant& v, std::uint64_t seed,
                        std::size_t eval_loops) {
  const fs::path dir = artifact_dir() / run_dir_name(v, seed);
  const fs::path cache = dir / ("eval_le" + std::to_string(eval_loops) + ".txt");
  if (fs::exists(cache)) {
    ApPair r;
    std::ifstream f(cache);
    f >> r.box >> r.mask;
    if (f) return r;
  }
  const fs::path ck = ensure_trained(v, seed);
  std::cerr << "[eval] " << run_dir_name(v, seed) << " le=" << eval_loops << "\n";
  const RunConfig rc = variant_config(v, seed);
  R3Cnn<float> model(rc.model);
  model.load(ck.string());
  LoopSchedule schedule = rc.schedule;
  schedule.eval_loops = eval_loops;

  std::vector<DetectionResult> dets;
  std::vector<GroundTruth> gts;
  for (const ValScene& s : val_data()) {
    Tensor<float> x = image_to_tensor<float>(s.image);
    dets.push_back(run_inference(x, model, schedule, rc.post));
    gts.push_back(s.gt);
  }
  ApPair r;
  r.box = compute_ap(dets, gts, coco_iou_thresholds(), ApTask::kBox).ap;
  r.mask = compute_ap(dets, gts, coco_iou_thresholds(), ApTask::kMask).ap;
  std::ofstream f(cache);
  f.precision(17);
  f << r.box << " " << r.mask << "\n";
  return r;
}

ApPair mean_ap(const Variant& v, std::size_t eval_loops) {
  ApPair m;
  for (std::uint64_t s : kSeeds) {
    const ApPair r = ensure_evaluated(v, s, eval_loops);
    m.box += r.box / static_cast<double>(kSeeds.size());
    m.mask += r.mask / static_cast<double>(kSeeds.size());
  }
  return m;
}

IoUHistogram summed_inc3_histogram() {
  IoUHistogram sum(0.05, 3);
  for (std::uint64_t s : kSeeds) {
    ensure_trained(kInc3, s);
    const fs::path csv = artifact_dir() / run_dir_name(kInc3, s) / "hist.csv";
    std::ifstream f(csv);
    if (!f) throw std::runtime_error("missing histogram: " + csv.string());
    for (const HistogramRow& r : read_histogram_csv(f)) {
      const std::size_t bin =
          static_cast<std::size_t>(std::llround(r.bin_low / 0.05));
      sum.counts[r.loop - 1][bin] += r.count;
    }
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Criteria 1-3, 5: trained-model behavior
// ---------------------------------------------------------------------------

void criterion_1() {
  const ApPair loop3 = mean_ap(kInc3, 3);
  const ApPair loop1 = mean_ap(kOne, 1);
  const bool pass = loop3.box - loop1.box >= kLoopBenefitMargin &&
                    loop3.mask > loop1.mask;
  report(1, "loop benefit", pass,
         "box AP 3-loop " + fmt(loop3.box) + " vs 1-loop " + fmt(loop1.box) +
             " (margin >= " + fmt(kLoopBenefitMargin) + "), mask " +
             fmt(loop3.mask) + " vs " + fmt(loop1.mask));
}

void criterion_2() {
  const double le1 = mean_ap(kInc3, 1).box;
  const double le3 = mean_ap(kInc3, 3).box;
  const double le4 = mean_ap(kInc3, 4).box;
  const bool drop = le3 - le1 >= kEvalLoopDropMargin;
  const bool plateau = std::abs(le4 - le3) <= kPlateauTolerance;
  report(2, "evaluation-loop necessity", drop && plateau,
         "box AP le1 " + fmt(le1) + ", le3 " + fmt(le3) + ", le4 " + fmt(le4) +
             " (drop >= " + fmt(kEvalLoopDropMargin) + ", plateau +/- " +
             fmt(kPlateauTolerance) + ")");
}

void criterion_3() {
  const double dec = mean_ap(kDec3, 3).box;
  const double inc = mean_ap(kInc3, 3).box;
  const double base = mean_ap(kOne, 1).box;
  const bool pass = inc - base >= kLoopBenefitMargin &&
                    dec - base >= kLoopBenefitMargin &&
                    std::abs(inc - dec) <= kIncDecGap;
  report(3, "inc vs dec", pass,
         "box AP inc " + fmt(inc) + ", dec " + fmt(dec) + ", 1-loop " +
             fmt(base) + " (gap <= " + fmt(kIncDecGap) + ")");
}

void criterion_5() {
  const IoUHistogram h = summed_inc3_histogram();
  // bins: [0.5,0.6) = 10,11; [0.8,0.9) = 16,17 at width 0.05
  auto band = [&](std::size_t loop, std::size_t b0, std::size_t b1) {
    return static_cast<double>(h.counts[loop][b0] + h.counts[loop][b1]);
  };
  double low_all = 0, high_all = 0;
  for (std::size_t l = 0; l < 3; ++l) {
    low_all += band(l, 10, 11);
    high_all += band(l, 16, 17);
  }
  const double ratio_all = low_all / std::max(1.0, high_all);
  const double ratio_l1 = band(0, 10, 11) / std::max(1.0, band(0, 16, 17));
  std::size_t mode_bin = 0;
  for (std::size_t b = 1; b < h.counts[2].size(); ++b)
    if (h.counts[2][b] > h.counts[2][mode_bin]) mode_bin = b;
  const double mode_low = static_cast<double>(mode_bin) * 0.05;
  const bool pass = ratio_all < ratio_l1 && mode_low >= 0.7 - 1e-12;
  report(5, "rebalancing", pass,
         "low/high ratio all-loops " + fmt(ratio_all) + " vs loop1 " +
             fmt(ratio_l1) + ", loop3 mode bin starts at " + fmt(mode_low));
}

// ---------------------------------------------------------------------------
// Criterion 4: parameter census (zero tolerance)
// ---------------------------------------------------------------------------

void criterion_4() {
  ModelConfig single;        // loop count never touches the parameter set
  const ParamCensus c_l1 = count_parameters(single);
  const ParamCensus c_l3 = count_parameters(single);
  ModelConfig cascade = single;
  cascade.num_heads = 3;
  const ParamCensus c_c = count_parameters(cascade);
  const bool pass = c_l1.total == c_l3.total &&
                    c_l1.per_module == c_l3.per_module &&
                    c_c.heads == 3 * c_l1.heads && c_c.backbone == c_l1.backbone;
  report(4, "parameter claim", pass,
         "single-head total " + std::to_string(c_l1.total) +
             ", cascade heads " + std::to_string(c_c.heads) + " = 3 x " +
             std::to_string(c_l1.heads));
}

// ---------------------------------------------------------------------------
// Criterion 6: label rule and loss-indicator exactness (no tolerance)
// ---------------------------------------------------------------------------

void criterion_6() {
  Rng rng(606);
  std::size_t violations = 0;
  const std::size_t trials = 10000;
  for (std::size_t t = 0; t < trials; ++t) {
    GroundTruth gt;
    const int ng = static_cast<int>(rng.uniform_int(0, 3));
    for (int g = 0; g < ng; ++g) {
      const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
      gt.boxes.push_back({x, y, x + rng.uniform(2, 40), y + rng.uniform(2, 40)});
      gt.class_labels.push_back(static_cast<int>(rng.uniform_int(1, 3)));
      gt.masks.emplace_back();
    }
    std::vector<Box> props;
    const int np = static_cast<int>(rng.uniform_int(1, 6));
    for (int p = 0; p < np; ++p) {
      const double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
      props.push_back({x, y, x + rng.uniform(1, 40), y + rng.uniform(1, 40)});
    }
    const double u = rng.uniform(0.05, 0.95);
    const AssignmentResult a = assign_labels(props, gt, u);

    // label rule: y = g_y iff argmax-IoU >= u, else 0 (exact)
    for (std::size_t p = 0; p < props.size(); ++p) {
      double best = -1.0;
      int best_g = -1;
      for (std::size_t g = 0; g < gt.size(); ++g) {
        const double v = iou(props[p], gt.boxes[g]);
        if (v > best) {
          best = v;
          best_g = static_cast<int>(g);
        }
      }
      const int expect =
          (best_g >= 0 && best >= u) ? gt.class_labels[static_cast<std::size_t>(best_g)] : 0;
      if (a.labels[p] != expect) ++violations;
    }

    // indicator: background samples contribute exactly zero localization
    // loss and exactly zero regression gradient
    Tensor<double> logits({props.size(), 4}), deltas({props.size(), 4});
    for (auto& v : logits.data) v = rng.normal();
    for (auto& v : deltas.data) v = rng.normal();
    AssignmentResult bg = a;
    for (auto& l : bg.labels) l = 0;
    Tensor<double> dc, dd;
    const DetectionLoss dl =
        detection_loss(logits, deltas, props, bg, gt, LossConfig{}, &dc, &dd);
    if (dl.loc != 0.0) ++violations;
    for (double v : dd.data)
      if (v != 0.0) ++violations;
  }
  report(6, "eq.1/eq.2 exactness", violations == 0,
         std::to_string(trials) + " random configurations, " +
             std::to_string(violations) + " violations");
}

// ---------------------------------------------------------------------------
// Criterion 7: numerical oracles
// ---------------------------------------------------------------------------

double iou_raster_oracle(const Box& a, const Box& b) {
  const double lo_x = std::min(a.x1, b.x1), hi_x = std::max(a.x2, b.x2);
  const double lo_y = std::min(a.y1, b.y1), hi_y = std::max(a.y2, b.y2);
  std::size_t inter = 0, uni = 0;
  for (double y = lo_y + 0.5; y < hi_y; y += 1.0) {
    for (double x = lo_x + 0.5; x < hi_x; x += 1.0) {
      const bool ia = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
      const bool ib = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
      inter += (ia && ib) ? 1 : 0;
      uni += (ia || ib) ? 1 : 0;
    }
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

double brute_force_ap_single(const std::vector<DetectionResult>& dets,
                             const std::vector<GroundTruth>& gts, int cls,
                             double thr) {
  struct D {
    double score;
    std::size_t img, idx;
  };
  std::vector<D> all;
  std::size_t total_gt = 0;
  for (std::size_t im = 0; im < dets.size(); ++im) {
    for (std::size_t d = 0; d < dets[im].size(); ++d)
      if (dets[im].class_labels[d] == cls)
        all.push_back({dets[im].scores[d], im, d});
    for (int c : gts[im].class_labels)
      if (c == cls) ++total_gt;
  }
  std::stable_sort(all.begin(), all.end(), [](const D& a, const D& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.img != b.img) return a.img < b.img;
    return a.idx < b.idx;
  });
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t im = 0; im < gts.size(); ++im)
    used[im].assign(gts[im].size(), false);
  std::vector<double> prec, rec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < all.size(); ++k) {
    double best = -1;
    std::ptrdiff_t bg = -1;
    for (std::size_t g = 0; g < gts[all[k].img].size(); ++g) {
      if (gts[all[k].img].class_labels[g] != cls || used[all[k].img][g])
        continue;
      const double v =
          iou(dets[all[k].img].boxes[all[k].idx], gts[all[k].img].boxes[g]);
      if (v > best) {
        best = v;
        bg = static_cast<std::ptrdiff_t>(g);
      }
    }
    if (bg >= 0 && best >= thr) {
      ++tp;
      used[all[k].img][static_cast<std::size_t>(bg)] = true;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }
  double ap = 0;
  for (int r = 0; r <= 100; ++r) {
    double pmax = 0;
    for (std::size_t k = 0; k < prec.size(); ++k)
      if (rec[k] >= r / 100.0) pmax = std::max(pmax, prec[k]);
    ap += pmax / 101.0;
  }
  return ap;
}

void criterion_7() {
  std::vector<std::string> failures;
  Rng rng(707);

  // (a) IoU vs rasterization oracle, 1000 integer-coordinate pairs
  {
    double worst = 0;
    for (int t = 0; t < 1000; ++t) {
      const double x1 = static_cast<double>(rng.uniform_int(0, 40));
      const double y1 = static_cast<double>(rng.uniform_int(0, 40));
      const Box a{x1, y1, x1 + static_cast<double>(rng.uniform_int(1, 25)),
                  y1 + static_cast<double>(rng.uniform_int(1, 25))};
      const double x2 = static_cast<double>(rng.uniform_int(0, 40));
      const double y2 = static_cast<double>(rng.uniform_int(0, 40));
      const Box b{x2, y2, x2 + static_cast<double>(rng.uniform_int(1, 25)),
                  y2 + static_cast<double>(rng.uniform_int(1, 25))};
      worst = std::max(worst, std::abs(iou(a, b) - iou_raster_oracle(a, b)));
    }
    if (worst > kIoUOracleTol)
      failures.push_back("iou oracle err " + fmt(worst));
  }

  // (b) encode/decode round trip
  {
    double worst = 0;
    for (int t = 0; t < 1000; ++t) {
      const double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
      const Box p{x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)};
      const double gx = rng.uniform(0, 60), gy = rng.uniform(0, 60);
      const Box g{gx, gy, gx + rng.uniform(1, 30), gy + rng.uniform(1, 30)};
      const Delta4 d = encode_deltas(p, g);
      if (std::abs(d.dw) > kDeltaClamp || std::abs(d.dh) > kDeltaClamp) continue;
      const Box r = decode_deltas_unclipped(p, d);
      worst = std::max({worst, std::abs(r.x1 - g.x1), std::abs(r.y1 - g.y1),
                        std::abs(r.x2 - g.x2), std::abs(r.y2 - g.y2)});
    }
    if (worst > kRoundTripTol)
      failures.push_back("round-trip err " + fmt(worst));
  }

  // (c) detection_loss / mask_loss finite-difference gradients, 64-bit
  {
    GroundTruth gt;
    gt.boxes = {{10, 10, 30, 30}, {40, 40, 60, 60}};
    gt.class_labels = {1, 2};
    gt.masks.resize(2);
    LossConfig cfg;
    const std::size_t N = 8;
    Tensor<double> logits({N, 4}), deltas({N, 4});
    for (auto& v : logits.data) v = rng.normal();
    for (auto& v : deltas.data) v = rng.normal(0, 0.5);
    std::vector<Box> props;
    for (std::size_t i = 0; i < N; ++i) {
      const double x = rng.uniform(5, 45), y = rng.uniform(5, 45);
      props.push_back({x, y, x + rng.uniform(5, 25), y + rng.uniform(5, 25)});
    }
    const AssignmentResult a = assign_labels(props, gt, 0.2);
    Tensor<double> dc, dd;
    detection_loss(logits, deltas, props, a, gt, cfg, &dc, &dd);
    auto total = [&] {
      const DetectionLoss l = detection_loss(logits, deltas, props, a, gt, cfg);
      return l.cls + l.loc;
    };
    const double eps = 1e-6;
    double worst = 0;
    auto fd_check = [&](Tensor<double>& x, const Tensor<double>& g) {
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double lp = total();
        x[i] = orig - eps;
        const double lm = total();
        x[i] = orig;
        const double fd = (lp - lm) / (2 * eps);
        worst = std::max(worst,
                         std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
      }
    };
    fd_check(logits, dc);
    fd_check(deltas, dd);
    if (worst > kGradRelTol)
      failures.push_back("detection_loss grad rel err " + fmt(worst));

    Tensor<double> mlogits({2, 3, 6, 6});
    for (auto& v : mlogits.data) v = rng.normal();
    std::vector<MaskRaster> targets;
    for (int r = 0; r < 2; ++r) {
      MaskRaster m(36);
      for (auto& px : m) px = static_cast<std::uint8_t>(rng.uniform_int(0, 1));
      targets.push_back(m);
    }
    const std::vector<int> classes = {1, 3};
    Tensor<double> dml;
    mask_loss(mlogits, classes, targets, &dml);
    double mworst = 0;
    for (std::size_t i = 0; i < mlogits.size(); ++i) {
      const double orig = mlogits[i];
      mlogits[i] = orig + eps;
      const double lp = mask_loss(mlogits, classes, targets);
      mlogits[i] = orig - eps;
      const double lm = mask_loss(mlogits, classes, targets);
      mlogits[i] = orig;
      const double fd = (lp - lm) / (2 * eps);
      mworst = std::max(mworst,
                        std::abs(dml[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    if (mworst > kGradRelTol)
      failures.push_back("mask_loss grad rel err " + fmt(mworst));
  }

  // (d) compute_ap vs brute-force oracle, 100 random 5-image instances
  {
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<GroundTruth> gts;
      std::vector<DetectionResult> dets;
      for (int im = 0; im < 5; ++im) {
        GroundTruth gt;
        const int ng = static_cast<int>(rng.uniform_int(0, 4));
        for (int g = 0; g < ng; ++g) {
          const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
          gt.boxes.push_back(
              {x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)});
          gt.class_labels.push_back(static_cast<int>(rng.uniform_int(1, 2)));
          gt.masks.emplace_back();
        }
        DetectionResult det;
        const int nd = static_cast<int>(rng.uniform_int(0, 8));
        for (int d = 0; d < nd; ++d) {
          const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
          det.boxes.push_back(
              {x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30)});
          det.class_labels.push_back(static_cast<int>(rng.uniform_int(1, 2)));
          det.scores.push_back(rng.uniform());
          det.masks.emplace_back();
        }
        gts.push_back(gt);
        dets.push_back(det);
      }
      std::map<int, std::size_t> per_class;
      for (const auto& gt : gts)
        for (int c : gt.class_labels) ++per_class[c];
      if (per_class.empty()) continue;
      const std::vector<double> thresholds = coco_iou_thresholds();
      double expect = 0;
      for (double thr : thresholds) {
        double cs = 0;
        for (const auto& [cls, n] : per_class)
          cs += brute_force_ap_single(dets, gts, cls, thr);
        expect += cs / static_cast<double>(per_class.size());
      }
      expect /= static_cast<double>(thresholds.size());
      const APResult r = compute_ap(dets, gts, thresholds, ApTask::kBox);
      worst = std::max(worst, std::abs(r.ap - expect));
    }
    if (worst > kApOracleTol)
      failures.push_back("compute_ap oracle err " + fmt(worst));
  }

  // (e) AP50 = 0.5 on the 1-gt / 1-FP-above-TP case
  {
    GroundTruth gt;
    gt.boxes = {{10, 10, 30, 30}};
    gt.class_labels = {1};
    gt.masks.resize(1);
    DetectionResult det;
    det.boxes = {{50, 50, 60, 60}, {10, 10, 30, 30}};
    det.class_labels = {1, 1};
    det.scores = {0.9, 0.8};
    det.masks.resize(2);
    const APResult r = compute_ap({det}, {gt}, {0.5}, ApTask::kBox);
    if (std::abs(r.ap50 - 0.5) > 0.005)
      failures.push_back("AP50 case got " + fmt(r.ap50));
  }

  std::string detail = "iou/round-trip/gradients/ap oracles";
  for (const auto& f : failures) detail += "; " + f;
  report(7, "numerical oracles", failures.empty(), detail);
}

// ---------------------------------------------------------------------------
// Criterion 8: training determinism
// ---------------------------------------------------------------------------

void criterion_8() {
  // same code path as the full runs, at a scale where two runs are cheap
  RunConfig rc = variant_config(kInc3, 11);
  rc.optim.epochs = 2;
  TrainingSet small;
  small.spec = rc.scene;
  for (std::size_t i = 0; i < 24; ++i) {
    auto [img, gt] = generate_scene(rc.scene, i);
    small.indices.push_back(i);
    small.gts.push_back(std::move(gt));
    small.images.push_back(std::move(img));
  }
  auto run = [&] {
    R3Cnn<float> model(rc.model);
    Rng init_rng(Rng::mix(rc.seed, 0x696e6974ULL));
    model.init(init_rng);
    const TrainLog log = fit(small, rc.schedule, model, rc.optim, rc.loss,
                             rc.sampler, rc.rpn_train, rc.seed);
    std::ostringstream ss;
    ss.precision(17);
    write_train_log(ss, log);
    double final_loss =
        log.epochs.empty() ? 0.0 : log.epochs.back().mean_total;
    double wsum = 0;
    model.visit_params([&](const std::string&, Param<float>& p) {
      for (float w : p.value.data) wsum += static_cast<double>(w);
    });
    return std::make_tuple(ss.str(), final_loss, wsum);
  };
  const auto a = run();
  const auto b = run();
  const bool pass = a == b;
  report(8, "determinism", pass,
         pass ? "identical logs, final loss and weights over two runs"
              : "runs differ (final loss " + fmt(std::get<1>(a)) + " vs " +
                    fmt(std::get<1>(b)) + ")");
}

}  // namespace

int main() {
  fs::create_directories(artifact_dir());
  // fast, pure criteria first; training-backed criteria afterwards
  criterion_4();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_3();
  criterion_1();
  criterion_2();
  criterion_5();
  std::cout << (g_all_pass ? "ACCEPTANCE PASS" : "ACCEPTANCE FAIL") << "\n";
  return g_all_pass ? 0 : 1;
}
