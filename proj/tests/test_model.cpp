#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "r3cnn/metrics.hpp"
#include "r3cnn/model.hpp"

using namespace r3cnn;

TEST_CASE("backbone shape contract", "[model]") {
  ModelConfig cfg;
  Rng rng(31);
  Backbone<float> bb(cfg);
  bb.init(rng);
  Tensor<float> image({3, 128, 128});
  for (auto& v : image.data) v = static_cast<float>(rng.uniform(-0.5, 0.5));
  FeatureMap<float> f = bb.forward(image, nullptr);
  CHECK(f.stride == 8);
  CHECK(f.values.shape ==
        std::vector<std::size_t>({cfg.feat_channels(), 16, 16}));
  CHECK(f.values.all_finite());

  SECTION("wrong channel count is rejected with shapes in the message") {
    Tensor<float> bad({1, 128, 128});
    CHECK_THROWS_WITH(bb.forward(bad, nullptr),
                      Catch::Matchers::ContainsSubstring("1x128x128"));
  }
  SECTION("non-divisible extent is rejected") {
    Tensor<float> bad({3, 100, 128});
    CHECK_THROWS_WITH(bb.forward(bad, nullptr),
                      Catch::Matchers::ContainsSubstring("divisible"));
  }
}

TEST_CASE("anchor generation oracles", "[model]") {
  AnchorConfig cfg;
  const std::size_t H = 4, W = 5;
  const auto anchors = generate_anchors(cfg, H, W);
  const std::size_t A = cfg.anchors_per_cell();
  REQUIRE(A == 9);
  REQUIRE(anchors.size() == H * W * A);

  // location-major ordering and center placement
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t a = 0; a < A; ++a) {
        const Box& b = anchors[(i * W + j) * A + a];
        CHECK(b.cx() == Catch::Approx((j + 0.5) * cfg.stride));
        CHECK(b.cy() == Catch::Approx((i + 0.5) * cfg.stride));
      }
    }
  }
  // size/ratio sweep: area = s^2, height/width = ratio
  for (std::size_t s = 0; s < cfg.base_sizes.size(); ++s) {
    for (std::size_t r = 0; r < cfg.aspect_ratios.size(); ++r) {
      const Box& b = anchors[s * cfg.aspect_ratios.size() + r];
      CHECK(b.area() ==
            Catch::Approx(cfg.base_sizes[s] * cfg.base_sizes[s]));
      CHECK(b.height() / b.width() == Catch::Approx(cfg.aspect_ratios[r]));
    }
  }
  // spacing between adjacent cells equals the stride
  CHECK(anchors[A].cx() - anchors[0].cx() == Catch::Approx(cfg.stride));
  CHECK(anchors[W * A].cy() - anchors[0].cy() == Catch::Approx(cfg.stride));
}

TEST_CASE("rpn_propose behavior", "[model]") {
  AnchorConfig acfg;
  acfg.base_sizes = {16};
  acfg.aspect_ratios = {1.0};
  const auto anchors = generate_anchors(acfg, 4, 4);
  std::vector<Delta4> deltas(anchors.size());

  SECTION("output boxes lie inside the image") {
    std::vector<double> obj(anchors.size(), 0.0);
    for (std::size_t i = 0; i < obj.size(); ++i) obj[i] = 0.01 * i;
    const auto props = rpn_propose(obj, deltas, anchors, 32.0, 32.0, 100, 100, 0.7);
    for (const Box& b : props) {
      CHECK(b.x1 >= 0.0);
      CHECK(b.y1 >= 0.0);
      CHECK(b.x2 <= 32.0);
      CHECK(b.y2 <= 32.0);
    }
  }
  SECTION("k_post caps the count, keeping the best-scored") {
    std::vector<double> obj(anchors.size());
    for (std::size_t i = 0; i < obj.size(); ++i) obj[i] = 0.01 * i;
    const auto props = rpn_propose(obj, deltas, anchors, 32.0, 32.0, 100, 3, 0.99);
    CHECK(props.size() == 3);
    // best anchor is the last one (highest score); output is clipped
    CHECK(props[0].cx() == Catch::Approx(clip_box(anchors.back(), 32, 32).cx()));
  }
  SECTION("score ties resolve to the lower anchor index") {
    std::vector<double> obj(anchors.size(), 1.0);
    const auto props = rpn_propose(obj, deltas, anchors, 32.0, 32.0, 100, 1, 0.99);
    REQUIRE(props.size() == 1);
    CHECK(props[0].cx() == Catch::Approx(clip_box(anchors[0], 32, 32).cx()));
  }
  SECTION("boxes shrunk below one pixel are discarded") {
    std::vector<double> obj(anchors.size(), 1.0);
    std::vector<Delta4> shrink(anchors.size(), Delta4{0, 0, -10.0, -10.0});
    // dw clamp keeps exp(-kDeltaClamp)*16 = 0.256 < 1 px
    CHECK(rpn_propose(obj, shrink, anchors, 32.0, 32.0, 100, 100, 0.7).empty());
  }
  SECTION("length mismatch is an error") {
    std::vector<double> obj(3, 0.0);
    CHECK_THROWS_AS(rpn_propose(obj, deltas, anchors, 32.0, 32.0, 10, 10, 0.7),
                    std::invalid_argument);
  }
}

TEST_CASE("roi_align on a constant feature map is constant", "[model]") {
  FeatureMap<double> f;
  f.values = Tensor<double>({2, 8, 8});
  f.values.fill(3.5);
  f.stride = 4;
  const std::vector<Box> boxes = {{1.0, 2.0, 17.0, 30.0}, {0.0, 0.0, 32.0, 32.0}};
  Tensor<double> p = roi_align(f, boxes, 7);
  REQUIRE(p.shape == std::vector<std::size_t>({2, 2, 7, 7}));
  for (double v : p.data) CHECK(v == Catch::Approx(3.5));
}

TEST_CASE("roi_align cell-average oracle on integer-aligned samples",
          "[model]") {
  // stride-1 map; box [1,1,5,5] pooled 2x2 puts the 2x2 sample points exactly
  // on integer feature coordinates, so each cell is a plain 4-value average.
  FeatureMap<double> f;
  f.values = Tensor<double>({1, 8, 8});
  Rng rng(33);
  for (auto& v : f.values.data) v = rng.normal();
  f.stride = 1;
  auto at = [&](std::size_t y, std::size_t x) { return f.values[y * 8 + x]; };
  Tensor<double> p = roi_align(f, {Box{1, 1, 5, 5}}, 2);
  for (std::size_t oy = 0; oy < 2; ++oy) {
    for (std::size_t ox = 0; ox < 2; ++ox) {
      const std::size_t bx = 1 + 2 * ox, by = 1 + 2 * oy;
      const double expect = 0.25 * (at(by, bx) + at(by, bx + 1) +
                                    at(by + 1, bx) + at(by + 1, bx + 1));
      CHECK(p[oy * 2 + ox] == Catch::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("roi_align backward matches finite differences", "[model]") {
  Rng rng(34);
  FeatureMap<double> f;
  f.values = Tensor<double>({2, 6, 6});
  for (auto& v : f.values.data) v = rng.normal();
  f.stride = 4;
  const std::vector<Box> boxes = {{2.3, 1.7, 15.9, 20.2}, {0.0, 5.0, 24.0, 23.5}};
  Tensor<double> p = roi_align(f, boxes, 3);
  Tensor<double> dp(p.shape);
  for (auto& v : dp.data) v = rng.normal();
  Tensor<double> dfeat;
  roi_align_backward(f, boxes, 3, dp, dfeat);
  const double eps = 1e-6;
  for (std::size_t i = 0; i < f.values.size(); i += 3) {
    const double orig = f.values[i];
    f.values[i] = orig + eps;
    Tensor<double> pp = roi_align(f, boxes, 3);
    f.values[i] = orig - eps;
    Tensor<double> pm = roi_align(f, boxes, 3);
    f.values[i] = orig;
    double fd = 0;
    for (std::size_t k = 0; k < pp.size(); ++k)
      fd += dp[k] * (pp[k] - pm[k]) / (2 * eps);
    CHECK(std::abs(dfeat[i] - fd) <= 1e-7 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("detection and mask head output shapes", "[model]") {
  ModelConfig cfg;
  Rng rng(35);
  DetectionHead<float> det(cfg);
  det.init(rng);
  Tensor<float> pooled({5, cfg.feat_channels(), cfg.roi_size, cfg.roi_size});
  for (auto& v : pooled.data) v = static_cast<float>(rng.normal(0, 0.1));
  DetHeadOut<float> out = det.forward(pooled, nullptr);
  CHECK(out.cls_logits.shape ==
        std::vector<std::size_t>({5, cfg.num_classes + 1}));
  CHECK(out.deltas.shape == std::vector<std::size_t>({5, 4}));

  MaskHead<float> mask(cfg);
  mask.init(rng);
  Tensor<float> mp({2, cfg.feat_channels(), cfg.mask_roi_size, cfg.mask_roi_size});
  for (auto& v : mp.data) v = static_cast<float>(rng.normal(0, 0.1));
  Tensor<float> logits = mask.forward(mp, nullptr);
  CHECK(logits.shape == std::vector<std::size_t>(
                            {2, cfg.num_classes, cfg.mask_out_size,
                             cfg.mask_out_size}));
}

TEST_CASE("parameter census", "[model]") {
  ModelConfig one;
  one.num_heads = 1;
  ModelConfig three = one;
  three.num_heads = 3;
  const ParamCensus c1 = count_parameters(one);
  const ParamCensus c3 = count_parameters(three);

  SECTION("recursive model head count is invariant to loop count") {
    // loop count is a schedule property, not a model property: same config,
    // same census regardless of how many loops it is later run for
    const ParamCensus again = count_parameters(one);
    CHECK(again.total == c1.total);
    CHECK(again.per_module == c1.per_module);
  }
  SECTION("cascade heads cost exactly three times the recursive heads") {
    CHECK(c3.backbone == c1.backbone);
    CHECK(c3.rpn == c1.rpn);
    CHECK(c3.heads == 3 * c1.heads);
    CHECK(c3.total == c1.total + 2 * c1.heads);
  }
  SECTION("census is consistent with direct parameter iteration") {
    R3Cnn<float> model(one);
    std::size_t total = 0;
    for (Param<float>* p : model.parameters()) total += p->size();
    CHECK(total == c1.total);
  }
}

TEST_CASE("model checkpoint round trip and diagnostics", "[model]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "r3cnn_model_test";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ck").string();

  ModelConfig cfg;
  Rng rng(36);
  R3Cnn<float> a(cfg);
  a.init(rng);
  a.save(path);

  SECTION("round trip restores every parameter bit-exactly") {
    R3Cnn<float> b(cfg);
    Rng rng2(37);
    b.init(rng2);
    b.load(path);
    auto pa = a.parameters();
    auto pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(pa[i]->value.data == pb[i]->value.data);
  }
  SECTION("loading into a bigger model reports the missing key") {
    ModelConfig big = cfg;
    big.num_heads = 3;
    R3Cnn<float> b(big);
    CHECK_THROWS_WITH(b.load(path),
                      Catch::Matchers::ContainsSubstring("missing key"));
  }
  SECTION("shape mismatch names the offending key") {
    ModelConfig other = cfg;
    other.head_hidden = 128;
    R3Cnn<float> b(other);
    CHECK_THROWS_WITH(b.load(path),
                      Catch::Matchers::ContainsSubstring("shape mismatch"));
  }
  SECTION("extra keys in the archive are rejected") {
    ModelConfig big = cfg;
    big.num_heads = 3;
    R3Cnn<float> b(big);
    Rng rng3(38);
    b.init(rng3);
    const std::string bigpath = (dir / "big.ck").string();
    b.save(bigpath);
    CHECK_THROWS_WITH(a.load(bigpath),
                      Catch::Matchers::ContainsSubstring("unknown key"));
  }
  fs::remove_all(dir);
}
