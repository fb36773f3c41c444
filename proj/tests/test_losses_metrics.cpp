#include <catch2/catch_amalgamated.hpp>

#include "volmark/grad_check.hpp"
#include "volmark/losses.hpp"
#include "volmark/metrics.hpp"
#include "volmark/rng.hpp"

using namespace volmark;

using Td = Tensor<double>;

namespace {

Td random_tensor(Shape shape, SplitMix64& rng, double lo, double hi) {
  return Td(shape, uniform_vector<double>(rng, numel(shape), lo, hi));
}

}  // namespace

TEST_CASE("heatmap loss is zero at the perfect prediction") {
  SplitMix64 rng(110);
  Td t = random_tensor({4, 4, 4, 2}, rng, 0, 1);
  REQUIRE(heatmap_loss(t, t, {true, true}).item() == 0.0);
}

TEST_CASE("all-zero prediction against a one-hot target scores 1/V") {
  const std::size_t V = 4 * 4 * 4;
  std::vector<double> target(V, 0.0);
  target[13] = 1.0;
  Td pred = Td::zeros({4, 4, 4, 1});
  Td loss = heatmap_loss(pred, Td({4, 4, 4, 1}, target), {true});
  REQUIRE(loss.item() == Catch::Approx(1.0 / static_cast<double>(V)).epsilon(1e-12));
}

TEST_CASE("masked absent channels do not affect the heatmap loss") {
  SplitMix64 rng(111);
  Td target = random_tensor({4, 4, 4, 2}, rng, 0, 1);
  Td pred_a = random_tensor({4, 4, 4, 2}, rng, 0, 1);
  // corrupt channel 1 of the prediction with garbage
  std::vector<double> corrupted = pred_a.values();
  for (std::size_t v = 0; v < 4 * 4 * 4; ++v) corrupted[v * 2 + 1] = 123.0;
  Td pred_b({4, 4, 4, 2}, std::move(corrupted));
  const std::vector<bool> mask{true, false};
  REQUIRE(heatmap_loss(pred_a, target, mask).item() ==
          heatmap_loss(pred_b, target, mask).item());
}

TEST_CASE("heatmap loss rejects an all-absent mask") {
  Td t = Td::zeros({2, 2, 2, 1});
  REQUIRE_THROWS_AS(heatmap_loss(t, t, {false}), ShapeError);
}

TEST_CASE("offset loss ground truths") {
  // single positive anchor with error vector (1,0,0) -> 1.0
  Td mask(Shape{1, 1, 1, 1}, {1.0});
  Td pred(Shape{1, 1, 1, 3}, {1.0, 0.0, 0.0});
  Td truth = Td::zeros({1, 1, 1, 3});
  REQUIRE(offset_loss(pred, truth, mask).item() == Catch::Approx(1.0));

  // perfect offsets -> 0
  REQUIRE(offset_loss(truth, truth, mask).item() == 0.0);

  // positives with squared errors {1, 3} -> mean 2
  Td mask2(Shape{1, 1, 2, 1}, {1.0, 1.0});
  Td pred2(Shape{1, 1, 2, 3}, {1.0, 0.0, 0.0, 1.0, 1.0, 1.0});
  Td truth2 = Td::zeros({1, 1, 2, 3});
  REQUIRE(offset_loss(pred2, truth2, mask2).item() == Catch::Approx(2.0));
}

TEST_CASE("offset loss requires a positive anchor") {
  Td mask = Td::zeros({1, 1, 1, 1});
  Td z = Td::zeros({1, 1, 1, 3});
  REQUIRE_THROWS_AS(offset_loss(z, z, mask), ShapeError);
}

TEST_CASE("classification loss ground truths") {
  Td ones = Td::full({4}, 1.0);
  REQUIRE(cls_loss(ones, ones).item() < 1e-6);
  Td zeros = Td::zeros({4});
  REQUIRE(cls_loss(zeros, zeros).item() < 1e-6);

  Td half = Td::full({1}, 0.5);
  REQUIRE(cls_loss(half, Td::full({1}, 1.0)).item() == Catch::Approx(std::log(2.0)).epsilon(1e-9));

  // symmetry: loss(q, 1) == loss(1-q, 0)
  const double q = 0.73;
  REQUIRE(cls_loss(Td::full({1}, q), Td::full({1}, 1.0)).item() ==
          Catch::Approx(cls_loss(Td::full({1}, 1.0 - q), Td::zeros({1})).item()));
}

TEST_CASE("total loss dispatch by variant") {
  Td hm = Td::scalar(0.5), reg = Td::scalar(0.2), cls = Td::scalar(0.3);
  LossWeights w;
  REQUIRE(total_loss(hm, reg, cls, w, Variant::AnchorBased).item() == Catch::Approx(1.0));
  // anchor-free uses the heatmap term alone, whatever the weights say
  LossWeights crazy{17.0, 3.0, 0.1};
  REQUIRE(total_loss(hm, reg, cls, crazy, Variant::AnchorFree).item() == Catch::Approx(0.5));
  // linearity in each weight
  LossWeights w2{2.0, 1.0, 1.0};
  REQUIRE(total_loss(hm, reg, cls, w2, Variant::AnchorBased).item() ==
          Catch::Approx(1.0 + 0.2));
}

TEST_CASE("zero classification weight kills the classification gradient") {
  SplitMix64 rng(112);
  Tape<double> tape;
  Td p_hat = tape.watch(random_tensor({4}, rng, 0.2, 0.8));
  Td p_true(Shape{4}, {1.0, 0.0, 1.0, 0.0});
  Td reg = Td::scalar(0.0);
  LossWeights w;
  w.cls = 0.0;
  Td loss = total_loss(Td::scalar(0.1), reg, cls_loss(p_hat, p_true), w, Variant::AnchorBased);
  tape.backward(loss);
  for (double g : tape.grad(p_hat)) REQUIRE(g == 0.0);
}

TEST_CASE("loss gradients pass grad_check at 64-bit") {
  SplitMix64 rng(113);
  {
    Td target = random_tensor({3, 3, 3, 2}, rng, 0, 1);
    auto res = grad_check<double>(
        [&](const std::vector<Td>& in) {
          return heatmap_loss(in[0], target, {true, false});
        },
        {random_tensor({3, 3, 3, 2}, rng, 0, 1)}, 1e-6);
    REQUIRE(res.max_rel_error < 1e-6);
  }
  {
    Td mask(Shape{1, 1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    Td truth = random_tensor({1, 1, 2, 6}, rng, -1, 1);
    auto res = grad_check<double>(
        [&](const std::vector<Td>& in) { return offset_loss(in[0], truth, mask); },
        {random_tensor({1, 1, 2, 6}, rng, -1, 1)}, 1e-6);
    REQUIRE(res.max_rel_error < 1e-6);
  }
  {
    Td p_true(Shape{5}, {1.0, 0.0, 1.0, 0.0, 1.0});
    auto res = grad_check<double>(
        [&](const std::vector<Td>& in) { return cls_loss(in[0], p_true); },
        {random_tensor({5}, rng, 0.1, 0.9)}, 1e-7);
    REQUIRE(res.max_rel_error < 1e-6);
  }
}

TEST_CASE("MRE ground truths") {
  LandmarkSet gt;
  Landmark lm;
  lm.id = 0;
  lm.present = true;
  lm.x = 1;
  lm.y = 2;
  lm.z = 3;
  gt.landmarks.push_back(lm);

  LandmarkSet pred = gt;
  MreResult perfect = mre(pred, gt);
  REQUIRE(perfect.mean_mm == 0.0);
  REQUIRE(perfect.std_mm == 0.0);

  pred.landmarks[0].x = 2;  // voxel error (1, 2, 2)
  pred.landmarks[0].y = 4;
  pred.landmarks[0].z = 5;
  REQUIRE(mre(pred, gt).mean_mm == Catch::Approx(3.0));

  pred.spacing = gt.spacing = {0.5, 0.5, 0.5};
  REQUIRE(mre(pred, gt).mean_mm == Catch::Approx(1.5));
}

TEST_CASE("MRE requires a common present landmark") {
  LandmarkSet gt;
  Landmark lm;
  lm.id = 0;
  lm.present = false;
  gt.landmarks.push_back(lm);
  REQUIRE_THROWS_AS(mre(gt, gt), ShapeError);
}

TEST_CASE("SDR ground truths and the boundary rule") {
  auto pct = sdr({1.0, 3.0}, {2.0});
  REQUIRE(pct[0] == Catch::Approx(50.0));
  REQUIRE(sdr({0.0, 0.0, 0.0}, {2.0, 2.5, 3.0, 4.0}) ==
          std::vector<double>{100.0, 100.0, 100.0, 100.0});
  REQUIRE(sdr({2.0}, {2.0})[0] == Catch::Approx(100.0));  // boundary counts as a hit
}

TEST_CASE("SDR is monotone in the threshold") {
  SplitMix64 rng(114);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> errors = uniform_vector<double>(rng, 20, 0.0, 6.0);
    auto pct = sdr(errors, {1.0, 2.0, 2.5, 3.0, 4.0});
    for (std::size_t i = 1; i < pct.size(); ++i) REQUIRE(pct[i] >= pct[i - 1]);
  }
}

TEST_CASE("eval report aggregates presence agreement and serializes") {
  LandmarkSet gt;
  for (std::size_t i = 0; i < 2; ++i) {
    Landmark lm;
    lm.id = i;
    lm.present = i == 0;
    lm.x = 4;
    lm.y = 4;
    lm.z = 4;
    gt.landmarks.push_back(lm);
  }
  LandmarkSet pred = gt;
  pred.landmarks[0].x = 5;  // 1 mm error
  EvalReport report;
  report.add_case(pred, gt, "vol0");
  report.finalize();
  REQUIRE(report.both_present == 1);
  REQUIRE(report.both_absent == 1);
  REQUIRE(report.presence_mismatch == 0);
  REQUIRE(report.presence_agreement_pct() == 100.0);
  REQUIRE(report.mre_mm == Catch::Approx(1.0));
  REQUIRE(report.sdr_pct[0] == 100.0);
  REQUIRE_THAT(report.to_table(), Catch::Matchers::ContainsSubstring("MRE"));
  REQUIRE_THAT(report.to_records(), Catch::Matchers::ContainsSubstring("vol0,0,1.000000,1,1,1,1"));
}
