#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "fusecad/gradcam/gradcam.hpp"
#include "fusecad/rng.hpp"
#include "fusecad/serialize.hpp"
#include "test_util.hpp"

using namespace fusecad;
using namespace fusecad::gradcam;
namespace gc = fusecad::gradcam;
using fusecad::testing::read_file;
using fusecad::testing::TempDir;
using nn::LayerKind;
using nn::LayerSpec;

namespace {

// [2, 3, 3] -> 1x1 conv (4) -> GAP -> dense(2) -> softmax
nn::ModelGraph one_layer(std::uint64_t seed) {
  return nn::ModelGraph({2, 3, 3},
                        {LayerSpec::conv(4, 1, 1, 0), LayerSpec::simple(LayerKind::global_avg_pool), LayerSpec::dense(2),
                         LayerSpec::simple(LayerKind::softmax)},
                        seed);
}

ad::Tensor random_input(ad::Shape shape, std::uint64_t seed) {
  Rng rng(seed);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), false);
  for (double& v : t.data()) v = uniform(rng, -1.0, 1.0);
  return t;
}

void randomize_biases(nn::ModelGraph& model, std::uint64_t seed) {
  Rng rng(seed);
  for (auto* p : model.parameters())
    if (p->value->rank() == 1)
      for (double& v : p->value->data()) v = 0.3 * normal(rng);
}

}  // namespace

TEST_CASE("one-layer Grad-CAM matches the closed form") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto model = one_layer(seed);
    randomize_biases(model, seed);
    const auto x = random_input({2, 3, 3}, seed + 10);
    const auto state = model.state();  // conv.w [4,2,1,1], conv.b [4], dense.w [4,2], dense.b [2]
    const auto& cw = state[0].tensor.values();
    const auto& cb = state[1].tensor.values();
    const auto& dw = state[2].tensor.values();
    for (int target : {0, 1}) {
      // d logit_t / d A_c(i, j) = dw[c, t] / 9, so alpha_c = dw[c, t] / 9
      std::vector<double> expected(9, 0.0);
      for (std::size_t c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 9; ++i) {
          const double a = cw[c * 2] * x.values()[i] + cw[c * 2 + 1] * x.values()[9 + i] + cb[c];
          expected[i] += dw[c * 2 + static_cast<std::size_t>(target)] / 9.0 * a;
        }
      double peak = 0.0;
      for (double& v : expected) peak = std::max(peak, v = std::max(v, 0.0));
      const auto r = gc::gradcam(model, x, target, 0u);
      CHECK(r.target_class == target);
      for (std::size_t i = 0; i < 9; ++i) {
        CHECK(std::abs(r.raw[i] - expected[i]) < 1e-9);
        const double norm = peak > 0.0 ? expected[i] / peak : 0.0;
        CHECK(std::abs(r.heatmap.values[i] - norm) < 1e-9);
      }
    }
  }
}

TEST_CASE("Grad-CAM does not touch the model's gradient buffers") {
  auto model = one_layer(2);
  gc::gradcam(model, random_input({2, 3, 3}, 1), 1, 0u);
  for (const auto* p : model.parameters()) CHECK_FALSE(p->value->has_grad());
}

TEST_CASE("a zero target gradient gives an all-zero heatmap") {
  auto model = one_layer(3);
  auto state = model.state();
  std::fill(state[2].tensor.data().begin(), state[2].tensor.data().end(), 0.0);
  model.load_state(state);
  const auto r = gc::gradcam(model, random_input({2, 3, 3}, 4), 1, 0u);
  for (double v : r.heatmap.values) CHECK(v == 0.0);
}

TEST_CASE("heatmaps are in [0, 1] at input size and peak at exactly 1") {
  kdl::StudentSpec spec;
  spec.resolution = 32;
  auto model = kdl::build_unaided(spec, 5);
  randomize_biases(model.student(), 6);
  const auto x = random_input({3, 32, 32}, 7);
  const auto r = gc::gradcam(model, x);
  CHECK(r.heatmap.width == 32);
  CHECK(r.heatmap.height == 32);
  CHECK(r.unit == default_layer(model.student()));
  CHECK(model.student().units()[r.unit].layer == 4);  // second dense block
  const double lo = *std::min_element(r.heatmap.values.begin(), r.heatmap.values.end());
  const double hi = *std::max_element(r.heatmap.values.begin(), r.heatmap.values.end());
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);
  const bool positive = std::any_of(r.raw.begin(), r.raw.end(), [](double v) { return v > 0.0; });
  CHECK(hi == (positive ? 1.0 : 0.0));
  CHECK_THROWS_AS(gc::gradcam(model.student(), x, 0, model.student().parameterized_layers() - 1),
                  std::invalid_argument);
}

TEST_CASE("scaling the downstream dense weights leaves the normalized map unchanged") {
  nn::ModelGraph model({3, 8, 8},
                       {LayerSpec::conv(6), LayerSpec::simple(LayerKind::relu), LayerSpec::conv(6),
                        LayerSpec::simple(LayerKind::relu), LayerSpec::simple(LayerKind::global_avg_pool),
                        LayerSpec::dense(2), LayerSpec::simple(LayerKind::softmax)},
                       4);
  randomize_biases(model, 2);
  const auto x = random_input({3, 8, 8}, 3);
  const auto base = gc::gradcam(model, x, 1, 1u);
  auto state = model.state();
  for (double& v : state[4].tensor.data()) v *= 3.5;
  model.load_state(state);
  const auto scaled = gc::gradcam(model, x, 1, 1u);
  for (std::size_t i = 0; i < base.heatmap.values.size(); ++i)
    CHECK(std::abs(base.heatmap.values[i] - scaled.heatmap.values[i]) < 1e-12);
}

TEST_CASE("KDL Grad-CAM explains the student and ignores the cue path") {
  kdl::StudentSpec spec;
  spec.resolution = 16;
  spec.block_layers = 2;
  spec.growth = 4;
  auto model = kdl::build_kdl_external_cue(spec, 8);
  randomize_biases(model.student(), 1);
  const auto x = random_input({3, 16, 16}, 2);
  const auto a = gc::gradcam(model, x, 1, std::nullopt, {0.9, 0.1});
  CHECK(a.heatmap.width == 16);
  CHECK_THROWS_AS(gc::gradcam(model, x, 1, std::nullopt, {}), std::logic_error);
}

TEST_CASE("bilinear resize and max normalization") {
  Heatmap m{2, 1, {0.0, 1.0}};
  const auto up = resize_bilinear(m, 4, 1);
  CHECK(up.values == std::vector<double>{0.0, 0.25, 0.75, 1.0});
  Heatmap same{3, 2, {1, 2, 3, 4, 5, 6}};
  CHECK(resize_bilinear(same, 3, 2).values == same.values);
  Heatmap zero{2, 2, {0, 0, 0, 0}};
  normalize_max(zero);
  CHECK(zero.values == std::vector<double>(4, 0.0));
  Heatmap h{2, 1, {2.0, 4.0}};
  normalize_max(h);
  CHECK(h.values == std::vector<double>{0.5, 1.0});
}

TEST_CASE("overlay blending") {
  GrayImage img(8, 8);
  for (std::size_t i = 0; i < 64; ++i) img.at(i % 8, i / 8) = static_cast<std::uint8_t>(i * 4);
  Heatmap map{8, 8, std::vector<double>(64, 0.0)};
  for (std::size_t i = 0; i < 64; ++i) map.values[i] = static_cast<double>(i) / 63.0;

  const auto identity = overlay(img, map, 0.0);
  for (std::size_t i = 0; i < 64; ++i) {
    const auto g = img.pixels()[i];
    CHECK(identity.pixels[i] == Rgb{g, g, g});
  }
  const auto blue = overlay(img, Heatmap{8, 8, std::vector<double>(64, 0.0)}, 1.0);
  for (const auto& p : blue.pixels) CHECK(p == Rgb{0, 0, 255});

  const auto half = overlay(img, map, 0.5);
  // pixel 0: gray 0, value 0 -> (0, 0, 127.5 -> 128)
  CHECK(half.pixels[0] == Rgb{0, 0, 128});
  // pixel 63: gray 252, value 1 -> ((252 + 255) / 2, 126, 126)
  CHECK(half.pixels[63] == Rgb{254, 126, 126});
  // pixel 21: gray 84, value 1/3 -> colour (85, 0, 170)
  CHECK(half.pixels[21] == Rgb{85, 42, 127});
  CHECK_THROWS_AS(overlay(img, Heatmap{4, 4, std::vector<double>(16, 0.0)}, 0.5), std::invalid_argument);
}

TEST_CASE("overlay and heatmap files") {
  TempDir dir("gradcam_files");
  GrayImage img(8, 8, 100);
  Heatmap map{8, 8, std::vector<double>(64, 0.5)};
  write_overlay(dir / "o.ppm", img, map, 0.5);
  CHECK(read_file(dir / "o.ppm").rfind("P6", 0) == 0);
  const auto back = read_ppm(dir / "o.ppm");
  CHECK(back.width == 8);
  write_heatmap(dir / "h.fct", map);
  const auto t = ad::load_fct(dir / "h.fct");
  REQUIRE(t.size() == 1);
  CHECK(t[0].tensor.shape() == ad::Shape{8, 8});
  CHECK(t[0].tensor.values() == map.values);
}
