#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "sp3d/error.hpp"
#include "sp3d/grouping.hpp"
#include "grouping_oracles.hpp"
#include "support.hpp"

using namespace sp3d;

namespace {

using oracle::brute_scale;
using oracle::StripFixture;

struct FitFixture {
  ToyObject toy;
  SampledCloud cloud;
  ViewSet views;
  std::vector<MaskImage> images;
  FieldInputs inputs;
};

FitFixture fit_fixture(const FieldConfig& field) {
  FitFixture f;
  f.toy = make_toy_object(toy_spec("snowman"), 3);
  f.cloud = sample_surface(f.toy.mesh, 600, 3);
  f.views = render_views(f.toy.mesh, f.cloud, make_cameras(6, 4, 4, 64));
  auto fine = synthesize_views(f.toy, f.views, Granularity::Fine, {8, 0.0, 1});
  auto coarse = synthesize_views(f.toy, f.views, Granularity::Coarse, {8, 0.0, 1});
  std::vector<std::vector<MaskMap>> masks;
  for (std::size_t k = 0; k < f.views.size(); ++k) masks.push_back({fine[k].masks, coarse[k].masks});
  f.images = prepare_mask_images(f.views, masks, f.cloud);
  // one-hot part codes stand in for a backbone
  Matrix backbone = Matrix::Zero(static_cast<Eigen::Index>(f.cloud.size()), 4);
  for (std::size_t i = 0; i < f.cloud.size(); ++i)
    backbone(static_cast<Eigen::Index>(i), f.toy.fine_of_face[f.cloud.face_of[i]]) = 1.0;
  f.inputs = field_inputs(backbone, f.cloud, field);
  return f;
}

FieldConfig small_field() {
  FieldConfig c;
  c.feature_dim = 8;
  c.head_hidden = 24;
  c.head_layers = 3;
  c.skip_hidden = 24;
  c.skip_layers = 2;
  c.position_encoding = {3, true};
  return c;
}

}  // namespace

TEST_SUITE("grouping") {

TEST_CASE("mask_scale examples") {
  SUBCASE("single point") {
    StripFixture s({{0.3, -0.2, 0.9}});
    std::vector<std::uint32_t> px = {0};
    CHECK(mask_scale(px, s.render, s.cloud) == 0.0);
  }
  SUBCASE("two points one unit apart") {
    StripFixture s({{0, 0, 0}, {1, 0, 0}});
    std::vector<std::uint32_t> px = {0, 1};
    CHECK(mask_scale(px, s.render, s.cloud, 10.0) == doctest::Approx(5.0).epsilon(1e-12));
  }
  SUBCASE("equal spread on every axis") {
    std::vector<Vec3> corners;
    for (int i = 0; i < 8; ++i) corners.push_back({i & 1 ? 0.1 : -0.1, i & 2 ? 0.1 : -0.1, i & 4 ? 0.1 : -0.1});
    StripFixture s(corners);
    std::vector<std::uint32_t> px = {0, 1, 2, 3, 4, 5, 6, 7};
    CHECK(mask_scale(px, s.render, s.cloud, 10.0) == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
  }
  SUBCASE("repeated pixels of one point count once") {
    StripFixture s({{0, 0, 0}, {1, 0, 0}});
    s.render.width = 3;
    s.render.point_of_pixel.push_back(1);
    std::vector<std::uint32_t> px = {0, 1, 2};
    CHECK(mask_scale(px, s.render, s.cloud, 10.0) == doctest::Approx(5.0));
  }
  SUBCASE("no covered point") {
    StripFixture s({{0, 0, 0}});
    s.render.point_of_pixel[0] = -1;
    std::vector<std::uint32_t> px = {0};
    CHECK_THROWS_AS(mask_scale(px, s.render, s.cloud), InvalidArgument);
    std::vector<std::uint32_t> out_of_range = {4};
    CHECK_THROWS_AS(mask_scale(out_of_range, s.render, s.cloud), InvalidArgument);
  }
}

TEST_CASE("mask_scale matches brute force on rendered masks") {
  auto toy = make_toy_object(toy_spec("table"), 5);
  auto cloud = sample_surface(toy.mesh, 2000, 5);
  auto views = render_views(toy.mesh, cloud, make_cameras(6, 10, 6, 64));
  std::mt19937_64 rng(8);
  int tested = 0;
  while (tested < 100) {
    const auto& r = views.renders[rng() % views.size()];
    // random rectangle
    int x0 = static_cast<int>(rng() % 64), y0 = static_cast<int>(rng() % 64);
    int x1 = std::min(64, x0 + 1 + static_cast<int>(rng() % 30)), y1 = std::min(64, y0 + 1 + static_cast<int>(rng() % 30));
    std::vector<std::uint32_t> px;
    std::set<std::uint32_t> pts;
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        px.push_back(static_cast<std::uint32_t>(y * 64 + x));
        if (auto p = r.point_at(x, y); p >= 0) pts.insert(static_cast<std::uint32_t>(p));
      }
    if (pts.empty()) continue;
    CHECK(std::abs(mask_scale(px, r, cloud) - brute_scale(pts, cloud, 10.0)) < 1e-6);
    ++tested;
  }
}

TEST_CASE("prepare_mask_image") {
  StripFixture s({{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}, {4, 0, 0}, {5, 0, 0}, {6, 0, 0}});
  s.render.point_of_pixel[6] = -1;
  MaskMap m(7, 1);
  m.ids = {1, 1, 1, 2, 2, 0, 1};
  m.recount();
  SUBCASE("small masks are dropped") {
    auto img = prepare_mask_image(0, s.render, m, s.cloud, {10.0, 3});
    REQUIRE(img.masks.size() == 1);
    CHECK(img.masks[0].id == 1);
    CHECK(img.masks[0].points == std::vector<std::uint32_t>{0, 1, 2});
    CHECK(img.valid_points == std::vector<std::uint32_t>{0, 1, 2});
    CHECK(img.masks[0].scale == doctest::Approx(10.0 * std::sqrt(2.0 / 3.0)));
  }
  SUBCASE("both kept") {
    auto img = prepare_mask_image(0, s.render, m, s.cloud, {10.0, 2});
    CHECK(img.masks.size() == 2);
    CHECK(img.valid_points.size() == 5);
  }
  SUBCASE("resolution mismatch") { CHECK_THROWS_AS(prepare_mask_image(0, s.render, MaskMap(6, 1), s.cloud), InvalidArgument); }
}

TEST_CASE("contrastive_loss") {
  std::vector<double> a = {0.1, 0.2}, b = {0.1, 0.2};
  CHECK(contrastive_loss(a, b, true, 1.0) == 0.0);
  std::vector<double> c = {0.4, 0.2};  // distance 0.3
  CHECK(contrastive_loss(a, c, false, 1.0) == doctest::Approx(0.7));
  std::vector<double> d = {1.6, 0.2};  // distance 1.5
  CHECK(contrastive_loss(a, d, false, 1.0) == 0.0);
  std::vector<double> e = {1.0};
  CHECK_THROWS_AS(contrastive_loss(a, e, true, 1.0), InvalidArgument);

  SUBCASE("direct formula, symmetry and sign on random pairs") {
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g(0.0, 0.5);
    for (int t = 0; t < 1000; ++t) {
      std::vector<double> x(8), y(8);
      for (auto& v : x) v = g(rng);
      for (auto& v : y) v = g(rng);
      bool same = rng() & 1;
      double expect = oracle::pair_loss(x, y, same, 1.0);
      double l = contrastive_loss(x, y, same, 1.0);
      CHECK(l == expect);
      CHECK(l == contrastive_loss(y, x, same, 1.0));
      CHECK(l >= 0.0);
    }
  }
}

TEST_CASE("sample_pairs") {
  auto toy = make_toy_object(toy_spec("table"), 1);
  auto cloud = sample_surface(toy.mesh, 3000, 1);
  auto views = render_views(toy.mesh, cloud, make_cameras(6, 0, 1, 64));
  auto fine = synthesize_views(toy, views, Granularity::Fine, {4, 0.0, 1});
  auto img = prepare_mask_image(0, views.renders[0], fine[0].masks, cloud);  // side view: top and legs
  REQUIRE(img.masks.size() >= 2);

  SUBCASE("one mask only gives positives") {
    MaskMap single = fine[0].masks;
    for (auto& id : single.ids) id = id ? 1 : 0;
    single.recount();
    auto one = prepare_mask_image(0, views.renders[0], single, cloud);
    std::mt19937_64 rng(1);
    for (const auto& p : sample_pairs({one}, {4, 256}, rng)) {
      CHECK(p.same_mask);
      CHECK(p.scale == one.masks[0].scale);
    }
  }
  SUBCASE("pair count and supervision scale") {
    std::mt19937_64 rng(2);
    auto pairs = sample_pairs({img}, {3, 256}, rng);
    CHECK(pairs.size() == 3 * 128);
    std::map<std::uint32_t, std::size_t> mask_of_point;
    for (std::size_t m = 0; m < img.masks.size(); ++m)
      for (auto p : img.masks[m].points) mask_of_point[p] = m;
    for (const auto& p : pairs) {
      CHECK(p.same_mask == (mask_of_point.at(p.i) == mask_of_point.at(p.j)));
      CHECK(p.scale == img.masks[mask_of_point.at(p.i)].scale);
    }
  }
  SUBCASE("positive share matches the pixel shares") {
    double expect = 0.0;
    for (std::size_t m = 0; m < img.masks.size(); ++m) {
      double share = static_cast<double>(std::count(img.valid_mask.begin(), img.valid_mask.end(), m)) /
                     static_cast<double>(img.valid_mask.size());
      expect += share * share;
    }
    std::mt19937_64 rng(3);
    auto pairs = sample_pairs({img}, {79, 256}, rng);  // 10112 pairs
    double pos = 0.0;
    for (const auto& p : pairs) pos += p.same_mask;
    CHECK(std::abs(pos / static_cast<double>(pairs.size()) - expect) < 0.05 * expect);
  }
  SUBCASE("deterministic per seed") {
    std::mt19937_64 r1(7), r2(7);
    auto a = sample_pairs({img}, {5, 64}, r1), b = sample_pairs({img}, {5, 64}, r2);
    REQUIRE(a.size() == b.size());
    for (std::size_t t = 0; t < a.size(); ++t) CHECK((a[t].i == b[t].i && a[t].j == b[t].j));
  }
  SUBCASE("errors") {
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(sample_pairs({}, {}, rng), InvalidArgument);
    CHECK_THROWS_AS(sample_pairs({img}, {1, 1}, rng), InvalidArgument);
  }
  SUBCASE("views without usable pixels are skipped") {
    std::vector<std::size_t> skipped;
    std::vector<std::vector<MaskMap>> masks;
    for (std::size_t k = 0; k < views.size(); ++k) masks.push_back({k == 4 ? MaskMap(64, 64) : fine[k].masks});
    auto images = prepare_mask_images(views, masks, cloud, {}, &skipped);
    CHECK(images.size() == 5);
    CHECK(skipped == std::vector<std::size_t>{4});
  }
}

TEST_CASE("grouping features") {
  auto cfg = small_field();
  auto f = fit_fixture(cfg);
  auto field = field_init(cfg, 4, 1);

  SUBCASE("zeroed output layers give a zero feature") {
    auto z = field;
    z.head.weights.back().setZero();
    z.head.biases.back().setZero();
    z.skip.weights.back().setZero();
    z.skip.biases.back().setZero();
    for (double s : {0.0, 0.7, 3.0}) CHECK(grouping_features(z, f.inputs, s).isZero());
  }
  SUBCASE("batch equals per point") {
    Matrix all = grouping_features(field, f.inputs, 1.25);
    for (std::uint32_t p : {0u, 5u, 599u}) {
      auto one = grouping_feature(field, f.inputs, p, 1.25);
      for (int k = 0; k < cfg.feature_dim; ++k) CHECK(one[static_cast<std::size_t>(k)] == all(p, k));
    }
    std::vector<std::uint32_t> pts = {3, 3, 9};
    std::vector<double> scales = {0.5, 2.0, 0.5};
    Matrix mixed = grouping_features(field, f.inputs, pts, scales);
    CHECK(Matrix(mixed.row(0)) == Matrix(grouping_features(field, f.inputs, 0.5).row(3)));
    CHECK(Matrix(mixed.row(1)) == Matrix(grouping_features(field, f.inputs, 2.0).row(3)));
  }
  SUBCASE("skip branch is additive") {
    auto no_skip = field;
    no_skip.skip.weights.back().setZero();
    no_skip.skip.biases.back().setZero();
    auto head_only = cfg;
    head_only.use_skip = false;
    auto bare = field_init(head_only, 4, 1);
    CHECK(bare.skip.weights.empty());
    bare.head = field.head;
    CHECK(grouping_features(bare, f.inputs, 0.8) == grouping_features(no_skip, f.inputs, 0.8));
  }
  SUBCASE("scale encoding") {
    std::vector<double> enc(static_cast<std::size_t>(field.scale_dim()));
    encode_scale(0.0, cfg.scale_frequencies, enc);
    CHECK(enc[0] == 0.0);
    CHECK(enc[1] == 0.0);
    CHECK(enc[2] == 1.0);
    encode_scale(1.5, cfg.scale_frequencies, enc);
    CHECK(enc[0] == 1.5);
    CHECK(enc.size() == 9);
  }
  SUBCASE("negative scale") {
    CHECK_THROWS_AS(grouping_features(field, f.inputs, -0.1), InvalidArgument);
    CHECK_THROWS_AS(grouping_feature(field, f.inputs, 0, -1.0), InvalidArgument);
  }
}

TEST_CASE("fit") {
  auto cfg = small_field();
  auto f = fit_fixture(cfg);
  FitConfig fc;
  fc.iterations = 150;
  fc.sampling = {6, 64};
  fc.lr = 3e-3;
  fc.seed = 9;
  fc.field = cfg;
  auto a = fit(f.inputs, f.images, fc);
  REQUIRE(a.curve.size() == 150);
  CHECK(a.final_loss(25) < 0.5 * a.curve.front().loss);

  SUBCASE("conditioning is live after fitting") {
    auto lo = grouping_feature(a.field, f.inputs, 10, 0.2), hi = grouping_feature(a.field, f.inputs, 10, 3.0);
    CHECK(lo != hi);
  }
  SUBCASE("same seed gives a bit identical checkpoint") {
    testing::TempDir tmp;
    auto b = fit(f.inputs, f.images, fc);
    save_field(tmp / "a.ckpt", a.field);
    save_field(tmp / "b.ckpt", b.field);
    auto bytes = [](const std::filesystem::path& p) {
      std::ifstream in(p, std::ios::binary);
      return std::string((std::istreambuf_iterator<char>(in)), {});
    };
    CHECK(bytes(tmp / "a.ckpt") == bytes(tmp / "b.ckpt"));
    auto back = load_field(tmp / "a.ckpt");
    CHECK(back.config.feature_dim == cfg.feature_dim);
    CHECK(back.config.margin == cfg.margin);
    CHECK(grouping_features(back, f.inputs, 1.0) == grouping_features(a.field, f.inputs, 1.0));
  }
  SUBCASE("fine tuning continues from the given field") {
    auto more = fc;
    more.iterations = 20;
    auto t = fine_tune(a.field, f.inputs, f.images, more);
    CHECK(t.curve.front().loss < a.curve.front().loss);
  }
  SUBCASE("inputs are left alone") {
    Matrix before = f.inputs.backbone;
    fit(f.inputs, f.images, fc);
    CHECK(f.inputs.backbone == before);
  }
  SUBCASE("negative iterations") {
    auto bad = fc;
    bad.iterations = -1;
    CHECK_THROWS_AS(fit(f.inputs, f.images, bad), InvalidArgument);
  }
}

}  // TEST_SUITE
