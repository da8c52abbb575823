#include <doctest.h>

#include <cmath>
#include <random>

#include "fixtures.hpp"
#include "pcbmerge/task_vector.hpp"

using namespace pcbmerge;
using fixtures::error_of;
using fixtures::make_ckpt;
using fixtures::make_tv;

TEST_CASE("task vector is the element-wise difference") {
  const auto tv = compute_task_vector(make_ckpt({{"w", {3, 5}}}), make_ckpt({{"w", {1, 2}}}), "a");
  CHECK(tv.deltas.at("w") == std::vector<float>{2, 3});
  CHECK(tv.label == "a");
  CHECK(tv.numel() == 2);

  const auto zero = compute_task_vector(make_ckpt({{"w", {1, 2}}}), make_ckpt({{"w", {1, 2}}}), "z");
  CHECK(zero.deltas.at("w") == std::vector<float>{0, 0});
}

TEST_CASE("bf16 inputs are upconverted before subtraction") {
  Checkpoint ft, pre;
  ft.tensors.emplace("w", Tensor::from_f32_as(DType::BF16, {1}, std::vector<float>{1.5f}));
  pre.tensors.emplace("w", Tensor::from_f32_as(DType::BF16, {1}, std::vector<float>{0.5f}));
  CHECK(compute_task_vector(ft, pre, "b").deltas.at("w") == std::vector<float>{1.0f});
}

TEST_CASE("task vectors hold only mergeable tensors") {
  Checkpoint ft = make_ckpt({{"w", {1}}});
  Checkpoint pre = make_ckpt({{"w", {0}}});
  const std::vector<std::byte> ids(8);
  ft.tensors.emplace("ids", Tensor::from_bytes(DType::I64, {1}, ids));
  pre.tensors.emplace("ids", Tensor::from_bytes(DType::I64, {1}, ids));
  const auto tv = compute_task_vector(ft, pre, "t");
  CHECK(tv.deltas.size() == 1);
  CHECK(tv.schema->entries.size() == 2);
  CHECK(error_of([&] { compute_task_vector(make_ckpt({{"w", {1, 2}}}), make_ckpt({{"w", {0}}}), "t"); }) == ErrorCode::ShapeMismatch);
  CHECK(error_of([&] { compute_task_vector(make_ckpt({{"v", {1}}}), make_ckpt({{"w", {0}}}), "t"); }) == ErrorCode::MissingTensor);
}

TEST_CASE("apply_delta scales and adds") {
  CHECK(fixtures::values_of(apply_delta(make_ckpt({{"w", {0, 0}}}), make_tv({{"w", {1, 2}}}), 2.0f), "w") ==
        std::vector<float>{2, 4});
  CHECK(fixtures::values_of(apply_delta(make_ckpt({{"w", {1, 1}}}), make_tv({{"w", {2, -2}}}), 0.5f), "w") ==
        std::vector<float>{2, 0});
  const Checkpoint pre = make_ckpt({{"w", {0.1f, -7.25f}}});
  CHECK(apply_delta(pre, make_tv({{"w", {3, 4}}}), 0.0f).at("w") == pre.at("w"));
  CHECK(error_of([&] { apply_delta(pre, make_tv({{"w", {1}}}), 1.0f); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("apply_delta inverts compute_task_vector") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = fixtures::uniform_values(rng, 9, -3, 3);
    const auto b = fixtures::uniform_values(rng, 9, -3, 3);
    const Checkpoint ft = make_ckpt({{"w", a}});
    const Checkpoint pre = make_ckpt({{"w", b}});
    const auto back = fixtures::values_of(apply_delta(pre, compute_task_vector(ft, pre, "t"), 1.0f), "w");
    for (std::size_t d = 0; d < a.size(); ++d) CHECK(back[d] == doctest::Approx(a[d]).epsilon(1e-6));

    // half-precision outputs land within one rounding step of the fine-tuned value
    Checkpoint ft16, pre16;
    ft16.tensors.emplace("w", Tensor::from_f32_as(DType::F16, {9}, a));
    pre16.tensors.emplace("w", Tensor::from_f32_as(DType::F16, {9}, b));
    const Checkpoint out16 = apply_delta(pre16, compute_task_vector(ft16, pre16, "t"), 1.0f);
    CHECK(out16.at("w").dtype() == DType::F16);
    CHECK(out16.at("w") == ft16.at("w"));
  }
}

TEST_CASE("compute_task_vector is linear") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = fixtures::uniform_values(rng, 6, -2, 2);
    const auto y = fixtures::uniform_values(rng, 6, -2, 2);
    const auto p = fixtures::uniform_values(rng, 6, -2, 2);
    std::vector<float> sum(6), twice(6);
    for (int d = 0; d < 6; ++d) {
      sum[d] = x[d] + y[d];
      twice[d] = 2 * p[d];
    }
    const auto tx = compute_task_vector(make_ckpt({{"w", x}}), make_ckpt({{"w", p}}), "x").deltas.at("w");
    const auto ty = compute_task_vector(make_ckpt({{"w", y}}), make_ckpt({{"w", p}}), "y").deltas.at("w");
    const auto ts = compute_task_vector(make_ckpt({{"w", sum}}), make_ckpt({{"w", twice}}), "s").deltas.at("w");
    for (int d = 0; d < 6; ++d) CHECK(tx[d] + ty[d] == doctest::Approx(ts[d]).epsilon(1e-5));
  }
}

TEST_CASE("vector statistics") {
  auto s = vector_stats(make_tv({{"w", {3, 4}}}));
  CHECK(s.global.l2_norm == doctest::Approx(5.0));
  CHECK(s.global.max_abs == 4.0);
  CHECK(s.global.element_count == 2);

  s = vector_stats(make_tv({{"w", {0, 0, 1}}}));
  CHECK(s.global.fraction_zero == doctest::Approx(2.0 / 3.0));

  s = vector_stats(make_tv({{"a", {1}}, {"b", {2, 2}}}));
  CHECK(s.global.l2_norm == doctest::Approx(3.0));
  CHECK(s.per_tensor.at("b").l2_norm == doctest::Approx(std::sqrt(8.0)));
  CHECK(s.per_tensor.at("a").fraction_zero == 0.0);
}

TEST_CASE("cosine similarity") {
  CHECK(cosine_similarity(make_tv({{"w", {1, 0}}}), make_tv({{"w", {0, 1}}})) == doctest::Approx(0.0));
  CHECK(cosine_similarity(make_tv({{"w", {1, 2}}}), make_tv({{"w", {2, 4}}})) == doctest::Approx(1.0));
  CHECK(cosine_similarity(make_tv({{"w", {1, 1}}}), make_tv({{"w", {1, -1}}})) == doctest::Approx(0.0));
  CHECK(error_of([] { cosine_similarity(make_tv({{"w", {0, 0}}}), make_tv({{"w", {1, 1}}})); }) ==
        ErrorCode::ZeroVector);
  CHECK(error_of([] { cosine_similarity(make_tv({{"w", {1, 0}}}), make_tv({{"v", {1, 1}}})); }) ==
        ErrorCode::SchemaMismatch);

  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = fixtures::uniform_values(rng, 8, -1, 1);
    const auto b = fixtures::uniform_values(rng, 8, -1, 1);
    std::vector<float> b3(b);
    for (float& v : b3) v *= 3.0f;
    const float ab = cosine_similarity(make_tv({{"w", a}}), make_tv({{"w", b}}));
    CHECK(ab == doctest::Approx(cosine_similarity(make_tv({{"w", b}}), make_tv({{"w", a}}))));
    CHECK(ab == doctest::Approx(cosine_similarity(make_tv({{"w", a}}), make_tv({{"w", b3}}))).epsilon(1e-6));
    CHECK(ab >= -1.0f);
    CHECK(ab <= 1.0f);
  }
}
