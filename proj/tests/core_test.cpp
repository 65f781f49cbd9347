// Copyright 2026 The ctxdetox Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "ctxdetox/core/adamw.hpp"
#include "ctxdetox/core/common.hpp"
#include "ctxdetox/core/container.hpp"
#include "ctxdetox/core/parallel.hpp"
#include "ctxdetox/core/tensor.hpp"

namespace ctxdetox {
namespace {

namespace fs = std::filesystem;

TEST(Fnv1a64, PublishedVectors) {
  Fnv1a64 empty;
  EXPECT_EQ(empty.digest(), 0xcbf29ce484222325ULL);
  Fnv1a64 a;
  a.update(std::string_view("a"));
  EXPECT_EQ(a.digest(), 0xaf63dc4c8601ec8cULL);
  Fnv1a64 foobar;
  foobar.update(std::string_view("foobar"));
  EXPECT_EQ(foobar.digest(), 0x85944171f73967e8ULL);
  EXPECT_EQ(hex64(0xaf63dc4c8601ec8cULL), "af63dc4c8601ec8c");
}

TEST(DeriveSeed, DistinctKeysGiveDistinctSeeds) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t a = 0; a < 4; ++a)
    for (std::uint64_t b = 0; b < 50; ++b)
      for (std::uint64_t c = 0; c < 10; ++c) seen.insert(derive_seed(a, b, c));
  EXPECT_EQ(seen.size(), 2000u);
  EXPECT_EQ(derive_seed(42, 7, 3), derive_seed(42, 7, 3));
}

TEST(FmtReal, RoundTripsShortest) {
  EXPECT_EQ(fmt_real(0.1), "0.1");
  EXPECT_EQ(fmt_real(1.283), "1.283");
  const double x = 1.0 / 3.0;
  EXPECT_EQ(std::strtod(fmt_real(x).c_str(), nullptr), x);
  EXPECT_EQ(fmt_fixed(0.12345, 3), "0.123");
}

TEST(Require, MessageConcatenatesArguments) {
  try {
    require(false, "value ", 3, " out of range");
    FAIL();
  } catch (const Error& e) {
    EXPECT_STREQ(e.what(), "value 3 out of range");
  }
  EXPECT_NO_THROW(require(true, "unused"));
}

TEST(Matmul, MatchesNaiveProduct) {
  std::mt19937_64 rng(1);
  Matrix<double> a(5, 7), b(7, 3);
  fill_normal(a.flat(), rng, 1.0);
  fill_normal(b.flat(), rng, 1.0);
  const auto c = matmul(a, b);
  ASSERT_EQ(c.rows(), 5u);
  ASSERT_EQ(c.cols(), 3u);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 7; ++k) s += a(i, k) * b(k, j);
      EXPECT_NEAR(c(i, j), s, 1e-12);
    }
}

TEST(Matmul, HandProduct) {
  Matrix<double> h(1, 2), w(2, 3);
  h(0, 0) = 1;
  h(0, 1) = 2;
  w(0, 0) = 1;
  w(0, 2) = 1;
  w(1, 1) = 1;
  w(1, 2) = 1;
  const auto p = matmul(h, w);
  EXPECT_EQ(p(0, 0), 1);
  EXPECT_EQ(p(0, 1), 2);
  EXPECT_EQ(p(0, 2), 3);
}

TEST(Softmax, NormalizesAndIsShiftInvariant) {
  std::vector<double> x = {1.0, 2.0, 3.0, 1000.0};
  std::vector<double> y = {-999.0, -998.0, -997.0, 0.0};
  kernels::softmax_inplace(x.data(), x.size());
  kernels::softmax_inplace(y.data(), y.size());
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(x[i], y[i], 1e-15);
    s += x[i];
  }
  EXPECT_NEAR(s, 1.0, 1e-15);
  const std::vector<double> z = {0.0, 0.0};
  EXPECT_NEAR(kernels::log_sum_exp(z.data(), 2), std::log(2.0), 1e-15);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  // With bias correction the first update is lr * g / (|g| + eps).
  std::vector<double> w = {1.0, -2.0, 0.5};
  std::vector<double> g = {0.3, -4.0, 0.0};
  AdamW<double> opt(AdamWConfig{0.01, 0.9, 0.999, 1e-8, 0.0});
  opt.add(w, g);
  opt.step();
  EXPECT_NEAR(w[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(w[1], -2.0 + 0.01, 1e-9);
  EXPECT_EQ(w[2], 0.5);
  EXPECT_EQ(opt.steps_taken(), 1);
}

TEST(AdamW, DecoupledWeightDecay) {
  std::vector<double> w = {2.0};
  std::vector<double> g = {0.0};
  AdamW<double> opt(AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.5});
  opt.add(w, g);
  opt.step();
  EXPECT_NEAR(w[0], 2.0 * (1 - 0.1 * 0.5), 1e-12);
}

TEST(AdamW, MinimizesQuadratic) {
  std::vector<double> w = {3.0, -1.0};
  std::vector<double> g(2);
  AdamW<double> opt(AdamWConfig{0.05, 0.9, 0.999, 1e-8, 0.0});
  opt.add(w, g);
  for (int i = 0; i < 2000; ++i) {
    g[0] = 2 * (w[0] - 1.0);
    g[1] = 2 * (w[1] + 0.5);
    opt.step();
  }
  EXPECT_NEAR(w[0], 1.0, 1e-3);
  EXPECT_NEAR(w[1], -0.5, 1e-3);
}

TEST(ParallelFor, CoversEveryIndexAndRethrows) {
  std::vector<int> hits(1000, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
  EXPECT_THROW(parallel_for(10, [](std::size_t i) {
                 if (i == 7) fail("boom");
               }),
               Error);
}

class ContainerTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / "ctxdetox_core_test";
    fs::remove_all(dir_);
    Matrix<float> a(2, 3), b(1, 4);
    for (std::size_t i = 0; i < a.size(); ++i) a.data()[i] = 0.5f * static_cast<float>(i);
    b.fill(-1.25f);
    c_.kind = "test";
    c_.meta["answer"] = 42;
    c_.add("a", a);
    c_.add("b", b);
  }
  fs::path dir_;
  Container c_;
};

TEST_F(ContainerTest, RoundTripIsExact) {
  const fs::path p = dir_ / "x.bin";
  write_container(c_, p);
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
  const Container back = read_container(p);
  EXPECT_EQ(back.kind, "test");
  EXPECT_EQ(back.meta.at("answer"), 42);
  EXPECT_EQ(back.matrix<float>("a"), c_.matrix<float>("a"));
  EXPECT_EQ(back.matrix<float>("b"), c_.matrix<float>("b"));
  EXPECT_EQ(back.content_hash(), c_.content_hash());
  EXPECT_THROW(back.get("missing"), Error);
}

TEST_F(ContainerTest, WritingTwiceIsByteIdentical) {
  write_container(c_, dir_ / "1.bin");
  write_container(c_, dir_ / "2.bin");
  std::ifstream a(dir_ / "1.bin", std::ios::binary), b(dir_ / "2.bin", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
}

TEST_F(ContainerTest, CorruptPayloadIsDetected) {
  const fs::path p = dir_ / "x.bin";
  write_container(c_, p);
  std::fstream f(p, std::ios::binary | std::ios::in | std::ios::out);
  f.seekp(-2, std::ios::end);
  f.put('\x7f');
  f.close();
  EXPECT_THROW(read_container(p), Error);
}

TEST_F(ContainerTest, TruncatedAndForeignFilesAreRejected) {
  const fs::path p = dir_ / "x.bin";
  write_container(c_, p);
  fs::resize_file(p, fs::file_size(p) - 5);
  EXPECT_THROW(read_container(p), Error);
  std::ofstream(dir_ / "junk.bin") << "not a container";
  EXPECT_THROW(read_container(dir_ / "junk.bin"), Error);
  EXPECT_THROW(read_container(dir_ / "absent.bin"), Error);
}

}  // namespace
}  // namespace ctxdetox
