#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <sstream>

#include "embedmask/gradcheck.hpp"
#include "embedmask/ops.hpp"
#include "embedmask/resize.hpp"
#include "embedmask/tensor_io.hpp"
#include "oracles.hpp"

using namespace embedmask;
using V = Var<double>;
using Td = Tensor<double>;

namespace {

Td vec(std::vector<double> v) {
  const std::size_t n = v.size();
  return Td(Shape{n}, std::move(v));
}

// Pushes values away from a kink at `at` so central differences stay smooth.
Td away_from(Td t, double at, double gap) {
  for (auto& v : t.values()) {
    if (std::abs(v - at) < gap) v = at + (v < at ? -gap : gap);
  }
  return t;
}

}  // namespace

TEST(Primitives, ExpOfZeroIsOne) {
  EXPECT_DOUBLE_EQ(exp(V::constant(vec({0.0}))).value()[0], 1.0);
}

TEST(Primitives, ReluClampsNegatives) {
  auto r = relu(V::constant(vec({-2.0, 3.0})));
  EXPECT_EQ(r.value(), vec({0.0, 3.0}));
}

TEST(Primitives, SquaredDistanceOfEqualVectorsIsZero) {
  auto d = sq_dist_last(V::constant(vec({1, 2})), V::constant(vec({1, 2})));
  EXPECT_DOUBLE_EQ(d.item(), 0.0);
}

TEST(Primitives, ShapeMismatchNamesShapes) {
  try {
    add(V::constant(Td(Shape{2, 3})), V::constant(Td(Shape{3, 2})));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("[3,2]"), std::string::npos);
  }
}

TEST(Primitives, ScalarBroadcastIsTheOnlyBroadcast) {
  auto s = mul(V::constant(vec({1, 2, 3})), V::constant(2.0));
  EXPECT_EQ(s.value(), vec({2, 4, 6}));
  EXPECT_THROW(add(V::constant(vec({1, 2})), V::constant(vec({1, 2, 3}))), ShapeError);
}

TEST(Primitives, NonFiniteInputRejectedInCheckingMode) {
  EXPECT_THROW(exp(V::constant(vec({std::nan("")}))), NonFiniteError);
  // Training precision does not pay for the check.
  EXPECT_NO_THROW(exp(Var<float>::constant(Tensor<float>(Shape{1}, std::vector<float>{NAN}))));
}

TEST(Backward, SquareGivesTwoX) {
  Tape<double> tape;
  auto x = tape.leaf(vec({3.0}));
  tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Backward, ExpAtZero) {
  Tape<double> tape;
  auto x = tape.leaf(vec({0.0}));
  tape.backward(sum(exp(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
}

TEST(Backward, NonScalarRootRejected) {
  Tape<double> tape;
  auto x = tape.leaf(vec({1.0, 2.0}));
  EXPECT_THROW(tape.backward(mul(x, x)), ShapeError);
}

TEST(Backward, SecondBackwardOnSameTapeRejected) {
  Tape<double> tape;
  auto x = tape.leaf(vec({2.0}));
  auto y = sum(mul(x, x));
  tape.backward(y);
  EXPECT_TRUE(tape.consumed());
  EXPECT_THROW(tape.backward(y), std::logic_error);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);  // unchanged by the rejected call
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape<double> tape;
  auto x = tape.leaf(vec({2.0}));
  auto c = V::constant(vec({5.0}));
  tape.backward(sum(mul(x, c)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 5.0);
  EXPECT_FALSE(c.requires_grad());
  EXPECT_TRUE(c.node()->grad.empty());
}

TEST(Backward, ReusedNodeAccumulates) {
  Tape<double> tape;
  auto x = tape.leaf(vec({1.5}));
  auto y = exp(x);
  tape.backward(sum(add(y, mul(y, y))));  // e^x + e^2x
  EXPECT_NEAR(x.grad()[0], std::exp(1.5) + 2 * std::exp(3.0), 1e-12);
}

TEST(GradCheck, SumHasConstantGradient) {
  std::mt19937_64 rng(1);
  auto r = finite_diff_check([](const std::vector<V>& in) { return sum(in[0]); },
                             {oracle::random_tensor(rng, Shape{4, 3})}, 1e-4);
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.coordinates, 12u);
}

TEST(GradCheck, ReportsNonFiniteCoordinate) {
  // log(x) at x = 1e-5 perturbed by 1e-4 goes negative -> NaN.
  try {
    finite_diff_check([](const std::vector<V>& in) { return sum(log(in[0])); }, {vec({1.0, 1e-5})}, 1e-4);
    FAIL() << "expected GradCheckError";
  } catch (const GradCheckError& e) {
    EXPECT_EQ(e.tensor(), 0u);
    EXPECT_EQ(e.index(), 1u);
  }
}

TEST(GradCheck, RejectsNonPositiveStep) {
  EXPECT_THROW(finite_diff_check([](const std::vector<V>& in) { return sum(in[0]); }, {vec({1.0})}, 0.0),
               std::invalid_argument);
}

// Every primitive, 100 randomized trials each, against central differences.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(1000 + GetParam());
  std::uniform_int_distribution<std::size_t> ext(1, 4);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Shape s{ext(rng), ext(rng)};
    const Td a = oracle::random_tensor(rng, s);
    const Td b = oracle::random_tensor(rng, s);
    const Td pos = oracle::random_tensor(rng, s, 0.2, 2.0);
    // Random projection keeps every output coordinate in play.
    const V proj = V::constant(oracle::random_tensor(rng, s));
    auto project = [proj](const V& y) { return sum(mul(y, proj)); };
    ScalarFn f;
    std::vector<Td> pt;
    switch (GetParam()) {
      case 0: f = [&](auto& in) { return project(add(in[0], in[1])); }; pt = {a, b}; break;
      case 1: f = [&](auto& in) { return project(sub(in[0], in[1])); }; pt = {a, b}; break;
      case 2: f = [&](auto& in) { return project(mul(in[0], in[1])); }; pt = {a, b}; break;
      case 3: f = [&](auto& in) { return project(div(in[0], in[1])); }; pt = {a, pos}; break;
      case 4: f = [&](auto& in) { return project(neg(in[0])); }; pt = {a}; break;
      case 5: f = [&](auto& in) { return project(exp(in[0])); }; pt = {a}; break;
      case 6: f = [&](auto& in) { return project(log(in[0])); }; pt = {pos}; break;
      case 7: f = [&](auto& in) { return project(relu(in[0])); }; pt = {away_from(a, 0.0, 0.01)}; break;
      case 8: f = [&](auto& in) { return project(max_const(in[0], 0.3)); }; pt = {away_from(a, 0.3, 0.01)}; break;
      case 9: f = [&](auto& in) { return mul(sum(in[0]), sum(in[0])); }; pt = {a}; break;
      case 10: f = [&](auto& in) { return mul(mean(in[0]), sum(exp(in[0]))); }; pt = {a}; break;
      case 11: {
        const Td m = oracle::random_tensor(rng, Shape{s[1], ext(rng)});
        const V p2 = V::constant(oracle::random_tensor(rng, Shape{s[0], m.extent(1)}));
        f = [p2](auto& in) { return sum(mul(matmul(in[0], in[1]), p2)); };
        pt = {a, m};
        break;
      }
      case 12: {
        const V p1 = V::constant(oracle::random_tensor(rng, Shape{s[0]}));
        f = [p1](auto& in) { return sum(mul(sq_dist_last(in[0], in[1]), p1)); };
        pt = {a, b};
        break;
      }
      case 13: f = [&](auto& in) { return project(sigmoid(in[0])); }; pt = {a}; break;
      case 14: {
        const Td x = oracle::random_tensor(rng, Shape{ext(rng) + 2, ext(rng) + 2, ext(rng)});
        const std::size_t k = (trial % 2) ? 3 : 1, co = ext(rng), stride = 1 + trial % 2;
        const Td w = oracle::random_tensor(rng, Shape{k, k, x.extent(2), co});
        const Td bias = oracle::random_tensor(rng, Shape{co});
        const Td out = oracle::conv2d_direct(x, w, bias, stride);
        const V p = V::constant(oracle::random_tensor(rng, out.shape()));
        f = [p, stride](auto& in) { return sum(mul(conv2d(in[0], in[1], in[2], stride), p)); };
        pt = {x, w, bias};
        break;
      }
      case 15: f = [&](auto& in) { return project(log_sigmoid(in[0])); }; pt = {a}; break;
      case 16: f = [&](auto& in) { return project(sqrt(in[0])); }; pt = {pos}; break;
      case 17: {
        const Td x = oracle::random_tensor(rng, Shape{ext(rng), ext(rng), ext(rng)});
        const std::size_t oh = ext(rng) + 1, ow = ext(rng) + 1;
        const V p = V::constant(oracle::random_tensor(rng, Shape{oh, ow, x.extent(2)}));
        f = [p, oh, ow](auto& in) { return sum(mul(bilinear_resize(in[0], oh, ow), p)); };
        pt = {x};
        break;
      }
    }
    const auto r = finite_diff_check(f, pt, 1e-4);
    worst = std::max(worst, r.max_rel_error);
  }
  EXPECT_LT(worst, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, 18));

TEST(Conv2d, IdentityKernelIsIdentityMap) {
  std::mt19937_64 rng(3);
  const Td x = oracle::random_tensor(rng, Shape{5, 6, 4});
  Td w(Shape{1, 1, 4, 4});
  for (std::size_t c = 0; c < 4; ++c) w[c * 4 + c] = 1.0;
  auto y = conv2d(V::constant(x), V::constant(w), V::constant(Td(Shape{4})), 1);
  EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, MatchesDirectConvolution) {
  std::mt19937_64 rng(4);
  for (std::size_t stride : {1u, 2u}) {
    const Td x = oracle::random_tensor(rng, Shape{8, 8, 3});
    const Td w = oracle::random_tensor(rng, Shape{3, 3, 3, 5});
    const Td b = oracle::random_tensor(rng, Shape{5});
    const Td want = oracle::conv2d_direct(x, w, b, stride);
    const Td got = conv2d(V::constant(x), V::constant(w), V::constant(b), stride).value();
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(Conv2d, StrideTwoHalvesEvenExtents) {
  auto y = conv2d(V::constant(Td(Shape{64, 64, 3})), V::constant(Td(Shape{3, 3, 3, 8})), V::constant(Td(Shape{8})), 2);
  EXPECT_EQ(y.shape(), (Shape{32, 32, 8}));
}

// Bias gradient must be the row-ordered float sum, bit for bit, whatever
// address the gradient buffer lands on. A vectorized reduction breaks this.
TEST(Conv2d, BiasGradientIsSequentialSum) {
  using Vf = Var<float>;
  using Tf = Tensor<float>;
  std::mt19937 rng(5);
  std::normal_distribution<float> n;
  Tf x(Shape{32, 32, 2}), w(Shape{1, 1, 2, 32}), up(Shape{32, 32, 32});
  for (auto* t : {&x, &w, &up})
    for (auto& v : t->values()) v = n(rng);
  std::vector<float> want(32, 0.f);
  for (std::size_t r = 0; r < 32 * 32; ++r)
    for (std::size_t c = 0; c < 32; ++c) want[c] += up[r * 32 + c];
  for (int trial = 0; trial < 16; ++trial) {
    std::vector<char> shift(static_cast<std::size_t>(4 * trial + 1));  // perturb the heap
    Tape<float> tape;
    auto b = tape.leaf(Tf(Shape{32}));
    tape.backward(sum(mul(conv2d(Vf::constant(x), Vf::constant(w), b, 1), Vf::constant(up))));
    for (std::size_t c = 0; c < 32; ++c) ASSERT_EQ(b.grad()[c], want[c]) << "channel " << c << " trial " << trial;
  }
}

TEST(Conv2d, RejectsOtherStrides) {
  EXPECT_THROW(conv2d(V::constant(Td(Shape{4, 4, 1})), V::constant(Td(Shape{3, 3, 1, 1})), V::constant(Td(Shape{1})), 3),
               std::invalid_argument);
}

TEST(BilinearResize, SameSizeIsIdentity) {
  std::mt19937_64 rng(5);
  const Td x = oracle::random_tensor(rng, Shape{4, 5, 2});
  EXPECT_EQ(bilinear_resize(x, 4, 5), x);
}

TEST(BilinearResize, ConstantStaysConstant) {
  const Td x(Shape{3, 4, 2}, 0.75);
  const Td y = bilinear_resize(x, 7, 2);
  ASSERT_EQ(y.shape(), (Shape{7, 2, 2}));
  for (double v : y.values()) EXPECT_NEAR(v, 0.75, 1e-15);
}

TEST(BilinearResize, TwoByTwoToThreeByThree) {
  const Td x(Shape{2, 2, 1}, {0, 1, 2, 3});
  const Td y = bilinear_resize(x, 3, 3);
  EXPECT_DOUBLE_EQ(y[4], 1.5);
  // Corners are preserved under corner-aligned sampling.
  EXPECT_DOUBLE_EQ(y[0], 0.0);
  EXPECT_DOUBLE_EQ(y[2], 1.0);
  EXPECT_DOUBLE_EQ(y[6], 2.0);
  EXPECT_DOUBLE_EQ(y[8], 3.0);
}

TEST(BilinearResize, ZeroTargetRejected) {
  EXPECT_THROW(bilinear_resize(Td(Shape{2, 2, 1}), 0, 3), std::invalid_argument);
}

TEST(TensorIo, HeaderLayoutIsLittleEndian) {
  const Tensor<float> t(Shape{2, 3}, {1, 2, 3, 4, 5, 6});
  std::ostringstream os;
  write_tensor(os, t);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), 4u + 4 + 4 + 2 * 4 + 6 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "EMTN");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);   // version
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);   // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[12]), 2);  // extent 0
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3);  // extent 1
  // 1.0f = 0x3f800000, stored low byte first.
  EXPECT_EQ(static_cast<unsigned char>(bytes[20]), 0x00);
  EXPECT_EQ(static_cast<unsigned char>(bytes[23]), 0x3f);
}

TEST(TensorIo, RoundTripPreservesFloatValues) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor<float> t = oracle::random_tensor(rng, Shape{3, static_cast<std::size_t>(1 + trial % 4), 2}).cast<float>();
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(read_tensor<float>(ss), t);
  }
}

TEST(TensorIo, BadMagicRejected) {
  std::stringstream ss("XXXX");
  EXPECT_THROW(read_tensor<float>(ss), FormatError);
}
