#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "qfd/ndmath.hpp"
#include "qfd/rng.hpp"
#include "test_support.hpp"

using namespace qfd;
using qfd::testing::rel_err;

namespace {

constexpr double kH = 1e-5;
// Below this magnitude the comparison is absolute: difference quotients carry
// about 1e-11 of rounding noise, so tiny gradients cannot be resolved to 1e-6
// relative.
constexpr double kGradFloor = 1e-4;

// Reference activations written from their textbook definitions.
double mish_ref(double x) { return x * std::tanh(std::log1p(std::exp(x))); }
double gelu_ref(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

Mat random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) { return scale * randn(r, c, rng); }

// Five-point central difference with step kH; its O(h^4) truncation keeps
// the oracle well below the 1e-6 comparison tolerance.
double central1d(const std::function<double(double)>& f, double x0) {
  return (-f(x0 + 2 * kH) + 8 * f(x0 + kH) - 8 * f(x0 - kH) + f(x0 - 2 * kH)) / (12.0 * kH);
}

double central(const std::function<double(const Mat&)>& f, Mat x, Eigen::Index i) {
  const double x0 = x.data()[i];
  return central1d(
      [&](double v) {
        x.data()[i] = v;
        return f(x);
      },
      x0);
}

}  // namespace

TEST(Array, ShapeMatchesData) {
  Array a({2, 3}, 1.5);
  EXPECT_EQ(a.size(), 6u);
  EXPECT_EQ(a.rows(), 2u);
  EXPECT_EQ(a.cols(), 3u);
  EXPECT_THROW(Array({2, 2}, std::vector<double>{1.0, 2.0, 3.0}), MathError);
}

TEST(Array, MatrixViewsOfLowRanks) {
  const Array s = Array::scalar(4.0);
  EXPECT_EQ(s.mat()(0, 0), 4.0);
  const Array v({3}, std::vector<double>{1, 2, 3});
  EXPECT_EQ(v.mat().rows(), 1);
  EXPECT_EQ(v.mat()(0, 2), 3.0);
}

TEST(ParamStore, NamesByPrefixAreSorted) {
  ParamStore p;
  p.set("b/x", Array::scalar(1));
  p.set("a/y", Array::scalar(2));
  p.set("a/x", Array::scalar(3));
  EXPECT_EQ(p.names("a/"), (std::vector<std::string>{"a/x", "a/y"}));
  EXPECT_EQ(p.scalar_count(), 3u);
  EXPECT_THROW(p.at("missing"), MathError);
}

// ---------------------------------------------------------------------------
// Activations

TEST(Activation, ZeroAtOrigin) {
  EXPECT_EQ(activate(Activation::Mish, 0.0), 0.0);
  EXPECT_EQ(activate(Activation::GeLU, 0.0), 0.0);
  EXPECT_EQ(activate(Activation::ReLU, -1.0), 0.0);
  EXPECT_EQ(activate_derivative(Activation::ReLU, -1.0), 0.0);
}

TEST(Activation, MatchesTextbookForms) {
  for (double x = -12.0; x <= 12.0; x += 0.37) {
    EXPECT_NEAR(activate(Activation::Mish, x), mish_ref(x), 1e-12 * std::max(1.0, std::abs(x))) << x;
    EXPECT_NEAR(activate(Activation::GeLU, x), gelu_ref(x), 1e-12 * std::max(1.0, std::abs(x))) << x;
    EXPECT_NEAR(activate(Activation::Softplus, x), std::log1p(std::exp(x)), 1e-12 * std::max(1.0, std::abs(x)));
  }
}

TEST(Activation, StableForLargeInputs) {
  for (auto kind : {Activation::Mish, Activation::GeLU, Activation::Softplus}) {
    EXPECT_DOUBLE_EQ(activate(kind, 800.0), 800.0);
    EXPECT_NEAR(activate(kind, -800.0), 0.0, 1e-300);
    EXPECT_TRUE(std::isfinite(activate_derivative(kind, 800.0)));
    EXPECT_TRUE(std::isfinite(activate_derivative(kind, -800.0)));
  }
}

TEST(Activation, DerivativesMatchFiniteDifferences) {
  for (auto kind : {Activation::Mish, Activation::GeLU, Activation::Softplus, Activation::Identity}) {
    for (double x = -6.0; x <= 6.0; x += 0.113) {
      const double fd = central1d([kind](double v) { return activate(kind, v); }, x);
      EXPECT_LT(rel_err(activate_derivative(kind, x), fd, kGradFloor), 1e-6) << to_string(kind) << " at " << x;
    }
  }
}

TEST(Activation, NamesRoundTrip) {
  for (auto kind : {Activation::Identity, Activation::ReLU, Activation::Mish, Activation::GeLU, Activation::Softplus}) {
    EXPECT_EQ(activation_from_string(to_string(kind)), kind);
  }
  EXPECT_THROW(activation_from_string("swish"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Tape

TEST(Tape, SquareGradient) {
  Tape t;
  Var x = t.input(Mat::Constant(1, 1, 3.0));
  Var y = t.square(x);
  const Gradients g = t.backward(y);
  EXPECT_DOUBLE_EQ(g.input(x)(0, 0), 6.0);
}

TEST(Tape, SeedShapeMismatchThrows) {
  Tape t;
  Var x = t.input(Mat::Ones(2, 2));
  Var y = t.square(x);
  EXPECT_THROW(t.backward(y, Mat::Ones(1, 2)), MathError);
}

TEST(Tape, EmptyTapeThrows) {
  Tape t;
  EXPECT_THROW(t.backward(), MathError);
}

TEST(Tape, NonFiniteValueRejected) {
  Tape t;
  Var x = t.input(Mat::Constant(1, 1, -1.0));
  EXPECT_THROW(t.log(x), MathError);
}

TEST(Tape, BranchGradientsAdd) {
  Rng rng = make_stream(11, Stream::Init);
  const Mat x0 = random_mat(3, 2, rng);
  auto grad_of = [&](int which) {
    Tape t;
    Var x = t.input(x0);
    Var a = t.sum(t.act(x, Activation::Mish));
    Var b = t.sum(t.square(x));
    Var out = which == 0 ? a : which == 1 ? b : t.add(a, b);
    return Mat(t.backward(out).input(x));
  };
  const Mat both = grad_of(2);
  const Mat sum = grad_of(0) + grad_of(1);
  EXPECT_LT((both - sum).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Tape, ParamReuseAccumulates) {
  Tape t;
  ParamStore p;
  p.set("w", Array({1, 1}, std::vector<double>{2.0}));
  Var w1 = t.param("w", p.at("w"));
  Var w2 = t.param("w", p.at("w"));
  EXPECT_EQ(w1.id, w2.id);
  Var y = t.mul(w1, w2);  // w^2
  EXPECT_DOUBLE_EQ(t.backward(y).param("w")[0], 4.0);
}

TEST(Tape, FrozenParamsHaveNoGradient) {
  Tape t;
  ParamStore p;
  p.set("w", Array({1, 1}, std::vector<double>{2.0}));
  Var x = t.input(Mat::Constant(1, 1, 3.0));
  Var w = t.param("w", p.at("w"), false);
  const Gradients g = t.backward(t.mul(x, w));
  EXPECT_FALSE(g.has_param("w"));
  EXPECT_DOUBLE_EQ(g.input(x)(0, 0), 2.0);
}

TEST(Tape, MinTiesSelectFirstArgument) {
  Tape t;
  Var a = t.input(Mat::Constant(1, 1, 1.0));
  Var b = t.input(Mat::Constant(1, 1, 1.0));
  const Gradients g = t.backward(t.min(a, b));
  EXPECT_EQ(g.input(a)(0, 0), 1.0);
  EXPECT_EQ(g.input(b)(0, 0), 0.0);
}

TEST(Tape, ClipGradientVanishesOutside) {
  Tape t;
  Mat v(1, 3);
  v << -2.0, 0.5, 2.0;
  Var x = t.input(v);
  const Gradients g = t.backward(t.sum(t.clip(x, -1.0, 1.0)));
  EXPECT_EQ(g.input(x)(0, 0), 0.0);
  EXPECT_EQ(g.input(x)(0, 1), 1.0);
  EXPECT_EQ(g.input(x)(0, 2), 0.0);
}

// Every differentiable op against central differences on 100 random instances.
TEST(Tape, EveryOpMatchesFiniteDifferences) {
  using Build = std::function<Var(Tape&, Var, Var)>;
  const std::vector<std::pair<std::string, Build>> ops = {
      {"matmul", [](Tape& t, Var x, Var) { return t.matmul(x, t.square(x)); }},
      {"add_bias", [](Tape& t, Var x, Var y) { return t.add_bias(x, t.slice_cols(y, 0, 3)); }},
      {"add", [](Tape& t, Var x, Var) { return t.add(x, t.scale(x, 0.3)); }},
      {"sub", [](Tape& t, Var x, Var) { return t.sub(t.square(x), x); }},
      {"mul", [](Tape& t, Var x, Var) { return t.mul(x, t.act(x, Activation::GeLU)); }},
      {"div", [](Tape& t, Var x, Var) { return t.div(x, t.act(x, Activation::Softplus)); }},
      {"scale_rows", [](Tape& t, Var x, Var) { return t.scale_rows(x, Vec::LinSpaced(3, 0.5, 2.0)); }},
      {"mish", [](Tape& t, Var x, Var) { return t.act(x, Activation::Mish); }},
      {"gelu", [](Tape& t, Var x, Var) { return t.act(x, Activation::GeLU); }},
      {"softplus", [](Tape& t, Var x, Var) { return t.act(x, Activation::Softplus); }},
      {"concat", [](Tape& t, Var x, Var) { return t.concat_cols({x, t.square(x)}); }},
      {"slice", [](Tape& t, Var x, Var) { return t.slice_cols(x, 1, 2); }},
      {"min", [](Tape& t, Var x, Var) { return t.min(x, t.scale(t.square(x), 0.7)); }},
      {"mean", [](Tape& t, Var x, Var) { return t.mean(t.square(x)); }},
      {"log", [](Tape& t, Var x, Var) { return t.log(t.act(x, Activation::Softplus)); }},
      {"row_norm", [](Tape& t, Var x, Var) { return t.row_norm(x); }},
      {"row_sum", [](Tape& t, Var x, Var) { return t.row_sum(t.square(x)); }},
      {"clip", [](Tape& t, Var x, Var) { return t.clip(x, -5.0, 5.0); }},
  };
  Rng rng = make_stream(3, Stream::Init);
  for (const auto& [name, build] : ops) {
    for (int trial = 0; trial < 100; ++trial) {
      const Mat x0 = random_mat(3, 3, rng);
      const Mat y0 = random_mat(1, 3, rng);
      Tape probe;
      const Mat out0 = probe.value(build(probe, probe.constant(x0), probe.constant(y0)));
      const Mat w = random_mat(out0.rows(), out0.cols(), rng);
      auto f = [&](const Mat& x) {
        Tape t;
        return t.value(build(t, t.constant(x), t.constant(y0))).cwiseProduct(w).sum();
      };
      Tape t;
      Var x = t.input(x0);
      Var out = build(t, x, t.constant(y0));
      const Mat g = t.backward(out, w).input(x);
      for (Eigen::Index i = 0; i < x0.size(); ++i) {
        ASSERT_LT(rel_err(g.data()[i], central(f, x0, i), kGradFloor), 1e-6) << name << " trial " << trial << " entry " << i;
      }
    }
  }
}

TEST(Tape, ReplayIsBitIdentical) {
  Rng rng = make_stream(5, Stream::Init);
  MlpSpec spec{{4, 8, 8, 2}, Activation::Mish, Activation::Identity};
  ParamStore p;
  mlp_init(spec, "net", p, rng);
  Tape t;
  Var x = t.input(random_mat(5, 4, rng));
  Var y = mlp_forward(spec, p, "net", t, x);
  t.sum(t.square(t.row_norm(y)));
  EXPECT_TRUE(t.replay_matches());
}

// ---------------------------------------------------------------------------
// MLP

TEST(Mlp, ZeroWeightsGiveZeroOutput) {
  MlpSpec spec{{3, 5, 2}, Activation::Mish, Activation::Identity};
  ParamStore p;
  Rng rng = make_stream(0, Stream::Init);
  mlp_init(spec, "z", p, rng);
  for (const auto& name : p.names("z/")) {
    for (auto& v : p.at(name).data()) v = 0.0;
  }
  const Mat out = mlp_forward(spec, p, "z", random_mat(4, 3, rng));
  EXPECT_EQ(out.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Mlp, SingleReluUnit) {
  MlpSpec spec{{1, 1, 1}, Activation::ReLU, Activation::Identity};
  ParamStore p;
  p.set(weight_name("u", 0), Array({1, 1}, 1.0));
  p.set(bias_name("u", 0), Array({1}, 0.0));
  p.set(weight_name("u", 1), Array({1, 1}, 1.0));
  p.set(bias_name("u", 1), Array({1}, 0.0));
  EXPECT_EQ(mlp_forward(spec, p, "u", Mat::Constant(1, 1, 2.0))(0, 0), 2.0);
}

TEST(Mlp, DeterministicForward) {
  MlpSpec spec{{3, 16, 16, 2}, Activation::GeLU, Activation::Identity};
  auto run = [&] {
    ParamStore p;
    Rng rng = make_stream(9, Stream::Init);
    mlp_init(spec, "d", p, rng);
    return mlp_forward(spec, p, "d", random_mat(7, 3, rng));
  };
  const Mat a = run();
  const Mat b = run();
  EXPECT_EQ(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()), 0);
}

TEST(Mlp, TapedAndUntapedAgree) {
  MlpSpec spec{{3, 16, 2}, Activation::Mish, Activation::Identity};
  ParamStore p;
  Rng rng = make_stream(4, Stream::Init);
  mlp_init(spec, "a", p, rng);
  const Mat x = random_mat(6, 3, rng);
  Tape t;
  const Mat taped = t.value(mlp_forward(spec, p, "a", t, t.constant(x)));
  EXPECT_EQ(taped, mlp_forward(spec, p, "a", x));
}

TEST(Mlp, ShapeMismatchNamesBothShapes) {
  MlpSpec spec{{3, 4, 1}, Activation::ReLU, Activation::Identity};
  ParamStore p;
  Rng rng = make_stream(1, Stream::Init);
  mlp_init(spec, "m", p, rng);
  try {
    mlp_forward(spec, p, "m", Mat::Zero(2, 5));
    FAIL() << "expected a shape error";
  } catch (const MathError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2, 5]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3"), std::string::npos) << msg;
  }
}

TEST(Mlp, SpecValidation) {
  EXPECT_THROW((MlpSpec{{3, 1}, Activation::ReLU, Activation::Identity}.validate()), MathError);
  EXPECT_THROW((MlpSpec{{3, 0, 1}, Activation::ReLU, Activation::Identity}.validate()), MathError);
  EXPECT_NO_THROW((MlpSpec{{3, 1, 1}, Activation::ReLU, Activation::Identity}.validate()));
}

// 100 random networks; every parameter checked against central differences.
TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
  Rng rng = make_stream(21, Stream::Init);
  std::uniform_int_distribution<int> width(1, 4);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto act = trial % 2 == 0 ? Activation::Mish : Activation::GeLU;
    MlpSpec spec{{static_cast<std::size_t>(width(rng)), static_cast<std::size_t>(width(rng)),
                  static_cast<std::size_t>(width(rng)), static_cast<std::size_t>(width(rng))},
                 act, Activation::Identity};
    ParamStore p;
    mlp_init(spec, "n", p, rng);
    const Mat x = random_mat(3, static_cast<Eigen::Index>(spec.input_dim()), rng);
    const Mat w = random_mat(3, static_cast<Eigen::Index>(spec.output_dim()), rng);
    Tape t;
    Var out = mlp_forward(spec, p, "n", t, t.constant(x));
    const Gradients g = t.backward(out, w);
    for (const auto& name : p.names()) {
      for (std::size_t i = 0; i < p.at(name).size(); ++i) {
        ParamStore q = p;
        const double fd = central1d(
            [&](double v) {
              q.at(name)[i] = v;
              return mlp_forward(spec, q, "n", x).cwiseProduct(w).sum();
            },
            p.at(name)[i]);
        ASSERT_LT(rel_err(g.param(name)[i], fd, kGradFloor), 1e-6) << name << "[" << i << "] trial " << trial;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 1000);
}

// ---------------------------------------------------------------------------
// Adam

TEST(Adam, ZeroGradientFromRestLeavesParams) {
  ParamStore p;
  p.set("x", Array({2}, std::vector<double>{1.0, -2.0}));
  const ParamStore before = p;
  AdamMoments m;
  adam_step(p, {{"x", Array({2}, 0.0)}}, m, AdamConfig{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(m.m.at("x")[0], 0.0);
  EXPECT_EQ(m.v.at("x")[0], 0.0);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  ParamStore p;
  p.set("x", Array({2}, std::vector<double>{1.0, -2.0}));
  AdamMoments m;
  AdamConfig cfg;
  adam_step(p, {{"x", Array({2}, std::vector<double>{1.0, 1.0})}}, m, cfg);
  const double m_before = m.m.at("x")[0];
  const double v_before = m.v.at("x")[0];
  const double x_before = p.at("x")[0];
  adam_step(p, {{"x", Array({2}, 0.0)}}, m, cfg);
  EXPECT_DOUBLE_EQ(m.m.at("x")[0], cfg.beta1 * m_before);
  EXPECT_DOUBLE_EQ(m.v.at("x")[0], cfg.beta2 * v_before);
  // The decayed first moment still moves the parameter by the usual rule.
  const double mhat = m.m.at("x")[0] / (1 - cfg.beta1 * cfg.beta1);
  const double vhat = m.v.at("x")[0] / (1 - cfg.beta2 * cfg.beta2);
  EXPECT_NEAR(p.at("x")[0], x_before - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps), 1e-15);
}

TEST(Adam, FirstStepIsLrTimesSign) {
  for (double g : {3.0, -0.02}) {
    ParamStore p;
    p.set("x", Array::scalar(0.0));
    AdamMoments m;
    AdamConfig cfg;
    cfg.lr = 1e-3;
    adam_step(p, {{"x", Array::scalar(g)}}, m, cfg);
    const double expected = -cfg.lr * g / (std::abs(g) + cfg.eps);
    EXPECT_NEAR(p.at("x")[0], expected, 1e-15);
    EXPECT_NEAR(p.at("x")[0], -cfg.lr * (g > 0 ? 1 : -1), 1e-8);
  }
}

TEST(Adam, ConstantGradientStepApproachesLr) {
  ParamStore p;
  p.set("x", Array::scalar(0.0));
  AdamMoments m;
  AdamConfig cfg;
  cfg.lr = 1e-2;
  double prev = 0.0, step = 0.0;
  for (int i = 0; i < 2000; ++i) {
    adam_step(p, {{"x", Array::scalar(0.5)}}, m, cfg);
    step = p.at("x")[0] - prev;
    prev = p.at("x")[0];
  }
  EXPECT_NEAR(step, -cfg.lr, 1e-6);
}

TEST(Adam, NonFiniteGradientNamesParameterAndChangesNothing) {
  ParamStore p;
  p.set("a", Array::scalar(1.0));
  p.set("b", Array::scalar(2.0));
  const ParamStore before = p;
  AdamMoments m;
  try {
    adam_step(p, {{"a", Array::scalar(1.0)}, {"b", Array::scalar(NAN)}}, m, AdamConfig{});
    FAIL() << "expected an error";
  } catch (const MathError& e) {
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos) << e.what();
  }
  EXPECT_EQ(p, before);
  EXPECT_EQ(m.step, 0);
}
