#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cavl/objectives.hpp"
#include "cavl/rng.hpp"

using namespace cavl;

namespace {

Tensor unit_rows(std::vector<std::vector<double>> rows) {
  const std::size_t n = rows.size(), d = rows[0].size();
  Tensor t(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) t.at(r, c) = rows[r][c];
  }
  return t;
}

double pwcl_value(const Tensor& e, const Tensor& f) {
  Tape t;
  return t.value(pwcl_loss(t, t.constant(e), t.constant(f)))[0];
}

}  // namespace

TEST_CASE("mlm loss") {
  const std::size_t d = 6, v = 1000;
  Rng rng(1);
  Tensor states = normal_init({8, d}, rng, 1.0);

  SUBCASE("uniform logits give log V") {
    Tape t;
    HeadVars head{t.constant(Tensor(Shape{d, v})), t.constant(Tensor(Shape{v}))};
    std::vector<std::size_t> rows{1, 4, 6};
    std::vector<Index> targets{3, 999, 0};
    ScalarLoss loss = mlm_loss(t, t.constant(states), head, rows, targets);
    CHECK(std::abs(t.value(loss.value)[0] - std::log(1000.0)) < 1e-9);
    CHECK(t.value(loss.value)[0] == doctest::Approx(6.9078).epsilon(1e-4));
  }

  SUBCASE("confidently correct logits drive the loss to zero") {
    Tape t;
    Tensor bias(Shape{v});
    bias[5] = 25.0;  // every masked position asks for id 5
    HeadVars head{t.constant(Tensor(Shape{d, v})), t.constant(bias)};
    std::vector<std::size_t> rows{0, 2};
    std::vector<Index> targets{5, 5};
    ScalarLoss loss = mlm_loss(t, t.constant(states), head, rows, targets);
    CHECK(t.value(loss.value)[0] < 0.01);
    CHECK(loss.accuracy == 1.0);
  }

  SUBCASE("loss over two positions is the mean of the per-position losses") {
    Rng r2(2);
    Tensor w = normal_init({d, 32}, r2, 0.5);
    Tensor b = normal_init({32}, r2, 0.5);
    auto one = [&](std::size_t row, Index target) {
      Tape t;
      HeadVars head{t.constant(w), t.constant(b)};
      std::vector<std::size_t> rows{row};
      std::vector<Index> targets{target};
      return t.value(mlm_loss(t, t.constant(states), head, rows, targets).value)[0];
    };
    Tape t;
    HeadVars head{t.constant(w), t.constant(b)};
    std::vector<std::size_t> rows{1, 3};
    std::vector<Index> targets{7, 12};
    const double both = t.value(mlm_loss(t, t.constant(states), head, rows, targets).value)[0];
    CHECK(both == doctest::Approx(0.5 * (one(1, 7) + one(3, 12))).epsilon(1e-12));
  }

  SUBCASE("no masked positions is an error") {
    Tape t;
    HeadVars head{t.constant(Tensor(Shape{d, v})), t.constant(Tensor(Shape{v}))};
    std::vector<std::size_t> rows;
    std::vector<Index> targets;
    CHECK_THROWS_AS(mlm_loss(t, t.constant(states), head, rows, targets),
                    NoMaskedPositions);
  }
}

TEST_CASE("nsp and caption-match losses") {
  const std::size_t d = 4;
  Rng rng(3);
  Tensor cls = normal_init({4, d}, rng, 1.0);

  SUBCASE("uniform logits give log 2") {
    Tape t;
    HeadVars head{t.constant(Tensor(Shape{d, 2})), t.constant(Tensor(Shape{2}))};
    std::vector<Index> labels{0, 1, 1, 0};
    ScalarLoss nsp = nsp_loss(t, t.constant(cls), head, labels);
    CHECK(std::abs(t.value(nsp.value)[0] - std::log(2.0)) < 1e-12);
    ScalarLoss cap = caption_match_loss(t, t.constant(cls), head, labels);
    CHECK(t.value(cap.value)[0] == doctest::Approx(0.6931).epsilon(1e-4));
  }

  SUBCASE("flipping labels swaps the per-class logits role") {
    Rng r2(4);
    Tensor w = normal_init({d, 2}, r2, 0.7);
    Tensor b = normal_init({2}, r2, 0.7);
    Tensor w_swapped(Shape{d, 2});
    Tensor b_swapped(Shape{2}, {b[1], b[0]});
    for (std::size_t r = 0; r < d; ++r) {
      w_swapped.at(r, 0) = w.at(r, 1);
      w_swapped.at(r, 1) = w.at(r, 0);
    }
    std::vector<Index> labels{0, 1, 1, 0}, flipped{1, 0, 0, 1};
    Tape t;
    const double a = t.value(
        nsp_loss(t, t.constant(cls), {t.constant(w), t.constant(b)}, flipped).value)[0];
    const double b_val = t.value(
        nsp_loss(t, t.constant(cls), {t.constant(w_swapped), t.constant(b_swapped)},
                 labels).value)[0];
    CHECK(a == doctest::Approx(b_val).epsilon(1e-12));
  }

  SUBCASE("all-match labels with a saturated match logit drive loss to zero") {
    Tape t;
    Tensor bias(Shape{2});
    bias[1] = 30.0;
    HeadVars head{t.constant(Tensor(Shape{d, 2})), t.constant(bias)};
    std::vector<Index> labels{1, 1, 1, 1};
    ScalarLoss cap = caption_match_loss(t, t.constant(cls), head, labels);
    CHECK(t.value(cap.value)[0] < 1e-12);
    CHECK(cap.accuracy == 1.0);
  }
}

TEST_CASE("pwcl oracle suite") {
  SUBCASE("numerator equal to denominator gives zero loss") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{1, 0}, {1, 0}});
    CHECK(std::abs(pwcl_value(e, f)) < 1e-12);
  }

  SUBCASE("hand-computed value -log(1.2/1.6)") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{0.6, 0.8}, {0.8, 0.6}});
    CHECK(std::abs(pwcl_value(e, f) - 0.2876820724517809) < 1e-5);
  }

  SUBCASE("zero denominator raises NonPositiveRatio") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tape t;
    CHECK_THROWS_AS(pwcl_loss(t, t.constant(e), t.constant(e)), NonPositiveRatio);
  }

  SUBCASE("negative numerator raises NonPositiveRatio") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{-1, 0}, {0.6, -0.8}});
    Tape t;
    CHECK_THROWS_AS(pwcl_loss(t, t.constant(e), t.constant(f)), NonPositiveRatio);
  }

  SUBCASE("single pair raises BatchTooSmall") {
    Tensor e = unit_rows({{1, 0}});
    Tape t;
    CHECK_THROWS_AS(pwcl_loss(t, t.constant(e), t.constant(e)), BatchTooSmall);
  }

  SUBCASE("loss goes negative when the diagonal dominates") {
    const double s = std::sqrt(1.0 - 0.09);
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{s, 0.3}, {0.3, s}});
    // num = 2s ≈ 1.908, den = 0.6
    const double loss = pwcl_value(e, f);
    CHECK(loss < 0.0);
    CHECK(loss == doctest::Approx(-std::log(2.0 * s / 0.6)).epsilon(1e-12));
  }

  SUBCASE("permutation equivariance") {
    Rng rng(9);
    const std::size_t b = 5, d = 8;
    Tensor e(Shape{b, d}), f(Shape{b, d});
    for (std::size_t r = 0; r < b; ++r) {
      double ne = 0.0, nf = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        e.at(r, c) = 1.0 + 0.3 * rng.normal();
        f.at(r, c) = 1.0 + 0.3 * rng.normal();
        ne += e.at(r, c) * e.at(r, c);
        nf += f.at(r, c) * f.at(r, c);
      }
      for (std::size_t c = 0; c < d; ++c) {
        e.at(r, c) /= std::sqrt(ne);
        f.at(r, c) /= std::sqrt(nf);
      }
    }
    std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Tensor ep(Shape{b, d}), fp(Shape{b, d});
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t c = 0; c < d; ++c) {
        ep.at(r, c) = e.at(perm[r], c);
        fp.at(r, c) = f.at(perm[r], c);
      }
    }
    CHECK(pwcl_value(e, f) == doctest::Approx(pwcl_value(ep, fp)).epsilon(1e-12));
  }

  SUBCASE("decreasing one off-diagonal similarity strictly decreases the loss") {
    // with E = I, the similarity matrix equals F^T, so one F entry moves one
    // off-diagonal similarity while everything else stays fixed
    Tensor e = unit_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    Tensor f = unit_rows({{0.9, 0.3, 0.2}, {0.3, 0.9, 0.1}, {0.2, 0.3, 0.9}});
    const double before = pwcl_value(e, f);
    Tensor f2 = f;
    f2.at(1, 0) -= 0.2;  // similarity (i=0, j=1) drops by 0.2
    const double after = pwcl_value(e, f2);
    CHECK(after < before);
  }
}

TEST_CASE("aps") {
  SUBCASE("self-similarity of unit vectors is one") {
    Tensor e = unit_rows({{1, 0}, {0, 1}, {0.6, 0.8}});
    CHECK(aps(e, e) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("hand-computed mean diagonal") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{0.6, 0.8}, {0.8, 0.6}});
    CHECK(aps(e, f) == doctest::Approx(0.6).epsilon(1e-12));
  }

  SUBCASE("orthogonal correct pairs give zero") {
    Tensor e = unit_rows({{1, 0}, {0, 1}});
    Tensor f = unit_rows({{0, 1}, {1, 0}});
    CHECK(aps(e, f) == doctest::Approx(0.0).epsilon(1e-12));
  }

  SUBCASE("bounded by [-1, 1] for unit rows") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t b = 2 + rng.below(6), d = 2 + rng.below(12);
      Tensor e(Shape{b, d}), f(Shape{b, d});
      for (std::size_t r = 0; r < b; ++r) {
        double ne = 0.0, nf = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          e.at(r, c) = rng.normal();
          f.at(r, c) = rng.normal();
          ne += e.at(r, c) * e.at(r, c);
          nf += f.at(r, c) * f.at(r, c);
        }
        for (std::size_t c = 0; c < d; ++c) {
          e.at(r, c) /= std::sqrt(ne);
          f.at(r, c) /= std::sqrt(nf);
        }
      }
      const double v = aps(e, f);
      CHECK(v >= -1.0 - 1e-12);
      CHECK(v <= 1.0 + 1e-12);
    }
  }
}

TEST_CASE("pretrain loss combination") {
  Tape t;
  PretrainParts parts;
  parts.mlm = {t.constant(Tensor::scalar(2.5)), 0.5};
  parts.nsp = {t.constant(Tensor::scalar(0.7)), 0.75};
  parts.caption = {t.constant(Tensor::scalar(0.6)), 0.5};
  parts.pwcl = t.constant(Tensor::scalar(1.1));
  parts.aps = 0.4;

  SUBCASE("only the pwcl weight active") {
    LossWeights w{0, 0, 0, 1};
    CombinedLoss c = pretrain_loss(t, parts, w);
    CHECK(c.report.total == doctest::Approx(1.1).epsilon(1e-12));
    CHECK(t.value(c.total)[0] == doctest::Approx(1.1).epsilon(1e-12));
  }

  SUBCASE("unit weights sum the parts") {
    CombinedLoss c = pretrain_loss(t, parts, LossWeights{});
    CHECK(c.report.total == doctest::Approx(2.5 + 0.7 + 0.6 + 1.1).epsilon(1e-12));
    CHECK(c.report.mlm == 2.5);
    CHECK(c.report.pwcl == 1.1);
    CHECK(c.report.aps == 0.4);
  }

  SUBCASE("weighted sum invariant") {
    LossWeights w{0.5, 2.0, 1.5, 3.0};
    CombinedLoss c = pretrain_loss(t, parts, w);
    CHECK(c.report.total ==
          doctest::Approx(0.5 * 2.5 + 2.0 * 0.7 + 1.5 * 0.6 + 3.0 * 1.1).epsilon(1e-12));
  }

  SUBCASE("absent pwcl contributes nothing and reports zero") {
    PretrainParts no_pwcl = parts;
    no_pwcl.pwcl.reset();
    CombinedLoss c = pretrain_loss(t, no_pwcl, LossWeights{});
    CHECK(c.report.pwcl == 0.0);
    CHECK(c.report.total == doctest::Approx(2.5 + 0.7 + 0.6).epsilon(1e-12));
  }

  SUBCASE("negative weights rejected") {
    LossWeights w{-1, 1, 1, 1};
    CHECK_THROWS_AS(pretrain_loss(t, parts, w), InvalidConfig);
  }
}
