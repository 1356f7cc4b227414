#include "testing.hpp"

#include <random>

#include "oracles.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/pseudo.hpp"

using namespace udaliver;

TEST_SUITE("pseudo") {
  TEST_CASE("thresholding") {
    CHECK(normal_pseudolabel(torch::full({1, 2, 2}, -5.0)).sum().item<double>() == 0.0);
    CHECK(normal_pseudolabel(torch::zeros({1, 1})).item<double>() == 0.0);
    auto m = normal_pseudolabel(torch::tensor({{5.0, -5.0}, {-5.0, 5.0}}).view({1, 2, 2}));
    CHECK(torch::equal(m, torch::tensor({{1.0, 0.0}, {0.0, 1.0}}).view({1, 2, 2}).to(m.scalar_type())));
    CHECK_FALSE(normal_pseudolabel(torch::zeros({1, 2}, torch::requires_grad())).requires_grad());
  }

  TEST_CASE("hard detection") {
    auto masks = torch::zeros({3, 2, 2});
    masks[1][0][1] = 1.0;
    masks[2] = 1.0;
    CHECK(detect_hard(masks) == std::vector<bool>{true, false, false});
  }

  TEST_CASE("worked three-map example") {
    auto o = torch::tensor({-5.0, -5.0, -5.0, -5.0, 5.0, -5.0, -5.0, -5.0, 5.0, 5.0, -5.0, -5.0}).view({3, 1, 2, 2});
    auto r = mean_completer(o);
    CHECK(r.hard_flags == std::vector<bool>{true, false, false});
    CHECK(r.hard_count() == 1);
    auto expect_mean = torch::tensor({5.0 / 3, -5.0 / 3, -5.0, -5.0}).view({1, 2, 2});
    CHECK(torch::allclose(r.recombined_logits[0], expect_mean));
    CHECK(torch::equal(r.masks[0].flatten(), torch::tensor({1.0, 0.0, 0.0, 0.0}).to(r.masks.scalar_type())));
    CHECK(torch::equal(r.masks[1].flatten(), torch::tensor({1.0, 0.0, 0.0, 0.0}).to(r.masks.scalar_type())));
    CHECK(torch::equal(r.masks[2].flatten(), torch::tensor({1.0, 1.0, 0.0, 0.0}).to(r.masks.scalar_type())));
  }

  TEST_CASE("no hard samples leaves logits untouched") {
    auto o = torch::tensor({1.0, -2.0, 3.0, -4.0}).view({2, 2});
    auto r = mean_completer(o);
    CHECK(torch::equal(r.recombined_logits, o));
  }

  TEST_CASE("identical hard samples stay empty") {
    auto r = mean_completer(torch::full({4, 1, 3, 3}, -2.0));
    CHECK(r.masks.sum().item<double>() == 0.0);
    CHECK(r.all_hard_unresolved);
  }

  TEST_CASE("matches the loop oracle on random batches") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> nd(1, 8), hd(1, 8), q(-12, 4);
    for (int trial = 0; trial < 100; ++trial) {
      const int n = nd(rng), h = hd(rng), w = hd(rng);
      std::vector<std::vector<double>> logits(size_t(n), std::vector<double>(size_t(h * w)));
      auto t = torch::empty({n, 1, h, w});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < h * w; ++j) {
          logits[size_t(i)][size_t(j)] = 0.25 * q(rng);
          t.view({n, -1})[i][j] = logits[size_t(i)][size_t(j)];
        }
      const auto ref = oracle::mean_completer(logits);
      auto got = mean_completer(t).masks.view({n, -1});
      bool same = true;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < h * w; ++j) same &= (got[i][j].item<double>() == double(ref[size_t(i)][size_t(j)]));
      CHECK(same);
    }
  }

  TEST_CASE("empty batch is rejected") {
    CHECK_THROWS_AS(mean_completer(torch::zeros({0, 2, 2})), DimensionError);
  }
}
