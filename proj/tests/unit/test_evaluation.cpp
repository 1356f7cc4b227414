#include "testing.hpp"

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "udaliver/errors.hpp"
#include "udaliver/evaluation.hpp"

using namespace udaliver;

namespace {

MaskVolume to_mask(const oracle::Vol& v) {
  MaskVolume m(v.d, v.h, v.w);
  for (size_t i = 0; i < v.v.size(); ++i) m.data[i] = uint8_t(v.v[i]);
  return m;
}

MaskVolume cube(int64_t n, int64_t lo, int64_t hi) {
  MaskVolume m(n, n, n);
  for (int64_t z = lo; z < hi; ++z)
    for (int64_t y = lo; y < hi; ++y)
      for (int64_t x = lo; x < hi; ++x) m.at(z, y, x) = 1;
  return m;
}

}  // namespace

TEST_SUITE("evaluation") {
  TEST_CASE("counts worked example") {
    MaskVolume p(1, 1, 4), g(1, 1, 4);
    p.data = {1, 1, 0, 0};
    g.data = {1, 0, 1, 0};
    CHECK(confusion_counts(p, g) == ConfusionCounts{1, 1, 1, 1});
    auto r = ratio_metrics({1, 1, 1, 1});
    CHECK(r.DS == doctest::Approx(0.5));
    CHECK(r.JA == doctest::Approx(1.0 / 3));
    CHECK(r.AC == doctest::Approx(0.5));
  }

  TEST_CASE("perfect and empty predictions") {
    auto g = cube(6, 1, 4);
    auto r = compute_metrics(g, g);
    CHECK(r.DS == 1.0);
    CHECK(r.ASSD == 0.0);
    auto e = compute_metrics(MaskVolume(6, 6, 6), MaskVolume(6, 6, 6));
    CHECK(e.DS == 1.0);
    CHECK(e.SE == 1.0);
    CHECK(e.ASSD == 0.0);
  }

  TEST_CASE("empty prediction uses the diagonal sentinel") {
    MaskVolume g(4, 5, 6);
    g.at(1, 1, 1) = 1;
    bool sentinel = false;
    CHECK(assd(MaskVolume(4, 5, 6), g, {2, 1, 1}, &sentinel) == doctest::Approx(std::sqrt(64.0 + 25 + 36)));
    CHECK(sentinel);
    auto r = compute_metrics(MaskVolume(4, 5, 6), g);
    CHECK(r.assd_sentinel);
    CHECK(r.DS == 0.0);
  }

  TEST_CASE("shifted plane gives a surface distance of three") {
    MaskVolume a(8, 1, 1), b(8, 1, 1);
    a.at(1, 0, 0) = 1;
    b.at(4, 0, 0) = 1;
    CHECK(assd(a, b) == doctest::Approx(3.0));
  }

  TEST_CASE("surface of a solid cube") {
    auto s = surface(cube(5, 0, 5));
    int64_t n = 0;
    for (auto v : s.data) n += v;
    CHECK(n == 125 - 27);
  }

  TEST_CASE("metrics match brute force on random volumes") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 40; ++trial) {
      auto p = oracle::random_volume(rng, 5, 7, 6), g = oracle::random_volume(rng, 5, 7, 6);
      auto r = compute_metrics(to_mask(p), to_mask(g), {1.5, 0.8, 0.8});
      auto o = oracle::ratios(p, g);
      CHECK(r.DS == doctest::Approx(o.DS));
      CHECK(r.JA == doctest::Approx(o.JA));
      CHECK(r.AC == doctest::Approx(o.AC));
      CHECK(r.PR == doctest::Approx(o.PR));
      CHECK(r.SE == doctest::Approx(o.SE));
      CHECK(r.SP == doctest::Approx(o.SP));
      CHECK(r.ASSD == doctest::Approx(oracle::assd(p, g, 1.5, 0.8, 0.8)).epsilon(1e-9));
    }
  }

  TEST_CASE("shape mismatch") {
    CHECK_THROWS_AS(compute_metrics(MaskVolume(2, 2, 2), MaskVolume(2, 2, 3)), DimensionError);
  }

  TEST_CASE("aggregate uses the sample deviation") {
    MetricsRecord a, b;
    a.DS = 0.8;
    b.DS = 0.6;
    auto s = aggregate({a, b});
    CHECK(s.count == 2);
    CHECK(s.mean[0] == doctest::Approx(0.7));
    CHECK(s.stddev[0] == doctest::Approx(std::sqrt(0.02)));
    CHECK(aggregate({a}).stddev[0] == 0.0);
  }

  TEST_CASE("tables round trip and are byte stable") {
    MetricsRecord r = compute_metrics(cube(4, 1, 3), cube(4, 1, 4), {}, "s1");
    std::vector<SettingRecords> rows{{"U3", {r}}, {"U2", {r, r}}};
    const auto text = results_table(rows);
    CHECK(text == results_table(rows));
    auto back = parse_results_table(text);
    REQUIRE(back.size() == 2);
    CHECK(back[1].records.size() == 2);
    CHECK(back[0].records[0].DS == doctest::Approx(r.DS).epsilon(1e-6));
    std::vector<ValidationPoint> h{{0, "U2", 0.5}, {0, "U3", 0.25}, {1, "U2", 0.75}};
    auto c = parse_curves_table(curves_table(h));
    REQUIRE(c.size() == 3);
    CHECK(c[2].network == "U2");
    CHECK(c[2].dice == doctest::Approx(0.75));
    CHECK_THROWS_AS(parse_curves_table("epoch,network,dice\n1,U2\n"), ValidationError);
  }

  TEST_CASE("report files") {
    const auto dir = std::filesystem::temp_directory_path() / "udaliver_eval_reports";
    std::filesystem::remove_all(dir);
    MetricsRecord r;
    r.subject_id = "a";
    r.DS = 0.5;
    auto files = emit_reports({{0, "U3", 0.1}, {1, "U3", 0.2}}, {{"U3", {r}}}, dir);
    CHECK(std::filesystem::file_size(files.table) > 0);
    CHECK(std::filesystem::file_size(files.curves_png) > 0);
    CHECK(std::filesystem::file_size(files.bars_png) > 0);
    std::filesystem::remove_all(dir);
  }
}
