#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mshubert/analysis.hpp"
#include "mshubert/audio.hpp"
#include "mshubert/errors.hpp"
#include "mshubert/rng.hpp"
#include "oracle_cca.hpp"

using namespace mshubert;

namespace {

Matrix gaussian(std::size_t n, std::size_t d, Rng& rng) {
  Matrix m(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) m(i, j) = rng.normal(0.0, 1.0);
  return m;
}

// Correlated pair: Y shares a low-dimensional latent with X.
std::pair<Matrix, Matrix> related(std::size_t n, std::size_t dx, std::size_t dy, Rng& rng) {
  const Matrix z = gaussian(n, 2, rng);
  const Matrix x = z * gaussian(2, dx, rng) + 0.7 * gaussian(n, dx, rng);
  const Matrix y = z * gaussian(2, dy, rng) + 0.9 * gaussian(n, dy, rng);
  return {x, y};
}

}  // namespace

TEST_CASE("cca of a view with itself gives unit correlations") {
  Rng rng(3);
  const Matrix x = gaussian(200, 5, rng);
  for (double r : cca(x, x, 1e-12)) CHECK(r == doctest::Approx(1.0).epsilon(1e-10));
}

TEST_CASE("canonical correlations are invariant under invertible maps") {
  Rng rng(4);
  const auto [x, y] = related(300, 4, 4, rng);
  Matrix m = gaussian(4, 4, rng) + 3.0 * Matrix::Identity(4, 4);
  const auto base = cca(x, y, 1e-10);
  const auto mapped_y = cca(x, y * m, 1e-10);
  const auto mapped_x = cca(x * m, y, 1e-10);
  for (std::size_t i = 0; i < base.size(); ++i) {
    CHECK(std::abs(base[i] - mapped_y[i]) < 1e-8);
    CHECK(std::abs(base[i] - mapped_x[i]) < 1e-8);
  }
  for (double r : cca(x, x * m, 1e-10)) CHECK(std::abs(r - 1.0) < 1e-8);
}

TEST_CASE("independent gaussian views have small correlations") {
  Rng rng(5);
  const auto r = cca(gaussian(4000, 6, rng), gaussian(4000, 6, rng));
  CHECK(std::accumulate(r.begin(), r.end(), 0.0) / r.size() < 0.2);
  CHECK(std::is_sorted(r.rbegin(), r.rend()));
}

TEST_CASE("pwcca self-similarity and convex-combination bounds") {
  Rng rng(6);
  const Matrix x = gaussian(150, 6, rng);
  CHECK(std::abs(pwcca(x, x) - 1.0) < 1e-6);
  for (int t = 0; t < 5; ++t) {
    const auto [a, b] = related(120, 5, 3, rng);
    const auto r = cca(a, b, 0.0);
    const double p = pwcca(a, b, 0.0);
    CHECK(p >= *std::min_element(r.begin(), r.end()) - 1e-12);
    CHECK(p <= *std::max_element(r.begin(), r.end()) + 1e-12);
  }
}

TEST_CASE("cca and pwcca agree with the direct implementation") {
  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    const std::size_t dx = 2 + t % 4, dy = 1 + t % 3;
    const auto [x, y] = related(40 + 5 * t, dx, dy, rng);
    const double reg = t % 2 ? 1e-6 : 1e-3;
    const auto direct = oracle::direct_cca(x, y, reg);
    const auto got = cca(x, y, reg);
    REQUIRE(got.size() == direct.rho.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - direct.rho[i]) <= 1e-10 * std::max(direct.rho[i], 1e-3));
    const double p = pwcca(x, y, reg);
    CHECK(std::abs(p - direct.pwcca) / direct.pwcca < 1e-10);
  }
}

TEST_CASE("cca input errors") {
  Rng rng(8);
  Matrix x = gaussian(30, 3, rng);
  Matrix singular = x;
  singular.col(2) = singular.col(0) + singular.col(1);
  CHECK_THROWS_AS(cca(singular, x, 0.0), NumericError);
  CHECK_NOTHROW(cca(singular, x, 1e-6));
  CHECK_THROWS_AS(cca(x, gaussian(29, 3, rng)), DimensionError);
  CHECK_THROWS_AS(cca(gaussian(1, 2, rng), gaussian(1, 2, rng)), InsufficientDataError);
  Matrix bad = x;
  bad(0, 0) = std::nan("");
  CHECK_THROWS_AS(cca(bad, x), NumericError);
}

TEST_CASE("one-hot and pooled targets") {
  const std::vector<int> l{0, 1, 0};
  const Matrix m = one_hot(l, 2);
  Matrix expect(3, 2);
  expect << 1, 0, 0, 1, 1, 0;
  CHECK(m == expect);
  CHECK(one_hot(l).cols() == 2);
  CHECK_THROWS_AS(one_hot(l, 1), ValidationError);

  const LabelSet labels{{2, 2, 2, 0, 0}, {0, 1}};
  const auto segs = label_segments(labels);
  REQUIRE(segs.size() == 4);
  CHECK(segs[0].length == 3);
  CHECK(segs[2].utterance == 1);
  const Matrix pooled = pooled_one_hot(labels, 3);
  CHECK(pooled.rows() == 4);
  CHECK(pooled.row(0) == one_hot(std::vector<int>{2}, 3).row(0));
  CHECK(pooled.row(3) == one_hot(std::vector<int>{1}, 3).row(0));

  Matrix f(7, 1);
  f << 1, 2, 3, 10, 20, 5, 6;
  const Matrix pf = pool_segments(f, labels);
  CHECK(pf(0, 0) == doctest::Approx(2.0));
  CHECK(pf(1, 0) == doctest::Approx(15.0));
  CHECK_THROWS_AS(pool_segments(f.topRows(6), labels), DimensionError);
}

TEST_CASE("layer auc") {
  const std::vector<double> one{0.42};
  CHECK(layer_auc(one) == 0.42);
  const std::vector<double> flat(5, 0.3);
  CHECK(layer_auc(flat) == doctest::Approx(0.3).epsilon(1e-15));
  const std::vector<double> ramp{0.0, 0.5, 1.0};
  CHECK(layer_auc(ramp) == doctest::Approx(0.5));
  CHECK_THROWS_AS(layer_auc(std::vector<double>{}), ContractError);
}

TEST_CASE("report json round trip and schema checks") {
  CcaReport r;
  r.checkpoint = "run/ckpt.bin";
  r.target = "states";
  r.items = 120;
  r.scores = {0.2, 0.35, 0.5, 0.4};
  r.auc = layer_auc(r.scores);
  const std::string text = r.to_json();
  CHECK_NOTHROW(validate_report_json(text));
  const CcaReport back = CcaReport::from_json(text);
  CHECK(back.scores == r.scores);
  CHECK(back.auc == r.auc);
  CHECK(back.to_json() == text);
  CHECK(r.to_csv().rfind("layer,score\n1,0.2", 0) == 0);

  CHECK_THROWS_AS(validate_report_json("{"), ValidationError);
  CHECK_THROWS_AS(validate_report_json(R"({"checkpoint":"c","target":"t","scores":[0.5]})"), ValidationError);
  CHECK_THROWS_AS(validate_report_json(R"({"checkpoint":"c","target":"t","scores":[1.5],"auc":1.5})"), ValidationError);
  CHECK_THROWS_AS(validate_report_json(R"({"checkpoint":"c","target":"t","scores":[0.5,0.7],"auc":0.1})"), ValidationError);
  CHECK_NOTHROW(validate_report_json(R"({"checkpoint":"c","target":"t","scores":[0.5,0.7],"auc":0.6})"));
}

TEST_CASE("layer curve over a small model") {
  SynthOptions so;
  so.n_utts = 12;
  so.seed = 11;
  const auto utts = synth_dataset(so);
  ModelConfig mc = ModelConfig::desk();
  std::vector<std::vector<double>> audio;
  LabelSet states;
  for (const auto& u : utts) {
    audio.push_back(u.audio);
    states.push_back(frame_states(u.sample_states, mc));
  }
  for (std::size_t layers : {std::size_t{1}, std::size_t{3}}) {
    mc.n_layers = layers;
    const Model model(mc, {8});
    const CcaReport r = layer_curve(model, audio, states, {.checkpoint = "mem"});
    REQUIRE(r.scores.size() == layers);
    for (double s : r.scores) CHECK((s >= 0.0 && s <= 1.0));
    if (layers == 1) CHECK(r.auc == r.scores[0]);
    CHECK_NOTHROW(validate_report_json(r.to_json()));
    const CcaReport pooled = layer_curve(model, audio, states, {.pooled = true});
    CHECK(pooled.items < r.items);
  }
  CHECK_THROWS_AS(layer_curve(Model(mc, {8}), audio, LabelSet(states.begin(), states.end() - 1)), DimensionError);
}
