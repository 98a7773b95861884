#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "mshubert/objective.hpp"
#include "support.hpp"

using namespace mshubert;
using testing::random_tensor;

namespace {

ModelConfig small_config(std::size_t layers) {
  auto cfg = ModelConfig::desk();
  cfg.n_layers = layers;
  cfg.hidden_dim = 8;
  cfg.n_heads = 2;
  cfg.ffn_dim = 16;
  cfg.proj_dim = 4;
  cfg.conv_stack = {{4, 8, 4}, {8, 4, 2}};
  cfg.dropout = 0.0;
  return cfg;
}

std::vector<double> random_audio(std::size_t n, Rng& rng) {
  std::vector<double> a(n);
  for (auto& x : a) x = rng.normal(0.0, 0.3);
  return a;
}

// Direct recomputation of the masked prediction loss from raw values.
double mpl_oracle(const Tensor& h, const std::vector<int>& labels, const MaskSpec& mask, const HeadParams& head,
                  double tau) {
  const std::size_t d = h.dim(1), p = head.code_embeddings.dim(1), k = head.code_embeddings.dim(0);
  double total = 0.0;
  for (const auto i : mask.indices) {
    std::vector<double> z(p, 0.0);
    double zn = 0.0;
    for (std::size_t c = 0; c < p; ++c) {
      z[c] = head.projection.bias.at(c);
      for (std::size_t r = 0; r < d; ++r) z[c] += h.at(i, r) * head.projection.weight.at(r, c);
      zn += z[c] * z[c];
    }
    std::vector<double> logit(k);
    for (std::size_t j = 0; j < k; ++j) {
      double dot = 0.0, en = 0.0;
      for (std::size_t c = 0; c < p; ++c) {
        dot += z[c] * head.code_embeddings.at(j, c);
        en += head.code_embeddings.at(j, c) * head.code_embeddings.at(j, c);
      }
      logit[j] = dot / (std::sqrt(zn) * std::sqrt(en)) / tau;
    }
    double mx = logit[0];
    for (const auto l : logit) mx = std::max(mx, l);
    double z_sum = 0.0;
    for (const auto l : logit) z_sum += std::exp(l - mx);
    total += mx + std::log(z_sum) - logit[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(mask.indices.size());
}

HeadParams random_head(std::size_t d, std::size_t p, std::size_t k, Rng& rng) {
  return {{random_tensor({d, p}, rng), random_tensor({p}, rng, 0.1)}, random_tensor({k, p}, rng)};
}

std::vector<int> random_labels(std::size_t t, std::size_t k, Rng& rng) {
  std::vector<int> out(t);
  for (auto& l : out) l = static_cast<int>(rng.index(k));
  return out;
}

}  // namespace

TEST_CASE("layer schedule") {
  CHECK(layer_schedule(12, 3, std::size_t{8}) == std::vector<std::size_t>{12, 10, 8});
  CHECK(layer_schedule(12, 1, 0.25) == std::vector<std::size_t>{12});
  CHECK(layer_schedule(12, 6, 0.25) == std::vector<std::size_t>{12, 10, 8, 7, 5, 3});
  CHECK(layer_schedule(4, 3, 0.25) == std::vector<std::size_t>{4, 3, 1});
  CHECK(layer_schedule(7, 6, 0.25) == std::vector<std::size_t>{7, 6, 5, 4, 3, 2});
  CHECK_THROWS_AS(layer_schedule(6, 6, 0.25), ValidationError);
  CHECK_THROWS_AS(layer_schedule(12, 11, 0.25), ValidationError);
  CHECK_THROWS_AS(layer_schedule(12, 0, 0.25), ValidationError);
  CHECK_THROWS_AS(layer_schedule(2, 2, 0.1), ValidationError);

  for (std::size_t n = 1; n <= 24; ++n)
    for (std::size_t m = 1; m <= n; ++m)
      for (std::size_t s = 1; s <= n - m + 1; ++s) {
        const auto sched = layer_schedule(n, s, m);
        REQUIRE(sched.size() == s);
        REQUIRE(sched.front() == n);
        if (s > 1) REQUIRE(sched.back() == m);
        for (std::size_t i = 1; i < s; ++i) REQUIRE(sched[i] < sched[i - 1]);
      }
}

TEST_CASE("assignments") {
  const std::vector<std::size_t> sizes{1000, 500, 250, 125, 50, 25};
  const auto a = make_assignment(12, sizes, 0.25, 2);
  CHECK(a.to_string(sizes) == "12:1000, 10:500, 8:250, 7:125, 5:50, 3:25; drop = 2");
  const auto b = LayerAssignment::parse(a.to_string(sizes), sizes);
  CHECK(b.pairs == a.pairs);
  CHECK(b.drop == 2);
  CHECK(LayerAssignment::parse("12:1000, 10:500", sizes).drop == 0);

  const auto r = make_assignment(12, sizes, 0.25, 0, true);
  CHECK(r.pairs.front() == LayerPair{12, 5});
  CHECK(r.pairs.back() == LayerPair{3, 0});
  CHECK_NOTHROW(r.validate(12, sizes, true));
  CHECK_THROWS_AS(r.validate(12, sizes, false), ValidationError);

  CHECK_THROWS_AS(LayerAssignment::parse("12:999", sizes), ValidationError);
  CHECK_THROWS_AS(LayerAssignment::parse("12:1000; drop = 1", sizes).validate(12, sizes), ValidationError);
  CHECK_THROWS_AS(LayerAssignment::parse("8:1000, 10:500", sizes).validate(12, sizes), ValidationError);
  CHECK_THROWS_AS(LayerAssignment::parse("13:1000", sizes).validate(12, sizes), ValidationError);
  CHECK_THROWS_AS(LayerAssignment::parse("12:x", sizes), ValidationError);
  CHECK_THROWS_AS(make_assignment(12, std::vector<std::size_t>{10, 20}, 0.25, 0), ValidationError);
}

TEST_CASE("mpl special cases") {
  Rng rng(1);
  auto h = random_tensor({5, 3}, rng);
  auto head = random_head(3, 4, 6, rng);
  const auto labels = random_labels(5, 6, rng);

  SUBCASE("empty mask is exactly zero with zero gradient") {
    Tape tape;
    TapeScope scope(tape);
    const auto l = mpl(h, labels, MaskSpec::none(5), head, 0.1);
    CHECK(l.item() == 0.0);
    tape.backward(l);
    for (const auto g : h.grad()) CHECK(g == 0.0);
    for (const auto g : head.code_embeddings.grad()) CHECK(g == 0.0);
  }

  SUBCASE("symmetric logits give ln 2") {
    HeadParams sym{{Tensor::from({2, 3}, {1, 0, 0, 0, 1, 0}), Tensor::zeros({3})},
                   Tensor::from({2, 3}, {0, 1, 0, 0, 0, 1})};
    const auto x = Tensor::from({1, 2}, {1, 0});
    const std::vector<int> lab{1};
    CHECK(mpl(x, lab, MaskSpec::all(1), sym, 0.1).item() == doctest::Approx(std::numbers::ln2).epsilon(1e-14));
  }

  SUBCASE("label range and shape errors") {
    std::vector<int> bad = labels;
    bad[2] = 6;
    CHECK_THROWS_AS(mpl(h, bad, MaskSpec::all(5), head, 0.1), ValidationError);
    const std::vector<int> shortl{0, 1};
    CHECK_THROWS_AS(mpl(h, shortl, MaskSpec::all(5), head, 0.1), DimensionError);
  }
}

TEST_CASE("mpl matches a direct recomputation") {
  Rng rng(2);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t t = 2 + rng.index(10), d = 2 + rng.index(5), p = 2 + rng.index(4), k = 2 + rng.index(8);
    auto h = random_tensor({t, d}, rng);
    const auto head = random_head(d, p, k, rng);
    const auto labels = random_labels(t, k, rng);
    auto mask = sample_mask(t, 0.4, 2, rng);
    if (mask.empty()) mask = MaskSpec{{0}, t};
    const double tau = rng.uniform(0.05, 1.0);
    const double got = mpl(h, labels, mask, head, tau).item();
    const double want = mpl_oracle(h, labels, mask, head, tau);
    CHECK(std::abs(got - want) / want < 1e-10);
    CHECK(got >= 0.0);
    CHECK(got <= std::log(static_cast<double>(k)) + 2.0 / tau);
  }
}

TEST_CASE("mpl gradients") {
  Rng rng(3);
  auto h = random_tensor({6, 4}, rng);
  auto head = random_head(4, 3, 5, rng);
  const auto labels = random_labels(6, 5, rng);
  const MaskSpec mask{{1, 2, 5}, 6};
  auto loss = [&] { return mpl(h, labels, mask, head, 0.2); };
  for (auto* t : {&h, &head.projection.weight, &head.projection.bias, &head.code_embeddings})
    CHECK(testing::grad_check(loss, *t) < 1e-6);
}

TEST_CASE("drop sampling") {
  LayerAssignment a;
  for (std::size_t i = 0; i < 6; ++i) a.pairs.push_back({6 - i, i});
  a.drop = 2;
  Rng rng(4);
  std::vector<int> hits(6, 0);
  const int reps = 30000;
  for (int r = 0; r < reps; ++r) {
    const auto kept = sample_kept_pairs(a, rng);
    REQUIRE(kept.size() == 4);
    for (std::size_t i = 1; i < kept.size(); ++i) REQUIRE(kept[i - 1] < kept[i]);
    for (const auto k : kept) ++hits[k];
  }
  for (const auto h : hits) CHECK(std::abs(h / static_cast<double>(reps) - 4.0 / 6.0) < 0.015);
}

TEST_CASE("multicluster loss") {
  const auto cfg = small_config(7);
  const std::vector<std::size_t> sizes{12, 10, 8, 6, 4, 2};
  Model model(cfg, sizes);
  Rng rng(5);
  std::vector<ViewPair> batch;
  std::vector<MaskSpec> masks;
  std::vector<UtteranceLabels> labels;
  for (std::size_t len : {160u, 240u}) {
    const auto x = model.conv_downsample(random_audio(len, rng));
    const auto t = x.dim(0);
    masks.push_back(sample_mask(t, 0.3, 3, rng));
    batch.push_back(make_views(x, masks.back(), model.mask_embedding()));
    UtteranceLabels lab;
    for (const auto k : sizes) lab.push_back(random_labels(t, k, rng));
    labels.push_back(std::move(lab));
  }
  const auto out = model.forward(batch, ForwardMode::ms_hubert);
  const ObjectiveOptions opt;
  const auto full = make_assignment(cfg.n_layers, sizes, 0.25, 2);

  // single-utterance pooled term equals mpl of the pair on H^m
  auto pooled_mpl = [&](std::size_t layer, std::size_t book) {
    double num = 0.0;
    std::size_t count = 0;
    for (std::size_t u = 0; u < batch.size(); ++u) {
      if (masks[u].empty()) continue;
      num += mpl(out.masked(layer, u), labels[u][book], masks[u], model.head(book), opt.temperature).item() *
             static_cast<double>(masks[u].indices.size());
      count += masks[u].indices.size();
    }
    return num / static_cast<double>(count);
  };

  SUBCASE("one pair, no drop") {
    LayerAssignment a{{{7, 0}}, 0};
    Rng r(1);
    const auto l = multicluster_loss(out, labels, masks, a, model, opt, r);
    CHECK(l.loss.item() == doctest::Approx(pooled_mpl(7, 0)).epsilon(1e-12));
    CHECK(l.terms.size() == 1);
  }

  SUBCASE("all but one dropped") {
    auto a = full;
    a.drop = a.pairs.size() - 1;
    Rng r(2);
    const auto l = multicluster_loss(out, labels, masks, a, model, opt, r);
    REQUIRE(l.terms.size() == 1);
    const auto p = l.terms[0].pair;
    CHECK(l.loss.item() == doctest::Approx(pooled_mpl(p.layer, p.codebook)).epsilon(1e-12));
  }

  SUBCASE("subset average equals the scaled full sum") {
    std::vector<std::size_t> all{0, 1, 2, 3, 4, 5};
    const double full_sum = multicluster_loss_subset(out, labels, masks, full, model, opt, all).loss.item();
    double acc = 0.0;
    int subsets = 0;
    for (unsigned bits = 0; bits < 64; ++bits) {
      if (__builtin_popcount(bits) != 4) continue;
      std::vector<std::size_t> kept;
      for (std::size_t i = 0; i < 6; ++i)
        if (bits & (1u << i)) kept.push_back(i);
      acc += multicluster_loss_subset(out, labels, masks, full, model, opt, kept).loss.item();
      ++subsets;
    }
    CHECK(subsets == 15);
    CHECK(std::abs(acc / 15.0 - 4.0 / 6.0 * full_sum) / full_sum < 1e-10);
  }

  SUBCASE("empty masks give zero loss and zero gradient") {
    std::vector<MaskSpec> none;
    std::vector<ViewPair> clean;
    for (const auto& vp : batch) {
      none.push_back(MaskSpec::none(vp.mask.frames));
      clean.push_back({vp.clean_view, vp.clean_view, none.back()});
    }
    for (auto& p : model.parameters()) p.tensor.zero_grad();
    Tape tape;
    TapeScope scope(tape);
    const auto o = model.forward(clean, ForwardMode::ms_hubert);
    Rng r(3);
    const auto l = multicluster_loss(o, labels, none, full, model, opt, r);
    CHECK(l.loss.item() == 0.0);
    tape.backward(l.loss);
    for (const auto& p : model.parameters())
      for (const auto g : p.tensor.grad()) REQUIRE(g == 0.0);
  }

  SUBCASE("both-stream option pools the clean stream at masked frames") {
    LayerAssignment a{{{7, 0}}, 0};
    std::vector<std::size_t> kept{0};
    ObjectiveOptions both;
    both.both_streams = true;
    const double b = multicluster_loss_subset(out, labels, masks, a, model, both, kept).loss.item();
    double num = 0.0, count = 0.0;
    for (std::size_t u = 0; u < batch.size(); ++u) {
      if (masks[u].empty()) continue;
      const auto m = static_cast<double>(masks[u].indices.size());
      num += m * mpl(out.masked(7, u), labels[u][0], masks[u], model.head(0), 0.1).item();
      num += m * mpl(out.clean(7, u), labels[u][0], masks[u], model.head(0), 0.1).item();
      count += 2 * m;
    }
    CHECK(b == doctest::Approx(num / count).epsilon(1e-12));
  }
}

TEST_CASE("multicluster gradient over every parameter") {
  const auto cfg = small_config(4);
  const std::vector<std::size_t> sizes{6, 4, 3};
  Model model(cfg, sizes);
  Rng rng(6);
  const auto audio = random_audio(200, rng);
  const auto t = cfg.frames_for(audio.size());
  const std::vector<MaskSpec> masks{sample_mask(t, 0.3, 3, rng)};
  UtteranceLabels lab;
  for (const auto k : sizes) lab.push_back(random_labels(t, k, rng));
  const std::vector<UtteranceLabels> labels{lab};
  const auto assignment = make_assignment(cfg.n_layers, sizes, 0.25, 0);
  const std::vector<std::size_t> kept{0, 1, 2};
  auto loss = [&] {
    const auto views = make_views(model.conv_downsample(audio), masks[0], model.mask_embedding());
    const auto out = model.forward(views, ForwardMode::ms_hubert);
    return multicluster_loss_subset(out, labels, masks, assignment, model, {}, kept).loss;
  };
  for (auto& p : model.parameters()) {
    INFO(p.name);
    if (p.name.ends_with("k_proj.bias")) {
      for (const auto g : testing::analytic_grad(loss, p.tensor)) CHECK(std::abs(g) < 1e-10);
      continue;
    }
    CHECK(testing::grad_check(loss, p.tensor) < 1e-4);
  }
}
