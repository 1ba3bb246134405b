#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "tdnas/gradcheck.hpp"
#include "tdnas/nas_search.hpp"

using namespace tdnas;

namespace {

bool same_bits(double a, double b) { return f64_to_bits(a) == f64_to_bits(b); }

Dataset random_dataset(int n_seqs, int frames, int in_dim, int classes,
                       Rng& rng) {
  Dataset d;
  d.num_classes = classes;
  for (int s = 0; s < n_seqs; ++s) {
    Sequence seq;
    seq.features = SeqTensor(frames, in_dim);
    for (double& v : seq.features.data) v = rng.draw_normal();
    for (int t = 0; t < frames; ++t)
      seq.labels.push_back(
          std::min(classes - 1, static_cast<int>(rng.draw_uniform() * classes)));
    d.items.push_back(std::move(seq));
  }
  return d;
}

std::vector<const Sequence*> all_items(const Dataset& d) {
  std::vector<const Sequence*> out;
  for (const Sequence& s : d.items) out.push_back(&s);
  return out;
}

SearchSpaceSpec ctx_dim_spec(int layers, int d_left, int d_right,
                             std::vector<int> dims) {
  SearchSpaceSpec spec;
  spec.num_layers = layers;
  spec.d_left = d_left;
  spec.d_right = d_right;
  spec.dim_choices = std::move(dims);
  spec.search_contexts = true;
  spec.search_dims = true;
  return spec;
}

void randomize_arch(ArchitectureWeights& w, Rng& rng, double scale) {
  for (auto* group : {&w.log_left, &w.log_right, &w.log_dim})
    for (std::vector<double>& g : *group)
      for (double& v : g) v = rng.draw_normal() * scale;
}

// Shape-matching Gumbel draws, one ArchLambdas per sample.
std::vector<ArchLambdas> draw_noise(const ArchitectureWeights& w, int j,
                                    Rng& rng) {
  std::vector<ArchLambdas> noise(j);
  for (ArchLambdas& s : noise) {
    auto fill = [&](const std::vector<std::vector<double>>& shape,
                    std::vector<std::vector<double>>& out) {
      for (const std::vector<double>& g : shape) {
        std::vector<double> draws(g.size());
        for (double& v : draws) v = rng.draw_gumbel();
        out.push_back(std::move(draws));
      }
    };
    fill(w.log_left, s.left);
    fill(w.log_right, s.right);
    fill(w.log_dim, s.dim);
  }
  return noise;
}

std::vector<ArchLambdas> samples_at(const ArchitectureWeights& w, double t,
                                    const std::vector<ArchLambdas>& noise) {
  if (noise.empty()) return {softmax_lambdas(w)};
  std::vector<ArchLambdas> samples;
  for (const ArchLambdas& g : noise) {
    ArchLambdas lam;
    for (std::size_t l = 0; l < w.log_left.size(); ++l)
      lam.left.push_back(gumbel_lambda_from_noise(w.log_left[l], t, g.left[l]));
    for (std::size_t l = 0; l < w.log_right.size(); ++l)
      lam.right.push_back(
          gumbel_lambda_from_noise(w.log_right[l], t, g.right[l]));
    for (std::size_t l = 0; l < w.log_dim.size(); ++l)
      lam.dim.push_back(gumbel_lambda_from_noise(w.log_dim[l], t, g.dim[l]));
    samples.push_back(std::move(lam));
  }
  return samples;
}

std::string temp_path(const std::string& name) {
  return "/tmp/tdnas_nas_" + name;
}

}  // namespace

TEST_CASE("softmax architecture gradient on worked examples", "[nas]") {
  SECTION("equal sensitivities give a zero gradient") {
    std::vector<double> lam = softmax_lambda({0.3, -1.2, 2.0});
    std::vector<double> grad = softmax_arch_grad(lam, {4.0, 4.0, 4.0});
    for (double g : grad) REQUIRE(std::abs(g) < 1e-12);
  }
  SECTION("uniform weights, single nonzero sensitivity") {
    std::vector<double> lam = softmax_lambda({0.0, 0.0, 0.0});
    std::vector<double> grad = softmax_arch_grad(lam, {3.0, 0.0, 0.0});
    REQUIRE(grad[0] == Catch::Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(grad[1] == Catch::Approx(-1.0 / 3.0).margin(1e-12));
    REQUIRE(grad[2] == Catch::Approx(-1.0 / 3.0).margin(1e-12));
  }
  SECTION("one-hot weights are a fixed point") {
    std::vector<double> lam = softmax_lambda({1000.0, 0.0, 0.0});
    std::vector<double> grad = softmax_arch_grad(lam, {0.7, -2.0, 5.0});
    for (double g : grad) REQUIRE(g == 0.0);
  }
  SECTION("size mismatch") {
    REQUIRE_THROWS_AS(softmax_arch_grad({0.5, 0.5}, {1.0}), ShapeError);
  }
  SECTION("matches finite differences of the mixture objective") {
    Rng rng(31, 0);
    for (int rep = 0; rep < 20; ++rep) {
      int k = 2 + rep % 4;
      std::vector<double> log_alpha(k), v(k);
      for (double& x : log_alpha) x = rng.draw_normal();
      for (double& x : v) x = rng.draw_normal() * 2.0;
      auto f = [&](const std::vector<double>& la) {
        std::vector<double> lam = softmax_lambda(la);
        double s = 0.0;
        for (int i = 0; i < k; ++i) s += lam[i] * v[i];
        return s;
      };
      std::vector<double> grad = softmax_arch_grad(softmax_lambda(log_alpha), v);
      for (int i = 0; i < k; ++i) {
        double num = central_difference(f, log_alpha, i, 1e-6);
        REQUIRE(std::abs(grad[i] - num) < 1e-8);
      }
    }
  }
}

TEST_CASE("tempered gumbel mixture weights", "[nas]") {
  SECTION("worked example at unit temperature") {
    std::vector<double> lam =
        gumbel_lambda_from_noise({std::log(2.0), 0.0}, 1.0, {0.0, 0.0});
    REQUIRE(lam[0] == Catch::Approx(2.0 / 3.0).margin(1e-15));
    REQUIRE(lam[1] == Catch::Approx(1.0 / 3.0).margin(1e-15));
  }
  SECTION("halving the temperature squares the odds") {
    std::vector<double> lam =
        gumbel_lambda_from_noise({std::log(2.0), 0.0}, 0.5, {0.0, 0.0});
    REQUIRE(lam[0] == Catch::Approx(0.8).margin(1e-15));
    REQUIRE(lam[1] == Catch::Approx(0.2).margin(1e-15));
  }
  SECTION("constant noise cancels like a shift") {
    std::vector<double> base =
        gumbel_lambda_from_noise({0.4, -0.3, 1.1}, 1.0, {0.0, 0.0, 0.0});
    std::vector<double> shifted =
        gumbel_lambda_from_noise({0.4, -0.3, 1.1}, 1.0, {2.5, 2.5, 2.5});
    for (int i = 0; i < 3; ++i)
      REQUIRE(base[i] == Catch::Approx(shifted[i]).margin(1e-12));
  }
  SECTION("argument validation") {
    REQUIRE_THROWS_AS(gumbel_lambda_from_noise({0.0}, 0.0, {0.0}), ValueError);
    REQUIRE_THROWS_AS(gumbel_lambda_from_noise({0.0}, -1.0, {0.0}), ValueError);
    REQUIRE_THROWS_AS(gumbel_lambda_from_noise({0.0, 0.0}, 1.0, {0.0}),
                      ShapeError);
  }
  SECTION("drawing retains the noise that produced the weights") {
    Rng rng(55, 3);
    std::vector<double> log_alpha{0.2, -0.9, 0.5};
    GumbelSample s = gumbel_lambda(log_alpha, 0.7, rng);
    REQUIRE(s.noise.size() == 3);
    std::vector<double> redo = gumbel_lambda_from_noise(log_alpha, 0.7, s.noise);
    for (int i = 0; i < 3; ++i) REQUIRE(same_bits(s.lambda[i], redo[i]));
  }
  SECTION("argmax frequencies follow the softmax probabilities") {
    // The max of log alpha plus Gumbel noise selects choice i with
    // probability softmax(log alpha)_i.
    Rng rng(88, 1);
    std::vector<double> log_alpha{std::log(2.0), 0.0};
    int wins = 0;
    const int draws = 3000;
    for (int i = 0; i < draws; ++i) {
      GumbelSample s = gumbel_lambda(log_alpha, 1.0, rng);
      if (s.lambda[0] > s.lambda[1]) ++wins;
    }
    double freq = static_cast<double>(wins) / draws;
    REQUIRE(std::abs(freq - 2.0 / 3.0) < 0.03);
  }
}

TEST_CASE("gumbel architecture gradient", "[nas]") {
  SECTION("single sample equals the softmax gradient over temperature") {
    std::vector<double> lam = softmax_lambda({0.3, -0.6, 1.2});
    std::vector<double> v{2.0, -1.0, 0.5};
    double t = 0.25;
    std::vector<double> expect = softmax_arch_grad(lam, v);
    std::vector<double> got = gumbel_arch_grad({ArchSample{lam, v}}, t);
    for (int i = 0; i < 3; ++i)
      REQUIRE(got[i] == Catch::Approx(expect[i] / t).epsilon(1e-14));
  }
  SECTION("two samples average") {
    std::vector<double> lam1 = softmax_lambda({0.0, 1.0});
    std::vector<double> lam2 = softmax_lambda({-0.5, 0.2});
    std::vector<double> v1{1.0, -1.0}, v2{0.3, 0.9};
    double t = 0.8;
    std::vector<double> g1 = softmax_arch_grad(lam1, v1);
    std::vector<double> g2 = softmax_arch_grad(lam2, v2);
    std::vector<double> got =
        gumbel_arch_grad({ArchSample{lam1, v1}, ArchSample{lam2, v2}}, t);
    for (int i = 0; i < 2; ++i)
      REQUIRE(got[i] ==
              Catch::Approx((g1[i] + g2[i]) / (2.0 * t)).epsilon(1e-13));
  }
  SECTION("repeating one sample matches using it once") {
    std::vector<double> lam = softmax_lambda({0.1, 0.7, -0.2});
    std::vector<double> v{0.4, -1.5, 2.2};
    double t = 0.8;
    std::vector<double> once = gumbel_arch_grad({ArchSample{lam, v}}, t);
    std::vector<double> thrice = gumbel_arch_grad(
        {ArchSample{lam, v}, ArchSample{lam, v}, ArchSample{lam, v}}, t);
    for (int i = 0; i < 3; ++i)
      REQUIRE(thrice[i] == Catch::Approx(once[i]).epsilon(1e-13));
  }
  SECTION("argument validation") {
    REQUIRE_THROWS_AS(gumbel_arch_grad({}, 1.0), ValueError);
    REQUIRE_THROWS_AS(
        gumbel_arch_grad({ArchSample{{0.5, 0.5}, {1.0, 2.0}}}, 0.0),
        ValueError);
    REQUIRE_THROWS_AS(gumbel_arch_grad({ArchSample{{0.5, 0.5}, {1.0}}}, 1.0),
                      ShapeError);
  }
}

TEST_CASE("temperature annealing schedule", "[nas]") {
  TemperatureSchedule sch;  // 1.0 down to 0.03
  SECTION("endpoints are exact") {
    REQUIRE(anneal_temperature(sch, 0, 1000) == 1.0);
    REQUIRE(anneal_temperature(sch, 1000, 1000) == 0.03);
  }
  SECTION("midpoint") {
    REQUIRE(anneal_temperature(sch, 500, 1000) ==
            Catch::Approx(0.515).margin(1e-12));
  }
  SECTION("monotone when start exceeds end") {
    double prev = anneal_temperature(sch, 0, 100);
    for (int s = 1; s <= 100; ++s) {
      double t = anneal_temperature(sch, s, 100);
      REQUIRE(t < prev);
      prev = t;
    }
  }
  SECTION("argument validation") {
    REQUIRE_THROWS_AS(anneal_temperature(sch, -1, 10), ValueError);
    REQUIRE_THROWS_AS(anneal_temperature(sch, 11, 10), ValueError);
    REQUIRE_THROWS_AS(anneal_temperature(sch, 0, 0), ValueError);
    TemperatureSchedule bad;
    bad.start = 0.0;
    REQUIRE_THROWS_AS(anneal_temperature(bad, 0, 10), ValueError);
  }
}

TEST_CASE("method names round-trip", "[nas]") {
  for (NasMethod m : {NasMethod::softmax, NasMethod::gumbel,
                      NasMethod::pipe_softmax, NasMethod::pipe_gumbel})
    REQUIRE(method_from_name(method_name(m)) == m);
  REQUIRE(is_pipelined(NasMethod::pipe_softmax));
  REQUIRE(is_pipelined(NasMethod::pipe_gumbel));
  REQUIRE_FALSE(is_pipelined(NasMethod::softmax));
  REQUIRE(uses_gumbel(NasMethod::pipe_gumbel));
  REQUIRE_FALSE(uses_gumbel(NasMethod::pipe_softmax));
  REQUIRE_THROWS_AS(method_from_name("darts"), ValueError);
}

TEST_CASE("search config validation", "[nas]") {
  NasConfig good;
  REQUIRE_NOTHROW(good.validate());
  auto broken = [&](auto mutate) {
    NasConfig c;
    mutate(c);
    REQUIRE_THROWS_AS(c.validate(), ValueError);
  };
  broken([](NasConfig& c) { c.gumbel_samples = 0; });
  broken([](NasConfig& c) { c.temperature.end = 0.0; });
  broken([](NasConfig& c) { c.temperature.start = -1.0; });
  broken([](NasConfig& c) { c.eta = -0.5; });
  broken([](NasConfig& c) { c.heldout_fraction = 0.0; });
  broken([](NasConfig& c) { c.heldout_fraction = 1.0; });
  broken([](NasConfig& c) { c.search_epochs = -1; });
  broken([](NasConfig& c) { c.top_n = 0; });
}

TEST_CASE("argmax candidate picks the largest weight, lowest index on ties",
          "[nas]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 2, 1, {2, 4});
  ArchitectureWeights w = ArchitectureWeights::zeros(spec);
  w.log_left[0] = {0.0, 3.0, 3.0};   // tie between 1 and 2
  w.log_left[1] = {1.0, 1.0, 1.0};   // full tie
  w.log_right[0] = {0.0, 2.0};
  w.log_right[1] = {5.0, -1.0};
  w.log_dim[0] = {0.5, 0.5};
  w.log_dim[1] = {-2.0, 7.0};
  CandidateArchitecture cand = argmax_candidate(w, spec);
  REQUIRE(cand.layers[0].left == 1);
  REQUIRE(cand.layers[1].left == 0);
  REQUIRE(cand.layers[0].right == 1);
  REQUIRE(cand.layers[1].right == 0);
  REQUIRE(cand.layers[0].dim_index == 0);
  REQUIRE(cand.layers[1].dim_index == 1);

  SECTION("unsearched groups take the default") {
    SearchSpaceSpec dims_only = spec;
    dims_only.search_contexts = false;
    dims_only.defaults = {LayerChoice{2, 1, 0}, LayerChoice{1, 0, 1}};
    ArchitectureWeights wd = ArchitectureWeights::zeros(dims_only);
    wd.log_dim[0] = {1.0, 0.0};
    wd.log_dim[1] = {0.0, 1.0};
    CandidateArchitecture c = argmax_candidate(wd, dims_only);
    REQUIRE(c.layers[0].left == 2);
    REQUIRE(c.layers[0].right == 1);
    REQUIRE(c.layers[0].dim_index == 0);
    REQUIRE(c.layers[1].left == 1);
    REQUIRE(c.layers[1].dim_index == 1);
  }
}

TEST_CASE("penalty table holds per-choice parameter counts", "[nas]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 2, 2, {2, 4, 8});
  Rng rng(17, 0);
  SuperNetwork net = make_supernet(spec, 3, 6, 4, rng);
  CandidateArchitecture cond;
  cond.layers = {LayerChoice{1, 2, 1}, LayerChoice{0, 1, 2}};
  PenaltyTable table = build_penalty_table(net, cond);

  REQUIRE(table.left.size() == 2);
  REQUIRE(table.left[0].size() == 3);
  REQUIRE(table.dim[1].size() == 3);
  for (int l = 0; l < 2; ++l) {
    for (int c = 0; c <= 2; ++c) {
      LayerChoice v = cond.layers[l];
      v.left = c;
      REQUIRE(table.left[l][c] ==
              static_cast<double>(
                  candidate_param_count(net.layers[l], v, spec.dim_choices)));
    }
    for (int r = 0; r <= 2; ++r) {
      LayerChoice v = cond.layers[l];
      v.right = r;
      REQUIRE(table.right[l][r] ==
              static_cast<double>(
                  candidate_param_count(net.layers[l], v, spec.dim_choices)));
    }
    for (int i = 0; i < 3; ++i) {
      LayerChoice v = cond.layers[l];
      v.dim_index = i;
      REQUIRE(table.dim[l][i] ==
              static_cast<double>(
                  candidate_param_count(net.layers[l], v, spec.dim_choices)));
    }
    // Any nonzero offset doubles its factor; wider bottlenecks cost more.
    REQUIRE(table.left[l][1] > table.left[l][0]);
    REQUIRE(table.left[l][1] == table.left[l][2]);
    REQUIRE(table.dim[l][0] < table.dim[l][1]);
    REQUIRE(table.dim[l][1] < table.dim[l][2]);
  }
  CandidateArchitecture short_cond;
  short_cond.layers = {LayerChoice{0, 0, 0}};
  REQUIRE_THROWS_AS(build_penalty_table(net, short_cond), ValueError);
}

TEST_CASE("penalized loss worked example", "[nas]") {
  ArchLambdas lam;
  lam.dim = {{0.5, 0.5}};
  PenaltyTable table;
  table.dim = {{10.0, 30.0}};
  REQUIRE(penalized_loss(1.25, lam, table, 0.1) == Catch::Approx(3.25));
  REQUIRE(penalized_loss(1.25, lam, table, 0.0) == 1.25);

  ArchLambdas bad;
  bad.dim = {{1.0}};
  REQUIRE_THROWS_AS(penalized_loss(0.0, bad, table, 0.1), ShapeError);
  PenaltyTable missing;
  REQUIRE_THROWS_AS(penalized_loss(0.0, lam, missing, 0.1), ShapeError);
  REQUIRE_THROWS_AS(penalized_loss(0.0, lam, table, -1.0), ValueError);
}

TEST_CASE("architecture gradients match finite differences for every method",
          "[nas][grad]") {
  // Trials rotate through the four methods. The softmax trials run the
  // plain chain rule shared by softmax and the second stage of
  // pipe-softmax; the gumbel trials pin their noise so the tempered
  // objective is a fixed differentiable function of log alpha.
  Rng master(2024, 0);
  const double h = 1e-6;
  const std::vector<std::vector<int>> dim_menu{{1, 2}, {2, 3}, {1, 2, 4}};
  for (int trial = 0; trial < 50; ++trial) {
    bool gum = trial % 4 == 1 || trial % 4 == 3;
    SearchSpaceSpec spec =
        ctx_dim_spec(1 + trial % 2, 1 + trial % 2, 1 + (trial / 2) % 2,
                     dim_menu[trial % 3]);
    if (trial % 7 == 3) spec.search_dims = false;
    if (trial % 7 == 5) spec.search_contexts = false;

    Rng init = master.split(trial);
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    randomize_arch(net.arch, init, 0.6);
    Dataset data = random_dataset(2, 5, 3, 3, init);
    std::vector<const Sequence*> batch = all_items(data);

    double eta = (trial % 2) ? 0.5 : 0.0;
    PenaltyTable table;
    if (eta > 0.0)
      table = build_penalty_table(net, argmax_candidate(net.arch, spec));
    double t = gum ? std::vector<double>{0.7, 0.25, 1.3}[trial % 3] : 0.0;
    int j = gum ? 1 + trial % 3 : 1;
    std::vector<ArchLambdas> noise =
        gum ? draw_noise(net.arch, j, init) : std::vector<ArchLambdas>{};

    auto loss_at = [&]() {
      return arch_gradients_for_batch(net, batch,
                                      samples_at(net.arch, t, noise), t,
                                      eta > 0.0 ? &table : nullptr, eta,
                                      nullptr, nullptr);
    };
    ArchGradients ag;
    double loss0 = arch_gradients_for_batch(
        net, batch, samples_at(net.arch, t, noise), t,
        eta > 0.0 ? &table : nullptr, eta, nullptr, &ag);
    REQUIRE(std::isfinite(loss0));
    const double fallback = 1e-7 * (1.0 + std::abs(loss0));

    auto check = [&](double* slot, double analytic) {
      double orig = *slot;
      *slot = orig + h;
      double fp = loss_at();
      *slot = orig - h;
      double fm = loss_at();
      *slot = orig;
      double fd = (fp - fm) / (2.0 * h);
      CAPTURE(trial, gum, t, j, eta, analytic, fd);
      bool close = gradient_rel_error(analytic, fd) < 1e-5 ||
                   std::abs(analytic - fd) < fallback;
      REQUIRE(close);
    };
    for (std::size_t l = 0; l < net.arch.log_left.size(); ++l)
      for (std::size_t i = 0; i < net.arch.log_left[l].size(); ++i)
        check(&net.arch.log_left[l][i], ag.left[l][i]);
    for (std::size_t l = 0; l < net.arch.log_right.size(); ++l)
      for (std::size_t i = 0; i < net.arch.log_right[l].size(); ++i)
        check(&net.arch.log_right[l][i], ag.right[l][i]);
    for (std::size_t l = 0; l < net.arch.log_dim.size(); ++l)
      for (std::size_t i = 0; i < net.arch.log_dim[l].size(); ++i)
        check(&net.arch.log_dim[l][i], ag.dim[l][i]);
  }
}

TEST_CASE("lower temperature sharpens the weights under pinned noise",
          "[nas]") {
  std::vector<double> log_alpha{std::log(2.0), 0.0};
  std::vector<double> noise{0.3, -0.4};
  auto max_of = [](const std::vector<double>& v) {
    return *std::max_element(v.begin(), v.end());
  };
  double hi = max_of(gumbel_lambda_from_noise(log_alpha, 1.0, noise));
  double lo = max_of(gumbel_lambda_from_noise(log_alpha, 0.03, noise));
  REQUIRE(lo > hi);
  REQUIRE(lo > 0.999);

  Rng rng(7, 7);
  for (int rep = 0; rep < 25; ++rep) {
    std::vector<double> la{rng.draw_normal(), rng.draw_normal(),
                           rng.draw_normal()};
    std::vector<double> g{rng.draw_gumbel(), rng.draw_gumbel(),
                          rng.draw_gumbel()};
    double before = max_of(gumbel_lambda_from_noise(la, 1.0, g));
    double after = max_of(gumbel_lambda_from_noise(la, 0.03, g));
    REQUIRE(after > before);
  }
}

TEST_CASE("constant shifts of a group's log weights change nothing", "[nas]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 1, 1, {2, 4});
  Rng rng(41, 0);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, rng);
  randomize_arch(net.arch, rng, 0.8);
  Dataset data = random_dataset(2, 5, 3, 3, rng);
  std::vector<const Sequence*> batch = all_items(data);

  ArchLambdas before = softmax_lambdas(net.arch);
  double loss_before = arch_gradients_for_batch(
      net, batch, {before}, 0.0, nullptr, 0.0, nullptr, nullptr);
  CandidateArchitecture pick_before = argmax_candidate(net.arch, spec);
  auto top_before = k_best(build_lattice(net.arch, spec), 3);

  for (double& v : net.arch.log_left[0]) v += 7.5;
  for (double& v : net.arch.log_dim[1]) v -= 3.25;

  ArchLambdas after = softmax_lambdas(net.arch);
  for (std::size_t i = 0; i < before.left[0].size(); ++i)
    REQUIRE(after.left[0][i] ==
            Catch::Approx(before.left[0][i]).margin(1e-12));
  for (std::size_t i = 0; i < before.dim[1].size(); ++i)
    REQUIRE(after.dim[1][i] == Catch::Approx(before.dim[1][i]).margin(1e-12));

  double loss_after = arch_gradients_for_batch(net, batch, {after}, 0.0,
                                               nullptr, 0.0, nullptr, nullptr);
  REQUIRE(loss_after == Catch::Approx(loss_before).margin(1e-9));

  CandidateArchitecture pick_after = argmax_candidate(net.arch, spec);
  auto top_after = k_best(build_lattice(net.arch, spec), 3);
  for (int l = 0; l < 2; ++l) {
    REQUIRE(pick_after.layers[l].left == pick_before.layers[l].left);
    REQUIRE(pick_after.layers[l].right == pick_before.layers[l].right);
    REQUIRE(pick_after.layers[l].dim_index == pick_before.layers[l].dim_index);
  }
  for (std::size_t r = 0; r < top_before.size(); ++r)
    for (int l = 0; l < 2; ++l) {
      REQUIRE(top_after[r].first.layers[l].left ==
              top_before[r].first.layers[l].left);
      REQUIRE(top_after[r].first.layers[l].dim_index ==
              top_before[r].first.layers[l].dim_index);
    }

  SECTION("pinned gumbel weights shift the same way") {
    std::vector<double> la{0.2, -0.7, 1.0};
    std::vector<double> g{1.3, 0.1, -0.5};
    std::vector<double> lam1 = gumbel_lambda_from_noise(la, 0.4, g);
    for (double& v : la) v += 11.0;
    std::vector<double> lam2 = gumbel_lambda_from_noise(la, 0.4, g);
    for (int i = 0; i < 3; ++i)
      REQUIRE(lam1[i] == Catch::Approx(lam2[i]).margin(1e-12));
  }
}

TEST_CASE("search runs are deterministic in the seed", "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 1, 1, {2, 4});
  NasConfig nas;
  nas.method = NasMethod::gumbel;
  nas.gumbel_samples = 2;
  nas.eta = 0.05;
  nas.search_epochs = 2;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 11;

  auto run_once = [&](std::uint64_t seed) {
    TrainConfig t = tcfg;
    t.seed = seed;
    Rng init(seed, streams::kInit);
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    Rng data_rng(3, streams::kData);
    Dataset train = random_dataset(8, 5, 3, 3, data_rng);
    Dataset heldout = random_dataset(4, 5, 3, 3, data_rng);
    SearchSession session(std::move(net), train, heldout, nas, t);
    session.run_all();
    return session.checkpoint();
  };

  Checkpoint a = run_once(11);
  Checkpoint b = run_once(11);
  REQUIRE(a.arrays.size() == b.arrays.size());
  for (std::size_t i = 0; i < a.arrays.size(); ++i) {
    REQUIRE(a.arrays[i].first == b.arrays[i].first);
    REQUIRE(a.arrays[i].second.size() == b.arrays[i].second.size());
    for (std::size_t k = 0; k < a.arrays[i].second.size(); ++k)
      REQUIRE(same_bits(a.arrays[i].second[k], b.arrays[i].second[k]));
  }

  Checkpoint c = run_once(12);
  bool differs = false;
  for (std::size_t i = 0; i < a.arrays.size() && !differs; ++i) {
    if (a.arrays[i].first == "train/rng" || a.arrays[i].first == "train/step")
      continue;
    for (std::size_t k = 0; k < a.arrays[i].second.size(); ++k)
      if (!same_bits(a.arrays[i].second[k], c.arrays[i].second[k])) {
        differs = true;
        break;
      }
  }
  REQUIRE(differs);
}

TEST_CASE("pipelined stages touch disjoint parameters", "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 1, 1, {2, 4});
  NasConfig nas;
  nas.method = NasMethod::pipe_softmax;
  nas.search_epochs = 2;
  nas.stage2_epochs = 2;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 19;

  Rng init(19, streams::kInit);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
  Rng data_rng(4, streams::kData);
  Dataset train = random_dataset(8, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(4, 5, 3, 3, data_rng);

  SearchSession session(std::move(net), train, heldout, nas, tcfg);
  REQUIRE(session.stage1_steps() == 4);
  REQUIRE(session.total_steps() == 6);

  session.run_steps(session.stage1_steps());
  Checkpoint boundary = session.checkpoint();

  // Stage 1 leaves the architecture weights at their initial zeros.
  for (const auto& [name, values] : boundary.arrays)
    if (name.rfind("arch", 0) == 0)
      for (double v : values) REQUIRE(v == 0.0);

  session.run_all();
  Checkpoint final = session.checkpoint();

  auto find = [](const Checkpoint& cp,
                 const std::string& name) -> const std::vector<double>& {
    for (const auto& [n, v] : cp.arrays)
      if (n == name) return v;
    throw std::runtime_error("missing array " + name);
  };
  bool arch_moved = false;
  for (const auto& [name, values] : final.arrays) {
    bool layer_param = name.rfind("layer", 0) == 0 ||
                       name.rfind("classifier", 0) == 0 ||
                       name.rfind("momenta", 0) == 0;
    if (layer_param) {
      const std::vector<double>& was = find(boundary, name);
      REQUIRE(values.size() == was.size());
      for (std::size_t i = 0; i < values.size(); ++i)
        REQUIRE(same_bits(values[i], was[i]));
    }
    if (name.rfind("arch", 0) == 0)
      for (double v : values)
        if (v != 0.0) arch_moved = true;
  }
  REQUIRE(arch_moved);
}

TEST_CASE("an overwhelming penalty drives every group to its cheapest choice",
          "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 2, 2, {2, 4, 8});
  NasConfig nas;
  nas.method = NasMethod::softmax;
  nas.eta = 1e6;
  nas.search_epochs = 1;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 23;

  Rng init(23, streams::kInit);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
  Rng data_rng(5, streams::kData);
  Dataset train = random_dataset(8, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);

  SearchResult res = run_search(net, train, heldout, nas, tcfg);
  CandidateArchitecture cand = argmax_candidate(res.weights, spec);
  for (int l = 0; l < spec.num_layers; ++l) {
    REQUIRE(cand.layers[l].left == 0);
    REQUIRE(cand.layers[l].right == 0);
    REQUIRE(cand.layers[l].dim_index == 0);
  }
}

TEST_CASE("a single-candidate space trains layers with constant weights",
          "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(2, 0, 0, {3});
  NasConfig nas;
  nas.method = NasMethod::softmax;
  nas.search_epochs = 2;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 29;

  Rng init(29, streams::kInit);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
  Rng data_rng(6, streams::kData);
  Dataset train = random_dataset(8, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);
  SuperNetwork before = net;

  SearchResult res = run_search(net, train, heldout, nas, tcfg);
  for (int l = 0; l < 2; ++l) {
    REQUIRE(net.arch.log_left[l][0] == 0.0);
    REQUIRE(net.arch.log_right[l][0] == 0.0);
    REQUIRE(net.arch.log_dim[l][0] == 0.0);
  }
  for (const TrajectoryPoint& p : res.trajectory) REQUIRE(p.lambda == 1.0);
  bool trained = false;
  for (std::size_t i = 0; i < net.layers[0].bias.size(); ++i)
    if (!same_bits(net.layers[0].bias[i], before.layers[0].bias[i]))
      trained = true;
  for (std::size_t i = 0; i < net.classifier_b.size() && !trained; ++i)
    if (!same_bits(net.classifier_b[i], before.classifier_b[i])) trained = true;
  REQUIRE(trained);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run bit for bit",
          "[nas][search]") {
  struct Scenario {
    NasMethod method;
    long long pause;
  };
  for (const Scenario& sc : {Scenario{NasMethod::gumbel, 2},
                             Scenario{NasMethod::pipe_gumbel, 5}}) {
    SearchSpaceSpec spec = ctx_dim_spec(2, 1, 1, {2, 4});
    NasConfig nas;
    nas.method = sc.method;
    nas.gumbel_samples = 2;
    nas.eta = 0.1;
    nas.search_epochs = 2;
    nas.stage2_epochs = 2;
    TrainConfig tcfg;
    tcfg.batch_size = 4;
    tcfg.seed = 31;

    Rng data_rng(7, streams::kData);
    Dataset train = random_dataset(8, 5, 3, 3, data_rng);
    Dataset heldout = random_dataset(4, 5, 3, 3, data_rng);

    auto fresh_net = [&]() {
      Rng init(31, streams::kInit);
      return make_supernet(spec, 3, 4, 3, init);
    };

    SearchSession straight(fresh_net(), train, heldout, nas, tcfg);
    straight.run_all();
    Checkpoint want = straight.checkpoint();

    SearchSession first(fresh_net(), train, heldout, nas, tcfg);
    first.run_steps(sc.pause);
    std::string path = temp_path("resume.tdnf");
    save_checkpoint(first.checkpoint(), path);
    SupernetState state = supernet_from_checkpoint(load_checkpoint(path));
    std::remove(path.c_str());

    SearchSession resumed(std::move(state), train, heldout, nas, tcfg);
    REQUIRE(resumed.step() == sc.pause);
    resumed.run_all();
    Checkpoint got = resumed.checkpoint();

    REQUIRE(got.arrays.size() == want.arrays.size());
    for (std::size_t i = 0; i < got.arrays.size(); ++i) {
      CAPTURE(method_name(sc.method), got.arrays[i].first);
      REQUIRE(got.arrays[i].first == want.arrays[i].first);
      REQUIRE(got.arrays[i].second.size() == want.arrays[i].second.size());
      for (std::size_t k = 0; k < got.arrays[i].second.size(); ++k)
        REQUIRE(same_bits(got.arrays[i].second[k], want.arrays[i].second[k]));
    }
  }
}

TEST_CASE("session argument validation", "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(1, 1, 1, {2});
  NasConfig nas;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  Rng init(1, streams::kInit);
  Rng data_rng(1, streams::kData);
  Dataset train = random_dataset(4, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);

  SECTION("empty training data") {
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    REQUIRE_THROWS_AS(
        SearchSession(std::move(net), Dataset{}, heldout, nas, tcfg),
        TrainingError);
  }
  SECTION("pipelined second stage needs held-out data") {
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    NasConfig pipe = nas;
    pipe.method = NasMethod::pipe_softmax;
    REQUIRE_THROWS_AS(
        SearchSession(std::move(net), train, Dataset{}, pipe, tcfg),
        TrainingError);
  }
  SECTION("resume state must match the schedule and network") {
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    SearchSession session(std::move(net), train, heldout, nas, tcfg);
    session.run_steps(1);
    SupernetState state = supernet_from_checkpoint(session.checkpoint());

    SupernetState bad_m = state;
    bad_m.momenta.pop_back();
    REQUIRE_THROWS_AS(
        SearchSession(std::move(bad_m), train, heldout, nas, tcfg),
        StateError);

    SupernetState bad_s = state;
    bad_s.step = 1000;
    REQUIRE_THROWS_AS(
        SearchSession(std::move(bad_s), train, heldout, nas, tcfg),
        StateError);
  }
  SECTION("running past the schedule is a no-op") {
    SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
    SearchSession session(std::move(net), train, heldout, nas, tcfg);
    session.run_steps(1000000);
    REQUIRE(session.done());
    long long total = session.total_steps();
    REQUIRE(session.step() == total);
    session.run_steps(5);
    REQUIRE(session.step() == total);
  }
}

TEST_CASE("trajectory records every weight of every step", "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(1, 1, 1, {2, 3});
  NasConfig nas;
  nas.search_epochs = 1;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 37;

  Rng init(37, streams::kInit);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
  Rng data_rng(8, streams::kData);
  Dataset train = random_dataset(8, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);

  SearchResult res = run_search(net, train, heldout, nas, tcfg);
  // 2 steps, 1 layer, groups of size 2 + 2 + 2.
  REQUIRE(res.trajectory.size() == 12);
  for (const TrajectoryPoint& p : res.trajectory) {
    REQUIRE((p.step == 1 || p.step == 2));
    REQUIRE(p.layer == 0);
    REQUIRE(p.lambda >= 0.0);
    REQUIRE(p.lambda <= 1.0);
  }
  double sum = 0.0;
  for (const TrajectoryPoint& p : res.trajectory)
    if (p.step == 1 && p.group == AttrTag::left) sum += p.lambda;
  REQUIRE(sum == Catch::Approx(1.0).margin(1e-9));

  SECTION("csv serialization") {
    std::string path = temp_path("traj.csv");
    write_trajectory_csv(path, res.trajectory);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string line;
    std::getline(in, line);
    REQUIRE(line == "step,layer,group,choice,lambda");
    int rows = 0;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      ++rows;
      std::stringstream ss(line);
      std::string field;
      std::getline(ss, field, ',');
      REQUIRE((field == "1" || field == "2"));
      std::getline(ss, field, ',');
      REQUIRE(field == "0");
      std::getline(ss, field, ',');
      REQUIRE((field == "left" || field == "right" || field == "dim"));
      std::getline(ss, field, ',');
      REQUIRE((field == "0" || field == "1"));
      std::getline(ss, field, ',');
      double lam = std::stod(field);
      REQUIRE(lam >= 0.0);
      REQUIRE(lam <= 1.0);
    }
    REQUIRE(rows == 12);
    std::remove(path.c_str());
    REQUIRE_THROWS_AS(
        write_trajectory_csv("/nonexistent/dir/t.csv", res.trajectory),
        IoError);
  }
}

TEST_CASE("two-stage search pins one group while searching the other",
          "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(1, 1, 1, {2, 4});
  NasConfig nas;
  nas.search_epochs = 1;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 43;

  Rng data_rng(9, streams::kData);
  Dataset train = random_dataset(8, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);

  std::vector<SearchSpaceSpec> seen;
  auto factory = [&](const SearchSpaceSpec& s) {
    seen.push_back(s);
    Rng init(43, streams::kInit);
    return make_supernet(s, 3, 4, 3, init);
  };

  CandidateArchitecture cand =
      run_two_stage_search(factory, spec, train, heldout, nas, tcfg);

  REQUIRE(seen.size() == 2);
  REQUIRE(seen[0].search_contexts);
  REQUIRE_FALSE(seen[0].search_dims);
  REQUIRE(seen[0].defaults.size() == 1);
  REQUIRE(seen[0].defaults[0].dim_index == spec.default_choice(0).dim_index);
  REQUIRE_FALSE(seen[1].search_contexts);
  REQUIRE(seen[1].search_dims);

  // The context phase rerun standalone must agree with what the
  // second phase was pinned to.
  Rng init(43, streams::kInit);
  SuperNetwork net_a = make_supernet(seen[0], 3, 4, 3, init);
  run_search(net_a, train, heldout, nas, tcfg);
  CandidateArchitecture ctx = k_best(build_lattice(net_a.arch, seen[0]), 1)[0].first;
  REQUIRE(seen[1].defaults[0].left == ctx.layers[0].left);
  REQUIRE(seen[1].defaults[0].right == ctx.layers[0].right);
  REQUIRE(cand.layers[0].left == ctx.layers[0].left);
  REQUIRE(cand.layers[0].right == ctx.layers[0].right);

  SECTION("requires both groups enabled") {
    SearchSpaceSpec dims_only = spec;
    dims_only.search_contexts = false;
    REQUIRE_THROWS_AS(
        run_two_stage_search(factory, dims_only, train, heldout, nas, tcfg),
        ValueError);
  }
}

TEST_CASE("random baseline keeps the definitional winner", "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(1, 1, 1, {2, 4});
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.epochs = 1;
  tcfg.seed = 47;

  Rng data_rng(10, streams::kData);
  Dataset train = random_dataset(6, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(3, 5, 3, 3, data_rng);

  Rng rng(51, 9);
  BaselineResult res = random_search_baseline(spec, 3, 4, 3, train, heldout, 4,
                                              tcfg, rng);
  REQUIRE(res.samples.size() == 4);

  int want = 0;
  for (int i = 1; i < 4; ++i) {
    const BaselineSample& a = res.samples[i];
    const BaselineSample& b = res.samples[want];
    if (a.val_loss < b.val_loss ||
        (a.val_loss == b.val_loss && a.params < b.params))
      want = i;
  }
  REQUIRE(res.val_loss == res.samples[want].val_loss);
  REQUIRE(res.params == res.samples[want].params);
  for (std::size_t l = 0; l < res.candidate.layers.size(); ++l) {
    REQUIRE(res.candidate.layers[l].left ==
            res.samples[want].candidate.layers[l].left);
    REQUIRE(res.candidate.layers[l].dim_index ==
            res.samples[want].candidate.layers[l].dim_index);
  }

  SECTION("deterministic under the same draw state") {
    Rng rng2(51, 9);
    BaselineResult redo = random_search_baseline(spec, 3, 4, 3, train, heldout,
                                                 4, tcfg, rng2);
    REQUIRE(same_bits(redo.val_loss, res.val_loss));
    REQUIRE(redo.params == res.params);
  }
  SECTION("needs at least one sample") {
    Rng rng3(51, 9);
    REQUIRE_THROWS_AS(random_search_baseline(spec, 3, 4, 3, train, heldout, 0,
                                             tcfg, rng3),
                      ValueError);
  }
}

TEST_CASE("run_search leaves the trained supernet in the caller's handle",
          "[nas][search]") {
  SearchSpaceSpec spec = ctx_dim_spec(1, 1, 1, {2, 4});
  NasConfig nas;
  nas.search_epochs = 1;
  TrainConfig tcfg;
  tcfg.batch_size = 4;
  tcfg.seed = 53;

  Rng init(53, streams::kInit);
  SuperNetwork net = make_supernet(spec, 3, 4, 3, init);
  Rng data_rng(11, streams::kData);
  Dataset train = random_dataset(4, 5, 3, 3, data_rng);
  Dataset heldout = random_dataset(2, 5, 3, 3, data_rng);

  SearchResult res = run_search(net, train, heldout, nas, tcfg);
  for (std::size_t i = 0; i < net.arch.log_left[0].size(); ++i)
    REQUIRE(same_bits(net.arch.log_left[0][i], res.weights.log_left[0][i]));
  REQUIRE_FALSE(res.trajectory.empty());
  REQUIRE(res.trajectory.back().step ==
          static_cast<long long>(train.items.size() + tcfg.batch_size - 1) /
              tcfg.batch_size);
}
