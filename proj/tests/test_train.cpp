#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "ddissect/train.hpp"
#include "gradcheck.hpp"

using Catch::Approx;
using namespace ddissect;
namespace ops = ddissect::ops;
namespace fs = std::filesystem;

namespace {

NetConfig tiny_config(int hw = 16) {
  NetConfig c;
  c.in_ch = 3;
  c.h = hw;
  c.w = hw;
  c.stages = {
      {"enc1", 6, 3, 2, 1, true},   {"mff", 8, 3, 1, 1, true},
      {"dlayer", 8, 3, 1, 2, true}, {"rconv0", 4, 1, 1, 1, true},
      {"head", 1, 1, 1, 1, false},
  };
  c.interpretable_layers = {"mff", "dlayer"};
  return c;
}

template <class S>
TensorT<S> responses_tensor(const std::vector<std::vector<S>>& rows) {
  const int K = static_cast<int>(rows.size());
  const int n_bins = static_cast<int>(rows[0].size());
  std::vector<S> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return TensorT<S>::from_data({1, K, n_bins, 1}, std::move(flat));
}

// Assembles a BatchResponsesT directly (bypassing activations) for loss math
// tests; gradient-path tests go through batch_bin_responses instead.
template <class S>
BatchResponsesT<S> make_responses(const std::string& layer,
                                  const std::vector<std::vector<S>>& rows,
                                  const std::vector<char>& present) {
  BatchResponsesT<S> br;
  br.layer = layer;
  br.r = responses_tensor(rows);
  br.present = present;
  br.counts.assign(present.size(), 0);
  for (std::size_t d = 0; d < present.size(); ++d) br.counts[d] = present[d] ? 10 : 0;
  return br;
}

}  // namespace

TEST_CASE("assign_bins follows the assignment rule") {
  SECTION("K multiple of N_b") {
    auto d = assign_bins(128, 64);
    REQUIRE(d[0] == 0);
    REQUIRE(d[5] == 2);
    REQUIRE(d[127] == 63);
  }
  SECTION("K below N_b uses effective N_b = K") {
    auto d = assign_bins(32, 64);
    for (int k = 0; k < 32; ++k) REQUIRE(d[static_cast<std::size_t>(k)] == k);
  }
  SECTION("K not a multiple of N_b stays total and covers all bins") {
    auto d = assign_bins(48, 64);
    std::vector<int> hits(48, 0);
    for (int k = 0; k < 48; ++k) ++hits[static_cast<std::size_t>(d[static_cast<std::size_t>(k)])];
    for (int b = 0; b < 48; ++b) REQUIRE(hits[static_cast<std::size_t>(b)] == 1);
  }
  SECTION("coverage and monotonicity for arbitrary sizes") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> pick(2, 200);
    for (int t = 0; t < 200; ++t) {
      const int K = pick(rng), NB = pick(rng);
      auto d = assign_bins(K, NB);
      const int eff = std::min(K, NB);
      std::vector<char> hit(static_cast<std::size_t>(eff), 0);
      int prev = 0;
      for (int k = 0; k < K; ++k) {
        const int dk = d[static_cast<std::size_t>(k)];
        REQUIRE(dk >= 0);
        REQUIRE(dk < eff);
        REQUIRE(dk >= prev);
        prev = dk;
        hit[static_cast<std::size_t>(dk)] = 1;
      }
      for (char h : hit) REQUIRE(h == 1);
    }
  }
}

TEST_CASE("batch_bin_responses") {
  SECTION("single sample batch equals dissect accumulate") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<float> dist(-1.f, 1.f);
    std::vector<float> av(3 * 9);
    for (auto& v : av) v = dist(rng);
    auto act = Tensor::from_data({1, 3, 3, 3}, std::move(av));
    BinMap bm;
    bm.h = 6;
    bm.w = 6;
    bm.bins.assign(36, 0);
    for (int i = 0; i < 36; ++i) bm.bins[static_cast<std::size_t>(i)] = i % 4 == 0 ? 2 : (i % 3);
    auto br = batch_bin_responses<float>("l", act, {bm}, 6);

    ResponseTable table("l", 3, 6);
    table.accumulate(act, bm);
    for (int k = 0; k < 3; ++k)
      for (int d = 0; d < 6; ++d) {
        if (!table.defined(d)) {
          REQUIRE_FALSE(static_cast<bool>(br.present[static_cast<std::size_t>(d)]));
          continue;
        }
        REQUIRE(br.r.data()[static_cast<std::size_t>(k) * 6 + d] ==
                Approx(table.response(k, d)).margin(1e-6));
      }
  }
  SECTION("constant activation gives the constant on every present bin") {
    auto act = Tensor::full({2, 2, 4, 4}, 1.75f);
    BinMap a, b;
    a.h = a.w = 4;
    b.h = b.w = 4;
    a.bins.assign(16, 1);
    b.bins.assign(16, 3);
    auto br = batch_bin_responses<float>("l", act, {a, b}, 5);
    REQUIRE(br.present[1]);
    REQUIRE(br.present[3]);
    REQUIRE_FALSE(br.present[0]);
    for (int k = 0; k < 2; ++k) {
      REQUIRE(br.r.data()[static_cast<std::size_t>(k) * 5 + 1] == Approx(1.75f));
      REQUIRE(br.r.data()[static_cast<std::size_t>(k) * 5 + 3] == Approx(1.75f));
    }
  }
}

TEST_CASE("batch_bin_responses gradient") {
  std::mt19937_64 rng(43);
  using DT = TensorT<double>;
  using DTape = TapeT<double>;
  BinMap bm1, bm2;
  bm1.h = bm1.w = 6;
  bm2.h = bm2.w = 6;
  bm1.bins.assign(36, -1);
  bm2.bins.assign(36, -1);
  for (int i = 0; i < 36; ++i) {
    bm1.bins[static_cast<std::size_t>(i)] = i % 5 == 0 ? -1 : i % 4;
    bm2.bins[static_cast<std::size_t>(i)] = (i + 1) % 3;
  }
  std::vector<DT> in = {ddtest::random_tensor({2, 3, 4, 4}, rng)};
  auto weights = ddtest::random_tensor({1, 3, 6, 1}, rng, -1, 1, 0, false);
  ddtest::check_gradients(
      [&](std::vector<DT>& v, DTape* t) {
        auto br = batch_bin_responses<double>("l", v[0], {bm1, bm2}, 6, t);
        return ops::reduce_sum(ops::mul(br.r, weights, t), {}, t);
      },
      in);
}

TEST_CASE("reg_loss examples") {
  SECTION("worked single-unit example") {
    auto br = make_responses<float>("l", {{2.4f, 0.8f, 0.8f, 0.8f}}, {1, 1, 1, 1});
    auto loss = reg_loss<float>({br}, 0.1);
    REQUIRE(loss.data()[0] == Approx(-0.05).margin(1e-7));
  }
  SECTION("one-hot units saturate at -lambda") {
    auto br = make_responses<float>("l", {{3.f, 0.f, 0.f}, {0.f, 5.f, 0.f}}, {1, 1, 1});
    auto loss = reg_loss<float>({br}, 0.1);
    REQUIRE(loss.data()[0] == Approx(-0.1).margin(1e-7));
  }
  SECTION("uniform units give zero") {
    auto br = make_responses<float>("l", {{2.f, 2.f, 2.f}}, {1, 1, 1});
    auto loss = reg_loss<float>({br}, 0.1);
    REQUIRE(loss.data()[0] == Approx(0.0).margin(1e-7));
  }
  SECTION("argmax only over present bins") {
    // bin 0 has a huge response but is absent from the batch
    auto br = make_responses<float>("l", {{9.f, 2.4f, 0.8f, 0.8f}}, {0, 1, 1, 1});
    auto loss = reg_loss<float>({br}, 0.1);
    REQUIRE(loss.data()[0] == Approx(-0.1 * 0.5).margin(1e-7));
  }
  SECTION("layer with fewer than two present bins contributes zero") {
    auto br = make_responses<float>("l", {{1.f, 2.f}}, {1, 0});
    auto loss = reg_loss<float>({br}, 0.1);
    REQUIRE(loss.data()[0] == 0.f);
  }
}

TEST_CASE("assign_loss examples") {
  AssignmentTable at;
  at.n_bins = 4;

  SECTION("assigned bin holds the max") {
    at.by_layer["l"] = {0};
    auto br = make_responses<float>("l", {{2.4f, 0.8f, 0.8f, 0.8f}}, {1, 1, 1, 1});
    auto loss = assign_loss<float>({br}, at, 0.1);
    REQUIRE(loss.data()[0] == Approx(-0.05).margin(1e-7));
  }
  SECTION("assigned bin is not the max") {
    at.by_layer["l"] = {1};
    auto br = make_responses<float>("l", {{2.4f, 0.8f, 0.8f, 0.8f}}, {1, 1, 1, 1});
    auto loss = assign_loss<float>({br}, at, 0.1);
    // term = (0.8 - 4/3) / (0.8 + 4/3) = -0.25 -> contribution +0.025
    REQUIRE(loss.data()[0] == Approx(0.025).margin(1e-7));
  }
  SECTION("absent assigned bin disregards the unit") {
    at.by_layer["l"] = {0, 2};
    auto br = make_responses<float>("l",
                                    {{5.f, 1.f, 0.f, 1.f}, {7.f, 3.f, 0.f, 1.f}},
                                    {1, 1, 0, 1});
    // unit 1 (d_k = 2 absent) is disregarded; unit 0: a=5, m=1
    auto loss = assign_loss<float>({br}, at, 0.1);
    const double a = 5, m = 1;
    REQUIRE(loss.data()[0] == Approx(-0.1 * ((a - m) / (a + m))).margin(1e-7));
  }
  SECTION("no eligible unit -> zero") {
    at.by_layer["l"] = {2, 2};
    auto br = make_responses<float>("l", {{5.f, 1.f, 0.f, 1.f}, {1.f, 2.f, 0.f, 1.f}},
                                    {1, 1, 0, 1});
    auto loss = assign_loss<float>({br}, at, 0.1);
    REQUIRE(loss.data()[0] == 0.f);
  }
}

TEST_CASE("loss term bounds") {
  std::mt19937_64 rng(59);
  std::uniform_real_distribution<float> val(-4.f, 4.f);
  AssignmentTable at;
  at.n_bins = 8;
  at.by_layer["l"] = assign_bins(6, 8);
  for (int t = 0; t < 300; ++t) {
    std::vector<std::vector<float>> rows(6, std::vector<float>(8));
    std::vector<char> present(8, 0);
    int n_present = 0;
    for (int d = 0; d < 8; ++d)
      if (rng() % 3 != 0) {
        present[static_cast<std::size_t>(d)] = 1;
        ++n_present;
      }
    if (n_present < 2) {
      present[0] = present[1] = 1;
    }
    for (auto& r : rows)
      for (auto& v : r) v = val(rng);
    auto br = make_responses<float>("l", rows, present);
    const double lambda = 0.1;
    const double lr = reg_loss<float>({br}, lambda).data()[0];
    const double la = assign_loss<float>({br}, at, lambda).data()[0];
    REQUIRE(lr >= -lambda - 1e-7);
    REQUIRE(lr <= lambda + 1e-7);
    REQUIRE(la >= -lambda - 1e-7);
    REQUIRE(la <= lambda + 1e-7);
  }
}

TEST_CASE("absent-bin units contribute exactly zero gradient through the lambda term") {
  // crafted batch: unit 1's assigned bin (3) never occurs
  AssignmentTable at;
  at.n_bins = 4;
  at.by_layer["l"] = {0, 3};
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<float> dist(0.1f, 2.f);
  std::vector<float> av(2 * 2 * 16);
  for (auto& v : av) v = dist(rng);
  auto act = Tensor::from_data({2, 2, 4, 4}, std::move(av), true);
  BinMap a, b;
  a.h = a.w = 4;
  b.h = b.w = 4;
  a.bins.assign(16, 0);
  b.bins.assign(16, 1);
  for (int i = 0; i < 8; ++i) b.bins[static_cast<std::size_t>(i)] = 2;

  Tape tape;
  auto br = batch_bin_responses<float>("l", act, {a, b}, 4, &tape);
  auto loss = assign_loss<float>({br}, at, 0.1, &tape);
  tape.backward(loss);

  REQUIRE(act.has_grad());
  const long long plane = 16;
  bool unit0_nonzero = false;
  for (int i = 0; i < 2; ++i) {
    for (long long px = 0; px < plane; ++px) {
      if (act.grad()[static_cast<std::size_t>((i * 2 + 0) * plane + px)] != 0.f)
        unit0_nonzero = true;
      REQUIRE(act.grad()[static_cast<std::size_t>((i * 2 + 1) * plane + px)] == 0.f);
    }
  }
  REQUIRE(unit0_nonzero);

  SECTION("loss value invariant to the disregarded unit's activation") {
    const float before = loss.data()[0];
    auto act2 = act.clone();
    for (int i = 0; i < 2; ++i)
      for (long long px = 0; px < plane; ++px)
        act2.data()[static_cast<std::size_t>((i * 2 + 1) * plane + px)] += 3.21f;
    auto br2 = batch_bin_responses<float>("l", act2, {a, b}, 4);
    auto loss2 = assign_loss<float>({br2}, at, 0.1);
    REQUIRE(loss2.data()[0] == before);
  }
}

TEST_CASE("selectivity loss gradients match finite differences") {
  std::mt19937_64 rng(67);
  using DT = TensorT<double>;
  using DTape = TapeT<double>;
  // responses kept away from 0 (abs kink) and from ties (argmax jumps)
  std::vector<DT> in = {ddtest::random_tensor({1, 4, 6, 1}, rng, 0.3, 2.0)};
  {
    auto v = in[0].data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.01 * static_cast<double>(i);
  }
  std::vector<char> present = {1, 1, 0, 1, 1, 1};
  auto fake = [&](const DT& r) {
    BatchResponsesT<double> br;
    br.layer = "l";
    br.r = r;
    br.present = present;
    br.counts.assign(6, 10);
    return br;
  };
  SECTION("regularize") {
    ddtest::check_gradients(
        [&](std::vector<DT>& v, DTape* t) {
          v[0].set_requires_grad(true);
          return reg_loss<double>({fake(v[0])}, 0.1, t);
        },
        in, 1e-4, 1e-4);
  }
  SECTION("assign") {
    AssignmentTable at;
    at.n_bins = 6;
    at.by_layer["l"] = {0, 1, 3, 4};
    ddtest::check_gradients(
        [&](std::vector<DT>& v, DTape* t) {
          v[0].set_requires_grad(true);
          return assign_loss<double>({fake(v[0])}, at, 0.1, t);
        },
        in, 1e-4, 1e-4);
  }
}

TEST_CASE("base_depth_loss") {
  auto gt = Tensor::from_data({1, 1, 2, 2}, {1.f, 2.f, 3.f, 4.f});
  auto valid = Tensor::full({1, 1, 2, 2}, 1.f);
  SECTION("zero at the target") {
    REQUIRE(base_depth_loss(gt, gt, valid).data()[0] == 0.f);
  }
  SECTION("unit offset gives one") {
    auto pred = Tensor::from_data({1, 1, 2, 2}, {2.f, 3.f, 4.f, 5.f});
    REQUIRE(base_depth_loss(pred, gt, valid).data()[0] == Approx(1.0));
  }
  SECTION("gradient is sign/count") {
    auto pred = Tensor::from_data({1, 1, 2, 2}, {2.f, 1.f, 3.5f, 4.f}, true);
    Tape tape;
    auto loss = base_depth_loss(pred, gt, valid, &tape);
    tape.backward(loss);
    REQUIRE(pred.grad()[0] == Approx(0.25));
    REQUIRE(pred.grad()[1] == Approx(-0.25));
    REQUIRE(pred.grad()[2] == Approx(0.25));
    REQUIRE(pred.grad()[3] == Approx(0.0));  // pred == gt, subgradient 0
  }
}

TEST_CASE("composite loss gradient on a tiny net") {
  // full net + assignment loss on a 2-sample batch, all parameters
  auto cfg = tiny_config(16);
  auto net = NetworkT<double>::build(cfg, 3);
  SceneConfig scfg;
  scfg.h = scfg.w = 16;
  auto s0 = generate_sample(11, scfg);
  auto s1 = generate_sample(12, scfg);
  auto bins = BinningScheme::sid(scfg.d_min, scfg.d_max, 8);

  auto to_double = [](const Tensor& t) {
    std::vector<double> v(t.data().begin(), t.data().end());
    return TensorT<double>::from_data(t.shape(), std::move(v));
  };
  TensorT<double> images = TensorT<double>::zeros({2, 3, 16, 16});
  TensorT<double> depths = TensorT<double>::zeros({2, 1, 16, 16});
  TensorT<double> valids = TensorT<double>::zeros({2, 1, 16, 16});
  auto copy_into = [](TensorT<double>& dst, const Tensor& src, int i) {
    for (long long j = 0; j < src.size(); ++j)
      dst.data()[static_cast<std::size_t>(i * src.size() + j)] =
          static_cast<double>(src.data()[static_cast<std::size_t>(j)]);
  };
  copy_into(images, s0.image, 0);
  copy_into(images, s1.image, 1);
  copy_into(depths, s0.depth, 0);
  copy_into(depths, s1.depth, 1);
  copy_into(valids, s0.valid, 0);
  copy_into(valids, s1.valid, 1);
  std::vector<BinMap> bm = {discretize(to_double(s0.depth), to_double(s0.valid), bins),
                            discretize(to_double(s1.depth), to_double(s1.valid), bins)};

  AssignmentTable at;
  at.n_bins = 8;
  at.by_layer["mff"] = assign_bins(8, 8);
  at.by_layer["dlayer"] = assign_bins(8, 8);

  auto loss_fn = [&](std::vector<TensorT<double>>&, TapeT<double>* t) {
    auto fwd = net.forward(images, {"mff", "dlayer"}, t);
    auto base = base_depth_loss(fwd.pred, depths, valids, t);
    std::vector<BatchResponsesT<double>> rs;
    rs.push_back(batch_bin_responses<double>("mff", fwd.activations.at("mff"), bm, 8, t));
    rs.push_back(batch_bin_responses<double>("dlayer", fwd.activations.at("dlayer"), bm, 8, t));
    auto term = assign_loss<double>(rs, at, 0.1, t);
    return ops::add(base, term, t);
  };
  std::vector<TensorT<double>> params;
  for (auto* p : net.parameters()) params.push_back(*p);
  ddtest::check_gradients(loss_fn, params, 1e-3, 1e-4);
}

TEST_CASE("fit") {
  auto dir = fs::temp_directory_path() / "ddissect_fit";
  fs::remove_all(dir);
  SceneConfig scfg;
  scfg.h = scfg.w = 16;
  auto manifest = generate_dataset(1234, 12, scfg, dir, "train");

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch = 4;
  tc.n_bins = 8;
  tc.seed = 9;

  SECTION("assign mode with lambda 0 matches baseline trajectories") {
    auto cfg = tiny_config(16);
    auto net_a = Network::build(cfg, 77);
    auto net_b = Network::build(cfg, 77);
    TrainConfig ta = tc;
    ta.mode = TrainMode::baseline;
    TrainConfig tb = tc;
    tb.mode = TrainMode::assign;
    tb.lambda = 0.0;
    fit(net_a, manifest, ta);
    fit(net_b, manifest, tb);
    auto pa = net_a.parameters(), pb = net_b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
      for (long long j = 0; j < pa[i]->size(); ++j)
        REQUIRE(pa[i]->data()[j] == pb[i]->data()[j]);
  }

  SECTION("training reduces the base loss and is seed-deterministic") {
    auto cfg = tiny_config(16);
    auto net = Network::build(cfg, 70);
    TrainConfig t2 = tc;
    t2.mode = TrainMode::assign;
    t2.epochs = 4;
    auto r = fit(net, manifest, t2);
    REQUIRE(r.log.size() == 4);
    REQUIRE(r.log.back().base_loss < r.log.front().base_loss);
    REQUIRE_FALSE(r.assignments.empty());
    REQUIRE(r.assignments.row("dlayer").size() == 8);

    auto net2 = Network::build(cfg, 70);
    auto r2 = fit(net2, manifest, t2);
    REQUIRE(r2.log.back().base_loss == r.log.back().base_loss);
    auto p1 = net.parameters(), p2 = net2.parameters();
    for (std::size_t i = 0; i < p1.size(); ++i)
      for (long long j = 0; j < p1[i]->size(); ++j)
        REQUIRE(p1[i]->data()[j] == p2[i]->data()[j]);
  }

  SECTION("training log csv shape") {
    std::vector<EpochLog> log = {{0, 1.5, -0.01, 0.4}, {1, 1.2, -0.02, 0.5}};
    auto csv = training_log_csv(log);
    REQUIRE(csv.rfind("epoch,base_loss,lambda_term,train_mean_DS\n", 0) == 0);
    REQUIRE(std::count(csv.begin(), csv.end(), '\n') == 3);
  }
}
