#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <random>

#include "ddissect/net.hpp"
#include "ddissect/ops.hpp"

using Catch::Approx;
using namespace ddissect;
namespace fs = std::filesystem;
namespace ops = ddissect::ops;

namespace {

// Small config used where full 64x64 forward passes would be wasteful.
NetConfig tiny_config() {
  NetConfig c;
  c.in_ch = 3;
  c.h = 16;
  c.w = 16;
  c.d_min = 1.0;
  c.d_max = 10.0;
  c.stages = {
      {"enc1", 6, 3, 2, 1, true},   {"mff", 8, 3, 1, 1, true},
      {"dlayer", 8, 3, 1, 2, true}, {"rconv0", 4, 1, 1, 1, true},
      {"head", 1, 1, 1, 1, false},
  };
  c.interpretable_layers = {"mff", "dlayer"};
  return c;
}

Tensor random_image(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(0.f, 1.f);
  std::vector<float> v(static_cast<std::size_t>(s.size()));
  for (auto& e : v) e = dist(rng);
  return Tensor::from_data(s, std::move(v));
}

}  // namespace

TEST_CASE("build determinism and parameter count") {
  auto cfg = tiny_config();
  auto a = Network::build(cfg, 5);
  auto b = Network::build(cfg, 5);
  auto pa = a.parameters(), pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (long long j = 0; j < pa[i]->size(); ++j)
      REQUIRE(pa[i]->data()[j] == pb[i]->data()[j]);

  // closed-form count: sum over stages of out*in*k^2 + out
  long long want = 0;
  int ch = cfg.in_ch;
  for (const auto& st : cfg.stages) {
    want += static_cast<long long>(st.out_ch) * ch * st.ksize * st.ksize + st.out_ch;
    ch = st.out_ch;
  }
  REQUIRE(a.param_count() == want);

  auto c = Network::build(cfg, 6);
  bool any_diff = false;
  auto pc = c.parameters();
  for (long long j = 0; j < pa[0]->size(); ++j)
    if (pa[0]->data()[j] != pc[0]->data()[j]) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("forward output contract") {
  auto cfg = tiny_config();
  auto net = Network::build(cfg, 7);
  auto img = random_image({2, 3, 16, 16}, 11);
  auto res = net.forward(img);
  REQUIRE(res.pred.shape() == (Shape{2, 1, 16, 16}));
  for (auto v : res.pred.data()) {
    REQUIRE(v > 0.f);
    REQUIRE(std::isfinite(v));
    REQUIRE(v >= Approx(cfg.d_min));
    REQUIRE(v <= Approx(cfg.d_max));
  }

  SECTION("zero input still finite") {
    auto zero = Tensor::zeros({1, 3, 16, 16});
    auto r = net.forward(zero);
    for (auto v : r.pred.data()) REQUIRE(std::isfinite(v));
  }

  SECTION("capture contract") {
    auto plain = net.forward(img);
    auto withcap = net.forward(img, {"mff", "dlayer"});
    REQUIRE(plain.activations.empty());
    REQUIRE(withcap.activations.at("mff").shape().c == 8);
    REQUIRE(withcap.activations.at("dlayer").shape().c == 8);
    for (long long i = 0; i < plain.pred.size(); ++i)
      REQUIRE(plain.pred.data()[i] == withcap.pred.data()[i]);
    REQUIRE_THROWS_WITH(net.forward(img, {"nope"}),
                        Catch::Matchers::ContainsSubstring("unknown capture layer"));
  }

  SECTION("wrong image shape rejected") {
    REQUIRE_THROWS(net.forward(random_image({1, 3, 8, 8}, 1)));
  }
}

TEST_CASE("override semantics") {
  auto cfg = tiny_config();
  auto net = Network::build(cfg, 9);
  auto img = random_image({1, 3, 16, 16}, 13);
  auto res = net.forward(img, {"dlayer"});

  SECTION("identity override reproduces forward exactly") {
    auto pred = net.forward_with_override(img, "dlayer", res.activations.at("dlayer"));
    for (long long i = 0; i < pred.size(); ++i)
      REQUIRE(pred.data()[i] == res.pred.data()[i]);
  }
  SECTION("zeroing one unit changes the prediction") {
    auto act = res.activations.at("dlayer").clone();
    const Shape& s = act.shape();
    for (int y = 0; y < s.h; ++y)
      for (int x = 0; x < s.w; ++x) act.at(0, 2, y, x) = 0.f;
    auto pred = net.forward_with_override(img, "dlayer", act);
    bool changed = false;
    for (long long i = 0; i < pred.size(); ++i)
      if (pred.data()[i] != res.pred.data()[i]) changed = true;
    REQUIRE(changed);
  }
  SECTION("shape mismatch rejected") {
    auto bad = Tensor::zeros({1, 8, 4, 4});
    REQUIRE_THROWS_WITH(net.forward_with_override(img, "dlayer", bad),
                        Catch::Matchers::ContainsSubstring("shape"));
    REQUIRE_THROWS_WITH(net.forward_from("ghost", bad),
                        Catch::Matchers::ContainsSubstring("unknown layer"));
  }
}

TEST_CASE("gradients reach every parameter tensor") {
  auto cfg = tiny_config();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto net = Network::build(cfg, seed);
    auto img = random_image({2, 3, 16, 16}, seed * 101);
    Tape tape;
    auto res = net.forward(img, {}, &tape);
    auto loss = ops::reduce_mean(res.pred, {}, &tape);
    tape.backward(loss);
    for (auto* p : net.parameters()) {
      REQUIRE(p->has_grad());
      bool nonzero = false;
      for (auto g : p->grad())
        if (g != 0.f) nonzero = true;
      REQUIRE(nonzero);
      p->zero_grad();
    }
  }
}

TEST_CASE("default toy config validates") {
  auto cfg = NetConfig::default_toy();
  cfg.validate();
  auto shapes = cfg.stage_shapes();
  REQUIRE(shapes.back() == (Shape{1, 1, 64, 64}));
  REQUIRE(cfg.unit_count("mff") == 64);
  REQUIRE(cfg.unit_count("dlayer") == 64);
  REQUIRE(cfg.unit_count("rconv0") == 32);
}

TEST_CASE("checkpoint round trip") {
  auto dir = fs::temp_directory_path() / "ddissect_net";
  fs::create_directories(dir);
  auto cfg = tiny_config();
  auto net = Network::build(cfg, 21);
  auto bins = BinningScheme::sid(1.0, 10.0, 16);
  nlohmann::json meta = {{"mode", "baseline"}, {"epochs", 3}};
  const auto path = dir / "net.ckpt";
  save_network(net, bins, meta, path);

  auto loaded = load_network(path);
  REQUIRE(loaded.metadata.at("mode") == "baseline");
  REQUIRE(loaded.bins.n_bins == 16);
  auto pa = net.parameters();
  auto pb = loaded.net.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (long long j = 0; j < pa[i]->size(); ++j)
      REQUIRE(pa[i]->data()[j] == pb[i]->data()[j]);

  SECTION("identical predictions after reload") {
    auto img = random_image({1, 3, 16, 16}, 5);
    auto r1 = net.forward(img);
    auto r2 = loaded.net.forward(img);
    for (long long i = 0; i < r1.pred.size(); ++i)
      REQUIRE(r1.pred.data()[i] == r2.pred.data()[i]);
  }

  SECTION("corrupt header rejected") {
    const auto bad = dir / "bad.ckpt";
    std::ofstream(bad, std::ios::binary) << "garbage data here";
    REQUIRE_THROWS_WITH(load_network(bad), Catch::Matchers::ContainsSubstring("corrupt"));
  }

  SECTION("version mismatch rejected") {
    const auto vpath = dir / "vers.ckpt";
    std::vector<char> bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    bytes[7] = '9';  // DDNET009
    std::ofstream(vpath, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(load_network(vpath),
                        Catch::Matchers::ContainsSubstring("version mismatch"));
  }

  SECTION("truncated blob rejected") {
    const auto tpath = dir / "trunc.ckpt";
    std::vector<char> bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    bytes.resize(bytes.size() - 40);
    std::ofstream(tpath, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE_THROWS_WITH(load_network(tpath), Catch::Matchers::ContainsSubstring("truncated"));
  }
}
