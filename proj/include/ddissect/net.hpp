#pragma once

// Small configurable encoder-decoder depth network. Stages form a chain:
// optional bilinear pre-upsample, conv (odd kernel, same-padding), optional
// activation. Named stage outputs are the "units" under study; the head maps
// to strictly positive depth via exp(clamp(log-depth)).

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ddissect/bins.hpp"
#include "ddissect/ops.hpp"
#include "ddissect/rng.hpp"
#include "ddissect/tensor.hpp"

namespace ddissect {

enum class Act { relu, elu };

inline std::string act_name(Act a) { return a == Act::relu ? "relu" : "elu"; }
inline Act act_from_name(const std::string& s) {
  if (s == "relu") return Act::relu;
  if (s == "elu") return Act::elu;
  fail(msg("unknown activation '", s, "'"));
}

struct StageSpec {
  std::string name;
  int out_ch = 0;
  int ksize = 3;
  int stride = 1;
  int up = 1;            // bilinear pre-upsample factor
  bool activated = true; // head runs without activation
};

struct NetConfig {
  int in_ch = 3, h = 64, w = 64;
  double d_min = 1.0, d_max = 10.0;
  Act activation = Act::elu;
  std::vector<StageSpec> stages;
  std::vector<std::string> interpretable_layers;

  // 3 stride-2 encoder blocks, a fusion conv ("mff", K=64), a decoder ending
  // in the "dlayer" (K=64) at input resolution, two refine convs (K=32) and a
  // 1-channel head. Pointwise kernels above 32x32 keep the toy net fast.
  static NetConfig default_toy(int h = 64, int w = 64, double d_min = 1.0, double d_max = 10.0) {
    NetConfig c;
    c.h = h;
    c.w = w;
    c.d_min = d_min;
    c.d_max = d_max;
    c.stages = {
        {"enc1", 16, 3, 2, 1, true},  {"enc2", 32, 3, 2, 1, true},
        {"enc3", 64, 3, 2, 1, true},  {"mff", 64, 3, 1, 1, true},
        {"dec1", 64, 3, 1, 2, true},  {"dec2", 64, 3, 1, 2, true},
        {"dlayer", 64, 1, 1, 2, true}, {"rconv0", 32, 1, 1, 1, true},
        {"rconv1", 32, 1, 1, 1, true}, {"head", 1, 1, 1, 1, false},
    };
    c.interpretable_layers = {"mff", "dlayer"};
    return c;
  }

  int stage_index(const std::string& name) const {
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (stages[i].name == name) return static_cast<int>(i);
    return -1;
  }

  // Output shape of every stage for batch size n; validates the chain.
  std::vector<Shape> stage_shapes(int n = 1) const {
    expect(!stages.empty(), "net config: no stages");
    std::vector<Shape> out;
    int ch = in_ch, hh = h, ww = w;
    for (const auto& st : stages) {
      expect(st.out_ch >= 1, msg("net config: stage ", st.name, " has no channels"));
      expect(st.ksize >= 1 && st.ksize % 2 == 1,
             msg("net config: stage ", st.name, " kernel must be odd"));
      expect(st.stride >= 1 && st.up >= 1, msg("net config: stage ", st.name, " bad stride/up"));
      hh *= st.up;
      ww *= st.up;
      const int pad = st.ksize / 2;
      hh = (hh + 2 * pad - st.ksize) / st.stride + 1;
      ww = (ww + 2 * pad - st.ksize) / st.stride + 1;
      expect(hh >= 1 && ww >= 1, msg("net config: stage ", st.name, " collapses spatial dims"));
      ch = st.out_ch;
      out.push_back({n, ch, hh, ww});
    }
    return out;
  }

  void validate() const {
    expect(in_ch >= 1 && h >= 1 && w >= 1, "net config: bad input dims");
    expect(d_min > 0.0 && d_min < d_max, "net config: need 0 < d_min < d_max");
    auto shapes = stage_shapes();
    expect(stages.back().out_ch == 1 && !stages.back().activated,
           "net config: last stage must be a linear 1-channel head");
    expect(shapes.back().h == h && shapes.back().w == w,
           "net config: output spatial dims must equal input dims");
    for (std::size_t i = 0; i < stages.size(); ++i)
      for (std::size_t j = i + 1; j < stages.size(); ++j)
        expect(stages[i].name != stages[j].name,
               msg("net config: duplicate stage name ", stages[i].name));
    for (const auto& l : interpretable_layers) {
      const int idx = stage_index(l);
      expect(idx >= 0, msg("net config: interpretable layer '", l, "' does not exist"));
      expect(stages[static_cast<std::size_t>(idx)].out_ch >= 2,
             msg("net config: interpretable layer '", l, "' needs K >= 2"));
    }
  }

  int unit_count(const std::string& layer) const {
    const int idx = stage_index(layer);
    expect(idx >= 0, msg("unknown layer '", layer, "'"));
    return stages[static_cast<std::size_t>(idx)].out_ch;
  }

  nlohmann::json to_json() const {
    nlohmann::json js;
    js["in_ch"] = in_ch;
    js["h"] = h;
    js["w"] = w;
    js["d_min"] = d_min;
    js["d_max"] = d_max;
    js["activation"] = act_name(activation);
    auto arr = nlohmann::json::array();
    for (const auto& st : stages)
      arr.push_back({{"name", st.name},
                     {"out_ch", st.out_ch},
                     {"ksize", st.ksize},
                     {"stride", st.stride},
                     {"up", st.up},
                     {"activated", st.activated}});
    js["stages"] = arr;
    js["interpretable_layers"] = interpretable_layers;
    return js;
  }

  static NetConfig from_json(const nlohmann::json& js) {
    NetConfig c;
    c.in_ch = js.at("in_ch").get<int>();
    c.h = js.at("h").get<int>();
    c.w = js.at("w").get<int>();
    c.d_min = js.at("d_min").get<double>();
    c.d_max = js.at("d_max").get<double>();
    c.activation = act_from_name(js.at("activation").get<std::string>());
    for (const auto& st : js.at("stages"))
      c.stages.push_back({st.at("name").get<std::string>(), st.at("out_ch").get<int>(),
                          st.at("ksize").get<int>(), st.at("stride").get<int>(),
                          st.at("up").get<int>(), st.at("activated").get<bool>()});
    c.interpretable_layers = js.at("interpretable_layers").get<std::vector<std::string>>();
    c.validate();
    return c;
  }
};

template <class S>
struct ForwardResultT {
  TensorT<S> pred;
  std::map<std::string, TensorT<S>> activations;
};

using ForwardResult = ForwardResultT<float>;

template <class S>
class NetworkT {
 public:
  // Uniform fan-in initialization, deterministic in seed.
  static NetworkT build(NetConfig cfg, std::uint64_t seed) {
    cfg.validate();
    NetworkT net;
    net.cfg_ = std::move(cfg);
    std::mt19937_64 rng = make_rng(seed);
    int ch = net.cfg_.in_ch;
    for (const auto& st : net.cfg_.stages) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(ch) * st.ksize * st.ksize);
      std::uniform_real_distribution<double> dist(-bound, bound);
      auto w = TensorT<S>::zeros({st.out_ch, ch, st.ksize, st.ksize}, true);
      for (auto& v : w.data()) v = static_cast<S>(dist(rng));
      auto b = TensorT<S>::zeros({1, st.out_ch, 1, 1}, true);
      net.weights_.push_back(std::move(w));
      net.biases_.push_back(std::move(b));
      ch = st.out_ch;
    }
    return net;
  }

  const NetConfig& config() const { return cfg_; }

  long long param_count() const {
    long long n = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) n += weights_[i].size() + biases_[i].size();
    return n;
  }

  std::vector<TensorT<S>*> parameters() {
    std::vector<TensorT<S>*> ps;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      ps.push_back(&weights_[i]);
      ps.push_back(&biases_[i]);
    }
    return ps;
  }

  // Runs the full chain; captured layer activations are handles into the
  // graph (they participate in the tape), capture itself never changes the
  // prediction.
  ForwardResultT<S> forward(const TensorT<S>& image, const std::vector<std::string>& capture = {},
                            TapeT<S>* tape = nullptr) const {
    const Shape& s = image.shape();
    expect(s.c == cfg_.in_ch && s.h == cfg_.h && s.w == cfg_.w,
           msg("forward: image shape ", s.str(), " does not match config (", cfg_.in_ch, ",",
               cfg_.h, ",", cfg_.w, ")"));
    for (const auto& name : capture)
      expect(cfg_.stage_index(name) >= 0, msg("forward: unknown capture layer '", name, "'"));
    ForwardResultT<S> res;
    TensorT<S> x = image;
    for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
      x = run_stage(i, x, tape);
      for (const auto& name : capture)
        if (name == cfg_.stages[i].name) res.activations[name] = x;
    }
    res.pred = head_map(x, tape);
    return res;
  }

  // Re-runs the chain downstream of `layer`, using `activation` in place of
  // the layer's computed output.
  TensorT<S> forward_from(const std::string& layer, const TensorT<S>& activation,
                          TapeT<S>* tape = nullptr) const {
    const int idx = cfg_.stage_index(layer);
    expect(idx >= 0, msg("forward_from: unknown layer '", layer, "'"));
    const auto shapes = cfg_.stage_shapes(activation.shape().n);
    expect(activation.shape() == shapes[static_cast<std::size_t>(idx)],
           msg("forward_from: activation shape ", activation.shape().str(), " != expected ",
               shapes[static_cast<std::size_t>(idx)].str(), " for layer '", layer, "'"));
    TensorT<S> x = activation;
    for (std::size_t i = static_cast<std::size_t>(idx) + 1; i < cfg_.stages.size(); ++i)
      x = run_stage(i, x, tape);
    return head_map(x, tape);
  }

  TensorT<S> forward_with_override(const TensorT<S>& image, const std::string& layer,
                                   const TensorT<S>& override_act,
                                   TapeT<S>* tape = nullptr) const {
    expect(image.shape().n == override_act.shape().n,
           "forward_with_override: batch size mismatch");
    return forward_from(layer, override_act, tape);
  }

  // Serialization order: per stage, weight then bias.
  std::vector<float> flat_weights() const {
    std::vector<float> blob;
    blob.reserve(static_cast<std::size_t>(param_count()));
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      for (auto v : weights_[i].data()) blob.push_back(static_cast<float>(v));
      for (auto v : biases_[i].data()) blob.push_back(static_cast<float>(v));
    }
    return blob;
  }

  void load_flat_weights(const std::vector<float>& blob) {
    expect(static_cast<long long>(blob.size()) == param_count(),
           msg("checkpoint blob has ", blob.size(), " values, network needs ", param_count()));
    std::size_t off = 0;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      for (auto& v : weights_[i].data()) v = static_cast<S>(blob[off++]);
      for (auto& v : biases_[i].data()) v = static_cast<S>(blob[off++]);
    }
  }

 private:
  TensorT<S> run_stage(std::size_t i, const TensorT<S>& in, TapeT<S>* tape) const {
    const StageSpec& st = cfg_.stages[i];
    TensorT<S> x = in;
    if (st.up > 1)
      x = ops::resize_bilinear(x, x.shape().h * st.up, x.shape().w * st.up, tape);
    x = ops::conv2d(x, weights_[i], biases_[i], st.stride, st.ksize / 2, tape);
    if (st.activated)
      x = cfg_.activation == Act::elu ? ops::elu(x, tape) : ops::relu(x, tape);
    return x;
  }

  // exp(clamp(h + log sqrt(d_min*d_max))) keeps predictions inside
  // [d_min, d_max] and centered at the geometric mean at init.
  TensorT<S> head_map(const TensorT<S>& h, TapeT<S>* tape) const {
    const S mid = static_cast<S>(0.5 * (std::log(cfg_.d_min) + std::log(cfg_.d_max)));
    auto shifted = ops::affine(h, S(1), mid, tape);
    auto clamped = ops::clamp(shifted, static_cast<S>(std::log(cfg_.d_min)),
                              static_cast<S>(std::log(cfg_.d_max)), tape);
    return ops::expval(clamped, tape);
  }

  NetConfig cfg_;
  std::vector<TensorT<S>> weights_, biases_;
};

using Network = NetworkT<float>;

// --- checkpoint io -----------------------------------------------------------
// Layout: 8-byte magic, u64 little-endian header length, JSON header, raw
// little-endian float32 blob.

inline constexpr char kCheckpointMagic[9] = "DDNET001";

template <class S>
void save_network(const NetworkT<S>& net, const BinningScheme& bins,
                  const nlohmann::json& metadata, const std::filesystem::path& path) {
  nlohmann::json header;
  header["config"] = net.config().to_json();
  header["bins"] = bins.to_json();
  header["metadata"] = metadata;
  header["param_count"] = net.param_count();
  const std::string hs = header.dump();
  std::ofstream f(path, std::ios::binary);
  expect(f.good(), msg("save_network: cannot open ", path.string()));
  f.write(kCheckpointMagic, 8);
  const std::uint64_t len = hs.size();
  f.write(reinterpret_cast<const char*>(&len), 8);
  f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  const auto blob = net.flat_weights();
  f.write(reinterpret_cast<const char*>(blob.data()),
          static_cast<std::streamsize>(blob.size() * sizeof(float)));
  expect(f.good(), msg("save_network: write failed for ", path.string()));
}

struct LoadedNetwork {
  Network net;
  BinningScheme bins;
  nlohmann::json metadata;
};

inline LoadedNetwork load_network(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  expect(f.good(), msg("load_network: cannot open ", path.string()));
  char magic[9] = {0};
  f.read(magic, 8);
  expect(f.gcount() == 8, msg("load_network: corrupt header in ", path.string()));
  if (std::string(magic, 5) == "DDNET") {
    expect(std::string(magic, 8) == kCheckpointMagic,
           msg("load_network: checkpoint version mismatch in ", path.string()));
  } else {
    fail(msg("load_network: corrupt header in ", path.string()));
  }
  std::uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), 8);
  expect(f.gcount() == 8 && len > 0 && len < (1ull << 24),
         msg("load_network: corrupt header in ", path.string()));
  std::string hs(len, '\0');
  f.read(hs.data(), static_cast<std::streamsize>(len));
  expect(f.gcount() == static_cast<std::streamsize>(len),
         msg("load_network: corrupt header in ", path.string()));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hs);
  } catch (const nlohmann::json::exception& e) {
    fail(msg("load_network: corrupt header in ", path.string(), ": ", e.what()));
  }
  LoadedNetwork out;
  out.net = Network::build(NetConfig::from_json(header.at("config")), 0);
  out.bins = BinningScheme::from_json(header.at("bins"));
  out.metadata = header.value("metadata", nlohmann::json::object());
  const long long count = header.at("param_count").get<long long>();
  expect(count == out.net.param_count(),
         msg("load_network: parameter count mismatch in ", path.string()));
  std::vector<float> blob(static_cast<std::size_t>(count));
  f.read(reinterpret_cast<char*>(blob.data()),
         static_cast<std::streamsize>(blob.size() * sizeof(float)));
  expect(f.gcount() == static_cast<std::streamsize>(blob.size() * sizeof(float)),
         msg("load_network: truncated weight blob in ", path.string()));
  out.net.load_flat_weights(blob);
  return out;
}

}  // namespace ddissect
