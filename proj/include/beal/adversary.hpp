#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "beal/nn.hpp"
#include "beal/rng.hpp"
#include "beal/tensor.hpp"

namespace beal::adversary {

struct DiscConfig {
  std::int64_t in_channels = 1;   // 1 for the boundary map, 2 for the entropy map
  std::int64_t base_channels = 64;
  std::int64_t n_layers = 5;
  double leaky_slope = 0.2;

  static DiscConfig boundary(bool tiny) {
    DiscConfig c;
    c.in_channels = 1;
    c.base_channels = tiny ? 16 : 64;
    return c;
  }
  static DiscConfig entropy(bool tiny) {
    DiscConfig c;
    c.in_channels = 2;
    c.base_channels = tiny ? 16 : 64;
    return c;
  }

  void validate() const {
    if (in_channels != 1 && in_channels != 2)
      throw ValidationError("DiscConfig: in_channels must be 1 or 2");
    if (n_layers < 2) throw ValidationError("DiscConfig: n_layers must be >= 2");
    if (base_channels < 1 || leaky_slope <= 0)
      throw ValidationError("DiscConfig: invalid parameters");
  }

  std::int64_t output_stride() const {
    return std::int64_t(1) << (n_layers - 1);
  }
};

inline void to_json(nlohmann::json& j, const DiscConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_channels", c.base_channels},
                     {"n_layers", c.n_layers},
                     {"leaky_slope", c.leaky_slope}};
}

inline void from_json(const nlohmann::json& j, DiscConfig& c) {
  auto get = [&](const char* k, auto& v) {
    if (j.contains(k)) j.at(k).get_to(v);
  };
  get("in_channels", c.in_channels);
  get("base_channels", c.base_channels);
  get("n_layers", c.n_layers);
  get("leaky_slope", c.leaky_slope);
}

template <typename T>
struct DiscriminatorScore {
  Tensor<T> logits;  // (N,1,h,w) patch map, pre-sigmoid
};

// Patch-level domain classifier: stride-2 4x4 convolutions with leaky
// rectification; no normalization layers; the final layer maps to a
// single-channel logit map at 1/2^(n_layers-1) resolution.
template <typename T>
class PatchDiscriminator {
 public:
  explicit PatchDiscriminator(DiscConfig config) : cfg_(config) {
    cfg_.validate();
    std::int64_t in = cfg_.in_channels;
    for (std::int64_t i = 0; i + 1 < cfg_.n_layers; ++i) {
      const std::int64_t out =
          cfg_.base_channels * (std::int64_t(1) << std::min<std::int64_t>(i, 3));
      const std::string name = "disc.conv" + std::to_string(i);
      body_.template add<nn::Conv2d<T>>(name, in, out, 4, 2, 1, 1, true,
                                        /*need_input_grad=*/true, T(0.02));
      body_.template add<nn::LeakyReLU<T>>(static_cast<T>(cfg_.leaky_slope));
      in = out;
    }
    // size-preserving logit head; loss is applied to raw logits
    body_.template add<nn::Conv2d<T>>("disc.conv" +
                                          std::to_string(cfg_.n_layers - 1),
                                      in, 1, 3, 1, 1, 1, true, true, T(0.02));
  }

  const DiscConfig& config() const { return cfg_; }

  void init(std::uint64_t seed) {
    Rng rng(hash_combine(seed, 0xd15cULL, cfg_.in_channels));
    body_.init(rng);
  }

  DiscriminatorScore<T> forward(const Tensor<T>& map) {
    if (map.rank() != 4 || map.dim(1) != cfg_.in_channels)
      throw ValidationError(
          "PatchDiscriminator: expected " + std::to_string(cfg_.in_channels) +
          " input channels, got " +
          (map.rank() == 4 ? std::to_string(map.dim(1)) : map.shape_string()));
    DiscriminatorScore<T> score;
    score.logits = body_.forward(map, nn::Mode::Train, false);
    return score;
  }

  // Returns d(loss)/d(input map). With accumulate_param_grads=false the
  // discriminator acts as a frozen critic (adversarial objective path).
  Tensor<T> backward(const Tensor<T>& d_logits, bool accumulate_param_grads) {
    return body_.backward(d_logits, accumulate_param_grads);
  }

  std::vector<nn::Param<T>*> params() {
    std::vector<nn::Param<T>*> out;
    body_.collect_params(out);
    return out;
  }

  std::vector<nn::Buffer<T>*> buffers() {
    std::vector<nn::Buffer<T>*> out;
    body_.collect_buffers(out);
    return out;
  }

  void zero_grad() {
    for (auto* p : params()) p->grad.zero();
  }

 private:
  DiscConfig cfg_;
  nn::Sequential<T> body_;
};

}  // namespace beal::adversary
