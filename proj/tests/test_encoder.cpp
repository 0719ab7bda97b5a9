#include <algorithm>
#include <cmath>
#include <numeric>

#include "chada/encoder.hpp"
#include "chada/gradcheck.hpp"
#include "chada/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace chada;

namespace {

/// Dense single-head-per-slice attention computed with plain loops.
std::vector<double> dense_attention_oracle(const Tensor<double>& x, const BlockParams<double>& b,
                                           std::size_t heads) {
  const std::size_t len = x.dim(1), dim = x.dim(2), hd = dim / heads;
  auto proj = [&](const Tensor<double>& w, const Tensor<double>& bias) {
    std::vector<double> out(len * dim);
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t o = 0; o < dim; ++o) {
        double acc = bias.values()[o];
        for (std::size_t i = 0; i < dim; ++i) acc += x.values()[t * dim + i] * w.values()[i * dim + o];
        out[t * dim + o] = acc;
      }
    }
    return out;
  };
  const auto q = proj(b.q_weight, b.q_bias), k = proj(b.k_weight, b.k_bias), v = proj(b.v_weight, b.v_bias);
  std::vector<double> ctx(len * dim, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < len; ++i) {
      std::vector<double> s(len);
      double mx = -1e300;
      for (std::size_t j = 0; j < len; ++j) {
        double acc = 0.0;
        for (std::size_t e = 0; e < hd; ++e) acc += q[i * dim + h * hd + e] * k[j * dim + h * hd + e];
        s[j] = acc / std::sqrt(static_cast<double>(hd));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (auto& sj : s) z += (sj = std::exp(sj - mx));
      for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t e = 0; e < hd; ++e) ctx[i * dim + h * hd + e] += s[j] / z * v[j * dim + h * hd + e];
      }
    }
  }
  std::vector<double> out(len * dim);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t o = 0; o < dim; ++o) {
      double acc = b.out_bias.values()[o];
      for (std::size_t i = 0; i < dim; ++i) acc += ctx[t * dim + i] * b.out_weight.values()[i * dim + o];
      out[t * dim + o] = acc;
    }
  }
  return out;
}

BlockParams<double> random_block(std::size_t dim, Rng& rng) {
  auto b = BlockParams<double>::init(dim, 4, rng);
  for (auto& p : [&] { ParamList<double> l; b.append_parameters(l, ""); return l; }()) {
    fill_normal(p.tensor, 0.4, rng);
  }
  return b;
}

Tensor<double> slice_tokens(const Tensor<double>& x, std::size_t keep) {
  const std::size_t dim = x.dim(2);
  std::vector<double> v(x.values().begin(), x.values().begin() + static_cast<std::ptrdiff_t>(keep * dim));
  return Tensor<double>({1, keep, dim}, std::move(v));
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.dim = 8;
  c.depth = 2;
  c.heads = 2;
  c.max_channels = 3;
  c.image_side = 32;
  c.patch = 16;
  return c;
}

}  // namespace

TEST_CASE("attention over a single real key returns that value row") {
  Rng rng(1);
  auto block = random_block(4, rng);
  std::fill(block.out_weight.mutable_values().begin(), block.out_weight.mutable_values().end(), 0.0);
  for (std::size_t i = 0; i < 4; ++i) block.out_weight.mutable_values()[i * 4 + i] = 1.0;
  std::fill(block.out_bias.mutable_values().begin(), block.out_bias.mutable_values().end(), 0.0);
  Tensor<double> x({1, 2, 4});
  fill_normal(x, 1.0, rng);
  const std::vector<std::uint8_t> mask{1, 0};
  auto y = masked_multihead_attention(x, mask, block, 2);
  auto v = ops::linear(x, block.v_weight, block.v_bias);
  for (std::size_t j = 0; j < 4; ++j) CHECK(y.values()[j] == v.values()[j]);
}

TEST_CASE("all-true mask equals dense attention") {
  Rng rng(2);
  auto block = random_block(8, rng);
  Tensor<double> x({1, 6, 8});
  fill_normal(x, 1.0, rng);
  const std::vector<std::uint8_t> mask(6, 1);
  auto y = masked_multihead_attention(x, mask, block, 2);
  const auto ref = dense_attention_oracle(x, block, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-12);
}

TEST_CASE("masked attention equals dense attention on the truncated sequence") {
  Rng rng(3);
  auto block = random_block(8, rng);
  Tensor<double> x({1, 8, 8});
  fill_normal(x, 1.0, rng);
  const std::vector<std::uint8_t> mask{1, 1, 1, 1, 1, 0, 0, 0};
  auto y = masked_multihead_attention(x, mask, block, 2);
  const auto ref = dense_attention_oracle(slice_tokens(x, 5), block, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y.values()[i] - ref[i]) < 1e-10);
}

TEST_CASE("all-false mask is rejected") {
  Rng rng(4);
  auto block = random_block(4, rng);
  Tensor<double> x({1, 3, 4});
  const std::vector<std::uint8_t> mask(3, 0);
  CHECK_THROWS_AS(masked_multihead_attention(x, mask, block, 2), std::invalid_argument);
}

TEST_CASE("transformer_block") {
  Rng rng(5);
  auto block = random_block(8, rng);
  Tensor<double> x({1, 5, 8});
  fill_normal(x, 1.0, rng);

  SUBCASE("zero output maps make the block an identity") {
    for (auto* t : {&block.out_weight, &block.out_bias, &block.fc2_weight, &block.fc2_bias}) {
      std::fill(t->mutable_values().begin(), t->mutable_values().end(), 0.0);
    }
    const std::vector<std::uint8_t> mask(5, 1);
    auto y = transformer_block(x, mask, block, 2, 1e-6);
    CHECK(std::equal(y.values().begin(), y.values().end(), x.values().begin()));
  }

  SUBCASE("a single real token matches the T=1 oracle") {
    const std::vector<std::uint8_t> mask{1, 0, 0, 0, 0};
    auto y = transformer_block(x, mask, block, 2, 1e-6);
    const std::vector<std::uint8_t> one{1};
    auto y1 = transformer_block(slice_tokens(x, 1), one, block, 2, 1e-6);
    for (std::size_t j = 0; j < 8; ++j) CHECK(std::abs(y.values()[j] - y1.values()[j]) < 1e-12);
  }

  SUBCASE("masked inputs never reach real outputs") {
    const std::vector<std::uint8_t> mask{1, 1, 1, 0, 0};
    auto y = transformer_block(x, mask, block, 2, 1e-6);
    auto x2 = x.clone();
    for (std::size_t i = 3 * 8; i < x2.size(); ++i) x2.mutable_values()[i] = 100.0 * std::sin(double(i));
    auto y2 = transformer_block(x2, mask, block, 2, 1e-6);
    for (std::size_t i = 0; i < 3 * 8; ++i) CHECK(std::abs(y.values()[i] - y2.values()[i]) < 1e-6);
  }
}

TEST_CASE("encode produces a 192-wide embedding for every channel count") {
  EncoderConfig cfg;
  cfg.depth = 1;
  cfg.image_side = 64;  // width law does not depend on the spatial extent
  Rng rng(6);
  auto params = EncoderParams<float>::init(cfg, rng);
  for (std::size_t n = 1; n <= 10; ++n) {
    auto e = encode(testing::random_image(n, 64, rng), params, cfg);
    CHECK(e.size() == 192);
  }
  cfg.pooling = Pooling::Mean;
  CHECK(encode(testing::random_image(4, 64, rng), params, cfg).size() == 192);
}

TEST_CASE("encode ignores the values placed in padded slots") {
  auto cfg = tiny_config();
  Rng rng(7);
  auto params = EncoderParams<double>::init(cfg, rng);
  auto img = testing::random_image(2, cfg.image_side, rng);
  auto seq = build_sequence(img, params.tables, cfg);
  auto run = [&](const Tensor<double>& tokens) {
    auto x = ops::reshape(tokens, {1, seq.length(), cfg.dim});
    auto h = run_transformer(x, seq.key_padding_mask, params.transformer, cfg.heads, cfg.norm_eps);
    return pool_tokens(h, seq.key_padding_mask, cfg.pooling);
  };
  auto base = run(seq.tokens);
  auto noisy = seq.tokens.clone();
  for (std::size_t t = 0; t < seq.length(); ++t) {
    if (seq.key_padding_mask[t]) continue;
    for (std::size_t j = 0; j < cfg.dim; ++j) noisy.mutable_values()[t * cfg.dim + j] = 50.0 * std::cos(double(t * 7 + j));
  }
  auto perturbed = run(noisy);
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(std::abs(base.values()[j] - perturbed.values()[j]) < 1e-12);
}

TEST_CASE("paired channel/table permutation leaves the CLS embedding unchanged") {
  auto cfg = tiny_config();
  cfg.max_channels = 4;
  Rng rng(8);
  auto params = EncoderParams<double>::init(cfg, rng);
  auto img = testing::random_image(3, cfg.image_side, rng);
  const auto base = encode(img, params, cfg);

  const std::size_t perm[] = {2, 0, 1};
  auto permuted = img.select_channels(perm);
  auto params2 = params;
  params2.tables.chan = params.tables.chan.clone();
  for (std::size_t c = 0; c < 3; ++c) {
    std::copy_n(params.tables.chan.values().data() + perm[c] * cfg.dim, cfg.dim,
                params2.tables.chan.mutable_values().data() + c * cfg.dim);
  }
  const auto moved = encode(permuted, params2, cfg);
  for (std::size_t j = 0; j < cfg.dim; ++j) CHECK(std::abs(base[j] - moved[j]) < 1e-5);
}

TEST_CASE("attention maps") {
  auto cfg = tiny_config();
  Rng rng(9);
  auto params = EncoderParams<double>::init(cfg, rng);
  auto img = testing::random_image(2, cfg.image_side, rng);
  for (std::size_t layer = 0; layer < cfg.depth; ++layer) {
    auto maps = attention_maps(img, params, cfg, layer);
    CHECK(maps.tokens == 1 + 2 * 4);
    for (std::size_t h = 0; h < maps.heads; ++h) {
      for (std::size_t q = 0; q < maps.tokens; ++q) {
        double s = 0.0;
        for (std::size_t k = 0; k < maps.tokens; ++k) s += maps.at(h, q, k);
        CHECK(std::abs(s - 1.0) < 1e-5);
      }
    }
    CHECK(maps.cls_heatmap(0, 1).size() == 4);
  }
  CHECK_THROWS_AS(attention_maps(img, params, cfg, cfg.depth), std::out_of_range);

  // full capture: masked keys carry exactly zero weight
  auto seq = build_sequence(img, params.tables, cfg);
  AttentionCapture<double> cap{1, {}};
  run_transformer(ops::reshape(seq.tokens, {1, seq.length(), cfg.dim}), seq.key_padding_mask,
                  params.transformer, cfg.heads, cfg.norm_eps, &cap);
  const std::size_t len = seq.length();
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    for (std::size_t q = 0; q < len; ++q) {
      for (std::size_t k = 0; k < len; ++k) {
        if (!seq.key_padding_mask[k]) CHECK(cap.weights.values()[(h * len + q) * len + k] == 0.0);
      }
    }
  }

  // single-token sequence: a 1x1 map equal to 1
  Tensor<double> one({1, 1, cfg.dim});
  fill_normal(one, 1.0, rng);
  Tensor<double> w;
  const std::vector<std::uint8_t> m1{1};
  masked_multihead_attention(one, m1, params.transformer.blocks[0], cfg.heads, &w);
  for (double v : w.values()) CHECK(v == 1.0);
}

TEST_CASE("CLS heatmaps reshape to 14x14 at the default configuration") {
  EncoderConfig cfg;
  cfg.depth = 1;
  Rng rng(10);
  auto params = EncoderParams<float>::init(cfg, rng);
  auto maps = attention_maps(testing::random_image(1, 224, rng), params, cfg, 0);
  CHECK(maps.grid == 14);
  CHECK(maps.cls_heatmap(2, 0).size() == 196);
}

TEST_CASE("parameter census") {
  EncoderConfig cfg;  // d=192, depth=12, heads=3, mlp 4
  const std::size_t d = 192;
  const std::size_t per_block = (4 * d * d + 4 * d) + (2 * 4 * d * d + 4 * d + d) + 4 * d;
  const std::size_t tables = 256 * d + d + 196 * d + 10 * d + d;
  CHECK(parameter_census(cfg) == tables + 12 * per_block + 2 * d);
  CHECK(parameter_census(cfg) == 5427840);

  auto shallow = cfg;
  shallow.depth = 0;
  CHECK(parameter_census(shallow) == tables + 2 * d);
  auto deep = cfg;
  deep.depth = 24;
  CHECK(parameter_census(deep) - parameter_census(cfg) == 12 * per_block);

  auto small = tiny_config();
  Rng rng(11);
  CHECK(count_elements(EncoderParams<float>::init(small, rng).parameters()) == parameter_census(small));
}

TEST_CASE("encoder gradients match finite differences") {
  auto cfg = tiny_config();
  Rng rng(12);
  auto params = EncoderParams<double>::init(cfg, rng);
  auto plist = params.parameters();
  for (auto& p : plist) fill_normal(p.tensor, 0.3, rng);
  std::vector<MultiChannelImage> images{testing::random_image(2, 32, rng), testing::random_image(3, 32, rng)};
  Tensor<double> target({2, cfg.dim});
  fill_normal(target, 1.0, rng);
  auto loss = [&] {
    auto e = encode_batch<double>(images, params, cfg);
    auto diff = ops::sub(e, target);
    return ops::sum(ops::mul(diff, diff));
  };
  GradCheckOptions opt;
  opt.coords_per_tensor = 6;
  auto res = finite_diff_check<double>(loss, plist, opt);
  INFO(res.worst_param);
  CHECK(res.max_rel_error < 1e-4);
  CHECK(res.coords_checked > 100);
}
