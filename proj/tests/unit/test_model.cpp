#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "merit/model.hpp"

using merit::Model;
using merit::ModelConfig;
using merit::TokenBatch;

namespace {

TokenBatch random_tokens(std::size_t batch, std::size_t len,
                         std::size_t vocab, merit::SeededRng &rng) {
  TokenBatch t{batch, len, {}};
  for (std::size_t i = 0; i < batch * len; ++i) {
    t.ids.push_back(static_cast<std::int32_t>(rng.below(vocab)));
  }
  return t;
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.n_layer = 2;
  cfg.n_head = 2;
  cfg.d_model = 32;
  cfg.context_len = 16;
  return cfg;
}

/// Relative error with an absolute floor so vanishing gradients do not
/// dominate.
double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6});
}

} // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = small_config();
  cfg.n_head = 3;
  CHECK_THROWS_AS(cfg.validate(), merit::ConfigError);
  cfg = small_config();
  cfg.context_len = 0;
  merit::SeededRng rng(0);
  CHECK_THROWS_AS(merit::init_model<double>(cfg, rng), merit::ConfigError);
}

TEST_CASE("init_params") {
  ModelConfig cfg = small_config();
  cfg.d_model = 64;
  cfg.n_head = 4;
  merit::SeededRng a(1), b(1);
  const auto m1 = merit::init_model<double>(cfg, a);
  const auto m2 = merit::init_model<double>(cfg, b);
  CHECK(m1.params == m2.params);
  CHECK(m1.params.size() == merit::parameter_names(cfg).size());

  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (std::size_t l = 0; l < cfg.n_layer; ++l) {
    const auto &wq = m1.params.at("h." + std::to_string(l) + ".attn.wq");
    CHECK(wq.shape() == merit::Shape{64, 64});
    for (double x : wq.values()) {
      sum += x;
      sq += x * x;
      ++n;
    }
    CHECK(m1.params.at("h." + std::to_string(l) + ".ln1.g") ==
          merit::Tensor<double>({64}, 1.0));
  }
  const double mean = sum / n;
  const double sd = std::sqrt(sq / n - mean * mean);
  CHECK(std::abs(sd - 0.02) <= 0.002);
  // Output projections use the depth-scaled std.
  const double sd_wo =
      merit::l2_norm(m1.params.at("h.0.attn.wo")) / std::sqrt(64.0 * 64.0);
  CHECK(sd_wo == doctest::Approx(0.02 / std::sqrt(4.0)).epsilon(0.1));
}

TEST_CASE("forward shapes and input validation") {
  const ModelConfig cfg = small_config();
  merit::SeededRng rng(2);
  const auto model = merit::init_model<double>(cfg, rng);
  const auto fwd = merit::forward(model, TokenBatch{1, 1, {7}});
  CHECK(fwd.logits.shape() == merit::Shape{1, 256});
  CHECK(fwd.probes.size() == cfg.n_layer);

  CHECK_THROWS_AS(merit::forward(model, TokenBatch{1, 1, {256}}),
                  merit::InputError);
  CHECK_THROWS_AS(merit::forward(model, TokenBatch{1, 1, {-1}}),
                  merit::InputError);
  CHECK_THROWS_AS(
      merit::forward(model, random_tokens(1, 17, 256, rng)),
      merit::InputError);
}

TEST_CASE("causal masking: future tokens do not change earlier logits") {
  const ModelConfig cfg = small_config();
  merit::SeededRng rng(3);
  const auto model = merit::init_model<double>(cfg, rng);
  TokenBatch a = random_tokens(1, 16, 256, rng);
  TokenBatch b = a;
  const std::size_t cut = 9;
  std::reverse(b.ids.begin() + cut + 1, b.ids.end());
  std::swap(b.ids[cut + 1], b.ids[15]);
  const auto la = merit::forward(model, a).logits;
  const auto lb = merit::forward(model, b).logits;
  for (std::size_t t = 0; t <= cut; ++t) {
    for (std::size_t v = 0; v < 256; ++v) {
      REQUIRE(la(t, v) == lb(t, v));
    }
  }
}

TEST_CASE("probes") {
  ModelConfig cfg = small_config();
  merit::SeededRng rng(4);
  auto model = merit::init_model<double>(cfg, rng);
  const TokenBatch tokens = random_tokens(3, 16, 256, rng);

  SUBCASE("zero W_Q gives zero max logit") {
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
      model.params[model.block(l).wq].fill(0);
    }
    for (const auto &p : merit::forward(model, tokens).probes) {
      CHECK(p.max_logit == 0);
    }
  }

  SUBCASE("max logit equals a brute-force recomputation") {
    const auto fwd = merit::forward(model, tokens);
    const std::size_t d = cfg.d_model;
    const std::size_t dk = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(double(dk));
    for (std::size_t l = 0; l < cfg.n_layer; ++l) {
      const auto &h1 = fwd.cache.layers[l].h1;
      const auto &wq = model.params[model.block(l).wq];
      const auto &wk = model.params[model.block(l).wk];
      auto project = [&](const merit::Tensor<double> &w, std::size_t row,
                         std::size_t col) {
        double s = 0;
        for (std::size_t k = 0; k < d; ++k) {
          s += h1(row, k) * w(k, col);
        }
        return s;
      };
      double best = -std::numeric_limits<double>::infinity();
      double entropy = 0;
      for (std::size_t b = 0; b < tokens.batch; ++b) {
        for (std::size_t h = 0; h < cfg.n_head; ++h) {
          for (std::size_t i = 0; i < tokens.len; ++i) {
            std::vector<double> z;
            for (std::size_t j = 0; j <= i; ++j) {
              double dot = 0;
              for (std::size_t e = 0; e < dk; ++e) {
                dot += project(wq, b * 16 + i, h * dk + e) *
                       project(wk, b * 16 + j, h * dk + e);
              }
              z.push_back(dot * scale);
              best = std::max(best, dot * scale);
            }
            const double top = *std::max_element(z.begin(), z.end());
            double s = 0;
            for (double x : z) {
              s += std::exp(x - top);
            }
            double row_sum = 0;
            for (double x : z) {
              const double p = std::exp(x - top) / s;
              row_sum += p;
              entropy -= p * std::log(p);
            }
            CHECK(std::abs(row_sum - 1) <= 1e-12);
          }
        }
      }
      CHECK(fwd.probes[l].max_logit == best);
      const double mean_entropy = entropy / (tokens.batch * cfg.n_head * 16);
      CHECK(fwd.probes[l].attention_entropy ==
            doctest::Approx(mean_entropy).epsilon(1e-10));
      CHECK(fwd.probes[l].attention_entropy >= 0);
      CHECK(fwd.probes[l].attention_entropy <= std::log(16.0));
    }
  }

  SUBCASE("stored attention rows sum to one") {
    const auto fwd = merit::forward(model, tokens);
    const auto &att = fwd.cache.layers[0].att;
    for (std::size_t row = 0; row < att.size() / 16; ++row) {
      const std::size_t i = row % 16;
      double s = 0;
      for (std::size_t j = 0; j < 16; ++j) {
        if (j > i) {
          CHECK(att[row * 16 + j] == 0);
        }
        s += att[row * 16 + j];
      }
      CHECK(std::abs(s - 1) <= 1e-12);
    }
  }

  SUBCASE("entropy falls as logits are scaled up") {
    double prev_entropy = std::numeric_limits<double>::infinity();
    double prev_logit = -std::numeric_limits<double>::infinity();
    const auto base = model.params[model.block(0).wq];
    for (double alpha : {1.0, 4.0, 16.0, 64.0, 256.0, 1024.0}) {
      model.params[model.block(0).wq] = merit::scaled(base, alpha);
      const auto probe = merit::forward(model, tokens).probes[0];
      CHECK(probe.attention_entropy < prev_entropy);
      CHECK(probe.max_logit > prev_logit);
      prev_entropy = probe.attention_entropy;
      prev_logit = probe.max_logit;
    }
  }
}

TEST_CASE("qk_norm normalizes query and key rows per head") {
  ModelConfig cfg = small_config();
  cfg.qk_norm = true;
  merit::SeededRng rng(5);
  auto model = merit::init_model<double>(cfg, rng);
  // Blow up W_Q: logits must stay bounded by sqrt(d_k).
  model.params[model.block(0).wq] =
      merit::scaled(model.params[model.block(0).wq], 1000.0);
  const TokenBatch tokens = random_tokens(2, 16, 256, rng);
  const auto fwd = merit::forward(model, tokens);
  const std::size_t dk = cfg.head_dim();
  for (const auto &layer : fwd.cache.layers) {
    for (const auto *m : {&layer.q, &layer.k}) {
      for (std::size_t r = 0; r < m->rows(); ++r) {
        for (std::size_t h = 0; h < cfg.n_head; ++h) {
          double mean = 0, var = 0;
          for (std::size_t e = 0; e < dk; ++e) {
            mean += (*m)(r, h * dk + e);
          }
          mean /= dk;
          for (std::size_t e = 0; e < dk; ++e) {
            const double c = (*m)(r, h * dk + e) - mean;
            var += c * c;
          }
          var /= dk;
          CHECK(std::abs(mean) <= 1e-10);
          CHECK(std::abs(var - 1) <= 1e-10);
        }
      }
    }
  }
  for (const auto &p : fwd.probes) {
    CHECK(p.max_logit <= std::sqrt(double(dk)) + 1e-9);
  }
}

TEST_CASE("loss of uniform logits is ln(vocab)") {
  const ModelConfig cfg = small_config();
  merit::SeededRng rng(6);
  auto model = merit::init_model<double>(cfg, rng);
  model.params[model.token_embedding()].fill(0);
  TokenBatch tokens{2, 8, std::vector<std::int32_t>(16, 65)};
  const double l = merit::loss(model, tokens, tokens);
  CHECK(std::abs(l - std::log(256.0)) <= 1e-12);
}

TEST_CASE("analytic gradients match central differences") {
  for (bool qk_norm : {false, true}) {
    CAPTURE(qk_norm);
    ModelConfig cfg = small_config();
    cfg.qk_norm = qk_norm;
    merit::SeededRng rng(7);
    auto model = merit::init_model<double>(cfg, rng);
    // Move away from the symmetric init so every path carries signal.
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      for (double &x : model.params[i].values()) {
        x += 0.05 * rng.normal();
      }
    }
    const TokenBatch tokens = random_tokens(2, 16, 256, rng);
    const TokenBatch targets = random_tokens(2, 16, 256, rng);
    const auto lg = merit::loss_and_grads(model, tokens, targets);
    CHECK(lg.loss == doctest::Approx(merit::loss(model, tokens, targets)));

    double worst = 0;
    for (std::size_t p = 0; p < model.params.size(); ++p) {
      for (int k = 0; k < 6; ++k) {
        const merit::Coordinate c{p, rng.below(model.params[p].numel())};
        const double numeric =
            merit::finite_diff_grad(model, tokens, targets, c, 1e-5);
        const double analytic = lg.grads[c.param][c.offset];
        worst = std::max(worst, rel_error(analytic, numeric));
      }
    }
    CHECK(worst <= 1e-4);
  }
}

TEST_CASE("duplicating the batch leaves loss and gradients unchanged") {
  const ModelConfig cfg = small_config();
  merit::SeededRng rng(8);
  const auto model = merit::init_model<double>(cfg, rng);
  const TokenBatch tokens = random_tokens(2, 16, 256, rng);
  const TokenBatch targets = random_tokens(2, 16, 256, rng);
  TokenBatch tokens2{4, 16, tokens.ids}, targets2{4, 16, targets.ids};
  tokens2.ids.insert(tokens2.ids.end(), tokens.ids.begin(), tokens.ids.end());
  targets2.ids.insert(targets2.ids.end(), targets.ids.begin(),
                      targets.ids.end());
  const auto a = merit::loss_and_grads(model, tokens, targets);
  const auto b = merit::loss_and_grads(model, tokens2, targets2);
  CHECK(std::abs(a.loss - b.loss) <= 1e-12);
  for (std::size_t p = 0; p < a.grads.size(); ++p) {
    for (std::size_t i = 0; i < a.grads[p].numel(); ++i) {
      REQUIRE(std::abs(a.grads[p][i] - b.grads[p][i]) <= 1e-12);
    }
  }
}

TEST_CASE("central differences") {
  auto square = [](double w) { return w * w; };
  CHECK(std::abs(merit::central_difference(square, 3.0, 1e-5) - 6.0) <= 1e-8);
  auto cubic = [](double w) { return w * w * w - 2 * w; };
  CHECK(merit::central_difference(cubic, 0.7, 1e-3) ==
        merit::central_difference(
            [&](double w) { return cubic(w); }, 0.7, 1e-3));
  CHECK_THROWS_AS(merit::central_difference(square, 1.0, 0.0),
                  merit::DomainError);

  const ModelConfig cfg = small_config();
  merit::SeededRng rng(9);
  auto model = merit::init_model<double>(cfg, rng);
  const TokenBatch tokens = random_tokens(1, 4, 256, rng);
  CHECK_THROWS_AS(merit::finite_diff_grad(model, tokens, tokens,
                                          {model.params.size(), 0}, 1e-5),
                  merit::DomainError);
  CHECK_THROWS_AS(
      merit::finite_diff_grad(model, tokens, tokens, {0, 1u << 30}, 1e-5),
      merit::DomainError);
  // Restores the perturbed weight exactly.
  const auto before = model.params;
  merit::finite_diff_grad(model, tokens, tokens, {3, 5}, 1e-5);
  CHECK(model.params == before);
}
