#include <doctest.h>

#include <cmath>

#include "loco/backbone.hpp"

using loco::BackboneConfig;
using loco::Matrix;

namespace {

std::vector<std::size_t> argmax_labels(const loco::AttentionMaps& a) {
  std::vector<std::size_t> out(a.pixels());
  for (std::size_t p = 0; p < a.pixels(); ++p) out[p] = loco::argmax_first(a.a.row(p));
  return out;
}

void check_rows_normalized(const loco::AttentionMaps& a) {
  for (std::size_t r = 0; r < a.pixels(); ++r) {
    double s = 0.0;
    for (double v : a.a.row(r)) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
      s += v;
    }
    CHECK(std::abs(s - 1.0) <= 1e-12);
  }
}

}  // namespace

TEST_CASE("tokenize splits on whitespace and punctuation") {
  CHECK(loco::tokenize("A cat, and a DOG!") ==
        std::vector<std::string>{"a", "cat", "and", "a", "dog"});
  CHECK(loco::tokenize("  ...  ").empty());
}

TEST_CASE("embed_tokens") {
  const auto ts = loco::embed_tokens("cat dog", 1234, 32);
  CHECK(ts.size() == 4);
  CHECK(ts.words.front() == loco::kSotToken);
  CHECK(ts.words.back() == loco::kEotToken);
  CHECK(ts.sot_index() == 0);
  CHECK(ts.eot_index() == 3);
  CHECK(ts.embeddings.rows() == 4);
  CHECK(ts.embeddings.cols() == 32);
  for (double v : ts.embeddings.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }

  const auto again = loco::embed_tokens("cat dog", 1234, 32);
  CHECK(again.embeddings == ts.embeddings);
  CHECK(again.words == ts.words);

  const auto twice = loco::embed_tokens("cat cat", 1234, 32);
  for (std::size_t c = 0; c < 32; ++c) CHECK(twice.embeddings(1, c) == twice.embeddings(2, c));

  // Same word, same embedding, regardless of the rest of the prompt.
  const auto other = loco::embed_tokens("a big dog", 1234, 32);
  for (std::size_t c = 0; c < 32; ++c) CHECK(other.embeddings(3, c) == ts.embeddings(2, c));
  // The vocabulary seed matters.
  CHECK_FALSE(loco::embed_tokens("cat dog", 99, 32).embeddings == ts.embeddings);

  CHECK_THROWS_AS(loco::embed_tokens("", 1, 32), loco::ContractError);
  CHECK_THROWS_AS(loco::embed_tokens(" ,; ", 1, 32), loco::ContractError);
}

TEST_CASE("projections are seeded") {
  BackboneConfig cfg;
  const auto a = loco::make_projections(cfg);
  const auto b = loco::make_projections(cfg);
  CHECK(a.query == b.query);
  CHECK(a.key == b.key);
  CHECK(a.query.rows() == cfg.latent_dim);
  CHECK(a.key.rows() == cfg.embed_dim);
  CHECK(a.head_dim() == cfg.head_dim);
  cfg.proj_seed += 1;
  CHECK_FALSE(loco::make_projections(cfg).key == a.key);
}

TEST_CASE("cross_attention contracts") {
  BackboneConfig cfg;
  const loco::Backbone bb(cfg, "a cat and a dog");
  const auto z = loco::initial_latent(cfg, 3);
  CHECK(z.t == cfg.total_steps);
  CHECK(z.z.rows() == 256);
  const auto attn = loco::cross_attention(z, bb.tokens, bb.proj, cfg.resolution);
  CHECK(attn.a.rows() == 256);
  CHECK(attn.a.cols() == bb.tokens.size());
  check_rows_normalized(attn);

  loco::LatentState zero = z;
  zero.z = Matrix(256, cfg.latent_dim, 0.0);
  const auto uniform = loco::cross_attention(zero, bb.tokens, bb.proj, cfg.resolution);
  for (double v : uniform.a.data())
    CHECK(v == doctest::Approx(1.0 / double(bb.tokens.size())).epsilon(1e-15));

  loco::LatentState poked = z;
  poked.z(37, 4) += 0.5;
  const auto after = loco::cross_attention(poked, bb.tokens, bb.proj, cfg.resolution);
  for (std::size_t p = 0; p < 256; ++p) {
    bool same = true;
    for (std::size_t j = 0; j < attn.tokens(); ++j) same = same && attn.a(p, j) == after.a(p, j);
    CHECK(same == (p != 37));
  }

  loco::LatentState narrow = z;
  narrow.z = Matrix(256, cfg.latent_dim + 1);
  CHECK_THROWS_AS(loco::cross_attention(narrow, bb.tokens, bb.proj, cfg.resolution),
                  loco::ShapeError);
  CHECK_THROWS_AS(loco::cross_attention(z, bb.tokens, bb.proj, 8), loco::ShapeError);
  CHECK_THROWS_AS(attn.token_map(attn.tokens()), loco::ContractError);
}

TEST_CASE("denoise_step") {
  BackboneConfig cfg;
  const loco::Backbone bb(cfg, "a cat and a dog");
  const auto z = loco::initial_latent(cfg, 5);
  const auto attn = loco::cross_attention(z, bb.tokens, bb.proj, cfg.resolution);

  const auto same = loco::denoise_step(z, attn, bb.tokens, bb.proj, 0.0, 0.0);
  CHECK(same.z == z.z);
  CHECK(same.t == z.t - 1);

  const auto full = loco::denoise_step(z, attn, bb.tokens, bb.proj, 1.0, 0.0);
  const Matrix expected = loco::matmul(attn.a, loco::value_vectors(bb.tokens, bb.proj, 32));
  CHECK(full.z == expected);

  const auto n1 = loco::denoise_step(z, attn, bb.tokens, bb.proj, 0.15, 0.1);
  const auto n2 = loco::denoise_step(z, attn, bb.tokens, bb.proj, 0.15, 0.1);
  CHECK(n1.z == n2.z);
  CHECK_FALSE(n1.z == loco::denoise_step(z, attn, bb.tokens, bb.proj, 0.15, 0.0).z);

  loco::LatentState done = z;
  done.t = 0;
  CHECK_THROWS_AS(loco::denoise_step(done, attn, bb.tokens, bb.proj, 0.15, 0.0),
                  loco::ContractError);
  CHECK_THROWS_AS(loco::denoise_step(z, attn, bb.tokens, bb.proj, 1.5, 0.0), loco::ContractError);
  CHECK_THROWS_AS(loco::denoise_step(z, attn, bb.tokens, bb.proj, 0.5, -1.0),
                  loco::ContractError);
}

TEST_CASE("value vectors pad or truncate the keys") {
  BackboneConfig cfg;
  const loco::Backbone bb(cfg, "cat");
  const Matrix keys = loco::token_keys(bb.tokens, bb.proj);
  const Matrix wide = loco::value_vectors(bb.tokens, bb.proj, 40);
  const Matrix thin = loco::value_vectors(bb.tokens, bb.proj, 10);
  for (std::size_t r = 0; r < keys.rows(); ++r) {
    for (std::size_t c = 0; c < 40; ++c) CHECK(wide(r, c) == (c < 32 ? keys(r, c) : 0.0));
    for (std::size_t c = 0; c < 10; ++c) CHECK(thin(r, c) == keys(r, c));
  }
}

TEST_CASE("noise level decays linearly to zero") {
  BackboneConfig cfg;
  CHECK(loco::noise_level(cfg, cfg.total_steps) == doctest::Approx(cfg.sigma0));
  CHECK(loco::noise_level(cfg, 1) == 0.0);
  for (int t = 2; t <= cfg.total_steps; ++t)
    CHECK(loco::noise_level(cfg, t) > loco::noise_level(cfg, t - 1));
}

TEST_CASE("unguided trajectories are deterministic and stay normalized") {
  BackboneConfig cfg;
  const loco::Backbone bb(cfg, "a cat and a dog");
  auto run = [&] {
    auto z = loco::initial_latent(cfg, 11);
    std::vector<Matrix> states;
    while (z.t > 0) {
      const auto a = loco::cross_attention(z, bb.tokens, bb.proj, cfg.resolution);
      check_rows_normalized(a);
      z = loco::denoise_step(z, a, bb.tokens, bb.proj, cfg.rho, loco::noise_level(cfg, z.t));
      states.push_back(z.z);
    }
    return states;
  };
  CHECK(run() == run());
}

TEST_CASE("attention decisions persist without noise") {
  BackboneConfig cfg;
  cfg.sigma0 = 0.0;
  const int settle = static_cast<int>(std::ceil(0.4 * cfg.total_steps));
  const char* prompts[] = {"a cat and a dog", "a red barn next to a horse and a tree"};
  for (const char* prompt : prompts) {
    const loco::Backbone bb(cfg, prompt);
    std::size_t stable = 0;
    std::size_t total = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
      auto z = loco::initial_latent(cfg, seed);
      std::vector<std::size_t> at_settle;
      for (int s = 0; s < cfg.total_steps; ++s) {
        const auto a = loco::cross_attention(z, bb.tokens, bb.proj, cfg.resolution);
        if (s == settle) at_settle = argmax_labels(a);
        z = loco::denoise_step(z, a, bb.tokens, bb.proj, cfg.rho, 0.0);
      }
      const auto final_labels =
          argmax_labels(loco::cross_attention(z, bb.tokens, bb.proj, cfg.resolution));
      for (std::size_t p = 0; p < final_labels.size(); ++p)
        stable += final_labels[p] == at_settle[p] ? 1 : 0;
      total += final_labels.size();
    }
    const double frac = double(stable) / double(total);
    INFO(prompt << ": " << frac);
    CHECK(frac >= 0.95);
  }
}
