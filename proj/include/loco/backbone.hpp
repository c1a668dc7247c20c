#pragma once

// A frozen toy cross-attention denoiser. Latent pixels attend over prompt
// tokens; each denoise step pulls a pixel toward the value vectors of the
// tokens it attends to, so attention decisions made early persist.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "loco/diffmath.hpp"

namespace loco {

struct BackboneConfig {
  std::size_t resolution = 16;   // latent grid is resolution x resolution
  std::size_t embed_dim = 32;    // d_e
  std::size_t head_dim = 32;     // d
  std::size_t latent_dim = 32;   // d_z
  int total_steps = 51;          // T
  double rho = 0.15;             // denoise mixing rate
  double sigma0 = 0.1;           // noise at the first step, decays linearly to 0
  double latent_scale = 0.1;     // std of the initial latent
  double query_gain = 5.0;       // W_Q = gain * (I + query_jitter * R)
  double query_jitter = 0.25;
  std::uint64_t vocab_seed = 1234;
  std::uint64_t proj_seed = 5678;

  std::size_t pixels() const { return resolution * resolution; }
};

// Lowercased alphanumeric runs; whitespace and punctuation separate tokens.
std::vector<std::string> tokenize(std::string_view text);

// Prompt embeddings with [SoT] at row 0 and [EoT] at row n-1.
struct TokenSet {
  std::vector<std::string> words;  // includes the two padding tokens
  Matrix embeddings;               // n x d_e

  std::size_t size() const { return words.size(); }
  std::size_t sot_index() const { return 0; }
  std::size_t eot_index() const { return words.size() - 1; }
};

inline constexpr std::string_view kSotToken = "<|startoftext|>";
inline constexpr std::string_view kEotToken = "<|endoftext|>";

TokenSet embed_tokens(std::string_view prompt, std::uint64_t vocab_seed, std::size_t embed_dim);

struct ProjectionSet {
  Matrix query;  // d_z x d
  Matrix key;    // d_e x d
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return query.cols(); }
};

ProjectionSet make_projections(const BackboneConfig& cfg);

struct LatentState {
  Matrix z;          // q x d_z
  int t = 0;         // counts down from total_steps to 0
  int total_steps = 0;
  std::uint64_t rng_seed = 0;
};

// z ~ N(0, latent_scale^2), t = T.
LatentState initial_latent(const BackboneConfig& cfg, std::uint64_t rng_seed);

struct AttentionMaps {
  Matrix a;  // q x n, rows sum to 1
  std::size_t resolution = 16;

  std::size_t tokens() const { return a.cols(); }
  std::size_t pixels() const { return a.rows(); }
  // Column j as a q-vector in row-major grid order.
  std::vector<double> token_map(std::size_t j) const;
};

// Keys K = e * W_K, shared by attention and the value path.
Matrix token_keys(const TokenSet& tokens, const ProjectionSet& proj);

// Records Q = z W_Q, K, and A = softmax(Q K^T / sqrt(d)) on `tape`, with z
// as the only differentiable input. Returns the attention node.
Var cross_attention(Tape& tape, Var z, const TokenSet& tokens, const ProjectionSet& proj);

// Untaped forward of the above.
AttentionMaps cross_attention(const LatentState& z, const TokenSet& tokens,
                              const ProjectionSet& proj, std::size_t resolution);

// Noise level for the denoise step taken at timestep t (t = T .. 1).
double noise_level(const BackboneConfig& cfg, int t);

// z <- (1 - rho) z + rho A E_v + sigma eta, t <- t - 1. eta is drawn from a
// generator keyed by (rng_seed, t) so the step is a pure function.
LatentState denoise_step(const LatentState& z, const AttentionMaps& attn, const TokenSet& tokens,
                         const ProjectionSet& proj, double rho, double sigma);

// Value vectors E_v: keys padded with zeros or truncated to d_z columns.
Matrix value_vectors(const TokenSet& tokens, const ProjectionSet& proj, std::size_t latent_dim);

// Everything a run needs that does not change between steps.
struct Backbone {
  BackboneConfig config;
  TokenSet tokens;
  ProjectionSet proj;

  Backbone(BackboneConfig cfg, std::string_view prompt);
};

}  // namespace loco
