#include "loco/backbone.hpp"

#include <cctype>
#include <cmath>
#include <random>

namespace loco {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t s = a ^ (b * 0x9e3779b97f4a7c15ULL);
  return splitmix64(s);
}

void embed_word(std::string_view word, std::uint64_t vocab_seed, std::span<double> out) {
  std::uint64_t state = mix(fnv1a(word), vocab_seed);
  for (double& v : out) {
    const double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
    v = 2.0 * u - 1.0;
  }
}

}  // namespace

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

TokenSet embed_tokens(std::string_view prompt, std::uint64_t vocab_seed, std::size_t embed_dim) {
  auto words = tokenize(prompt);
  if (words.empty()) throw ContractError("embed_tokens: prompt has no tokens");
  TokenSet ts;
  ts.words.reserve(words.size() + 2);
  ts.words.emplace_back(kSotToken);
  for (auto& w : words) ts.words.push_back(std::move(w));
  ts.words.emplace_back(kEotToken);
  ts.embeddings = Matrix(ts.words.size(), embed_dim);
  for (std::size_t i = 0; i < ts.words.size(); ++i)
    embed_word(ts.words[i], vocab_seed, ts.embeddings.row(i));
  return ts;
}

ProjectionSet make_projections(const BackboneConfig& cfg) {
  std::mt19937_64 gen(cfg.proj_seed);
  ProjectionSet p;
  p.seed = cfg.proj_seed;
  // Gaussian draw, then Gram-Schmidt on the columns so that keys keep the
  // embedding norms (no token is a systematically stronger attractor).
  p.key = Matrix(cfg.embed_dim, cfg.head_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& v : p.key.data()) v = normal(gen);
  for (std::size_t c = 0; c < std::min(cfg.embed_dim, cfg.head_dim); ++c) {
    for (std::size_t prev = 0; prev < c; ++prev) {
      double dot = 0.0;
      for (std::size_t r = 0; r < cfg.embed_dim; ++r) dot += p.key(r, c) * p.key(r, prev);
      for (std::size_t r = 0; r < cfg.embed_dim; ++r) p.key(r, c) -= dot * p.key(r, prev);
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < cfg.embed_dim; ++r) norm += p.key(r, c) * p.key(r, c);
    norm = std::sqrt(norm);
    for (std::size_t r = 0; r < cfg.embed_dim; ++r) p.key(r, c) /= norm;
  }

  p.query = Matrix(cfg.latent_dim, cfg.head_dim);
  std::normal_distribution<double> jitter(0.0, 1.0 / std::sqrt(double(cfg.head_dim)));
  for (std::size_t r = 0; r < cfg.latent_dim; ++r) {
    for (std::size_t c = 0; c < cfg.head_dim; ++c) {
      const double eye = r == c ? 1.0 : 0.0;
      p.query(r, c) = cfg.query_gain * (eye + cfg.query_jitter * jitter(gen));
    }
  }
  return p;
}

LatentState initial_latent(const BackboneConfig& cfg, std::uint64_t rng_seed) {
  LatentState s;
  s.z = Matrix(cfg.pixels(), cfg.latent_dim);
  s.t = cfg.total_steps;
  s.total_steps = cfg.total_steps;
  s.rng_seed = rng_seed;
  std::mt19937_64 gen(mix(rng_seed, 0x1a7e47ULL));
  std::normal_distribution<double> normal(0.0, cfg.latent_scale);
  for (double& v : s.z.data()) v = normal(gen);
  return s;
}

std::vector<double> AttentionMaps::token_map(std::size_t j) const {
  if (j >= a.cols()) throw ContractError("token_map: token index out of range");
  std::vector<double> m(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) m[r] = a(r, j);
  return m;
}

Matrix token_keys(const TokenSet& tokens, const ProjectionSet& proj) {
  return matmul(tokens.embeddings, proj.key);
}

Var cross_attention(Tape& tape, Var z, const TokenSet& tokens, const ProjectionSet& proj) {
  const Matrix& zv = tape.value(z);
  if (zv.cols() != proj.query.rows()) {
    throw ShapeError("cross_attention: latent width " + std::to_string(zv.cols()) +
                     " does not match W_Q rows " + std::to_string(proj.query.rows()));
  }
  if (tokens.embeddings.cols() != proj.key.rows()) {
    throw ShapeError("cross_attention: embedding width does not match W_K rows");
  }
  Var wq = tape.constant(proj.query);
  Var keys_t = tape.constant(transpose(token_keys(tokens, proj)));
  Var q = tape.matmul(z, wq);
  Var logits = tape.matmul(q, keys_t);
  return tape.row_softmax(logits, std::sqrt(double(proj.head_dim())));
}

AttentionMaps cross_attention(const LatentState& z, const TokenSet& tokens,
                              const ProjectionSet& proj, std::size_t resolution) {
  if (z.z.rows() != resolution * resolution) {
    throw ShapeError("cross_attention: latent has " + std::to_string(z.z.rows()) +
                     " pixels, expected " + std::to_string(resolution * resolution));
  }
  Tape tape;
  Var a = cross_attention(tape, tape.constant(z.z), tokens, proj);
  return AttentionMaps{tape.value(a), resolution};
}

double noise_level(const BackboneConfig& cfg, int t) {
  if (cfg.total_steps <= 1) return 0.0;
  return cfg.sigma0 * double(t - 1) / double(cfg.total_steps - 1);
}

Matrix value_vectors(const TokenSet& tokens, const ProjectionSet& proj, std::size_t latent_dim) {
  const Matrix keys = token_keys(tokens, proj);
  Matrix v(keys.rows(), latent_dim);
  const std::size_t w = std::min(latent_dim, keys.cols());
  for (std::size_t r = 0; r < keys.rows(); ++r)
    for (std::size_t c = 0; c < w; ++c) v(r, c) = keys(r, c);
  return v;
}

LatentState denoise_step(const LatentState& z, const AttentionMaps& attn, const TokenSet& tokens,
                         const ProjectionSet& proj, double rho, double sigma) {
  if (z.t <= 0) throw ContractError("denoise_step: latent is already at t = 0");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("denoise_step: rho outside [0, 1]");
  if (!(sigma >= 0.0)) throw ContractError("denoise_step: sigma must be non-negative");
  if (attn.a.rows() != z.z.rows() || attn.a.cols() != tokens.size()) {
    throw ShapeError("denoise_step: attention shape does not match latent/tokens");
  }

  LatentState next = z;
  next.t = z.t - 1;
  if (rho == 0.0 && sigma == 0.0) return next;

  const Matrix pulled = matmul(attn.a, value_vectors(tokens, proj, z.z.cols()));
  std::mt19937_64 gen(mix(z.rng_seed, static_cast<std::uint64_t>(z.t)));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < next.z.size(); ++k) {
    double v = (1.0 - rho) * z.z[k] + rho * pulled[k];
    if (sigma > 0.0) v += sigma * normal(gen);
    next.z[k] = v;
  }
  return next;
}

Backbone::Backbone(BackboneConfig cfg, std::string_view prompt)
    : config(cfg),
      tokens(embed_tokens(prompt, cfg.vocab_seed, cfg.embed_dim)),
      proj(make_projections(cfg)) {}

}  // namespace loco
