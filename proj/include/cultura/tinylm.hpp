#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

/// A small byte-level causal transformer with low-rank adapters.
///
/// Matrices act on row vectors: an activation block is T x D (one row per
/// position) and a projection W of shape out x in maps X to X * W^T. The
/// adapter on a projection adds scale * (X * A^T) * B^T with A of shape
/// rank x in and B of shape out x rank.
namespace cultura::tinylm {

using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr int kByteVocab = 256;
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocab = 259;

struct TinyConfig {
  int d_model = 256;
  int n_layers = 3;
  int d_ff = 1024;
  int max_seq = 512;

  void validate() const;
  friend bool operator==(const TinyConfig&, const TinyConfig&) = default;
};

/// Attention projections an adapter may target.
enum class Projection { query = 0, key = 1, value = 2, output = 3 };
inline constexpr std::size_t kProjections = 4;

std::string_view to_string(Projection p) noexcept;
/// Accepts "query"/"q_proj", "key"/"k_proj", "value"/"v_proj", "output"/"o_proj".
/// Throws ConfigError for anything else.
Projection parse_projection(std::string_view name);

struct Layer {
  VectorXd attn_norm;
  std::array<MatrixXd, kProjections> proj;  // each D x D
  VectorXd mlp_norm;
  MatrixXd w_up;    // F x D
  MatrixXd w_down;  // D x F
};

class TinyModel {
 public:
  /// Deterministic random initialization.
  static TinyModel init(const TinyConfig& config, std::uint64_t seed);
  /// `tiny:<seed>` builds a fresh model; anything else is a file path.
  static TinyModel from_ref(const std::string& ref);
  static TinyModel load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const TinyConfig& config() const noexcept { return config_; }
  std::size_t parameter_count() const;
  /// SHA-256 of every parameter's bytes in a fixed order.
  std::string checksum() const;

  MatrixXd token_embedding;     // V x D
  MatrixXd position_embedding;  // max_seq x D
  std::vector<Layer> layers;
  VectorXd final_norm;
  MatrixXd head;  // V x D

 private:
  TinyConfig config_;
};

struct LoraFactors {
  MatrixXd a;  // rank x in
  MatrixXd b;  // out x rank
};

struct LoraSpec {
  int rank = 16;
  double alpha = 32.0;
  std::vector<Projection> targets = {Projection::query, Projection::value};

  double scale() const noexcept { return alpha / rank; }
  void validate() const;
};

/// Low-rank adapter weights for a TinyModel. B starts at zero, so a fresh
/// adapter leaves the model's function unchanged.
class Adapter {
 public:
  static Adapter init(const TinyConfig& model, const LoraSpec& spec, std::uint64_t seed);
  static Adapter load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  const LoraSpec& spec() const noexcept { return spec_; }
  bool targets(Projection p) const noexcept;
  std::size_t parameter_count() const;

  /// Indexed [layer][projection]; empty matrices for untargeted projections.
  std::vector<std::array<LoraFactors, kProjections>> factors;

  /// Visits every trainable matrix in a fixed order.
  template <typename F>
  void for_each_matrix(F&& f) {
    for (auto& layer : factors) {
      for (std::size_t p = 0; p < kProjections; ++p) {
        if (!targets(static_cast<Projection>(p))) continue;
        f(layer[p].a);
        f(layer[p].b);
      }
    }
  }
  template <typename F>
  void for_each_matrix(F&& f) const {
    for (const auto& layer : factors) {
      for (std::size_t p = 0; p < kProjections; ++p) {
        if (!targets(static_cast<Projection>(p))) continue;
        f(layer[p].a);
        f(layer[p].b);
      }
    }
  }

 private:
  LoraSpec spec_;
};

/// Zero-filled gradients shaped like the adapter.
Adapter zeros_like(const Adapter& adapter);

/// [BOS] + UTF-8 bytes + [EOS], truncated to `max_tokens`.
std::vector<int> encode(std::string_view text, std::size_t max_tokens, bool add_eos = true);

/// Logits (T x V) for every position of `tokens`. `adapter` may be null.
MatrixXd forward_logits(const TinyModel& model, const Adapter* adapter, std::span<const int> tokens);

/// Summed next-token cross-entropy over the targets tokens[i] with
/// i >= max(1, first_target). When `grad` is non-null the gradient with
/// respect to the adapter, times `grad_scale`, is added into it. The number
/// of counted targets goes to `counted`.
double loss_and_grad(const TinyModel& model, const Adapter& adapter, std::span<const int> tokens,
                     std::size_t first_target, Adapter* grad, double grad_scale, std::size_t* counted = nullptr);

/// Loss only.
double sequence_loss(const TinyModel& model, const Adapter* adapter, std::span<const int> tokens,
                     std::size_t first_target = 0);

/// Incremental decoder with a key/value cache.
class Decoder {
 public:
  Decoder(const TinyModel& model, const Adapter* adapter);
  /// Feeds one token and returns the logits for the next one.
  VectorXd step(int token);
  std::size_t position() const noexcept { return pos_; }

 private:
  const TinyModel& model_;
  const Adapter* adapter_;
  std::vector<MatrixXd> keys_;
  std::vector<MatrixXd> values_;
  std::size_t pos_ = 0;
};

}  // namespace cultura::tinylm
