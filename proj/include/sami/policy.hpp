#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sami/rng.hpp"
#include "sami/vocab.hpp"

namespace sami {

// Decoder-only transformer: learned token + position embeddings, pre-norm
// blocks of causal multi-head self-attention and a two-layer GELU
// feed-forward, final layer norm, then an (optionally tied) output
// projection. Parameters live in a flat f32 vector with named segments;
// all forward/backward arithmetic runs in f64.
struct ModelConfig {
  int layers = 2;
  int width = 64;
  int heads = 4;
  int context = 256;
  int ffn_mult = 4;
  bool tied_embeddings = false;

  int head_dim() const { return width / heads; }
  int ffn_dim() const { return width * ffn_mult; }
  void validate() const;
};

struct SegmentRef {
  std::string name;
  size_t offset = 0;
  size_t size = 0;
};

class PolicyModel {
 public:
  PolicyModel() = default;

  // Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains.
  static PolicyModel init(const ModelConfig& cfg, Vocab vocab, Rng& rng);

  // All-zero parameters: uniform next-token distribution at every position.
  static PolicyModel zeros(const ModelConfig& cfg, Vocab vocab);

  PolicyModel clone() const { return *this; }

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  int vocab_size() const { return static_cast<int>(vocab_.size()); }

  std::span<const float> params() const { return params_; }
  std::span<float> mutable_params() { return params_; }
  size_t n_params() const { return params_.size(); }

  const std::vector<SegmentRef>& segments() const { return segments_; }
  std::span<const float> segment(std::string_view name) const;
  const std::string& segment_name_of(size_t param_index) const;

  // FNV-1a over the parameter bytes.
  uint64_t checksum() const;
  std::string checksum_hex() const;

  bool all_finite() const;

 private:
  friend PolicyModel assemble_model(ModelConfig cfg, Vocab vocab,
                                    std::vector<float> params);
  void build_layout();

  ModelConfig cfg_;
  Vocab vocab_;
  std::vector<float> params_;
  std::vector<SegmentRef> segments_;
};

// Internal constructor used by checkpoint loading; validates sizes.
PolicyModel assemble_model(ModelConfig cfg, Vocab vocab, std::vector<float> params);

struct GenerationConfig {
  double temperature = 0.0;
  int max_tokens = 64;
};

struct ResponseLogProb {
  // One entry per response token (nats); entries after the first
  // end-of-sequence marker are excluded from the mask and set to 0.
  std::vector<double> per_token;
  double total = 0.0;
  std::vector<uint8_t> response_mask;
};

// Teacher-forced log-probability of `response` given `prompt`, scored on
// response positions only. Throws for out-of-vocab ids or context overflow.
ResponseLogProb response_logprob(const PolicyModel& model, std::span<const int> prompt,
                                 std::span<const int> response);

// Temperature-0 greedy decoding (argmax, ties to the lowest id) or
// softmax(logits/t) sampling. Stops at end-of-sequence or max_tokens and
// returns the generated content tokens (prompt and the stop marker excluded).
std::vector<int> sample_response(const PolicyModel& model, std::span<const int> prompt,
                                 const GenerationConfig& gen, Rng& rng);

// The token-selection kernel behind sample_response, exposed for testing.
int sample_from_logits(std::span<const double> logits, double temperature, Rng& rng);

// ---------------------------------------------------------------------------
// Training-facing forward/backward machinery.

// Cached activations of one teacher-forced pass; reusable across passes.
struct ForwardCache {
  int T = 0;
  std::vector<int> tokens;
  struct LayerCache {
    std::vector<double> ln1_xhat, ln1_out, ln1_rstd;
    std::vector<double> qkv;     // [T, 3W]
    std::vector<double> attn_p;  // [H, T, T], lower triangle used
    std::vector<double> attn_out;
    std::vector<double> ln2_xhat, ln2_out, ln2_rstd;
    std::vector<double> ffn_pre, ffn_act;  // [T, F]
  };
  std::vector<LayerCache> layers;
  std::vector<double> lnf_xhat, lnf_out, lnf_rstd;
  std::vector<double> logits;  // [T, V]
  std::vector<double> lse;     // [T]
  std::vector<double> x;       // residual-stream scratch, not read by backward
};

// Runs the model over `tokens`, filling `cache` with logits at every
// position and the activations needed by backward_masked.
void forward_sequence(const PolicyModel& model, std::span<const int> tokens,
                      ForwardCache& cache);

// log p(target | tokens[0..pos]) from a filled cache.
double cached_logprob(const ForwardCache& cache, int pos, int target);

// A scored position: the objective gains weight * log p(target | prefix).
struct MaskedTarget {
  int pos;
  int target;
  double weight;
};

// Accumulates d(sum_i weight_i * logp_i)/d(params) into `grad`
// (size n_params, f64, same layout as the parameter vector).
void backward_masked(const PolicyModel& model, const ForwardCache& cache,
                     std::span<const MaskedTarget> targets, std::span<double> grad);

// Sum of log p(tokens[i+1] | tokens[0..i]) over all positions — the
// (negated, unnormalized) LM pretraining objective; convenience wrapper.
double sequence_logprob_with_grad(const PolicyModel& model, std::span<const int> tokens,
                                  double weight, ForwardCache& cache,
                                  std::span<double> grad);

}  // namespace sami
