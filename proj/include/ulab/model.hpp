#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ulab/autodiff.hpp"
#include "ulab/grad_layout.hpp"
#include "ulab/vocab.hpp"

namespace ulab::lm {

struct ModelConfig {
  int vocab_size = 123;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int max_seq_len = 128;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Named parameter tensors in a fixed canonical order (see param_shapes()).
template <typename T>
struct ModelParams {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<T>>> tensors;

  const Tensor<T>& get(const std::string& name) const;
  Tensor<T>& get(const std::string& name);
  std::size_t count() const;

  std::vector<T> flat() const;
  void set_flat(const std::vector<T>& flat);

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    for (const auto& [n, t] : tensors) out.tensors.emplace_back(n, t.template cast<U>());
    return out;
  }

  bool operator==(const ModelParams& other) const {
    return config == other.config && tensors == other.tensors;
  }
};

/// Canonical (name, shape) list: tok_emb, pos_emb, per layer
/// {ln1.g, ln1.b, attn.qkv.w, attn.qkv.b, attn.proj.w, attn.proj.b, ln2.g, ln2.b,
///  mlp.fc.w, mlp.fc.b, mlp.proj.w, mlp.proj.b}, lnf.g, lnf.b, head.w, head.b.
std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& config);
ad::GradLayout param_layout(const ModelConfig& config);

/// Gaussian init, std 0.02; residual output projections use 0.02/sqrt(2 n_layers).
/// Layernorm gains start at 1, biases at 0.
template <typename T>
ModelParams<T> init_params(const ModelConfig& config);

enum class Segment { Input, Trace, Answer };

/// Positions inside a packed sequence
///   <bos> x... <think> r... <think-end> <answer> y... <eos>
/// The trace segment covers r plus the two closing markers; the answer segment
/// covers y plus <eos>. These are the positions whose tokens a span loss scores.
struct SequenceLayout {
  std::size_t input_begin = 1, input_end = 1;
  std::size_t think = 0;
  std::size_t trace_begin = 0, trace_end = 0;  // r content
  std::size_t think_end = 0, answer_marker = 0;
  std::size_t answer_begin = 0, answer_end = 0;  // y content
  std::size_t eos = 0;

  std::size_t length() const { return eos + 1; }
  std::pair<std::size_t, std::size_t> segment(Segment s) const;
};

struct PackedSequence {
  std::vector<int> tokens;
  SequenceLayout layout;
};

PackedSequence pack(const std::vector<int>& x, const std::vector<int>& r, const std::vector<int>& y);
/// Inverse of pack for a complete sequence; throws if markers are missing or out of order.
SequenceLayout locate(const std::vector<int>& tokens);

struct ForwardOptions {
  /// Capture the MLP output of this block (RMU). -1 disables.
  int capture_layer = -1;
  /// Record the token-embedding rows as a differentiable leaf so their
  /// gradient can be read after backward (GCG token gradients).
  bool embeddings_as_leaf = false;
};

template <typename T>
struct ForwardResult {
  ad::Var<T> logits;      // [n, vocab]
  ad::Var<T> hidden;      // [n, d] when captured
  ad::Var<T> embeddings;  // [n, d] when embeddings_as_leaf
};

/// Parameters registered on a tape, in canonical order.
template <typename T>
struct BoundParams {
  std::vector<ad::Var<T>> vars;
  const ModelConfig* config = nullptr;
};

template <typename T>
BoundParams<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, bool requires_grad);

template <typename T>
ForwardResult<T> forward(const BoundParams<T>& params, const std::vector<int>& tokens,
                         const ForwardOptions& options = {});

enum class Reduction { Mean, Sum };

/// Log-probabilities of the tokens at `positions` under teacher forcing. [n]
template <typename T>
ad::Var<T> token_log_probs(ad::Var<T> logits, const std::vector<int>& tokens,
                           const std::vector<std::size_t>& positions);

std::vector<std::size_t> segment_positions(const SequenceLayout& layout,
                                           const std::vector<Segment>& segments);

/// Negative log-likelihood of the selected segments, normalized by their
/// total length (Mean) or summed.
template <typename T>
ad::Var<T> nll_loss(const BoundParams<T>& params, const PackedSequence& seq,
                    const std::vector<Segment>& segments, Reduction reduction = Reduction::Mean);

/// Convenience: forward value of nll_loss without recording gradients.
template <typename T>
T nll_value(const ModelParams<T>& params, const PackedSequence& seq,
            const std::vector<Segment>& segments, Reduction reduction = Reduction::Mean);

/// Flat gradient of nll_loss for one sequence, in param_layout() order.
template <typename T>
std::vector<T> per_sample_grad(const ModelParams<T>& params, const PackedSequence& seq,
                               const std::vector<Segment>& segments);

/// Same, plus the loss value.
template <typename T>
std::pair<T, std::vector<T>> loss_and_grad(const ModelParams<T>& params, const PackedSequence& seq,
                                           const std::vector<Segment>& segments);

/// Logits of the last position, no tape gradients.
template <typename T>
std::vector<T> next_token_logits(const ModelParams<T>& params, const std::vector<int>& prefix);

struct Decoded {
  std::vector<int> generated;  // tokens after the prompt
  std::vector<int> trace;      // between <think> and <think-end>
  std::vector<int> answer;     // between <answer> and <eos>
  bool has_answer_marker = false;
  bool well_formed = false;    // <think-end>, <answer>, <eos> present and ordered
};

/// Prompt is <bos> x <think>; argmax decoding with ties to the lowest id,
/// stopping at <eos>, max_new tokens or the context limit.
template <typename T>
Decoded greedy_decode(const ModelParams<T>& params, const std::vector<int>& input, int max_new);

/// Splits a generated continuation into trace and answer parts.
Decoded parse_generation(const std::vector<int>& generated);

}  // namespace ulab::lm
