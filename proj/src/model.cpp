#include "ulab/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ulab::lm {

void ModelConfig::validate() const {
  if (vocab_size <= tok::kNumReserved) throw Error("model config: vocab_size too small");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 1) {
    throw Error("model config: dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw Error("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                std::to_string(n_heads));
  }
}

std::vector<std::pair<std::string, Shape>> param_shapes(const ModelConfig& c) {
  const std::size_t V = static_cast<std::size_t>(c.vocab_size);
  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t L = static_cast<std::size_t>(c.max_seq_len);
  std::vector<std::pair<std::string, Shape>> s;
  s.emplace_back("tok_emb", Shape{V, d});
  s.emplace_back("pos_emb", Shape{L, d});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    s.emplace_back(p + "ln1.g", Shape{d});
    s.emplace_back(p + "ln1.b", Shape{d});
    s.emplace_back(p + "attn.qkv.w", Shape{d, 3 * d});
    s.emplace_back(p + "attn.qkv.b", Shape{3 * d});
    s.emplace_back(p + "attn.proj.w", Shape{d, d});
    s.emplace_back(p + "attn.proj.b", Shape{d});
    s.emplace_back(p + "ln2.g", Shape{d});
    s.emplace_back(p + "ln2.b", Shape{d});
    s.emplace_back(p + "mlp.fc.w", Shape{d, 4 * d});
    s.emplace_back(p + "mlp.fc.b", Shape{4 * d});
    s.emplace_back(p + "mlp.proj.w", Shape{4 * d, d});
    s.emplace_back(p + "mlp.proj.b", Shape{d});
  }
  s.emplace_back("lnf.g", Shape{d});
  s.emplace_back("lnf.b", Shape{d});
  s.emplace_back("head.w", Shape{d, V});
  s.emplace_back("head.b", Shape{V});
  return s;
}

ad::GradLayout param_layout(const ModelConfig& config) {
  return ad::GradLayout::from_shapes(param_shapes(config));
}

// ---- ModelParams --------------------------------------------------------------

template <typename T>
const Tensor<T>& ModelParams<T>::get(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw Error("model params: no tensor named '" + name + "'");
}

template <typename T>
Tensor<T>& ModelParams<T>::get(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  throw Error("model params: no tensor named '" + name + "'");
}

template <typename T>
std::size_t ModelParams<T>::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.numel();
  return n;
}

template <typename T>
std::vector<T> ModelParams<T>::flat() const {
  std::vector<T> out;
  out.reserve(count());
  for (const auto& [name, t] : tensors) out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

template <typename T>
void ModelParams<T>::set_flat(const std::vector<T>& flat) {
  if (flat.size() != count()) {
    throw ShapeError("set_flat: got " + std::to_string(flat.size()) + " values for " +
                     std::to_string(count()) + " parameters");
  }
  std::size_t off = 0;
  for (auto& [name, t] : tensors) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.numel(), t.data.begin());
    off += t.numel();
  }
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const T std_base = static_cast<T>(0.02);
  const T std_out = static_cast<T>(0.02 / std::sqrt(2.0 * config.n_layers));
  ModelParams<T> p;
  p.config = config;
  for (const auto& [name, shape] : param_shapes(config)) {
    const auto ends_with = [&name](const std::string& suffix) {
      return name.size() >= suffix.size() &&
             name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    Tensor<T> t;
    if (ends_with(".g")) {
      t = Tensor<T>::filled(shape, T(1));
    } else if (ends_with(".b")) {
      t = Tensor<T>(shape);
    } else if (ends_with("attn.proj.w") || ends_with("mlp.proj.w")) {
      t = Tensor<T>::randn(shape, std_out, rng);
    } else {
      t = Tensor<T>::randn(shape, std_base, rng);
    }
    p.tensors.emplace_back(name, std::move(t));
  }
  return p;
}

// ---- layout -----------------------------------------------------------------------

std::pair<std::size_t, std::size_t> SequenceLayout::segment(Segment s) const {
  switch (s) {
    case Segment::Input:
      return {input_begin, input_end};
    case Segment::Trace:
      return {trace_begin, answer_marker + 1};
    case Segment::Answer:
      return {answer_begin, eos + 1};
  }
  return {0, 0};
}

PackedSequence pack(const std::vector<int>& x, const std::vector<int>& r, const std::vector<int>& y) {
  PackedSequence s;
  auto& t = s.tokens;
  auto& L = s.layout;
  t.push_back(tok::kBos);
  L.input_begin = t.size();
  t.insert(t.end(), x.begin(), x.end());
  L.input_end = t.size();
  L.think = t.size();
  t.push_back(tok::kThink);
  L.trace_begin = t.size();
  t.insert(t.end(), r.begin(), r.end());
  L.trace_end = t.size();
  L.think_end = t.size();
  t.push_back(tok::kThinkEnd);
  L.answer_marker = t.size();
  t.push_back(tok::kAnswer);
  L.answer_begin = t.size();
  t.insert(t.end(), y.begin(), y.end());
  L.answer_end = t.size();
  L.eos = t.size();
  t.push_back(tok::kEos);
  return s;
}

SequenceLayout locate(const std::vector<int>& tokens) {
  auto find = [&tokens](int id, std::size_t from) {
    for (std::size_t i = from; i < tokens.size(); ++i)
      if (tokens[i] == id) return i;
    throw Error("locate: marker " + std::to_string(id) + " missing");
  };
  if (tokens.empty() || tokens[0] != tok::kBos) throw Error("locate: sequence must start with <bos>");
  SequenceLayout L;
  L.input_begin = 1;
  L.think = find(tok::kThink, 1);
  L.input_end = L.think;
  L.trace_begin = L.think + 1;
  L.think_end = find(tok::kThinkEnd, L.trace_begin);
  L.trace_end = L.think_end;
  L.answer_marker = L.think_end + 1;
  if (L.answer_marker >= tokens.size() || tokens[L.answer_marker] != tok::kAnswer) {
    throw Error("locate: <answer> must follow <think-end>");
  }
  L.answer_begin = L.answer_marker + 1;
  L.eos = find(tok::kEos, L.answer_begin);
  L.answer_end = L.eos;
  if (L.eos + 1 != tokens.size()) throw Error("locate: tokens after <eos>");
  return L;
}

std::vector<std::size_t> segment_positions(const SequenceLayout& layout,
                                           const std::vector<Segment>& segments) {
  std::vector<std::size_t> pos;
  for (auto s : segments) {
    auto [b, e] = layout.segment(s);
    for (std::size_t p = b; p < e; ++p) pos.push_back(p);
  }
  std::sort(pos.begin(), pos.end());
  pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
  return pos;
}

// ---- forward ---------------------------------------------------------------------

template <typename T>
BoundParams<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params, bool requires_grad) {
  BoundParams<T> b;
  b.config = &params.config;
  b.vars.reserve(params.tensors.size());
  for (const auto& [name, t] : params.tensors) b.vars.push_back(tape.leaf(t, requires_grad, name));
  return b;
}

template <typename T>
ForwardResult<T> forward(const BoundParams<T>& params, const std::vector<int>& tokens,
                         const ForwardOptions& options) {
  const ModelConfig& c = *params.config;
  const std::size_t n = tokens.size();
  if (n == 0) throw Error("forward: empty sequence");
  if (n > static_cast<std::size_t>(c.max_seq_len)) {
    throw Error("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                std::to_string(c.max_seq_len));
  }
  const auto& P = params.vars;
  std::size_t k = 0;
  auto next = [&P, &k]() { return P.at(k++); };

  ForwardResult<T> out;
  ad::Var<T> tok_emb = next();
  ad::Var<T> pos_emb = next();
  ad::Var<T> emb = ad::embedding(tok_emb, tokens);
  if (options.embeddings_as_leaf) {
    emb = tok_emb.tape()->leaf(emb.value(), true);
    out.embeddings = emb;
  }
  ad::Var<T> h = ad::add(emb, ad::slice(pos_emb, 0, 0, n));

  const std::size_t d = static_cast<std::size_t>(c.d_model);
  const std::size_t nh = static_cast<std::size_t>(c.n_heads);
  const std::size_t dh = d / nh;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  for (int l = 0; l < c.n_layers; ++l) {
    auto ln1g = next(), ln1b = next(), qkvw = next(), qkvb = next(), projw = next(),
         projb = next(), ln2g = next(), ln2b = next(), fcw = next(), fcb = next(),
         mprojw = next(), mprojb = next();
    ad::Var<T> a = ad::layernorm(h, ln1g, ln1b);
    ad::Var<T> qkv = ad::add(ad::matmul(a, qkvw), qkvb);
    std::vector<ad::Var<T>> heads;
    heads.reserve(nh);
    for (std::size_t hd = 0; hd < nh; ++hd) {
      ad::Var<T> q = ad::slice(qkv, 1, hd * dh, dh);
      ad::Var<T> kk = ad::slice(qkv, 1, d + hd * dh, dh);
      ad::Var<T> v = ad::slice(qkv, 1, 2 * d + hd * dh, dh);
      ad::Var<T> s = ad::scale(ad::matmul(q, ad::transpose(kk)), att_scale);
      ad::Var<T> pr = ad::softmax(ad::causal_mask(s));
      heads.push_back(ad::matmul(pr, v));
    }
    ad::Var<T> att = nh == 1 ? heads[0] : ad::concat(heads, 1);
    h = ad::add(h, ad::add(ad::matmul(att, projw), projb));
    ad::Var<T> m = ad::layernorm(h, ln2g, ln2b);
    m = ad::gelu(ad::add(ad::matmul(m, fcw), fcb));
    m = ad::add(ad::matmul(m, mprojw), mprojb);
    if (l == options.capture_layer) out.hidden = m;
    h = ad::add(h, m);
  }
  auto lnfg = next(), lnfb = next(), headw = next(), headb = next();
  h = ad::layernorm(h, lnfg, lnfb);
  out.logits = ad::add(ad::matmul(h, headw), headb);
  return out;
}

template <typename T>
ad::Var<T> token_log_probs(ad::Var<T> logits, const std::vector<int>& tokens,
                           const std::vector<std::size_t>& positions) {
  std::vector<std::size_t> rows, cols;
  rows.reserve(positions.size());
  cols.reserve(positions.size());
  for (auto p : positions) {
    if (p == 0 || p >= tokens.size()) {
      throw Error("token_log_probs: position " + std::to_string(p) + " has no prefix");
    }
    rows.push_back(p - 1);
    cols.push_back(static_cast<std::size_t>(tokens[p]));
  }
  // Only rows that are scored need a log-softmax.
  std::vector<std::size_t> uniq = rows;
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  const bool contiguous = !uniq.empty() && uniq.back() - uniq.front() + 1 == uniq.size();
  if (contiguous) {
    ad::Var<T> lp = ad::log_softmax(ad::slice(logits, 0, uniq.front(), uniq.size()));
    for (auto& r : rows) r -= uniq.front();
    return ad::pick(lp, rows, cols);
  }
  return ad::pick(ad::log_softmax(logits), rows, cols);
}

template <typename T>
ad::Var<T> nll_loss(const BoundParams<T>& params, const PackedSequence& seq,
                    const std::vector<Segment>& segments, Reduction reduction) {
  const auto positions = segment_positions(seq.layout, segments);
  if (positions.empty()) throw Error("nll_loss: selected segments are empty");
  auto fr = forward(params, seq.tokens);
  ad::Var<T> lp = token_log_probs(fr.logits, seq.tokens, positions);
  const T s = reduction == Reduction::Mean ? T(-1) / static_cast<T>(positions.size()) : T(-1);
  return ad::scale(ad::sum(lp), s);
}

template <typename T>
T nll_value(const ModelParams<T>& params, const PackedSequence& seq,
            const std::vector<Segment>& segments, Reduction reduction) {
  ad::Tape<T> tape;
  auto b = bind(tape, params, false);
  return nll_loss(b, seq, segments, reduction).value().item();
}

template <typename T>
std::pair<T, std::vector<T>> loss_and_grad(const ModelParams<T>& params, const PackedSequence& seq,
                                           const std::vector<Segment>& segments) {
  ad::Tape<T> tape;
  auto b = bind(tape, params, true);
  auto loss = nll_loss(b, seq, segments);
  const T value = loss.value().item();
  auto grads = tape.backward(loss);
  return {value, ad::flatten(grads, param_layout(params.config))};
}

template <typename T>
std::vector<T> per_sample_grad(const ModelParams<T>& params, const PackedSequence& seq,
                               const std::vector<Segment>& segments) {
  return loss_and_grad(params, seq, segments).second;
}

template <typename T>
std::vector<T> next_token_logits(const ModelParams<T>& params, const std::vector<int>& prefix) {
  ad::Tape<T> tape;
  auto b = bind(tape, params, false);
  auto fr = forward(b, prefix);
  const auto& v = fr.logits.value();
  const std::size_t V = v.cols();
  return std::vector<T>(v.data.end() - static_cast<std::ptrdiff_t>(V), v.data.end());
}

Decoded parse_generation(const std::vector<int>& generated) {
  auto is_marker = [](int t) { return t >= 0 && t <= tok::kEos; };
  Decoded d;
  d.generated = generated;
  std::size_t i = 0;
  while (i < generated.size() && !is_marker(generated[i])) d.trace.push_back(generated[i++]);
  const bool canonical = i + 1 < generated.size() && generated[i] == tok::kThinkEnd &&
                         generated[i + 1] == tok::kAnswer;
  std::size_t a = generated.size();
  for (std::size_t j = i; j < generated.size(); ++j) {
    if (generated[j] == tok::kAnswer) {
      a = j;
      break;
    }
  }
  if (a == generated.size()) return d;
  d.has_answer_marker = true;
  std::size_t j = a + 1;
  while (j < generated.size() && !is_marker(generated[j])) d.answer.push_back(generated[j++]);
  d.well_formed = canonical && j < generated.size() && generated[j] == tok::kEos;
  return d;
}

template <typename T>
Decoded greedy_decode(const ModelParams<T>& params, const std::vector<int>& input, int max_new) {
  std::vector<int> seq;
  seq.push_back(tok::kBos);
  seq.insert(seq.end(), input.begin(), input.end());
  seq.push_back(tok::kThink);
  const std::size_t limit = static_cast<std::size_t>(params.config.max_seq_len);
  if (seq.size() >= limit) {
    throw Error("greedy_decode: prompt of " + std::to_string(seq.size()) +
                " tokens leaves no room under max_seq_len");
  }
  ad::Tape<T> tape;
  auto b = bind(tape, params, false);
  std::vector<int> generated;
  for (int step = 0; step < max_new && seq.size() < limit; ++step) {
    auto fr = forward(b, seq);
    const auto& v = fr.logits.value();
    const std::size_t V = v.cols();
    const T* last = v.data.data() + (v.rows() - 1) * V;
    std::size_t best = 0;
    for (std::size_t j = 1; j < V; ++j)
      if (last[j] > last[best]) best = j;
    const int next = static_cast<int>(best);
    generated.push_back(next);
    seq.push_back(next);
    if (next == tok::kEos) break;
  }
  return parse_generation(generated);
}

#define ULAB_INSTANTIATE(T)                                                                     \
  template struct ModelParams<T>;                                                               \
  template ModelParams<T> init_params(const ModelConfig&);                                      \
  template BoundParams<T> bind(ad::Tape<T>&, const ModelParams<T>&, bool);                      \
  template ForwardResult<T> forward(const BoundParams<T>&, const std::vector<int>&,             \
                                    const ForwardOptions&);                                     \
  template ad::Var<T> token_log_probs(ad::Var<T>, const std::vector<int>&,                      \
                                      const std::vector<std::size_t>&);                         \
  template ad::Var<T> nll_loss(const BoundParams<T>&, const PackedSequence&,                    \
                               const std::vector<Segment>&, Reduction);                         \
  template T nll_value(const ModelParams<T>&, const PackedSequence&, const std::vector<Segment>&, \
                       Reduction);                                                              \
  template std::pair<T, std::vector<T>> loss_and_grad(const ModelParams<T>&,                    \
                                                      const PackedSequence&,                    \
                                                      const std::vector<Segment>&);             \
  template std::vector<T> per_sample_grad(const ModelParams<T>&, const PackedSequence&,         \
                                          const std::vector<Segment>&);                         \
  template std::vector<T> next_token_logits(const ModelParams<T>&, const std::vector<int>&);    \
  template Decoded greedy_decode(const ModelParams<T>&, const std::vector<int>&, int);

ULAB_INSTANTIATE(float)
ULAB_INSTANTIATE(double)

#undef ULAB_INSTANTIATE

}  // namespace ulab::lm
