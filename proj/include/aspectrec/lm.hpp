#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aspectrec/corpus.hpp"
#include "aspectrec/kernels.hpp"
#include "aspectrec/param_store.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tape.hpp"

namespace aspectrec {

// Thrown when a training loss goes non-finite; carries enough context to
// name the offending phase and batch.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& phase, std::size_t epoch,
                  std::size_t batch)
      : std::runtime_error("non-finite loss in phase '" + phase + "' at epoch " +
                           std::to_string(epoch) + ", batch " +
                           std::to_string(batch)),
        phase_(phase),
        epoch_(epoch),
        batch_(batch) {}

  const std::string& phase() const { return phase_; }
  std::size_t epoch() const { return epoch_; }
  std::size_t batch() const { return batch_; }

 private:
  std::string phase_;
  std::size_t epoch_;
  std::size_t batch_;
};

struct LmConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_seq_len = 64;
  // Fine-tuning layer width; the layer is residual, so it must match d_model
  // (-1 resolves to d_model).
  int ft_width = -1;
  double init_std = 0.08;

  void validate() const {
    if (vocab_size < 5) throw std::invalid_argument("lm: vocab too small");
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len < 2)
      throw std::invalid_argument("lm: non-positive dimension");
    if (d_model % n_heads != 0)
      throw std::invalid_argument("lm: d_model must be divisible by heads");
    if (ft_width != -1 && ft_width != d_model)
      throw std::invalid_argument(
          "lm: ft_width must equal d_model (residual layer)");
  }
};

// Parameter indices of the causal transformer plus the optional fine-tuning
// layer. Base parameters live under "lm.base.", the fine-tuning layer under
// "lm.ft."; group freezing flips flags by prefix.
template <class S>
struct LanguageModel {
  LmConfig cfg;
  int tok_emb = -1;
  int pos_emb = -1;
  struct BlockIds {
    int ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
    int ln2_g, ln2_b, w1, b1, w2, b2;
  };
  std::vector<BlockIds> blocks;
  int lnf_g = -1, lnf_b = -1;
  int head_w = -1, head_b = -1;
  int ft_w = -1, ft_b = -1;

  bool has_finetune_layer() const { return ft_w >= 0; }
};

namespace detail {

template <class S>
Tensor<S> gaussian_tensor(std::vector<std::size_t> shape, SplitMix64& rng,
                          double stddev) {
  Tensor<S> t(std::move(shape));
  for (S& v : t.values) v = static_cast<S>(stddev * rng.gaussian());
  return t;
}

template <class S>
Tensor<S> const_tensor(std::vector<std::size_t> shape, S value) {
  Tensor<S> t(std::move(shape));
  t.fill(value);
  return t;
}

}  // namespace detail

// Fresh base model with N(0, 0.08) weights, unit layer-norm gains, zero
// biases. Base parameters start trainable (for pretraining).
template <class S>
LanguageModel<S> build_lm(ParamStore<S>& store, const LmConfig& cfg,
                          std::uint64_t seed) {
  cfg.validate();
  const double kInitStd = cfg.init_std;
  SplitMix64 rng = make_stream(seed, "init.lm");
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto L = static_cast<std::size_t>(cfg.max_seq_len);

  LanguageModel<S> m;
  m.cfg = cfg;
  auto gauss = [&](const std::string& name, std::vector<std::size_t> shape) {
    return store.add(name, detail::gaussian_tensor<S>(std::move(shape), rng,
                                                      kInitStd));
  };
  auto fixed = [&](const std::string& name, std::vector<std::size_t> shape,
                   S value) {
    return store.add(name, detail::const_tensor<S>(std::move(shape), value));
  };
  m.tok_emb = gauss("lm.base.tok_emb", {V, d});
  m.pos_emb = gauss("lm.base.pos_emb", {L, d});
  for (int b = 0; b < cfg.n_layers; ++b) {
    const std::string p = "lm.base.block" + std::to_string(b) + ".";
    typename LanguageModel<S>::BlockIds ids{};
    ids.ln1_g = fixed(p + "ln1_g", {d}, S(1));
    ids.ln1_b = fixed(p + "ln1_b", {d}, S(0));
    ids.wq = gauss(p + "wq", {d, d});
    ids.bq = fixed(p + "bq", {d}, S(0));
    ids.wk = gauss(p + "wk", {d, d});
    ids.bk = fixed(p + "bk", {d}, S(0));
    ids.wv = gauss(p + "wv", {d, d});
    ids.bv = fixed(p + "bv", {d}, S(0));
    ids.wo = gauss(p + "wo", {d, d});
    ids.bo = fixed(p + "bo", {d}, S(0));
    ids.ln2_g = fixed(p + "ln2_g", {d}, S(1));
    ids.ln2_b = fixed(p + "ln2_b", {d}, S(0));
    ids.w1 = gauss(p + "w1", {d, 4 * d});
    ids.b1 = fixed(p + "b1", {4 * d}, S(0));
    ids.w2 = gauss(p + "w2", {4 * d, d});
    ids.b2 = fixed(p + "b2", {d}, S(0));
    m.blocks.push_back(ids);
  }
  m.lnf_g = fixed("lm.base.lnf_g", {d}, S(1));
  m.lnf_b = fixed("lm.base.lnf_b", {d}, S(0));
  m.head_w = gauss("lm.base.head_w", {d, V});
  m.head_b = fixed("lm.base.head_b", {V}, S(0));
  return m;
}

// Residual linear fine-tuning layer, zero-initialized so adding it leaves the
// model function unchanged until it trains.
template <class S>
void add_finetune_layer(ParamStore<S>& store, LanguageModel<S>& m) {
  if (m.has_finetune_layer())
    throw std::logic_error("fine-tuning layer already present");
  const auto d = static_cast<std::size_t>(m.cfg.d_model);
  m.ft_w = store.add("lm.ft.w", detail::const_tensor<S>({d, d}, S(0)));
  m.ft_b = store.add("lm.ft.b", detail::const_tensor<S>({d}, S(0)));
}

// Token embedding + positional embedding per position. `offset` is the
// number of prompt rows that precede the review (the prompt consumes the
// first positions).
template <class S>
typename Tape<S>::Id embed_review(Tape<S>& tape, const LanguageModel<S>& m,
                                  const std::vector<int>& tokens,
                                  std::size_t offset = 0) {
  if (tokens.empty()) throw std::invalid_argument("embed_review: no tokens");
  if (offset + tokens.size() > static_cast<std::size_t>(m.cfg.max_seq_len))
    throw std::invalid_argument(
        "embed_review: sequence of " + std::to_string(tokens.size()) +
        " tokens at offset " + std::to_string(offset) +
        " exceeds max sequence length " + std::to_string(m.cfg.max_seq_len));
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i)
    positions[i] = static_cast<int>(offset + i);
  const auto tok_rows = tape.embedding_rows(tape.param(m.tok_emb), tokens);
  const auto pos_rows = tape.embedding_rows(tape.param(m.pos_emb), positions);
  return tape.add(tok_rows, pos_rows);
}

template <class S>
struct LmForwardOut {
  typename Tape<S>::Id hidden;  // (p+n) x d, after the fine-tuning layer
  typename Tape<S>::Id logits;  // (p+n) x V next-token logits
};

// Causal forward over [prefix; body]. Prefix rows participate as ordinary
// positions; with no prefix this is a standard causal LM forward.
template <class S>
LmForwardOut<S> lm_forward(Tape<S>& tape, const LanguageModel<S>& m,
                           std::optional<typename Tape<S>::Id> prefix,
                           typename Tape<S>::Id body) {
  using Id = typename Tape<S>::Id;
  const std::size_t d = static_cast<std::size_t>(m.cfg.d_model);
  if (tape.value(body).rank() != 2 || tape.value(body).shape[1] != d)
    shape_error("lm_forward body", tape.value(body).shape_str(),
                "(n x d_model)");
  Id x = body;
  if (prefix) {
    if (tape.value(*prefix).rank() != 2 || tape.value(*prefix).shape[1] != d)
      shape_error("lm_forward prefix", tape.value(*prefix).shape_str(),
                  "(p x d_model)");
    x = tape.concat2(*prefix, body);
  }
  if (tape.value(x).shape[0] > static_cast<std::size_t>(m.cfg.max_seq_len))
    throw std::invalid_argument("lm_forward: sequence exceeds max length");
  for (const auto& blk : m.blocks) {
    Id h = tape.layer_norm(x, tape.param(blk.ln1_g), tape.param(blk.ln1_b));
    Id attn = tape.causal_self_attention(
        h, tape.param(blk.wq), tape.param(blk.bq), tape.param(blk.wk),
        tape.param(blk.bk), tape.param(blk.wv), tape.param(blk.bv),
        tape.param(blk.wo), tape.param(blk.bo), m.cfg.n_heads);
    x = tape.add(x, attn);
    Id h2 = tape.layer_norm(x, tape.param(blk.ln2_g), tape.param(blk.ln2_b));
    Id mid = tape.gelu(
        tape.add(tape.matmul(h2, tape.param(blk.w1)), tape.param(blk.b1)));
    Id mlp = tape.add(tape.matmul(mid, tape.param(blk.w2)), tape.param(blk.b2));
    x = tape.add(x, mlp);
  }
  x = tape.layer_norm(x, tape.param(m.lnf_g), tape.param(m.lnf_b));
  if (m.has_finetune_layer()) {
    Id ft = tape.add(tape.matmul(x, tape.param(m.ft_w)), tape.param(m.ft_b));
    x = tape.add(x, ft);
  }
  LmForwardOut<S> out;
  out.hidden = x;
  out.logits =
      tape.add(tape.matmul(x, tape.param(m.head_w)), tape.param(m.head_b));
  return out;
}

// ---------------------------------------------------------------------------
// next-token training shared by pretraining and fine-tuning

inline std::vector<std::vector<std::size_t>> shuffled_batches(
    std::size_t n, std::size_t batch_size, SplitMix64& rng) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.next_below(i + 1);
    std::swap(order[i], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t at = 0; at < n; at += batch_size) {
    const std::size_t end = std::min(n, at + batch_size);
    batches.emplace_back(order.begin() + at, order.begin() + end);
  }
  return batches;
}

template <class S>
std::vector<std::vector<int>> tokenize_reviews(const Dataset& d,
                                               const Vocabulary& vocab,
                                               std::size_t max_len) {
  std::vector<std::vector<int>> seqs;
  seqs.reserve(d.records.size());
  for (const ReviewRecord& r : d.records)
    seqs.push_back(tokenize(r.review, vocab, max_len));
  return seqs;
}

// One epoch of next-token SGD over the given sequences. Per-record gradients
// are computed in parallel and reduced in record order, so results are
// independent of thread count. Returns the mean per-token cross entropy.
template <class S>
double next_token_epoch(ParamStore<S>& store, const LanguageModel<S>& m,
                        const std::vector<std::vector<int>>& seqs, S lr,
                        std::size_t batch_size, std::uint64_t seed,
                        const std::string& phase, std::size_t epoch) {
  SplitMix64 shuffle_rng = make_stream(seed, phase + ".shuffle", epoch);
  const auto batches = shuffled_batches(seqs.size(), batch_size, shuffle_rng);
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& batch = batches[b];
    std::vector<Gradients<S>> grads(batch.size());
    std::vector<double> losses(batch.size(), 0.0);
    kernels::parallel_items(batch.size(), [&](std::size_t bi) {
      const std::vector<int>& ids = seqs[batch[bi]];
      if (ids.size() < 2) return;
      Tape<S> tape(store);
      const auto body = embed_review(tape, m, ids);
      const auto fw = lm_forward<S>(tape, m, std::nullopt, body);
      std::vector<int> targets(ids.begin() + 1, ids.end());
      const auto inputs = tape.slice_rows(fw.logits, 0, ids.size() - 1);
      const auto loss = tape.cross_entropy_rows(inputs, std::move(targets));
      losses[bi] = static_cast<double>(tape.value(loss).values[0]);
      tape.backward(loss);
      grads[bi].resize(store.count());
      tape.export_grads(grads[bi]);
    });
    Gradients<S> total(store.count());
    double batch_loss = 0.0;
    std::size_t batch_n = 0;
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      total.accumulate(store, grads[bi]);
      batch_loss += losses[bi];
      if (seqs[batch[bi]].size() >= 2) ++batch_n;
    }
    if (batch_n == 0) continue;
    if (!std::isfinite(batch_loss)) throw DivergenceError(phase, epoch, b);
    total.scale(S(1) / static_cast<S>(batch_n));
    sgd_step(store, total, lr);
    loss_sum += batch_loss;
    loss_count += batch_n;
  }
  return loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
}

// Sum of next-token negative log probabilities for one sequence's logits,
// accumulated in double.
template <class S>
double sequence_log_loss(const Tensor<S>& logits,
                         const std::vector<int>& targets) {
  const std::size_t n = logits.shape[1];
  double sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const S* row = logits.data() + i * n;
    double mx = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < n; ++j)
      mx = std::max(mx, static_cast<double>(row[j]));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      z += std::exp(static_cast<double>(row[j]) - mx);
    sum += mx + std::log(z) -
           static_cast<double>(row[static_cast<std::size_t>(targets[i])]);
  }
  return sum;
}

struct PretrainOpts {
  std::size_t epochs = 4;
  double lr = 0.05;
  std::size_t batch_size = 32;
};

struct FinetuneOpts {
  std::size_t epochs = 2;
  double lr = 0.05;
  std::size_t batch_size = 32;
};

// Next-token pretraining on the given reviews; afterwards the base group is
// flagged frozen. Returns the per-epoch training loss curve.
template <class S>
std::vector<double> pretrain_base(ParamStore<S>& store, LanguageModel<S>& m,
                                  const Dataset& corpus,
                                  const Vocabulary& vocab,
                                  const PretrainOpts& opts,
                                  std::uint64_t seed) {
  if (corpus.records.empty())
    throw CorpusError("pretrain_base: empty corpus");
  const auto seqs = tokenize_reviews<S>(
      corpus, vocab, static_cast<std::size_t>(m.cfg.max_seq_len));
  std::vector<double> curve;
  for (std::size_t e = 0; e < opts.epochs; ++e)
    curve.push_back(next_token_epoch(store, m, seqs, static_cast<S>(opts.lr),
                                     opts.batch_size, seed, "pretrain", e));
  store.set_trainable_prefix("lm.base.", false);
  return curve;
}

// exp(mean next-token cross entropy) over every predicted position.
template <class S>
double perplexity(ParamStore<S>& store, const LanguageModel<S>& m,
                  const Vocabulary& vocab, const Dataset& d) {
  if (d.records.empty()) throw CorpusError("perplexity: empty dataset");
  const auto seqs =
      tokenize_reviews<S>(d, vocab, static_cast<std::size_t>(m.cfg.max_seq_len));
  std::vector<double> sums(seqs.size(), 0.0);
  std::vector<std::size_t> counts(seqs.size(), 0);
  kernels::parallel_items(seqs.size(), [&](std::size_t i) {
    const std::vector<int>& ids = seqs[i];
    if (ids.size() < 2) return;
    Tape<S> tape(store);
    const auto body = embed_review(tape, m, ids);
    const auto fw = lm_forward<S>(tape, m, std::nullopt, body);
    std::vector<int> targets(ids.begin() + 1, ids.end());
    const Tensor<S>& logits = tape.value(fw.logits);
    const std::size_t v = static_cast<std::size_t>(m.cfg.vocab_size);
    // rows 0..len-2 predict the next token
    Tensor<S> scored = Tensor<S>::matrix(targets.size(), v);
    std::copy(logits.values.begin(),
              logits.values.begin() +
                  static_cast<std::ptrdiff_t>(targets.size() * v),
              scored.values.begin());
    sums[i] = sequence_log_loss(scored, targets);
    counts[i] = targets.size();
  });
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    total += sums[i];
    n += counts[i];
  }
  if (n == 0) throw CorpusError("perplexity: no predicted positions");
  return std::exp(total / static_cast<double>(n));
}

struct FinetuneResult {
  std::vector<double> train_curve;
  std::vector<double> val_perplexity;  // entry 0 is the pre-training value
  std::size_t best_epoch = 0;          // 0 = untouched layer
};

// Adds the fine-tuning layer and trains only it on the training split,
// keeping the checkpoint with the best held-out perplexity (epoch 0, the
// untrained identity layer, is a candidate). Base weights stay frozen; after
// returning the fine-tuning layer is frozen as well.
template <class S>
FinetuneResult finetune(ParamStore<S>& store, LanguageModel<S>& m,
                        const Dataset& train, const Dataset& val,
                        const Vocabulary& vocab, const FinetuneOpts& opts,
                        std::uint64_t seed) {
  if (!m.has_finetune_layer()) add_finetune_layer(store, m);
  store.set_trainable_prefix("lm.base.", false);
  store.set_trainable_prefix("lm.ft.", true);

  FinetuneResult res;
  res.val_perplexity.push_back(perplexity(store, m, vocab, val));
  Tensor<S> best_w = store.value(m.ft_w);
  Tensor<S> best_b = store.value(m.ft_b);
  double best_ppl = res.val_perplexity[0];

  const auto seqs = tokenize_reviews<S>(
      train, vocab, static_cast<std::size_t>(m.cfg.max_seq_len));
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    res.train_curve.push_back(next_token_epoch(store, m, seqs,
                                               static_cast<S>(opts.lr),
                                               opts.batch_size, seed,
                                               "finetune", e));
    const double ppl = perplexity(store, m, vocab, val);
    res.val_perplexity.push_back(ppl);
    if (ppl < best_ppl) {
      best_ppl = ppl;
      res.best_epoch = e + 1;
      best_w = store.value(m.ft_w);
      best_b = store.value(m.ft_b);
    }
  }
  store.value(m.ft_w) = best_w;
  store.value(m.ft_b) = best_b;
  store.set_trainable_prefix("lm.ft.", false);
  return res;
}

}  // namespace aspectrec
