#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "aspectrec/corpus.hpp"
#include "aspectrec/lm.hpp"
#include "aspectrec/param_store.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tape.hpp"

namespace aspectrec {

enum class PromptVariant {
  full,       // P_ui = [W_u; W_i]
  user_only,  // [W_u]
  item_only,  // [W_i]
  none,       // empty prefix
  discrete,   // per-user/item id tokens prepended to the review instead
};

enum class AspectPooling { last_position, mean };

// Learnable user/item embedding tables, one row per id seen anywhere in the
// dataset, in first-appearance order. Rows are N(0,1) initialized and stay
// trainable in both alternating phases.
template <class S>
struct EmbeddingTables {
  int user_table = -1;  // U x d_u
  int item_table = -1;  // I x d_i
  std::size_t d_u = 0, d_i = 0;
  std::vector<std::string> user_ids, item_ids;
  std::unordered_map<std::string, int> user_row, item_row;

  int row_for_user(const std::string& id) const {
    auto it = user_row.find(id);
    if (it == user_row.end())
      throw std::out_of_range("unknown user id: " + id);
    return it->second;
  }
  int row_for_item(const std::string& id) const {
    auto it = item_row.find(id);
    if (it == item_row.end())
      throw std::out_of_range("unknown item id: " + id);
    return it->second;
  }
};

template <class S>
EmbeddingTables<S> build_embedding_tables(ParamStore<S>& store,
                                          std::vector<std::string> user_ids,
                                          std::vector<std::string> item_ids,
                                          std::size_t d_u, std::size_t d_i,
                                          std::uint64_t seed) {
  EmbeddingTables<S> t;
  t.d_u = d_u;
  t.d_i = d_i;
  t.user_ids = std::move(user_ids);
  t.item_ids = std::move(item_ids);
  for (std::size_t i = 0; i < t.user_ids.size(); ++i)
    t.user_row.emplace(t.user_ids[i], static_cast<int>(i));
  for (std::size_t i = 0; i < t.item_ids.size(); ++i)
    t.item_row.emplace(t.item_ids[i], static_cast<int>(i));
  SplitMix64 urng = make_stream(seed, "init.user");
  SplitMix64 irng = make_stream(seed, "init.item");
  Tensor<S> ut({t.user_ids.size(), d_u});
  for (S& v : ut.values) v = static_cast<S>(urng.gaussian());
  Tensor<S> it({t.item_ids.size(), d_i});
  for (S& v : it.values) v = static_cast<S>(irng.gaussian());
  t.user_table = store.add("tables.user", std::move(ut));
  t.item_table = store.add("tables.item", std::move(it));
  return t;
}

// Id lists in first-appearance order over the dataset.
inline std::pair<std::vector<std::string>, std::vector<std::string>>
collect_user_item_ids(const Dataset& d) {
  std::vector<std::string> users, items;
  std::unordered_map<std::string, int> seen_u, seen_i;
  for (const ReviewRecord& r : d.records) {
    if (seen_u.emplace(r.user_id, 0).second) users.push_back(r.user_id);
    if (seen_i.emplace(r.item_id, 0).second) items.push_back(r.item_id);
  }
  return {std::move(users), std::move(items)};
}

template <class S>
EmbeddingTables<S> build_embedding_tables(ParamStore<S>& store,
                                          const Dataset& d, std::size_t d_u,
                                          std::size_t d_i,
                                          std::uint64_t seed) {
  auto [users, items] = collect_user_item_ids(d);
  return build_embedding_tables<S>(store, std::move(users), std::move(items),
                                   d_u, d_i, seed);
}

// Aspect classification head over the final fine-tuned hidden state.
template <class S>
struct AspectHead {
  int w = -1;  // d_model x V_a
  int b = -1;  // V_a
  int vocab_size = 0;
};

template <class S>
AspectHead<S> build_aspect_head(ParamStore<S>& store, std::size_t d_model,
                                std::size_t v_a, std::uint64_t seed) {
  SplitMix64 rng = make_stream(seed, "init.aspect_head");
  Tensor<S> w({d_model, v_a});
  for (S& v : w.values) v = static_cast<S>(rng.uniform(-0.1, 0.1));
  Tensor<S> b({v_a});
  for (S& v : b.values) v = static_cast<S>(rng.uniform(-0.1, 0.1));
  AspectHead<S> h;
  h.w = store.add("extract.head.w", std::move(w));
  h.b = store.add("extract.head.b", std::move(b));
  h.vocab_size = static_cast<int>(v_a);
  return h;
}

// Id-token embedding rows used by the discrete-prompt wiring; one row per
// user followed by one per item, trainable in phase 1.
template <class S>
int build_id_token_table(ParamStore<S>& store, std::size_t n_users,
                         std::size_t n_items, std::size_t d_model,
                         std::uint64_t seed) {
  SplitMix64 rng = make_stream(seed, "init.idtok");
  Tensor<S> t({n_users + n_items, d_model});
  for (S& v : t.values) v = static_cast<S>(0.08 * rng.gaussian());
  return store.add("tables.id_tok", std::move(t));
}

// P_ui as prompt-prefix rows: the exact concatenation of the selected
// embeddings, reshaped to d_model-wide rows with a zero-padded tail.
// Returns nothing for the promptless variants.
template <class S>
std::optional<typename Tape<S>::Id> build_soft_prompt(
    Tape<S>& tape, const EmbeddingTables<S>& tables, int user_row,
    int item_row, std::size_t d_model, PromptVariant variant) {
  using Id = typename Tape<S>::Id;
  std::vector<Id> parts;
  if (variant == PromptVariant::none || variant == PromptVariant::discrete)
    return std::nullopt;
  if (variant != PromptVariant::item_only)
    parts.push_back(tape.flatten(
        tape.embedding_rows(tape.param(tables.user_table), {user_row})));
  if (variant != PromptVariant::user_only)
    parts.push_back(tape.flatten(
        tape.embedding_rows(tape.param(tables.item_table), {item_row})));
  const Id vec = tape.concat(parts);
  return tape.reshape_rows_pad(vec, d_model);
}

template <class S>
struct AspectLogitsInputs {
  const LanguageModel<S>* lm = nullptr;
  const EmbeddingTables<S>* tables = nullptr;
  const AspectHead<S>* head = nullptr;
  PromptVariant variant = PromptVariant::full;
  AspectPooling pooling = AspectPooling::last_position;
  int id_token_table = -1;  // required by the discrete variant
};

// Forward pass of component 1 for a single record: soft prompt (or id
// tokens) + review embedding through the frozen LM, aspect head over the
// pooled fine-tuned hidden state. Returns rank-1 logits over the aspect
// vocabulary.
template <class S>
typename Tape<S>::Id aspect_logits(Tape<S>& tape,
                                   const AspectLogitsInputs<S>& in,
                                   int user_row, int item_row,
                                   const std::vector<int>& tokens) {
  using Id = typename Tape<S>::Id;
  const LanguageModel<S>& m = *in.lm;
  const std::size_t d = static_cast<std::size_t>(m.cfg.d_model);
  std::optional<Id> prefix = build_soft_prompt(
      tape, *in.tables, user_row, item_row, d, in.variant);
  Id body;
  if (in.variant == PromptVariant::discrete) {
    if (in.id_token_table < 0)
      throw std::logic_error("discrete prompt without an id-token table");
    const int n_users = static_cast<int>(in.tables->user_ids.size());
    const Id id_rows = tape.embedding_rows(tape.param(in.id_token_table),
                                           {user_row, n_users + item_row});
    const Id id_pos = tape.embedding_rows(tape.param(m.pos_emb), {0, 1});
    const Id id_tok = tape.add(id_rows, id_pos);
    body = tape.concat2(id_tok, embed_review(tape, m, tokens, 2));
  } else {
    const std::size_t offset =
        prefix ? tape.value(*prefix).shape[0] : std::size_t(0);
    body = embed_review(tape, m, tokens, offset);
  }
  const auto fw = lm_forward<S>(tape, m, prefix, body);
  const std::size_t total = tape.value(fw.hidden).shape[0];
  const Id pooled = in.pooling == AspectPooling::last_position
                        ? tape.take_row(fw.hidden, total - 1)
                        : tape.mean_rows(fw.hidden);
  const Id logits2d = tape.add(tape.matmul(pooled, tape.param(in.head->w)),
                               tape.param(in.head->b));
  return tape.flatten(logits2d);
}

// Eq.-style multi-label loss: one shared softmax, summed negative log
// probability of each ground-truth aspect.
template <class S>
typename Tape<S>::Id extraction_loss(Tape<S>& tape,
                                     typename Tape<S>::Id logits,
                                     const std::vector<int>& truth_ids) {
  return tape.multilabel_cross_entropy(logits, truth_ids);
}

struct AspectPrediction {
  std::vector<int> ids;            // distinct, probability-descending
  std::vector<double> probs;       // matching softmax probabilities
  std::vector<std::string> terms;  // resolved through the aspect vocabulary
};

// Top-K under the softmax of the logits; ties break toward the lower aspect
// id. Invariant under monotone transforms of the logits.
template <class S>
AspectPrediction decode_topk(const Tensor<S>& logits, std::size_t k,
                             const AspectVocabulary& av) {
  const std::size_t n = logits.size();
  if (k > n)
    throw std::invalid_argument("decode_topk: K exceeds aspect vocabulary");
  // softmax in double for stable reported probabilities
  double mx = static_cast<double>(logits[0]);
  for (std::size_t j = 1; j < n; ++j)
    mx = std::max(mx, static_cast<double>(logits[j]));
  std::vector<double> p(n);
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(static_cast<double>(logits[j]) - mx);
    sum += p[j];
  }
  for (double& v : p) v /= sum;
  std::vector<int> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = static_cast<int>(j);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (p[static_cast<std::size_t>(a)] != p[static_cast<std::size_t>(b)])
      return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
    return a < b;
  });
  AspectPrediction out;
  for (std::size_t j = 0; j < k; ++j) {
    const int id = order[j];
    out.ids.push_back(id);
    out.probs.push_back(p[static_cast<std::size_t>(id)]);
    out.terms.push_back(av.id_to_term.at(static_cast<std::size_t>(id)));
  }
  return out;
}

}  // namespace aspectrec
