#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "aspectrec/corpus.hpp"
#include "aspectrec/eval.hpp"
#include "aspectrec/lm.hpp"
#include "aspectrec/prompt.hpp"
#include "aspectrec/recommender.hpp"

namespace aspectrec {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct TrainConfig {
  // optimization
  double learning_rate = 0.01;
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  std::size_t k = 3;
  std::uint64_t seed = 1;
  std::size_t patience = 5;  // 0 disables early stopping
  double grad_clip = 0.0;    // 0 = off
  // Desk-scale stabilizers. The shallow sigmoid rating head conditions far
  // worse than the extraction path, so phase-2 updates of the recommendation
  // network parameters use learning_rate * rec_lr_scale with their own
  // gradient-norm cap; the shared embedding tables always step at the base
  // (decayed) rate in both phases. At 1.0 / 0 everything shares the single
  // learning rate and the global clip.
  double rec_lr_scale = 1.0;
  double rec_grad_clip = 0.0;
  // Per-epoch multiplicative decay on the phase-1 learning rate
  // (1.0 = constant). Phase 2 keeps its own constant rate, which lets the
  // extraction side anneal while the rating head keeps fitting the
  // stabilized embeddings.
  double lr_decay = 1.0;

  // ablation switches
  bool no_joint = false;
  bool no_finetune = false;
  bool no_prompt = false;
  bool discrete_prompt = false;
  bool no_alternating = false;
  bool no_attention = false;
  bool user_only_prompt = false;
  bool item_only_prompt = false;

  // wiring variants
  std::string softmax_axis = "per_component";  // or "per_aspect"
  bool teacher_forcing = false;
  bool ft_trainable_in_phase1 = false;
  std::string aspect_pooling = "last";  // or "mean"

  // model dimensions
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int max_len = 48;  // review token budget including BOS/EOS
  int d_u = -1;      // -1 resolves to d_model / 2
  int d_i = -1;
  int d_a = 32;
  int rec_hidden = 128;
  double lm_init_std = 0.08;
  std::size_t min_freq = 1;

  // language-model stages
  std::size_t pretrain_epochs = 4;
  double pretrain_lr = 0.05;
  std::size_t finetune_epochs = 2;
  double finetune_lr = 0.05;

  // split
  double train_ratio = 0.8;
  double val_ratio = 0.1;
  double test_ratio = 0.1;

  std::size_t resolved_d_u() const {
    return d_u > 0 ? static_cast<std::size_t>(d_u)
                   : static_cast<std::size_t>(d_model) / 2;
  }
  std::size_t resolved_d_i() const {
    return d_i > 0 ? static_cast<std::size_t>(d_i)
                   : static_cast<std::size_t>(d_model) / 2;
  }

  PromptVariant prompt_variant() const {
    if (no_prompt) return PromptVariant::none;
    if (discrete_prompt) return PromptVariant::discrete;
    if (user_only_prompt) return PromptVariant::user_only;
    if (item_only_prompt) return PromptVariant::item_only;
    return PromptVariant::full;
  }

  AttentionSoftmaxAxis softmax_axis_variant() const {
    if (softmax_axis == "per_component")
      return AttentionSoftmaxAxis::per_component;
    if (softmax_axis == "per_aspect") return AttentionSoftmaxAxis::per_aspect;
    throw ConfigError("softmax_axis must be per_component or per_aspect");
  }

  std::size_t prompt_rows() const {
    const std::size_t total = resolved_d_u() + resolved_d_i();
    return (total + static_cast<std::size_t>(d_model) - 1) /
           static_cast<std::size_t>(d_model);
  }

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("learning_rate must be > 0");
    if (epochs < 1 || batch_size < 1 || k < 1)
      throw ConfigError("epochs, batch_size and k must be >= 1");
    const int exclusive = int(no_prompt) + int(discrete_prompt) +
                          int(user_only_prompt) + int(item_only_prompt);
    if (exclusive > 1)
      throw ConfigError(
          "conflicting ablation flags: at most one of no_prompt, "
          "discrete_prompt, user_only_prompt, item_only_prompt");
    softmax_axis_variant();
    if (aspect_pooling != "last" && aspect_pooling != "mean")
      throw ConfigError("aspect_pooling must be last or mean");
    if (max_len < 3) throw ConfigError("max_len must be >= 3");
    if (train_ratio <= 0 || val_ratio <= 0 || test_ratio <= 0 ||
        std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9)
      throw ConfigError("split ratios must be positive and sum to 1");
    if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
    if (rec_lr_scale <= 0) throw ConfigError("rec_lr_scale must be > 0");
    if (rec_grad_clip < 0) throw ConfigError("rec_grad_clip must be >= 0");
    if (lr_decay <= 0 || lr_decay > 1)
      throw ConfigError("lr_decay must be in (0, 1]");
  }
};

// Flat key=value config file; '#' starts a comment; unknown keys rejected.
TrainConfig parse_train_config(const std::string& text);
TrainConfig load_train_config(const std::string& path);
// Canonical serialization (every key, sorted); parse(serialize(c)) == c.
std::string serialize_train_config(const TrainConfig& cfg);

// ---------------------------------------------------------------------------

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double extraction_loss = std::numeric_limits<double>::quiet_NaN();
  double rec_loss = std::numeric_limits<double>::quiet_NaN();
  double val_extraction_loss = std::numeric_limits<double>::quiet_NaN();
  double val_rec_loss = std::numeric_limits<double>::quiet_NaN();
  double val_f1 = std::numeric_limits<double>::quiet_NaN();
  double val_rmse = std::numeric_limits<double>::quiet_NaN();
  double wall_seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> entries;
};

std::string history_csv(const TrainHistory& h);
// Field-exact equality over everything except wall_seconds (NaN matches NaN).
bool histories_equal_ignoring_wall(const TrainHistory& a,
                                   const TrainHistory& b);

// ---------------------------------------------------------------------------

template <class S>
struct Pipeline {
  TrainConfig cfg;
  double lr_now = -1.0;  // per-epoch effective rate; set by the train loop

  double effective_lr() const {
    return lr_now > 0 ? lr_now : cfg.learning_rate;
  }
  ParamStore<S> store;
  Vocabulary vocab;
  AspectVocabulary aspect_vocab;
  LanguageModel<S> lm;
  EmbeddingTables<S> tables;      // used by the extraction phase
  EmbeddingTables<S> rec_tables;  // same ids unless no_joint duplicates them
  AspectHead<S> head;
  RecNetwork<S> rec;
  int id_token_table = -1;

  AspectLogitsInputs<S> extraction_inputs() const {
    AspectLogitsInputs<S> in;
    in.lm = &lm;
    in.tables = &tables;
    in.head = &head;
    in.variant = cfg.prompt_variant();
    in.pooling = cfg.aspect_pooling == "mean" ? AspectPooling::mean
                                              : AspectPooling::last_position;
    in.id_token_table = id_token_table;
    return in;
  }

  PredictRatingOptions<S> rating_options() const {
    PredictRatingOptions<S> o;
    o.use_attention = !cfg.no_attention;
    o.softmax_axis = cfg.softmax_axis_variant();
    return o;
  }
};

// Tokenized record view shared by the training loops.
struct PreparedRecord {
  int user_row = 0;
  int item_row = 0;
  std::vector<int> tokens;
  std::vector<int> truth_ids;  // aspect-vocabulary ids present in the vocab
  std::vector<std::string> truth_terms;
  double rating_norm = 0.0;
  double rating_raw = 0.0;
};

template <class S>
PreparedRecord prepare_record(const Pipeline<S>& p, const ReviewRecord& r) {
  PreparedRecord out;
  out.user_row = p.tables.row_for_user(r.user_id);
  out.item_row = p.tables.row_for_item(r.item_id);
  out.tokens =
      tokenize(r.review, p.vocab, static_cast<std::size_t>(p.cfg.max_len));
  for (const std::string& a : r.aspects) {
    out.truth_terms.push_back(a);
    const int id = p.aspect_vocab.lookup(a);
    if (id >= 0) out.truth_ids.push_back(id);
  }
  out.rating_raw = r.rating;
  out.rating_norm = normalize_rating(r.rating);
  return out;
}

template <class S>
std::vector<PreparedRecord> prepare_records(const Pipeline<S>& p,
                                            const Dataset& d) {
  std::vector<PreparedRecord> out(d.records.size());
  kernels::parallel_items(d.records.size(), [&](std::size_t i) {
    out[i] = prepare_record(p, d.records[i]);
  });
  return out;
}

template <class S>
Pipeline<S> build_pipeline(TrainConfig cfg, const Dataset& full,
                           const Dataset& train_split) {
  cfg.validate();
  Pipeline<S> p;
  p.cfg = cfg;
  p.vocab = build_vocab(train_split, cfg.min_freq);
  p.aspect_vocab = build_aspect_vocab(train_split);
  if (static_cast<std::size_t>(p.aspect_vocab.size()) < cfg.k)
    throw ConfigError("aspect vocabulary smaller than K");

  LmConfig lmcfg;
  lmcfg.vocab_size = p.vocab.size();
  lmcfg.d_model = cfg.d_model;
  lmcfg.n_layers = cfg.n_layers;
  lmcfg.n_heads = cfg.n_heads;
  const std::size_t prompt_slots = std::max<std::size_t>(cfg.prompt_rows(), 2);
  lmcfg.max_seq_len =
      cfg.max_len + static_cast<int>(prompt_slots);
  lmcfg.init_std = cfg.lm_init_std;
  p.lm = build_lm(p.store, lmcfg, cfg.seed);

  p.tables = build_embedding_tables(p.store, full, cfg.resolved_d_u(),
                                    cfg.resolved_d_i(), cfg.seed);
  p.head = build_aspect_head(p.store, static_cast<std::size_t>(cfg.d_model),
                             static_cast<std::size_t>(p.aspect_vocab.size()),
                             cfg.seed);
  p.rec = build_rec_network(
      p.store, static_cast<std::size_t>(p.aspect_vocab.size()),
      static_cast<std::size_t>(cfg.d_a), cfg.resolved_d_u(),
      cfg.resolved_d_i(), cfg.k, static_cast<std::size_t>(cfg.rec_hidden),
      cfg.seed);
  if (cfg.discrete_prompt)
    p.id_token_table = build_id_token_table(
        p.store, p.tables.user_ids.size(), p.tables.item_ids.size(),
        static_cast<std::size_t>(cfg.d_model), cfg.seed);

  p.rec_tables = p.tables;
  if (cfg.no_joint) {
    // independent duplicate of the freshly initialized tables, so the two
    // tasks cannot interact through them
    p.rec_tables.user_table =
        p.store.add("tables2.user", p.store.value(p.tables.user_table));
    p.rec_tables.item_table =
        p.store.add("tables2.item", p.store.value(p.tables.item_table));
  }
  return p;
}

// ---------------------------------------------------------------------------
// phase flag control

enum class Phase { extraction, recommendation, combined };

template <class S>
void set_phase_flags(Pipeline<S>& p, Phase phase) {
  ParamStore<S>& s = p.store;
  s.freeze_all();
  const bool ext = phase != Phase::recommendation;
  const bool rec = phase != Phase::extraction;
  if (ext) {
    s.set_trainable(p.tables.user_table, true);
    s.set_trainable(p.tables.item_table, true);
    s.set_trainable(p.head.w, true);
    s.set_trainable(p.head.b, true);
    if (p.id_token_table >= 0) s.set_trainable(p.id_token_table, true);
    if (p.cfg.ft_trainable_in_phase1 && p.lm.has_finetune_layer()) {
      s.set_trainable(p.lm.ft_w, true);
      s.set_trainable(p.lm.ft_b, true);
    }
  }
  if (rec) {
    s.set_trainable_prefix("rec.", true);
    s.set_trainable(p.rec_tables.user_table, true);
    s.set_trainable(p.rec_tables.item_table, true);
  }
}

// ---------------------------------------------------------------------------
// batch steps: per-record gradients computed in parallel, reduced in record
// order, one SGD step per phase. Batch losses are sums over the records.

template <class S>
void clip_gradients(Gradients<S>& g, double clip) {
  if (clip <= 0) return;
  const double norm = std::sqrt(g.squared_norm());
  if (norm > clip) g.scale(static_cast<S>(clip / norm));
}

template <class S>
struct ExtractionBatchOut {
  double loss_sum = 0.0;
  std::vector<std::vector<int>> decoded;  // per record, K aspect ids
};

template <class S>
ExtractionBatchOut<S> extraction_batch_step(
    Pipeline<S>& p, const std::vector<PreparedRecord>& records,
    const std::vector<std::size_t>& batch, bool apply_update,
    const char* phase_name, std::size_t epoch, std::size_t batch_index) {
  const auto inputs = p.extraction_inputs();
  std::vector<Gradients<S>> grads(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  ExtractionBatchOut<S> out;
  out.decoded.resize(batch.size());
  kernels::parallel_items(batch.size(), [&](std::size_t bi) {
    const PreparedRecord& r = records[batch[bi]];
    Tape<S> tape(p.store);
    const auto logits =
        aspect_logits(tape, inputs, r.user_row, r.item_row, r.tokens);
    out.decoded[bi] =
        decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab).ids;
    if (r.truth_ids.empty()) return;  // nothing to score against
    const auto loss = extraction_loss(tape, logits, r.truth_ids);
    losses[bi] = static_cast<double>(tape.value(loss).values[0]);
    if (apply_update) {
      tape.backward(loss);
      grads[bi].resize(p.store.count());
      tape.export_grads(grads[bi]);
    }
  });
  Gradients<S> total(p.store.count());
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    out.loss_sum += losses[bi];
    if (apply_update) total.accumulate(p.store, grads[bi]);
  }
  if (!std::isfinite(out.loss_sum))
    throw DivergenceError(phase_name, epoch, batch_index);
  if (apply_update) {
    clip_gradients(total, p.cfg.grad_clip);
    sgd_step(p.store, total, static_cast<S>(p.effective_lr()));
  }
  return out;
}

template <class S>
double rec_batch_step(Pipeline<S>& p,
                      const std::vector<PreparedRecord>& records,
                      const std::vector<std::size_t>& batch,
                      const std::vector<std::vector<int>>& aspect_ids,
                      bool apply_update, const char* phase_name,
                      std::size_t epoch, std::size_t batch_index) {
  const auto opts = p.rating_options();
  std::vector<Gradients<S>> grads(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  kernels::parallel_items(batch.size(), [&](std::size_t bi) {
    const PreparedRecord& r = records[batch[bi]];
    Tape<S> tape(p.store);
    const auto yhat =
        predict_rating(tape, p.rec_tables, p.rec, r.user_row, r.item_row,
                       pad_aspects(aspect_ids[bi], p.rec), opts);
    const auto loss = tape.sum_squared_error(
        yhat, Tensor<S>::scalar(static_cast<S>(r.rating_norm)));
    losses[bi] = static_cast<double>(tape.value(loss).values[0]);
    if (apply_update) {
      tape.backward(loss);
      grads[bi].resize(p.store.count());
      tape.export_grads(grads[bi]);
    }
  });
  Gradients<S> total(p.store.count());
  double loss_sum = 0.0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    loss_sum += losses[bi];
    if (apply_update) total.accumulate(p.store, grads[bi]);
  }
  if (!std::isfinite(loss_sum))
    throw DivergenceError(phase_name, epoch, batch_index);
  if (apply_update) {
    clip_gradients(total, p.cfg.rec_grad_clip > 0 ? p.cfg.rec_grad_clip
                                                  : p.cfg.grad_clip);
    // recommendation-network parameters at the scaled rate, shared tables at
    // the base rate
    const S table_lr = static_cast<S>(p.effective_lr());
    const S net_lr =
        static_cast<S>(p.cfg.learning_rate * p.cfg.rec_lr_scale);
    Gradients<S> net_part(p.store.count());
    Gradients<S> table_part(p.store.count());
    total.for_each([&](int id, const Tensor<S>& g) {
      const std::string& name = p.store.param(id).name;
      Gradients<S>& dst =
          name.rfind("rec.", 0) == 0 ? net_part : table_part;
      dst.slot_for(p.store, id) = g;
    });
    sgd_step(p.store, net_part, net_lr);
    sgd_step(p.store, table_part, table_lr);
  }
  return loss_sum;
}

// Ablation 5 semantics: one combined backward of Loss1 + Loss2 per batch and
// a single update over the union of both phases' trainable sets.
template <class S>
std::pair<double, double> combined_batch_step(
    Pipeline<S>& p, const std::vector<PreparedRecord>& records,
    const std::vector<std::size_t>& batch, std::size_t epoch,
    std::size_t batch_index) {
  const auto inputs = p.extraction_inputs();
  const auto opts = p.rating_options();
  std::vector<Gradients<S>> grads(batch.size());
  std::vector<double> ext_losses(batch.size(), 0.0);
  std::vector<double> rec_losses(batch.size(), 0.0);
  kernels::parallel_items(batch.size(), [&](std::size_t bi) {
    const PreparedRecord& r = records[batch[bi]];
    Tape<S> tape(p.store);
    const auto logits =
        aspect_logits(tape, inputs, r.user_row, r.item_row, r.tokens);
    const std::vector<int> decoded =
        p.cfg.teacher_forcing
            ? r.truth_ids
            : decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab).ids;
    const auto yhat =
        predict_rating(tape, p.rec_tables, p.rec, r.user_row, r.item_row,
                       pad_aspects(decoded, p.rec), opts);
    const auto rec_l = tape.sum_squared_error(
        yhat, Tensor<S>::scalar(static_cast<S>(r.rating_norm)));
    rec_losses[bi] = static_cast<double>(tape.value(rec_l).values[0]);
    typename Tape<S>::Id total_l = rec_l;
    if (!r.truth_ids.empty()) {
      const auto ext_l = extraction_loss(tape, logits, r.truth_ids);
      ext_losses[bi] = static_cast<double>(tape.value(ext_l).values[0]);
      total_l = tape.add(ext_l, rec_l);
    }
    tape.backward(total_l);
    grads[bi].resize(p.store.count());
    tape.export_grads(grads[bi]);
  });
  Gradients<S> total(p.store.count());
  double ext_sum = 0.0, rec_sum = 0.0;
  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    ext_sum += ext_losses[bi];
    rec_sum += rec_losses[bi];
    total.accumulate(p.store, grads[bi]);
  }
  if (!std::isfinite(ext_sum + rec_sum))
    throw DivergenceError("combined", epoch, batch_index);
  clip_gradients(total, p.cfg.grad_clip);
  sgd_step(p.store, total, static_cast<S>(p.effective_lr()));
  return {ext_sum, rec_sum};
}

// ---------------------------------------------------------------------------
// evaluation over a prepared split

struct SplitEval {
  double extraction_loss_mean = std::numeric_limits<double>::quiet_NaN();
  double rec_loss_mean = std::numeric_limits<double>::quiet_NaN();
  double p_at_k = 0.0;
  double r_at_k = 0.0;
  double f1 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> auc_value;  // absent when the split is single-class
};

template <class S>
SplitEval evaluate_split(Pipeline<S>& p,
                         const std::vector<PreparedRecord>& records,
                         bool want_auc) {
  const auto inputs = p.extraction_inputs();
  const auto opts = p.rating_options();
  const std::size_t n = records.size();
  std::vector<double> ext_losses(n, 0.0), rec_losses(n, 0.0);
  std::vector<int> ext_counts(n, 0);
  std::vector<ExtractionMetrics> ems(n);
  std::vector<double> yhats(n, 0.0);
  kernels::parallel_items(n, [&](std::size_t i) {
    const PreparedRecord& r = records[i];
    Tape<S> tape(p.store);
    const auto logits =
        aspect_logits(tape, inputs, r.user_row, r.item_row, r.tokens);
    const AspectPrediction pred =
        decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab);
    if (!r.truth_ids.empty()) {
      const auto loss = extraction_loss(tape, logits, r.truth_ids);
      ext_losses[i] = static_cast<double>(tape.value(loss).values[0]);
      ext_counts[i] = 1;
    }
    ems[i] = precision_recall_f1(pred.terms, r.truth_terms);
    const auto yhat = predict_rating(tape, p.rec_tables, p.rec, r.user_row,
                                     r.item_row, pad_aspects(pred.ids, p.rec),
                                     opts);
    yhats[i] = static_cast<double>(tape.value(yhat).values[0]);
    const double d = r.rating_norm - yhats[i];
    rec_losses[i] = d * d;
  });
  SplitEval out;
  double ext_sum = 0.0, rec_sum = 0.0;
  std::size_t ext_n = 0;
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0;
  std::vector<std::pair<double, double>> norm_pairs, raw_pairs;
  for (std::size_t i = 0; i < n; ++i) {
    ext_sum += ext_losses[i];
    ext_n += static_cast<std::size_t>(ext_counts[i]);
    rec_sum += rec_losses[i];
    p_sum += ems[i].precision_at_k;
    r_sum += ems[i].recall_at_k;
    f_sum += ems[i].f1;
    norm_pairs.emplace_back(records[i].rating_norm, yhats[i]);
    raw_pairs.emplace_back(records[i].rating_raw, yhats[i]);
  }
  if (ext_n) out.extraction_loss_mean = ext_sum / static_cast<double>(ext_n);
  out.rec_loss_mean = rec_sum / static_cast<double>(n);
  out.p_at_k = p_sum / static_cast<double>(n);
  out.r_at_k = r_sum / static_cast<double>(n);
  out.f1 = f_sum / static_cast<double>(n);
  const auto [rmse, mae] = rmse_mae(norm_pairs);
  out.rmse = rmse;
  out.mae = mae;
  if (want_auc) {
    try {
      out.auc_value = auc(raw_pairs);
    } catch (const EvalError&) {
      out.auc_value.reset();
    }
  }
  return out;
}

template <class S>
MetricSet metric_set(const SplitEval& e) {
  MetricSet m;
  m["p_at_3"] = e.p_at_k;
  m["r_at_3"] = e.r_at_k;
  m["f1"] = e.f1;
  m["rmse"] = e.rmse;
  m["mae"] = e.mae;
  if (e.auc_value) m["auc"] = *e.auc_value;
  return m;
}

// ---------------------------------------------------------------------------
// the alternating loop (Algorithm-1 shape)

template <class S>
struct TrainResult {
  TrainHistory history;
  MetricSet test_metrics;
  std::vector<double> pretrain_curve;
  FinetuneResult finetune_info;
  std::size_t best_epoch = 0;
};

namespace detail {

template <class S>
std::vector<Tensor<S>> snapshot_values(const ParamStore<S>& store) {
  std::vector<Tensor<S>> out;
  out.reserve(store.count());
  for (const auto& pr : store.all()) out.push_back(pr.value);
  return out;
}

template <class S>
void restore_values(ParamStore<S>& store, const std::vector<Tensor<S>>& snap) {
  for (std::size_t i = 0; i < snap.size(); ++i)
    store.value(static_cast<int>(i)) = snap[i];
}

inline double wall_seconds_since(
    std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                       start)
      .count();
}

}  // namespace detail

// One pass over the training records: phase 1 then phase 2 per batch (or the
// combined single update under no_alternating). Returns the summed losses.
template <class S>
std::pair<double, double> alternating_epoch(
    Pipeline<S>& p, const std::vector<PreparedRecord>& records,
    std::size_t epoch) {
  p.lr_now = p.cfg.learning_rate * std::pow(p.cfg.lr_decay,
                                            static_cast<double>(epoch));
  SplitMix64 rng = make_stream(p.cfg.seed, "epoch", epoch);
  const auto batches =
      shuffled_batches(records.size(), p.cfg.batch_size, rng);
  double ext_sum = 0.0, rec_sum = 0.0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    if (p.cfg.no_alternating) {
      set_phase_flags(p, Phase::combined);
      const auto [e, r] = combined_batch_step(p, records, batches[b], epoch, b);
      ext_sum += e;
      rec_sum += r;
      continue;
    }
    set_phase_flags(p, Phase::extraction);
    auto ext = extraction_batch_step(p, records, batches[b], true,
                                     "extraction", epoch, b);
    ext_sum += ext.loss_sum;
    set_phase_flags(p, Phase::recommendation);
    std::vector<std::vector<int>> aspects = std::move(ext.decoded);
    if (p.cfg.teacher_forcing)
      for (std::size_t bi = 0; bi < batches[b].size(); ++bi)
        aspects[bi] = records[batches[b][bi]].truth_ids;
    rec_sum += rec_batch_step(p, records, batches[b], aspects, true,
                              "recommendation", epoch, b);
  }
  return {ext_sum, rec_sum};
}

template <class S>
TrainResult<S> train(Pipeline<S>& p, const SplitResult& splits) {
  TrainResult<S> res;
  // stage 1: desk-scale stand-in for the pre-trained LM
  if (p.cfg.pretrain_epochs > 0) {
    PretrainOpts po;
    po.epochs = p.cfg.pretrain_epochs;
    po.lr = p.cfg.pretrain_lr;
    po.batch_size = p.cfg.batch_size;
    res.pretrain_curve =
        pretrain_base(p.store, p.lm, splits.train, p.vocab, po, p.cfg.seed);
  } else {
    p.store.set_trainable_prefix("lm.base.", false);
  }
  // stage 2: fine-tuning layer (skipped but still present under Ablation 2)
  if (p.cfg.no_finetune) {
    if (!p.lm.has_finetune_layer()) add_finetune_layer(p.store, p.lm);
    p.store.set_trainable_prefix("lm.ft.", false);
  } else {
    FinetuneOpts fo;
    fo.epochs = p.cfg.finetune_epochs;
    fo.lr = p.cfg.finetune_lr;
    fo.batch_size = p.cfg.batch_size;
    res.finetune_info =
        finetune(p.store, p.lm, splits.train, splits.val, p.vocab, fo,
                 p.cfg.seed);
  }

  const auto train_recs = prepare_records(p, splits.train);
  const auto val_recs = prepare_records(p, splits.val);
  const auto test_recs = prepare_records(p, splits.test);
  const double n_train = static_cast<double>(train_recs.size());

  auto best = detail::snapshot_values(p.store);
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;

  const auto record_epoch = [&](std::size_t epoch_no, double ext_mean,
                                double rec_mean, double secs) {
    const SplitEval val = evaluate_split(p, val_recs, false);
    EpochStats st;
    st.epoch = epoch_no;
    st.extraction_loss = ext_mean;
    st.rec_loss = rec_mean;
    st.val_extraction_loss = val.extraction_loss_mean;
    st.val_rec_loss = val.rec_loss_mean;
    st.val_f1 = val.f1;
    st.val_rmse = val.rmse;
    st.wall_seconds = secs;
    res.history.entries.push_back(st);
    double val_total = 0.0;
    bool have = false;
    if (std::isfinite(val.extraction_loss_mean) && !std::isnan(ext_mean)) {
      val_total += val.extraction_loss_mean;
      have = true;
    }
    if (std::isfinite(val.rec_loss_mean) && !std::isnan(rec_mean)) {
      val_total += val.rec_loss_mean;
      have = true;
    }
    if (have && val_total < best_val) {
      best_val = val_total;
      if (p.cfg.patience > 0) best = detail::snapshot_values(p.store);
      best_epoch = res.history.entries.size();
      since_best = 0;
    } else {
      ++since_best;
    }
    return p.cfg.patience > 0 && since_best >= p.cfg.patience;
  };

  if (p.cfg.no_joint) {
    // Ablation 1: the two tasks train independently, with their own table
    // copies; the recommender consumes the frozen extraction model's output.
    std::size_t epoch_no = 0;
    for (std::size_t e = 0; e < p.cfg.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      p.lr_now = p.cfg.learning_rate * std::pow(p.cfg.lr_decay,
                                                static_cast<double>(e));
      SplitMix64 rng = make_stream(p.cfg.seed, "epoch", e);
      const auto batches =
          shuffled_batches(train_recs.size(), p.cfg.batch_size, rng);
      double ext_sum = 0.0;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        set_phase_flags(p, Phase::extraction);
        ext_sum += extraction_batch_step(p, train_recs, batches[b], true,
                                         "extraction", e, b)
                       .loss_sum;
      }
      if (record_epoch(++epoch_no, ext_sum / n_train,
                       std::numeric_limits<double>::quiet_NaN(),
                       detail::wall_seconds_since(t0)))
        break;
    }
    if (p.cfg.patience > 0) detail::restore_values(p.store, best);
    // freeze extraction, precompute its predictions once
    std::vector<std::vector<int>> predicted(train_recs.size());
    const auto inputs = p.extraction_inputs();
    kernels::parallel_items(train_recs.size(), [&](std::size_t i) {
      Tape<S> tape(p.store);
      const auto logits = aspect_logits(tape, inputs, train_recs[i].user_row,
                                        train_recs[i].item_row,
                                        train_recs[i].tokens);
      predicted[i] =
          decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab).ids;
    });
    best = detail::snapshot_values(p.store);
    best_val = std::numeric_limits<double>::infinity();
    since_best = 0;
    for (std::size_t e = 0; e < p.cfg.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      p.lr_now = p.cfg.learning_rate * std::pow(p.cfg.lr_decay,
                                                static_cast<double>(e));
      SplitMix64 rng = make_stream(p.cfg.seed, "epoch.rec", e);
      const auto batches =
          shuffled_batches(train_recs.size(), p.cfg.batch_size, rng);
      double rec_sum = 0.0;
      for (std::size_t b = 0; b < batches.size(); ++b) {
        set_phase_flags(p, Phase::recommendation);
        std::vector<std::vector<int>> aspects;
        for (const std::size_t idx : batches[b])
          aspects.push_back(p.cfg.teacher_forcing ? train_recs[idx].truth_ids
                                                  : predicted[idx]);
        rec_sum += rec_batch_step(p, train_recs, batches[b], aspects, true,
                                  "recommendation", e, b);
      }
      if (record_epoch(++epoch_no, std::numeric_limits<double>::quiet_NaN(),
                       rec_sum / n_train, detail::wall_seconds_since(t0)))
        break;
    }
    if (p.cfg.patience > 0) detail::restore_values(p.store, best);
  } else {
    for (std::size_t e = 0; e < p.cfg.epochs; ++e) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto [ext_sum, rec_sum] = alternating_epoch(p, train_recs, e);
      if (record_epoch(e + 1, ext_sum / n_train, rec_sum / n_train,
                       detail::wall_seconds_since(t0)))
        break;
    }
    if (p.cfg.patience > 0) detail::restore_values(p.store, best);
  }
  res.best_epoch = best_epoch;
  p.store.freeze_all();
  res.test_metrics = metric_set<S>(evaluate_split(p, test_recs, true));
  return res;
}

// ---------------------------------------------------------------------------
// scalability benchmark: 10 alternating epochs per size, wall clock only over
// the epochs themselves, least-squares line over (records, seconds).

struct BenchRow {
  std::size_t records = 0;
  double seconds = 0.0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double slope = 0.0;
  double intercept = 0.0;
  double r_squared = 0.0;
};

std::string bench_csv(const BenchReport& r);

template <class S>
BenchReport bench_scalability(const std::vector<std::size_t>& sizes,
                              TrainConfig cfg, const SyntheticSpec& base) {
  for (std::size_t i = 1; i < sizes.size(); ++i)
    if (sizes[i] <= sizes[i - 1])
      throw ConfigError("bench sizes must be strictly increasing");
  BenchReport report;
  for (const std::size_t n : sizes) {
    SyntheticSpec spec = base;
    spec.n_records = n;
    const Dataset data = generate_synthetic(spec);
    const SplitResult splits = split_dataset(
        data, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio}, cfg.seed);
    // untimed prep: vocabularies, tables, frozen random LM (the timing target
    // is the alternating loop, which dominates training in practice)
    TrainConfig bc = cfg;
    bc.pretrain_epochs = 0;
    bc.no_finetune = true;
    Pipeline<S> p = build_pipeline<S>(bc, data, splits.train);
    p.store.set_trainable_prefix("lm.base.", false);
    if (!p.lm.has_finetune_layer()) add_finetune_layer(p.store, p.lm);
    p.store.set_trainable_prefix("lm.ft.", false);
    const auto train_recs = prepare_records(p, splits.train);
    const auto t0 = std::chrono::steady_clock::now();
    for (std::size_t e = 0; e < 10; ++e)
      alternating_epoch(p, train_recs, e);
    report.rows.push_back(BenchRow{n, detail::wall_seconds_since(t0)});
  }
  // least squares fit seconds = slope * records + intercept
  const double m = static_cast<double>(report.rows.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const BenchRow& r : report.rows) {
    const double x = static_cast<double>(r.records);
    sx += x;
    sy += r.seconds;
    sxx += x * x;
    sxy += x * r.seconds;
  }
  const double denom = m * sxx - sx * sx;
  report.slope = (m * sxy - sx * sy) / denom;
  report.intercept = (sy - report.slope * sx) / m;
  double ss_res = 0, ss_tot = 0;
  const double mean_y = sy / m;
  for (const BenchRow& r : report.rows) {
    const double fit =
        report.slope * static_cast<double>(r.records) + report.intercept;
    ss_res += (r.seconds - fit) * (r.seconds - fit);
    ss_tot += (r.seconds - mean_y) * (r.seconds - mean_y);
  }
  report.r_squared = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return report;
}

}  // namespace aspectrec
