#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aspectrec/training.hpp"

namespace aspectrec {

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what)
      : std::runtime_error(what) {}
};

struct CheckpointBlock {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;  // serialized as little-endian 64-bit floats
};

// Self-contained training snapshot: enough to rebuild the whole pipeline and
// evaluate without the original dataset splits being recomputed elsewhere.
// Binary container layout (all integers little-endian):
//   magic "ARCKPT1\0", u32 version
//   string  config_text          (u64 length + bytes)
//   4 string lists               (u64 count, then length-prefixed strings):
//     vocab tokens, aspect terms, user ids, item ids
//   u64 block count, then per block:
//     length-prefixed name, u32 rank, rank x u64 dims, u64 count, count x f64
//   u64 FNV-1a checksum over every preceding byte
struct Checkpoint {
  std::uint32_t version = 1;
  std::string config_text;
  std::vector<std::string> vocab_tokens;
  std::vector<std::string> aspect_terms;
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::vector<CheckpointBlock> blocks;
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
// Verifies the content checksum and layout; throws CheckpointError.
Checkpoint load_checkpoint(const std::string& path);

template <class S>
Checkpoint checkpoint_from_pipeline(const Pipeline<S>& p) {
  Checkpoint c;
  c.config_text = serialize_train_config(p.cfg);
  c.vocab_tokens = p.vocab.id_to_token;
  c.aspect_terms = p.aspect_vocab.id_to_term;
  c.user_ids = p.tables.user_ids;
  c.item_ids = p.tables.item_ids;
  for (const auto& param : p.store.all()) {
    CheckpointBlock b;
    b.name = param.name;
    b.shape = param.value.shape;
    b.values.reserve(param.value.size());
    for (const S v : param.value.values)
      b.values.push_back(static_cast<double>(v));
    c.blocks.push_back(std::move(b));
  }
  return c;
}

// Rebuilds the full pipeline (structure from the config echo, parameters from
// the blocks). The parameter name sets must match exactly.
template <class S>
Pipeline<S> pipeline_from_checkpoint(const Checkpoint& c) {
  const TrainConfig cfg = parse_train_config(c.config_text);
  cfg.validate();
  Pipeline<S> p;
  p.cfg = cfg;
  p.vocab.id_to_token = c.vocab_tokens;
  for (std::size_t i = 0; i < c.vocab_tokens.size(); ++i)
    p.vocab.token_to_id.emplace(c.vocab_tokens[i], static_cast<int>(i));
  p.aspect_vocab.id_to_term = c.aspect_terms;
  for (std::size_t i = 0; i < c.aspect_terms.size(); ++i)
    p.aspect_vocab.term_to_id.emplace(c.aspect_terms[i], static_cast<int>(i));

  LmConfig lmcfg;
  lmcfg.vocab_size = p.vocab.size();
  lmcfg.d_model = cfg.d_model;
  lmcfg.n_layers = cfg.n_layers;
  lmcfg.n_heads = cfg.n_heads;
  lmcfg.max_seq_len =
      cfg.max_len + static_cast<int>(std::max<std::size_t>(cfg.prompt_rows(), 2));
  lmcfg.init_std = cfg.lm_init_std;
  p.lm = build_lm(p.store, lmcfg, cfg.seed);
  add_finetune_layer(p.store, p.lm);
  p.tables = build_embedding_tables<S>(p.store, c.user_ids, c.item_ids,
                                       cfg.resolved_d_u(), cfg.resolved_d_i(),
                                       cfg.seed);
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
    p.rec_tables.user_table =
        p.store.add("tables2.user", p.store.value(p.tables.user_table));
    p.rec_tables.item_table =
        p.store.add("tables2.item", p.store.value(p.tables.item_table));
  }

  if (c.blocks.size() != p.store.count())
    throw CheckpointError("checkpoint has " + std::to_string(c.blocks.size()) +
                          " parameter blocks, pipeline expects " +
                          std::to_string(p.store.count()));
  for (const CheckpointBlock& b : c.blocks) {
    const int id = p.store.find(b.name);
    if (id < 0)
      throw CheckpointError("checkpoint block '" + b.name +
                            "' has no matching parameter");
    Tensor<S>& dst = p.store.value(id);
    if (dst.shape != b.shape)
      throw CheckpointError("shape mismatch for '" + b.name + "'");
    for (std::size_t i = 0; i < b.values.size(); ++i)
      dst[i] = static_cast<S>(b.values[i]);
  }
  p.store.freeze_all();
  return p;
}

}  // namespace aspectrec
