#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "aspectrec/training.hpp"

using namespace aspectrec;

namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.learning_rate = 0.05;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.k = 3;
  cfg.seed = 5;
  cfg.patience = 0;
  cfg.d_model = 16;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.max_len = 20;
  cfg.d_a = 8;
  cfg.rec_hidden = 16;
  cfg.min_freq = 1;
  cfg.pretrain_epochs = 1;
  cfg.pretrain_lr = 0.05;
  cfg.finetune_epochs = 1;
  cfg.finetune_lr = 0.05;
  cfg.grad_clip = 10.0;
  cfg.rec_lr_scale = 4.0;
  cfg.rec_grad_clip = 1.5;
  return cfg;
}

SyntheticSpec tiny_data_spec(std::uint64_t seed = 5) {
  SyntheticSpec spec;
  spec.n_users = 12;
  spec.n_items = 8;
  spec.n_records = 160;
  spec.vocab_size = 30;
  spec.aspect_pool_size = 8;
  spec.review_length = 6;
  spec.seed = seed;
  return spec;
}

struct Scenario {
  Dataset data;
  SplitResult splits;
  Pipeline<float> pipeline;

  explicit Scenario(TrainConfig cfg, std::uint64_t data_seed = 5)
      : data(generate_synthetic(tiny_data_spec(data_seed))),
        splits(split_dataset(
            data, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio}, cfg.seed)),
        pipeline(build_pipeline<float>(cfg, data, splits.train)) {}
};

}  // namespace

TEST_CASE("config file parsing: round trip, comments, rejection of unknowns") {
  TrainConfig cfg = tiny_config();
  cfg.no_prompt = true;
  cfg.softmax_axis = "per_aspect";
  const std::string text = serialize_train_config(cfg);
  const TrainConfig parsed = parse_train_config(text);
  CHECK(serialize_train_config(parsed) == text);

  const TrainConfig commented =
      parse_train_config("# comment\n\nlearning_rate = 0.25 # inline\n");
  CHECK(commented.learning_rate == 0.25);

  CHECK_THROWS_WITH_AS(parse_train_config("no_such_key = 1\n"),
                       doctest::Contains("unknown key"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("epochs = abc\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("no_joint = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_train_config("garbage line\n"), ConfigError);
}

TEST_CASE("conflicting ablation flags are rejected") {
  TrainConfig cfg = tiny_config();
  cfg.no_prompt = true;
  cfg.discrete_prompt = true;
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("conflicting"),
                       ConfigError);
  TrainConfig cfg2 = tiny_config();
  cfg2.user_only_prompt = true;
  cfg2.item_only_prompt = true;
  CHECK_THROWS_AS(cfg2.validate(), ConfigError);
  TrainConfig cfg3 = tiny_config();
  cfg3.learning_rate = 0;
  CHECK_THROWS_AS(cfg3.validate(), ConfigError);
}

TEST_CASE("initialization is seeded and matches the stated distributions") {
  Scenario a(tiny_config());
  Scenario b(tiny_config());
  CHECK(bitwise_checksum(a.pipeline.store) ==
        bitwise_checksum(b.pipeline.store));

  // user/item tables are standard normal: check moments on a large table
  ParamStore<float> store;
  std::vector<std::string> many_users, one_item{"i0"};
  for (int i = 0; i < 700; ++i) many_users.push_back("u" + std::to_string(i));
  const auto tables =
      build_embedding_tables<float>(store, many_users, one_item, 16, 16, 9);
  const Tensor<float>& ut = store.value(tables.user_table);
  REQUIRE(ut.size() >= 10000);
  double mean = 0;
  for (float v : ut.values) mean += v;
  mean /= static_cast<double>(ut.size());
  double var = 0;
  for (float v : ut.values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(ut.size());
  CHECK(std::abs(mean) < 0.05);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 0.05);

  // recommendation network parameters live in [-0.1, 0.1]
  RecNetwork<float> net = build_rec_network(store, 10, 8, 16, 16, 3, 32, 9);
  for (const int id : {net.attn_w, net.attn_b, net.f_w[0], net.f_b[0]})
    for (float v : store.value(id).values) {
      CHECK(v >= -0.1f);
      CHECK(v <= 0.1f);
    }
}

TEST_CASE("shuffled batches partition the records exactly once") {
  SplitMix64 rng(4);
  const auto batches = shuffled_batches(53, 8, rng);
  std::vector<int> seen(53, 0);
  for (const auto& b : batches) {
    CHECK(b.size() <= 8);
    for (std::size_t i : b) seen[i]++;
  }
  for (int c : seen) CHECK(c == 1);
}

TEST_CASE("train: deterministic history, fixed epoch count at patience 0") {
  Scenario s(tiny_config());
  TrainResult<float> res = train(s.pipeline, s.splits);
  CHECK(res.history.entries.size() == 3);  // patience 0: exactly n_epoch

  for (const auto& e : res.history.entries) {
    CHECK(std::isfinite(e.extraction_loss));
    CHECK(std::isfinite(e.rec_loss));
  }

  Scenario s2(tiny_config());
  TrainResult<float> res2 = train(s2.pipeline, s2.splits);
  CHECK(histories_equal_ignoring_wall(res.history, res2.history));
  CHECK(res.test_metrics == res2.test_metrics);
}

TEST_CASE("the freezing schedule holds across alternating epochs") {
  Scenario s(tiny_config());
  Pipeline<float>& p = s.pipeline;
  PretrainOpts po;
  po.epochs = 1;
  po.lr = 0.05;
  pretrain_base(p.store, p.lm, s.splits.train, p.vocab, po, p.cfg.seed);
  FinetuneOpts fo;
  fo.epochs = 1;
  finetune(p.store, p.lm, s.splits.train, s.splits.val, p.vocab, fo,
           p.cfg.seed);
  const std::uint64_t lm_sum = bitwise_checksum(p.store, "lm.");
  const auto records = prepare_records(p, s.splits.train);
  alternating_epoch(p, records, 0);
  alternating_epoch(p, records, 1);
  CHECK(bitwise_checksum(p.store, "lm.") == lm_sum);
}

TEST_CASE("phase isolation: each phase only moves its own parameters") {
  Scenario s(tiny_config());
  Pipeline<float>& p = s.pipeline;
  p.store.set_trainable_prefix("lm.", false);
  const auto records = prepare_records(p, s.splits.train);
  const std::vector<std::size_t> batch = {0, 1, 2, 3};

  const std::uint64_t rec_before = bitwise_checksum(p.store, "rec.");
  set_phase_flags(p, Phase::extraction);
  const auto ext = extraction_batch_step(p, records, batch, true, "extraction",
                                         0, 0);
  CHECK(bitwise_checksum(p.store, "rec.") == rec_before);

  const std::uint64_t head_before = bitwise_checksum(p.store, "extract.");
  set_phase_flags(p, Phase::recommendation);
  rec_batch_step(p, records, batch, ext.decoded, true, "recommendation", 0, 0);
  CHECK(bitwise_checksum(p.store, "extract.") == head_before);
  CHECK(bitwise_checksum(p.store, "rec.") != rec_before);
}

TEST_CASE("no_alternating produces a different parameter trajectory") {
  TrainConfig cfg = tiny_config();
  Scenario a(cfg);
  TrainResult<float> base = train(a.pipeline, a.splits);
  cfg.no_alternating = true;
  Scenario b(cfg);
  TrainResult<float> combined = train(b.pipeline, b.splits);
  CHECK_FALSE(histories_equal_ignoring_wall(base.history, combined.history));
  CHECK(bitwise_checksum(a.pipeline.store) !=
        bitwise_checksum(b.pipeline.store));
}

TEST_CASE("no_joint trains the stages separately with duplicated tables") {
  TrainConfig cfg = tiny_config();
  cfg.no_joint = true;
  cfg.epochs = 2;
  Scenario s(cfg);
  Pipeline<float>& p = s.pipeline;
  CHECK(p.rec_tables.user_table != p.tables.user_table);
  CHECK(p.store.value(p.rec_tables.user_table).values ==
        p.store.value(p.tables.user_table).values);
  TrainResult<float> res = train(p, s.splits);
  // 2 extraction epochs then 2 recommendation epochs
  CHECK(res.history.entries.size() == 4);
  CHECK(std::isfinite(res.history.entries[0].extraction_loss));
  CHECK(std::isnan(res.history.entries[0].rec_loss));
  CHECK(std::isnan(res.history.entries[3].extraction_loss));
  CHECK(std::isfinite(res.history.entries[3].rec_loss));
  // the two copies have genuinely diverged by the end
  CHECK(p.store.value(p.rec_tables.user_table).values !=
        p.store.value(p.tables.user_table).values);
}

TEST_CASE("ablation wiring: no_prompt removes personalization from logits") {
  TrainConfig cfg = tiny_config();
  cfg.no_prompt = true;
  Scenario s(cfg);
  Pipeline<float>& p = s.pipeline;
  const auto in = p.extraction_inputs();
  const std::vector<int> tokens = {2, 5, 6, 3};
  Tape<float> t1(p.store);
  const auto l1 = t1.value(aspect_logits(t1, in, 0, 0, tokens));
  Tape<float> t2(p.store);
  const auto l2 = t2.value(aspect_logits(t2, in, 1, 0, tokens));
  CHECK(l1.values == l2.values);  // different users, bitwise identical
}

TEST_CASE("ablation wiring: user_only ignores the item embedding") {
  TrainConfig cfg = tiny_config();
  cfg.user_only_prompt = true;
  Scenario s(cfg);
  Pipeline<float>& p = s.pipeline;
  const auto in = p.extraction_inputs();
  const std::vector<int> tokens = {2, 4, 3};
  Tape<float> t1(p.store);
  const auto before = t1.value(aspect_logits(t1, in, 0, 0, tokens));
  for (auto& v : p.store.value(p.tables.item_table).values) v += 3.0f;
  Tape<float> t2(p.store);
  const auto after = t2.value(aspect_logits(t2, in, 0, 0, tokens));
  CHECK(before.values == after.values);
}

TEST_CASE("ablation wiring: discrete prompt trains the id token rows") {
  TrainConfig cfg = tiny_config();
  cfg.discrete_prompt = true;
  Scenario s(cfg);
  Pipeline<float>& p = s.pipeline;
  REQUIRE(p.id_token_table >= 0);
  p.store.set_trainable_prefix("lm.", false);
  set_phase_flags(p, Phase::extraction);
  const auto records = prepare_records(p, s.splits.train);
  Tape<float> tape(p.store);
  const auto logits = aspect_logits(tape, p.extraction_inputs(),
                                    records[0].user_row, records[0].item_row,
                                    records[0].tokens);
  const auto loss = extraction_loss(tape, logits, records[0].truth_ids);
  tape.backward(loss);
  Gradients<float> g(p.store.count());
  tape.export_grads(g);
  REQUIRE(g.has(p.id_token_table));
  const Tensor<float>& gt = g.get(p.id_token_table);
  const std::size_t d = static_cast<std::size_t>(p.cfg.d_model);
  bool user_row_grad = false, item_row_grad = false;
  const std::size_t item_row_index =
      p.tables.user_ids.size() + static_cast<std::size_t>(records[0].item_row);
  for (std::size_t j = 0; j < d; ++j) {
    if (gt[static_cast<std::size_t>(records[0].user_row) * d + j] != 0.0f)
      user_row_grad = true;
    if (gt[item_row_index * d + j] != 0.0f) item_row_grad = true;
  }
  CHECK(user_row_grad);
  CHECK(item_row_grad);
}

TEST_CASE("divergence aborts with a diagnostic naming the phase") {
  TrainConfig cfg = tiny_config();
  cfg.learning_rate = 1e25;  // guaranteed blow-up
  cfg.grad_clip = 0;
  cfg.rec_grad_clip = 0;
  cfg.pretrain_epochs = 0;
  cfg.no_finetune = true;
  cfg.epochs = 4;
  Scenario s(cfg);
  try {
    train(s.pipeline, s.splits);
    WARN_MESSAGE(false, "expected a DivergenceError");
  } catch (const DivergenceError& e) {
    CHECK((e.phase() == "extraction" || e.phase() == "recommendation"));
    CHECK(std::string(e.what()).find("batch") != std::string::npos);
  }
}

TEST_CASE("history CSV renders one row per epoch and blanks NaN cells") {
  TrainHistory h;
  EpochStats e;
  e.epoch = 1;
  e.extraction_loss = 1.5;
  e.wall_seconds = 0.25;
  h.entries.push_back(e);
  const std::string csv = history_csv(h);
  CHECK(csv.find("epoch,extraction_loss,rec_loss") == 0);
  CHECK(csv.find("1,1.5,,,,,,0.25") != std::string::npos);
}

TEST_CASE("scalability bench produces timing rows and a linear fit") {
  TrainConfig cfg = tiny_config();
  cfg.epochs = 10;
  SyntheticSpec base = tiny_data_spec();
  const BenchReport report = bench_scalability<float>({100, 200}, cfg, base);
  REQUIRE(report.rows.size() == 2);
  CHECK(report.rows[0].records == 100);
  CHECK(report.rows[1].records == 200);
  CHECK(report.rows[0].seconds > 0);
  const std::string csv = bench_csv(report);
  CHECK(csv.find("records,seconds") == 0);
  CHECK(csv.find("# fit:") != std::string::npos);
  CHECK_THROWS_AS(bench_scalability<float>({200, 100}, cfg, base),
                  ConfigError);
}
