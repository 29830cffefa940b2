#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aspectrec/checkpoint.hpp"
#include "aspectrec/training.hpp"

using namespace aspectrec;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

void apply_ablations(TrainConfig& cfg, const std::vector<std::string>& names) {
  for (const std::string& name : names) {
    if (name == "no_joint")
      cfg.no_joint = true;
    else if (name == "no_finetune")
      cfg.no_finetune = true;
    else if (name == "no_prompt")
      cfg.no_prompt = true;
    else if (name == "discrete_prompt")
      cfg.discrete_prompt = true;
    else if (name == "no_alternating")
      cfg.no_alternating = true;
    else if (name == "no_attention")
      cfg.no_attention = true;
    else if (name == "user_only_prompt")
      cfg.user_only_prompt = true;
    else if (name == "item_only_prompt")
      cfg.item_only_prompt = true;
    else
      throw ConfigError("unknown ablation: " + name);
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write file: " + path);
  out << text;
}

struct GenDataArgs {
  SyntheticSpec spec;
  std::string out;
};

int run_gen_data(const GenDataArgs& args) {
  const Dataset d = generate_synthetic(args.spec);
  save_dataset(d, args.out);
  const DatasetStats stats = dataset_stats(d);
  std::printf("records=%zu users=%zu items=%zu sparsity=%s\n", stats.n_ratings,
              stats.n_users, stats.n_items, format_sparsity(stats).c_str());
  return 0;
}

struct TrainArgs {
  std::string config_path;
  std::string data_path;
  std::string out_checkpoint;
  std::string history_path;
  std::vector<std::string> ablations;
};

int run_train(const TrainArgs& args) {
  TrainConfig cfg = load_train_config(args.config_path);
  apply_ablations(cfg, args.ablations);
  cfg.validate();
  const Dataset data = load_dataset(args.data_path);
  const SplitResult splits = split_dataset(
      data, {cfg.train_ratio, cfg.val_ratio, cfg.test_ratio}, cfg.seed);
  Pipeline<float> pipeline = build_pipeline<float>(cfg, data, splits.train);
  const TrainResult<float> result = train(pipeline, splits);
  save_checkpoint(checkpoint_from_pipeline(pipeline), args.out_checkpoint);
  if (!args.history_path.empty())
    write_text(args.history_path, history_csv(result.history));
  std::fputs(metrics_csv(result.test_metrics).c_str(), stdout);
  std::fprintf(stderr, "checkpoint written to %s (best epoch %zu of %zu)\n",
               args.out_checkpoint.c_str(), result.best_epoch,
               result.history.entries.size());
  return 0;
}

struct CheckpointArgs {
  std::string checkpoint_path;
  std::string data_path;
  std::string out_csv;
  std::string user, item, review;
};

int run_eval(const CheckpointArgs& args) {
  Pipeline<float> p =
      pipeline_from_checkpoint<float>(load_checkpoint(args.checkpoint_path));
  const Dataset data = load_dataset(args.data_path);
  const SplitResult splits = split_dataset(
      data, {p.cfg.train_ratio, p.cfg.val_ratio, p.cfg.test_ratio},
      p.cfg.seed);
  const auto test_recs = prepare_records(p, splits.test);
  const MetricSet metrics =
      metric_set<float>(evaluate_split(p, test_recs, true));
  const std::string csv = metrics_csv(metrics);
  if (!args.out_csv.empty()) write_text(args.out_csv, csv);
  std::fputs(csv.c_str(), stdout);
  return 0;
}

int run_extract(const CheckpointArgs& args) {
  Pipeline<float> p =
      pipeline_from_checkpoint<float>(load_checkpoint(args.checkpoint_path));
  const int user_row = p.tables.row_for_user(args.user);
  const int item_row = p.tables.row_for_item(args.item);
  const auto tokens = tokenize(args.review, p.vocab,
                               static_cast<std::size_t>(p.cfg.max_len));
  Tape<float> tape(p.store);
  const auto logits = aspect_logits(tape, p.extraction_inputs(), user_row,
                                    item_row, tokens);
  const AspectPrediction pred =
      decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab);
  std::printf("aspect,probability\n");
  for (std::size_t i = 0; i < pred.terms.size(); ++i)
    std::printf("%s,%.6f\n", pred.terms[i].c_str(), pred.probs[i]);
  return 0;
}

int run_recommend(const CheckpointArgs& args) {
  Pipeline<float> p =
      pipeline_from_checkpoint<float>(load_checkpoint(args.checkpoint_path));
  const int user_row = p.tables.row_for_user(args.user);
  const int item_row = p.tables.row_for_item(args.item);
  const auto tokens = tokenize(args.review, p.vocab,
                               static_cast<std::size_t>(p.cfg.max_len));
  Tape<float> tape(p.store);
  const auto logits = aspect_logits(tape, p.extraction_inputs(), user_row,
                                    item_row, tokens);
  const AspectPrediction pred =
      decode_topk(tape.value(logits), p.cfg.k, p.aspect_vocab);
  const auto yhat =
      predict_rating(tape, p.rec_tables, p.rec, user_row, item_row,
                     pad_aspects(pred.ids, p.rec), p.rating_options());
  const double normalized = static_cast<double>(tape.value(yhat).values[0]);
  std::printf("normalized=%.6f rating=%.4f aspects=", normalized,
              denormalize_rating(normalized));
  for (std::size_t i = 0; i < pred.terms.size(); ++i)
    std::printf("%s%s", i ? ";" : "", pred.terms[i].c_str());
  std::printf("\n");
  return 0;
}

struct BenchArgs {
  std::vector<std::size_t> sizes;
  std::string config_path;
  std::string out_csv;
  SyntheticSpec base;
};

int run_bench(const BenchArgs& args) {
  TrainConfig cfg = args.config_path.empty()
                        ? TrainConfig{}
                        : load_train_config(args.config_path);
  cfg.validate();
  const BenchReport report =
      bench_scalability<float>(args.sizes, cfg, args.base);
  const std::string csv = bench_csv(report);
  if (!args.out_csv.empty()) write_text(args.out_csv, csv);
  std::fputs(csv.c_str(), stdout);
  for (std::size_t i = 1; i < report.rows.size(); ++i)
    std::printf("# ratio %zu/%zu records = %.3f\n", report.rows[i].records,
                report.rows[i - 1].records,
                report.rows[i].seconds / report.rows[i - 1].seconds);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint personalized aspect extraction and rating prediction"};
  app.require_subcommand(1);

  GenDataArgs gen;
  CLI::App* gen_cmd =
      app.add_subcommand("gen-data", "generate a synthetic dataset file");
  gen_cmd->add_option("--users", gen.spec.n_users)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--items", gen.spec.n_items)->check(CLI::PositiveNumber);
  gen_cmd->add_option("--records", gen.spec.n_records)
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--vocab", gen.spec.vocab_size)
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--aspect-pool", gen.spec.aspect_pool_size)
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--aspects-per-review", gen.spec.aspects_per_review)
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--review-length", gen.spec.review_length)
      ->check(CLI::PositiveNumber);
  gen_cmd->add_option("--noise", gen.spec.rating_noise_std);
  gen_cmd->add_option("--seed", gen.spec.seed);
  gen_cmd->add_option("--out", gen.out)->required();

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand(
      "train", "fine-tune the language model and run alternating training");
  train_cmd->add_option("--config", train_args.config_path)->required();
  train_cmd->add_option("--data", train_args.data_path)->required();
  train_cmd->add_option("--out", train_args.out_checkpoint)->required();
  train_cmd->add_option("--history", train_args.history_path);
  train_cmd->add_option("--ablation", train_args.ablations)
      ->description("ablation switch, repeatable (no_joint, no_finetune, "
                    "no_prompt, discrete_prompt, no_alternating, "
                    "no_attention, user_only_prompt, item_only_prompt)");

  CheckpointArgs eval_args;
  CLI::App* eval_cmd =
      app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint_path)->required();
  eval_cmd->add_option("--data", eval_args.data_path)->required();
  eval_cmd->add_option("--out", eval_args.out_csv);

  CheckpointArgs extract_args;
  CLI::App* extract_cmd = app.add_subcommand(
      "extract", "top-K aspect terms for one (user, item, review)");
  extract_cmd->add_option("--checkpoint", extract_args.checkpoint_path)
      ->required();
  extract_cmd->add_option("--user", extract_args.user)->required();
  extract_cmd->add_option("--item", extract_args.item)->required();
  extract_cmd->add_option("--review", extract_args.review)->required();

  CheckpointArgs rec_args;
  CLI::App* rec_cmd = app.add_subcommand(
      "recommend", "predicted rating for one (user, item, review)");
  rec_cmd->add_option("--checkpoint", rec_args.checkpoint_path)->required();
  rec_cmd->add_option("--user", rec_args.user)->required();
  rec_cmd->add_option("--item", rec_args.item)->required();
  rec_cmd->add_option("--review", rec_args.review)->required();

  BenchArgs bench;
  CLI::App* bench_cmd = app.add_subcommand(
      "bench-scalability",
      "training time versus record count, 10 epochs each");
  bench_cmd->add_option("--sizes", bench.sizes)->required()->delimiter(',');
  bench_cmd->add_option("--config", bench.config_path);
  bench_cmd->add_option("--out", bench.out_csv);
  bench_cmd->add_option("--users", bench.base.n_users);
  bench_cmd->add_option("--items", bench.base.n_items);
  bench_cmd->add_option("--vocab", bench.base.vocab_size);
  bench_cmd->add_option("--seed", bench.base.seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) return run_train(train_args);
    if (eval_cmd->parsed()) return run_eval(eval_args);
    if (extract_cmd->parsed()) return run_extract(extract_args);
    if (rec_cmd->parsed()) return run_recommend(rec_args);
    if (bench_cmd->parsed()) return run_bench(bench);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const CorpusError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "checkpoint error: %s\n", e.what());
    return kExitData;
  } catch (const std::out_of_range& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
