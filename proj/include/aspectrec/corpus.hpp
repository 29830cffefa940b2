#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace aspectrec {

// Data-layer failures (malformed files, bad ratings, impossible splits).
// The CLI maps these to its data-error exit code.
class CorpusError : public std::runtime_error {
 public:
  explicit CorpusError(const std::string& what) : std::runtime_error(what) {}
};

struct ReviewRecord {
  std::string user_id;
  std::string item_id;
  double rating = 0.0;  // in [1, 5]
  std::string review;
  std::vector<std::string> aspects;  // normalized terms

  bool operator==(const ReviewRecord&) const = default;
};

enum class Provenance { ingested, synthetic };

struct Dataset {
  std::vector<ReviewRecord> records;
  Provenance provenance = Provenance::ingested;
};

struct DatasetStats {
  std::size_t n_ratings = 0;
  std::size_t n_users = 0;
  std::size_t n_items = 0;
  double sparsity = 0.0;  // n_ratings / (n_users * n_items)
};

// Token ids: 0..3 are reserved, corpus tokens start at 4, ordered by
// (frequency desc, token asc) over the training reviews.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kBos = 2;
  static constexpr int kEos = 3;

  std::vector<std::string> id_to_token;  // includes the four specials
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }

  int lookup(const std::string& token) const {
    auto it = token_to_id.find(token);
    return it == token_to_id.end() ? kUnk : it->second;
  }
};

// Dense ids over the normalized aspect terms of the training split, ordered
// by (frequency desc, term asc).
struct AspectVocabulary {
  std::vector<std::string> id_to_term;
  std::unordered_map<std::string, int> term_to_id;

  int size() const { return static_cast<int>(id_to_term.size()); }

  int lookup(const std::string& term) const {
    auto it = term_to_id.find(term);
    return it == term_to_id.end() ? -1 : it->second;
  }
};

struct SyntheticSpec {
  std::size_t n_users = 50;
  std::size_t n_items = 40;
  std::size_t n_records = 2000;
  std::size_t vocab_size = 120;       // filler word count
  std::size_t aspect_pool_size = 30;
  std::size_t aspects_per_review = 3;  // K_true
  std::size_t review_length = 10;      // filler draws per review
  double rating_noise_std = 0.3;
  std::uint64_t seed = 1;
};

struct SplitRatios {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

struct SplitResult {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Lowercase, strip leading/trailing punctuation from every whitespace word,
// drop words that become empty, rejoin with single spaces. Multi-word terms
// stay single entries ("test of time").
std::string normalize_aspect(const std::string& term);

// Review text to normalized words (same per-word rule as normalize_aspect).
std::vector<std::string> tokenize_words(const std::string& text);

// [BOS, ids..., EOS], unknown words map to UNK, then truncate to max_len
// (the EOS is dropped first when the text is long).
std::vector<int> tokenize(const std::string& text, const Vocabulary& v,
                          std::size_t max_len);

Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& d, const std::string& path);

DatasetStats dataset_stats(const Dataset& d);
// Sparsity as a percentage with three decimals, e.g. "0.522%".
std::string format_sparsity(const DatasetStats& stats);

Vocabulary build_vocab(const Dataset& train, std::size_t min_freq);
AspectVocabulary build_aspect_vocab(const Dataset& train);

SplitResult split_dataset(const Dataset& d, const SplitRatios& ratios,
                          std::uint64_t seed);

// Seed-deterministic generator with planted personalized aspects; the exact
// draw recipe is documented at the definition and doubles as the contract
// for the independent re-implementation used in tests.
Dataset generate_synthetic(const SyntheticSpec& spec);

// Profile accessors used by distribution tests: the preference/salience
// vectors the generator derives for a given user or item index.
std::vector<double> synthetic_user_preferences(const SyntheticSpec& spec,
                                               std::size_t user);
std::vector<double> synthetic_item_salience(const SyntheticSpec& spec,
                                            std::size_t item);
// Aspect-pool term for index a ("asp<a>", every fifth term two words).
std::string synthetic_aspect_term(std::size_t a);

}  // namespace aspectrec
