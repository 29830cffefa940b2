#include "aspectrec/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "aspectrec/kernels.hpp"
#include "aspectrec/rng.hpp"

namespace aspectrec {

namespace {

bool is_punct(char c) {
  return std::ispunct(static_cast<unsigned char>(c)) != 0;
}

std::string strip_word(const std::string& w) {
  std::size_t b = 0, e = w.size();
  while (b < e && is_punct(w[b])) ++b;
  while (e > b && is_punct(w[e - 1])) --e;
  std::string out = w.substr(b, e - b);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

}  // namespace

std::vector<std::string> tokenize_words(const std::string& text) {
  std::vector<std::string> words;
  std::istringstream is(text);
  std::string w;
  while (is >> w) {
    std::string s = strip_word(w);
    if (!s.empty()) words.push_back(std::move(s));
  }
  return words;
}

std::string normalize_aspect(const std::string& term) {
  const std::vector<std::string> words = tokenize_words(term);
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& v,
                          std::size_t max_len) {
  if (max_len < 1) throw CorpusError("tokenize: max_len must be >= 1");
  std::vector<int> ids;
  ids.push_back(Vocabulary::kBos);
  for (const std::string& w : tokenize_words(text)) ids.push_back(v.lookup(w));
  ids.push_back(Vocabulary::kEos);
  if (ids.size() > max_len) ids.resize(max_len);
  return ids;
}

// ---------------------------------------------------------------------------
// dataset file io: UTF-8, one flat JSON object per line with exactly the keys
// user_id, item_id, rating, review, aspects.

namespace {

ReviewRecord parse_record(const nlohmann::json& j, std::size_t line_no) {
  const auto fail = [line_no](const std::string& msg) -> ReviewRecord {
    throw CorpusError("line " + std::to_string(line_no) + ": " + msg);
  };
  if (!j.is_object()) return fail("record is not an object");
  static const char* kKeys[] = {"user_id", "item_id", "rating", "review",
                                "aspects"};
  for (const auto& [key, _] : j.items()) {
    if (std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) {
          return key == k;
        }) == std::end(kKeys))
      return fail("unknown key '" + key + "'");
  }
  for (const char* k : kKeys)
    if (!j.contains(k)) return fail(std::string("missing field '") + k + "'");

  ReviewRecord r;
  if (!j["user_id"].is_string()) return fail("field 'user_id' must be a string");
  if (!j["item_id"].is_string()) return fail("field 'item_id' must be a string");
  if (!j["rating"].is_number()) return fail("field 'rating' must be a number");
  if (!j["review"].is_string()) return fail("field 'review' must be a string");
  if (!j["aspects"].is_array()) return fail("field 'aspects' must be an array");
  r.user_id = j["user_id"].get<std::string>();
  r.item_id = j["item_id"].get<std::string>();
  r.rating = j["rating"].get<double>();
  r.review = j["review"].get<std::string>();
  if (r.rating < 1.0 || r.rating > 5.0)
    throw CorpusError("record " + std::to_string(line_no - 1) +
                      ": rating out of range [1,5]: " +
                      std::to_string(r.rating));
  if (r.review.empty()) return fail("empty review");
  if (j["aspects"].empty()) return fail("field 'aspects' must be non-empty");
  for (const auto& a : j["aspects"]) {
    if (!a.is_string()) return fail("aspect terms must be strings");
    std::string norm = normalize_aspect(a.get<std::string>());
    if (norm.empty()) return fail("aspect term empty after normalization");
    r.aspects.push_back(std::move(norm));
  }
  return r;
}

}  // namespace

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CorpusError("cannot open dataset file: " + path);
  Dataset d;
  d.provenance = Provenance::ingested;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw CorpusError("line " + std::to_string(line_no) +
                        ": invalid JSON: " + e.what());
    }
    d.records.push_back(parse_record(j, line_no));
  }
  if (d.records.empty()) throw CorpusError("dataset file is empty: " + path);
  return d;
}

void save_dataset(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw CorpusError("cannot write dataset file: " + path);
  for (const ReviewRecord& r : d.records) {
    nlohmann::json j;
    j["user_id"] = r.user_id;
    j["item_id"] = r.item_id;
    j["rating"] = r.rating;
    j["review"] = r.review;
    j["aspects"] = r.aspects;
    out << j.dump() << '\n';
  }
  if (!out) throw CorpusError("write failed: " + path);
}

// ---------------------------------------------------------------------------

DatasetStats dataset_stats(const Dataset& d) {
  if (d.records.empty()) throw CorpusError("dataset_stats: empty dataset");
  std::unordered_map<std::string, int> users, items;
  for (const ReviewRecord& r : d.records) {
    users.emplace(r.user_id, 1);
    items.emplace(r.item_id, 1);
  }
  DatasetStats s;
  s.n_ratings = d.records.size();
  s.n_users = users.size();
  s.n_items = items.size();
  s.sparsity = static_cast<double>(s.n_ratings) /
               (static_cast<double>(s.n_users) * static_cast<double>(s.n_items));
  return s;
}

std::string format_sparsity(const DatasetStats& stats) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f%%", stats.sparsity * 100.0);
  return buf;
}

Vocabulary build_vocab(const Dataset& train, std::size_t min_freq) {
  if (train.records.empty()) throw CorpusError("build_vocab: empty dataset");
  std::unordered_map<std::string, std::size_t> freq;
  for (const ReviewRecord& r : train.records)
    for (const std::string& w : tokenize_words(r.review)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, f] : freq)
    if (f >= min_freq) kept.emplace_back(tok, f);
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocabulary v;
  v.id_to_token = {"<pad>", "<unk>", "<bos>", "<eos>"};
  for (auto& [tok, f] : kept) v.id_to_token.push_back(tok);
  for (std::size_t i = 0; i < v.id_to_token.size(); ++i)
    v.token_to_id.emplace(v.id_to_token[i], static_cast<int>(i));
  return v;
}

AspectVocabulary build_aspect_vocab(const Dataset& train) {
  if (train.records.empty())
    throw CorpusError("build_aspect_vocab: empty dataset");
  std::unordered_map<std::string, std::size_t> freq;
  for (const ReviewRecord& r : train.records)
    for (const std::string& a : r.aspects) ++freq[a];
  std::vector<std::pair<std::string, std::size_t>> terms(freq.begin(),
                                                         freq.end());
  std::sort(terms.begin(), terms.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  AspectVocabulary av;
  for (auto& [term, f] : terms) av.id_to_term.push_back(term);
  for (std::size_t i = 0; i < av.id_to_term.size(); ++i)
    av.term_to_id.emplace(av.id_to_term[i], static_cast<int>(i));
  return av;
}

SplitResult split_dataset(const Dataset& d, const SplitRatios& ratios,
                          std::uint64_t seed) {
  if (ratios.train <= 0 || ratios.val <= 0 || ratios.test <= 0)
    throw CorpusError("split_dataset: ratios must be positive");
  if (std::abs(ratios.train + ratios.val + ratios.test - 1.0) > 1e-9)
    throw CorpusError("split_dataset: ratios must sum to 1");
  const std::size_t n = d.records.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  SplitMix64 rng = make_stream(seed, "split");
  for (std::size_t i = n; i-- > 1;) {
    const std::size_t j = rng.next_below(i + 1);
    std::swap(order[i], order[j]);
  }
  const std::size_t n_train = static_cast<std::size_t>(
      std::floor(ratios.train * static_cast<double>(n)));
  const std::size_t n_val = static_cast<std::size_t>(
      std::floor(ratios.val * static_cast<double>(n)));
  if (n_train == 0 || n_val == 0 || n_train + n_val >= n)
    throw CorpusError("split_dataset: a split would be empty");
  SplitResult out;
  out.train.provenance = out.val.provenance = out.test.provenance =
      d.provenance;
  for (std::size_t i = 0; i < n; ++i) {
    const ReviewRecord& r = d.records[order[i]];
    if (i < n_train)
      out.train.records.push_back(r);
    else if (i < n_train + n_val)
      out.val.records.push_back(r);
    else
      out.test.records.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generator. The full draw recipe, which the oracle re-implements
// independently in the test suite:
//
// Streams (see rng.hpp for stream_seed):
//   user u profile:  stream(seed, "user", u);  pref[a] = uniform01()^2 for
//                    a = 0..P-1 in order.
//   item i profile:  stream(seed, "item", i);  sal[a] = uniform01()^2.
//   record r:        stream(seed, "record", r), draws in this exact order:
//     1. u = next_below(n_users); 2. i = next_below(n_items)
//     3. K_true weighted picks without replacement over the aspect pool with
//        weight w[a] = pref[a] * sal[a]: each pick consumes one uniform01()
//        as x = u01 * sum(remaining weights), then walks remaining aspects in
//        ascending index order accumulating weights until the running sum
//        exceeds x (the last remaining aspect on fall-through).
//     4. review_length filler draws, each one next_below(V + P): values < V
//        append filler word "w<idx>" as one unit, values >= V append aspect
//        term idx - V as one (possibly multi-word) unit.
//     5. one insert position per sampled aspect, in sampled order:
//        pos = next_below(unit_count + 1); the term enters as a whole unit
//        at that position, so multi-word terms always stay contiguous.
//        review text = all units joined with single spaces.
//     6. if rating_noise_std > 0, one gaussian() (two next() calls).
//   rating = clamp(1 + (7.2 / K_true) * S + noise, 1, 5) with
//   S = sum of pref[a] * sal[a] over the sampled aspects.
//
// Filler words are "w0".."w<V-1>"; aspect term a is "asp<a>", except every
// fifth term (a % 5 == 4) is the two-word "asp<a> deluxe". user_id = "u<u>",
// item_id = "i<i>". Mentions of non-sampled aspect terms drawn in step 4 act
// as distractors: the text alone does not identify the ground truth, the
// user/item profiles do.

std::string synthetic_aspect_term(std::size_t a) {
  std::string t = "asp" + std::to_string(a);
  if (a % 5 == 4) t += " deluxe";
  return t;
}

namespace {

std::vector<double> profile(const SyntheticSpec& spec, const char* purpose,
                            std::size_t index) {
  SplitMix64 rng = make_stream(spec.seed, purpose, index);
  std::vector<double> w(spec.aspect_pool_size);
  for (double& v : w) {
    const double u = rng.uniform01();
    v = u * u;
  }
  return w;
}

void check_spec(const SyntheticSpec& spec) {
  if (spec.n_users < 1 || spec.n_items < 1 || spec.n_records < 1 ||
      spec.vocab_size < 1 || spec.aspect_pool_size < 1 ||
      spec.aspects_per_review < 1 || spec.review_length < 1)
    throw CorpusError("generate_synthetic: all counts must be >= 1");
  if (spec.aspects_per_review > spec.aspect_pool_size)
    throw CorpusError("generate_synthetic: K_true exceeds aspect pool");
  if (spec.rating_noise_std < 0)
    throw CorpusError("generate_synthetic: negative noise std");
}

}  // namespace

std::vector<double> synthetic_user_preferences(const SyntheticSpec& spec,
                                               std::size_t user) {
  return profile(spec, "user", user);
}

std::vector<double> synthetic_item_salience(const SyntheticSpec& spec,
                                            std::size_t item) {
  return profile(spec, "item", item);
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  check_spec(spec);
  std::vector<std::vector<double>> prefs(spec.n_users), sals(spec.n_items);
  for (std::size_t u = 0; u < spec.n_users; ++u)
    prefs[u] = profile(spec, "user", u);
  for (std::size_t i = 0; i < spec.n_items; ++i)
    sals[i] = profile(spec, "item", i);

  Dataset d;
  d.provenance = Provenance::synthetic;
  d.records.resize(spec.n_records);
  kernels::parallel_items(spec.n_records, [&](std::size_t r) {
    SplitMix64 rng = make_stream(spec.seed, "record", r);
    ReviewRecord& rec = d.records[r];
    const std::size_t u = rng.next_below(spec.n_users);
    const std::size_t i = rng.next_below(spec.n_items);
    rec.user_id = "u" + std::to_string(u);
    rec.item_id = "i" + std::to_string(i);

    const std::vector<double>& pref = prefs[u];
    const std::vector<double>& sal = sals[i];
    std::vector<std::size_t> remaining(spec.aspect_pool_size);
    for (std::size_t a = 0; a < remaining.size(); ++a) remaining[a] = a;
    std::vector<std::size_t> sampled;
    double sum_products = 0.0;
    for (std::size_t k = 0; k < spec.aspects_per_review; ++k) {
      double total = 0.0;
      for (std::size_t a : remaining) total += pref[a] * sal[a];
      const double x = rng.uniform01() * total;
      std::size_t pick = remaining.back();
      double c = 0.0;
      for (std::size_t idx = 0; idx < remaining.size(); ++idx) {
        c += pref[remaining[idx]] * sal[remaining[idx]];
        if (x < c) {
          pick = remaining[idx];
          break;
        }
      }
      sampled.push_back(pick);
      sum_products += pref[pick] * sal[pick];
      remaining.erase(std::find(remaining.begin(), remaining.end(), pick));
    }

    std::vector<std::string> units;
    units.reserve(spec.review_length + spec.aspects_per_review);
    for (std::size_t f = 0; f < spec.review_length; ++f) {
      const std::size_t idx =
          rng.next_below(spec.vocab_size + spec.aspect_pool_size);
      units.push_back(idx < spec.vocab_size
                          ? "w" + std::to_string(idx)
                          : synthetic_aspect_term(idx - spec.vocab_size));
    }
    for (std::size_t a : sampled) {
      const std::size_t pos = rng.next_below(units.size() + 1);
      units.insert(units.begin() + static_cast<std::ptrdiff_t>(pos),
                   synthetic_aspect_term(a));
    }
    std::string review;
    for (std::size_t w = 0; w < units.size(); ++w) {
      if (w) review += ' ';
      review += units[w];
    }
    rec.review = std::move(review);

    double rating =
        1.0 + (7.2 / static_cast<double>(spec.aspects_per_review)) *
                  sum_products;
    if (spec.rating_noise_std > 0)
      rating += spec.rating_noise_std * rng.gaussian();
    rec.rating = std::min(5.0, std::max(1.0, rating));
    for (std::size_t a : sampled) rec.aspects.push_back(synthetic_aspect_term(a));
  });
  return d;
}

}  // namespace aspectrec
