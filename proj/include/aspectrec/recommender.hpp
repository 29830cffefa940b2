#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "aspectrec/param_store.hpp"
#include "aspectrec/prompt.hpp"
#include "aspectrec/rng.hpp"
#include "aspectrec/tape.hpp"

namespace aspectrec {

// Softmax placement in the attention of component 2: over the d_a components
// of W_a * Z (the stated form), or one scalar weight per aspect across the K
// extracted aspects (the alternative wiring kept for ablation study).
enum class AttentionSoftmaxAxis { per_component, per_aspect };

// theta_recommendation: aspect embedding table (with a trailing NONE padding
// row), the attention projection producing Z_{u,i}, and the rating head f:
// three sigmoid dense layers, the last of which is the single rating unit.
// A deeper variant (three hidden layers plus the output unit) turned out to
// be untrainable with the +-0.1 uniform init at this scale: the sigmoid
// stack attenuates both signal and gradient by ~0.16 per layer.
template <class S>
struct RecNetwork {
  int aspect_table = -1;  // (V_a + 1) x d_a; row V_a is the NONE padding row
  int attn_w = -1;        // (d_u + d_i) x d_a
  int attn_b = -1;        // d_a
  std::vector<int> f_w;   // layer weights: F->H, H->H, H->1
  std::vector<int> f_b;
  std::size_t d_a = 0;
  std::size_t hidden = 128;
  std::size_t k = 3;
  int none_aspect_id = -1;
};

template <class S>
RecNetwork<S> build_rec_network(ParamStore<S>& store, std::size_t v_a,
                                std::size_t d_a, std::size_t d_u,
                                std::size_t d_i, std::size_t k,
                                std::size_t hidden, std::uint64_t seed) {
  SplitMix64 rng = make_stream(seed, "init.rec");
  auto uniform = [&](const std::string& name, std::vector<std::size_t> shape) {
    Tensor<S> t(std::move(shape));
    for (S& v : t.values) v = static_cast<S>(rng.uniform(-0.1, 0.1));
    return store.add(name, std::move(t));
  };
  RecNetwork<S> net;
  net.d_a = d_a;
  net.hidden = hidden;
  net.k = k;
  net.none_aspect_id = static_cast<int>(v_a);
  // The aspect table is an embedding table like e_u/e_i and follows their
  // standard-normal init; the +-0.1 uniform init covers the projection and
  // rating head (theta_recommendation proper).
  {
    SplitMix64 arng = make_stream(seed, "init.aspect_table");
    Tensor<S> t({v_a + 1, d_a});
    for (S& v : t.values) v = static_cast<S>(arng.gaussian());
    net.aspect_table = store.add("rec.aspect_table", std::move(t));
  }
  net.attn_w = uniform("rec.attn.w", {d_u + d_i, d_a});
  net.attn_b = uniform("rec.attn.b", {d_a});
  const std::size_t f_in = k * d_a + d_u + d_i;
  const std::size_t dims[] = {f_in, hidden, hidden, 1};
  for (int l = 0; l < 3; ++l) {
    net.f_w.push_back(uniform("rec.f" + std::to_string(l) + ".w",
                              {dims[l], dims[l + 1]}));
    net.f_b.push_back(
        uniform("rec.f" + std::to_string(l) + ".b", {dims[l + 1]}));
  }
  return net;
}

// Z_{u,i}: affine projection of [W_u; W_i] down to d_a.
template <class S>
typename Tape<S>::Id attention_projection(Tape<S>& tape,
                                          const RecNetwork<S>& net,
                                          typename Tape<S>::Id wu_flat,
                                          typename Tape<S>::Id wi_flat) {
  const auto ui = tape.concat({wu_flat, wi_flat});
  const auto row = tape.reshape_rows_pad(ui, tape.value(ui).size());
  const auto z2d =
      tape.add(tape.matmul(row, tape.param(net.attn_w)), tape.param(net.attn_b));
  return tape.flatten(z2d);
}

// softmax(W_a (*) Z_{u,i}) over the d_a components; sums to 1.
template <class S>
typename Tape<S>::Id attention_weights(Tape<S>& tape, const RecNetwork<S>& net,
                                       typename Tape<S>::Id w_aspect,
                                       typename Tape<S>::Id wu_flat,
                                       typename Tape<S>::Id wi_flat) {
  const auto z = attention_projection(tape, net, wu_flat, wi_flat);
  return tape.softmax(tape.mul(w_aspect, z), 0);
}

// W_a' = W_a (*) attention.
template <class S>
typename Tape<S>::Id modulate_aspect(Tape<S>& tape,
                                     typename Tape<S>::Id w_aspect,
                                     typename Tape<S>::Id attn) {
  return tape.mul(w_aspect, attn);
}

template <class S>
struct PredictRatingOptions {
  bool use_attention = true;
  AttentionSoftmaxAxis softmax_axis = AttentionSoftmaxAxis::per_component;
};

// y_hat = f([W_{u,i,A}; W_u; W_i]) in (0,1). `aspect_ids` must already be
// padded with the NONE id up to K entries.
template <class S>
typename Tape<S>::Id predict_rating(Tape<S>& tape,
                                    const EmbeddingTables<S>& tables,
                                    const RecNetwork<S>& net, int user_row,
                                    int item_row,
                                    const std::vector<int>& aspect_ids,
                                    const PredictRatingOptions<S>& opts = {}) {
  using Id = typename Tape<S>::Id;
  if (aspect_ids.size() != net.k)
    throw std::invalid_argument("predict_rating: expected exactly K=" +
                                std::to_string(net.k) + " aspect ids");
  const Id wu_flat = tape.flatten(
      tape.embedding_rows(tape.param(tables.user_table), {user_row}));
  const Id wi_flat = tape.flatten(
      tape.embedding_rows(tape.param(tables.item_table), {item_row}));

  std::vector<Id> aspect_rows;
  for (int id : aspect_ids)
    aspect_rows.push_back(tape.flatten(
        tape.embedding_rows(tape.param(net.aspect_table), {id})));

  std::vector<Id> modulated;
  if (!opts.use_attention) {
    modulated = aspect_rows;
  } else if (opts.softmax_axis == AttentionSoftmaxAxis::per_component) {
    const Id z = attention_projection(tape, net, wu_flat, wi_flat);
    for (const Id w_a : aspect_rows) {
      const Id attn = tape.softmax(tape.mul(w_a, z), 0);
      modulated.push_back(tape.mul(w_a, attn));
    }
  } else {
    // one scalar logit per aspect, softmax across the K aspects
    const Id z = attention_projection(tape, net, wu_flat, wi_flat);
    std::vector<Id> scores;
    for (const Id w_a : aspect_rows)
      scores.push_back(tape.sum_elements(tape.mul(w_a, z)));
    const Id alphas = tape.softmax(tape.concat(scores), 0);
    for (std::size_t k = 0; k < aspect_rows.size(); ++k) {
      const Id alpha_k = tape.slice_elem(alphas, k);
      modulated.push_back(tape.scale_by(aspect_rows[k], alpha_k));
    }
  }
  std::vector<Id> feat_parts = modulated;
  feat_parts.push_back(wu_flat);
  feat_parts.push_back(wi_flat);
  const Id features = tape.concat(feat_parts);
  Id x = tape.reshape_rows_pad(features, tape.value(features).size());
  for (std::size_t l = 0; l < net.f_w.size(); ++l)
    x = tape.sigmoid(tape.add(tape.matmul(x, tape.param(net.f_w[l])),
                              tape.param(net.f_b[l])));
  return x;  // (1 x 1)
}

inline double normalize_rating(double raw) { return (raw - 1.0) / 4.0; }
inline double denormalize_rating(double normalized) {
  return 1.0 + 4.0 * normalized;
}

struct RatingPrediction {
  double normalized = 0.0;  // in (0,1)
  double denormalized() const { return denormalize_rating(normalized); }
};

// Eq.-style summed MSE over a batch of (normalized y, y_hat) pairs.
inline double rec_loss(const std::vector<std::pair<double, double>>& pairs) {
  double s = 0.0;
  for (const auto& [y, yhat] : pairs) s += (y - yhat) * (y - yhat);
  return s;
}

// Pads a prediction's aspect ids with the NONE row up to K.
template <class S>
std::vector<int> pad_aspects(const std::vector<int>& ids,
                             const RecNetwork<S>& net) {
  std::vector<int> out = ids;
  if (out.size() > net.k)
    out.resize(net.k);
  while (out.size() < net.k) out.push_back(net.none_aspect_id);
  return out;
}

}  // namespace aspectrec
