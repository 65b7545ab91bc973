#include "evanet/encoder.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>
#include <numeric>

namespace evanet {

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::exact_full: return "exact_full";
    case AttentionMode::probsparse_exact_measure: return "probsparse_exact_measure";
    case AttentionMode::probsparse_sampled_measure: return "probsparse_sampled_measure";
  }
  return "exact_full";
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "exact_full") return AttentionMode::exact_full;
  if (s == "probsparse_exact_measure") return AttentionMode::probsparse_exact_measure;
  if (s == "probsparse_sampled_measure") return AttentionMode::probsparse_sampled_measure;
  throw ParseError("unknown attention mode '" + s + "'");
}

std::size_t EncoderConfig::top_u() const {
  const double raw = sampling_factor * std::log(static_cast<double>(seq_len));
  const std::size_t u = static_cast<std::size_t>(std::ceil(raw));
  return std::max<std::size_t>(1, std::min(seq_len, u));
}

std::size_t EncoderConfig::measure_keys() const { return top_u(); }

void EncoderConfig::validate() const {
  if (n_layers < 1) throw DomainError("EncoderConfig: n_layers must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw DomainError("EncoderConfig: d_model (" + std::to_string(d_model) +
                      ") must be divisible by n_heads (" + std::to_string(n_heads) + ")");
  if (sampling_factor < 1.0) throw DomainError("EncoderConfig: sampling factor c must be >= 1");
  if (seq_len < 1) throw DomainError("EncoderConfig: seq_len must be >= 1");
  if (n_channels != EegEpoch::kChannels)
    throw DomainError("EncoderConfig: n_channels must be " + std::to_string(EegEpoch::kChannels));
}

const Tensor& positional_encoding(std::size_t seq_len, std::size_t d_model) {
  static std::mutex mu;
  static std::map<std::pair<std::size_t, std::size_t>, Tensor> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(seq_len, d_model);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;

  std::vector<double> pe(seq_len * d_model);
  for (std::size_t t = 0; t < seq_len; ++t) {
    for (std::size_t k = 0; 2 * k < d_model; ++k) {
      const double denom = std::pow(10000.0, 2.0 * static_cast<double>(k) /
                                                  static_cast<double>(d_model));
      const double arg = static_cast<double>(t) / denom;
      pe[t * d_model + 2 * k] = std::sin(arg);
      if (2 * k + 1 < d_model) pe[t * d_model + 2 * k + 1] = std::cos(arg);
    }
  }
  auto [pos, inserted] = cache.emplace(key, Tensor::from_data({seq_len, d_model}, std::move(pe)));
  (void)inserted;
  return pos->second;
}

Tensor temporal_embed(const EegEpoch& epoch, const EncoderConfig& cfg, const Tensor& embed_w) {
  if (epoch.samples.size() != cfg.n_channels * cfg.seq_len)
    throw ShapeError("temporal_embed: epoch is not " + std::to_string(cfg.n_channels) + "x" +
                     std::to_string(cfg.seq_len));
  if (embed_w.rank() != 2 || embed_w.dim(0) != cfg.n_channels || embed_w.dim(1) != cfg.d_model)
    throw ShapeError("temporal_embed: projection must be [" + std::to_string(cfg.n_channels) +
                     "x" + std::to_string(cfg.d_model) + "], got " +
                     shape_to_string(embed_w.shape()));

  // Time-major copy of the epoch, scaled to O(1).
  std::vector<double> xt(cfg.seq_len * cfg.n_channels);
  for (std::size_t c = 0; c < cfg.n_channels; ++c)
    for (std::size_t t = 0; t < cfg.seq_len; ++t)
      xt[t * cfg.n_channels + c] = epoch.samples[c * cfg.seq_len + t] * cfg.input_scale;
  Tensor x = Tensor::from_data({cfg.seq_len, cfg.n_channels}, std::move(xt));
  return add(matmul(x, embed_w), positional_encoding(cfg.seq_len, cfg.d_model));
}

Tensor full_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::uint64_t* macs) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2)
    throw ShapeError("full_attention: operands must be 2-D");
  const std::size_t t = q.dim(0), dk = q.dim(1);
  if (k.dim(1) != dk || v.dim(0) != k.dim(0))
    throw ShapeError("full_attention: inconsistent shapes " + shape_to_string(q.shape()) + ", " +
                     shape_to_string(k.shape()) + ", " + shape_to_string(v.shape()));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor scores = scale(matmul_nt(q, k), inv_sqrt);
  Tensor attn = softmax(scores, 1);
  if (macs) *macs += static_cast<std::uint64_t>(t) * k.dim(0) * dk      // QKᵀ
                     + static_cast<std::uint64_t>(t) * k.dim(0) * v.dim(1);  // A·V
  return matmul(attn, v);
}

std::vector<double> sparsity_measure(const Tensor& q, const Tensor& k_subset,
                                     std::uint64_t* macs) {
  if (q.rank() != 2 || k_subset.rank() != 2) throw ShapeError("sparsity_measure: operands must be 2-D");
  const std::size_t t = q.dim(0), dk = q.dim(1), u_keys = k_subset.dim(0);
  if (u_keys == 0) throw ShapeError("sparsity_measure: empty key subset");
  if (k_subset.dim(1) != dk)
    throw ShapeError("sparsity_measure: key width " + std::to_string(k_subset.dim(1)) +
                     " does not match query width " + std::to_string(dk));

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const auto& qv = q.values();
  // Scores as one dense product Q·K_subᵀ, then max-minus-mean per row.
  std::vector<double> kt(dk * u_keys);
  {
    const auto& kv = k_subset.values();
    for (std::size_t j = 0; j < u_keys; ++j)
      for (std::size_t d = 0; d < dk; ++d) kt[d * u_keys + j] = kv[j * dk + d];
  }
  std::vector<double> scores(t * u_keys, 0.0);
  gemm_accumulate(qv.data(), kt.data(), scores.data(), t, dk, u_keys);
  std::vector<double> measure(t);
  for (std::size_t i = 0; i < t; ++i) {
    const double* row = scores.data() + i * u_keys;
    double mx = row[0], sum = 0.0;
    for (std::size_t j = 0; j < u_keys; ++j) {
      mx = std::max(mx, row[j]);
      sum += row[j];
    }
    measure[i] = inv_sqrt * (mx - sum / static_cast<double>(u_keys));
  }
  if (macs) *macs += static_cast<std::uint64_t>(t) * u_keys * dk;
  return measure;
}

ProbSparseResult probsparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                      std::size_t u, std::size_t measure_keys, Rng& rng) {
  const std::size_t t = q.dim(0), dk = q.dim(1);
  if (u < 1 || u > t)
    throw DomainError("probsparse_attention: u = " + std::to_string(u) +
                      " out of range [1, " + std::to_string(t) + "]");
  if (k.dim(0) != t || k.dim(1) != dk || v.dim(0) != t)
    throw ShapeError("probsparse_attention: inconsistent shapes");

  ProbSparseResult result;

  // Measure phase: exact over all keys, or over a sampled subset.
  if (measure_keys == 0 || measure_keys >= t) {
    result.measure = sparsity_measure(q, k, &result.mac_count);
  } else {
    // Sample without replacement: partial Fisher–Yates over key indices.
    std::vector<std::size_t> pool(t);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < measure_keys; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.next_below(t - i));
      std::swap(pool[i], pool[j]);
    }
    std::vector<std::size_t> sampled(pool.begin(), pool.begin() + measure_keys);
    std::sort(sampled.begin(), sampled.end());
    std::vector<double> sub(measure_keys * dk);
    const auto& kv = k.values();
    for (std::size_t i = 0; i < measure_keys; ++i)
      std::copy_n(kv.data() + sampled[i] * dk, dk, sub.data() + i * dk);
    result.measure =
        sparsity_measure(q, Tensor::from_data({measure_keys, dk}, std::move(sub)),
                         &result.mac_count);
  }

  // Top-u queries, ties broken by ascending index; gather in ascending order.
  std::vector<std::size_t> order(t);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return result.measure[a] > result.measure[b];
  });
  result.selected.assign(order.begin(), order.begin() + u);
  std::sort(result.selected.begin(), result.selected.end());

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  Tensor q_sel = gather_rows(q, result.selected);
  Tensor scores = scale(matmul_nt(q_sel, k), inv_sqrt);
  Tensor attn = softmax(scores, 1);
  Tensor out_sel = matmul(attn, v);
  result.mac_count += static_cast<std::uint64_t>(u) * t * dk        // selected scores
                      + static_cast<std::uint64_t>(u) * t * v.dim(1)  // weighted sum
                      + static_cast<std::uint64_t>(t) * v.dim(1);     // column mean of V
  Tensor base = repeat_rows(mean(v, 0), t);
  result.output = overwrite_rows(base, out_sel, result.selected);
  return result;
}

EncoderParams init_encoder_params(const EncoderConfig& cfg, Rng& rng) {
  cfg.validate();
  auto linear = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, /*requires_grad=*/true);
  };
  EncoderParams p;
  p.embed_w = linear(cfg.n_channels, cfg.d_model);
  const std::size_t dk = cfg.head_dim();
  const std::size_t ff = cfg.feedforward_width();
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayerParams layer;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      layer.wq.push_back(linear(cfg.d_model, dk));
      layer.wk.push_back(linear(cfg.d_model, dk));
      layer.wv.push_back(linear(cfg.d_model, dk));
    }
    layer.wo = linear(cfg.d_model, cfg.d_model);
    layer.bo = Tensor::zeros({cfg.d_model}, true);
    layer.ln1_gain = Tensor::ones({cfg.d_model}, true);
    layer.ln1_bias = Tensor::zeros({cfg.d_model}, true);
    layer.ff_w1 = linear(cfg.d_model, ff);
    layer.ff_b1 = Tensor::zeros({ff}, true);
    layer.ff_w2 = linear(ff, cfg.d_model);
    layer.ff_b2 = Tensor::zeros({cfg.d_model}, true);
    layer.ln2_gain = Tensor::ones({cfg.d_model}, true);
    layer.ln2_bias = Tensor::zeros({cfg.d_model}, true);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

Tensor encoder_forward(const EegEpoch& epoch, const EncoderConfig& cfg,
                       const EncoderParams& params, Rng& rng,
                       AttentionDiagnostics* diagnostics) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::size_t t = cfg.seq_len;
  const std::size_t u = cfg.top_u();

  Tensor s = temporal_embed(epoch, cfg, params.embed_w);
  std::uint64_t macs = 0;
  const std::size_t dk = cfg.head_dim();
  for (const auto& layer : params.layers) {
    // One wide projection for every head's Q, K and V; per-element results
    // are identical to separate per-head products.
    std::vector<Tensor> proj_parts;
    proj_parts.reserve(3 * cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) proj_parts.push_back(layer.wq[h]);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) proj_parts.push_back(layer.wk[h]);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) proj_parts.push_back(layer.wv[h]);
    Tensor qkv = matmul(s, concat_cols(proj_parts));
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
      Tensor q = slice_cols(qkv, h * dk, dk);
      Tensor k = slice_cols(qkv, cfg.d_model + h * dk, dk);
      Tensor v = slice_cols(qkv, 2 * cfg.d_model + h * dk, dk);
      if (cfg.attention_mode == AttentionMode::exact_full) {
        heads.push_back(full_attention(q, k, v, &macs));
        if (diagnostics) {
          diagnostics->selected_per_head.emplace_back();
          diagnostics->measure_per_head.emplace_back();
        }
      } else {
        const std::size_t mk =
            cfg.attention_mode == AttentionMode::probsparse_exact_measure ? 0 : cfg.measure_keys();
        ProbSparseResult r = probsparse_attention(q, k, v, u, mk, rng);
        macs += r.mac_count;
        heads.push_back(std::move(r.output));
        if (diagnostics) {
          diagnostics->selected_per_head.push_back(std::move(r.selected));
          diagnostics->measure_per_head.push_back(std::move(r.measure));
        }
      }
    }
    Tensor attn_out = add(matmul(concat_cols(heads), layer.wo), repeat_rows(layer.bo, t));
    s = layer_norm(add(s, attn_out), layer.ln1_gain, layer.ln1_bias);
    Tensor hidden = relu(add(matmul(s, layer.ff_w1), repeat_rows(layer.ff_b1, t)));
    Tensor ff_out = add(matmul(hidden, layer.ff_w2), repeat_rows(layer.ff_b2, t));
    s = layer_norm(add(s, ff_out), layer.ln2_gain, layer.ln2_bias);
  }
  if (diagnostics) {
    diagnostics->mac_count = macs;
    diagnostics->wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
            .count();
  }
  return mean(s, 0);
}

}  // namespace evanet
