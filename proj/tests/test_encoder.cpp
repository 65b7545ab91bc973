#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evanet/encoder.hpp"
#include "testutil.hpp"

using namespace evanet;

namespace {

// Tiny epochs (T < 1000) bypass EegEpoch::create on purpose: the encoder
// contract is C×T, the 19×1000 invariant belongs to the data layer.
EegEpoch raw_epoch(std::size_t channels, std::size_t t, double age, Rng& rng,
                   double scale = 1e-5) {
  EegEpoch e;
  e.subject_id = "test";
  e.age = age;
  e.samples.resize(channels * t);
  for (auto& v : e.samples) v = rng.uniform(-scale, scale);
  return e;
}

EncoderConfig tiny_config(std::size_t t, AttentionMode mode) {
  EncoderConfig cfg;
  cfg.n_layers = 1;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.seq_len = t;
  cfg.attention_mode = mode;
  return cfg;
}

}  // namespace

TEST_CASE("top-u selection count: ceil(c ln T), clipped to T") {
  EncoderConfig cfg;
  cfg.seq_len = 1000;
  cfg.sampling_factor = 5.0;
  CHECK(cfg.top_u() == 35);
  cfg.seq_len = 4;
  CHECK(cfg.top_u() == 4);  // ceil(5 ln 4) = 7, clipped
  cfg.seq_len = 1;
  CHECK(cfg.top_u() == 1);
}

TEST_CASE("temporal embedding: zero epoch reduces to the positional encoding") {
  Rng rng(5);
  EncoderConfig cfg = tiny_config(40, AttentionMode::exact_full);
  EegEpoch zero = raw_epoch(cfg.n_channels, cfg.seq_len, 30.0, rng, 0.0);
  Tensor w = Tensor::uniform({cfg.n_channels, cfg.d_model}, -1.0, 1.0, rng);
  Tensor s = temporal_embed(zero, cfg, w);
  const Tensor& pe = positional_encoding(cfg.seq_len, cfg.d_model);
  REQUIRE(s.shape() == pe.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) CHECK(s.values()[i] == pe.values()[i]);
  for (double v : pe.values()) {
    CHECK(v <= 1.0);
    CHECK(v >= -1.0);
  }
}

TEST_CASE("temporal embedding is local: changing timepoint t changes only row t") {
  Rng rng(6);
  EncoderConfig cfg = tiny_config(24, AttentionMode::exact_full);
  EegEpoch a = raw_epoch(cfg.n_channels, cfg.seq_len, 30.0, rng);
  EegEpoch b = a;
  const std::size_t t_changed = 7;
  for (std::size_t c = 0; c < cfg.n_channels; ++c)
    b.samples[c * cfg.seq_len + t_changed] += 3e-5;
  Tensor w = Tensor::uniform({cfg.n_channels, cfg.d_model}, -1.0, 1.0, rng);
  Tensor sa = temporal_embed(a, cfg, w);
  Tensor sb = temporal_embed(b, cfg, w);
  for (std::size_t t = 0; t < cfg.seq_len; ++t) {
    bool differs = false;
    for (std::size_t d = 0; d < cfg.d_model; ++d)
      differs = differs || sa.at(t, d) != sb.at(t, d);
    CHECK(differs == (t == t_changed));
  }
}

TEST_CASE("temporal embedding rejects a wrong channel count") {
  Rng rng(7);
  EncoderConfig cfg = tiny_config(24, AttentionMode::exact_full);
  EegEpoch e = raw_epoch(cfg.n_channels, 23, 30.0, rng);  // one timepoint short
  Tensor w = Tensor::uniform({cfg.n_channels, cfg.d_model}, -1.0, 1.0, rng);
  CHECK_THROWS_AS(temporal_embed(e, cfg, w), ShapeError);
}

TEST_CASE("full attention: single key returns V, identical keys average V") {
  Rng rng(8);
  Tensor q1 = Tensor::uniform({1, 4}, -1, 1, rng);
  Tensor k1 = Tensor::uniform({1, 4}, -1, 1, rng);
  Tensor v1 = Tensor::uniform({1, 4}, -1, 1, rng);
  Tensor out1 = full_attention(q1, k1, v1);
  for (std::size_t i = 0; i < 4; ++i) CHECK(out1.values()[i] == doctest::Approx(v1.values()[i]));

  const std::size_t t = 6, dk = 3;
  std::vector<double> krow = {0.4, -0.2, 0.9};
  std::vector<double> kdata;
  for (std::size_t i = 0; i < t; ++i) kdata.insert(kdata.end(), krow.begin(), krow.end());
  Tensor q = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor k = Tensor::from_data({t, dk}, kdata);
  Tensor v = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor out = full_attention(q, k, v);
  Tensor vmean = mean(v, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t c = 0; c < dk; ++c)
      CHECK(out.at(r, c) == doctest::Approx(vmean.values()[c]).epsilon(1e-12));
}

TEST_CASE("full attention matches a brute-force loop reference and its golden vector") {
  Rng rng(16);
  const std::size_t t = 16, dk = 5;
  Tensor q = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor k = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor v = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor out = full_attention(q, k, v);

  // Frozen regression vector: first two output rows of this seeded case.
  const double golden[2][5] = {
      {-0.38154675387693854, -0.30834200750729157, 0.040685868604324174, 0.035695083587003656,
       0.035490692924377953},
      {-0.30483914000140794, -0.3308284893430305, 0.13078502509924164, 0.025095420502856333,
       0.077918989806710207},
  };
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < dk; ++c)
      CHECK(out.at(r, c) == doctest::Approx(golden[r][c]).epsilon(1e-12));

  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> scores(t);
    double mx = -1e300;
    for (std::size_t j = 0; j < t; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += q.at(i, d) * k.at(j, d);
      scores[j] = dot * inv;
      mx = std::max(mx, scores[j]);
    }
    double denom = 0.0;
    for (std::size_t j = 0; j < t; ++j) denom += std::exp(scores[j] - mx);
    for (std::size_t d = 0; d < dk; ++d) {
      double acc = 0.0;
      for (std::size_t j = 0; j < t; ++j)
        acc += std::exp(scores[j] - mx) / denom * v.at(j, d);
      CHECK(out.at(i, d) == doctest::Approx(acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("sparsity measure: zero when scores are flat, nonnegative, brute-force match") {
  Rng rng(17);
  // Identical keys make every query's scores flat.
  std::vector<double> kdata;
  for (int i = 0; i < 8; ++i) kdata.insert(kdata.end(), {0.3, 0.3, -0.1});
  Tensor q = Tensor::uniform({5, 3}, -1, 1, rng);
  Tensor k_flat = Tensor::from_data({8, 3}, kdata);
  for (double m : sparsity_measure(q, k_flat)) CHECK(std::fabs(m) < 1e-14);

  const std::size_t t = 32, dk = 4;
  Tensor qq = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor kk = Tensor::uniform({t, dk}, -1, 1, rng);
  auto measure = sparsity_measure(qq, kk);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t i = 0; i < t; ++i) {
    CHECK(measure[i] >= 0.0);
    double mx = -1e300, sum = 0.0;
    for (std::size_t j = 0; j < t; ++j) {
      double dot = 0.0;
      for (std::size_t d = 0; d < dk; ++d) dot += qq.at(i, d) * kk.at(j, d);
      dot *= inv;
      mx = std::max(mx, dot);
      sum += dot;
    }
    CHECK(measure[i] == doctest::Approx(mx - sum / t).epsilon(1e-12));
  }
  CHECK_THROWS_AS(sparsity_measure(qq, Tensor::uniform({1, 5}, -1, 1, rng)), ShapeError);
}

TEST_CASE("sparsity measure is invariant to a constant shift of one query's scores") {
  Rng rng(18);
  Tensor q = Tensor::uniform({1, 6}, -1, 1, rng);
  Tensor k = Tensor::uniform({12, 6}, -1, 1, rng);
  // Adding w to every key shifts all of this query's scores by q·w/√d.
  std::vector<double> w(6);
  for (auto& x : w) x = rng.uniform(-2.0, 2.0);
  std::vector<double> shifted = k.values();
  for (std::size_t j = 0; j < 12; ++j)
    for (std::size_t d = 0; d < 6; ++d) shifted[j * 6 + d] += w[d];
  const double m0 = sparsity_measure(q, k)[0];
  const double m1 = sparsity_measure(q, Tensor::from_data({12, 6}, shifted))[0];
  CHECK(m0 == doctest::Approx(m1).epsilon(1e-9));
}

TEST_CASE("probsparse with u = T and exact measure equals full attention") {
  Rng rng(19);
  for (std::size_t t : {8ul, 64ul}) {
    Tensor q = Tensor::uniform({t, 6}, -1, 1, rng);
    Tensor k = Tensor::uniform({t, 6}, -1, 1, rng);
    Tensor v = Tensor::uniform({t, 6}, -1, 1, rng);
    Rng attn_rng(1);
    ProbSparseResult r = probsparse_attention(q, k, v, t, 0, attn_rng);
    Tensor full = full_attention(q, k, v);
    for (std::size_t i = 0; i < full.numel(); ++i)
      CHECK(std::fabs(r.output.values()[i] - full.values()[i]) < 1e-9);
  }
}

TEST_CASE("probsparse rejects u out of range") {
  Rng rng(20);
  Tensor q = Tensor::uniform({8, 4}, -1, 1, rng);
  Rng attn_rng(1);
  CHECK_THROWS_AS(probsparse_attention(q, q, q, 0, 0, attn_rng), DomainError);
  CHECK_THROWS_AS(probsparse_attention(q, q, q, 9, 0, attn_rng), DomainError);
}

TEST_CASE("probsparse: selected rows are exact, unselected rows are the V column mean") {
  Rng rng(21);
  const std::size_t t = 64, dk = 8, u = 9;
  Tensor q = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor k = Tensor::uniform({t, dk}, -1, 1, rng);
  Tensor v = Tensor::uniform({t, dk}, -1, 1, rng);
  Rng attn_rng(3);
  ProbSparseResult r = probsparse_attention(q, k, v, u, 0, attn_rng);
  REQUIRE(r.selected.size() == u);
  CHECK(std::is_sorted(r.selected.begin(), r.selected.end()));
  // Indices distinct and in range.
  for (std::size_t i = 1; i < u; ++i) CHECK(r.selected[i] > r.selected[i - 1]);
  CHECK(r.selected.back() < t);

  Tensor full = full_attention(q, k, v);
  Tensor vmean = mean(v, 0);
  std::vector<bool> is_selected(t, false);
  for (std::size_t i : r.selected) is_selected[i] = true;
  for (std::size_t row = 0; row < t; ++row) {
    for (std::size_t c = 0; c < dk; ++c) {
      const double expected = is_selected[row] ? full.at(row, c) : vmean.values()[c];
      CHECK(r.output.at(row, c) == doctest::Approx(expected).epsilon(1e-10));
    }
  }
}

TEST_CASE("probsparse MAC count scales sub-quadratically in sampled-measure mode") {
  Rng rng(22);
  const std::size_t dk = 8;
  std::uint64_t prev_sparse = 0, prev_full = 0;
  double worst_sparse_ratio = 0.0;
  for (std::size_t t : {500ul, 1000ul, 2000ul, 4000ul}) {
    Tensor q = Tensor::uniform({t, dk}, -1, 1, rng);
    Tensor k = Tensor::uniform({t, dk}, -1, 1, rng);
    Tensor v = Tensor::uniform({t, dk}, -1, 1, rng);
    const std::size_t u = static_cast<std::size_t>(
        std::ceil(5.0 * std::log(static_cast<double>(t))));
    Rng attn_rng(4);
    ProbSparseResult r = probsparse_attention(q, k, v, u, u, attn_rng);
    std::uint64_t full_macs = 0;
    full_attention(q, k, v, &full_macs);
    if (prev_sparse) {
      worst_sparse_ratio = std::max(
          worst_sparse_ratio, static_cast<double>(r.mac_count) / static_cast<double>(prev_sparse));
      const double full_ratio = static_cast<double>(full_macs) / static_cast<double>(prev_full);
      CHECK(full_ratio == doctest::Approx(4.0).epsilon(0.01));
    }
    prev_sparse = r.mac_count;
    prev_full = full_macs;
  }
  CHECK(worst_sparse_ratio < 2.6);
}

TEST_CASE("encoder forward: shape contract and mode equivalence") {
  Rng rng(23);
  EncoderConfig cfg = tiny_config(48, AttentionMode::exact_full);
  cfg.n_layers = 4;
  EegEpoch e = raw_epoch(cfg.n_channels, cfg.seq_len, 41.0, rng);
  Rng init(100);
  EncoderParams params = init_encoder_params(cfg, init);

  Rng r1(1);
  Tensor h_full = encoder_forward(e, cfg, params, r1);
  REQUIRE(h_full.shape() == std::vector<std::size_t>{cfg.d_model});

  // Force u = T via a huge sampling factor, exact measure.
  EncoderConfig cfg_ps = cfg;
  cfg_ps.attention_mode = AttentionMode::probsparse_exact_measure;
  cfg_ps.sampling_factor = 1000.0;
  REQUIRE(cfg_ps.top_u() == cfg.seq_len);
  Rng r2(1);
  Tensor h_ps = encoder_forward(e, cfg_ps, params, r2);
  for (std::size_t i = 0; i < cfg.d_model; ++i)
    CHECK(std::fabs(h_full.values()[i] - h_ps.values()[i]) < 1e-7);
}

TEST_CASE("encoder forward is deterministic for a fixed seed and mode") {
  Rng rng(24);
  EncoderConfig cfg = tiny_config(64, AttentionMode::probsparse_sampled_measure);
  EegEpoch e = raw_epoch(cfg.n_channels, cfg.seq_len, 33.0, rng);
  Rng init(7);
  EncoderParams params = init_encoder_params(cfg, init);
  Rng ra(42), rb(42);
  Tensor ha = encoder_forward(e, cfg, params, ra);
  Tensor hb = encoder_forward(e, cfg, params, rb);
  for (std::size_t i = 0; i < ha.numel(); ++i) CHECK(ha.values()[i] == hb.values()[i]);
}

TEST_CASE("permuting channels together with the input projection leaves H unchanged") {
  Rng rng(25);
  EncoderConfig cfg = tiny_config(32, AttentionMode::exact_full);
  EegEpoch e = raw_epoch(cfg.n_channels, cfg.seq_len, 52.0, rng);
  Rng init(9);
  EncoderParams params = init_encoder_params(cfg, init);

  std::vector<std::size_t> perm(cfg.n_channels);
  std::iota(perm.begin(), perm.end(), 0);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.next_below(i)]);

  EegEpoch permuted = e;
  for (std::size_t c = 0; c < cfg.n_channels; ++c)
    for (std::size_t t = 0; t < cfg.seq_len; ++t)
      permuted.samples[c * cfg.seq_len + t] = e.samples[perm[c] * cfg.seq_len + t];
  EncoderParams params2 = params;
  std::vector<double> w = params.embed_w.values();
  std::vector<double> w2(w.size());
  for (std::size_t c = 0; c < cfg.n_channels; ++c)
    for (std::size_t d = 0; d < cfg.d_model; ++d)
      w2[c * cfg.d_model + d] = w[perm[c] * cfg.d_model + d];
  params2.embed_w = Tensor::from_data({cfg.n_channels, cfg.d_model}, w2, true);

  Rng r1(1), r2(1);
  Tensor h1 = encoder_forward(e, cfg, params, r1);
  Tensor h2 = encoder_forward(permuted, cfg, params2, r2);
  for (std::size_t i = 0; i < h1.numel(); ++i)
    CHECK(h1.values()[i] == doctest::Approx(h2.values()[i]).epsilon(1e-9));
}

TEST_CASE("encoder diagnostics record selection of size u per head") {
  Rng rng(26);
  EncoderConfig cfg = tiny_config(64, AttentionMode::probsparse_sampled_measure);
  cfg.n_layers = 2;
  EegEpoch e = raw_epoch(cfg.n_channels, cfg.seq_len, 29.0, rng);
  Rng init(11);
  EncoderParams params = init_encoder_params(cfg, init);
  AttentionDiagnostics diag;
  Rng r(5);
  encoder_forward(e, cfg, params, r, &diag);
  REQUIRE(diag.selected_per_head.size() == cfg.n_layers * cfg.n_heads);
  for (const auto& sel : diag.selected_per_head) {
    CHECK(sel.size() == cfg.top_u());
    CHECK(std::is_sorted(sel.begin(), sel.end()));
    for (std::size_t i = 1; i < sel.size(); ++i) CHECK(sel[i] != sel[i - 1]);
    for (std::size_t i : sel) CHECK(i < cfg.seq_len);
  }
  CHECK(diag.mac_count > 0);
}
