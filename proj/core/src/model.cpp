#include "evanet/model.hpp"

#include <cmath>
#include <map>

namespace evanet {

void ModelConfig::validate() const {
  encoder.validate();
  if (latent_dim == 0) throw DomainError("ModelConfig: latent_dim must be positive");
  if (age_embed_dim == 0 || age_embed_dim % 2 != 0)
    throw DomainError("ModelConfig: age_embed_dim must be positive and even");
  if (beta < 0.0 || gamma < 0.0) throw DomainError("ModelConfig: beta and gamma must be >= 0");
}

HeadParams init_head_params(std::size_t latent_dim, Rng& rng) {
  auto linear = [&rng](std::size_t fan_in, std::size_t fan_out) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform({fan_in, fan_out}, -bound, bound, rng, true);
  };
  HeadParams p;
  p.w1 = linear(latent_dim, 64);
  p.b1 = Tensor::zeros({64}, true);
  p.w2 = linear(64, 32);
  p.b2 = Tensor::zeros({32}, true);
  p.w3 = linear(32, 1);
  p.b3 = Tensor::zeros({1}, true);
  return p;
}

Tensor predict_head(const Tensor& z, const HeadParams& params) {
  if (z.rank() != 1 || z.dim(0) != params.w1.dim(0))
    throw ShapeError("predict_head: Z must be [" + std::to_string(params.w1.dim(0)) + "], got " +
                     shape_to_string(z.shape()));
  Tensor h1 = relu(add(matmul(z, params.w1), params.b1));
  Tensor h2 = relu(add(matmul(h1, params.w2), params.b2));
  return add(matmul(h2, params.w3), params.b3);
}

EvaNetParams EvaNetParams::init(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  EvaNetParams p;
  p.encoder = init_encoder_params(cfg.encoder, rng);
  p.vib = init_vib_params(cfg.encoder.d_model, cfg.latent_dim, rng);
  p.prototype =
      init_prototype_params(cfg.age_embed_dim, cfg.prototype_hidden, cfg.latent_dim, rng);
  p.head = init_head_params(cfg.latent_dim, rng);
  return p;
}

NamedTensors EvaNetParams::named() const {
  NamedTensors out;
  out.emplace_back("encoder.embed_w", encoder.embed_w);
  for (std::size_t l = 0; l < encoder.layers.size(); ++l) {
    const auto& layer = encoder.layers[l];
    const std::string prefix = "encoder.layer" + std::to_string(l) + ".";
    for (std::size_t h = 0; h < layer.wq.size(); ++h) {
      const std::string hs = std::to_string(h);
      out.emplace_back(prefix + "wq" + hs, layer.wq[h]);
      out.emplace_back(prefix + "wk" + hs, layer.wk[h]);
      out.emplace_back(prefix + "wv" + hs, layer.wv[h]);
    }
    out.emplace_back(prefix + "wo", layer.wo);
    out.emplace_back(prefix + "bo", layer.bo);
    out.emplace_back(prefix + "ln1_gain", layer.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", layer.ln1_bias);
    out.emplace_back(prefix + "ff_w1", layer.ff_w1);
    out.emplace_back(prefix + "ff_b1", layer.ff_b1);
    out.emplace_back(prefix + "ff_w2", layer.ff_w2);
    out.emplace_back(prefix + "ff_b2", layer.ff_b2);
    out.emplace_back(prefix + "ln2_gain", layer.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", layer.ln2_bias);
  }
  out.emplace_back("vib.w_mu", vib.w_mu);
  out.emplace_back("vib.b_mu", vib.b_mu);
  out.emplace_back("vib.w_sigma", vib.w_sigma);
  out.emplace_back("vib.b_sigma", vib.b_sigma);
  out.emplace_back("prototype.w1", prototype.w1);
  out.emplace_back("prototype.b1", prototype.b1);
  out.emplace_back("prototype.w2", prototype.w2);
  out.emplace_back("prototype.b2", prototype.b2);
  out.emplace_back("prototype.w3", prototype.w3);
  out.emplace_back("prototype.b3", prototype.b3);
  out.emplace_back("head.w1", head.w1);
  out.emplace_back("head.b1", head.b1);
  out.emplace_back("head.w2", head.w2);
  out.emplace_back("head.b2", head.b2);
  out.emplace_back("head.w3", head.w3);
  out.emplace_back("head.b3", head.b3);
  return out;
}

std::vector<Tensor> EvaNetParams::all() const {
  std::vector<Tensor> out;
  for (auto& [name, tensor] : named()) {
    (void)name;
    out.push_back(tensor);
  }
  return out;
}

void EvaNetParams::zero_grad() {
  for (auto& t : all()) t.zero_grad();
}

EvaNetParams EvaNetParams::clone() const {
  EvaNetParams copy = *this;
  auto deep = [](Tensor& t) { t = t.detach(t.requires_grad()); };
  deep(copy.encoder.embed_w);
  for (auto& layer : copy.encoder.layers) {
    for (auto& t : layer.wq) deep(t);
    for (auto& t : layer.wk) deep(t);
    for (auto& t : layer.wv) deep(t);
    deep(layer.wo);
    deep(layer.bo);
    deep(layer.ln1_gain);
    deep(layer.ln1_bias);
    deep(layer.ff_w1);
    deep(layer.ff_b1);
    deep(layer.ff_w2);
    deep(layer.ff_b2);
    deep(layer.ln2_gain);
    deep(layer.ln2_bias);
  }
  deep(copy.vib.w_mu);
  deep(copy.vib.b_mu);
  deep(copy.vib.w_sigma);
  deep(copy.vib.b_sigma);
  deep(copy.prototype.w1);
  deep(copy.prototype.b1);
  deep(copy.prototype.w2);
  deep(copy.prototype.b2);
  deep(copy.prototype.w3);
  deep(copy.prototype.b3);
  deep(copy.head.w1);
  deep(copy.head.b1);
  deep(copy.head.w2);
  deep(copy.head.b2);
  deep(copy.head.w3);
  deep(copy.head.b3);
  return copy;
}

void EvaNetParams::load_from(const NamedTensors& tensors) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : tensors) by_name[name] = &tensor;
  NamedTensors mine = named();
  for (auto& [name, tensor] : mine) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ParseError("checkpoint: missing tensor '" + name + "'");
    const Tensor& src = *it->second;
    if (src.shape() != tensor.shape())
      throw ShapeError("checkpoint: tensor '" + name + "' has shape " +
                       shape_to_string(src.shape()) + ", expected " +
                       shape_to_string(tensor.shape()));
    // Handles in named() share storage with this object's parameters.
    tensor.raw_values() = src.values();
  }
}

namespace {

struct SampleLosses {
  Tensor pred;   // (ŷ − y)²
  Tensor ib;     // KL, undefined tensor when unused
  Tensor align;  // ‖Z − P_y‖², undefined tensor when unused
};

SampleLosses sample_forward(const EegEpoch& epoch, const EvaNetParams& params,
                            const ModelConfig& cfg, Rng& rng, bool sample_latent) {
  Tensor h = encoder_forward(epoch, cfg.encoder, params.encoder, rng);
  auto [mu, log_var] = vib_heads(h, params.vib);
  Tensor z = (cfg.no_vib || !sample_latent) ? mu : reparameterize(mu, log_var, rng);
  Tensor y_hat = predict_head(z, params.head);
  SampleLosses out;
  out.pred = square(sub(y_hat, Tensor::scalar(epoch.age)));
  if (!cfg.no_vib) out.ib = kl_loss(mu, log_var);
  if (!cfg.no_align) {
    Tensor p_y = prototype_forward(embed_age(epoch.age, cfg.age_embed_dim), params.prototype);
    out.align = align_loss(z, p_y);
  }
  return out;
}

}  // namespace

LossBreakdown forward_train(const std::vector<const EegEpoch*>& batch, EvaNetParams& params,
                            const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  if (batch.empty()) throw DomainError("forward_train: empty batch");
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  double sum_pred = 0.0, sum_ib = 0.0, sum_align = 0.0;
  for (const EegEpoch* epoch : batch) {
    SampleLosses losses = sample_forward(*epoch, params, cfg, rng, /*sample_latent=*/true);
    Tensor total = losses.pred;
    sum_pred += losses.pred.item();
    if (losses.ib.defined()) {
      sum_ib += losses.ib.item();
      if (cfg.beta != 0.0) total = add(total, scale(losses.ib, cfg.beta));
    }
    if (losses.align.defined()) {
      sum_align += losses.align.item();
      if (cfg.gamma != 0.0) total = add(total, scale(losses.align, cfg.gamma));
    }
    scale(total, inv_n).backward();
  }

  LossBreakdown breakdown;
  breakdown.beta = cfg.no_vib ? 0.0 : cfg.beta;
  breakdown.gamma = cfg.no_align ? 0.0 : cfg.gamma;
  breakdown.l_pred = sum_pred * inv_n;
  breakdown.l_ib = sum_ib * inv_n;
  breakdown.l_align = sum_align * inv_n;
  breakdown.l_total =
      breakdown.l_pred + breakdown.beta * breakdown.l_ib + breakdown.gamma * breakdown.l_align;
  return breakdown;
}

EvalOutput forward_eval(const EegEpoch& epoch, const EvaNetParams& params,
                        const ModelConfig& cfg) {
  cfg.validate();
  NoGradGuard no_grad;
  // Fixed stream: evaluation is deterministic even in sampled-measure mode.
  Rng rng = Rng::derive(0x45564145u /* "EVAE" */, 1);
  Tensor h = encoder_forward(epoch, cfg.encoder, params.encoder, rng);
  auto [mu, log_var] = vib_heads(h, params.vib);
  (void)log_var;
  EvalOutput out;
  out.z = mu.detach();
  out.predicted_age = predict_head(mu, params.head).item();
  if (!cfg.no_align) {
    out.p_y =
        prototype_forward(embed_age(epoch.age, cfg.age_embed_dim), params.prototype).detach();
  }
  return out;
}

}  // namespace evanet
