#include "caft/model/layers.hpp"

#include "caft/engine/ops.hpp"

namespace caft::model {

namespace ops = caft::engine;

Tensor Linear::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor y = ops::add(ops::matmul(x, weight), bias);
  if (!lora) return y;
  Tensor xin = x;
  if (ctx.training && ctx.rng != nullptr && lora->dropout > 0.0) xin = ops::dropout(x, lora->dropout, *ctx.rng);
  Tensor delta = ops::matmul(ops::matmul(xin, lora->a), lora->b);
  return ops::add(y, ops::scale(delta, lora->scale()));
}

void Linear::visit(const std::string& prefix, const ParameterVisitor& fn) {
  fn(prefix + ".weight", weight);
  fn(prefix + ".bias", bias);
  if (lora) {
    fn(prefix + ".lora_a", lora->a);
    fn(prefix + ".lora_b", lora->b);
  }
}

Linear Linear::clone() const {
  Linear out{weight.clone(), bias.clone(), std::nullopt};
  if (lora) out.lora = LoraAdapter{lora->a.clone(), lora->b.clone(), lora->rank, lora->alpha, lora->dropout};
  return out;
}

Tensor LayerNormParams::forward(const Tensor& x) const { return ops::layer_norm(x, gain, bias); }

void LayerNormParams::visit(const std::string& prefix, const ParameterVisitor& fn) {
  fn(prefix + ".gain", gain);
  fn(prefix + ".bias", bias);
}

LayerNormParams LayerNormParams::clone() const { return {gain.clone(), bias.clone()}; }

Tensor TransformerBlock::forward(const Tensor& x, const ForwardContext& ctx) const {
  Tensor attn = ops::causal_self_attention(qkv.forward(ln1.forward(x), ctx), n_heads);
  Tensor h = ops::add(x, attn_out.forward(attn, ctx));
  Tensor mlp = proj.forward(ops::gelu(fc.forward(ln2.forward(h), ctx)), ctx);
  return ops::add(h, mlp);
}

void TransformerBlock::visit(const std::string& prefix, const ParameterVisitor& fn) {
  ln1.visit(prefix + ".ln1", fn);
  qkv.visit(prefix + ".attn.qkv", fn);
  attn_out.visit(prefix + ".attn.out", fn);
  ln2.visit(prefix + ".ln2", fn);
  fc.visit(prefix + ".mlp.fc", fn);
  proj.visit(prefix + ".mlp.proj", fn);
}

void TransformerBlock::visit_linears(const std::string& prefix,
                                     const std::function<void(const std::string&, Linear&)>& fn) {
  fn(prefix + ".attn.qkv", qkv);
  fn(prefix + ".attn.out", attn_out);
  fn(prefix + ".mlp.fc", fc);
  fn(prefix + ".mlp.proj", proj);
}

TransformerBlock TransformerBlock::clone() const {
  return {ln1.clone(), qkv.clone(), attn_out.clone(), ln2.clone(), fc.clone(), proj.clone(), n_heads};
}

Tensor HeadBlock::forward(const Tensor& z, const ForwardContext& ctx) const {
  return ln_f.forward(block.forward(z, ctx));
}

void HeadBlock::visit(const std::string& prefix, const ParameterVisitor& fn) {
  block.visit(prefix, fn);
  ln_f.visit(prefix + ".ln_f", fn);
}

HeadBlock HeadBlock::clone() const { return {block.clone(), ln_f.clone()}; }

LayerNormParams make_layer_norm(std::size_t width) {
  return {Tensor::full({width}, 1.0), Tensor::zeros({width})};
}

Linear make_linear(std::size_t in, std::size_t out, double stddev, std::mt19937_64& rng) {
  return {Tensor::randn({in, out}, stddev, rng), Tensor::zeros({out}), std::nullopt};
}

TransformerBlock make_block(std::size_t d_model, std::size_t n_heads, std::size_t ffn_width, double stddev,
                            double proj_stddev, std::mt19937_64& rng) {
  TransformerBlock b;
  b.n_heads = n_heads;
  b.ln1 = make_layer_norm(d_model);
  b.qkv = make_linear(d_model, 3 * d_model, stddev, rng);
  b.attn_out = make_linear(d_model, d_model, proj_stddev, rng);
  b.ln2 = make_layer_norm(d_model);
  b.fc = make_linear(d_model, ffn_width, stddev, rng);
  b.proj = make_linear(ffn_width, d_model, proj_stddev, rng);
  return b;
}

}  // namespace caft::model
