// Copyright 2026 The tp2d Authors.
// SPDX-License-Identifier: Apache-2.0

#include "tp2d/serial.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <fmt/format.h>

#include "tp2d/error.hpp"

namespace tp2d {

namespace {

Matrix add_bias(Matrix x, const Matrix& bias) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += bias(0, c);
  }
  return x;
}

void check_ids(const TokenGrid& t, std::size_t vocab, const char* what) {
  if (t.ids.size() != t.batch * t.seq) throw ShapeError(fmt::format("{}: malformed id grid", what));
  for (auto id : t.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw RangeError(fmt::format("{}: id {} outside [0, {})", what, id, vocab));
    }
  }
}

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// --- layer norm --------------------------------------------------------------

Matrix serial_layernorm_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                                double eps, SerialLayerNormCache* cache) {
  if (gamma.cols() != x.cols() || beta.cols() != x.cols()) {
    throw ShapeError("serial_layernorm_forward: gamma/beta width differs from input");
  }
  const double h = static_cast<double>(x.cols());
  Matrix x_hat(x.rows(), x.cols());
  Matrix rstd(x.rows(), 1);
  Matrix y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mu = 0.0;
    for (double v : x.row(r)) mu += v;
    mu /= h;
    double var = 0.0;
    for (double v : x.row(r)) var += (v - mu) * (v - mu);
    var /= h;
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd(r, 0) = rs;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      x_hat(r, c) = (x(r, c) - mu) * rs;
      y(r, c) = x_hat(r, c) * gamma(0, c) + beta(0, c);
    }
  }
  if (cache != nullptr) *cache = {std::move(x_hat), std::move(rstd), gamma};
  return y;
}

SerialLayerNormGrads serial_layernorm_backward(const Matrix& out_grad,
                                               const SerialLayerNormCache& cache) {
  const Matrix& xh = cache.x_hat;
  if (!out_grad.same_shape(xh)) throw ShapeError("serial_layernorm_backward: shape mismatch");
  const double h = static_cast<double>(xh.cols());
  SerialLayerNormGrads g{Matrix(xh.rows(), xh.cols()), Matrix(1, xh.cols()), Matrix(1, xh.cols())};
  for (std::size_t r = 0; r < xh.rows(); ++r) {
    double mean_g = 0.0, mean_xg = 0.0;
    for (std::size_t c = 0; c < xh.cols(); ++c) {
      const double gv = out_grad(r, c) * cache.gamma(0, c);
      mean_g += gv;
      mean_xg += xh(r, c) * gv;
      g.gamma_grad(0, c) += out_grad(r, c) * xh(r, c);
      g.beta_grad(0, c) += out_grad(r, c);
    }
    mean_g /= h;
    mean_xg /= h;
    for (std::size_t c = 0; c < xh.cols(); ++c) {
      const double gv = out_grad(r, c) * cache.gamma(0, c);
      g.x_grad(r, c) = cache.rstd(r, 0) * (gv - mean_g - xh(r, c) * mean_xg);
    }
  }
  return g;
}

// --- attention ---------------------------------------------------------------

Matrix serial_attention_core(const Matrix& qkv, std::size_t seq, std::size_t heads,
                             std::size_t head_dim, std::vector<Matrix>* probs) {
  const std::size_t width = heads * head_dim;
  if (qkv.cols() != 3 * width || seq == 0 || qkv.rows() % seq != 0) {
    throw ShapeError("serial_attention_core: qkv shape does not match heads/seq");
  }
  const std::size_t seqs = qkv.rows() / seq;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix out(qkv.rows(), width);
  for (std::size_t t = 0; t < seqs; ++t) {
    for (std::size_t k = 0; k < heads; ++k) {
      const Matrix qh = qkv.block(t * seq, k * head_dim, seq, head_dim);
      const Matrix kh = qkv.block(t * seq, width + k * head_dim, seq, head_dim);
      const Matrix vh = qkv.block(t * seq, 2 * width + k * head_dim, seq, head_dim);
      Matrix p = softmax_rows(scaled(matmul(qh, transpose(kh)), scale));
      out.set_block(t * seq, k * head_dim, matmul(p, vh));
      if (probs != nullptr) probs->push_back(std::move(p));
    }
  }
  return out;
}

Matrix serial_attention_core_backward(const Matrix& qkv, const Matrix& out_grad,
                                      const std::vector<Matrix>& probs, std::size_t seq,
                                      std::size_t heads, std::size_t head_dim) {
  const std::size_t width = heads * head_dim;
  const std::size_t seqs = qkv.rows() / seq;
  if (probs.size() != seqs * heads) {
    throw StaleContextError("serial_attention_core_backward: probability count mismatch");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  Matrix grad(qkv.rows(), qkv.cols());
  for (std::size_t t = 0; t < seqs; ++t) {
    for (std::size_t k = 0; k < heads; ++k) {
      const Matrix& p = probs[t * heads + k];
      const Matrix qh = qkv.block(t * seq, k * head_dim, seq, head_dim);
      const Matrix kh = qkv.block(t * seq, width + k * head_dim, seq, head_dim);
      const Matrix vh = qkv.block(t * seq, 2 * width + k * head_dim, seq, head_dim);
      const Matrix dout = out_grad.block(t * seq, k * head_dim, seq, head_dim);
      const Matrix dp = matmul(dout, transpose(vh));
      const Matrix ds = scaled(softmax_rows_backward(p, dp), scale);
      grad.set_block(t * seq, k * head_dim, matmul(ds, kh));
      grad.set_block(t * seq, width + k * head_dim, matmul(transpose(ds), qh));
      grad.set_block(t * seq, 2 * width + k * head_dim, matmul(transpose(p), dout));
    }
  }
  return grad;
}

Matrix serial_attention_forward(const Matrix& x, const LayerWeights& w, std::size_t seq,
                                std::size_t heads, SerialAttentionCache* cache) {
  const std::size_t h = w.w_dense.rows();
  if (heads == 0 || h % heads != 0) throw ConfigError("serial_attention_forward: bad head count");
  Matrix qkv = add_bias(matmul(x, w.w_qkv), w.b_qkv);
  std::vector<Matrix> probs;
  Matrix context = serial_attention_core(qkv, seq, heads, h / heads, &probs);
  Matrix out = add_bias(matmul(context, w.w_dense), w.b_dense);
  if (cache != nullptr) {
    *cache = {x, std::move(qkv), std::move(context), std::move(probs), seq, heads};
  }
  return out;
}

SerialAttentionGrads serial_attention_backward(const Matrix& out_grad,
                                               const SerialAttentionCache& cache,
                                               const LayerWeights& w) {
  const std::size_t h = w.w_dense.rows();
  SerialAttentionGrads g;
  g.b_dense = column_sums(out_grad);
  g.w_dense = matmul(transpose(cache.context), out_grad);
  const Matrix context_grad = matmul(out_grad, transpose(w.w_dense));
  const Matrix qkv_grad = serial_attention_core_backward(cache.qkv, context_grad, cache.probs,
                                                         cache.seq, cache.heads, h / cache.heads);
  g.b_qkv = column_sums(qkv_grad);
  g.w_qkv = matmul(transpose(cache.input), qkv_grad);
  g.x_grad = matmul(qkv_grad, transpose(w.w_qkv));
  return g;
}

// --- MLP ---------------------------------------------------------------------

Matrix serial_mlp_forward(const Matrix& x, const LayerWeights& w, SerialMlpCache* cache,
                          const SerialOptions& opts) {
  Matrix pre = add_bias(matmul(x, w.w_fc1), w.b_fc1);
  Matrix act = opts.identity_activation ? pre : gelu(pre);
  Matrix out = add_bias(matmul(act, w.w_fc2), w.b_fc2);
  if (cache != nullptr) *cache = {x, std::move(pre), std::move(act)};
  return out;
}

SerialMlpGrads serial_mlp_backward(const Matrix& out_grad, const SerialMlpCache& cache,
                                   const LayerWeights& w, const SerialOptions& opts) {
  SerialMlpGrads g;
  g.b_fc2 = column_sums(out_grad);
  g.w_fc2 = matmul(transpose(cache.act), out_grad);
  const Matrix act_grad = matmul(out_grad, transpose(w.w_fc2));
  const Matrix pre_grad = opts.identity_activation ? act_grad : gelu_backward(cache.pre_act, act_grad);
  g.b_fc1 = column_sums(pre_grad);
  g.w_fc1 = matmul(transpose(cache.input), pre_grad);
  g.x_grad = matmul(pre_grad, transpose(w.w_fc1));
  return g;
}

// --- layer -------------------------------------------------------------------

Matrix serial_layer_forward(const Matrix& x, const LayerWeights& w, const ModelConfig& cfg,
                            SerialLayerCache* cache, const SerialOptions& opts) {
  SerialLayerCache local;
  SerialLayerCache& c = cache != nullptr ? *cache : local;
  const Matrix attn_in = serial_layernorm_forward(x, w.ln1_gamma, w.ln1_beta, cfg.eps, &c.ln1);
  const Matrix mid = add(x, serial_attention_forward(attn_in, w, cfg.s, cfg.n, &c.attn));
  const Matrix mlp_in = serial_layernorm_forward(mid, w.ln2_gamma, w.ln2_beta, cfg.eps, &c.ln2);
  return add(mid, serial_mlp_forward(mlp_in, w, &c.mlp, opts));
}

SerialLayerGrads serial_layer_backward(const Matrix& y_grad, const SerialLayerCache& cache,
                                       const LayerWeights& w, const SerialOptions& opts) {
  SerialLayerGrads out;
  LayerWeights& g = out.params;
  SerialMlpGrads mg = serial_mlp_backward(y_grad, cache.mlp, w, opts);
  SerialLayerNormGrads l2 = serial_layernorm_backward(mg.x_grad, cache.ln2);
  const Matrix mid_grad = add(y_grad, l2.x_grad);
  SerialAttentionGrads ag = serial_attention_backward(mid_grad, cache.attn, w);
  SerialLayerNormGrads l1 = serial_layernorm_backward(ag.x_grad, cache.ln1);
  out.x_grad = add(mid_grad, l1.x_grad);

  g.ln1_gamma = std::move(l1.gamma_grad);
  g.ln1_beta = std::move(l1.beta_grad);
  g.w_qkv = std::move(ag.w_qkv);
  g.b_qkv = std::move(ag.b_qkv);
  g.w_dense = std::move(ag.w_dense);
  g.b_dense = std::move(ag.b_dense);
  g.ln2_gamma = std::move(l2.gamma_grad);
  g.ln2_beta = std::move(l2.beta_grad);
  g.w_fc1 = std::move(mg.w_fc1);
  g.b_fc1 = std::move(mg.b_fc1);
  g.w_fc2 = std::move(mg.w_fc2);
  g.b_fc2 = std::move(mg.b_fc2);
  return out;
}

// --- embedding and losses ----------------------------------------------------

Matrix serial_embedding(const TokenGrid& tokens, const Matrix& table) {
  check_ids(tokens, table.rows(), "serial_embedding");
  Matrix out(tokens.ids.size(), table.cols());
  for (std::size_t r = 0; r < tokens.ids.size(); ++r) {
    const auto src = table.row(static_cast<std::size_t>(tokens.ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Matrix serial_embedding_backward(const Matrix& out_grad, const TokenGrid& tokens,
                                 std::size_t vocab) {
  check_ids(tokens, vocab, "serial_embedding_backward");
  Matrix grad(vocab, out_grad.cols());
  for (std::size_t r = 0; r < tokens.ids.size(); ++r) {
    auto dst = grad.row(static_cast<std::size_t>(tokens.ids[r]));
    const auto src = out_grad.row(r);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
  }
  return grad;
}

SerialCrossEntropy serial_cross_entropy(const Matrix& logits, const TokenGrid& labels) {
  check_ids(labels, logits.cols(), "serial_cross_entropy");
  if (labels.ids.size() != logits.rows()) throw ShapeError("serial_cross_entropy: label count");
  SerialCrossEntropy ce;
  ce.probs = softmax_rows(logits);
  ce.token_loss.resize(logits.rows());
  double total = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    double m = logits(r, 0);
    for (double v : logits.row(r)) m = std::max(m, v);
    double se = 0.0;
    for (double v : logits.row(r)) se += std::exp(v - m);
    const double loss = std::log(se) + m - logits(r, static_cast<std::size_t>(labels.ids[r]));
    ce.token_loss[r] = loss;
    total += loss;
  }
  ce.loss = total / static_cast<double>(logits.rows());
  return ce;
}

Matrix serial_cross_entropy_backward(const SerialCrossEntropy& ce, const TokenGrid& labels,
                                     double upstream) {
  Matrix g = ce.probs;
  for (std::size_t r = 0; r < g.rows(); ++r) g(r, static_cast<std::size_t>(labels.ids[r])) -= 1.0;
  g *= upstream / static_cast<double>(g.rows());
  return g;
}

SerialClassifier serial_classifier(const Matrix& x, const Matrix& weight,
                                   std::span<const int> labels, std::size_t position,
                                   std::size_t seq) {
  if (position >= seq) throw RangeError("serial_classifier: position outside the sequence");
  const std::size_t batch = x.rows() / seq;
  if (labels.size() != batch) throw ShapeError("serial_classifier: label count");
  SerialClassifier out;
  out.logits = Matrix(batch, 1);
  double total = 0.0;
  for (std::size_t t = 0; t < batch; ++t) {
    double z = 0.0;
    const auto row = x.row(t * seq + position);
    for (std::size_t c = 0; c < row.size(); ++c) z += row[c] * weight(0, c);
    out.logits(t, 0) = z;
    total += softplus(z) - labels[t] * z;
  }
  out.loss = total / static_cast<double>(batch);
  return out;
}

SerialClassifierGrads serial_classifier_backward(const Matrix& x, const Matrix& weight,
                                                 const SerialClassifier& fwd,
                                                 std::span<const int> labels,
                                                 std::size_t position, std::size_t seq,
                                                 double upstream) {
  const std::size_t batch = x.rows() / seq;
  SerialClassifierGrads g{Matrix(x.rows(), x.cols()), Matrix(1, x.cols())};
  for (std::size_t t = 0; t < batch; ++t) {
    const double dz = (sigmoid(fwd.logits(t, 0)) - labels[t]) * upstream / static_cast<double>(batch);
    const std::size_t r = t * seq + position;
    for (std::size_t c = 0; c < x.cols(); ++c) {
      g.x_grad(r, c) = dz * weight(0, c);
      g.weight_grad(0, c) += dz * x(r, c);
    }
  }
  return g;
}

// --- whole model -------------------------------------------------------------

namespace {

struct FullCache {
  SerialTrace trace;
  std::vector<SerialLayerCache> layers;
  SerialLayerNormCache lnf;
  SerialCrossEntropy ce;
  SerialClassifier cls;
};

FullCache run_forward(const ModelWeights& w, const Batch& batch, const ModelConfig& cfg,
                      const SerialOptions& opts) {
  cfg.validate();
  if (w.layers.size() != cfg.layers) throw ConfigError("serial_forward: layer count mismatch");
  if (batch.tokens.batch != cfg.b || batch.tokens.seq != cfg.s) {
    throw ShapeError("serial_forward: token grid does not match the config");
  }
  FullCache c;
  c.trace.embedded = serial_embedding(batch.tokens, w.embedding);
  c.layers.resize(cfg.layers);
  Matrix x = c.trace.embedded;
  for (std::size_t k = 0; k < cfg.layers; ++k) {
    x = serial_layer_forward(x, w.layers[k], cfg, &c.layers[k], opts);
    c.trace.layer_outputs.push_back(x);
  }
  c.trace.final_hidden = serial_layernorm_forward(x, w.lnf_gamma, w.lnf_beta, cfg.eps, &c.lnf);
  c.trace.logits = matmul(c.trace.final_hidden, transpose(w.embedding));
  c.ce = serial_cross_entropy(c.trace.logits, batch.labels);
  c.trace.lm_loss = c.ce.loss;
  if (batch.has_classification()) {
    c.cls = serial_classifier(c.trace.final_hidden, w.cls_weight, batch.cls_labels,
                              batch.cls_position, cfg.s);
    c.trace.cls_loss = c.cls.loss;
  }
  c.trace.loss = c.trace.lm_loss + c.trace.cls_loss;
  return c;
}

}  // namespace

SerialTrace serial_forward(const ModelWeights& w, const Batch& batch, const ModelConfig& cfg,
                           const SerialOptions& opts) {
  return run_forward(w, batch, cfg, opts).trace;
}

SerialResult serial_loss_and_grads(const ModelWeights& w, const Batch& batch,
                                   const ModelConfig& cfg, const SerialOptions& opts) {
  FullCache c = run_forward(w, batch, cfg, opts);
  SerialResult r;
  r.loss = c.trace.loss;
  r.lm_loss = c.trace.lm_loss;
  r.cls_loss = c.trace.cls_loss;
  r.grads = ModelWeights::zeros(cfg);

  const Matrix logits_grad = serial_cross_entropy_backward(c.ce, batch.labels, 1.0);
  Matrix hidden_grad = matmul(logits_grad, w.embedding);
  Matrix table_grad = matmul(transpose(logits_grad), c.trace.final_hidden);
  if (batch.has_classification()) {
    SerialClassifierGrads cg =
        serial_classifier_backward(c.trace.final_hidden, w.cls_weight, c.cls, batch.cls_labels,
                                   batch.cls_position, cfg.s, 1.0);
    hidden_grad += cg.x_grad;
    r.grads.cls_weight = std::move(cg.weight_grad);
  }
  SerialLayerNormGrads lnf = serial_layernorm_backward(hidden_grad, c.lnf);
  r.grads.lnf_gamma = std::move(lnf.gamma_grad);
  r.grads.lnf_beta = std::move(lnf.beta_grad);
  Matrix x_grad = std::move(lnf.x_grad);
  for (std::size_t k = cfg.layers; k-- > 0;) {
    SerialLayerGrads lg = serial_layer_backward(x_grad, c.layers[k], w.layers[k], opts);
    x_grad = std::move(lg.x_grad);
    r.grads.layers[k] = std::move(lg.params);
  }
  table_grad += serial_embedding_backward(x_grad, batch.tokens, cfg.v);
  r.grads.embedding = std::move(table_grad);
  r.input_grad = std::move(x_grad);
  return r;
}

std::vector<double> finite_diff_grad(const std::function<double()>& loss_fn, Matrix& param,
                                     std::span<const std::size_t> indices, double step) {
  if (!(step > 0.0)) throw DomainError("finite_diff_grad: step must be > 0");
  std::vector<double> out;
  out.reserve(indices.size());
  auto data = param.data();
  for (std::size_t idx : indices) {
    if (idx >= data.size()) throw RangeError(fmt::format("finite_diff_grad: index {}", idx));
    const double saved = data[idx];
    data[idx] = saved + step;
    const double up = loss_fn();
    data[idx] = saved - step;
    const double down = loss_fn();
    data[idx] = saved;
    out.push_back((up - down) / (2.0 * step));
  }
  return out;
}

// --- golden files ------------------------------------------------------------

GoldenRecord make_golden(const ModelConfig& cfg, std::uint64_t seed, const SerialResult& r) {
  GoldenRecord g;
  g.cfg = cfg;
  g.seed = seed;
  g.loss = r.loss;
  ModelWeights::for_each(r.grads, [&](const std::string& name, const Matrix& m) {
    g.grads.push_back({name, sum(m), sum_of_squares(m)});
  });
  return g;
}

void write_golden(const GoldenRecord& g, std::ostream& out) {
  out << fmt::format("tp2d-golden {}\n", g.version);
  out << fmt::format("config {} {} {} {} {} {} {:.17g} {}\n", g.cfg.b, g.cfg.s, g.cfg.h, g.cfg.n,
                     g.cfg.v, g.cfg.layers, g.cfg.eps, g.seed);
  out << fmt::format("loss {:.17g}\n", g.loss);
  for (const auto& t : g.grads) {
    out << fmt::format("grad {} {:.17g} {:.17g}\n", t.name, t.sum, t.sum_of_squares);
  }
}

GoldenRecord read_golden(std::istream& in) {
  GoldenRecord g;
  std::string line;
  auto fail = [](const std::string& why) { throw ConfigError("golden file: " + why); };
  if (!std::getline(in, line)) fail("empty");
  {
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> g.version) || tag != "tp2d-golden") fail("bad header");
    if (g.version != 1) fail(fmt::format("unsupported version {}", g.version));
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "config") {
      if (!(ls >> g.cfg.b >> g.cfg.s >> g.cfg.h >> g.cfg.n >> g.cfg.v >> g.cfg.layers >> g.cfg.eps >>
            g.seed)) {
        fail("bad config line");
      }
    } else if (tag == "loss") {
      if (!(ls >> g.loss)) fail("bad loss line");
    } else if (tag == "grad") {
      TensorChecksum t;
      if (!(ls >> t.name >> t.sum >> t.sum_of_squares)) fail("bad grad line");
      g.grads.push_back(std::move(t));
    } else {
      fail("unknown record '" + tag + "'");
    }
  }
  return g;
}

}  // namespace tp2d
