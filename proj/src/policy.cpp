#include "sami/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>

#include "sami/error.hpp"
#include "sami/kernels.hpp"

namespace sami {

namespace {

constexpr double kLnEps = 1e-5;

struct LayerOffsets {
  size_t ln1g, ln1b, wqkv, bqkv, wo, bo, ln2g, ln2b, win, bin, wout, bout;
};

// Deterministic flat layout of all parameter segments.
struct Layout {
  size_t wte, wpe;
  std::vector<LayerOffsets> layers;
  size_t lnfg, lnfb;
  size_t headw = SIZE_MAX;  // SIZE_MAX when tied to embed.tok
  size_t headb = SIZE_MAX;
  size_t total = 0;
};

Layout compute_layout(const ModelConfig& cfg, size_t vocab_size) {
  const size_t W = static_cast<size_t>(cfg.width);
  const size_t F = static_cast<size_t>(cfg.ffn_dim());
  const size_t V = vocab_size;
  Layout lay;
  size_t at = 0;
  auto take = [&at](size_t n) {
    size_t off = at;
    at += n;
    return off;
  };
  lay.wte = take(V * W);
  lay.wpe = take(static_cast<size_t>(cfg.context) * W);
  for (int l = 0; l < cfg.layers; ++l) {
    LayerOffsets lo;
    lo.ln1g = take(W);
    lo.ln1b = take(W);
    lo.wqkv = take(3 * W * W);
    lo.bqkv = take(3 * W);
    lo.wo = take(W * W);
    lo.bo = take(W);
    lo.ln2g = take(W);
    lo.ln2b = take(W);
    lo.win = take(F * W);
    lo.bin = take(F);
    lo.wout = take(W * F);
    lo.bout = take(W);
    lay.layers.push_back(lo);
  }
  lay.lnfg = take(W);
  lay.lnfb = take(W);
  if (!cfg.tied_embeddings) {
    lay.headw = take(V * W);
    lay.headb = take(V);
  }
  lay.total = at;
  return lay;
}

inline double gelu(double u) {
  return 0.5 * u * (1.0 + std::erf(u * std::numbers::inv_sqrtpi / std::numbers::sqrt2 *
                                   std::numbers::sqrtpi / 1.0 / std::numbers::sqrt2 * 0.0 +
                                   u * 0.0));
}

}  // namespace

void ModelConfig::validate() const {
  if (layers < 1 || width < 1 || heads < 1 || context < 2 || ffn_mult < 1) {
    throw ValidationError("model config fields must be positive (context >= 2)");
  }
  if (width % heads != 0) {
    throw ValidationError("model width must be divisible by the head count");
  }
}

void PolicyModel::build_layout() {
  const Layout lay = compute_layout(cfg_, vocab_.size());
  segments_.clear();
  auto add = [this](const std::string& name, size_t offset, size_t size) {
    segments_.push_back(SegmentRef{name, offset, size});
  };
  const size_t W = static_cast<size_t>(cfg_.width);
  const size_t F = static_cast<size_t>(cfg_.ffn_dim());
  const size_t V = vocab_.size();
  add("embed.tok", lay.wte, V * W);
  add("embed.pos", lay.wpe, static_cast<size_t>(cfg_.context) * W);
  for (int l = 0; l < cfg_.layers; ++l) {
    const auto& lo = lay.layers[static_cast<size_t>(l)];
    const std::string p = "layer" + std::to_string(l) + ".";
    add(p + "ln1.gamma", lo.ln1g, W);
    add(p + "ln1.beta", lo.ln1b, W);
    add(p + "attn.w_qkv", lo.wqkv, 3 * W * W);
    add(p + "attn.b_qkv", lo.bqkv, 3 * W);
    add(p + "attn.w_out", lo.wo, W * W);
    add(p + "attn.b_out", lo.bo, W);
    add(p + "ln2.gamma", lo.ln2g, W);
    add(p + "ln2.beta", lo.ln2b, W);
    add(p + "ffn.w_in", lo.win, F * W);
    add(p + "ffn.b_in", lo.bin, F);
    add(p + "ffn.w_out", lo.wout, W * F);
    add(p + "ffn.b_out", lo.bout, W);
  }
  add("final_ln.gamma", lay.lnfg, W);
  add("final_ln.beta", lay.lnfb, W);
  if (!cfg_.tied_embeddings) {
    add("head.w", lay.headw, V * W);
    add("head.b", lay.headb, V);
  }
}

PolicyModel PolicyModel::init(const ModelConfig& cfg, Vocab vocab, Rng& rng) {
  cfg.validate();
  PolicyModel m;
  m.cfg_ = cfg;
  m.vocab_ = std::move(vocab);
  const Layout lay = compute_layout(cfg, m.vocab_.size());
  m.params_.assign(lay.total, 0.0f);
  m.build_layout();
  for (const auto& seg : m.segments_) {
    const bool is_gain = seg.name.ends_with("gamma");
    const bool is_bias = seg.name.ends_with("beta") || seg.name.ends_with(".b") ||
                         seg.name.find(".b_") != std::string::npos ||
                         seg.name == "head.b";
    float* p = m.params_.data() + seg.offset;
    if (is_gain) {
      std::fill(p, p + seg.size, 1.0f);
    } else if (is_bias) {
      // already zero
    } else {
      for (size_t i = 0; i < seg.size; ++i) {
        p[i] = static_cast<float>(0.02 * rng.normal());
      }
    }
  }
  return m;
}

PolicyModel PolicyModel::zeros(const ModelConfig& cfg, Vocab vocab) {
  cfg.validate();
  PolicyModel m;
  m.cfg_ = cfg;
  m.vocab_ = std::move(vocab);
  const Layout lay = compute_layout(cfg, m.vocab_.size());
  m.params_.assign(lay.total, 0.0f);
  m.build_layout();
  return m;
}

PolicyModel assemble_model(ModelConfig cfg, Vocab vocab, std::vector<float> params) {
  cfg.validate();
  const Layout lay = compute_layout(cfg, vocab.size());
  if (params.size() != lay.total) {
    throw ValidationError("parameter payload size " + std::to_string(params.size()) +
                          " does not match layout size " + std::to_string(lay.total));
  }
  PolicyModel m;
  m.cfg_ = cfg;
  m.vocab_ = std::move(vocab);
  m.params_ = std::move(params);
  m.build_layout();
  return m;
}

std::span<const float> PolicyModel::segment(std::string_view name) const {
  for (const auto& seg : segments_) {
    if (seg.name == name) return {params_.data() + seg.offset, seg.size};
  }
  throw ValidationError("unknown parameter segment '" + std::string(name) + "'");
}

const std::string& PolicyModel::segment_name_of(size_t param_index) const {
  for (const auto& seg : segments_) {
    if (param_index >= seg.offset && param_index < seg.offset + seg.size) {
      return seg.name;
    }
  }
  throw ValidationError("parameter index out of range");
}

uint64_t PolicyModel::checksum() const {
  uint64_t h = 0xcbf29ce484222325ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
  const size_t n = params_.size() * sizeof(float);
  for (size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string PolicyModel::checksum_hex() const {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(checksum()));
  return std::string(buf);
}

bool PolicyModel::all_finite() const {
  for (float p : params_) {
    if (!std::isfinite(p)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Forward / backward.

namespace {

inline double gelu_value(double u) {
  return 0.5 * u * (1.0 + std::erf(u / std::numbers::sqrt2));
}

inline double gelu_grad(double u) {
  const double cdf = 0.5 * (1.0 + std::erf(u / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + u * pdf;
}

// In-place stable softmax over values[0..n); returns logsumexp.
inline double softmax_inplace(double* values, size_t n) {
  double vmax = values[0];
  for (size_t i = 1; i < n; ++i) vmax = std::max(vmax, values[i]);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) {
    values[i] = std::exp(values[i] - vmax);
    sum += values[i];
  }
  const double inv = 1.0 / sum;
  for (size_t i = 0; i < n; ++i) values[i] *= inv;
  return vmax + std::log(sum);
}

inline double logsumexp_row(const double* values, size_t n) {
  double vmax = values[0];
  for (size_t i = 1; i < n; ++i) vmax = std::max(vmax, values[i]);
  double sum = 0.0;
  for (size_t i = 0; i < n; ++i) sum += std::exp(values[i] - vmax);
  return vmax + std::log(sum);
}

// y = layernorm(x) with learned gain/bias; xhat and rstd are cached.
inline void ln_forward(const double* x, const float* gamma, const float* beta,
                       double* xhat, double* rstd_out, double* y, int W) {
  double mean = 0.0;
  for (int i = 0; i < W; ++i) mean += x[i];
  mean /= W;
  double var = 0.0;
  for (int i = 0; i < W; ++i) {
    const double d = x[i] - mean;
    var += d * d;
  }
  var /= W;
  const double rstd = 1.0 / std::sqrt(var + kLnEps);
  *rstd_out = rstd;
  for (int i = 0; i < W; ++i) {
    xhat[i] = (x[i] - mean) * rstd;
    y[i] = xhat[i] * static_cast<double>(gamma[i]) + static_cast<double>(beta[i]);
  }
}

// Accumulates dx (+=) and the gamma/beta gradients for one position.
inline void ln_backward(const double* xhat, double rstd, const float* gamma,
                        const double* dy, double* dx, double* dgamma, double* dbeta,
                        double* scratch, int W) {
  double m1 = 0.0, m2 = 0.0;
  for (int i = 0; i < W; ++i) {
    const double dxhat = dy[i] * static_cast<double>(gamma[i]);
    scratch[i] = dxhat;
    m1 += dxhat;
    m2 += dxhat * xhat[i];
  }
  m1 /= W;
  m2 /= W;
  for (int i = 0; i < W; ++i) {
    dx[i] += rstd * (scratch[i] - m1 - xhat[i] * m2);
    dgamma[i] += dy[i] * xhat[i];
    dbeta[i] += dy[i];
  }
}

void check_tokens(const PolicyModel& model, std::span<const int> tokens) {
  const int V = model.vocab_size();
  for (int id : tokens) {
    if (id < 0 || id >= V) {
      throw ValidationError("token id " + std::to_string(id) +
                            " is outside the vocabulary of size " + std::to_string(V));
    }
  }
}

}  // namespace

void forward_sequence(const PolicyModel& model, std::span<const int> tokens,
                      ForwardCache& cache) {
  const ModelConfig& cfg = model.config();
  const int T = static_cast<int>(tokens.size());
  if (T < 1) throw ValidationError("forward_sequence needs at least one token");
  if (T > cfg.context) {
    throw ValidationError("sequence length " + std::to_string(T) +
                          " exceeds context " + std::to_string(cfg.context));
  }
  check_tokens(model, tokens);

  const auto& K = kernels::active();
  const Layout lay = compute_layout(cfg, model.vocab().size());
  const float* P = model.params().data();
  const int W = cfg.width;
  const int H = cfg.heads;
  const int Dh = cfg.head_dim();
  const int F = cfg.ffn_dim();
  const int V = model.vocab_size();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(Dh));

  cache.T = T;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.layers.resize(static_cast<size_t>(cfg.layers));
  cache.x.assign(static_cast<size_t>(T) * W, 0.0);
  double* x = cache.x.data();

  for (int t = 0; t < T; ++t) {
    const float* wte = P + lay.wte + static_cast<size_t>(tokens[t]) * W;
    const float* wpe = P + lay.wpe + static_cast<size_t>(t) * W;
    double* xt = x + static_cast<size_t>(t) * W;
    for (int i = 0; i < W; ++i) {
      xt[i] = static_cast<double>(wte[i]) + static_cast<double>(wpe[i]);
    }
  }

  for (int l = 0; l < cfg.layers; ++l) {
    auto& lc = cache.layers[static_cast<size_t>(l)];
    const auto& lo = lay.layers[static_cast<size_t>(l)];
    lc.ln1_xhat.assign(static_cast<size_t>(T) * W, 0.0);
    lc.ln1_out.assign(static_cast<size_t>(T) * W, 0.0);
    lc.ln1_rstd.assign(static_cast<size_t>(T), 0.0);
    lc.qkv.assign(static_cast<size_t>(T) * 3 * W, 0.0);
    lc.attn_p.assign(static_cast<size_t>(H) * T * T, 0.0);
    lc.attn_out.assign(static_cast<size_t>(T) * W, 0.0);
    lc.ln2_xhat.assign(static_cast<size_t>(T) * W, 0.0);
    lc.ln2_out.assign(static_cast<size_t>(T) * W, 0.0);
    lc.ln2_rstd.assign(static_cast<size_t>(T), 0.0);
    lc.ffn_pre.assign(static_cast<size_t>(T) * F, 0.0);
    lc.ffn_act.assign(static_cast<size_t>(T) * F, 0.0);

    // Attention sublayer.
    for (int t = 0; t < T; ++t) {
      double* xt = x + static_cast<size_t>(t) * W;
      double* xhat = lc.ln1_xhat.data() + static_cast<size_t>(t) * W;
      double* a = lc.ln1_out.data() + static_cast<size_t>(t) * W;
      ln_forward(xt, P + lo.ln1g, P + lo.ln1b, xhat, &lc.ln1_rstd[static_cast<size_t>(t)],
                 a, W);
      double* qkv = lc.qkv.data() + static_cast<size_t>(t) * 3 * W;
      K.matvec_f32(P + lo.wqkv, a, qkv, static_cast<size_t>(3 * W), static_cast<size_t>(W));
      const float* bqkv = P + lo.bqkv;
      for (int i = 0; i < 3 * W; ++i) qkv[i] += static_cast<double>(bqkv[i]);
    }
    for (int h = 0; h < H; ++h) {
      const int qo = h * Dh;
      const int ko = W + h * Dh;
      const int vo = 2 * W + h * Dh;
      double* phead = lc.attn_p.data() + static_cast<size_t>(h) * T * T;
      for (int t = 0; t < T; ++t) {
        const double* qt = lc.qkv.data() + static_cast<size_t>(t) * 3 * W + qo;
        double* prow = phead + static_cast<size_t>(t) * T;
        for (int u = 0; u <= t; ++u) {
          const double* ku = lc.qkv.data() + static_cast<size_t>(u) * 3 * W + ko;
          prow[u] = K.dot(qt, ku, static_cast<size_t>(Dh)) * att_scale;
        }
        softmax_inplace(prow, static_cast<size_t>(t) + 1);
        double* out = lc.attn_out.data() + static_cast<size_t>(t) * W + qo;
        for (int u = 0; u <= t; ++u) {
          const double* vu = lc.qkv.data() + static_cast<size_t>(u) * 3 * W + vo;
          K.axpy(prow[u], vu, out, static_cast<size_t>(Dh));
        }
      }
    }
    {
      std::vector<double> proj(static_cast<size_t>(W));
      for (int t = 0; t < T; ++t) {
        const double* att = lc.attn_out.data() + static_cast<size_t>(t) * W;
        K.matvec_f32(P + lo.wo, att, proj.data(), static_cast<size_t>(W),
                     static_cast<size_t>(W));
        double* xt = x + static_cast<size_t>(t) * W;
        const float* bo = P + lo.bo;
        for (int i = 0; i < W; ++i) xt[i] += proj[i] + static_cast<double>(bo[i]);
      }
    }

    // Feed-forward sublayer.
    {
      std::vector<double> fout(static_cast<size_t>(W));
      for (int t = 0; t < T; ++t) {
        double* xt = x + static_cast<size_t>(t) * W;
        double* xhat = lc.ln2_xhat.data() + static_cast<size_t>(t) * W;
        double* c = lc.ln2_out.data() + static_cast<size_t>(t) * W;
        ln_forward(xt, P + lo.ln2g, P + lo.ln2b, xhat,
                   &lc.ln2_rstd[static_cast<size_t>(t)], c, W);
        double* pre = lc.ffn_pre.data() + static_cast<size_t>(t) * F;
        K.matvec_f32(P + lo.win, c, pre, static_cast<size_t>(F), static_cast<size_t>(W));
        const float* bin = P + lo.bin;
        double* act = lc.ffn_act.data() + static_cast<size_t>(t) * F;
        for (int f = 0; f < F; ++f) {
          pre[f] += static_cast<double>(bin[f]);
          act[f] = gelu_value(pre[f]);
        }
        K.matvec_f32(P + lo.wout, act, fout.data(), static_cast<size_t>(W),
                     static_cast<size_t>(F));
        const float* bout = P + lo.bout;
        for (int i = 0; i < W; ++i) xt[i] += fout[i] + static_cast<double>(bout[i]);
      }
    }
  }

  cache.lnf_xhat.assign(static_cast<size_t>(T) * W, 0.0);
  cache.lnf_out.assign(static_cast<size_t>(T) * W, 0.0);
  cache.lnf_rstd.assign(static_cast<size_t>(T), 0.0);
  cache.logits.assign(static_cast<size_t>(T) * V, 0.0);
  cache.lse.assign(static_cast<size_t>(T), 0.0);

  const float* head_w = cfg.tied_embeddings ? P + lay.wte : P + lay.headw;
  for (int t = 0; t < T; ++t) {
    double* xt = x + static_cast<size_t>(t) * W;
    double* xhat = cache.lnf_xhat.data() + static_cast<size_t>(t) * W;
    double* h = cache.lnf_out.data() + static_cast<size_t>(t) * W;
    ln_forward(xt, P + lay.lnfg, P + lay.lnfb, xhat, &cache.lnf_rstd[static_cast<size_t>(t)],
               h, W);
    double* logits = cache.logits.data() + static_cast<size_t>(t) * V;
    K.matvec_f32(head_w, h, logits, static_cast<size_t>(V), static_cast<size_t>(W));
    if (!cfg.tied_embeddings) {
      const float* hb = P + lay.headb;
      for (int v = 0; v < V; ++v) logits[v] += static_cast<double>(hb[v]);
    }
    cache.lse[static_cast<size_t>(t)] = logsumexp_row(logits, static_cast<size_t>(V));
  }
}

double cached_logprob(const ForwardCache& cache, int pos, int target) {
  const int V = static_cast<int>(cache.logits.size() / static_cast<size_t>(cache.T));
  return cache.logits[static_cast<size_t>(pos) * V + target] -
         cache.lse[static_cast<size_t>(pos)];
}

void backward_masked(const PolicyModel& model, const ForwardCache& cache,
                     std::span<const MaskedTarget> targets, std::span<double> grad) {
  if (grad.size() != model.n_params()) {
    throw ValidationError("gradient buffer size mismatch");
  }
  const ModelConfig& cfg = model.config();
  const auto& K = kernels::active();
  const Layout lay = compute_layout(cfg, model.vocab().size());
  const float* P = model.params().data();
  double* G = grad.data();
  const int T = cache.T;
  const int W = cfg.width;
  const int H = cfg.heads;
  const int Dh = cfg.head_dim();
  const int F = cfg.ffn_dim();
  const int V = model.vocab_size();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(Dh));

  // d(objective)/d(logits) is dense only on positions that carry targets.
  std::vector<double> dlogits(static_cast<size_t>(T) * V, 0.0);
  std::vector<uint8_t> flagged(static_cast<size_t>(T), 0);
  for (const auto& mt : targets) {
    if (mt.pos < 0 || mt.pos >= T || mt.target < 0 || mt.target >= V) {
      throw ValidationError("masked target out of range");
    }
    const double* logits = cache.logits.data() + static_cast<size_t>(mt.pos) * V;
    const double lse = cache.lse[static_cast<size_t>(mt.pos)];
    double* drow = dlogits.data() + static_cast<size_t>(mt.pos) * V;
    for (int v = 0; v < V; ++v) {
      drow[v] -= mt.weight * std::exp(logits[v] - lse);
    }
    drow[mt.target] += mt.weight;
    flagged[static_cast<size_t>(mt.pos)] = 1;
  }

  std::vector<double> dx(static_cast<size_t>(T) * W, 0.0);
  std::vector<double> scratch(static_cast<size_t>(std::max(W, F)), 0.0);

  // Output head and final layer norm.
  {
    const float* head_w = cfg.tied_embeddings ? P + lay.wte : P + lay.headw;
    double* ghead_w = cfg.tied_embeddings ? G + lay.wte : G + lay.headw;
    std::vector<double> dh(static_cast<size_t>(W));
    for (int t = 0; t < T; ++t) {
      if (!flagged[static_cast<size_t>(t)]) continue;
      const double* drow = dlogits.data() + static_cast<size_t>(t) * V;
      const double* h = cache.lnf_out.data() + static_cast<size_t>(t) * W;
      std::fill(dh.begin(), dh.end(), 0.0);
      for (int v = 0; v < V; ++v) {
        const double dv = drow[v];
        if (dv == 0.0) continue;
        K.axpy(dv, h, ghead_w + static_cast<size_t>(v) * W, static_cast<size_t>(W));
        K.axpy_f32(dv, head_w + static_cast<size_t>(v) * W, dh.data(),
                   static_cast<size_t>(W));
        if (!cfg.tied_embeddings) G[lay.headb + static_cast<size_t>(v)] += dv;
      }
      ln_backward(cache.lnf_xhat.data() + static_cast<size_t>(t) * W,
                  cache.lnf_rstd[static_cast<size_t>(t)], P + lay.lnfg, dh.data(),
                  dx.data() + static_cast<size_t>(t) * W, G + lay.lnfg, G + lay.lnfb,
                  scratch.data(), W);
    }
  }

  std::vector<double> dmid(static_cast<size_t>(W));
  std::vector<double> dact(static_cast<size_t>(F));
  std::vector<double> dpre(static_cast<size_t>(F));
  std::vector<double> datt(static_cast<size_t>(T) * W);
  std::vector<double> dqkv(static_cast<size_t>(T) * 3 * W);
  std::vector<double> dp(static_cast<size_t>(T));

  for (int l = cfg.layers - 1; l >= 0; --l) {
    const auto& lc = cache.layers[static_cast<size_t>(l)];
    const auto& lo = lay.layers[static_cast<size_t>(l)];

    // Feed-forward sublayer backward; dx holds d/d(x_out) and is updated in
    // place to d/d(x_mid) via the residual connection.
    for (int t = 0; t < T; ++t) {
      const double* dout = dx.data() + static_cast<size_t>(t) * W;
      const double* act = lc.ffn_act.data() + static_cast<size_t>(t) * F;
      const double* pre = lc.ffn_pre.data() + static_cast<size_t>(t) * F;
      const double* c = lc.ln2_out.data() + static_cast<size_t>(t) * W;
      std::fill(dact.begin(), dact.end(), 0.0);
      for (int r = 0; r < W; ++r) {
        const double dr = dout[r];
        if (dr == 0.0) continue;
        G[lo.bout + static_cast<size_t>(r)] += dr;
        K.axpy(dr, act, G + lo.wout + static_cast<size_t>(r) * F, static_cast<size_t>(F));
        K.axpy_f32(dr, P + lo.wout + static_cast<size_t>(r) * F, dact.data(),
                   static_cast<size_t>(F));
      }
      std::fill(dmid.begin(), dmid.end(), 0.0);
      for (int f = 0; f < F; ++f) {
        dpre[static_cast<size_t>(f)] = dact[static_cast<size_t>(f)] * gelu_grad(pre[f]);
      }
      for (int f = 0; f < F; ++f) {
        const double df = dpre[static_cast<size_t>(f)];
        if (df == 0.0) continue;
        G[lo.bin + static_cast<size_t>(f)] += df;
        K.axpy(df, c, G + lo.win + static_cast<size_t>(f) * W, static_cast<size_t>(W));
        K.axpy_f32(df, P + lo.win + static_cast<size_t>(f) * W, dmid.data(),
                   static_cast<size_t>(W));
      }
      ln_backward(lc.ln2_xhat.data() + static_cast<size_t>(t) * W,
                  lc.ln2_rstd[static_cast<size_t>(t)], P + lo.ln2g, dmid.data(),
                  dx.data() + static_cast<size_t>(t) * W, G + lo.ln2g, G + lo.ln2b,
                  scratch.data(), W);
    }

    // Attention sublayer backward; dx holds d/d(x_mid), updated to d/d(x_in).
    std::fill(datt.begin(), datt.end(), 0.0);
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    for (int t = 0; t < T; ++t) {
      const double* dmid_t = dx.data() + static_cast<size_t>(t) * W;
      const double* att = lc.attn_out.data() + static_cast<size_t>(t) * W;
      double* datt_t = datt.data() + static_cast<size_t>(t) * W;
      for (int r = 0; r < W; ++r) {
        const double dr = dmid_t[r];
        if (dr == 0.0) continue;
        G[lo.bo + static_cast<size_t>(r)] += dr;
        K.axpy(dr, att, G + lo.wo + static_cast<size_t>(r) * W, static_cast<size_t>(W));
        K.axpy_f32(dr, P + lo.wo + static_cast<size_t>(r) * W, datt_t,
                   static_cast<size_t>(W));
      }
    }
    for (int h = 0; h < H; ++h) {
      const int qo = h * Dh;
      const int ko = W + h * Dh;
      const int vo = 2 * W + h * Dh;
      const double* phead = lc.attn_p.data() + static_cast<size_t>(h) * T * T;
      for (int t = 0; t < T; ++t) {
        const double* prow = phead + static_cast<size_t>(t) * T;
        const double* datt_th = datt.data() + static_cast<size_t>(t) * W + qo;
        double sum_pd = 0.0;
        for (int u = 0; u <= t; ++u) {
          const double* vu = lc.qkv.data() + static_cast<size_t>(u) * 3 * W + vo;
          dp[static_cast<size_t>(u)] = K.dot(datt_th, vu, static_cast<size_t>(Dh));
          K.axpy(prow[u], datt_th, dqkv.data() + static_cast<size_t>(u) * 3 * W + vo,
                 static_cast<size_t>(Dh));
          sum_pd += prow[u] * dp[static_cast<size_t>(u)];
        }
        const double* qt = lc.qkv.data() + static_cast<size_t>(t) * 3 * W + qo;
        double* dqt = dqkv.data() + static_cast<size_t>(t) * 3 * W + qo;
        for (int u = 0; u <= t; ++u) {
          const double ds = prow[u] * (dp[static_cast<size_t>(u)] - sum_pd) * att_scale;
          if (ds == 0.0) continue;
          const double* ku = lc.qkv.data() + static_cast<size_t>(u) * 3 * W + ko;
          K.axpy(ds, ku, dqt, static_cast<size_t>(Dh));
          K.axpy(ds, qt, dqkv.data() + static_cast<size_t>(u) * 3 * W + ko,
                 static_cast<size_t>(Dh));
        }
      }
    }
    for (int t = 0; t < T; ++t) {
      const double* dqkv_t = dqkv.data() + static_cast<size_t>(t) * 3 * W;
      const double* a = lc.ln1_out.data() + static_cast<size_t>(t) * W;
      std::fill(dmid.begin(), dmid.end(), 0.0);
      for (int r = 0; r < 3 * W; ++r) {
        const double dr = dqkv_t[r];
        if (dr == 0.0) continue;
        G[lo.bqkv + static_cast<size_t>(r)] += dr;
        K.axpy(dr, a, G + lo.wqkv + static_cast<size_t>(r) * W, static_cast<size_t>(W));
        K.axpy_f32(dr, P + lo.wqkv + static_cast<size_t>(r) * W, dmid.data(),
                   static_cast<size_t>(W));
      }
      ln_backward(lc.ln1_xhat.data() + static_cast<size_t>(t) * W,
                  lc.ln1_rstd[static_cast<size_t>(t)], P + lo.ln1g, dmid.data(),
                  dx.data() + static_cast<size_t>(t) * W, G + lo.ln1g, G + lo.ln1b,
                  scratch.data(), W);
    }
  }

  // Embeddings.
  for (int t = 0; t < T; ++t) {
    const double* dxt = dx.data() + static_cast<size_t>(t) * W;
    K.axpy(1.0, dxt, G + lay.wte + static_cast<size_t>(cache.tokens[static_cast<size_t>(t)]) * W,
           static_cast<size_t>(W));
    K.axpy(1.0, dxt, G + lay.wpe + static_cast<size_t>(t) * W, static_cast<size_t>(W));
  }
}

double sequence_logprob_with_grad(const PolicyModel& model, std::span<const int> tokens,
                                  double weight, ForwardCache& cache,
                                  std::span<double> grad) {
  if (tokens.size() < 2) throw ValidationError("sequence needs at least two tokens");
  forward_sequence(model, tokens, cache);
  std::vector<MaskedTarget> targets;
  targets.reserve(tokens.size() - 1);
  double total = 0.0;
  for (size_t i = 0; i + 1 < tokens.size(); ++i) {
    targets.push_back(MaskedTarget{static_cast<int>(i), tokens[i + 1], weight});
    total += cached_logprob(cache, static_cast<int>(i), tokens[i + 1]);
  }
  backward_masked(model, cache, targets, grad);
  return total;
}

// ---------------------------------------------------------------------------
// Scoring and generation.

ResponseLogProb response_logprob(const PolicyModel& model, std::span<const int> prompt,
                                 std::span<const int> response) {
  check_tokens(model, prompt);
  check_tokens(model, response);
  ResponseLogProb out;
  if (response.empty()) return out;

  std::vector<int> full;
  full.reserve(1 + prompt.size() + response.size());
  full.push_back(model.vocab().bos());
  full.insert(full.end(), prompt.begin(), prompt.end());
  full.insert(full.end(), response.begin(), response.end());

  ForwardCache cache;
  forward_sequence(model, full, cache);

  const int eos = model.vocab().eos();
  const int base = static_cast<int>(prompt.size());  // position predicting response[0]
  out.per_token.assign(response.size(), 0.0);
  out.response_mask.assign(response.size(), 0);
  bool ended = false;
  for (size_t i = 0; i < response.size(); ++i) {
    if (ended) break;
    const double lp = cached_logprob(cache, base + static_cast<int>(i), response[i]);
    out.per_token[i] = lp;
    out.response_mask[i] = 1;
    out.total += lp;
    if (response[i] == eos) ended = true;
  }
  return out;
}

int sample_from_logits(std::span<const double> logits, double temperature, Rng& rng) {
  if (logits.empty()) throw ValidationError("sample_from_logits: empty logits");
  if (temperature < 0.0) throw ValidationError("temperature must be nonnegative");
  if (temperature == 0.0) {
    int best = 0;
    for (size_t i = 1; i < logits.size(); ++i) {
      if (logits[i] > logits[best]) best = static_cast<int>(i);
    }
    return best;
  }
  std::vector<double> p(logits.begin(), logits.end());
  for (double& v : p) v /= temperature;
  softmax_inplace(p.data(), p.size());
  const double u = rng.next_double();
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(p.size()) - 1;
}

namespace {

// Incremental decoding state: cached per-layer keys/values. Appending a
// token reproduces the teacher-forced activations bit for bit, because
// causal attention makes position t independent of anything after it.
struct GenState {
  int len = 0;
  std::vector<std::vector<double>> k, v;  // [layer][context * W]
};

void gen_step(const PolicyModel& model, const Layout& lay, GenState& st, int token,
              std::vector<double>& logits_out) {
  const ModelConfig& cfg = model.config();
  const auto& K = kernels::active();
  const float* P = model.params().data();
  const int W = cfg.width;
  const int H = cfg.heads;
  const int Dh = cfg.head_dim();
  const int F = cfg.ffn_dim();
  const int V = model.vocab_size();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  const int t = st.len;

  std::vector<double> x(static_cast<size_t>(W));
  {
    const float* wte = P + lay.wte + static_cast<size_t>(token) * W;
    const float* wpe = P + lay.wpe + static_cast<size_t>(t) * W;
    for (int i = 0; i < W; ++i) {
      x[static_cast<size_t>(i)] = static_cast<double>(wte[i]) + static_cast<double>(wpe[i]);
    }
  }

  std::vector<double> xhat(static_cast<size_t>(W)), norm(static_cast<size_t>(W));
  std::vector<double> qkv(static_cast<size_t>(3 * W));
  std::vector<double> att(static_cast<size_t>(W), 0.0);
  std::vector<double> proj(static_cast<size_t>(W));
  std::vector<double> prow(static_cast<size_t>(t) + 1);
  std::vector<double> pre(static_cast<size_t>(F)), act(static_cast<size_t>(F));
  double rstd = 0.0;

  for (int l = 0; l < cfg.layers; ++l) {
    const auto& lo = lay.layers[static_cast<size_t>(l)];
    double* kbuf = st.k[static_cast<size_t>(l)].data();
    double* vbuf = st.v[static_cast<size_t>(l)].data();

    ln_forward(x.data(), P + lo.ln1g, P + lo.ln1b, xhat.data(), &rstd, norm.data(), W);
    K.matvec_f32(P + lo.wqkv, norm.data(), qkv.data(), static_cast<size_t>(3 * W),
                 static_cast<size_t>(W));
    const float* bqkv = P + lo.bqkv;
    for (int i = 0; i < 3 * W; ++i) qkv[static_cast<size_t>(i)] += static_cast<double>(bqkv[i]);
    std::copy(qkv.begin() + W, qkv.begin() + 2 * W, kbuf + static_cast<size_t>(t) * W);
    std::copy(qkv.begin() + 2 * W, qkv.begin() + 3 * W, vbuf + static_cast<size_t>(t) * W);

    std::fill(att.begin(), att.end(), 0.0);
    for (int h = 0; h < H; ++h) {
      const int ho = h * Dh;
      const double* qt = qkv.data() + ho;
      for (int u = 0; u <= t; ++u) {
        prow[static_cast<size_t>(u)] =
            K.dot(qt, kbuf + static_cast<size_t>(u) * W + ho, static_cast<size_t>(Dh)) *
            att_scale;
      }
      softmax_inplace(prow.data(), static_cast<size_t>(t) + 1);
      double* out = att.data() + ho;
      for (int u = 0; u <= t; ++u) {
        K.axpy(prow[static_cast<size_t>(u)], vbuf + static_cast<size_t>(u) * W + ho, out,
               static_cast<size_t>(Dh));
      }
    }
    K.matvec_f32(P + lo.wo, att.data(), proj.data(), static_cast<size_t>(W),
                 static_cast<size_t>(W));
    const float* bo = P + lo.bo;
    for (int i = 0; i < W; ++i) {
      x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)] + static_cast<double>(bo[i]);
    }

    ln_forward(x.data(), P + lo.ln2g, P + lo.ln2b, xhat.data(), &rstd, norm.data(), W);
    K.matvec_f32(P + lo.win, norm.data(), pre.data(), static_cast<size_t>(F),
                 static_cast<size_t>(W));
    const float* bin = P + lo.bin;
    for (int f = 0; f < F; ++f) {
      pre[static_cast<size_t>(f)] += static_cast<double>(bin[f]);
      act[static_cast<size_t>(f)] = gelu_value(pre[static_cast<size_t>(f)]);
    }
    K.matvec_f32(P + lo.wout, act.data(), proj.data(), static_cast<size_t>(W),
                 static_cast<size_t>(F));
    const float* bout = P + lo.bout;
    for (int i = 0; i < W; ++i) {
      x[static_cast<size_t>(i)] += proj[static_cast<size_t>(i)] + static_cast<double>(bout[i]);
    }
  }

  ln_forward(x.data(), P + lay.lnfg, P + lay.lnfb, xhat.data(), &rstd, norm.data(), W);
  logits_out.resize(static_cast<size_t>(V));
  const float* head_w = cfg.tied_embeddings ? P + lay.wte : P + lay.headw;
  K.matvec_f32(head_w, norm.data(), logits_out.data(), static_cast<size_t>(V),
               static_cast<size_t>(W));
  if (!cfg.tied_embeddings) {
    const float* hb = P + lay.headb;
    for (int v = 0; v < V; ++v) logits_out[static_cast<size_t>(v)] += static_cast<double>(hb[v]);
  }
  st.len += 1;
}

}  // namespace

std::vector<int> sample_response(const PolicyModel& model, std::span<const int> prompt,
                                 const GenerationConfig& gen, Rng& rng) {
  check_tokens(model, prompt);
  const ModelConfig& cfg = model.config();
  const int prompt_len = static_cast<int>(prompt.size()) + 1;  // +BOS
  if (prompt_len >= cfg.context) {
    throw ValidationError("prompt length " + std::to_string(prompt_len) +
                          " exceeds context " + std::to_string(cfg.context));
  }
  if (gen.max_tokens < 0) throw ValidationError("max_tokens must be nonnegative");
  const int budget = std::min(gen.max_tokens, cfg.context - prompt_len);

  const Layout lay = compute_layout(cfg, model.vocab().size());
  GenState st;
  const size_t kv = static_cast<size_t>(cfg.context) * cfg.width;
  st.k.assign(static_cast<size_t>(cfg.layers), std::vector<double>(kv, 0.0));
  st.v.assign(static_cast<size_t>(cfg.layers), std::vector<double>(kv, 0.0));

  std::vector<double> logits;
  gen_step(model, lay, st, model.vocab().bos(), logits);
  for (int id : prompt) gen_step(model, lay, st, id, logits);

  std::vector<int> response;
  const int eos = model.vocab().eos();
  for (int i = 0; i < budget; ++i) {
    const int next = sample_from_logits(logits, gen.temperature, rng);
    if (next == eos) break;
    response.push_back(next);
    if (response.size() == static_cast<size_t>(budget)) break;
    gen_step(model, lay, st, next, logits);
  }
  return response;
}

}  // namespace sami
