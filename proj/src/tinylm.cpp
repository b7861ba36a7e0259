#include "cultura/tinylm.hpp"

#include <cmath>
#include <cstring>
#include <limits>

#include "cultura/error.hpp"
#include "cultura/io.hpp"
#include "cultura/random.hpp"

namespace cultura::tinylm {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kInitStd = 0.02;

// --- binary serialization (host byte order, little-endian in practice) ---

class BinaryWriter {
 public:
  template <typename T>
  void put(T v) {
    buf_.append(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void put_bytes(std::string_view s) { buf_.append(s); }
  void put_matrix(const MatrixXd& m) {
    put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    buf_.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  void put_vector(const VectorXd& v) { put_matrix(MatrixXd(v)); }
  const std::string& str() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  BinaryReader(std::string data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string get_bytes(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  MatrixXd get_matrix(Eigen::Index rows, Eigen::Index cols) {
    const auto r = get<std::uint64_t>();
    const auto c = get<std::uint64_t>();
    if (r != static_cast<std::uint64_t>(rows) || c != static_cast<std::uint64_t>(cols)) {
      throw FormatError(name_ + ": matrix shape " + std::to_string(r) + "x" + std::to_string(c) + ", expected " +
                        std::to_string(rows) + "x" + std::to_string(cols));
    }
    MatrixXd m(rows, cols);
    const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(m.size());
    need(bytes);
    std::memcpy(m.data(), data_.data() + pos_, bytes);
    pos_ += bytes;
    return m;
  }
  VectorXd get_vector(Eigen::Index n) { return get_matrix(n, 1).col(0); }
  void expect_end() const {
    if (pos_ != data_.size()) throw FormatError(name_ + ": trailing bytes");
  }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw FormatError(name_ + ": truncated file");
  }
  std::string data_;
  std::string name_;
  std::size_t pos_ = 0;
};

constexpr std::string_view kModelMagic = "CULTTLM1";
constexpr std::string_view kAdapterMagic = "CULTLRA1";

std::string serialize(const TinyModel& m) {
  BinaryWriter w;
  w.put_bytes(kModelMagic);
  const auto& c = m.config();
  w.put<std::int32_t>(c.d_model);
  w.put<std::int32_t>(c.n_layers);
  w.put<std::int32_t>(c.d_ff);
  w.put<std::int32_t>(c.max_seq);
  w.put_matrix(m.token_embedding);
  w.put_matrix(m.position_embedding);
  for (const auto& l : m.layers) {
    w.put_vector(l.attn_norm);
    for (const auto& p : l.proj) w.put_matrix(p);
    w.put_vector(l.mlp_norm);
    w.put_matrix(l.w_up);
    w.put_matrix(l.w_down);
  }
  w.put_vector(m.final_norm);
  w.put_matrix(m.head);
  return w.str();
}

MatrixXd random_normal(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
  MatrixXd m(rows, cols);
  // Fill in row-major order so the draw sequence is independent of storage order.
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  }
  return m;
}

// --- building blocks -----------------------------------------------------

struct NormCache {
  MatrixXd xhat;  // x / rms
  VectorXd rms;
};

MatrixXd rms_norm(const MatrixXd& x, const VectorXd& gain, NormCache* cache) {
  const auto d = static_cast<double>(x.cols());
  VectorXd rms = ((x.array().square().rowwise().sum() / d) + kNormEps).sqrt();
  MatrixXd xhat = x.array().colwise() / rms.array();
  MatrixXd y = xhat.array().rowwise() * gain.transpose().array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rms = std::move(rms);
  }
  return y;
}

MatrixXd rms_norm_backward(const MatrixXd& dy, const VectorXd& gain, const NormCache& cache) {
  const auto d = static_cast<double>(dy.cols());
  const MatrixXd dxhat = dy.array().rowwise() * gain.transpose().array();
  const VectorXd proj = (dxhat.array() * cache.xhat.array()).rowwise().sum() / d;
  MatrixXd dx = dxhat - (cache.xhat.array().colwise() * proj.array()).matrix();
  return dx.array().colwise() / cache.rms.array();
}

const LoraFactors* lora_for(const Adapter* adapter, std::size_t layer, Projection p) {
  if (!adapter || !adapter->targets(p)) return nullptr;
  return &adapter->factors[layer][static_cast<std::size_t>(p)];
}

MatrixXd linear(const MatrixXd& x, const MatrixXd& w, const LoraFactors* lora, double scale, MatrixXd* u_out) {
  MatrixXd y = x * w.transpose();
  if (lora) {
    MatrixXd u = x * lora->a.transpose();
    y.noalias() += scale * (u * lora->b.transpose());
    if (u_out) *u_out = std::move(u);
  }
  return y;
}

// Returns dx; accumulates adapter gradients into `grad` when present.
MatrixXd linear_backward(const MatrixXd& dy, const MatrixXd& x, const MatrixXd& w, const LoraFactors* lora,
                         double scale, const MatrixXd& u, LoraFactors* grad) {
  MatrixXd dx = dy * w;
  if (lora) {
    grad->b.noalias() += scale * (dy.transpose() * u);
    const MatrixXd du = scale * (dy * lora->b);
    grad->a.noalias() += du.transpose() * x;
    dx.noalias() += du * lora->a;
  }
  return dx;
}

void softmax_causal_rows(MatrixXd& s) {
  const Eigen::Index t = s.rows();
  for (Eigen::Index i = 0; i < t; ++i) {
    const double mx = s.row(i).head(i + 1).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      s(i, j) = std::exp(s(i, j) - mx);
      sum += s(i, j);
    }
    for (Eigen::Index j = 0; j <= i; ++j) s(i, j) /= sum;
    for (Eigen::Index j = i + 1; j < t; ++j) s(i, j) = 0.0;
  }
}

struct LayerCache {
  MatrixXd x_in;
  NormCache n1;
  MatrixXd h1;
  std::array<MatrixXd, kProjections> u;  // adapter intermediates
  MatrixXd q, k, v, p, o;
  MatrixXd x_mid;
  NormCache n2;
  MatrixXd h2;
  MatrixXd z;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  NormCache nf;
  MatrixXd hf;
};

MatrixXd embed(const TinyModel& m, std::span<const int> tokens) {
  const auto t = static_cast<Eigen::Index>(tokens.size());
  if (t > m.config().max_seq) throw InvalidArgument("sequence longer than the model context");
  MatrixXd x(t, m.config().d_model);
  for (Eigen::Index i = 0; i < t; ++i) {
    const int tok = tokens[static_cast<std::size_t>(i)];
    if (tok < 0 || tok >= kVocab) throw InvalidArgument("token id out of range");
    x.row(i) = m.token_embedding.row(tok) + m.position_embedding.row(i);
  }
  return x;
}

MatrixXd forward(const TinyModel& m, const Adapter* adapter, std::span<const int> tokens, ForwardCache* cache) {
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(m.config().d_model));
  const double scale = adapter ? adapter->spec().scale() : 0.0;
  MatrixXd x = embed(m, tokens);
  if (cache) cache->layers.resize(m.layers.size());
  for (std::size_t li = 0; li < m.layers.size(); ++li) {
    const Layer& layer = m.layers[li];
    LayerCache local;
    LayerCache& c = cache ? cache->layers[li] : local;
    c.x_in = x;
    c.h1 = rms_norm(x, layer.attn_norm, &c.n1);
    auto proj = [&](Projection p, const MatrixXd& in) {
      const auto idx = static_cast<std::size_t>(p);
      return linear(in, layer.proj[idx], lora_for(adapter, li, p), scale, &c.u[idx]);
    };
    c.q = proj(Projection::query, c.h1);
    c.k = proj(Projection::key, c.h1);
    c.v = proj(Projection::value, c.h1);
    c.p = (c.q * c.k.transpose()) * inv_sqrt_d;
    softmax_causal_rows(c.p);
    c.o = c.p * c.v;
    c.x_mid = x + proj(Projection::output, c.o);
    c.h2 = rms_norm(c.x_mid, layer.mlp_norm, &c.n2);
    c.z = c.h2 * layer.w_up.transpose();
    x = c.x_mid + c.z.cwiseMax(0.0) * layer.w_down.transpose();
  }
  NormCache nf_local;
  MatrixXd hf = rms_norm(x, m.final_norm, cache ? &cache->nf : &nf_local);
  MatrixXd logits = hf * m.head.transpose();
  if (cache) cache->hf = std::move(hf);
  return logits;
}

}  // namespace

// --- config and construction -------------------------------------------------

void TinyConfig::validate() const {
  if (d_model < 1 || n_layers < 1 || d_ff < 1 || max_seq < 2) {
    throw ConfigError("tiny model dimensions must be positive and max_seq >= 2");
  }
}

std::string_view to_string(Projection p) noexcept {
  switch (p) {
    case Projection::query: return "query";
    case Projection::key: return "key";
    case Projection::value: return "value";
    case Projection::output: return "output";
  }
  return "?";
}

Projection parse_projection(std::string_view name) {
  if (name == "query" || name == "q_proj") return Projection::query;
  if (name == "key" || name == "k_proj") return Projection::key;
  if (name == "value" || name == "v_proj") return Projection::value;
  if (name == "output" || name == "o_proj") return Projection::output;
  throw ConfigError("model has no addressable projection named '" + std::string(name) + "'");
}

TinyModel TinyModel::init(const TinyConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  TinyModel m;
  m.config_ = config;
  const int d = config.d_model;
  const double out_std = kInitStd / std::sqrt(2.0 * config.n_layers);
  m.token_embedding = random_normal(rng, kVocab, d, kInitStd);
  m.position_embedding = random_normal(rng, config.max_seq, d, kInitStd);
  for (int l = 0; l < config.n_layers; ++l) {
    Layer layer;
    layer.attn_norm = VectorXd::Ones(d);
    for (std::size_t p = 0; p < kProjections; ++p) {
      layer.proj[p] = random_normal(rng, d, d, p == static_cast<std::size_t>(Projection::output) ? out_std : kInitStd);
    }
    layer.mlp_norm = VectorXd::Ones(d);
    layer.w_up = random_normal(rng, config.d_ff, d, kInitStd);
    layer.w_down = random_normal(rng, d, config.d_ff, out_std);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = VectorXd::Ones(d);
  m.head = random_normal(rng, kVocab, d, kInitStd);
  return m;
}

TinyModel TinyModel::from_ref(const std::string& ref) {
  if (ref.starts_with("tiny:")) {
    const std::string digits = ref.substr(5);
    if (digits.empty() || digits.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError("model reference '" + ref + "' must be tiny:<non-negative integer seed>");
    }
    return init(TinyConfig{}, std::stoull(digits));
  }
  return load(ref);
}

void TinyModel::save(const std::filesystem::path& path) const { io::write_text(path, serialize(*this)); }

TinyModel TinyModel::load(const std::filesystem::path& path) {
  BinaryReader r(io::read_text(path), path.string());
  if (r.get_bytes(kModelMagic.size()) != kModelMagic) throw FormatError(path.string() + ": not a tiny model file");
  TinyConfig c;
  c.d_model = r.get<std::int32_t>();
  c.n_layers = r.get<std::int32_t>();
  c.d_ff = r.get<std::int32_t>();
  c.max_seq = r.get<std::int32_t>();
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  TinyModel m;
  m.config_ = c;
  m.token_embedding = r.get_matrix(kVocab, c.d_model);
  m.position_embedding = r.get_matrix(c.max_seq, c.d_model);
  for (int l = 0; l < c.n_layers; ++l) {
    Layer layer;
    layer.attn_norm = r.get_vector(c.d_model);
    for (auto& p : layer.proj) p = r.get_matrix(c.d_model, c.d_model);
    layer.mlp_norm = r.get_vector(c.d_model);
    layer.w_up = r.get_matrix(c.d_ff, c.d_model);
    layer.w_down = r.get_matrix(c.d_model, c.d_ff);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm = r.get_vector(c.d_model);
  m.head = r.get_matrix(kVocab, c.d_model);
  r.expect_end();
  return m;
}

std::size_t TinyModel::parameter_count() const {
  std::size_t n = static_cast<std::size_t>(token_embedding.size() + position_embedding.size() + final_norm.size() +
                                           head.size());
  for (const auto& l : layers) {
    n += static_cast<std::size_t>(l.attn_norm.size() + l.mlp_norm.size() + l.w_up.size() + l.w_down.size());
    for (const auto& p : l.proj) n += static_cast<std::size_t>(p.size());
  }
  return n;
}

std::string TinyModel::checksum() const { return io::sha256_hex(serialize(*this)); }

// --- adapters --------------------------------------------------------------------

void LoraSpec::validate() const {
  if (rank < 1) throw ConfigError("adapter rank must be at least 1");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("adapter scaling must be positive");
  if (targets.empty()) throw ConfigError("adapter needs at least one target projection");
}

bool Adapter::targets(Projection p) const noexcept {
  for (auto t : spec_.targets) {
    if (t == p) return true;
  }
  return false;
}

Adapter Adapter::init(const TinyConfig& model, const LoraSpec& spec, std::uint64_t seed) {
  spec.validate();
  Adapter a;
  a.spec_ = spec;
  Rng rng(seed);
  const int d = model.d_model;
  // Uniform(-1/sqrt(in), 1/sqrt(in)) for A, zeros for B.
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  a.factors.resize(static_cast<std::size_t>(model.n_layers));
  for (auto& layer : a.factors) {
    for (std::size_t p = 0; p < kProjections; ++p) {
      if (!a.targets(static_cast<Projection>(p))) continue;
      MatrixXd am(spec.rank, d);
      for (Eigen::Index i = 0; i < am.rows(); ++i) {
        for (Eigen::Index j = 0; j < am.cols(); ++j) am(i, j) = bound * (2.0 * rng.uniform01() - 1.0);
      }
      layer[p].a = std::move(am);
      layer[p].b = MatrixXd::Zero(d, spec.rank);
    }
  }
  return a;
}

std::size_t Adapter::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : factors) {
    for (const auto& f : layer) n += static_cast<std::size_t>(f.a.size() + f.b.size());
  }
  return n;
}

Adapter zeros_like(const Adapter& adapter) {
  Adapter z = adapter;
  z.for_each_matrix([](MatrixXd& m) { m.setZero(); });
  return z;
}

void Adapter::save(const std::filesystem::path& path) const {
  BinaryWriter w;
  w.put_bytes(kAdapterMagic);
  const auto d = factors.empty() ? 0 : [&] {
    for (const auto& f : factors.front()) {
      if (f.a.size()) return static_cast<int>(f.a.cols());
    }
    return 0;
  }();
  w.put<std::int32_t>(static_cast<std::int32_t>(factors.size()));
  w.put<std::int32_t>(d);
  w.put<std::int32_t>(spec_.rank);
  w.put<double>(spec_.alpha);
  std::uint32_t mask = 0;
  for (auto t : spec_.targets) mask |= 1U << static_cast<unsigned>(t);
  w.put<std::uint32_t>(mask);
  for (const auto& layer : factors) {
    for (std::size_t p = 0; p < kProjections; ++p) {
      if (!(mask >> p & 1U)) continue;
      w.put_matrix(layer[p].a);
      w.put_matrix(layer[p].b);
    }
  }
  io::write_text(path, w.str());
}

Adapter Adapter::load(const std::filesystem::path& path) {
  BinaryReader r(io::read_text(path), path.string());
  if (r.get_bytes(kAdapterMagic.size()) != kAdapterMagic) throw FormatError(path.string() + ": not an adapter file");
  const int n_layers = r.get<std::int32_t>();
  const int d = r.get<std::int32_t>();
  Adapter a;
  a.spec_.rank = r.get<std::int32_t>();
  a.spec_.alpha = r.get<double>();
  const auto mask = r.get<std::uint32_t>();
  if (n_layers < 1 || d < 1 || a.spec_.rank < 1 || mask == 0 || mask >= (1U << kProjections)) {
    throw FormatError(path.string() + ": invalid adapter header");
  }
  a.spec_.targets.clear();
  for (std::size_t p = 0; p < kProjections; ++p) {
    if (mask >> p & 1U) a.spec_.targets.push_back(static_cast<Projection>(p));
  }
  a.factors.resize(static_cast<std::size_t>(n_layers));
  for (auto& layer : a.factors) {
    for (std::size_t p = 0; p < kProjections; ++p) {
      if (!(mask >> p & 1U)) continue;
      layer[p].a = r.get_matrix(a.spec_.rank, d);
      layer[p].b = r.get_matrix(d, a.spec_.rank);
    }
  }
  r.expect_end();
  return a;
}

// --- tokens, forward, backward -------------------------------------------------------

std::vector<int> encode(std::string_view text, std::size_t max_tokens, bool add_eos) {
  std::vector<int> out;
  out.reserve(text.size() + 2);
  out.push_back(kBos);
  for (unsigned char ch : text) out.push_back(ch);
  if (add_eos) out.push_back(kEos);
  if (out.size() > max_tokens) out.resize(max_tokens);
  return out;
}

MatrixXd forward_logits(const TinyModel& model, const Adapter* adapter, std::span<const int> tokens) {
  return forward(model, adapter, tokens, nullptr);
}

namespace {

void check_adapter_shape(const TinyModel& model, const Adapter& adapter) {
  if (adapter.factors.size() != model.layers.size()) {
    throw InvalidArgument("adapter layer count does not match the model");
  }
}

}  // namespace

double loss_and_grad(const TinyModel& model, const Adapter& adapter, std::span<const int> tokens,
                     std::size_t first_target, Adapter* grad, double grad_scale, std::size_t* counted) {
  check_adapter_shape(model, adapter);
  if (tokens.size() < 2) throw InvalidArgument("need at least two tokens for a next-token loss");
  const std::span<const int> inputs = tokens.first(tokens.size() - 1);
  ForwardCache cache;
  const MatrixXd logits = forward(model, &adapter, inputs, grad ? &cache : nullptr);

  const auto t_len = logits.rows();
  const std::size_t first = std::max<std::size_t>(first_target, 1);
  MatrixXd dlogits = MatrixXd::Zero(t_len, logits.cols());
  double loss = 0.0;
  std::size_t n = 0;
  for (Eigen::Index t = 0; t < t_len; ++t) {
    const auto target_index = static_cast<std::size_t>(t) + 1;
    if (target_index < first) continue;
    const int target = tokens[target_index];
    const double mx = logits.row(t).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(t).array() - mx).exp();
    const double z = e.sum();
    loss += std::log(z) + mx - logits(t, target);
    ++n;
    if (grad) {
      dlogits.row(t) = e / z * grad_scale;
      dlogits(t, target) -= grad_scale;
    }
  }
  if (counted) *counted = n;
  if (!grad) return loss;

  check_adapter_shape(model, *grad);
  const double scale = adapter.spec().scale();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(model.config().d_model));

  MatrixXd dx = rms_norm_backward(dlogits * model.head, model.final_norm, cache.nf);
  for (std::size_t li = model.layers.size(); li-- > 0;) {
    const Layer& layer = model.layers[li];
    const LayerCache& c = cache.layers[li];
    auto proj_back = [&](Projection p, const MatrixXd& dy, const MatrixXd& x) {
      const auto idx = static_cast<std::size_t>(p);
      return linear_backward(dy, x, layer.proj[idx], lora_for(&adapter, li, p), scale, c.u[idx],
                             &grad->factors[li][idx]);
    };

    // MLP branch.
    MatrixXd dz = dx * layer.w_down;
    dz = dz.cwiseProduct((c.z.array() > 0.0).cast<double>().matrix());
    MatrixXd dx_mid = dx + rms_norm_backward(dz * layer.w_up, layer.mlp_norm, c.n2);

    // Attention branch.
    const MatrixXd d_o = proj_back(Projection::output, dx_mid, c.o);
    const MatrixXd dp = d_o * c.v.transpose();
    const MatrixXd dv = c.p.transpose() * d_o;
    const Eigen::VectorXd row_dot = (dp.array() * c.p.array()).rowwise().sum();
    const MatrixXd ds = (c.p.array() * (dp.array().colwise() - row_dot.array())).matrix() * inv_sqrt_d;
    const MatrixXd dq = ds * c.k;
    const MatrixXd dk = ds.transpose() * c.q;
    MatrixXd dh1 = proj_back(Projection::query, dq, c.h1);
    dh1 += proj_back(Projection::key, dk, c.h1);
    dh1 += proj_back(Projection::value, dv, c.h1);
    dx = dx_mid + rms_norm_backward(dh1, layer.attn_norm, c.n1);
  }
  return loss;
}

double sequence_loss(const TinyModel& model, const Adapter* adapter, std::span<const int> tokens,
                     std::size_t first_target) {
  if (adapter) return loss_and_grad(model, *adapter, tokens, first_target, nullptr, 1.0);
  if (tokens.size() < 2) throw InvalidArgument("need at least two tokens for a next-token loss");
  const MatrixXd logits = forward(model, nullptr, tokens.first(tokens.size() - 1), nullptr);
  double loss = 0.0;
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const auto target_index = static_cast<std::size_t>(t) + 1;
    if (target_index < std::max<std::size_t>(first_target, 1)) continue;
    const double mx = logits.row(t).maxCoeff();
    loss += std::log((logits.row(t).array() - mx).exp().sum()) + mx - logits(t, tokens[target_index]);
  }
  return loss;
}

// --- incremental decoding ---------------------------------------------------------------

Decoder::Decoder(const TinyModel& model, const Adapter* adapter) : model_(model), adapter_(adapter) {
  if (adapter_) check_adapter_shape(model_, *adapter_);
  const auto& c = model_.config();
  keys_.assign(model_.layers.size(), MatrixXd(c.max_seq, c.d_model));
  values_.assign(model_.layers.size(), MatrixXd(c.max_seq, c.d_model));
}

VectorXd Decoder::step(int token) {
  const auto& cfg = model_.config();
  if (pos_ >= static_cast<std::size_t>(cfg.max_seq)) throw InvalidArgument("decoder context is full");
  if (token < 0 || token >= kVocab) throw InvalidArgument("token id out of range");
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const double scale = adapter_ ? adapter_->spec().scale() : 0.0;
  const auto pos = static_cast<Eigen::Index>(pos_);

  MatrixXd x = model_.token_embedding.row(token) + model_.position_embedding.row(pos);
  for (std::size_t li = 0; li < model_.layers.size(); ++li) {
    const Layer& layer = model_.layers[li];
    auto proj = [&](Projection p, const MatrixXd& in) {
      return linear(in, layer.proj[static_cast<std::size_t>(p)], lora_for(adapter_, li, p), scale, nullptr);
    };
    const MatrixXd h = rms_norm(x, layer.attn_norm, nullptr);
    const MatrixXd q = proj(Projection::query, h);
    keys_[li].row(pos) = proj(Projection::key, h);
    values_[li].row(pos) = proj(Projection::value, h);
    const auto k = keys_[li].topRows(pos + 1);
    const auto v = values_[li].topRows(pos + 1);
    Eigen::RowVectorXd s = (q * k.transpose()) * inv_sqrt_d;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    x += proj(Projection::output, s * v);
    const MatrixXd h2 = rms_norm(x, layer.mlp_norm, nullptr);
    x += (h2 * layer.w_up.transpose()).cwiseMax(0.0) * layer.w_down.transpose();
  }
  ++pos_;
  const MatrixXd hf = rms_norm(x, model_.final_norm, nullptr);
  return (hf * model_.head.transpose()).row(0).transpose();
}

}  // namespace cultura::tinylm
