#include "ginv/diffusion.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace ginv {

using namespace tape;
using nn::BoundParams;
using nn::Conv2d;
using nn::Linear;
using nn::ParamStore;

NoiseSchedule NoiseSchedule::linear(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::runtime_error("noise schedule: T must be >= 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<size_t>(T));
  s.alpha.resize(static_cast<size_t>(T));
  s.alpha_bar.resize(static_cast<size_t>(T));
  s.sigma.resize(static_cast<size_t>(T));
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * t / (T - 1);
    s.beta[static_cast<size_t>(t)] = b;
    s.alpha[static_cast<size_t>(t)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bar[static_cast<size_t>(t)] = prod;
    s.sigma[static_cast<size_t>(t)] = std::sqrt(b);
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (T < 1 || static_cast<int>(beta.size()) != T)
    throw std::runtime_error("noise schedule: inconsistent sizes");
  double prev = 1.0;
  for (int t = 0; t < T; ++t) {
    double b = beta[static_cast<size_t>(t)];
    double ab_t = alpha_bar[static_cast<size_t>(t)];
    if (!(b > 0.0 && b < 1.0))
      throw std::runtime_error("noise schedule: beta out of (0,1)");
    if (!(ab_t > 0.0 && ab_t < 1.0))
      throw std::runtime_error("noise schedule: alpha_bar out of (0,1)");
    if (!(ab_t < prev))
      throw std::runtime_error("noise schedule: alpha_bar not decreasing");
    prev = ab_t;
  }
}

// ---- U-Net -------------------------------------------------------------------

namespace {

Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim) {
  int half = dim / 2;
  Tensor out({static_cast<int>(ts.size()), dim});
  for (size_t i = 0; i < ts.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      double freq = std::exp(-std::log(10000.0) * j / half);
      out.data[i * dim + 2 * j] = std::sin(ts[i] * freq);
      out.data[i * dim + 2 * j + 1] = std::cos(ts[i] * freq);
    }
  }
  return out;
}

// Pixel-expansion map: repeats each of B rows hw times ((B,E) -> (B*hw,E)).
std::shared_ptr<Csr> expand_rows_map(int batch, int hw) {
  std::vector<int> indptr(static_cast<size_t>(batch) * hw + 1);
  std::vector<int> indices(static_cast<size_t>(batch) * hw);
  std::vector<double> values(static_cast<size_t>(batch) * hw, 1.0);
  for (int r = 0; r < batch * hw; ++r) {
    indptr[static_cast<size_t>(r)] = r;
    indices[static_cast<size_t>(r)] = r / hw;
  }
  indptr[static_cast<size_t>(batch) * hw] = batch * hw;
  return Csr::build(batch * hw, batch, indptr, indices, values);
}

struct UnetBlock {
  Conv2d conv1, conv2, skip;
  Linear tproj;
  bool has_skip = false;
  int in_ch = 0, out_ch = 0;

  static UnetBlock create(ParamStore& store, const std::string& name, int in_ch,
                          int out_ch, int emb_hidden, Rng& rng) {
    UnetBlock b;
    b.in_ch = in_ch;
    b.out_ch = out_ch;
    b.conv1 = Conv2d::create(store, name + ".conv1", in_ch, out_ch, 3, 1, 1, rng);
    b.tproj = Linear::create(store, name + ".tproj", emb_hidden, out_ch, rng);
    b.conv2 = Conv2d::create(store, name + ".conv2", out_ch, out_ch, 3, 1, 1, rng);
    if (in_ch != out_ch) {
      b.skip = Conv2d::create(store, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
      b.has_skip = true;
    }
    return b;
  }

  Var apply(Graph& g, const BoundParams& p, Var x, Var temb_expanded_any,
            int batch, int h, int w, std::shared_ptr<Csr> expand) const {
    Var a = conv1.apply(g, p, x, batch, h, w);
    // Channelwise time conditioning: project the (B,E') embedding and
    // broadcast it over pixels.
    Var tp = tproj.apply(g, p, temb_expanded_any);      // (B, out_ch)
    Var tpx = csr_apply(tp, expand);                    // (B*h*w, out_ch)
    a = reshape(add(reshape(a, {batch * h * w, out_ch}), tpx),
                {batch, h, w, out_ch});
    a = nn::silu(a);
    Var b = conv2.apply(g, p, a, batch, h, w);
    Var s = has_skip ? skip.apply(g, p, x, batch, h, w) : x;
    return add(b, s);
  }
};

class UnetEpsNet : public EpsNet {
 public:
  UnetEpsNet(const UnetConfig& cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg.height % 4 != 0 || cfg.width % 4 != 0)
      throw std::runtime_error("unet: height and width must be divisible by 4");
    Rng rng(seed);
    int w = cfg.base_width, e = cfg.emb_dim, eh = 2 * cfg.emb_dim;
    temb1_ = Linear::create(params_, "temb1", e, eh, rng);
    temb2_ = Linear::create(params_, "temb2", eh, eh, rng);
    in_conv_ = Conv2d::create(params_, "in", cfg.channels, w, 3, 1, 1, rng);
    down1_ = UnetBlock::create(params_, "down1", w, w, eh, rng);
    down2_ = UnetBlock::create(params_, "down2", w, 2 * w, eh, rng);
    mid_ = UnetBlock::create(params_, "mid", 2 * w, 2 * w, eh, rng);
    up1_ = UnetBlock::create(params_, "up1", 4 * w, 2 * w, eh, rng);
    up2_ = UnetBlock::create(params_, "up2", 3 * w, w, eh, rng);
    out_conv_ = Conv2d::create(params_, "out", w, cfg.channels, 3, 1, 1, rng);
    // Zero head: a fresh model predicts zero noise.
    for (auto& v : params_.at(out_conv_.w_idx).data) v = 0.0;
  }

  Var forward(Graph& g, Var x, const std::vector<int>& ts,
              const BoundParams& p) const override {
    const Tensor& tv = x.val();
    if (tv.rank() != 4 || tv.dim(1) != cfg_.height || tv.dim(2) != cfg_.width ||
        tv.dim(3) != cfg_.channels ||
        tv.dim(0) != static_cast<int>(ts.size()))
      throw std::runtime_error("unet forward: bad input shape " + tv.shape_str());
    int batch = tv.dim(0), h = cfg_.height, w = cfg_.width;

    Var temb = g.constant(sinusoidal_embedding(ts, cfg_.emb_dim));
    Var te = nn::silu(temb1_.apply(g, p, temb));
    te = nn::silu(temb2_.apply(g, p, te));  // (B, eh)

    auto ex_full = expand_rows_map(batch, h * w);
    auto ex_half = expand_rows_map(batch, (h / 2) * (w / 2));
    auto ex_quarter = expand_rows_map(batch, (h / 4) * (w / 4));

    int bw = cfg_.base_width;
    Var h0 = in_conv_.apply(g, p, x, batch, h, w);
    Var h1 = down1_.apply(g, p, h0, te, batch, h, w, ex_full);
    Var p1 = avg_pool2(h1, batch, h, w, bw);
    Var h2 = down2_.apply(g, p, p1, te, batch, h / 2, w / 2, ex_half);
    Var p2 = avg_pool2(h2, batch, h / 2, w / 2, 2 * bw);
    Var h3 = mid_.apply(g, p, p2, te, batch, h / 4, w / 4, ex_quarter);
    Var u1 = upsample2(h3, batch, h / 4, w / 4, 2 * bw);
    Var c1 = reshape(concat_cols(reshape(u1, {batch * (h / 2) * (w / 2), 2 * bw}),
                                 reshape(h2, {batch * (h / 2) * (w / 2), 2 * bw})),
                     {batch, h / 2, w / 2, 4 * bw});
    Var h4 = up1_.apply(g, p, c1, te, batch, h / 2, w / 2, ex_half);
    Var u2 = upsample2(h4, batch, h / 2, w / 2, 2 * bw);
    Var c2 = reshape(concat_cols(reshape(u2, {batch * h * w, 2 * bw}),
                                 reshape(h1, {batch * h * w, bw})),
                     {batch, h, w, 3 * bw});
    Var h5 = up2_.apply(g, p, c2, te, batch, h, w, ex_full);
    return out_conv_.apply(g, p, h5, batch, h, w);
  }

  const ParamStore& params() const override { return params_; }
  ParamStore& mutable_params() override { return params_; }
  const UnetConfig& config() const { return cfg_; }

 private:
  UnetConfig cfg_;
  ParamStore params_;
  Linear temb1_, temb2_;
  Conv2d in_conv_, out_conv_;
  UnetBlock down1_, down2_, mid_, up1_, up2_;
};

}  // namespace

std::shared_ptr<EpsNet> make_unet(const UnetConfig& cfg, uint64_t seed) {
  return std::make_shared<UnetEpsNet>(cfg, seed);
}

DiffusionModel make_diffusion_model(const UnetConfig& cfg, int T,
                                    double beta_start, double beta_end,
                                    uint64_t seed) {
  DiffusionModel m;
  m.schedule = NoiseSchedule::linear(T, beta_start, beta_end);
  m.eps_net = make_unet(cfg, seed);
  m.height = cfg.height;
  m.width = cfg.width;
  m.channels = cfg.channels;
  return m;
}

// ---- processes ----------------------------------------------------------------

namespace {
void check_t(const DiffusionModel& m, int t) {
  if (t < 1 || t > m.schedule.T)
    throw std::runtime_error("diffusion: timestep out of range");
}
void check_image(const DiffusionModel& m, const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != m.height || x.dim(1) != m.width ||
      x.dim(2) != m.channels)
    throw std::runtime_error("diffusion: image shape mismatch " + x.shape_str());
}
Tensor eps_forward_plain(const DiffusionModel& m, const Tensor& x, int t) {
  Graph g;
  BoundParams p = m.eps_net->bind(g, false);
  Var xv = g.constant(x.reshaped({1, m.height, m.width, m.channels}));
  Var out = m.eps_net->forward(g, xv, {t}, p);
  return out.val().reshaped({m.height, m.width, m.channels});
}
}  // namespace

Tensor forward_sample(const DiffusionModel& m, const Tensor& x0, int t,
                      const Tensor& eps) {
  check_t(m, t);
  check_image(m, x0);
  double ab = m.schedule.ab(t);
  Tensor out = x0.scaled(std::sqrt(ab));
  out += eps.scaled(std::sqrt(1.0 - ab));
  return out;
}

PriorLossResult prior_loss(const DiffusionModel& m, const Tensor& x0, int t,
                           const Tensor& eps) {
  check_t(m, t);
  check_image(m, x0);
  double ab = m.schedule.ab(t);

  Graph g;
  BoundParams p = m.eps_net->bind(g, false);
  Var x0v = g.leaf(x0.reshaped({1, m.height, m.width, m.channels}));
  Var noise = g.constant(eps.reshaped({1, m.height, m.width, m.channels}));
  Var xt = add(scale(x0v, std::sqrt(ab)), scale(noise, std::sqrt(1.0 - ab)));
  Var pred = m.eps_net->forward(g, xt, {t}, p);
  Var loss = sq_norm(sub(noise, pred));
  double lv = loss.val().data[0];
  if (!std::isfinite(lv))
    throw std::runtime_error("prior_loss: non-finite network output");

  PriorLossResult r;
  r.loss = lv;
  r.grad = backward(loss, {x0v})[0].val().reshaped(x0.shape);
  return r;
}

Tensor reverse_step(const DiffusionModel& m, const Tensor& x_t, int t,
                    const Tensor& z) {
  check_t(m, t);
  check_image(m, x_t);
  if (t == 1 && z.max_abs() != 0.0)
    throw std::runtime_error("reverse_step: z must be zero at t=1");
  Tensor eps_hat = eps_forward_plain(m, x_t, t);
  double a = m.schedule.a(t), ab = m.schedule.ab(t), sig = m.schedule.sig(t);
  Tensor out = x_t;
  out -= eps_hat.scaled((1.0 - a) / std::sqrt(1.0 - ab));
  out *= 1.0 / std::sqrt(a);
  out += z.scaled(sig);
  return out;
}

Tensor denoise_from(const DiffusionModel& m, const Tensor& x, int t_star,
                    uint64_t seed) {
  check_t(m, t_star);
  Tensor cur = x;
  for (int t = t_star; t >= 1; --t) {
    Tensor z = Tensor::zeros(x.shape);
    if (t > 1) {
      Rng r = Rng::derive(seed, static_cast<uint64_t>(t));
      for (auto& v : z.data) v = r.normal();
    }
    cur = reverse_step(m, cur, t, z);
  }
  return cur;
}

// ---- training -----------------------------------------------------------------

namespace {

struct BatchSlice {
  Tensor images;        // (b,H,W,C) diffused inputs
  Tensor targets;       // (b,H,W,C) noise to predict
  std::vector<int> ts;
};

// Mean per-sample squared error; gradient with respect to all parameters.
double batch_loss_and_grads(const DiffusionModel& m, const BatchSlice& s,
                            std::vector<Tensor>* grads) {
  Graph g;
  BoundParams p = m.eps_net->bind(g, grads != nullptr);
  Var x = g.constant(s.images);
  Var pred = m.eps_net->forward(g, x, s.ts, p);
  Var err = sub(g.constant(s.targets), pred);
  Var loss = scale(sq_norm(err), 1.0 / s.ts.size());
  double lv = loss.val().data[0];
  if (grads) {
    auto gv = backward(loss, p.vars);
    grads->clear();
    for (auto& v : gv) grads->push_back(v.val());
  }
  return lv;
}

BatchSlice make_slice(const DiffusionModel& m, const Tensor& images,
                      const std::vector<int>& idx, size_t lo, size_t hi,
                      Rng& rng) {
  int h = m.height, w = m.width, c = m.channels;
  int64_t stride = static_cast<int64_t>(h) * w * c;
  BatchSlice s;
  int b = static_cast<int>(hi - lo);
  s.images = Tensor({b, h, w, c});
  s.targets = Tensor({b, h, w, c});
  for (int i = 0; i < b; ++i) {
    int t = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(m.schedule.T)));
    s.ts.push_back(t);
    double ab = m.schedule.ab(t);
    const double* src =
        images.data.data() + idx[lo + static_cast<size_t>(i)] * stride;
    for (int64_t j = 0; j < stride; ++j) {
      double eps = rng.normal();
      s.targets.data[static_cast<size_t>(i * stride + j)] = eps;
      s.images.data[static_cast<size_t>(i * stride + j)] =
          std::sqrt(ab) * src[j] + std::sqrt(1.0 - ab) * eps;
    }
  }
  return s;
}

}  // namespace

double eval_denoising_loss(const DiffusionModel& m, const Tensor& images,
                           int draws, uint64_t seed, int t_lo, int t_hi) {
  if (t_hi <= 0) t_hi = m.schedule.T;
  Rng rng(seed);
  int n = images.dim(0);
  std::vector<int> idx(static_cast<size_t>(draws));
  for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
  double total = 0;
  const int chunk = 16;
  for (int lo = 0; lo < draws; lo += chunk) {
    int hi = std::min(draws, lo + chunk);
    BatchSlice s;
    int h = m.height, w = m.width, c = m.channels;
    int64_t stride = static_cast<int64_t>(h) * w * c;
    s.images = Tensor({hi - lo, h, w, c});
    s.targets = Tensor({hi - lo, h, w, c});
    for (int i = lo; i < hi; ++i) {
      int t = t_lo + static_cast<int>(rng.below(
                         static_cast<uint64_t>(t_hi - t_lo + 1)));
      s.ts.push_back(t);
      double ab = m.schedule.ab(t);
      const double* src = images.data.data() + idx[static_cast<size_t>(i)] * stride;
      for (int64_t j = 0; j < stride; ++j) {
        double eps = rng.normal();
        s.targets.data[static_cast<size_t>((i - lo) * stride + j)] = eps;
        s.images.data[static_cast<size_t>((i - lo) * stride + j)] =
            std::sqrt(ab) * src[j] + std::sqrt(1.0 - ab) * eps;
      }
    }
    total += batch_loss_and_grads(m, s, nullptr) * (hi - lo);
  }
  return total / draws;
}

DiffusionModel train_toy(const Tensor& images, const TrainConfig& cfg) {
  if (images.rank() != 4) throw std::runtime_error("train_toy: expected (N,H,W,C)");
  UnetConfig ucfg;
  ucfg.height = images.dim(1);
  ucfg.width = images.dim(2);
  ucfg.channels = images.dim(3);
  ucfg.base_width = cfg.base_width;
  ucfg.emb_dim = cfg.emb_dim;
  DiffusionModel m = make_diffusion_model(ucfg, cfg.T, cfg.beta_start,
                                          cfg.beta_end, cfg.seed);

  int n = images.dim(0);
  Rng rng = Rng::derive(cfg.seed, 0x7124ull);
  nn::Adam opt;
  opt.lr = cfg.lr;
  ParamStore& store = m.eps_net->mutable_params();

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Seeded shuffle per epoch.
    for (int i = n - 1; i > 0; --i) {
      int j = static_cast<int>(rng.below(static_cast<uint64_t>(i) + 1));
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    for (int lo = 0; lo < n; lo += cfg.batch_size) {
      int hi = std::min(n, lo + cfg.batch_size);
      int b = hi - lo;
      int split = cfg.threads > 1 && b >= 4 ? b / 2 : b;

      BatchSlice s1 = make_slice(m, images, order, static_cast<size_t>(lo),
                                 static_cast<size_t>(lo + split), rng);
      std::vector<Tensor> g1, g2;
      double l1 = 0, l2 = 0;
      if (split < b) {
        BatchSlice s2 = make_slice(m, images, order, static_cast<size_t>(lo + split),
                                   static_cast<size_t>(hi), rng);
        std::thread worker(
            [&] { l2 = batch_loss_and_grads(m, s2, &g2); });
        l1 = batch_loss_and_grads(m, s1, &g1);
        worker.join();
        double wa = static_cast<double>(split) / b;
        double wb = 1.0 - wa;
        for (size_t i = 0; i < g1.size(); ++i) {
          g1[i] *= wa;
          g1[i] += g2[i].scaled(wb);
        }
        l1 = wa * l1 + wb * l2;
      } else {
        l1 = batch_loss_and_grads(m, s1, &g1);
      }
      if (!std::isfinite(l1))
        throw std::runtime_error(
            "train_toy: loss diverged (NaN) at epoch " + std::to_string(epoch));
      opt.step(store, g1);
    }
  }
  return m;
}

// ---- checkpoints ---------------------------------------------------------------

namespace {
constexpr char kCkptMagic[8] = {'G', 'I', 'N', 'V', 'C', 'K', 'P', '1'};

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
void put_f64(std::vector<unsigned char>& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}
uint32_t get_u32(const unsigned char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
  return v;
}
double get_f64(const unsigned char* p) {
  uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(p[i]) << (8 * i);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}
}  // namespace

void save_checkpoint(const DiffusionModel& m, const UnetConfig& cfg,
                     const std::string& path) {
  std::vector<unsigned char> out;
  out.insert(out.end(), kCkptMagic, kCkptMagic + 8);
  put_u32(out, 1);  // version
  put_u32(out, static_cast<uint32_t>(m.schedule.T));
  put_u32(out, static_cast<uint32_t>(cfg.height));
  put_u32(out, static_cast<uint32_t>(cfg.width));
  put_u32(out, static_cast<uint32_t>(cfg.channels));
  put_u32(out, static_cast<uint32_t>(cfg.base_width));
  put_u32(out, static_cast<uint32_t>(cfg.emb_dim));
  for (double b : m.schedule.beta) put_f64(out, b);

  const auto& entries = m.eps_net->params().entries;
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    put_u32(out, static_cast<uint32_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u32(out, static_cast<uint32_t>(e.value.shape.size()));
    for (int d : e.value.shape) put_u32(out, static_cast<uint32_t>(d));
    for (double v : e.value.data) put_f64(out, v);
  }
  uLong crc = crc32(0L, out.data(), static_cast<uInt>(out.size()));
  put_u32(out, static_cast<uint32_t>(crc));

  std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("save_checkpoint: rename failed");
}

DiffusionModel load_checkpoint(const std::string& path, UnetConfig* cfg_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)),
                                 std::istreambuf_iterator<char>());
  if (buf.size() < 44) throw std::runtime_error("load_checkpoint: truncated");
  uLong crc = crc32(0L, buf.data(), static_cast<uInt>(buf.size() - 4));
  if (static_cast<uint32_t>(crc) != get_u32(&buf[buf.size() - 4]))
    throw std::runtime_error("load_checkpoint: checksum mismatch");
  if (std::memcmp(buf.data(), kCkptMagic, 8) != 0)
    throw std::runtime_error("load_checkpoint: bad magic");
  size_t p = 8;
  uint32_t version = get_u32(&buf[p]); p += 4;
  if (version != 1)
    throw std::runtime_error("load_checkpoint: unknown version");
  int T = static_cast<int>(get_u32(&buf[p])); p += 4;
  UnetConfig cfg;
  cfg.height = static_cast<int>(get_u32(&buf[p])); p += 4;
  cfg.width = static_cast<int>(get_u32(&buf[p])); p += 4;
  cfg.channels = static_cast<int>(get_u32(&buf[p])); p += 4;
  cfg.base_width = static_cast<int>(get_u32(&buf[p])); p += 4;
  cfg.emb_dim = static_cast<int>(get_u32(&buf[p])); p += 4;

  DiffusionModel m;
  m.height = cfg.height;
  m.width = cfg.width;
  m.channels = cfg.channels;
  m.schedule.T = T;
  m.schedule.beta.resize(static_cast<size_t>(T));
  for (int t = 0; t < T; ++t) {
    m.schedule.beta[static_cast<size_t>(t)] = get_f64(&buf[p]);
    p += 8;
  }
  m.schedule.alpha.resize(static_cast<size_t>(T));
  m.schedule.alpha_bar.resize(static_cast<size_t>(T));
  m.schedule.sigma.resize(static_cast<size_t>(T));
  double prod = 1;
  for (int t = 0; t < T; ++t) {
    m.schedule.alpha[static_cast<size_t>(t)] = 1 - m.schedule.beta[static_cast<size_t>(t)];
    prod *= m.schedule.alpha[static_cast<size_t>(t)];
    m.schedule.alpha_bar[static_cast<size_t>(t)] = prod;
    m.schedule.sigma[static_cast<size_t>(t)] = std::sqrt(m.schedule.beta[static_cast<size_t>(t)]);
  }
  m.schedule.validate();

  m.eps_net = make_unet(cfg, 0);
  ParamStore& store = m.eps_net->mutable_params();
  uint32_t entries = get_u32(&buf[p]); p += 4;
  if (entries != store.entries.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch");
  for (uint32_t i = 0; i < entries; ++i) {
    uint32_t nlen = get_u32(&buf[p]); p += 4;
    std::string name(reinterpret_cast<const char*>(&buf[p]), nlen); p += nlen;
    if (name != store.entries[i].name)
      throw std::runtime_error("load_checkpoint: unexpected entry " + name);
    uint32_t ndim = get_u32(&buf[p]); p += 4;
    std::vector<int> shape;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(get_u32(&buf[p])));
      p += 4;
    }
    if (shape != store.entries[i].value.shape)
      throw std::runtime_error("load_checkpoint: shape mismatch in " + name);
    for (auto& v : store.entries[i].value.data) {
      v = get_f64(&buf[p]);
      p += 8;
    }
  }
  if (cfg_out) *cfg_out = cfg;
  return m;
}

}  // namespace ginv
