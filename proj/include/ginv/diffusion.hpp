#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ginv/nn.hpp"
#include "ginv/tape.hpp"

namespace ginv {

// beta/alpha bookkeeping for a fixed forward process. Timesteps are
// 1-based (t in [1, T]); vectors are indexed t-1.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta, alpha, alpha_bar, sigma;

  static NoiseSchedule linear(int T, double beta_start, double beta_end);
  void validate() const;  // throws if the invariants fail

  double ab(int t) const { return alpha_bar[static_cast<size_t>(t - 1)]; }
  double a(int t) const { return alpha[static_cast<size_t>(t - 1)]; }
  double b(int t) const { return beta[static_cast<size_t>(t - 1)]; }
  double sig(int t) const { return sigma[static_cast<size_t>(t - 1)]; }
};

// Noise-prediction network interface. Input and output are (B,H,W,C);
// one timestep per batch element. Implementations must be reentrant for
// concurrent read-only use.
class EpsNet {
 public:
  virtual ~EpsNet() = default;
  virtual tape::Var forward(tape::Graph& g, tape::Var x,
                            const std::vector<int>& ts,
                            const nn::BoundParams& p) const = 0;
  virtual const nn::ParamStore& params() const = 0;
  virtual nn::ParamStore& mutable_params() = 0;
  virtual nn::BoundParams bind(tape::Graph& g, bool trainable) const {
    return nn::bind(g, params(), trainable);
  }
};

struct UnetConfig {
  int height = 16, width = 16, channels = 3;
  int base_width = 16;
  int emb_dim = 32;
};

// Small three-resolution U-Net with sinusoidal time embeddings and a
// zero-initialized output head (fresh models predict zero noise).
std::shared_ptr<EpsNet> make_unet(const UnetConfig& cfg, uint64_t seed);

struct DiffusionModel {
  NoiseSchedule schedule;
  std::shared_ptr<EpsNet> eps_net;
  int height = 0, width = 0, channels = 0;

  int64_t image_dim() const {
    return static_cast<int64_t>(height) * width * channels;
  }
};

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, images in [-1,1].
Tensor forward_sample(const DiffusionModel& m, const Tensor& x0, int t,
                      const Tensor& eps);

struct PriorLossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d x0
};

// Squared error between eps and the prediction at the diffused point,
// differentiated through the forward map and the network.
PriorLossResult prior_loss(const DiffusionModel& m, const Tensor& x0, int t,
                           const Tensor& eps);

// One reverse update; z must be zero when t == 1.
Tensor reverse_step(const DiffusionModel& m, const Tensor& x_t, int t,
                    const Tensor& z);

// Reverse chain from t_star down to 1 with seeded noise.
Tensor denoise_from(const DiffusionModel& m, const Tensor& x, int t_star,
                    uint64_t seed);

struct TrainConfig {
  int T = 200;
  double beta_start = 5e-4, beta_end = 0.1;
  int base_width = 16;
  int emb_dim = 32;
  int epochs = 20;
  int batch_size = 16;
  double lr = 2e-3;
  uint64_t seed = 0;
  int threads = 1;
};

// Trains the toy prior on images already normalized to [-1,1]; seeded and
// reproducible. Throws on divergence.
DiffusionModel train_toy(const Tensor& images, const TrainConfig& cfg);

// Build an untrained model (random weights) with the same plumbing.
DiffusionModel make_diffusion_model(const UnetConfig& cfg, int T,
                                    double beta_start, double beta_end,
                                    uint64_t seed);

// Mean per-sample denoising loss over seeded (t, eps) draws; the training
// objective evaluated on held-out data. Restricting [t_lo, t_hi] supports
// analytic fixtures.
double eval_denoising_loss(const DiffusionModel& m, const Tensor& images,
                           int draws, uint64_t seed, int t_lo = 1,
                           int t_hi = 0 /*0 = T*/);

// Lossless checkpoint container (see docs/formats.md).
void save_checkpoint(const DiffusionModel& m, const UnetConfig& cfg,
                     const std::string& path);
DiffusionModel load_checkpoint(const std::string& path, UnetConfig* cfg_out = nullptr);

}  // namespace ginv
