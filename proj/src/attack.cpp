#include "ginv/attack.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ginv {

using namespace tape;
using nn::BoundParams;

namespace {

Tensor to_unit_range(const Tensor& x) {  // [-1,1] -> [0,1], clamped
  Tensor out = x;
  for (auto& v : out.data) v = std::min(1.0, std::max(0.0, 0.5 * (v + 1.0)));
  return out;
}

std::vector<int> expanded_labels(const LabelEstimate& labels, int batch) {
  auto out = labels.expand_sorted();
  if (static_cast<int>(out.size()) != batch)
    throw std::runtime_error("attack: label estimate does not cover the batch");
  return out;
}

void infer_attributes(const Tensor& image01, int victim_h, int victim_w,
                      const SemanticAdapter* adapter,
                      ReconstructionResult* result) {
  if (!adapter) return;
  Tensor at_victim = resize_image(image01, victim_h, victim_w);
  auto post = adapter->predict(at_victim);
  for (const auto& [attr, p] : post) {
    int arg = 0;
    for (size_t i = 1; i < p.size(); ++i)
      if (p[i] > p[static_cast<size_t>(arg)]) arg = static_cast<int>(i);
    result->h_c_hat[attr] = arg;
    result->h_c_posterior[attr] = p;
  }
}

// Synthetic gradient nodes of the victim loss with respect to every
// parameter, differentiable with respect to the input batch.
std::vector<Var> synthetic_gradient(Graph& g, const VictimModel& model,
                                    Var batch01, int batch,
                                    const std::vector<int>& labels) {
  BoundParams p = model.bind(g, true);
  Var logits = model.forward(g, batch01, p, batch);
  Var loss = nn::cross_entropy_mean(g, logits, labels);
  return backward(loss, p.vars);
}

}  // namespace

ReconstructionResult run_diffula(const GradientCapture& capture,
                                 const VictimModel& model,
                                 const DiffusionModel& prior,
                                 const LabelEstimate& labels,
                                 const SemanticAdapter* adapter,
                                 const AttackConfig& cfg) {
  validate_capture(capture, model);
  if (cfg.steps < 1) throw std::runtime_error("run_diffula: steps must be >= 1");
  if (cfg.t_star > prior.schedule.T)
    throw std::runtime_error("run_diffula: t_star exceeds prior T");
  const int batch = capture.batch_size;
  const auto ys = expanded_labels(labels, batch);
  const int ph = prior.height, pw = prior.width, pc = prior.channels;
  const int vh = model.spec().height, vw = model.spec().width;
  if (pc != model.spec().channels)
    throw std::runtime_error("run_diffula: prior/model channel mismatch");

  AugmentSpec aug = cfg.augment;
  aug.out_height = vh;
  aug.out_width = vw;

  ScheduleSpec tsched = cfg.time_schedule;
  tsched.kind = ScheduleSpec::Kind::time_cosine_linear;
  tsched.total_steps = cfg.steps;
  tsched.seed = cfg.seed;
  if (tsched.start_value > prior.schedule.T)
    throw std::runtime_error("run_diffula: time schedule exceeds prior T");
  ScheduleSpec zsched = cfg.zeta_schedule;
  zsched.kind = ScheduleSpec::Kind::zeta_cosine_ramp;
  zsched.total_steps = cfg.steps;

  ReconstructionResult res;
  res.mode = AttackConfig::Mode::diffula;
  res.optimizer_state_dim = static_cast<int64_t>(ph) * pw * pc;

  Rng init_rng = Rng::derive(cfg.seed, 0xA110ull);
  Tensor x0 = Tensor::randn({ph, pw, pc}, init_rng);

  const int layer_count = capture.layer_count();
  for (int i = 0; i < cfg.steps; ++i) {
    int tau = time_at(tsched, i);

    // Prior term: g_p = d/dx0 || eps - eps_theta(x_tau, tau) ||^2.
    Tensor g_p = Tensor::zeros(x0.shape);
    double prior_loss_value = 0.0;
    if (cfg.prior_enabled) {
      Rng erng = Rng::derive(cfg.seed, 0x1000000ull + static_cast<uint64_t>(i));
      Tensor eps = Tensor::randn(x0.shape, erng);
      auto pl = prior_loss(prior, x0, tau, eps);
      g_p = std::move(pl.grad);
      prior_loss_value = pl.loss;
    }

    // Gradient-matching term through the augmentation batch. The image
    // lives in diffusion space [-1,1]; the victim consumes [0,1].
    Graph g;
    Var x0v = g.leaf(x0.reshaped({1, ph, pw, pc}));
    Var unit = scale(add_scalar(x0v, 1.0), 0.5);
    Var batch01 = make_batch_var(g, unit, batch, aug,
                                 Rng::derive(cfg.seed, 0x2000000ull +
                                                           static_cast<uint64_t>(i))
                                     .next_u64());
    auto synth = synthetic_gradient(g, model, batch01, batch, ys);
    LayerWeighting lw = cfg.window_enabled
                            ? window_at_step(i, cfg.steps, layer_count, cfg.window)
                            : LayerWeighting::uniform(layer_count);
    Var dist = cfg.distance == "cosine-global"
                   ? global_cosine_distance_var(g, synth, capture)
                   : cosine_distance_var(g, synth, capture, lw);
    double gm_loss_value = dist.val().data[0];
    Tensor g_gm = backward(dist, {x0v})[0].val().reshaped(x0.shape);
    res.peak_graph_bytes = std::max(res.peak_graph_bytes, g.tensor_bytes());

    // Norm clipping against the prior gradient.
    double zeta = cfg.zeta_index_by_tau
                      ? zeta_at(zsched, [&] {
                          double t_hi = tsched.start_value, t_lo = tsched.end_value;
                          double s = (t_hi - tau) / std::max(1.0, t_hi - t_lo);
                          return static_cast<int>(std::lround(
                              s * (cfg.steps - 1)));
                        }())
                      : zeta_at(zsched, i);
    bool clipped = false;
    if (cfg.prior_enabled) {
      auto cr = clip_to_prior(g_gm, g_p, zeta);
      g_gm = std::move(cr.g);
      clipped = cr.clipped;
    }

    Tensor update = g_p;
    update += g_gm;
    if (cfg.record_updates) res.debug_updates.push_back(update);
    x0 -= update.scaled(cfg.lr);

    StepTrace tr;
    tr.gm_loss = gm_loss_value;
    tr.prior_loss = prior_loss_value;
    tr.tau = tau;
    tr.zeta = zeta;
    tr.clipped = clipped;
    tr.g_gm_norm = g_gm.norm();
    tr.g_p_norm = g_p.norm();
    res.traces.push_back(tr);

    if (!std::isfinite(gm_loss_value) || !x0.all_finite()) {
      res.aborted_non_finite = true;
      res.snapshots.emplace_back(i, to_unit_range(x0));
      break;
    }
    if (cfg.snapshot_every > 0 &&
        (i % cfg.snapshot_every == 0 || i == cfg.steps - 1))
      res.snapshots.emplace_back(i, to_unit_range(x0));
  }

  res.x_hat_raw = to_unit_range(x0);
  Tensor final_diff = x0;
  if (!res.aborted_non_finite && cfg.t_star >= 1)
    final_diff = denoise_from(prior, x0, cfg.t_star,
                              Rng::derive(cfg.seed, 0x3000000ull).next_u64());
  res.x_hat = to_unit_range(final_diff);
  res.images = {res.x_hat};
  infer_attributes(res.x_hat, vh, vw, adapter, &res);
  return res;
}

ReconstructionResult run_inverting(const GradientCapture& capture,
                                   const VictimModel& model,
                                   const LabelEstimate& labels,
                                   const SemanticAdapter* adapter,
                                   const AttackConfig& cfg) {
  validate_capture(capture, model);
  if (cfg.steps < 1)
    throw std::runtime_error("run_inverting: steps must be >= 1");
  const int batch = capture.batch_size;
  const auto ys = expanded_labels(labels, batch);
  const int vh = model.spec().height, vw = model.spec().width,
            vc = model.spec().channels;

  ReconstructionResult res;
  res.mode = AttackConfig::Mode::inverting;
  res.optimizer_state_dim = static_cast<int64_t>(batch) * vh * vw * vc;

  Rng init_rng = Rng::derive(cfg.seed, 0xA111ull);
  Tensor xs = Tensor::randn({batch, vh, vw, vc}, init_rng);
  nn::ParamStore opt_store;
  opt_store.add("xs", xs);
  nn::Adam opt;
  opt.lr = cfg.inverting_lr;

  LayerWeighting uniform = LayerWeighting::uniform(capture.layer_count());
  for (int i = 0; i < cfg.steps; ++i) {
    if (cfg.inverting_lr_decay) {
      double frac = static_cast<double>(i) / cfg.steps;
      opt.lr = cfg.inverting_lr * (frac < 0.5 ? 1.0 : (frac < 0.75 ? 0.1 : 0.01));
    }
    Graph g;
    Var xv = g.leaf(opt_store.at(0));
    auto synth = synthetic_gradient(g, model, xv, batch, ys);
    Var dist;
    if (cfg.distance == "cosine-global") {
      dist = global_cosine_distance_var(g, synth, capture);
    } else if (cfg.distance == "euclidean") {
      Var acc = g.constant_scalar(0.0);
      for (size_t l = 0; l < synth.size(); ++l)
        acc = add(acc, sq_norm(sub(synth[l],
                                   g.constant(capture.entries[l].second))));
      dist = acc;
    } else {
      dist = cosine_distance_var(g, synth, capture, uniform);
    }
    // Total-variation prior summed over the batch.
    Var flat = reshape(xv, {batch * vh * vw, vc});
    Var tv = g.constant_scalar(0.0);
    for (int b = 0; b < batch; ++b) {
      Var img = slice_rows(flat, b * vh * vw, (b + 1) * vh * vw);
      tv = add(tv, tv_prior_var(g, img, vh, vw, vc));
    }
    Var total = add(dist, scale(tv, cfg.lambda_tv));
    double gm_loss_value = dist.val().data[0];
    double tv_value = cfg.lambda_tv * tv.val().data[0];
    Tensor grad = backward(total, {xv})[0].val();
    res.peak_graph_bytes = std::max(res.peak_graph_bytes, g.tensor_bytes());

    StepTrace tr;
    tr.gm_loss = gm_loss_value;
    tr.prior_loss = tv_value;
    res.traces.push_back(tr);

    if (!std::isfinite(gm_loss_value) || !grad.all_finite()) {
      res.aborted_non_finite = true;
      break;
    }
    opt.step(opt_store, {grad});
    if (cfg.inverting_clamp) opt_store.at(0).clamp_(0.0, 1.0);
  }

  const Tensor& xs_final = opt_store.at(0);
  int64_t stride = static_cast<int64_t>(vh) * vw * vc;
  for (int b = 0; b < batch; ++b) {
    Tensor img({vh, vw, vc});
    std::copy_n(xs_final.data.begin() + b * stride, stride, img.data.begin());
    img.clamp_(0.0, 1.0);
    res.images.push_back(std::move(img));
  }
  res.x_hat_raw = res.images[0];
  res.x_hat = res.images[0];
  for (int b = 0; b < batch; ++b)
    res.snapshots.emplace_back(cfg.steps - 1, res.images[static_cast<size_t>(b)]);

  // Batch-ensemble attribute inference over the realism gate.
  if (adapter) {
    auto kept = ensemble_filter(res.images, *adapter);
    if (kept.empty()) {
      res.h_c_random_guess = true;
      Rng guess = Rng::derive(cfg.seed, 0x4000000ull);
      for (const auto& attr : adapter->attribute_names()) {
        auto p = adapter->predict(res.images[0]);
        size_t k = p.at(attr).size();
        res.h_c_hat[attr] = static_cast<int>(guess.below(k));
        res.h_c_posterior[attr].assign(k, 1.0 / static_cast<double>(k));
      }
    } else {
      std::map<std::string, std::vector<double>> acc;
      for (int idx : kept) {
        auto p = adapter->predict(res.images[static_cast<size_t>(idx)]);
        for (auto& [attr, post] : p) {
          auto& a = acc[attr];
          if (a.empty()) a.assign(post.size(), 0.0);
          for (size_t j = 0; j < post.size(); ++j) a[j] += post[j] / kept.size();
        }
      }
      for (auto& [attr, post] : acc) {
        int arg = 0;
        for (size_t j = 1; j < post.size(); ++j)
          if (post[j] > post[static_cast<size_t>(arg)]) arg = static_cast<int>(j);
        res.h_c_hat[attr] = arg;
        res.h_c_posterior[attr] = post;
      }
    }
  }
  return res;
}

}  // namespace ginv
