#pragma once

#include <memory>

#include "ginv/tape.hpp"

namespace ginv {

// Semantics-preserving stochastic transforms; each enabled transform is
// applied independently per batch element with `apply_probability`.
// Operates on [0,1] images; outputs are clamped back into that range.
struct AugmentSpec {
  bool noise = true;
  double noise_sigma = 0.05;  // per-application sigma ~ U(0, noise_sigma)

  bool color_jitter = true;
  double brightness = 0.2, contrast = 0.2, saturation = 0.2;  // +- ranges

  bool perspective = true;
  double perspective_scale = 0.3;

  bool blur = true;
  int blur_kernel = 3;
  double blur_sigma_lo = 0.1, blur_sigma_hi = 1.0;

  double apply_probability = 0.5;
  int out_height = 0, out_width = 0;  // 0 = keep input size

  static AugmentSpec disabled(int out_h = 0, int out_w = 0) {
    AugmentSpec s;
    s.noise = s.color_jitter = s.perspective = s.blur = false;
    s.out_height = out_h;
    s.out_width = out_w;
    return s;
  }
};

// Builds A(x_hat): B independently transformed copies, resized to the
// output size, differentiable with respect to x_hat. x_hat is a
// (1,H,W,C) var; the result is (B,Hout,Wout,C).
tape::Var make_batch_var(tape::Graph& g, tape::Var x_hat, int batch,
                         const AugmentSpec& spec, uint64_t seed);

// Plain-tensor convenience wrapper ((H,W,C) in, (B,Hout,Wout,C) out).
Tensor make_batch(const Tensor& x_hat, int batch, const AugmentSpec& spec,
                  uint64_t seed);

// Separable bilinear resize with antialiasing on downscale, as a sparse
// pixel map (out_h*out_w x in_h*in_w), shared and reused freely.
std::shared_ptr<tape::Csr> build_resize_map(int in_h, int in_w, int out_h,
                                            int out_w);

Tensor resize_image(const Tensor& img, int out_h, int out_w);

}  // namespace ginv
