#pragma once

// Finite-difference verification of every analytic gradient in the pipeline,
// in 64-bit arithmetic at tiny scale.

#include <cstdint>
#include <string>
#include <vector>

namespace ma3 {

struct GradcheckOptions {
  int trials = 100;
  std::uint64_t seed = 0;
  double step = 1e-5;
  int sampled_coords = 24;  // parameters checked per trial for network components
  bool sign_bug = false;    // self-test: negate the adversary-chain gradient
};

/// "default" (100 trials), "quick" (10 trials) or "forced-bug"; anything else throws ConfigError.
GradcheckOptions gradcheck_preset(const std::string& name);

struct GradcheckComponent {
  std::string name;
  double max_rel_error = 0;  // max over trials of relative_error(g, g_fd)
  int trials = 0;
  int skipped = 0;  // coordinates whose one-sided differences disagree (kink inside the stencil)
};

struct GradcheckReport {
  std::vector<GradcheckComponent> components;
  const GradcheckComponent& worst() const;
  bool passed(double tolerance = 1e-3) const { return worst().max_rel_error <= tolerance; }
};

/// Components:
///   warp.image, warp.affine      8x8 images, affine entries within 0.2 of identity
///   embed.eval, embed.train      |embed|^2, 2 blocks x 8 filters, h_dim 32, 16x16 input
///   chain.classifier             2-way 1-shot loss through prototypes w.r.t. classifier params
///   chain.adversary              L - lambda * reg through warp and classifier w.r.t. adversary params
GradcheckReport run_gradcheck(const GradcheckOptions& opt);

/// Relative error of two gradient vectors (L2 norm of the difference over the larger norm), with norms floored at 1e-8.
double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

}  // namespace ma3
