// Simulated logistic data, one short RMHMC chain, and the split-half check.
// Usage: logistic_demo [moves] [seed]

#include <cstdio>
#include <cstdlib>

#include "softabs/posterior.hpp"
#include "softabs/sampler.hpp"

using namespace softabs;

int main(int argc, char** argv) {
  const int moves = argc > 1 ? std::atoi(argv[1]) : 200;
  const std::uint64_t seed = argc > 2 ? std::strtoull(argv[2], nullptr, 10) : 7;

  const auto sim = simulate_logistic(1, 500, 8.0, seed);
  const Posterior post(logistic_model(1), sim.data);

  ChainConfig cfg;
  cfg.moves = moves;
  cfg.burnin = moves / 4;
  cfg.seed = seed;
  std::printf("d = %d, N = %d, eps = %g, C = %d\n", post.dim(), sim.data.size(), cfg.step_size, cfg.leapfrogs);

  const auto res = run_chain(post, post.initial_position(), cfg, [&](const MoveRecord& r) {
    if (r.move % 25 == 0)
      std::printf("move %4d  logpost %10.3f  accept %d  sweeps %.2f  %6.1f ms\n", r.move, r.logpost, r.accept,
                  r.sweeps_mean, r.wall_ms);
  });

  const auto lp = res.logpost(cfg.burnin);
  std::printf("acceptance %.3f, divergences %d\n", res.acceptance_rate(), res.divergences());
  if (lp.size() >= 10) std::printf("split-half rank-sum p = %.3f\n", wilcoxon_split_half(lp).p_value);

  const double c = std::exp(res.final_q[post.layout().hyper(Hyper::c_gauss)]);
  const double sigma = std::exp(res.final_q[post.layout().hyper(Hyper::sigma_gauss)]);
  std::printf("final c_g = %.3f, sigma_g = %.3f (simulated c* = %.3f)\n", c, sigma, sim.truth.c_star);
  return 0;
}
