"""
The compound Poisson-Gamma density
==================================

A Tweedie variable with power 1 < rho < 2 is a Poisson number of Gamma
jumps, so it puts an atom at zero and spreads the rest over (0, inf).
"""

import numpy as np

from sttd import TweedieParams, cdf, log_density_exact, log_density_surrogate, quantile, sample, zero_mass

p = TweedieParams(mu=1.0, phi=1.0, rho=1.5)

# probability of no trips at all
print(f"P(X = 0) = {zero_mass(p):.6f}  (exp(-2) = {np.exp(-2):.6f})")

# the continuous part, evaluated by summing the series
x = np.array([0.1, 0.5, 1.0, 2.0, 5.0])
print("density  ", np.round(np.exp(log_density_exact(x, p)), 6))

# the training surrogate keeps only the largest series term
print("surrogate", np.round([log_density_surrogate(v, p) for v in x], 4))
print("exact    ", np.round(log_density_exact(x, p), 4))

# the CDF starts at the atom, and the quantiles invert it
print(f"F(0) = {cdf(0.0, p):.6f},  F(2) = {cdf(2.0, p):.6f}")
for q in (0.1, 0.5, 0.9):
    print(f"q{int(q * 100):02d} = {quantile(q, p):.5f}")

# a seeded sample should agree with both
draws = sample(p, 200_000, seed=0)
print(f"sample: zeros {np.mean(draws == 0):.4f}, median {np.median(draws):.4f}, mean {draws.mean():.4f}")
