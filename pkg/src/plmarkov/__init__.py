"""Simulation and verification lab for SGD with Markovian gradient noise.

Subpackages cover finite Markov chains and mixing certification, the Poisson
equation decomposition of the gradient noise, the SGD engine with 1/k step
schedules, three concrete problem families, the bound-constant calculator, and
a Monte Carlo harness with a CLI.
"""

__version__ = "0.1.0"
