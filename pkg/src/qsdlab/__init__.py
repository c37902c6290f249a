"""Numerical lab for quasi-stationary distributions of one-dimensional diffusions absorbed at 0.

Modules
-------
model    diffusion specification, boundary classification, infinite-QSD criterion
grid     scale-adapted grid with speed-measure weights and the I and K operators
eigen    eigenfunctions psi_lambda, the spectral bottom lambda0 and the QSDs nu_lambda
renewal  the renewal transform, moment ledgers and the ratio test
mc       Monte Carlo hitting times, Yaglom limits and jump-boundary occupation
cli      the ``qsd-lab`` command line
"""

__version__ = "0.1.0"
