"""Stochastic total-variation flow with Killing-field transport noise.

Modules: :mod:`geometry` (grids), :mod:`fields` (noise coefficients),
:mod:`operators` (discrete calculus and energies), :mod:`sde` (time stepping
and ensembles), :mod:`svi` (variational-inequality checks), :mod:`io`,
:mod:`config` and :mod:`cli`.
"""

__version__ = "0.1.0"
