"""Optimal control of Goursat-Darboux systems on non-rectangular domains.

Modules
-------
geometry   domains bounded by a monotone curve, grids, zones, quadrature
problem    dynamics, cost integrands, Hamiltonian and built-in problems
forward    Picard solver for the state equation and Volterra systems
riemann    Riemann function families and auxiliary co-states
adjoint    co-state by quadrature and by zone sweep, jump conditions
optimize   cost, gradient, needle variations, projected gradient
tsunami    characteristic reduction of the shallow-basin inverse problem
cli        batch driver
"""

__version__ = "0.1.0"
