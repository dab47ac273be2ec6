"""Particle-mesh Vlasov-Poisson simulation under an external magnetic control field.

Modules
-------
phase_space      initial datum, marker lattice, support radii, checkpoints
fields           parametrized magnetic fields, V-norm quadrature, admissible ball
poisson          charge deposit, free-space potential, electric field
characteristics  Boris characteristics, flow maps and Jacobians
vlasov           self-consistent runs, diagnostics, Lipschitz probe
control          tracking cost and projected-descent optimizer
cli              ``vpcontrol`` batch front end
"""

__version__ = "0.1.0"
