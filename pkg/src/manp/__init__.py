"""Staggered-grid solver for Maxwell-Ampere-Nernst-Planck ion transport
with closed-form and neural divergence-free closures for the dummy field."""

__version__ = "0.1.0"

from . import diagnostics, grid, operators, scenarios, stepper, theta_net  # noqa: F401
