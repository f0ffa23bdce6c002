"""Shear-flow heat-bath dynamics.

A tracer particle in a linear background flow u(q) = A q, modeled at three
levels of description that the package keeps numerically comparable:

* an event-driven hard-sphere heat bath of light atoms (``heatbath``),
* the Markov jump process of fast collisions (``jumps``),
* nonequilibrium Langevin dynamics with exact splitting steppers
  (``langevin``), plus the laminar-flow limit coefficients,
* Lees-Edwards molecular dynamics of a sheared Lennard-Jones fluid
  thermostatted by the same Langevin dynamics (``md``).

``analysis`` supplies the moment oracle and trajectory statistics used to
compare the levels, and ``cli`` exposes the runs as subcommands.
"""

from .flows import StrainRate, VelocityLaw, Moments, moment_phi, sphere_area, flow_propagator

__all__ = [
    "StrainRate",
    "VelocityLaw",
    "Moments",
    "moment_phi",
    "sphere_area",
    "flow_propagator",
]

__version__ = "0.1.0"
