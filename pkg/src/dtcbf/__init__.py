"""Discrete-time control barrier functions with mixed-integer compositions.

Modules
-------
qp       dense dual active-set QP solver with KKT certification
cbf      partially control affine systems, barriers and safe input sets
micp     Boolean / piecewise compositions compiled to mixed-integer constraints
miqp     exact branch-and-bound for the resulting MIQPs
vehicle  lateral vehicle model and the lane-keeping controller problems
sim      closed-loop simulations, traces and metrics
cli      command-line entry point (``dtcbf``)
"""

__version__ = "0.1.0"
