"""Digital-twin-in-the-loop control co-design toolkit.

Joint optimization of physical design parameters and a stochastic control
policy against a simulation model, followed by deployment on a higher
fidelity plant, quantile-regression learning of the model/reality gap, and
re-optimization under the corrected, uncertainty-penalized model.
"""

__version__ = "0.1.0"
