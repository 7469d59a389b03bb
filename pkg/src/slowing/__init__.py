"""Particles slowing in a Poisson field of spherical inclusions.

Modules: ``profile`` (slowing law), ``micro`` (finite-radius dynamics),
``meso`` (limit jump process), ``kinetic`` (deterministic oracles),
``analysis`` (metrics and invariant checks), ``cli`` (experiments).
"""

__version__ = "0.1.0"
