"""Desk-scale driving-imitation rig.

Subsystems: a deterministic 2D driving world with an expert autopilot
(:mod:`driverig.world`, :mod:`driverig.raster`), demonstration datasets
and shard plans (:mod:`driverig.dataset`), a trajectory-density model
with exact likelihoods and verified gradients (:mod:`driverig.model`),
synchronous data-parallel training (:mod:`driverig.trainer`), a planning
agent (:mod:`driverig.agent`), and a scenario benchmark
(:mod:`driverig.benchmark`).
"""

__version__ = "0.1.0"
