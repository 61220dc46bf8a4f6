"""Simulation of deterministic spin-photon cluster-state knitting.

Exact state algebra (:mod:`qknit.states`, :mod:`qknit.table`), the noisy
protocol model (:mod:`qknit.model`), Monte Carlo click streams
(:mod:`qknit.eventsim`), time-tag correlation (:mod:`qknit.correlator`),
tomography (:mod:`qknit.tomography`) and the ``qknit`` command line.
"""

__version__ = "0.1.0"
