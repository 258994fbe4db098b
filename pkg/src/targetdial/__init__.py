"""Target-driven dialogue strategy selection at desk scale.

A numpy library that learns which collector strategies move a call toward
its target, picks the best strategy per turn under a streaming context
tracker, and evaluates the result against flow/cloning baselines with
bias-corrected ranking metrics and a planted-effect simulator.
"""

__version__ = "0.1.0"
