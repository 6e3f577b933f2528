"""Desk-scale encoder-decoder transformer laboratory.

Trains small models on synthetic translation tasks and measures how much
each residual sub-layer matters: masking-based contribution scores,
initialization-interpolation criticality scores, representation similarity,
signal-propagation probes, and the pruning/rewinding experiments built on
top of them.
"""

__version__ = "0.1.0"
