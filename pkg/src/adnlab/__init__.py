"""adnlab: a numerical laboratory for voltage stability and control of
converter-dominated electrical distribution networks."""

__version__ = "0.1.0"
