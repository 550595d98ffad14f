"""paretoalign: preference-conditioned session recommendation with
simulated A/B experiments for offline/online metric alignment."""

__version__ = "0.1.0"
