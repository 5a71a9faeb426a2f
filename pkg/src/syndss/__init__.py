"""Synonymous / nonsynonymous Dss scans for recombination vs. convergent evolution."""

__version__ = "0.1.0"
