"""Multi-layer class activation maps with lateral inhibition and collateral integration."""

__version__ = "0.1.0"
