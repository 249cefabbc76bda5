"""margin-forge: margin losses on the hypersphere, with the optimization
and training machinery needed to verify their extremal geometry."""

__version__ = "0.1.0"
