"""Information-latency (age of information) co-simulator and policy library."""

__version__ = "0.1.0"
