"""splatnav: pruned tile-based Gaussian splat rendering, a quadrotor
navigation environment, and adversarial domain-adaptation utilities."""

__version__ = "0.1.0"

API_VERSION = "1.0"
