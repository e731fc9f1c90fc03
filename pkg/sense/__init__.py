"""sense-forge: sensible adversarial training, attacks and analytic risk oracles."""

__version__ = "0.1.0"
