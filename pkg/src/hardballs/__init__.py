"""Hard-ball gas on the flat torus: flow, linearization, bounds and experiments."""

__version__ = "0.1.0"
