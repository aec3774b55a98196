"""Single-shot spatiospectral autofocus on a procedural slide simulator."""

__version__ = "0.1.0"
