"""Open-set RF emitter recognition with learnable class prototypes."""

__version__ = "0.1.0"
