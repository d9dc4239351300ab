"""Region retrieval for oblique astronaut photography over a tiled Earth."""
__version__ = "0.1.0"
