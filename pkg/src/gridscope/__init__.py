"""gridscope: sensor fusion and analytics for radial distribution feeders."""

__version__ = "0.1.0"
