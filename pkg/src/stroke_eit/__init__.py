"""EIT difference imaging for hemorrhage monitoring with graph U-net post-processing."""

__version__ = "0.1.0"
