"""High-resolution weakly-supervised CAM localization toolkit."""

__version__ = "0.1.0"
