"""headsplat: mesh-bound Gaussian splat head avatars, audio-driven
parameter animation, and temporal stability scoring."""

__version__ = "0.1.0"
