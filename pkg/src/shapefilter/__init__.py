"""Explicit and implicit shape filters for node-based shape optimization.

Submodules: ``mesh``, ``linalg``, ``fem``, ``explicit``, ``implicit``,
``responses``, ``optimizer``, ``studies``, ``fixtures`` and ``cli``. They are
not imported here so that the command-line entry point can configure thread
counts before numerical libraries load.
"""

__version__ = "0.1.0"
