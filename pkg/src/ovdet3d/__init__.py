"""Image-guided open-vocabulary 3D detection core.

Submodules: geometry, datamodel, discovery, alignment, evaluation, simgen, cli.
"""

__version__ = "0.1.0"
