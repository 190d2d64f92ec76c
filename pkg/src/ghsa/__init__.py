"""Hybrid Gaussian head avatars with a warped neural body texture.

Subpackages and modules:

* ``coremath``, ``gaussmodel``, ``renderer``: maths, 3D Gaussians, splatting
* ``rig``, ``neuraltex``, ``anchors``, ``model``: the avatar itself
* ``losses``, ``trainer``: three-stage fitting
* ``fastpath``: baked, network-free rendering
* ``avatario``: files, sequences, smoothing and the synthetic scene
"""

__version__ = "0.1.0"
