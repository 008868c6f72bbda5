"""Single-view RGB-D scene completion.

From one RGB-D frame: render rotated partial views, mask the inpaintable
region with surface-aware occlusion reasoning, inpaint via a pluggable
backend, lift inpainted views to 3D by normal-guided depth optimization,
and fuse viewpoints under a cross-view consistency rule into a colored
point cloud.
"""

__version__ = "0.1.0"
