"""Adaptive spherical binoctree ("sphoxel") structure for camera-centred scenes."""
from .binoctree import Binoctree, BuildConfig, build_initial, bfs_intersect, leaves, normalize_scene, subdivide, traverse
from .errors import SphoxelError
from .geom import Ray, SphericalCoord, SphoxelBounds, cart_to_sph, sph_to_cart, solid_angle
from .intersect import metrics_of, prism_of, ray_sphoxel_intersect
from .sampling import SampleCounts, compose_ray_samples, neus_weights, refine_fine, select_coarse

__version__ = "0.1.0"
