"""Multi-camera BEV geometry: LID depth bins, foreground pseudo-points, sparse voxel encoding and deformable fusion."""

from .camera import Camera, CameraPose, CameraRig, Intrinsics, project, to_ego, unproject
from .depth_bins import LidBinning, bin_index, bin_median, bin_width, decode_depth, depth_distribution, ordinal_softmax
from .config import PipelineConfig
from .errors import OABevError
from .foreground import BBox2D, ForegroundMask, make_depth_targets, select_foreground
from .fusion import DeformableAttnParams, FusionStack, deformable_attention, dca_fuse, fuse, vsa_fuse
from .losses import LossWeights, combine_losses, ordinal_depth_loss
from .pipeline import PipelineResult, run, run_pipeline
from .pseudo3d import PseudoPointCloud, SparseVoxelGrid, VoxelGridSpec, generate_pseudo_points, voxelize
from .scenegen import Box3D, SceneSpec, SyntheticScene, bev_ground_truth, generate_scene, render_depth
from .voxelnet import BevFeatureMap, SparseConvLayer, VoxelEncoder, encode_voxels, flatten_z, sparse_conv_forward

__version__ = "0.1.0"
