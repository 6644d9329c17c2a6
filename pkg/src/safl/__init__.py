"""Loop-closure detection for LiDAR from adversarially learned map features.

Scans are fused into a local occupancy map; per-frame 3-D voxel grids and
2-D top views are extracted in a viewpoint-normalized frame; one adversarial
feature learner per map domain encodes them into compact latent codes whose
stitched concatenation is matched over sequences to propose loop closures.
"""

from .bigan import (BiGANBranch, BranchArchitecture, ValueEstimate,
                    bigan_value, discriminator_step, generator_step, stitch)
from .dataset import (MalformedFrame, MalformedPose, NoiseSpec, PointCloud,
                      Pose, inject_viewpoint_noise, load_dataset,
                      parse_pose_file, parse_velodyne_frame, write_dataset)
from .evaluation import (EvalConfig, EvalReport, compare_methods, evaluate,
                         label_matches, pr_curve, roc_curve,
                         storage_projection)
from .mapping import (LocalOctree, OctreeConfig, TopViewImage, VoxelGrid3D,
                      extract_voxel_grid, mapper_throughput, project_top_view)
from .matching import (MatchResult, SeqMatchConfig, difference_matrix,
                       feature_difference, sad_feature, sequence_match)
from .pipeline import (ExperimentConfig, MapExtractionConfig,
                       extract_map_pairs, loop_closure_experiment)
from .synth import SyntheticWorldSpec, generate_synthetic_sequence
from .training import (NonFiniteLoss, TrainConfig, TrainingPairSet,
                       infer_sequence, reweight, train, train_epoch,
                       unfamiliarity)

__version__ = "0.1.0"
