from .augment import AugmentConfig, Batch, augment, augment_arrays, sample_rngs
from .dataset import (MotionDataset, MotionSample, consistency_error, generate_synthetic_dataset,
                      joint_limits, load_dataset, save_dataset, write_split_manifest)
from .losses import LossWeights, loss_terms, smooth_l1
from .loop import PRESETS, TrainConfig, TrainResult, lr_at, train, validate
from .normalize import (MeanPose, compute_mean_pose, denormalize_pose, denormalize_rotations,
                        normalize_pose, normalize_rotations)
