from .model import (BETA_CLAMP, N_SHAPE, BodyModel, BodyTensors, PoseParams, ShapeParams,
                    build_toy_model, fk_numpy, forward_kinematics, load_body_model,
                    mirror_points, mirror_pose, mirror_rotations, save_body_model)
from .regressor import (JointRegressor, effective_support, fit_regressor, load_regressor,
                        planted_regressor, planted_weights, regress_keypoints, save_regressor)
from .skeleton import (ENDPOINT_NAMES, MIRROR, KeypointLayout, Skeleton, h36m_layout,
                       identity_layout, toy_skeleton)
