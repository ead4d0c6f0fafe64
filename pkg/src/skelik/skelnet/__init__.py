from .gradcheck import grad_check
from .layers import (DecoderBlock, EncoderBlock, FeedForward, MultiHeadAttention, ResidualHead,
                     kinematic_mask, masked_softmax)
from .model import (Predictor, SkelNet, SkelNetConfig, encode, forward, load_checkpoint,
                    mirror_test_infer, save_checkpoint)
from .rotations import (OrthogonalizeStats, axis_angle_exp, geodesic, sixdof_to_rotation,
                        symmetric_orthogonalize)
