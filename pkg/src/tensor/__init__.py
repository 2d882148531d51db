from src.tensor.core import (ConvSpec, GradientTape, Gradients, LayerParams, SgdConfig, Tensor,
                             backward)
from src.tensor.gradcheck import finite_diff_check
from src.tensor.ops import (channel_norm, conv2d_forward, conv3d_forward, leaky_relu, logistic,
                            maxpool2d, permute, reshape, select)
from src.tensor.optim import sgd_step
