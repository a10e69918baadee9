"""Small numpy network engine: layers, BN, losses, Adam and FLOP counting."""
from .losses import (
    ce_soft_with_grad,
    contrastive_with_grad,
    kd_with_grad,
    log_softmax,
    loss_ce_soft,
    loss_contrastive,
    loss_kd,
    loss_prox,
    mse_with_grad,
    prox_with_grad,
    restricted_log_weights,
    restricted_softmax,
    softmax,
)
from .model import (
    ForwardTrace,
    Layer,
    ModelState,
    Role,
    activation,
    backward,
    batchnorm,
    build_model,
    conv,
    dense,
    flops,
    forward,
    forward_flops,
    predict,
    toy_cnn,
    toy_mlp,
)
from .optim import AdamHyper, AdamState, adam_step

__all__ = [name for name in dir() if not name.startswith("_")]
