from .checkpoint import load_checkpoint, save_checkpoint
from .layers import (
    ConvBlock, add_attention_block, add_batchnorm, add_conv, add_conv_transpose, add_embedding,
    add_layernorm, add_linear, attention_block, batchnorm2d, bn, conv, conv_transpose, dense,
    layernorm, linear, ln, mlp, multi_head_self_attention, patch_embed, patchify,
)
from .params import ParamStore, init_params
