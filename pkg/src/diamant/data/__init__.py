from .manifest import Manifest, Record, load_manifest, rebase_record, save_manifest
from .synthetic import (
    augment, gen_oracle_attention, gen_synthetic_dataset, minmax, render_sample,
    write_oracle_attention,
)
from .tensorfile import decode_tensor, encode_tensor, read_tensor, write_tensor
