"""Spherical-harmonic CNN for sparse-to-dense HRTF magnitude interpolation."""
from .sh import (
    Direction,
    IllConditioned,
    ShBasisMatrix,
    ShCoefficients,
    SphericalGrid,
    assoc_legendre,
    build_sh_matrix,
    condition_number,
    isht,
    real_sh,
    sht_least_squares,
)
from .sphconv import (
    ConvBlockParams,
    ZonalKernelBank,
    conv_layer_forward,
    mapping_block,
    rotate_z,
    spectral_convolve,
    zonal_expand,
)
from .network import (
    ModelParams,
    init_model,
    load_checkpoint,
    lsd,
    magnitude_db,
    model_backward,
    model_forward,
    save_checkpoint,
)
from .optim import AdamState, TrainConfig, adam_step, train
from .data import (
    DatasetSplit,
    FrequencyAxis,
    HrtfField,
    fibonacci_grid,
    load_field,
    make_split,
    save_field,
    split_known,
    synth_subject,
)
from .evaluation import EvalReport, eval_unknown, export_slice, lsd_per_frequency, sh_baseline

__version__ = "0.1.0"
