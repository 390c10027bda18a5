"""Desk-scale equivariant latent diffusion for 3D molecules."""

from .autodiff import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    adam_step,
    backward,
    finite_difference_check,
)
from .autoencoder import (
    AutoencoderParams,
    LatentPoint,
    ReconstructionReport,
    autoencoder_loss,
    decode,
    encode,
    kl_regularizer,
    project_cog,
    reconstruction_loss,
    reparameterize,
    train_autoencoder,
)
from .config import RunConfig, load_config, parse_config
from .data import (
    Molecule,
    SizeDistribution,
    SyntheticConfig,
    condition_value,
    featurize,
    gen_synthetic_templates,
    parse_xyz,
    sample_size,
    size_distribution,
    write_xyz,
)
from .diffusion import (
    DenoiserParams,
    NoiseSchedule,
    build_schedule,
    denoise_step,
    denoiser_predict,
    diffuse,
    ldm_loss,
    sample,
    train_ldm,
    vlb_weight,
)
from .egnn import (
    EgclParams,
    EgnnParams,
    PointCloudState,
    egcl_forward,
    egnn_forward,
    equivariance_audit,
)
from .metrics import (
    BondGraph,
    MetricsReport,
    atom_stability,
    evaluate_set,
    molecule_stability,
    predict_bonds,
    uniqueness,
    validity_proxy,
)

__version__ = "0.1.0"
