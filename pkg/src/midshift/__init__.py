"""Midline shift quantification from head CT slices.

The pipeline estimates a dense diffeomorphic displacement field per axial
slice: paired denoising diffusion models supply a per-pixel evidence map and
counterfactual non-shift images, a velocity U-Net is integrated by scaling
and squaring into a displacement field, and the shift estimate is the largest
displacement magnitude converted to millimetres.
"""

__version__ = "0.1.0"

from .arrays import ArrayFormatError, read_array, write_array
from .config import (
    DeformTrainConfig,
    DiffusionTrainConfig,
    GenConfig,
    ScheduleConfig,
    TrainConfig,
    apply_overrides,
    load_train_config,
)
from .data import (
    ImageSlice,
    LandmarkAnnotation,
    PreprocessConfig,
    Volume,
    augment_rotation,
    load_dataset,
    load_volume,
    preprocess_slice,
    save_dataset,
    save_volume,
    select_slices,
)
from .deformation import (
    DeformNet,
    DeformNetConfig,
    integrate,
    max_displacement,
    sample_field,
    warp,
)
from .diffusion import (
    Denoiser,
    DenoiserConfig,
    DiffusionPair,
    GuidanceConfig,
    NoiseSchedule,
    add_noise,
    ddim_timesteps,
    diffusion_train_step,
    generate_negative,
    guided_noise,
    score_difference,
)
from .evaluation import EvalSummary, evaluate, render_overlay, write_summary
from .losses import (
    LossWeights,
    ceiling_loss,
    combine_losses,
    huber_loss,
    ramp_weight,
    smoothness_loss,
    warp_consistency_loss,
)
from .synthetic import (
    PhantomCase,
    PhantomSpec,
    export_dataset,
    generate_case,
    generate_dataset,
    load_truth_field,
)
from .training import (
    VolumePrediction,
    build_schedule,
    derive_seed,
    infer_volume,
    load_deform_checkpoint,
    load_pair_checkpoint,
    pretrain_diffusion,
    save_deform_checkpoint,
    save_pair_checkpoint,
    train_deformation,
)
