"""Post-processing of gridded forecasts by learning their systematic error."""
from ._kernels import BACKEND
from .baselines import (
    LinearMosModel,
    blur_baseline,
    decay_subtract,
    linear_mos_apply,
    linear_mos_fit,
)
from .grid import (
    Grid,
    TileSet,
    cos_lat_weights,
    gaussian_blur,
    global_grid,
    make_grid,
    neighborhood_mean,
    tile_field,
    untile,
)
from .nn import ModelConfig, ModelParams, RegionModels, init_model, postprocess, train
from .predictors import (
    BiasState,
    FeatureTensor,
    assemble_features,
    decay_bias,
    forecast_error,
    solar_position,
)
from .store import (
    Feature,
    FeatureManifest,
    FieldSet,
    read_field_set,
    validate_manifest,
    write_field_set,
)
from .synth import ScenarioConfig, gaussian_random_field, synth_pair_series
from .verification import (
    Climatology,
    SkillCard,
    acc,
    build_climatology,
    clsds,
    fss,
    log_spectral_distance,
    paired_significance,
    radial_power_spectrum,
    rmse,
    skill_card,
)

__version__ = "0.1.0"
