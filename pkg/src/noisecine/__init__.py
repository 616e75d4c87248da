"""Deterministic noise-transport engine for zero-shot video generation on top
of latent-diffusion image backends."""

from .backends import Backend, BackendCapabilities, MockBackend, MockConfig
from .core import (
    ChannelStats,
    ImageField,
    LatentField,
    SeededNoiseSpec,
    measure_stats,
    mix_seed,
    read_latent,
    sample_noise,
    write_latent,
)
from .crystal import (
    LatticeShift,
    MosaicPiece,
    RegionMosaic,
    RowShiftProfile,
    discretize_shear,
    glide,
    mosaic,
    roll,
    transform_conditioning,
)
from .latentvis import (
    ColorMap34,
    apply_colormap,
    fit_colormap,
    load_default_colormap,
    probe_idempotency,
    probe_roll,
)
from .liquid import (
    FlowField,
    KurtosisSpec,
    MotionPrimitive,
    VarianceReductionSpec,
    adjust_kurtosis,
    displacement_at,
    inject_noise,
    match_stats,
    parse_flow_map,
    reduce_variance,
    render_flow_map,
    warp_image,
    warp_latent,
)
from .metric import (
    SmoothnessReport,
    XTSlice,
    extract_slices,
    slice_smoothness,
    video_smoothness,
)
from .pipeline import (
    CrystalFrameTransform,
    DenoiseSchedule,
    LayerItem,
    LiquidOptions,
    SceneSpec,
    animate_layers,
    composite_seeds,
    generate_crystal,
    generate_liquid,
    image_to_video,
    seamless_upscale,
    vid2vid_tracked,
)

__version__ = "0.1.0"
