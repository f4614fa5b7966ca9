"""CAMs, correspondence distillation, refinement, losses and the network."""

from scripts.segmentation.cam import (
    DEFAULT_HI,
    DEFAULT_LO,
    IGNORE_INDEX,
    Cam,
    ClassifierHead,
    PseudoLabel,
    cam_to_pseudo_label,
    class_scores,
    compute_cam,
    normalize_cam,
    scores_to_pseudo_label,
    upsample_cam,
)
from scripts.segmentation.correspondence import (
    AffineTransform,
    CorrSample,
    apply_transform,
    corr_volume,
    equivariant_loss,
    map_positions,
    sample_positions,
    scd_loss,
    self_correspondence_loss,
)
from scripts.segmentation.varm import (
    VarmConfig,
    VarmKernel,
    correction_kernel,
    local_kernel,
    pixel_variation,
    refine,
    refine_label_map,
    refine_pseudo_label,
)
from scripts.segmentation.losses import (
    AffinityLabels,
    ImageLabel,
    LossWeights,
    aux_affinity_loss,
    build_affinity_labels,
    classification_loss,
    label_at_grid,
    reg_loss,
    segmentation_loss,
    total_loss,
)
from scripts.segmentation.model import (
    ModelConfig,
    ModelOutput,
    TSCDNet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
