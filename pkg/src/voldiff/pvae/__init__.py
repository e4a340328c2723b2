from .models import (
    LatentVolume,
    PatchDecoder,
    PatchEncoder,
    PvaeModel,
    SliceDiscriminator,
    TriplaneFeatureNet,
    VectorQuantizer,
)
from .losses import adv_loss, total_ae_loss, triplane_loss, vq_loss
from .train import (
    Stage1Trainer,
    Stage2Trainer,
    load_pvae_model,
    save_pvae_model,
    train_stage1,
    train_stage2,
    training_graph_bytes,
)

__all__ = [
    "LatentVolume",
    "PatchDecoder",
    "PatchEncoder",
    "PvaeModel",
    "SliceDiscriminator",
    "TriplaneFeatureNet",
    "VectorQuantizer",
    "adv_loss",
    "total_ae_loss",
    "triplane_loss",
    "vq_loss",
    "Stage1Trainer",
    "Stage2Trainer",
    "load_pvae_model",
    "save_pvae_model",
    "train_stage1",
    "train_stage2",
    "training_graph_bytes",
]
