"""Two-stage autoencoder training.

Stage 1 trains encoder, codebook, patch decoder, and discriminator on random
grid-aligned patches. Stage 2 clones the patch decoder into a joint decoder
and fine-tunes it (plus the discriminator) on whole volumes while encoder and
codebook stay frozen; latents are precomputed once, so the training graph
never touches the encoder.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch
from torch import nn

from ..checkpoint import Checkpoint, load_checkpoint, module_param_hash, save_checkpoint
from ..config import PvaeConfig
from ..errors import CheckpointError, TrainingDivergedError, VolumeError
from ..volume import Volume, pad_to_patch_grid, partition, random_triplane_index
from .losses import adv_loss, total_ae_loss, triplane_loss, vq_loss
from .models import SPATIAL_REDUCTION, PvaeModel, TriplaneFeatureNet


def _random_slice(x: torch.Tensor, axis: int, index: int) -> torch.Tensor:
    # x: (B, 1, h, w, d) -> (B, 1, a, b) slice along one spatial axis
    return x.select(dim=2 + axis, index=index)


def _check_finite(step, **components):
    for name, value in components.items():
        if not torch.isfinite(value).all():
            raise TrainingDivergedError(
                f"non-finite {name} at step {step}: "
                + ", ".join(f"{k}={float(v):.4g}" for k, v in components.items()
                            if torch.isfinite(v).all())
            )


class _LossLog:
    def __init__(self, path):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not self.path.exists():
                with self.path.open("w", newline="") as fh:
                    csv.writer(fh).writerow(
                        ["step", "loss_total", "loss_vq", "loss_adv", "loss_tp"]
                    )

    def append(self, step, total, vq, adv, tp):
        if self.path:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(
                    [step, f"{total:.6f}", f"{vq:.6f}", f"{adv:.6f}", f"{tp:.6f}"]
                )


class Stage1Trainer:
    """Patch-wise training loop with checkpoint/resume support."""

    def __init__(self, volumes, cfg: PvaeConfig, seed: int = 0,
                 model: PvaeModel | None = None):
        self.cfg = cfg
        self.seed = seed
        torch.manual_seed(seed)
        self.model = model if model is not None else PvaeModel(
            patch_shape=cfg.patch_shape, codebook_size=cfg.codebook_size,
            code_dim=cfg.code_dim, channels=cfg.channels,
            lambda_adv=cfg.lambda_adv, lambda_tp=cfg.lambda_tp,
        )
        self.phi = TriplaneFeatureNet(seed=0)
        pool = []
        for vol in volumes:
            patches, _ = partition(vol, cfg.patch_shape)
            pool.extend(patches)
        self.patch_pool = np.stack(pool).astype(np.float32)
        ae_params = (list(self.model.encoder.parameters())
                     + list(self.model.quantizer.parameters())
                     + list(self.model.patch_decoder.parameters()))
        self.opt_ae = torch.optim.Adam(ae_params, lr=cfg.lr_stage1)
        self.opt_d = torch.optim.Adam(self.model.discriminator.parameters(),
                                      lr=cfg.lr_stage1)
        self.rng = np.random.default_rng(seed + 1)
        self.step_count = 0
        self.last_loss: float | None = None

    def step(self) -> dict:
        cfg = self.cfg
        self.step_count += 1
        idx = self.rng.integers(0, len(self.patch_pool), size=cfg.batch_size)
        x = torch.from_numpy(self.patch_pool[idx])[:, None]
        z = self.model.encoder(x)
        z_q_st, _, z_q = self.model.quantizer(z, update_usage=True)
        x_rec = self.model.patch_decoder(z_q_st)

        loss_vq, _ = vq_loss(x, x_rec, z, z_q)
        triple = random_triplane_index(self.model.patch_shape, self.rng)
        loss_tp = triplane_loss(x[0, 0], x_rec[0, 0], self.phi, triple)
        axis = int(self.rng.integers(0, 3))
        sl = int(self.rng.integers(0, self.model.patch_shape[axis]))
        x2d = _random_slice(x, axis, sl)
        x2d_rec = _random_slice(x_rec, axis, sl)
        disc_active = self.step_count > cfg.disc_warmup
        if disc_active:
            gen_term, _ = adv_loss(self.model.discriminator, x2d, x2d_rec)
        else:
            gen_term = x.new_zeros(())
        total = total_ae_loss(loss_vq, gen_term, loss_tp,
                              cfg.lambda_adv if disc_active else 0.0,
                              cfg.lambda_tp)
        _check_finite(self.step_count, loss_total=total, loss_vq=loss_vq,
                      loss_adv=gen_term, loss_tp=loss_tp)
        self.opt_ae.zero_grad()
        total.backward()
        self.opt_ae.step()

        if disc_active:
            _, disc_term = adv_loss(self.model.discriminator, x2d.detach(),
                                    x2d_rec.detach())
            self.opt_d.zero_grad()
            (-disc_term).backward()
            self.opt_d.step()

        if cfg.reseed_interval and self.step_count % cfg.reseed_interval == 0:
            self.model.quantizer.reseed_dead_codes(z.detach())

        self.last_loss = float(total.detach())
        return {
            "step": self.step_count,
            "loss_total": float(total.detach()),
            "loss_vq": float(loss_vq.detach()),
            "loss_adv": float(gen_term.detach()),
            "loss_tp": float(loss_tp.detach()),
        }

    def run(self, steps: int, log_path=None, log_interval: int = 1) -> dict:
        log = _LossLog(log_path)
        record = {}
        for _ in range(steps):
            record = self.step()
            if self.step_count % log_interval == 0:
                log.append(record["step"], record["loss_total"],
                           record["loss_vq"], record["loss_adv"],
                           record["loss_tp"])
        return record

    # ----------------------------------------------------------- checkpoints
    def save(self, path) -> str:
        ckpt = Checkpoint(
            tensors=dict(self.model.state_dict()),
            config={"pvae": self.cfg.__dict__ | {
                "patch_shape": list(self.cfg.patch_shape),
                "channels": list(self.cfg.channels)}},
            step=self.step_count,
            stage=1,
            extras={
                "opt_ae": self.opt_ae.state_dict(),
                "opt_d": self.opt_d.state_dict(),
                "np_rng": self.rng.bit_generator.state,
                "torch_rng": torch.get_rng_state(),
                "encoder_hash": module_param_hash(self.model.encoder),
                "seed": self.seed,
            },
        )
        return save_checkpoint(path, ckpt)

    @classmethod
    def resume(cls, path, volumes, cfg: PvaeConfig) -> "Stage1Trainer":
        ckpt = load_checkpoint(path)
        if ckpt.stage != 1:
            raise CheckpointError(f"expected a stage-1 checkpoint, got stage {ckpt.stage}")
        trainer = cls(volumes, cfg, seed=ckpt.extras.get("seed", 0))
        trainer.model.load_state_dict(ckpt.tensors)
        trainer.opt_ae.load_state_dict(ckpt.extras["opt_ae"])
        trainer.opt_d.load_state_dict(ckpt.extras["opt_d"])
        trainer.rng.bit_generator.state = ckpt.extras["np_rng"]
        torch.set_rng_state(ckpt.extras["torch_rng"])
        trainer.step_count = ckpt.step
        return trainer


def train_stage1(volumes, cfg: PvaeConfig, seed: int = 0, steps: int | None = None,
                 log_path=None) -> PvaeModel:
    """Run stage-1 patch-wise training and return the trained model."""
    trainer = Stage1Trainer(volumes, cfg, seed)
    trainer.run(steps if steps is not None else cfg.steps_stage1,
                log_path=log_path)
    return trainer.model


class Stage2Trainer:
    """Volume-wise fine-tuning of the joint decoder with frozen encoder and
    codebook. Latents are precomputed once at construction."""

    def __init__(self, model: PvaeModel, volumes, cfg: PvaeConfig, seed: int = 0):
        if model.stage == 1:
            model.begin_stage2()
        elif model.stage != 2:
            raise VolumeError(f"unexpected model stage {model.stage}")
        self.model = model
        self.cfg = cfg
        self.seed = seed
        torch.manual_seed(seed + 2)
        self.phi = TriplaneFeatureNet(seed=0)
        self.rng = np.random.default_rng(seed + 3)
        self.encoder_hash_before = module_param_hash(model.encoder)
        self.codebook_hash_before = module_param_hash(model.quantizer)
        # Precompute (padded volume, quantized latent, constant VQ side terms).
        self.items = []
        with torch.no_grad():
            for vol in volumes:
                padded = pad_to_patch_grid(vol.data, model.patch_shape)
                latent = model.encode_volume_patchwise(vol)
                z_pre = _encode_volume_features(model, padded, grad=False)
                side = (torch.linalg.vector_norm(z_pre - latent.features)
                        * 2.0)  # align + commit terms, both frozen constants
                self.items.append((torch.from_numpy(padded.astype(np.float32)),
                                   latent, float(side)))
        params = list(model.joint_decoder.parameters())
        self.opt_dec = torch.optim.Adam(params, lr=cfg.lr_stage2)
        self.opt_d = torch.optim.Adam(model.discriminator.parameters(),
                                      lr=cfg.lr_stage2)
        self.step_count = 0

    def step(self) -> dict:
        cfg = self.cfg
        self.step_count += 1
        padded, latent, side = self.items[
            int(self.rng.integers(0, len(self.items)))]
        x = padded[None, None]
        x_rec = self.model.joint_decoder(latent.features[None])
        recon = torch.linalg.vector_norm((x - x_rec).reshape(-1))
        loss_vq = recon + side
        triple = random_triplane_index(tuple(padded.shape), self.rng)
        loss_tp = triplane_loss(x[0, 0], x_rec[0, 0], self.phi, triple)
        axis = int(self.rng.integers(0, 3))
        sl = int(self.rng.integers(0, padded.shape[axis]))
        x2d = _random_slice(x, axis, sl)
        x2d_rec = _random_slice(x_rec, axis, sl)
        gen_term, _ = adv_loss(self.model.discriminator, x2d, x2d_rec)
        total = total_ae_loss(recon, gen_term, loss_tp,
                              cfg.lambda_adv, cfg.lambda_tp)
        _check_finite(self.step_count, loss_total=total, loss_vq=loss_vq,
                      loss_adv=gen_term, loss_tp=loss_tp)
        self.opt_dec.zero_grad()
        total.backward()
        self.opt_dec.step()
        _, disc_term = adv_loss(self.model.discriminator, x2d.detach(),
                                x2d_rec.detach())
        self.opt_d.zero_grad()
        (-disc_term).backward()
        self.opt_d.step()
        return {
            "step": self.step_count,
            "loss_total": float(total.detach()),
            "loss_vq": float(loss_vq.detach()),
            "loss_adv": float(gen_term.detach()),
            "loss_tp": float(loss_tp.detach()),
        }

    def run(self, steps: int, log_path=None, log_interval: int = 1) -> dict:
        log = _LossLog(log_path)
        record = {}
        for _ in range(steps):
            record = self.step()
            if self.step_count % log_interval == 0:
                log.append(record["step"], record["loss_total"],
                           record["loss_vq"], record["loss_adv"],
                           record["loss_tp"])
        return record

    def verify_frozen(self) -> bool:
        return (module_param_hash(self.model.encoder) == self.encoder_hash_before
                and module_param_hash(self.model.quantizer)
                == self.codebook_hash_before)


def train_stage2(model: PvaeModel, volumes, cfg: PvaeConfig, seed: int = 0,
                 steps: int | None = None, log_path=None) -> PvaeModel:
    """Run stage-2 volume-wise fine-tuning; raises if the freeze contract is
    violated."""
    trainer = Stage2Trainer(model, volumes, cfg, seed)
    trainer.run(steps if steps is not None else cfg.steps_stage2,
                log_path=log_path)
    if not trainer.verify_frozen():
        raise TrainingDivergedError("encoder/codebook changed during stage 2")
    return model


def save_pvae_model(model: PvaeModel, path, step: int = 0,
                    extras: dict | None = None) -> str:
    """Write a model-only checkpoint (no optimizer state)."""
    ckpt = Checkpoint(
        tensors=dict(model.state_dict()),
        config={"arch": model.arch_config()},
        step=step,
        stage=model.stage,
        extras={
            "encoder_hash": module_param_hash(model.encoder),
            "codebook_hash": module_param_hash(model.quantizer),
            **(extras or {}),
        },
    )
    return save_checkpoint(path, ckpt)


def load_pvae_model(path) -> PvaeModel:
    """Rebuild a model from a checkpoint written by :func:`save_pvae_model`
    or a stage-1 trainer checkpoint."""
    ckpt = load_checkpoint(path)
    cfg = ckpt.config.get("arch") or ckpt.config.get("pvae")
    if cfg is None:
        raise CheckpointError(f"{path} carries no architecture config")
    model = PvaeModel(
        patch_shape=tuple(cfg["patch_shape"]),
        codebook_size=cfg["codebook_size"],
        code_dim=cfg["code_dim"],
        channels=tuple(cfg["channels"]),
        lambda_adv=cfg.get("lambda_adv", 2.0),
        lambda_tp=cfg.get("lambda_tp", 4.0),
    )
    if ckpt.stage == 2:
        model.begin_stage2()
    model.load_state_dict(ckpt.tensors)
    return model


def _encode_volume_features(model: PvaeModel, padded: np.ndarray | torch.Tensor,
                            grad: bool) -> torch.Tensor:
    """Patch-wise encode+quantize into one latent grid, optionally keeping the
    full autograd graph (the 'naive' volume-wise variant)."""
    if isinstance(padded, np.ndarray):
        padded = torch.from_numpy(padded.astype(np.float32))
    h, w, d = model.patch_shape
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        rows = []
        for i in range(padded.shape[0] // h):
            cols = []
            for j in range(padded.shape[1] // w):
                deps = []
                for k in range(padded.shape[2] // d):
                    patch = padded[i * h:(i + 1) * h, j * w:(j + 1) * w,
                                   k * d:(k + 1) * d]
                    z = model.encoder(patch[None, None])
                    z_q_st, _, _ = model.quantizer(z)
                    deps.append(z_q_st[0] if grad else z[0])
                cols.append(torch.cat(deps, dim=3))
            rows.append(torch.cat(cols, dim=2))
        return torch.cat(rows, dim=1)


def training_graph_bytes(model: PvaeModel, vol: Volume, naive: bool) -> int:
    """Bytes of autograd state for one volume-wise training step.

    Counts tensors saved for backward during the forward pass plus gradient
    storage for every trainable parameter. The efficient path encodes under
    no_grad, so encoder activations and gradients never enter the graph.
    """
    if model.joint_decoder is None:
        raise VolumeError("stage-2 model required (joint decoder missing)")
    padded = pad_to_patch_grid(vol.data, model.patch_shape)
    saved = []

    def pack(t):
        saved.append(t.numel() * t.element_size())
        return t

    def unpack(t):
        return t

    frozen = []
    if naive:
        for p in list(model.encoder.parameters()) + [model.quantizer.codes]:
            if not p.requires_grad:
                frozen.append(p)
                p.requires_grad_(True)
    try:
        with torch.autograd.graph.saved_tensors_hooks(pack, unpack):
            features = _encode_volume_features(model, padded, grad=naive)
            x_rec = model.joint_decoder(features[None])
            target = torch.from_numpy(padded.astype(np.float32))[None, None]
            loss = torch.linalg.vector_norm((target - x_rec).reshape(-1))
            loss.backward()
        grad_bytes = sum(p.numel() * p.element_size()
                         for p in model.parameters() if p.grad is not None)
        model.zero_grad(set_to_none=True)
    finally:
        for p in frozen:
            p.requires_grad_(False)
    return sum(saved) + grad_bytes
