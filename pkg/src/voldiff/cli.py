"""Command-line surface tying the pipeline together.

Commands: gen-data, train-pvae, train-diffusion, sample, train-controlnet,
cond-sample, evaluate, reconstruct. Exit codes: 0 success, 2 usage/config
error, 3 runtime failure. ``MEDDIFF_RUN_DIR`` overrides the output root.
Every run writes a manifest with the resolved config hash and the content
hashes of its input checkpoints; concurrent runs must use distinct run
directories (a lock file enforces this).
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .biflownet import BiFlowNet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import BiFlowNetConfig, ExperimentConfig
from .control import (
    conditional_diffusion_loss,
    conditional_sample,
    encode_condition,
    finetune,
    init_adapter,
    load_adapter,
    save_adapter,
)
from .diffusion import LatentStats, cosine_schedule, diffusion_loss, sample
from .diffusion_train import train_estimator
from .errors import ConfigError, VoldiffError
from .metrics import (
    VolumeFeatureExtractor,
    diversity_msssim,
    embed_volumes,
    frechet_distance,
    mmd,
    psnr,
    seam_discontinuity,
)
from .pvae.models import SPATIAL_REDUCTION, LatentVolume
from .pvae.train import (
    Stage1Trainer,
    Stage2Trainer,
    load_pvae_model,
    save_pvae_model,
)
from .synthdata import (
    PHANTOM_FAMILIES,
    PhantomSpec,
    gen_phantom,
    load_pairs_manifest,
)
from .volume import PatchLayout, Volume, load_volume, normalize_minmax, save_volume

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class _RunDir:
    """Run directory with a lock file and a run manifest."""

    def __init__(self, path, config: ExperimentConfig, command: str):
        root = os.environ.get("MEDDIFF_RUN_DIR")
        self.path = Path(root) / Path(path).name if root else Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = self.path / ".lock"
        try:
            self.lock_fd = os.open(self.lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise VoldiffError(
                f"run directory {self.path} is locked by another run "
                f"(remove {self.lock} if stale)"
            ) from None
        self.manifest = {
            "run_id": f"{command}-{datetime.datetime.now():%Y%m%d-%H%M%S}",
            "command": command,
            "config_hash": config.config_hash,
            "config": config.to_dict(),
            "inputs": {},
            "outputs": [],
            "start": datetime.datetime.now().isoformat(),
        }

    def record_input(self, name, content_hash):
        self.manifest["inputs"][name] = content_hash

    def record_output(self, path):
        self.manifest["outputs"].append(str(path))

    def finish(self):
        self.manifest["end"] = datetime.datetime.now().isoformat()
        (self.path / "run_manifest.json").write_text(
            json.dumps(self.manifest, indent=2, default=str))
        os.close(self.lock_fd)
        self.lock.unlink(missing_ok=True)


def _load_dataset(data_dir) -> list[Volume]:
    data_dir = Path(data_dir)
    paths = sorted(data_dir.glob("*.raw"))
    if not paths:
        raise ConfigError(f"no volumes found in {data_dir}")
    return [load_volume(p) for p in paths]


def _classes_of(data_dir) -> list[str]:
    classes_file = Path(data_dir) / "classes.json"
    if classes_file.exists():
        return json.loads(classes_file.read_text())["classes"]
    vols = _load_dataset(data_dir)
    return sorted({v.class_tag for v in vols})


def _setup_runtime(config: ExperimentConfig):
    torch.set_num_threads(max(1, config.runtime.threads))
    torch.manual_seed(config.runtime.seed)


# --------------------------------------------------------------------- cmds
def cmd_gen_data(args, config: ExperimentConfig):
    families = config.data.families
    for fam in families:
        if fam not in PHANTOM_FAMILIES:
            raise ConfigError(
                f"invalid phantom family '{fam}'; valid families: "
                f"{', '.join(PHANTOM_FAMILIES)}"
            )
    run = _RunDir(args.out, config, "gen-data")
    try:
        rows = []
        rng = np.random.default_rng(config.runtime.seed)
        for i in range(config.data.count):
            family = families[i % len(families)]
            spec = PhantomSpec(family=family, extent=config.data.extent,
                               seed=int(rng.integers(0, 2 ** 31 - 1)))
            vol, labels = gen_phantom(spec)
            vol_path = run.path / f"vol_{i:04d}.raw"
            save_volume(vol, vol_path)
            labels_dir = run.path / "labels"
            labels_dir.mkdir(exist_ok=True)
            save_volume(labels, labels_dir / f"vol_{i:04d}")
            digest = hashlib.sha256(vol_path.read_bytes()).hexdigest()[:16]
            rows.append({"path": str(vol_path), "class_tag": family,
                         "seed": spec.seed, "content_hash": digest})
            run.record_output(vol_path)
        (run.path / "classes.json").write_text(
            json.dumps({"classes": sorted(set(families))}))
        with (run.path / "dataset.jsonl").open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row) + "\n")
        print(f"generated {len(rows)} volumes in {run.path}")
    finally:
        run.finish()


def cmd_train_pvae(args, config: ExperimentConfig):
    if args.stage == 2 and not args.init:
        raise ConfigError("--stage 2 requires --init with a stage-1 checkpoint")
    volumes = _load_dataset(args.data)
    run = _RunDir(args.out, config, f"train-pvae-stage{args.stage}")
    try:
        if args.stage == 1:
            trainer = Stage1Trainer(volumes, config.pvae, config.runtime.seed)
            log_path = run.path / "pvae_stage1_loss.csv"
            trainer.run(config.pvae.steps_stage1, log_path=log_path,
                        log_interval=config.runtime.log_interval)
            ckpt_path = run.path / "pvae_stage1.pt"
            save_pvae_model(trainer.model, ckpt_path, step=trainer.step_count)
            trainer.save(run.path / "pvae_stage1_resume.pt")
        else:
            model = load_pvae_model(args.init)
            run.record_input("init", load_checkpoint(args.init).content_hash)
            trainer = Stage2Trainer(model, volumes, config.pvae,
                                    config.runtime.seed)
            log_path = run.path / "pvae_stage2_loss.csv"
            trainer.run(config.pvae.steps_stage2, log_path=log_path,
                        log_interval=config.runtime.log_interval)
            unchanged = trainer.verify_frozen()
            print(f"encoder_hash_unchanged: {str(unchanged).lower()}")
            if not unchanged:
                raise VoldiffError("freeze contract violated in stage 2")
            ckpt_path = run.path / "pvae_stage2.pt"
            save_pvae_model(model, ckpt_path, step=trainer.step_count,
                            extras={"encoder_hash_unchanged": unchanged})
        run.record_output(ckpt_path)
        run.record_output(log_path)
        print(f"checkpoint: {ckpt_path}")
    finally:
        run.finish()


def _encode_dataset(volumes, pvae, classes):
    latents, class_ids, layouts = [], [], []
    for vol in volumes:
        if vol.class_tag not in classes:
            raise ConfigError(
                f"volume class '{vol.class_tag}' not among dataset classes "
                f"{classes}"
            )
        lat = pvae.encode_volume_patchwise(vol)
        latents.append(lat.features)
        class_ids.append(classes.index(vol.class_tag))
        layouts.append(lat.layout)
    return latents, class_ids, layouts[0]


def cmd_train_diffusion(args, config: ExperimentConfig):
    volumes = _load_dataset(args.data)
    classes = _classes_of(args.data)
    if len(classes) > config.biflownet.num_classes:
        raise ConfigError(
            f"dataset has {len(classes)} classes but config allows "
            f"{config.biflownet.num_classes}"
        )
    pvae = load_pvae_model(args.pvae)
    run = _RunDir(args.out, config, "train-diffusion")
    try:
        run.record_input("pvae", load_checkpoint(args.pvae).content_hash)
        latents, class_ids, layout = _encode_dataset(volumes, pvae, classes)
        sched = cosine_schedule(config.diffusion.timesteps,
                                config.diffusion.cosine_offset)
        print(f"schedule: T={sched.T} alpha_bar[1]={sched.alpha_bar[1]:.6f} "
              f"alpha_bar[T]={sched.alpha_bar[sched.T]:.6g}")
        model, stats, sched, last = train_estimator(
            latents, class_ids, config.diffusion, config.biflownet,
            seed=config.runtime.seed, sched=sched)
        print(f"final loss: {last:.4f}")
        ckpt_path = run.path / "diffusion.pt"
        ckpt = Checkpoint(
            tensors=dict(model.state_dict()),
            config={"architecture": model.arch_config(),
                    "diffusion": {"timesteps": sched.T,
                                  "cosine_offset": config.diffusion.cosine_offset}},
            step=config.diffusion.steps,
            extras={
                "latent_mean": stats.mean,
                "latent_std": stats.std,
                "classes": classes,
                "pvae_hash": load_checkpoint(args.pvae).content_hash,
                "patch_shape": list(layout.patch_shape),
                "original_shape": list(layout.original_shape),
                "padded_shape": list(layout.padded_shape),
                "schedule_hash": sched.schedule_hash,
            },
        )
        save_checkpoint(ckpt_path, ckpt)
        run.record_output(ckpt_path)
        print(f"checkpoint: {ckpt_path}")
    finally:
        run.finish()


def _load_estimator(path):
    ckpt = load_checkpoint(path)
    arch = dict(ckpt.config["architecture"])
    in_channels = arch.pop("in_channels")
    arch["unet_channels"] = tuple(arch["unet_channels"])
    model = BiFlowNet(BiFlowNetConfig(**arch), in_channels=in_channels)
    model.load_state_dict(ckpt.tensors)
    stats = LatentStats(mean=ckpt.extras["latent_mean"],
                        std=ckpt.extras["latent_std"])
    sched = cosine_schedule(ckpt.config["diffusion"]["timesteps"],
                            ckpt.config["diffusion"]["cosine_offset"])
    return model, stats, sched, ckpt


def _layout_from_ckpt(ckpt) -> PatchLayout:
    patch = tuple(ckpt.extras["patch_shape"])
    padded = tuple(ckpt.extras["padded_shape"])
    return PatchLayout(
        patch_shape=patch,
        grid_counts=tuple(s // p for s, p in zip(padded, patch)),
        padded_shape=padded,
        original_shape=tuple(ckpt.extras["original_shape"]),
    )


def cmd_sample(args, config: ExperimentConfig):
    model, stats, sched, ckpt = _load_estimator(args.diffusion)
    classes = ckpt.extras["classes"]
    if args.class_tag not in classes:
        raise ConfigError(
            f"unknown class '{args.class_tag}'; known classes: {classes}"
        )
    pvae = load_pvae_model(args.pvae)
    run = _RunDir(args.out, config, "sample")
    try:
        run.record_input("diffusion", ckpt.content_hash)
        run.record_input("pvae", load_checkpoint(args.pvae).content_hash)
        layout = _layout_from_ckpt(ckpt)
        lshape = (model.in_channels,) + tuple(
            s // SPATIAL_REDUCTION for s in layout.padded_shape)
        class_id = classes.index(args.class_tag)
        manifest_rows = []
        for i in range(args.count):
            gen = torch.Generator().manual_seed(args.seed + i)
            z = sample(model.as_estimator(), lshape, class_id, sched, gen)
            features = stats.destandardize(z)
            latent = LatentVolume(
                features=features,
                indices=torch.zeros(features.shape[1:], dtype=torch.long),
                layout=layout, class_tag=args.class_tag)
            vol = pvae.decode_volume_joint(latent)
            out_path = run.path / f"sample_{i:04d}.raw"
            save_volume(vol, out_path)
            run.record_output(out_path)
            manifest_rows.append({
                "seed": args.seed + i, "class_tag": args.class_tag,
                "schedule_hash": sched.schedule_hash, "steps": sched.T,
                "output": str(out_path),
            })
        with (run.path / "samples.jsonl").open("w") as fh:
            for row in manifest_rows:
                fh.write(json.dumps(row) + "\n")
        print(f"wrote {args.count} samples to {run.path}")
    finally:
        run.finish()


def cmd_train_controlnet(args, config: ExperimentConfig):
    if not Path(args.pairs).exists():
        raise ConfigError(f"pairs manifest not found: {args.pairs}")
    base, stats, sched, base_ckpt = _load_estimator(args.base)
    pvae = load_pvae_model(args.pvae)
    classes = base_ckpt.extras["classes"]
    run = _RunDir(args.out, config, "train-controlnet")
    try:
        run.record_input("base", base_ckpt.content_hash)
        pairs = []
        for row in load_pairs_manifest(args.pairs):
            target = load_volume(row["target"])
            cond = load_volume(row["condition"])
            z0 = stats.standardize(
                pvae.encode_volume_patchwise(target).features)
            c_task = encode_condition(cond, pvae, stats)
            class_id = classes.index(row["class_tag"]) \
                if row["class_tag"] in classes else 0
            pairs.append((z0, c_task, class_id))
        adapter = init_adapter(base)
        # Step-0 parity: adapter loss must equal the base's unconditional loss.
        gen = torch.Generator().manual_seed(config.runtime.seed)
        z0 = torch.stack([p[0] for p in pairs[:4]])
        c_task = torch.stack([p[1] for p in pairs[:4]])
        c = torch.tensor([p[2] for p in pairs[:4]])
        state = gen.get_state()
        with torch.no_grad():
            base_loss = float(diffusion_loss(base, z0, c, sched, gen))
            gen.set_state(state)
            adapter_loss = float(conditional_diffusion_loss(
                adapter, z0, c, c_task, sched, gen))
        print(f"step0 base loss: {base_loss:.6f}")
        print(f"step0 adapter loss: {adapter_loss:.6f}")
        finetune(adapter, pairs, sched, steps=config.controlnet.steps,
                 lr=config.controlnet.lr,
                 batch_size=config.controlnet.batch_size,
                 seed=config.runtime.seed)
        ckpt_path = run.path / "controlnet.pt"
        save_adapter(ckpt_path, adapter,
                     config={"architecture": base.arch_config()},
                     step=config.controlnet.steps,
                     extras={"base_ckpt_hash": base_ckpt.content_hash})
        run.record_output(ckpt_path)
        print(f"checkpoint: {ckpt_path}")
    finally:
        run.finish()


def cmd_cond_sample(args, config: ExperimentConfig):
    base, stats, sched, base_ckpt = _load_estimator(args.base)
    adapter_ckpt = load_checkpoint(args.adapter)
    if adapter_ckpt.extras.get("base_ckpt_hash") != base_ckpt.content_hash:
        raise VoldiffError(
            "adapter was fine-tuned against a different base checkpoint"
        )
    adapter = load_adapter(adapter_ckpt, base)
    pvae = load_pvae_model(args.pvae)
    cond_vol = load_volume(args.condition)
    classes = base_ckpt.extras["classes"]
    class_id = classes.index(cond_vol.class_tag) \
        if cond_vol.class_tag in classes else 0
    run = _RunDir(args.out, config, "cond-sample")
    try:
        run.record_input("base", base_ckpt.content_hash)
        run.record_input("adapter", adapter_ckpt.content_hash)
        gen = torch.Generator().manual_seed(args.seed)
        vol = conditional_sample(adapter, cond_vol, class_id, sched, pvae,
                                 stats, gen)
        out_path = run.path / "cond_sample.raw"
        save_volume(vol, out_path)
        run.record_output(out_path)
        print(f"wrote {out_path}")
    finally:
        run.finish()


def cmd_evaluate(args, config: ExperimentConfig):
    real = _load_dataset(args.real)
    gen_vols = _load_dataset(args.gen)
    metric_names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"mmd", "frechet", "diversity"}
    unknown = set(metric_names) - known
    if unknown:
        raise ConfigError(f"unknown metric(s) {sorted(unknown)}; known: {sorted(known)}")
    run = _RunDir(args.out, config, "evaluate")
    try:
        # Drop volumes whose extent disagrees with the majority of their set.
        def filter_set(vols, name):
            shapes = [v.shape for v in vols]
            mode = max(set(shapes), key=shapes.count)
            kept = [v for v in vols if v.shape == mode]
            skipped = len(vols) - len(kept)
            if skipped:
                print(f"{name}: skipped {skipped} volume(s) with mismatched extent")
            return kept

        real = filter_set(real, "real")
        gen_vols = filter_set(gen_vols, "generated")
        if real[0].shape != gen_vols[0].shape:
            raise ConfigError(
                f"real extent {real[0].shape} != generated extent "
                f"{gen_vols[0].shape}"
            )
        extractor = VolumeFeatureExtractor(config.metrics.feature_dim,
                                           config.metrics.extractor_seed)
        emb_real = embed_volumes(real, extractor)
        emb_gen = embed_volumes(gen_vols, extractor)
        rows = []
        if "mmd" in metric_names:
            rows.append(("mmd", mmd(emb_real, emb_gen)))
        if "frechet" in metric_names:
            rows.append(("frechet", frechet_distance(emb_real, emb_gen)))
        if "diversity" in metric_names and len(gen_vols) >= 2:
            rows.append(("diversity_msssim", diversity_msssim(gen_vols)))
        report = run.path / "report.csv"
        with report.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["metric", "value"])
            for name, value in rows:
                writer.writerow([name, f"{value:.8g}"])
                print(f"{name}: {value:.6g}")
            writer.writerow(["extractor_hash", extractor.identity_hash])
            writer.writerow(["config_hash", config.config_hash])
        run.record_output(report)
        print(f"report: {report}")
    finally:
        run.finish()


def cmd_reconstruct(args, config: ExperimentConfig):
    pvae = load_pvae_model(args.pvae)
    vol = load_volume(args.input)
    run = _RunDir(args.out, config, "reconstruct")
    try:
        latent = pvae.encode_volume_patchwise(vol)
        rec = pvae.decode_volume_joint(latent)
        out_path = run.path / "reconstruction.raw"
        save_volume(rec, out_path)
        run.record_output(out_path)
        print(f"psnr: {psnr(vol, rec):.3f}")
        print(f"seam: {seam_discontinuity(rec, latent.layout):.6f}")
        print(f"wrote {out_path}")
    finally:
        run.finish()


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voldiff",
        description="Desk-scale latent diffusion pipeline for 3D volumes",
    )
    parser.add_argument("--config", help="YAML experiment configuration")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-pvae", help="train the patch-volume autoencoder")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_pvae)

    p = sub.add_parser("train-diffusion", help="train the noise estimator")
    p.add_argument("--data", required=True)
    p.add_argument("--pvae", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("sample", help="draw unconditional samples")
    p.add_argument("--diffusion", required=True)
    p.add_argument("--pvae", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--class", dest="class_tag", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("train-controlnet", help="fine-tune the conditional adapter")
    p.add_argument("--base", required=True)
    p.add_argument("--pvae", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_controlnet)

    p = sub.add_parser("cond-sample", help="sample conditioned on a volume")
    p.add_argument("--adapter", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--pvae", required=True)
    p.add_argument("--condition", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cond_sample)

    p = sub.add_parser("evaluate", help="compare real and generated sets")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)
    p.add_argument("--metrics", default="mmd,frechet,diversity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("reconstruct", help="autoencoder round-trip utility")
    p.add_argument("--pvae", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = ExperimentConfig.load(args.config) if args.config \
            else ExperimentConfig()
        _setup_runtime(config)
        args.func(args, config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VoldiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
