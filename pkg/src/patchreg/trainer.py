"""Unsupervised progressive training of the patch cascade.

The curriculum activates one scale at a time: with k scales active, every
iteration runs the cascade from the coarsest scale down to scale k-1 on
freshly sampled patch chains and optimizes the loss over the last
``min(loss_last_k, k)`` scales. Once all scales are active, training
continues for ``final_iters`` steps with a cosine-decaying learning rate.

Each iteration draws ``pairs_per_iter`` ordered image pairs and
``patches_per_pair`` patch chains per pair; patch placement rotates/scales
within the patch augmentation ranges, and each chain additionally sees the
moving image through its own random world affine (the moving augmentation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import cascade as casc
from . import geometry as geo
from . import volumes as vol
from .diffcore import clip_gradients, load_checkpoint, make_optimizer, save_checkpoint, seed_all
from .errors import IncompatibleSchedule, NonFiniteLoss, ParseError
from .heads import HeadConfig, head_state, load_head_state, make_head
from .losses import LossConfig, loss_terms

CONFIG_VERSION = 1


@dataclass
class TrainConfig:
    """Knobs for the training loop; defaults follow the full-size recipe."""

    seed: int = 0
    pairs_per_iter: int = 2
    patches_per_pair: int = 10
    iters_per_new_scale: int = 10_000
    final_iters: int = 40_000
    lr: float = 1e-3
    lr_end: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 2.0
    loss_last_k: int = 3
    desk_scale: float = 1.0
    checkpoint_every: int = 0  # 0 = only final
    log_every: int = 1
    patch_aug: geo.AugmentationRanges = field(
        default_factory=lambda: geo.AugmentationRanges(rot_deg=15.0, scale_lo=0.9, scale_hi=1.1)
    )
    moving_aug: geo.AugmentationRanges = field(
        default_factory=lambda: geo.AugmentationRanges(rot_deg=25.0, scale_lo=0.8, scale_hi=1.2, shift_mm=20.0)
    )
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("pairs_per_iter", "patches_per_pair", "iters_per_new_scale", "final_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.desk_scale <= 1.0:
            raise ValueError("desk_scale must be in (0, 1]")
        if self.grad_clip <= 0 or self.lr <= 0:
            raise ValueError("grad_clip and lr must be positive")

    @property
    def scaled_iters_per_new_scale(self) -> int:
        return max(1, round(self.iters_per_new_scale * self.desk_scale))

    @property
    def scaled_final_iters(self) -> int:
        return max(1, round(self.final_iters * self.desk_scale))


def lr_schedule(step: int, total: int, lr0: float = 1e-3, lr_end: float = 1e-5) -> float:
    """Cosine decay from lr0 at step 0 to lr_end at step == total."""
    if total <= 0:
        return lr_end
    u = min(max(step / total, 0.0), 1.0)
    return lr_end + 0.5 * (lr0 - lr_end) * (1.0 + math.cos(math.pi * u))


# ---------------------------------------------------------------------------
# config text format
# ---------------------------------------------------------------------------

_CONFIG_KEYS = {
    "version": int,
    "seed": int,
    "n_scales": int,
    "patch_size": int,
    "all_affine": lambda s: s.lower() in ("1", "true", "yes"),
    "pairs_per_iter": int,
    "patches_per_pair": int,
    "iters_per_new_scale": int,
    "final_iters": int,
    "lr": float,
    "lr_end": float,
    "weight_decay": float,
    "grad_clip": float,
    "loss_last_k": int,
    "desk_scale": float,
    "checkpoint_every": int,
    "similarity": str,
    "w_bending": float,
    "w_hinge": float,
    "patch_rot_deg": float,
    "patch_scale_lo": float,
    "patch_scale_hi": float,
    "moving_rot_deg": float,
    "moving_scale_lo": float,
    "moving_scale_hi": float,
    "moving_shift_mm": float,
}


def parse_config_text(text: str) -> dict:
    """Parse the ``key = value`` config format (# starts a comment)."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_KEYS:
            raise ParseError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError as exc:
            raise ParseError(f"config line {lineno}: bad value for {key}: {value!r}") from exc
    if values.get("version") != CONFIG_VERSION:
        raise ParseError(f"config must declare 'version = {CONFIG_VERSION}'")
    return values


def config_from_values(values: dict) -> tuple[TrainConfig, dict]:
    """Split parsed values into a TrainConfig and schedule-building kwargs."""
    schedule_args = {
        "n_scales": values.get("n_scales", 9),
        "patch_size": values.get("patch_size", 32),
        "all_affine": values.get("all_affine", False),
    }
    cfg = TrainConfig(
        seed=values.get("seed", 0),
        pairs_per_iter=values.get("pairs_per_iter", 2),
        patches_per_pair=values.get("patches_per_pair", 10),
        iters_per_new_scale=values.get("iters_per_new_scale", 10_000),
        final_iters=values.get("final_iters", 40_000),
        lr=values.get("lr", 1e-3),
        lr_end=values.get("lr_end", 1e-5),
        weight_decay=values.get("weight_decay", 1e-4),
        grad_clip=values.get("grad_clip", 2.0),
        loss_last_k=values.get("loss_last_k", 3),
        desk_scale=values.get("desk_scale", 1.0),
        checkpoint_every=values.get("checkpoint_every", 0),
    )
    aug = {}
    if "patch_rot_deg" in values or "patch_scale_lo" in values:
        cfg.patch_aug = geo.AugmentationRanges(
            rot_deg=values.get("patch_rot_deg", 15.0),
            scale_lo=values.get("patch_scale_lo", 0.9),
            scale_hi=values.get("patch_scale_hi", 1.1),
        )
    if any(k.startswith("moving_") for k in values):
        cfg.moving_aug = geo.AugmentationRanges(
            rot_deg=values.get("moving_rot_deg", 25.0),
            scale_lo=values.get("moving_scale_lo", 0.8),
            scale_hi=values.get("moving_scale_hi", 1.2),
            shift_mm=values.get("moving_shift_mm", 20.0),
        )
    loss_kw = {}
    if "w_bending" in values:
        loss_kw["w_bending"] = values["w_bending"]
    if "w_hinge" in values:
        loss_kw["w_hinge"] = values["w_hinge"]
    if values.get("similarity", "ncc") == "mi":
        cfg.loss = LossConfig.mutual_info(**loss_kw)
    elif loss_kw:
        cfg.loss = LossConfig(**loss_kw)
    return cfg, schedule_args


def load_train_config(path) -> tuple[TrainConfig, dict]:
    return config_from_values(parse_config_text(Path(path).read_text()))


# ---------------------------------------------------------------------------
# dataset preparation
# ---------------------------------------------------------------------------


def prepare_dataset(images) -> list[vol.ImageStack]:
    """Zero-crop, center at the origin, and append left-right mirrored copies."""
    prepared = [vol.center_at_origin(vol.crop_zeros(img)) for img in images]
    return prepared + [vol.mirror_lr(img) for img in prepared]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _iteration_plan(cfg: TrainConfig, n_scales: int):
    """Yield (iteration, active_scales, lr) over the whole run."""
    i = 0
    per = cfg.scaled_iters_per_new_scale
    for active in range(1, n_scales + 1):
        for _ in range(per):
            yield i, active, cfg.lr
            i += 1
    final = cfg.scaled_final_iters
    for k in range(final):
        yield i, n_scales, lr_schedule(k, max(final - 1, 1), cfg.lr, cfg.lr_end)
        i += 1


def build_heads(schedule: casc.ScaleSchedule, seed: int) -> dict:
    seed_all(seed)
    return {
        group: make_head(HeadConfig(schedule.kind_of_group(group), schedule.patch_size, group))
        for group in range(schedule.n_groups)
    }


def save_model(path, heads: dict, schedule: casc.ScaleSchedule, extra_meta: dict | None = None) -> None:
    tensors = {}
    for group, head in heads.items():
        tensors.update(head_state(head, group))
    meta = {"format": "patchreg-model", "schedule": schedule.to_meta()}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[dict, casc.ScaleSchedule, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != "patchreg-model":
        raise ParseError(f"{path} is not a model checkpoint")
    schedule = casc.ScaleSchedule.from_meta(meta["schedule"])
    heads = build_heads(schedule, seed=0)
    for group, head in heads.items():
        load_head_state(head, tensors, group)
        head.eval()
    return heads, schedule, meta


def _run_pair_cascade(
    fixed_img: vol.ImageStack,
    fixed_tv: casc.TorchVolume,
    moving_view: casc.TorchVolume,
    canvas: geo.Canvas,
    schedule: casc.ScaleSchedule,
    heads: dict,
    cfg: TrainConfig,
    active: int,
    rng: np.random.Generator,
):
    """Run one pair's chains through the active scales; return loss terms."""
    centers = vol.sample_patch_centers(fixed_img, cfg.patches_per_pair, rng)
    state = casc.start_chains(canvas, centers, schedule, cfg.patch_aug, rng)
    first_scored = active - min(cfg.loss_last_k, active)
    collected = []
    d_out = None
    for t in range(active):
        if t > 0:
            state = casc.descend(state, d_out, schedule.zoom(t - 1), rng)
        head = heads[schedule.head_group[t]]
        d_out = casc.block_forward(state, fixed_tv, moving_view, head)
        if t >= first_scored:
            p_f = casc.sample_world(fixed_tv, state.x_f)
            moved = casc.sample_world(moving_view, casc.moved_coordinates(state, d_out))
            phi = casc.normalized_moved(state, d_out)
            collected.append(loss_terms(p_f, moved, phi, cfg.loss))
    return collected


def train(
    cfg: TrainConfig,
    dataset: list,
    schedule: casc.ScaleSchedule,
    out_dir,
    step_callback=None,
    resume=None,
) -> Path:
    """Full curriculum over a prepared dataset; returns the model path.

    ``dataset`` must already be preprocessed (see :func:`prepare_dataset`)
    and hold at least two images. Writes ``model.ckpt`` and a JSONL training
    log into ``out_dir``; a non-finite loss dumps diagnostics and raises
    :class:`NonFiniteLoss`. ``resume`` continues from a saved model's
    iteration count (with a fresh optimizer).
    """
    if len(dataset) < 2:
        raise ValueError("training needs at least two images")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    start_iter = 0
    if resume is None:
        heads = build_heads(schedule, cfg.seed)
    else:
        heads, saved_schedule, meta = load_model(resume)
        if saved_schedule != schedule:
            raise IncompatibleSchedule("checkpoint was trained with a different schedule")
        start_iter = int(meta.get("iteration", 0))
        for head in heads.values():
            head.train()
    params = [p for head in heads.values() for p in head.parameters()]
    opt = make_optimizer(params, lr=cfg.lr, weight_decay=cfg.weight_decay)

    canvases = [geo.make_canvas(img) for img in dataset]
    torch_vols = [casc.as_torch_volume(img) for img in dataset]
    log_path = out_dir / "train_log.jsonl"
    model_path = out_dir / "model.ckpt"

    with open(log_path, "a" if resume is not None else "w") as log:
        for i, active, lr in _iteration_plan(cfg, schedule.n_scales):
            if i < start_iter:
                continue
            for group in opt.param_groups:
                group["lr"] = lr

            all_terms = []
            for _ in range(cfg.pairs_per_iter):
                fi, mi = rng.choice(len(dataset), size=2, replace=False)
                fixed_img, moving_img = dataset[fi], dataset[mi]
                t_ms = [
                    geo.world_augmentation(cfg.moving_aug, moving_img.center_world(), rng)
                    for _ in range(cfg.patches_per_pair)
                ]
                moving_view = casc.compose_view(torch_vols[mi], t_ms)
                all_terms.extend(
                    _run_pair_cascade(
                        fixed_img, torch_vols[fi], moving_view, canvases[fi],
                        schedule, heads, cfg, active, rng,
                    )
                )

            loss = torch.stack([terms["total"] for terms in all_terms]).mean()
            if not torch.isfinite(loss):
                _dump_diagnostics(out_dir, heads, schedule, i, active, all_terms)
                raise NonFiniteLoss(f"loss became non-finite at iteration {i} (see {out_dir}/crash.json)")

            opt.zero_grad()
            loss.backward()
            raw_norm = clip_gradients(params, cfg.grad_clip)
            post_norm = float(torch.sqrt(sum(p.grad.pow(2).sum() for p in params if p.grad is not None)))
            opt.step()

            record = {
                "iter": i,
                "active_scales": active,
                "lr": lr,
                "loss": float(loss.detach()),
                "grad_norm_raw": raw_norm,
                "grad_norm": post_norm,
                "terms": {
                    k: float(torch.stack([t[k] for t in all_terms]).mean().detach())
                    for k in ("global_sim", "local_sim", "bending", "hinge")
                },
            }
            if i % max(cfg.log_every, 1) == 0:
                log.write(json.dumps(record) + "\n")
            if step_callback is not None:
                step_callback(record, heads)
            if cfg.checkpoint_every and (i + 1) % cfg.checkpoint_every == 0:
                save_model(out_dir / f"ckpt_{i + 1:06d}.ckpt", heads, schedule, {"iteration": i + 1})

    final_iter = max(_total_iters(cfg, schedule.n_scales), start_iter)
    save_model(model_path, heads, schedule, {"iteration": final_iter, "seed": cfg.seed})
    return model_path


def _total_iters(cfg: TrainConfig, n_scales: int) -> int:
    return n_scales * cfg.scaled_iters_per_new_scale + cfg.scaled_final_iters


def _dump_diagnostics(out_dir: Path, heads, schedule, iteration, active, all_terms):
    save_model(out_dir / "crash.ckpt", heads, schedule, {"iteration": iteration, "crashed": True})
    info = {
        "iteration": iteration,
        "active_scales": active,
        "terms": [
            {k: float(v.detach()) for k, v in terms.items() if torch.isfinite(v)} for terms in all_terms
        ],
    }
    (out_dir / "crash.json").write_text(json.dumps(info, indent=1))
