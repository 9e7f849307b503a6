"""Optimization shared by both stages: AdamW, warmup+cosine schedule, run loops.

Runs are deterministic given (dataset, seed): initialization, epoch
shuffles, and mask plans all derive from the seed, never from global
state, so identical configurations produce bit-identical checkpoints
and interrupted runs resume bit-exactly.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import blobio, nn, stage1, stage2
from . import tensor as T
from .errors import DivergedRunError, InvalidInputError
from .scene import SceneBundle
from .tokenizer import SAM_GUIDED, TokenSet, knn_tokenize, point_regions, purity, sam_tokenize

TOKENIZER_SAM = "sam"
TOKENIZER_KNN = "knn"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule defaults at desk scale (paper-scale batch in PAPER_DEFAULTS)."""

    base_lr: float = 0.001
    weight_decay: float = 0.05
    batch_size: int = 8
    epochs: int = 100
    warmup_epochs: int = 10
    min_lr_ratio: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise InvalidInputError("base_lr must be > 0")
        if self.epochs < 0 or not (0 <= self.warmup_epochs <= max(self.epochs, 1)):
            raise InvalidInputError("need 0 <= warmup_epochs <= epochs")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


PAPER_DEFAULTS = TrainConfig(batch_size=64)


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay


def init_opt_state(params: nn.ModelParams) -> dict:
    return {
        "t": 0,
        "m": {n: np.zeros_like(t.data) for n, t in params.tensors.items()},
        "v": {n: np.zeros_like(t.data) for n, t in params.tensors.items()},
    }


def _copy_opt_state(state: dict) -> dict:
    return {
        "t": state["t"],
        "m": {k: v.copy() for k, v in state["m"].items()},
        "v": {k: v.copy() for k, v in state["v"].items()},
    }


def adamw_step(
    params: nn.ModelParams,
    state: dict,
    lr: float,
    weight_decay: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One AdamW update with bias correction; frozen parameters are untouched.

    Layer-norm affines and the mask query are excluded from decay.
    Raises DivergedRunError on a non-finite gradient.
    """
    state["t"] += 1
    t = state["t"]
    b1, b2 = betas
    for name in params.tensors:
        if params.frozen[name]:
            continue
        p = params.tensors[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergedRunError(t)
        m, v = state["m"][name], state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        wd = 0.0 if nn.no_decay(name) else weight_decay
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * p.data)


def grad_norm(params: nn.ModelParams) -> float:
    total = 0.0
    for name in params.trainable_names():
        g = params.tensors[name].grad
        if g is not None:
            total += float((g * g).sum())
    return math.sqrt(total)


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to base_lr * min_lr_ratio."""
    if not (0 <= step <= total_steps):
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return config.base_lr
    warmup_steps = (
        round(total_steps * config.warmup_epochs / config.epochs) if config.epochs > 0 else 0
    )
    if step < warmup_steps:
        return config.base_lr * step / warmup_steps
    if total_steps == warmup_steps:
        return config.base_lr
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.base_lr * (config.min_lr_ratio + (1.0 - config.min_lr_ratio) * cosine)


# ---------------------------------------------------------------------------
# Shared run plumbing

_SHUFFLE_STREAM = 0x5F1E


def _epoch_order(n_scenes: int, seed: int, epoch: int) -> np.ndarray:
    key = np.random.SeedSequence([_SHUFFLE_STREAM, seed, epoch]).generate_state(2, np.uint64)
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.permutation(n_scenes)


_METRIC_COLUMNS = [
    "epoch",
    "step",
    "lr",
    "loss",
    "l_ins",
    "l_token",
    "l_final",
    "grad_norm",
    "wall_ms",
]


class _MetricsWriter:
    def __init__(self, path: Path, append: bool):
        exists = path.exists()
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=_METRIC_COLUMNS)
        if not (append and exists):
            self._writer.writeheader()

    def row(self, **kwargs) -> None:
        self._writer.writerow({col: kwargs.get(col, "") for col in _METRIC_COLUMNS})

    def close(self) -> None:
        self._fh.close()


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def _mean_loss(losses: list[T.Tensor]) -> T.Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.mul(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# Stage 1


@dataclass(frozen=True)
class Stage1Config:
    k_groups: int = 16
    scale_mode: str = stage1.SCALE_MEAN_ONE
    reweight: bool = True
    tokenizer_mode: str = TOKENIZER_SAM
    min_points: int = 8
    knn_tokens: int = 0  # 0: one token per scene region
    knn_k: int = 0  # 0: ceil(n_points / n_tokens)
    beta: float = 1.0


@dataclass
class _PreparedScene:
    tokens: TokenSet
    targets: np.ndarray  # per token, mean-pooled 2D region features
    group_features: np.ndarray  # per token, max-pooled 2D region features
    groups: np.ndarray | None = None


def majority_regions(tokens: TokenSet, regions_of_points: np.ndarray) -> np.ndarray:
    """Per-token majority mask region among members; ties take the lowest id."""
    out = np.empty(len(tokens), dtype=np.int64)
    for i, tok in enumerate(tokens.tokens):
        labels = regions_of_points[tok.point_indices]
        labels = labels[labels >= 0]
        if len(labels) == 0:
            raise InvalidInputError("token has no members on masked pixels")
        ids, counts = np.unique(labels, return_counts=True)
        out[i] = ids[np.argmax(counts)]
    return out


def _prepare_scene(bundle: SceneBundle, cfg: Stage1Config) -> _PreparedScene:
    if cfg.tokenizer_mode == TOKENIZER_SAM:
        tokens = sam_tokenize(bundle, min_points=cfg.min_points)
        token_regions = tokens.region_ids()
    elif cfg.tokenizer_mode == TOKENIZER_KNN:
        n = cfg.knn_tokens if cfg.knn_tokens > 0 else bundle.region_count
        k = cfg.knn_k if cfg.knn_k > 0 else math.ceil(bundle.n_points / n)
        tokens = knn_tokenize(bundle.points, n=n, k=k)
        token_regions = majority_regions(tokens, point_regions(bundle))
    else:
        raise InvalidInputError(f"unknown tokenizer mode {cfg.tokenizer_mode!r}")
    targets = stage1.pool_features_by_region(
        bundle.feat2d, bundle.mask, token_regions, stage1.MEAN_POOLING
    )
    group_features = stage1.pool_features_by_region(
        bundle.feat2d, bundle.mask, token_regions, stage1.MAX_POOLING
    )
    return _PreparedScene(tokens=tokens, targets=targets, group_features=group_features)


def _scene_region_features(bundles: list[SceneBundle], pooling: str) -> np.ndarray:
    """Max- or mean-pooled features for every mask region across a dataset."""
    rows = []
    for bundle in bundles:
        ids = np.unique(bundle.mask[bundle.mask >= 0])
        rows.append(stage1.pool_features_by_region(bundle.feat2d, bundle.mask, ids, pooling))
    return np.concatenate(rows)


def _forward_tokens(bundle: SceneBundle, tokens: TokenSet, params: nn.ModelParams) -> T.Tensor:
    h = T.add(
        nn.embed_tokens(bundle, tokens, params),
        nn.pos_embed(nn.centroids_of(tokens), params),
    )
    return nn.encode(h, params)


@dataclass
class Stage1Result:
    checkpoint_dir: Path
    metrics: dict
    table: stage1.WeightTable
    centroids: np.ndarray


def _stage1_dataset_loss(
    prepared: list[_PreparedScene],
    bundles: list[SceneBundle],
    params: nn.ModelParams,
    table: stage1.WeightTable,
    cfg: Stage1Config,
) -> float:
    with T.no_grad():
        losses = [
            _stage1_scene_loss(bundles[i], prepared[i], params, table, cfg).item()
            for i in range(len(bundles))
        ]
    return float(np.mean(losses))


def _stage1_scene_loss(
    bundle: SceneBundle,
    prep: _PreparedScene,
    params: nn.ModelParams,
    table: stage1.WeightTable,
    cfg: Stage1Config,
) -> T.Tensor:
    f3d = stage1.project_3d(_forward_tokens(bundle, prep.tokens, params), params)
    if cfg.reweight:
        return stage1.stage1_loss(
            prep.targets, f3d, table, prep.groups, cfg.scale_mode, beta=cfg.beta
        )
    return stage1.uniform_stage1_loss(prep.targets, f3d, beta=cfg.beta)


def _stage1_eval(
    bundles: list[SceneBundle],
    params: nn.ModelParams,
    table: stage1.WeightTable,
    centroids: np.ndarray,
    cfg: Stage1Config,
) -> dict:
    """Held-out per-region cosine between projected 3D features and 2D targets."""
    cosines: list[np.ndarray] = []
    groups: list[np.ndarray] = []
    with T.no_grad():
        for bundle in bundles:
            tokens = sam_tokenize(bundle, min_points=cfg.min_points)
            targets = stage1.pool_region_features(
                bundle.feat2d, bundle.mask, tokens, stage1.MEAN_POOLING
            ).features
            max_feats = stage1.pool_region_features(
                bundle.feat2d, bundle.mask, tokens, stage1.MAX_POOLING
            ).features
            f3d = stage1.project_3d(_forward_tokens(bundle, tokens, params), params)
            cosines.append(stage1.region_cosines(targets, f3d.data))
            groups.append(stage1.assign_groups(max_feats, centroids))
    cos = np.concatenate(cosines)
    grp = np.concatenate(groups)
    per_group = [
        float(cos[grp == g].mean()) if np.any(grp == g) else float("nan")
        for g in range(table.n_groups)
    ]
    # Tail group: smallest training population among groups that actually
    # occur in the held-out scenes, so the tail metric is always defined.
    present = [g for g in range(table.n_groups) if np.any(grp == g)]
    tail_group = min(present, key=lambda g: (table.counts[g], g))
    return {
        "heldout_cosine_mean": float(cos.mean()),
        "heldout_group_cosines": per_group,
        "tail_group": int(tail_group),
        "heldout_tail_cosine": per_group[tail_group],
    }


def run_stage1(
    train_bundles: list[SceneBundle],
    eval_bundles: list[SceneBundle],
    arch: nn.Arch,
    train_cfg: TrainConfig,
    cfg: Stage1Config,
    out_dir: str | Path,
    resume: bool = False,
    stop_after_epochs: int | None = None,
) -> Stage1Result:
    """Dense distillation run: offline weight table, then weighted smooth-L1 training.

    ``stop_after_epochs`` bounds how many epochs this invocation processes
    (the schedule still spans the configured total); rerun with
    ``resume=True`` to continue bit-exactly.
    """
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"

    prepared = [_prepare_scene(b, cfg) for b in train_bundles]
    table, centroids = stage1.build_weight_table(
        _scene_region_features(train_bundles, stage1.MAX_POOLING),
        cfg.k_groups,
        train_cfg.seed,
    )
    stage1.save_weight_table(out_dir / "weight_table", table, centroids)
    for prep in prepared:
        prep.groups = stage1.assign_groups(prep.group_features, centroids)

    start_epoch = 0
    if resume:
        ckpt = nn.load_checkpoint(ckpt_dir)
        params, opt_state = ckpt.params, ckpt.opt_state
        steps_per_epoch = math.ceil(len(train_bundles) / train_cfg.batch_size)
        start_epoch = ckpt.step // steps_per_epoch
    else:
        params = nn.init_params(arch, train_cfg.seed)
        opt_state = init_opt_state(params)

    initial_loss = _stage1_dataset_loss(prepared, train_bundles, params, table, cfg)

    steps_per_epoch = math.ceil(len(train_bundles) / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    step = start_epoch * steps_per_epoch
    writer = _MetricsWriter(out_dir / "metrics.csv", append=resume)
    last_good = (params.copy(), _copy_opt_state(opt_state), step)

    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            if stop_after_epochs is not None and epoch >= start_epoch + stop_after_epochs:
                break
            last_good = (params.copy(), _copy_opt_state(opt_state), step)
            order = _epoch_order(len(train_bundles), train_cfg.seed, epoch)
            for batch in _batches(order, train_cfg.batch_size):
                t0 = time.perf_counter()
                params.zero_grad()
                losses = [
                    _stage1_scene_loss(train_bundles[i], prepared[i], params, table, cfg)
                    for i in batch
                ]
                loss = _mean_loss(losses)
                loss.backward()
                lr = lr_at(step, total_steps, train_cfg)
                adamw_step(
                    params,
                    opt_state,
                    lr,
                    train_cfg.weight_decay,
                    (train_cfg.beta1, train_cfg.beta2),
                    train_cfg.eps,
                )
                writer.row(
                    epoch=epoch,
                    step=step,
                    lr=f"{lr:.10g}",
                    loss=f"{loss.item():.10g}",
                    grad_norm=f"{grad_norm(params):.10g}",
                    wall_ms=f"{(time.perf_counter() - t0) * 1e3:.3f}",
                )
                step += 1
    except DivergedRunError:
        good_params, good_state, good_step = last_good
        nn.save_checkpoint(ckpt_dir, good_params, good_step, good_state)
        writer.close()
        raise
    writer.close()

    nn.save_checkpoint(ckpt_dir, params, step, opt_state)
    final_loss = _stage1_dataset_loss(prepared, train_bundles, params, table, cfg)
    train_purity = float(
        np.mean([purity(p.tokens, b.gt_region) for p, b in zip(prepared, train_bundles)])
    )
    metrics = {
        "stage": 1,
        "tokenizer": cfg.tokenizer_mode,
        "reweight": cfg.reweight,
        "initial_loss": initial_loss,
        "final_loss": final_loss,
        "train_token_purity": train_purity,
        "epochs": train_cfg.epochs,
        "steps": step,
        "seed": train_cfg.seed,
    }
    if eval_bundles:
        metrics.update(_stage1_eval(eval_bundles, params, table, centroids, cfg))
    blobio.dump_manifest(out_dir / "metrics.json", metrics)
    return Stage1Result(
        checkpoint_dir=ckpt_dir, metrics=metrics, table=table, centroids=centroids
    )


# ---------------------------------------------------------------------------
# Stage 2


@dataclass(frozen=True)
class Stage2Config:
    mask_ratio: float = 0.6
    init_from_teacher: bool = True
    normalize_targets: bool = False
    min_points: int = 8


@dataclass
class Stage2Result:
    checkpoint_dir: Path
    metrics: dict


def _stage2_scene_losses(
    bundle: SceneBundle,
    tokens: TokenSet,
    plan: nn.MaskPlan,
    teacher: nn.ModelParams,
    student: nn.ModelParams,
    cfg: Stage2Config,
) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    scene_rec = stage2.build_stage2_scene(bundle, tokens, plan, teacher, student)
    return stage2.stage2_loss(scene_rec, student, normalize_targets=cfg.normalize_targets)


def _stage2_dataset_eval(
    bundles: list[SceneBundle],
    token_sets: list[TokenSet],
    teacher: nn.ModelParams,
    student: nn.ModelParams,
    cfg: Stage2Config,
    seed: int,
    epoch: int,
    scene_offset: int = 0,
) -> dict:
    """Loss components plus pooled-feature cosine at fixed (seed, epoch) plans."""
    l_ins, l_token, l_final, raw_cos, ins_cos = [], [], [], [], []
    with T.no_grad():
        for i, (bundle, tokens) in enumerate(zip(bundles, token_sets)):
            plan = nn.make_mask_plan(len(tokens), cfg.mask_ratio, seed, scene_offset + i, epoch)
            a, b, c = _stage2_scene_losses(bundle, tokens, plan, teacher, student, cfg)
            l_ins.append(a.item())
            l_token.append(b.item())
            l_final.append(c.item())
            f_t, _ = stage2.teacher_forward(bundle, tokens, plan, teacher)
            f_s, _ = stage2.student_forward(bundle, tokens, plan, student)
            f_pred = stage2.predict_instance(f_s, student)
            raw_cos.append(T.cosine_sim(T.constant(f_s.data), T.constant(f_t)).item())
            ins_cos.append(T.cosine_sim(T.constant(f_pred.data), T.constant(f_t)).item())
    return {
        "l_ins": float(np.mean(l_ins)),
        "l_token": float(np.mean(l_token)),
        "l_final": float(np.mean(l_final)),
        "pooled_cosine": float(np.mean(raw_cos)),
        "instance_cosine": float(np.mean(ins_cos)),
    }


def run_stage2(
    train_bundles: list[SceneBundle],
    eval_bundles: list[SceneBundle],
    teacher_ckpt: str | Path,
    train_cfg: TrainConfig,
    cfg: Stage2Config,
    out_dir: str | Path,
    resume: bool = False,
    stop_after_epochs: int | None = None,
) -> Stage2Result:
    """Masked token prediction against a frozen stage-1 teacher."""
    train_cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out_dir / "checkpoint"

    teacher = nn.load_checkpoint(teacher_ckpt).params
    teacher.freeze_all()
    teacher_hash_before = teacher.byte_hash()

    token_sets = [sam_tokenize(b, min_points=cfg.min_points) for b in train_bundles]
    eval_tokens = [sam_tokenize(b, min_points=cfg.min_points) for b in eval_bundles]

    start_epoch = 0
    steps_per_epoch = math.ceil(len(train_bundles) / train_cfg.batch_size)
    if resume:
        ckpt = nn.load_checkpoint(ckpt_dir)
        student, opt_state = ckpt.params, ckpt.opt_state
        start_epoch = ckpt.step // steps_per_epoch
    elif cfg.init_from_teacher:
        student = teacher.copy()
        for name, t in student.tensors.items():
            student.frozen[name] = False
            t.requires_grad = True
        opt_state = init_opt_state(student)
    else:
        student = nn.init_params(teacher.arch, train_cfg.seed)
        opt_state = init_opt_state(student)

    initial = _stage2_dataset_eval(
        train_bundles, token_sets, teacher, student, cfg, train_cfg.seed, epoch=0
    )

    total_steps = train_cfg.epochs * steps_per_epoch
    step = start_epoch * steps_per_epoch
    writer = _MetricsWriter(out_dir / "metrics.csv", append=resume)
    last_good = (student.copy(), _copy_opt_state(opt_state), step)

    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            if stop_after_epochs is not None and epoch >= start_epoch + stop_after_epochs:
                break
            last_good = (student.copy(), _copy_opt_state(opt_state), step)
            order = _epoch_order(len(train_bundles), train_cfg.seed, epoch)
            for batch in _batches(order, train_cfg.batch_size):
                t0 = time.perf_counter()
                student.zero_grad()
                parts = []
                for i in batch:
                    plan = nn.make_mask_plan(
                        len(token_sets[i]), cfg.mask_ratio, train_cfg.seed, int(i), epoch
                    )
                    parts.append(
                        _stage2_scene_losses(
                            train_bundles[i], token_sets[i], plan, teacher, student, cfg
                        )
                    )
                l_final = _mean_loss([p[2] for p in parts])
                l_final.backward()
                lr = lr_at(step, total_steps, train_cfg)
                adamw_step(
                    student,
                    opt_state,
                    lr,
                    train_cfg.weight_decay,
                    (train_cfg.beta1, train_cfg.beta2),
                    train_cfg.eps,
                )
                writer.row(
                    epoch=epoch,
                    step=step,
                    lr=f"{lr:.10g}",
                    l_ins=f"{np.mean([p[0].item() for p in parts]):.10g}",
                    l_token=f"{np.mean([p[1].item() for p in parts]):.10g}",
                    l_final=f"{l_final.item():.10g}",
                    grad_norm=f"{grad_norm(student):.10g}",
                    wall_ms=f"{(time.perf_counter() - t0) * 1e3:.3f}",
                )
                step += 1
    except DivergedRunError:
        good_student, good_state, good_step = last_good
        nn.save_checkpoint(ckpt_dir, good_student, good_step, good_state)
        writer.close()
        raise
    writer.close()

    nn.save_checkpoint(ckpt_dir, student, step, opt_state)
    final = _stage2_dataset_eval(
        train_bundles, token_sets, teacher, student, cfg, train_cfg.seed, epoch=0
    )
    metrics = {
        "stage": 2,
        "mask_ratio": cfg.mask_ratio,
        "init_from_teacher": cfg.init_from_teacher,
        "initial_l_final": initial["l_final"],
        "final_l_final": final["l_final"],
        "initial_l_ins": initial["l_ins"],
        "final_l_ins": final["l_ins"],
        "initial_l_token": initial["l_token"],
        "final_l_token": final["l_token"],
        "teacher_hash_unchanged": teacher.byte_hash() == teacher_hash_before,
        "epochs": train_cfg.epochs,
        "steps": step,
        "seed": train_cfg.seed,
    }
    if eval_bundles:
        heldout = _stage2_dataset_eval(
            eval_bundles,
            eval_tokens,
            teacher,
            student,
            cfg,
            train_cfg.seed,
            epoch=0,
            scene_offset=len(train_bundles),
        )
        metrics["heldout_pooled_cosine"] = heldout["pooled_cosine"]
        metrics["heldout_instance_cosine"] = heldout["instance_cosine"]
        metrics["heldout_l_final"] = heldout["l_final"]
    blobio.dump_manifest(out_dir / "metrics.json", metrics)
    return Stage2Result(checkpoint_dir=ckpt_dir, metrics=metrics)
