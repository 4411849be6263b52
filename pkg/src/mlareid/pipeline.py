"""The alternating cluster/train loop with PK sampling and checkpointing.

Each clustering iteration extracts all features in eval mode, runs DBSCAN,
re-initializes the memory dictionary from the fresh clusters, then makes
one (configurable) pass of PK batches: forward in train mode, ClusterNCE
loss, Adam step, batch-hard memory update. Per-iteration randomness (the
memory pick, the batch order, augmentation) is derived from
(seed, iteration), so resuming from a checkpoint written at an iteration
boundary replays the remaining iterations bit-for-bit.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .attention import MODES
from .autodiff import Parameter, Tensor, zero_grads
from .backbone import (
    BackboneConfig,
    BackboneParams,
    build_backbone,
    extract_features,
    load_named_entries,
    named_entries,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .clustering import PseudoLabels, cluster_summary, dbscan, pairwise_cosine_distance
from .contrast import MemoryDictionary, batch_hard_update, cluster_nce_loss, init_memory
from .dataio import load_dataset, stack_pixels
from .errors import ConfigError, ContractError, DataFormatError, EmptyClusteringError, EpochSkip

REPORT_HEADER = "iter,K,noise_frac,mean_loss,lr,seconds"
FEATURE_CHUNK = 32  # fixed eval-extraction batch so runs stay bit-comparable

# per-iteration seed stream tags
_TAG_MEMORY = 1
_TAG_SAMPLER = 2
_TAG_AUGMENT = 3


@dataclass
class TrainConfig:
    clustering_iterations: int = 50
    epochs_per_iteration: int = 1
    batch_p: int = 4
    batch_k: int = 4
    lr0: float = 1.6e-4
    lr_decay: float = 0.1
    lr_decay_every: int = 20
    eps: float = 0.4
    min_pts: int = 4
    tau: float = 0.05
    mu: float = 0.1
    seed: int = 0
    attention_mode: str = "all"
    augment: bool = False
    bn_warmup_passes: int = 2

    def validate(self) -> None:
        if self.clustering_iterations < 0 or self.epochs_per_iteration < 1:
            raise ConfigError("iteration counts must be non-negative (epochs at least 1)")
        if self.bn_warmup_passes < 0:
            raise ConfigError("bn_warmup_passes must be non-negative")
        if self.batch_p * self.batch_k <= 1:
            raise ConfigError("batch P*K must exceed 1")
        if min(self.lr0, self.lr_decay, self.eps, self.tau) <= 0:
            raise ConfigError("lr0, lr_decay, eps and tau must be positive")
        if self.lr_decay_every < 1 or self.min_pts < 1:
            raise ConfigError("lr_decay_every and min_pts must be at least 1")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"mu must lie in [0,1], got {self.mu}")
        if self.attention_mode not in MODES:
            raise ConfigError(
                f"unknown attention mode {self.attention_mode!r}, expected one of {MODES}"
            )

    def echo_lines(self) -> list[str]:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]


def parse_config(path: str | Path) -> TrainConfig:
    """Flat ``key = value`` lines; keys must be TrainConfig field names."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read config {path}: {exc}") from exc
    return apply_config_lines(TrainConfig(), text.splitlines())


def apply_config_lines(cfg: TrainConfig, lines) -> TrainConfig:
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        kind = field_types[key]
        try:
            if kind == "int":
                updates[key] = int(value)
            elif kind == "float":
                updates[key] = float(value)
            elif kind == "bool":
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                updates[key] = value.lower() == "true"
            else:
                updates[key] = value
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value {value!r} for {key!r}") from None
    cfg = replace(cfg, **updates)
    cfg.validate()
    return cfg


@dataclass
class EpochReport:
    iteration: int
    k: int
    noise_frac: float
    mean_loss: float
    lr: float
    seconds: float
    skipped: bool = False

    def csv_row(self) -> str:
        return (
            f"{self.iteration},{self.k},{self.noise_frac:.17g},"
            f"{self.mean_loss:.17g},{self.lr:.17g},{self.seconds:.6f}"
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: lr0 scaled by lr_decay once per lr_decay_every epochs."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def pk_sampler(labels: PseudoLabels, p: int, k_img: int, seed: int) -> list[np.ndarray]:
    """One epoch of P-identity, K-image batches over all eligible clusters.

    Cluster order is a seeded permutation; a short final chunk is padded
    with distinct clusters drawn from the rest. Undersized clusters repeat
    members (each appears at least once); noise never enters a batch.
    """
    if labels.k < p:
        raise EpochSkip(f"only {labels.k} clusters for P={p}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(labels.k)
    members_of = {cid: np.flatnonzero(labels.labels == cid) for cid in range(labels.k)}
    batches: list[np.ndarray] = []
    for start in range(0, labels.k, p):
        chunk = order[start:start + p]
        if chunk.size < p:
            rest = np.array([c for c in order if c not in set(chunk.tolist())])
            chunk = np.concatenate([chunk, rng.choice(rest, size=p - chunk.size, replace=False)])
        picks: list[np.ndarray] = []
        for cid in chunk:
            members = members_of[int(cid)]
            if members.size >= k_img:
                picks.append(rng.choice(members, size=k_img, replace=False))
            else:
                extra = rng.choice(members, size=k_img - members.size, replace=True)
                picks.append(np.concatenate([members, extra]))
        batches.append(np.concatenate(picks))
    return batches


class AdamState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(
    params: list[Parameter],
    lr: float,
    state: AdamState,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam; a missing gradient counts as zero."""
    state.t += 1
    t = state.t
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class RunState:
    cfg: TrainConfig
    backbone: BackboneParams
    optim: AdamState
    pixels: np.ndarray  # train-split images [n,h,w,3]
    iteration: int = 0  # completed clustering iterations
    epoch: int = 0  # completed global epochs (drives the LR schedule)
    memory: MemoryDictionary | None = None


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def extract_all_features(pixels: np.ndarray, params: BackboneParams) -> np.ndarray:
    """Eval-mode features in fixed-size chunks (fixed so runs compare bit-wise)."""
    outs = []
    for start in range(0, pixels.shape[0], FEATURE_CHUNK):
        batch = Tensor(pixels[start:start + FEATURE_CHUNK])
        outs.append(extract_features(batch, params, training=False).data)
    return np.concatenate(outs, axis=0)


def bn_warmup(params: BackboneParams, pixels: np.ndarray, passes: int) -> None:
    """Settle batch-norm running stats with training-mode forward passes."""
    for _ in range(passes):
        for start in range(0, pixels.shape[0], FEATURE_CHUNK):
            extract_features(Tensor(pixels[start:start + FEATURE_CHUNK]), params, training=True)


def _augment_batch(pixels: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    """Seeded horizontal flip plus crop-from-padding, per image."""
    out = np.empty_like(pixels)
    h, w = pixels.shape[1:3]
    for i, img in enumerate(pixels):
        if rng.random() < 0.5:
            img = img[:, ::-1, :]
        padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        out[i] = padded[dy:dy + h, dx:dx + w]
    return out


def _dump_diagnostics(out_dir: Path, features: np.ndarray, labels: PseudoLabels, lr: float) -> Path:
    dump = out_dir / "diagnostics"
    dump.mkdir(parents=True, exist_ok=True)
    np.savetxt(dump / "features.csv", features, delimiter=",")
    np.savetxt(dump / "labels.csv", labels.labels, fmt="%d", delimiter=",")
    (dump / "lr.txt").write_text(f"{lr:.17g}\n")
    return dump


def train_iteration(state: RunState, out_dir: Path | None = None) -> EpochReport:
    """One clustering iteration: cluster, rebuild memory, train one pass."""
    cfg = state.cfg
    started = time.perf_counter()
    iteration = state.iteration

    features = extract_all_features(state.pixels, state.backbone)
    labels = dbscan(pairwise_cosine_distance(features), cfg.eps, cfg.min_pts)
    stats = cluster_summary(labels)
    lr = lr_at(state.epoch, cfg)

    def skip_report() -> EpochReport:
        state.iteration += 1
        state.epoch += cfg.epochs_per_iteration
        return EpochReport(
            iteration=iteration,
            k=stats.k,
            noise_frac=stats.noise_fraction,
            mean_loss=0.0,
            lr=lr,
            seconds=time.perf_counter() - started,
            skipped=True,
        )

    try:
        memory = init_memory(
            features, labels, _derived_seed(cfg.seed, iteration, _TAG_MEMORY),
            tau=cfg.tau, mu=cfg.mu,
        )
    except EmptyClusteringError:
        return skip_report()

    losses: list[float] = []
    params = state.backbone.parameters()
    for sub_epoch in range(cfg.epochs_per_iteration):
        global_epoch = state.epoch + sub_epoch
        lr = lr_at(global_epoch, cfg)
        try:
            batches = pk_sampler(
                labels, cfg.batch_p, cfg.batch_k,
                _derived_seed(cfg.seed, iteration, sub_epoch, _TAG_SAMPLER),
            )
        except EpochSkip:
            return skip_report()
        aug_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, iteration, sub_epoch, _TAG_AUGMENT])
        )
        for batch_idx in batches:
            batch_pixels = state.pixels[batch_idx]
            if cfg.augment:
                batch_pixels = _augment_batch(batch_pixels, aug_rng)
            targets = labels.labels[batch_idx]
            feats = extract_features(Tensor(batch_pixels), state.backbone, training=True)
            loss = cluster_nce_loss(feats, targets, memory)
            if not np.isfinite(loss.item()):
                where = _dump_diagnostics(out_dir or Path("."), features, labels, lr)
                raise ContractError(
                    f"non-finite loss {loss.item()} at iteration {iteration}; "
                    f"diagnostics written to {where}"
                )
            losses.append(loss.item())
            zero_grads(params)
            loss.backward()
            adam_step(params, lr, state.optim)
            batch_hard_update(memory, feats.detach(), targets)

    state.memory = memory
    state.iteration += 1
    state.epoch += cfg.epochs_per_iteration
    return EpochReport(
        iteration=iteration,
        k=stats.k,
        noise_frac=stats.noise_fraction,
        mean_loss=float(np.mean(losses)),
        lr=lr,
        seconds=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# checkpoint binding
# ---------------------------------------------------------------------------

def _meta_entries(state: RunState) -> dict[str, np.ndarray]:
    cfg = state.backbone.cfg
    return {
        "meta.attention_mode": np.array(float(MODES.index(cfg.attention_mode))),
        "meta.input_hw": np.array(cfg.input_hw, dtype=np.float64),
        "meta.stage_channels": np.array(cfg.stage_channels, dtype=np.float64),
        "meta.blocks_per_stage": np.array(cfg.blocks_per_stage, dtype=np.float64),
        "meta.embed_dim": np.array(float(cfg.embed_dim)),
        "meta.heads": np.array(float(cfg.heads)),
        "meta.seed": np.array(float(state.cfg.seed)),
    }


def save_run_checkpoint(path: str | Path, state: RunState) -> None:
    entries = dict(named_entries(state.backbone))
    for name, m in state.optim.m.items():
        entries[f"optim.m.{name}"] = m
    for name, v in state.optim.v.items():
        entries[f"optim.v.{name}"] = v
    entries["optim.t"] = np.array(float(state.optim.t))
    if state.memory is not None:
        entries["memory.centroids"] = state.memory.centroids
        entries["memory.tau"] = np.array(state.memory.tau)
        entries["memory.mu"] = np.array(state.memory.mu)
    entries["pipeline.iteration"] = np.array(float(state.iteration))
    entries["pipeline.epoch"] = np.array(float(state.epoch))
    entries.update(_meta_entries(state))
    save_checkpoint(path, entries)


def load_backbone_from_checkpoint(
    path: str | Path,
) -> tuple[BackboneParams, MemoryDictionary | None, dict[str, np.ndarray]]:
    """Rebuild the backbone (and final memory, if saved) from a checkpoint."""
    entries = load_checkpoint(path)
    for required in ("meta.attention_mode", "pipeline.iteration", "meta.seed"):
        if required not in entries:
            raise DataFormatError(f"checkpoint {path} lacks {required!r}")
    bb_cfg = BackboneConfig(
        input_hw=tuple(int(v) for v in entries["meta.input_hw"]),
        stage_channels=tuple(int(v) for v in entries["meta.stage_channels"]),
        blocks_per_stage=tuple(int(v) for v in entries["meta.blocks_per_stage"]),
        embed_dim=int(entries["meta.embed_dim"]),
        attention_mode=MODES[int(entries["meta.attention_mode"])],
        heads=int(entries["meta.heads"]),
    )
    backbone = build_backbone(bb_cfg, int(entries["meta.seed"]))
    load_named_entries(backbone, entries)
    memory = None
    if "memory.centroids" in entries:
        memory = MemoryDictionary(
            centroids=entries["memory.centroids"].copy(),
            tau=float(entries["memory.tau"]),
            mu=float(entries["memory.mu"]),
        )
    return backbone, memory, entries


def load_run_checkpoint(path: str | Path, cfg: TrainConfig, pixels: np.ndarray) -> RunState:
    """Rebuild a RunState (backbone, optimizer, counters) from a checkpoint."""
    backbone, memory, entries = load_backbone_from_checkpoint(path)
    if backbone.cfg.attention_mode != cfg.attention_mode:
        raise ConfigError(
            f"checkpoint was trained with attention_mode={backbone.cfg.attention_mode!r}, "
            f"config says {cfg.attention_mode!r}"
        )
    if int(entries["meta.seed"]) != cfg.seed:
        raise ConfigError(
            f"checkpoint seed {int(entries['meta.seed'])} differs from config seed {cfg.seed}"
        )

    optim = AdamState()
    optim.t = int(entries["optim.t"]) if "optim.t" in entries else 0
    for name, value in entries.items():
        if name.startswith("optim.m."):
            optim.m[name[len("optim.m."):]] = value.copy()
        elif name.startswith("optim.v."):
            optim.v[name[len("optim.v."):]] = value.copy()

    return RunState(
        cfg=cfg,
        backbone=backbone,
        optim=optim,
        pixels=pixels,
        iteration=int(entries["pipeline.iteration"]),
        epoch=int(entries["pipeline.epoch"]),
        memory=memory,
    )


def run_training(
    cfg: TrainConfig,
    data_dir: str | Path,
    out_dir: str | Path,
    backbone_cfg: BackboneConfig | None = None,
    resume_from: str | Path | None = None,
) -> tuple[Path, list[EpochReport]]:
    """Train for cfg.clustering_iterations, writing checkpoint.bin and report.csv."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [r for r in load_dataset(data_dir) if r.split == "train"]
    if not records:
        raise DataFormatError(f"no training images found under {data_dir}")
    pixels = stack_pixels(records)

    if resume_from is not None:
        state = load_run_checkpoint(resume_from, cfg, pixels)
    else:
        if backbone_cfg is None:
            backbone_cfg = BackboneConfig(
                input_hw=pixels.shape[1:3], attention_mode=cfg.attention_mode
            )
        elif backbone_cfg.attention_mode != cfg.attention_mode:
            raise ConfigError("backbone_cfg.attention_mode must match cfg.attention_mode")
        state = RunState(
            cfg=cfg,
            backbone=build_backbone(backbone_cfg, cfg.seed),
            optim=AdamState(),
            pixels=pixels,
        )

    # Calibrate batch-norm running statistics before the first clustering
    # pass; a freshly initialized network otherwise collapses every eval-mode
    # embedding onto one direction and DBSCAN sees a single blob.
    if state.iteration == 0 and cfg.clustering_iterations > 0:
        bn_warmup(state.backbone, pixels, cfg.bn_warmup_passes)

    report_path = out / "report.csv"
    fresh_log = resume_from is None or not report_path.exists()
    mode = "w" if fresh_log else "a"
    reports: list[EpochReport] = []
    with open(report_path, mode) as log:
        if fresh_log:
            log.write(REPORT_HEADER + "\n")
        while state.iteration < cfg.clustering_iterations:
            report = train_iteration(state, out_dir=out)
            reports.append(report)
            log.write(report.csv_row() + "\n")
            log.flush()

    checkpoint_path = out / "checkpoint.bin"
    save_run_checkpoint(checkpoint_path, state)
    return checkpoint_path, reports
