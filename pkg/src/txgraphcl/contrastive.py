"""Residual encoder, projection head and contrastive pre-training.

A residual block maps ``h`` to ``F(h) + shortcut(h)`` where ``F`` is a small
stack of linear, normalization and ReLU stages.  The encoder chains blocks; a
projection head maps encoder output to the space where the contrastive loss
compares two augmented views of every account in a batch.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .augment import AugmentConfig, make_views
from .features import MinMaxStats
from .structgae import DTYPE, TrainingDivergence, as_tensor
from .txdata import BehaviorLabel, EgoGraph

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "txgraphcl-cl/1"


@dataclass
class EncoderConfig:
    in_dim: int = 75
    width: int = 128
    n_blocks: int = 4
    profile: str = "basic"  # "basic" or "deep"
    proj_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("encoder needs at least one block")
        if self.profile not in ("basic", "deep"):
            raise ValueError(f"unknown encoder profile {self.profile!r}")


@dataclass
class ContrastiveConfig:
    batch_size: int = 32
    tau: float = 1.0
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "sgd"
    mode: str = "views"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in ("views", "ntxent"):
            raise ValueError(f"unknown loss mode {self.mode!r}")


class ResidualBlock(nn.Module):
    """``H = F(h) + W_b h``; ``W_b`` is the identity when dims agree."""

    def __init__(self, in_dim: int, out_dim: int, hidden: int | None = None,
                 bottleneck: bool = False):
        super().__init__()
        hidden = hidden or out_dim
        if bottleneck:
            stages = [
                nn.Linear(in_dim, hidden, dtype=DTYPE), nn.LayerNorm(hidden, dtype=DTYPE), nn.ReLU(),
                nn.Linear(hidden, hidden, dtype=DTYPE), nn.LayerNorm(hidden, dtype=DTYPE), nn.ReLU(),
                nn.Linear(hidden, out_dim, dtype=DTYPE), nn.LayerNorm(out_dim, dtype=DTYPE),
            ]
        else:
            stages = [
                nn.Linear(in_dim, hidden, dtype=DTYPE), nn.LayerNorm(hidden, dtype=DTYPE), nn.ReLU(),
                nn.Linear(hidden, out_dim, dtype=DTYPE), nn.LayerNorm(out_dim, dtype=DTYPE),
            ]
        self.transform = nn.Sequential(*stages)
        self.shortcut = (nn.Identity() if in_dim == out_dim
                         else nn.Linear(in_dim, out_dim, bias=False, dtype=DTYPE))
        self.in_dim, self.out_dim = in_dim, out_dim

    def forward(self, h):
        return self.transform(h) + self.shortcut(h)


def _block_plan(cfg: EncoderConfig) -> list[tuple[int, int, int, bool]]:
    if cfg.profile == "basic":
        dims = [cfg.in_dim] + [cfg.width] * cfg.n_blocks
        return [(a, b, b, False) for a, b in zip(dims[:-1], dims[1:])]
    # deep: four stages of bottleneck blocks; the first block of each stage
    # changes width through a projected shortcut, the rest are identity blocks
    plan, prev = [], cfg.in_dim
    for reps, width in zip((3, 4, 6, 3), (cfg.width, cfg.width * 2, cfg.width * 4, cfg.width * 4)):
        for _ in range(reps):
            plan.append((prev, width, max(width // 4, 1), True))
            prev = width
    return plan


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        self.blocks = nn.ModuleList(ResidualBlock(a, b, hid, bn) for a, b, hid, bn in _block_plan(cfg))

    @property
    def in_dim(self) -> int:
        return self.blocks[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.blocks[-1].out_dim

    def forward(self, h):
        h = as_tensor(h)
        if h.shape[-1] != self.in_dim:
            raise ValueError(f"encoder expects input dim {self.in_dim}, got {h.shape[-1]}")
        for block in self.blocks:
            h = block(h)
        return h


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, in_dim, bias=False, dtype=DTYPE),
            nn.LayerNorm(in_dim, dtype=DTYPE),
            nn.ReLU(),
            nn.Linear(in_dim, out_dim, dtype=DTYPE),
        )

    def forward(self, h):
        return self.net(h)


def build_encoder(cfg: EncoderConfig | None = None) -> tuple[Encoder, ProjectionHead]:
    """Encoder and head whose initial weights depend only on ``cfg.seed``."""
    cfg = cfg or EncoderConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        enc = Encoder(cfg)
        head = ProjectionHead(enc.out_dim, cfg.proj_dim)
    return enc, head


def encode(fused, encoder: Encoder) -> np.ndarray:
    """Encoder output for one fused representation or a matrix of them."""
    x = getattr(fused, "vector", fused)
    with torch.no_grad():
        return encoder(as_tensor(x)).numpy().copy()


def _unit_rows(S: torch.Tensor) -> torch.Tensor:
    norms = S.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity is undefined for a zero vector")
    return S / norms


def cosine_sim(s, s2):
    """Cosine similarity of two nonzero vectors (or row-wise for matrices)."""
    is_tensor = isinstance(s, torch.Tensor)
    a, b = _unit_rows(as_tensor(s)), _unit_rows(as_tensor(s2))
    out = (a * b).sum(dim=-1)
    if is_tensor:
        return out
    return float(out) if out.ndim == 0 else out.numpy()


def similarity_matrix(S, S2) -> torch.Tensor:
    return _unit_rows(as_tensor(S)) @ _unit_rows(as_tensor(S2)).T


def contrastive_loss(S, S2, tau: float = 1.0, mode: str = "views") -> torch.Tensor:
    """Mean over anchors of ``-log softmax`` of the positive pair similarity.

    ``mode="views"``: anchor ``i`` is contrasted with all ``N`` view
    embeddings, the positive included.  ``mode="ntxent"``: both sides act as
    anchors against the other ``2N - 1`` embeddings.
    """
    S, S2 = as_tensor(S), as_tensor(S2)
    n = S.shape[0]
    if n < 2 or S2.shape[0] != n:
        raise ValueError("need two aligned batches of at least 2 embeddings")
    if tau <= 0:
        raise ValueError("tau must be positive")
    if mode == "views":
        logits = similarity_matrix(S, S2) / tau
        return F.cross_entropy(logits, torch.arange(n))
    if mode == "ntxent":
        allz = torch.cat([S, S2])
        logits = similarity_matrix(allz, allz) / tau
        logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), -torch.inf)
        targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
        return F.cross_entropy(logits, targets)
    raise ValueError(f"unknown loss mode {mode!r}")


@dataclass(frozen=True)
class PretrainSample:
    graph: EgoGraph
    z_row: np.ndarray
    label: BehaviorLabel | None = None

    @property
    def address(self) -> str:
        return self.graph.center


@dataclass
class PretrainResult:
    encoder: Encoder
    head: ProjectionHead
    log: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def view_batch(samples: Sequence[PretrainSample], stats: MinMaxStats, aug: AugmentConfig,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    v1, v2 = [], []
    for s in samples:
        pair = make_views(s.graph, s.z_row, stats, aug, rng, s.label)
        v1.append(pair.view1.vector)
        v2.append(pair.view2.vector)
    return np.stack(v1), np.stack(v2)


def pair_similarities(S, S2) -> tuple[float, float]:
    """Mean positive-pair and mean negative-pair cosine similarity."""
    sim = similarity_matrix(S, S2)
    n = sim.shape[0]
    off = ~torch.eye(n, dtype=torch.bool)
    return float(sim.diagonal().mean()), float(sim[off].mean())


def _make_optimizer(params, cfg: ContrastiveConfig):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=cfg.lr)
    return torch.optim.SGD(params, lr=cfg.lr)


def pretrain(samples: Sequence[PretrainSample], stats: MinMaxStats,
             aug: AugmentConfig | None = None, enc_cfg: EncoderConfig | None = None,
             cfg: ContrastiveConfig | None = None) -> PretrainResult:
    """Contrastive pre-training of an encoder and projection head.

    Every epoch shuffles the samples, draws fresh views per batch and takes
    one optimizer step per batch.  A trailing batch smaller than 2 is dropped.
    """
    aug = aug or AugmentConfig()
    cfg = cfg or ContrastiveConfig()
    enc_cfg = enc_cfg or EncoderConfig()
    if len(samples) < 2 * cfg.batch_size:
        raise ValueError(f"need at least {2 * cfg.batch_size} samples, got {len(samples)}")
    encoder, head = build_encoder(enc_cfg)
    params = list(encoder.parameters()) + list(head.parameters())
    opt = _make_optimizer(params, cfg)
    rng = np.random.default_rng(cfg.seed)
    result = PretrainResult(encoder, head)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        tot = pos = neg = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            v1, v2 = view_batch([samples[i] for i in idx], stats, aug, rng)
            S, S2 = head(encoder(v1)), head(encoder(v2))
            loss = contrastive_loss(S, S2, cfg.tau, cfg.mode)
            if not torch.isfinite(loss):
                raise TrainingDivergence(
                    f"contrastive loss became non-finite at epoch {epoch}, batch {n_batches} "
                    f"(lr={cfg.lr}, tau={cfg.tau})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                p, q = pair_similarities(S, S2)
            tot += loss.item()
            pos += p
            neg += q
            n_batches += 1
        row = {"epoch": epoch, "loss": tot / n_batches,
               "pos_sim": pos / n_batches, "neg_sim": neg / n_batches}
        result.log.append(row)
        log.debug("pretrain epoch %d loss %.5f pos %.4f neg %.4f", epoch,
                  row["loss"], row["pos_sim"], row["neg_sim"])
    return result


def heldout_similarity(encoder: Encoder, head: ProjectionHead, samples: Sequence[PretrainSample],
                       stats: MinMaxStats, aug: AugmentConfig | None = None,
                       seed: int = 0) -> tuple[float, float]:
    """Mean positive and negative pair similarity of fresh views of ``samples``."""
    aug = aug or AugmentConfig()
    v1, v2 = view_batch(samples, stats, aug, np.random.default_rng(seed))
    with torch.no_grad():
        return pair_similarities(head(encoder(v1)), head(encoder(v2)))


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path: str | Path, encoder: Encoder, head: ProjectionHead | None = None,
                    config_hash: str = "") -> None:
    arrays = {f"encoder/{k}": v.detach().numpy() for k, v in encoder.state_dict().items()}
    if head is not None:
        arrays.update({f"head/{k}": v.detach().numpy() for k, v in head.state_dict().items()})
    np.savez(path, format_version=np.array(CHECKPOINT_VERSION),
             encoder_config=np.array(json.dumps(asdict(encoder.config), sort_keys=True)),
             config_hash=np.array(config_hash), **arrays)


def load_checkpoint(path: str | Path) -> tuple[Encoder, ProjectionHead | None, str]:
    with np.load(path, allow_pickle=False) as data:
        version = str(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint container {version!r}")
        cfg = EncoderConfig(**json.loads(str(data["encoder_config"])))
        encoder, head = build_encoder(cfg)
        enc_state = {k[8:]: torch.from_numpy(data[k].copy()) for k in data.files
                     if k.startswith("encoder/")}
        head_state = {k[5:]: torch.from_numpy(data[k].copy()) for k in data.files
                      if k.startswith("head/")}
        config_hash = str(data["config_hash"])
    encoder.load_state_dict(enc_state)
    if head_state:
        head.load_state_dict(head_state)
    else:
        head = None
    return encoder, head, config_hash


def write_training_log(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "pos_sim", "neg_sim"])
        for r in rows:
            w.writerow([r["epoch"], repr(r["loss"]), repr(r["pos_sim"]), repr(r["neg_sim"])])
