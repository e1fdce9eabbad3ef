"""Graph-attention autoencoder for structural node embeddings.

The encoder stacks single-head attention layers.  For node ``u`` with
neighbors ``N(u)`` each layer computes

    e[u, v]  = LeakyReLU(a . [W h_u || W h_v])
    alpha[u] = softmax over v in N(u) of e[u, v]
    h'_u     = act(sum_v alpha[u, v] W h_v)

The last layer's output ``Z`` is decoded twice: adjacency through
``sigmoid(Z Z^T)`` and node features through a linear map.  Training
minimizes feature MSE plus ``lam`` times adjacency binary cross-entropy.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

FORMAT_VERSION = "txgraphcl-gae/1"
DTYPE = torch.float64

_ACTIVATIONS = {
    "elu": F.elu,
    "relu": F.relu,
    "tanh": torch.tanh,
    "identity": lambda x: x,
}


class TrainingDivergence(RuntimeError):
    """Loss became non-finite during training."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass
class GaeConfig:
    hidden_dims: tuple[int, ...] = (64,)
    embedding_dim: int = 32
    leaky_slope: float = 0.2
    activation: str = "elu"
    self_loops: bool = True
    lam: float = 1.0
    pos_weight: float = 1.0
    epochs: int = 200
    lr: float = 0.01
    mask_rate: float = 0.15
    scope: str = "union"  # "union": one merged graph; "ego": a batch of separate ego graphs
    seed: int = 0

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.scope not in ("union", "ego"):
            raise ValueError(f"unknown scope {self.scope!r}")


def edge_index(A, self_loops: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Row/column indices of the nonzero entries of ``A``.

    Nodes with no neighbor always receive a self-loop so their attention
    softmax is defined.
    """
    A = as_tensor(A)
    n = A.shape[0]
    mask = A != 0
    if self_loops:
        mask = mask | torch.eye(n, dtype=torch.bool)
    lonely = ~mask.any(dim=1)
    if lonely.any():
        mask = mask.clone()
        idx = torch.nonzero(lonely).squeeze(1)
        mask[idx, idx] = True
    src, dst = torch.nonzero(mask, as_tuple=True)
    return src, dst


class GatLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, leaky_slope: float = 0.2):
        super().__init__()
        self.W = nn.Linear(in_dim, out_dim, bias=False, dtype=DTYPE)
        self.a = nn.Linear(2 * out_dim, 1, bias=False, dtype=DTYPE)
        self.leaky_slope = leaky_slope

    @property
    def out_dim(self) -> int:
        return self.W.out_features

    def attention(self, Wh: torch.Tensor, src: torch.Tensor, dst: torch.Tensor) -> torch.Tensor:
        n = Wh.shape[0]
        e = self.a(torch.cat([Wh[src], Wh[dst]], dim=1)).squeeze(-1)
        e = F.leaky_relu(e, self.leaky_slope)
        row_max = torch.full((n,), -torch.inf, dtype=e.dtype).scatter_reduce(
            0, src, e, reduce="amax", include_self=True)
        ex = torch.exp(e - row_max[src])
        denom = torch.zeros(n, dtype=e.dtype).index_add(0, src, ex)
        return ex / denom[src]

    def forward(self, h, src, dst):
        """Aggregated (pre-activation) output and per-edge attention weights."""
        Wh = self.W(h)
        alpha = self.attention(Wh, src, dst)
        out = torch.zeros_like(Wh).index_add(0, src, alpha.unsqueeze(1) * Wh[dst])
        return out, alpha


class GraphAutoencoder(nn.Module):
    def __init__(self, in_dim: int, config: GaeConfig | None = None):
        super().__init__()
        self.config = config or GaeConfig()
        dims = [in_dim, *self.config.hidden_dims, self.config.embedding_dim]
        self.layers = nn.ModuleList(
            GatLayer(a, b, self.config.leaky_slope) for a, b in zip(dims[:-1], dims[1:])
        )
        self.feature_decoder = nn.Linear(self.config.embedding_dim, in_dim, dtype=DTYPE)
        self.in_dim = in_dim

    @property
    def embedding_dim(self) -> int:
        return self.config.embedding_dim

    def edges(self, A):
        return edge_index(A, self.config.self_loops)

    def encode(self, X, src, dst) -> list[torch.Tensor]:
        act = _ACTIVATIONS[self.config.activation]
        hs = []
        h = as_tensor(X)
        for layer in self.layers:
            h, _ = layer(h, src, dst)
            h = act(h)
            hs.append(h)
        return hs

    def forward(self, X, src, dst):
        Z = self.encode(X, src, dst)[-1]
        return Z, self.feature_decoder(Z)


def build_gae(in_dim: int, config: GaeConfig | None = None) -> GraphAutoencoder:
    """Construct a model whose initial parameters depend only on ``config.seed``."""
    config = config or GaeConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return GraphAutoencoder(in_dim, config)


def attention_coefficients(layer: GatLayer, X, A) -> torch.Tensor:
    """Dense attention matrix; zero wherever ``A`` has no edge."""
    X = as_tensor(X)
    src, dst = edge_index(A, self_loops=False)
    with torch.no_grad():
        alpha = layer.attention(layer.W(X), src, dst)
    n = X.shape[0]
    out = torch.zeros((n, n), dtype=DTYPE)
    out[src, dst] = alpha
    return out


def gat_forward(model: GraphAutoencoder, X, A) -> tuple[list[torch.Tensor], torch.Tensor]:
    """Per-layer node representations and the final embedding ``Z``."""
    src, dst = model.edges(A)
    hs = model.encode(X, src, dst)
    return hs, hs[-1]


def decode_adjacency(Z) -> torch.Tensor:
    Z = as_tensor(Z)
    return torch.sigmoid(Z @ Z.T)


def _feature_term(X, X_hat) -> torch.Tensor:
    X, X_hat = as_tensor(X), as_tensor(X_hat)
    return ((X - X_hat) ** 2).sum() / X.shape[0]


def _bce_weights(A: torch.Tensor, pos_weight: float) -> torch.Tensor | None:
    if pos_weight == 1.0:
        return None
    return torch.where(A > 0, torch.as_tensor(pos_weight, dtype=DTYPE),
                       torch.ones((), dtype=DTYPE))


def gae_loss(X, X_hat, A, A_hat, lam: float = 1.0, pos_weight: float = 1.0) -> torch.Tensor:
    """Mean squared reconstruction error per node plus ``lam`` * adjacency BCE.

    ``lam=0`` leaves only the feature term.  ``pos_weight`` scales the BCE of
    entries where an edge exists.
    """
    loss = _feature_term(X, X_hat)
    if lam:
        A, A_hat = as_tensor(A), as_tensor(A_hat)
        bce = F.binary_cross_entropy(A_hat, A, weight=_bce_weights(A, pos_weight))
        loss = loss + lam * bce
    return loss


def gae_loss_logits(X, X_hat, A, logits, lam: float = 1.0, pos_weight: float = 1.0):
    """Same value as :func:`gae_loss` with ``A_hat = sigmoid(logits)``, computed stably."""
    loss = _feature_term(X, X_hat)
    if lam:
        A, logits = as_tensor(A), as_tensor(logits)
        bce = F.binary_cross_entropy_with_logits(logits, A, weight=_bce_weights(A, pos_weight))
        loss = loss + lam * bce
    return loss


def reconstruction_target(A, self_loops: bool = True) -> torch.Tensor:
    """Binary adjacency the decoder is asked to reproduce."""
    T = (as_tensor(A) != 0).to(DTYPE)
    if self_loops:
        T = T.clone()
        T.fill_diagonal_(1.0)
    return T


@dataclass
class GaeResult:
    model: GraphAutoencoder
    Z: np.ndarray
    losses: list[float] = field(default_factory=list)

    @property
    def smoothed(self) -> list[float]:
        """Running minimum of the per-epoch loss."""
        return np.minimum.accumulate(self.losses).tolist() if self.losses else []


def evaluate_loss(model: GraphAutoencoder, X, A) -> float:
    """Unmasked training objective for ``model`` on ``(X, A)``."""
    X = as_tensor(X)
    src, dst = model.edges(A)
    with torch.no_grad():
        Z, X_hat = model(X, src, dst)
        target = reconstruction_target(A, model.config.self_loops)
        return float(gae_loss_logits(X, X_hat, target, Z @ Z.T,
                                     model.config.lam, model.config.pos_weight))


def embed(model: GraphAutoencoder, X, A) -> np.ndarray:
    with torch.no_grad():
        return gat_forward(model, X, A)[1].numpy().copy()


def _fit(model: GraphAutoencoder, X: torch.Tensor, src, dst, loss_fn, config: GaeConfig) -> list[float]:
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    losses = []
    for epoch in range(config.epochs):
        mask = torch.rand(X.shape, generator=gen, dtype=DTYPE) < config.mask_rate
        Z, X_hat = model(X.masked_fill(mask, 0.0), src, dst)
        loss = loss_fn(Z, X_hat)
        if not torch.isfinite(loss):
            last = losses[-1] if losses else float("nan")
            raise TrainingDivergence(
                f"graph autoencoder loss became non-finite at epoch {epoch} "
                f"(last finite loss {last:.6g}, lr={config.lr})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def train_gae(X, A, config: GaeConfig | None = None) -> GaeResult:
    """Fit a graph autoencoder on one graph with per-epoch random feature masking."""
    config = config or GaeConfig()
    X = as_tensor(X)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 nodes")
    model = build_gae(X.shape[1], config)
    src, dst = model.edges(A)
    target = reconstruction_target(A, config.self_loops)

    def loss_fn(Z, X_hat):
        return gae_loss_logits(X, X_hat, target, Z @ Z.T, config.lam, config.pos_weight)

    losses = _fit(model, X, src, dst, loss_fn, config)
    return GaeResult(model, embed(model, X, A), losses)


@dataclass
class GraphBatch:
    """Several graphs stacked as one block-diagonal graph.

    ``X`` rows of block ``b`` start at ``offsets[b]``; ``adjacencies[b]`` is the
    block's dense binary adjacency.
    """

    X: np.ndarray
    adjacencies: list[np.ndarray]

    def __post_init__(self):
        sizes = [a.shape[0] for a in self.adjacencies]
        if sum(sizes) != self.X.shape[0]:
            raise ValueError("block sizes do not add up to the number of rows")
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)

    @property
    def n_blocks(self) -> int:
        return len(self.adjacencies)

    def edges(self, self_loops: bool) -> tuple[torch.Tensor, torch.Tensor]:
        src, dst = [], []
        for off, A in zip(self.offsets, self.adjacencies):
            s, d = edge_index(A, self_loops)
            src.append(s + int(off))
            dst.append(d + int(off))
        return torch.cat(src), torch.cat(dst)

    def pairs(self, self_loops: bool) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Row index, column index and target of every within-block pair."""
        rows, cols, targets = [], [], []
        for off, A in zip(self.offsets, self.adjacencies):
            n = A.shape[0]
            r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
            rows.append(r.ravel() + off)
            cols.append(c.ravel() + off)
            targets.append(reconstruction_target(A, self_loops).reshape(-1))
        return (torch.as_tensor(np.concatenate(rows)), torch.as_tensor(np.concatenate(cols)),
                torch.cat(targets))


def train_gae_batch(batch: GraphBatch, config: GaeConfig | None = None) -> GaeResult:
    """Fit one autoencoder on many graphs; adjacency loss covers within-graph pairs only."""
    config = config or GaeConfig()
    X = as_tensor(batch.X)
    if X.shape[0] < 2:
        raise ValueError("need at least 2 nodes")
    model = build_gae(X.shape[1], config)
    src, dst = batch.edges(config.self_loops)
    rows, cols, target = batch.pairs(config.self_loops)
    weight = _bce_weights(target, config.pos_weight)

    def loss_fn(Z, X_hat):
        loss = _feature_term(X, X_hat)
        if config.lam:
            logits = (Z[rows] * Z[cols]).sum(dim=1)
            loss = loss + config.lam * F.binary_cross_entropy_with_logits(logits, target, weight=weight)
        return loss

    losses = _fit(model, X, src, dst, loss_fn, config)
    return GaeResult(model, embed_batch(model, batch), losses)


def embed_batch(model: GraphAutoencoder, batch: GraphBatch) -> np.ndarray:
    src, dst = batch.edges(model.config.self_loops)
    with torch.no_grad():
        return model.encode(as_tensor(batch.X), src, dst)[-1].numpy().copy()


@dataclass(frozen=True)
class FusedRepresentation:
    address: str
    vector: np.ndarray
    n_attributes: int = 43

    @property
    def attributes(self) -> np.ndarray:
        return self.vector[: self.n_attributes]

    @property
    def structure(self) -> np.ndarray:
        return self.vector[self.n_attributes:]


def fuse(x_norm, z, address: str = "", n_attributes: int = 43) -> FusedRepresentation:
    """Concatenate normalized attributes with a structural embedding row."""
    x = np.asarray(getattr(x_norm, "values", x_norm), dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n_attributes:
        raise ValueError(f"attributes must have length {n_attributes}, got {x.shape}")
    if z.ndim != 1:
        raise ValueError("embedding must be a 1-D row")
    if not address:
        address = getattr(x_norm, "address", "")
    return FusedRepresentation(address, np.concatenate([x, z]), n_attributes)


def save_gae(model: GraphAutoencoder, path: str | Path) -> None:
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    cfg = asdict(model.config)
    np.savez(path, format_version=np.array(FORMAT_VERSION), in_dim=np.array(model.in_dim),
             config=np.array(repr(sorted(cfg.items()))), **arrays)


def load_gae(path: str | Path) -> GraphAutoencoder:
    import ast
    with np.load(path, allow_pickle=False) as data:
        version = str(data["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model container {version!r}")
        cfg = dict(ast.literal_eval(str(data["config"])))
        model = GraphAutoencoder(int(data["in_dim"]), GaeConfig(**cfg))
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy())
                 for k in data.files if k.startswith("param/")}
    model.load_state_dict(state)
    return model


def write_loss_curve(path: str | Path, losses: Sequence[float]) -> None:
    smoothed = np.minimum.accumulate(losses) if len(losses) else []
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,smoothed\n")
        for i, (l, s) in enumerate(zip(losses, smoothed)):
            fh.write(f"{i},{l!r},{float(s)!r}\n")
