"""Evaluation protocols, representation distances and experiment orchestration.

A run goes: data (synthetic or loaded) -> split -> ego graphs and attributes ->
graph autoencoder -> fused representations -> contrastive pre-training ->
fine-tuning -> metrics, distances and exported embeddings.  One top-level
seed determines every stochastic stage.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from . import classify, contrastive, structgae
from .augment import AugmentConfig
from .features import MinMaxStats, N_FEATURES, extract_attributes, normalize_minmax
from .synthgen import GeneratorSpec, default_spec, generate_dataset, spec_to_dict
from .txdata import (BINARY_CLASSES, LABEL_ORDER, MALICIOUS_LABELS, BehaviorLabel, Dataset,
                     EgoGraph, adjacency, build_ego_graph, merge_graphs)

log = logging.getLogger(__name__)

REPORT_VERSION = "txgraphcl-report/1"
PROTOCOLS = ("standard", "zero_shot", "imbalanced", "few_shot", "cross_platform")
WALL_CLOCK_KEY = "wall_clock"


class ConfigError(ValueError):
    """Experiment configuration could not be read or is invalid."""


class StageError(RuntimeError):
    def __init__(self, stage: str, config_hash: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed (config {config_hash[:12]}): "
                         f"{type(cause).__name__}: {cause}")
        self.stage = stage
        self.config_hash = config_hash
        self.cause = cause


# ---------------------------------------------------------------- classes

def class_names(task: str, labels: Sequence[BehaviorLabel] = ()) -> tuple[str, ...]:
    """Output classes for ``task``.

    Binary: ``("Normal", "Malicious")``.  Multiclass: ``"Normal"`` (all benign
    roles) followed by each malicious label in canonical order; with
    ``labels`` given, only malicious labels that occur are kept.
    """
    if task == "binary":
        return BINARY_CLASSES
    if task != "multiclass":
        raise ValueError(f"unknown task {task!r}")
    present = set(labels) if labels else set(MALICIOUS_LABELS)
    return ("Normal",) + tuple(l.value for l in LABEL_ORDER if l in MALICIOUS_LABELS and l in present)


def class_of(label: BehaviorLabel, task: str) -> str:
    label = BehaviorLabel(label)
    if task == "binary":
        return label.rollup
    return label.value if label.is_malicious else "Normal"


def class_indices(dataset: Dataset, addresses: Sequence[str], classes: Sequence[str],
                  task: str) -> np.ndarray:
    pos = {c: i for i, c in enumerate(classes)}
    return np.array([pos[class_of(dataset.labels[a], task)] for a in addresses], dtype=np.int64)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    protocol: str = "standard"
    test_fraction: float = 0.2
    masked_label: str | None = None
    ratio: tuple[int, int] | None = None  # malicious : normal
    n_labeled: int | None = None
    platforms: tuple[str, str] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.protocol == "zero_shot" and self.masked_label is None:
            raise ValueError("zero_shot needs masked_label")
        if self.protocol == "imbalanced" and self.ratio is None:
            raise ValueError("imbalanced needs ratio")
        if self.protocol == "few_shot" and self.n_labeled is None:
            raise ValueError("few_shot needs n_labeled")
        if self.ratio is not None:
            object.__setattr__(self, "ratio", parse_ratio(self.ratio))
        if self.platforms is not None:
            object.__setattr__(self, "platforms", tuple(self.platforms))


def parse_ratio(ratio) -> tuple[int, int]:
    if isinstance(ratio, str):
        parts = ratio.split(":")
        if len(parts) != 2:
            raise ValueError(f"ratio must look like '1:5', got {ratio!r}")
        ratio = parts
    m, n = (int(v) for v in ratio)
    if m < 1 or n < 1:
        raise ValueError("ratio terms must be positive")
    return m, n


@dataclass(frozen=True)
class Split:
    """Train and test address lists.  ``unused`` holds sampled-out addresses."""

    train: tuple[str, ...]
    test: tuple[str, ...]
    unused: tuple[str, ...] = ()
    protocol: str = "standard"

    def check_partition(self, universe: Sequence[str]) -> None:
        tr, te, un = set(self.train), set(self.test), set(self.unused)
        if tr & te or tr & un or te & un:
            raise AssertionError("split parts overlap")
        if tr | te | un != set(universe):
            raise AssertionError("split parts do not cover the labeled addresses")


def _by_label(dataset: Dataset, addresses: Sequence[str] | None = None) -> dict[BehaviorLabel, list[str]]:
    groups: dict[BehaviorLabel, list[str]] = {}
    for a in sorted(addresses if addresses is not None else dataset.labels):
        groups.setdefault(dataset.labels[a], []).append(a)
    return {l: groups[l] for l in LABEL_ORDER if l in groups}


def _n_test(n: int, fraction: float) -> int:
    return int(math.floor(fraction * n + 0.5))


def _stratified_holdout(groups: Mapping[Any, list[str]], fraction: float,
                        rng: np.random.Generator) -> tuple[list[str], list[str]]:
    keep, held = [], []
    for members in groups.values():
        perm = [members[i] for i in rng.permutation(len(members))]
        k = _n_test(len(perm), fraction)
        held += perm[:k]
        keep += perm[k:]
    return keep, held


def _finish(train, test, unused=(), protocol="standard") -> Split:
    return Split(tuple(sorted(train)), tuple(sorted(test)), tuple(sorted(unused)), protocol)


def split_standard(dataset: Dataset, seed: int = 0, test_fraction: float = 0.2) -> Split:
    """Stratified (per label) train/test split."""
    rng = np.random.default_rng(seed)
    train, test = _stratified_holdout(_by_label(dataset), test_fraction, rng)
    return _finish(train, test)


def split_zero_shot(dataset: Dataset, masked_label, seed: int = 0,
                    test_fraction: float = 0.2) -> Split:
    """Withhold ``masked_label`` from training; the test set holds all of it."""
    masked = BehaviorLabel(masked_label)
    if not masked.is_malicious:
        raise ValueError(f"{masked.value} is not a malicious label")
    groups = _by_label(dataset)
    if masked not in groups:
        raise ValueError(f"label {masked.value} does not occur in the dataset")
    masked_members = groups.pop(masked)
    rng = np.random.default_rng(seed)
    train, test = _stratified_holdout(groups, test_fraction, rng)
    return _finish(train, test + masked_members, protocol="zero_shot")


def split_imbalanced(dataset: Dataset, ratio, seed: int = 0,
                     test_fraction: float = 0.2) -> Split:
    """Training set with malicious:normal counts exactly ``k*m : k*n``.

    A stratified test share is held out first; from the remaining pool the
    largest ``k`` with ``k*m`` malicious and ``k*n`` normal addresses is used
    and the leftover pool is reported as ``unused``.
    """
    m, n = parse_ratio(ratio)
    rng = np.random.default_rng(seed)
    pool, test = _stratified_holdout(_by_label(dataset), test_fraction, rng)
    pool = sorted(pool)
    mal = [a for a in pool if dataset.labels[a].is_malicious]
    nor = [a for a in pool if not dataset.labels[a].is_malicious]
    k = min(len(mal) // m, len(nor) // n)
    if k < 1:
        raise ValueError(f"ratio {m}:{n} infeasible with {len(mal)} malicious and "
                         f"{len(nor)} normal training candidates")
    mal = [mal[i] for i in rng.permutation(len(mal))]
    nor = [nor[i] for i in rng.permutation(len(nor))]
    train = mal[:k * m] + nor[:k * n]
    unused = mal[k * m:] + nor[k * n:]
    return _finish(train, test, unused, "imbalanced")


def stratified_counts(n: int, n_classes: int) -> list[int]:
    """Even split of ``n`` over classes; lower class indices get the remainder."""
    base, extra = divmod(n, n_classes)
    return [base + (1 if i < extra else 0) for i in range(n_classes)]


def split_few_shot(dataset: Dataset, n_labeled: int, seed: int = 0, task: str = "binary") -> Split:
    """Exactly ``n_labeled`` training samples spread evenly over the task classes."""
    addresses = dataset.labeled_addresses()
    if n_labeled < 1 or n_labeled > len(addresses):
        raise ValueError(f"n_labeled={n_labeled} outside 1..{len(addresses)}")
    classes = class_names(task, list(dataset.labels.values()))
    idx = class_indices(dataset, addresses, classes, task)
    counts = stratified_counts(n_labeled, len(classes))
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c, want in enumerate(counts):
        members = [addresses[i] for i in np.flatnonzero(idx == c)]
        if want > len(members):
            raise ValueError(f"class {classes[c]} has {len(members)} samples, {want} requested")
        perm = [members[i] for i in rng.permutation(len(members))]
        train += perm[:want]
        test += perm[want:]
    return _finish(train, test, protocol="few_shot")


def make_split(dataset: Dataset, spec: SplitSpec, task: str = "binary") -> Split:
    if spec.protocol in ("standard", "cross_platform"):
        return split_standard(dataset, spec.seed, spec.test_fraction)
    if spec.protocol == "zero_shot":
        return split_zero_shot(dataset, spec.masked_label, spec.seed, spec.test_fraction)
    if spec.protocol == "imbalanced":
        return split_imbalanced(dataset, spec.ratio, spec.seed, spec.test_fraction)
    return split_few_shot(dataset, spec.n_labeled, spec.seed, task)


# ---------------------------------------------------------------- distances

@dataclass
class DistanceMatrix:
    groups: tuple[str, ...]
    matrix: np.ndarray
    normalized: bool = True
    missing: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"groups": list(self.groups), "normalized": self.normalized,
                "matrix": [[None if not np.isfinite(v) else float(v) for v in row]
                           for row in self.matrix],
                "missing": list(self.missing)}


def _mean_pair_distance(a: np.ndarray, b: np.ndarray | None) -> float:
    if b is None:
        if len(a) < 2:
            return math.nan
        d = np.sqrt(((a[:, None, :] - a[None, :, :]) ** 2).sum(-1))
        iu = np.triu_indices(len(a), k=1)
        return float(d[iu].mean())
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float(d.mean())


def representation_distance(groups: Mapping[str, np.ndarray], normalize: bool = True) -> DistanceMatrix:
    """Mean Euclidean distance between and within groups of vectors.

    Off-diagonal entries average over every cross-group pair, diagonal
    entries over distinct within-group pairs.  A singleton group has no
    within distance; its diagonal is NaN and listed in ``missing``.  With
    ``normalize`` all finite entries are min-max scaled to [0, 1].
    """
    names = tuple(groups)
    if len(names) < 2:
        raise ValueError("need at least two groups")
    arrays = []
    for name in names:
        a = np.asarray(groups[name], dtype=np.float64)
        if a.ndim != 2 or len(a) == 0:
            raise ValueError(f"group {name!r} must be a non-empty 2-D array")
        arrays.append(a)
    k = len(names)
    M = np.empty((k, k))
    missing = []
    for i in range(k):
        M[i, i] = _mean_pair_distance(arrays[i], None)
        if math.isnan(M[i, i]):
            missing.append(names[i])
        for j in range(i + 1, k):
            M[i, j] = M[j, i] = _mean_pair_distance(arrays[i], arrays[j])
    if normalize:
        finite = np.isfinite(M)
        lo, hi = M[finite].min(), M[finite].max()
        M = np.where(finite, (M - lo) / (hi - lo) if hi > lo else 0.0, np.nan)
    return DistanceMatrix(names, M, normalize, missing)


def sample_groups(vectors: np.ndarray, group_of: Sequence[str], order: Sequence[str],
                  per_group: int = 15, seed: int = 0) -> dict[str, np.ndarray]:
    """Up to ``per_group`` random rows of ``vectors`` for each group in ``order``."""
    rng = np.random.default_rng(seed)
    group_of = np.asarray(group_of)
    out = {}
    for g in order:
        idx = np.flatnonzero(group_of == g)
        if len(idx) == 0:
            continue
        pick = np.sort(rng.choice(idx, size=min(per_group, len(idx)), replace=False))
        out[g] = vectors[pick]
    return out


# ---------------------------------------------------------------- configuration

@dataclass
class DataConfig:
    synth: dict | None = None
    path: str | None = None
    platform: str | None = None


@dataclass
class DistanceConfig:
    per_class: int = 15
    normalize: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 7
    task: str = "binary"
    hops: int = 1
    ablation: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    pretrain_data: DataConfig | None = None
    split: dict = field(default_factory=lambda: {"protocol": "standard", "test_fraction": 0.2})
    gae: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    contrastive: dict = field(default_factory=dict)
    finetune: dict = field(default_factory=dict)
    distance: DistanceConfig = field(default_factory=DistanceConfig)


ABLATIONS = (None, "no_fusion", "no_pretrain")
_STAGE_SECTIONS = {
    "gae": structgae.GaeConfig,
    "augment": AugmentConfig,
    "encoder": contrastive.EncoderConfig,
    "contrastive": contrastive.ContrastiveConfig,
    "finetune": classify.FinetuneConfig,
}


def stage_seed(seed: int, stage: str) -> int:
    """Deterministic per-stage seed derived from the top-level seed."""
    digest = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def _field_names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def _check_keys(section: str, obj: Mapping, allowed: set[str]) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


def _data_section(name: str, obj) -> DataConfig | None:
    if obj is None:
        return None
    if not isinstance(obj, Mapping):
        raise ConfigError(f"{name} must be a mapping")
    _check_keys(name, obj, _field_names(DataConfig))
    if obj.get("synth") is not None and obj.get("path") is not None:
        raise ConfigError(f"{name}: give either synth or path, not both")
    return DataConfig(**obj)


def config_from_dict(obj: Mapping | None) -> ExperimentConfig:
    obj = dict(obj or {})
    _check_keys("config", obj, _field_names(ExperimentConfig))
    cfg = ExperimentConfig()
    for key in ("seed", "hops"):
        if key in obj:
            try:
                setattr(cfg, key, int(obj[key]))
            except (TypeError, ValueError):
                raise ConfigError(f"{key} must be an integer") from None
    if "task" in obj:
        cfg.task = obj["task"]
    if cfg.task not in ("binary", "multiclass"):
        raise ConfigError(f"task must be 'binary' or 'multiclass', got {cfg.task!r}")
    if "ablation" in obj:
        cfg.ablation = obj["ablation"]
    if cfg.ablation not in ABLATIONS:
        raise ConfigError(f"ablation must be one of {ABLATIONS}, got {cfg.ablation!r}")
    cfg.data = _data_section("data", obj.get("data")) or DataConfig()
    cfg.pretrain_data = _data_section("pretrain_data", obj.get("pretrain_data"))
    if "split" in obj:
        split = dict(obj["split"] or {})
        _check_keys("split", split, _field_names(SplitSpec) - {"seed"})
        cfg.split = {"protocol": "standard", "test_fraction": 0.2, **split}
    for section, cls in _STAGE_SECTIONS.items():
        if section in obj:
            sec = dict(obj[section] or {})
            _check_keys(section, sec, _field_names(cls) - {"seed"})
            setattr(cfg, section, sec)
    if "distance" in obj:
        d = dict(obj["distance"] or {})
        _check_keys("distance", d, _field_names(DistanceConfig))
        cfg.distance = DistanceConfig(**d)
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a YAML or JSON experiment config.  Relative data paths resolve
    against the config file's directory."""
    path = Path(path)
    try:
        obj = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    if obj is not None and not isinstance(obj, Mapping):
        raise ConfigError(f"config {path} must hold a mapping at top level")
    cfg = config_from_dict(obj)
    for dc in (cfg.data, cfg.pretrain_data):
        if dc is not None and dc.path is not None and not Path(dc.path).is_absolute():
            dc.path = str((path.parent / dc.path).resolve())
    return cfg


def _resolve_data(dc: DataConfig, seed: int, default_synth: bool) -> dict:
    if dc.path is not None:
        return {"path": dc.path, "platform": dc.platform or "btc"}
    if dc.synth is None and not default_synth:
        return {}
    synth = dict(dc.synth) if dc.synth is not None else spec_to_dict(default_spec(seed=seed))
    synth.setdefault("seed", seed)
    if dc.platform is not None:
        synth["platform"] = dc.platform
    try:
        spec = GeneratorSpec.from_dict(synth)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid synth section: {err}") from err
    return {"synth": spec_to_dict(spec)}


def resolve_config(cfg: ExperimentConfig) -> dict:
    """Plain-data config with every default filled in and stage seeds fixed."""
    seed = cfg.seed
    out: dict[str, Any] = {"seed": seed, "task": cfg.task, "hops": cfg.hops, "ablation": cfg.ablation}
    out["data"] = _resolve_data(cfg.data, seed, default_synth=True)
    out["pretrain_data"] = (_resolve_data(cfg.pretrain_data, seed, default_synth=False)
                            if cfg.pretrain_data is not None else None)
    try:
        split = SplitSpec(**{**cfg.split, "seed": stage_seed(seed, "split")})
        stages = {name: cls(**{**getattr(cfg, name), "seed": stage_seed(seed, name)})
                  if "seed" in _field_names(cls) else cls(**getattr(cfg, name))
                  for name, cls in _STAGE_SECTIONS.items()}
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    out["split"] = _plain(asdict(split))
    for name, obj in stages.items():
        out[name] = _plain(asdict(obj))
    in_dim = N_FEATURES + (out["gae"]["embedding_dim"] if cfg.ablation != "no_fusion" else 0)
    if cfg.encoder.get("in_dim", in_dim) != in_dim:
        raise ConfigError(f"encoder.in_dim must be {in_dim} for this configuration")
    out["encoder"]["in_dim"] = in_dim
    out["distance"] = asdict(cfg.distance)
    out["distance"]["seed"] = stage_seed(seed, "distance")
    return out


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(resolved: Mapping) -> str:
    return hashlib.sha256(canonical_json(resolved).encode()).hexdigest()


# ---------------------------------------------------------------- pipeline stages

def load_data(section: Mapping) -> Dataset:
    if "path" in section:
        d = Path(section["path"])
        labels = d / "labels.csv"
        return Dataset.from_files(d / "transactions.jsonl", labels if labels.exists() else None,
                                  platform=section.get("platform", "btc"))
    return generate_dataset(GeneratorSpec.from_dict(section["synth"]))


@dataclass
class StructuralView:
    """Ego graphs, raw center attributes and structural embeddings for ``addresses``."""

    addresses: list[str]
    graphs: list[EgoGraph]
    attributes: np.ndarray
    Z: np.ndarray
    model: structgae.GraphAutoencoder
    losses: list[float]

    def row(self, address: str) -> int:
        return self.addresses.index(address)


def ego_batch(graphs: Sequence[EgoGraph]) -> tuple[structgae.GraphBatch, np.ndarray]:
    """Stack ego graphs for the autoencoder.

    Every node is described by its own history inside its ego graph.  Returns
    the batch (features min-max scaled over all stacked rows) and the raw
    attribute rows of the centers.
    """
    rows, adjs = [], []
    for g in graphs:
        rows.extend(extract_attributes(g, center=a).values for a in g.nodes)
        adjs.append(adjacency(g))
    X = np.stack(rows)
    Xn, _ = normalize_minmax(X)
    batch = structgae.GraphBatch(Xn, adjs)
    return batch, X[batch.offsets]


def union_graph(dataset: Dataset, graphs: Sequence[EgoGraph]) -> tuple[np.ndarray, np.ndarray]:
    """Merge ego graphs into one graph for the autoencoder.

    Returns raw attribute rows in merged node order (centers first, each
    described by its own ego graph; other nodes by their history inside the
    union) and the binary adjacency.
    """
    nodes, A = merge_graphs(graphs)
    union = EgoGraph.from_transactions(nodes[0], nodes, dataset.transactions)
    centers = [extract_attributes(g).values for g in graphs]
    rest = [extract_attributes(union, center=a).values for a in nodes[len(graphs):]]
    return np.stack(centers + rest), A


def structural_view(dataset: Dataset, addresses: Sequence[str], hops: int,
                    gae_cfg: structgae.GaeConfig,
                    model: structgae.GraphAutoencoder | None = None) -> StructuralView:
    """Featurize ``addresses`` and embed them with a graph autoencoder.

    With ``gae_cfg.scope == "union"`` the autoencoder runs on the merged
    union of all ego graphs; with ``"ego"`` each ego graph is a separate
    graph and adjacency loss only covers pairs inside one ego graph.  With
    ``model`` given it is applied frozen instead of trained.
    """
    addresses = list(addresses)
    if len(set(addresses)) != len(addresses):
        raise ValueError("duplicate addresses")
    graphs = [build_ego_graph(dataset, a, hops) for a in addresses]
    if gae_cfg.scope == "ego":
        batch, centers = ego_batch(graphs)
        if model is None:
            res = structgae.train_gae_batch(batch, gae_cfg)
            model, Z, losses = res.model, res.Z, res.losses
        else:
            Z, losses = structgae.embed_batch(model, batch), []
        return StructuralView(addresses, graphs, centers, Z[batch.offsets], model, losses)
    X, A = union_graph(dataset, graphs)
    Xn, _ = normalize_minmax(X)
    if model is None:
        res = structgae.train_gae(Xn, A, gae_cfg)
        model, Z, losses = res.model, res.Z, res.losses
    else:
        Z, losses = structgae.embed(model, Xn, A), []
    n = len(addresses)
    return StructuralView(addresses, graphs, X[:n], Z[:n], model, losses)


def fused_matrix(view: StructuralView, stats: MinMaxStats, rows: Sequence[int] | None = None,
                 use_structure: bool = True) -> np.ndarray:
    rows = range(len(view.addresses)) if rows is None else rows
    rows = list(rows)
    x = stats.transform(view.attributes[rows])
    if not use_structure:
        return x
    return np.hstack([x, view.Z[rows]])


def pretrain_samples(view: StructuralView, use_structure: bool = True) -> list[contrastive.PretrainSample]:
    empty = np.zeros(0)
    return [contrastive.PretrainSample(g, view.Z[i] if use_structure else empty)
            for i, g in enumerate(view.graphs)]


@dataclass
class ExperimentReport:
    data: dict
    artifacts: dict = field(default_factory=dict, repr=False)

    @property
    def metrics(self) -> dict:
        return self.data["metrics"]

    @property
    def f1(self) -> float:
        return self.data["metrics"]["f1"]

    @property
    def config_hash(self) -> str:
        return self.data["config_hash"]


def _counts(dataset: Dataset, addresses: Sequence[str], task: str) -> dict[str, int]:
    out: dict[str, int] = {}
    for a in addresses:
        c = class_of(dataset.labels[a], task)
        out[c] = out.get(c, 0) + 1
    return dict(sorted(out.items()))


def _label_counts(dataset: Dataset) -> dict[str, int]:
    out: dict[str, int] = {}
    for l in dataset.labels.values():
        out[l.value] = out.get(l.value, 0) + 1
    return dict(sorted(out.items()))


class _Stages:
    def __init__(self, config_hash: str):
        self.hash = config_hash
        self.times: dict[str, float] = {}

    def run(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as err:  # noqa: BLE001 - every failure is reported with its stage
            raise StageError(name, self.hash, err) from err
        finally:
            self.times[name] = round(time.perf_counter() - t0, 3)


def _view_key(resolved: Mapping) -> str:
    return canonical_json({k: resolved.get(k) for k in ("data", "pretrain_data", "hops", "gae")})


def run_pipeline(resolved: Mapping, dataset: Dataset | None = None,
                 pretrain_dataset: Dataset | None = None,
                 cache: dict | None = None) -> ExperimentReport:
    """Execute every stage for a resolved config; nothing is written to disk.

    ``cache`` (any dict) keeps trained structural views between calls whose
    data, hop and autoencoder settings agree, e.g. a run and its ablations.
    It is only used when the datasets come from the config itself.
    """
    t_start = time.perf_counter()
    resolved = copy.deepcopy(dict(resolved))
    h = config_hash(resolved)
    st = _Stages(h)
    task = resolved["task"]
    ablation = resolved["ablation"]
    use_structure = ablation != "no_fusion"
    if dataset is not None or pretrain_dataset is not None:
        cache = None
    if dataset is None:
        dataset = st.run("data", load_data, resolved["data"])
    if pretrain_dataset is None and resolved.get("pretrain_data"):
        pretrain_dataset = st.run("pretrain_data", load_data, resolved["pretrain_data"])
    source = pretrain_dataset if pretrain_dataset is not None else dataset
    same_source = source is dataset

    split_spec = SplitSpec(**{k: (tuple(v) if isinstance(v, list) else v)
                              for k, v in resolved["split"].items()})
    if task != "binary" and split_spec.protocol in ("zero_shot", "imbalanced"):
        raise StageError("split", h, ValueError(f"{split_spec.protocol} evaluates the binary task"))
    split = st.run("split", make_split, dataset, split_spec, task)
    classes = class_names(task, list(dataset.labels.values()))

    gae_cfg = structgae.GaeConfig(**resolved["gae"])
    key = _view_key(resolved)
    if cache is not None and key in cache:
        src_view, view = cache[key]
    else:
        src_view = st.run("gae", structural_view, source, source.labeled_addresses(),
                          resolved["hops"], gae_cfg)
        if same_source:
            view = src_view
        else:
            view = st.run("embed", structural_view, dataset, dataset.labeled_addresses(),
                          resolved["hops"], gae_cfg, src_view.model)
        if cache is not None:
            cache[key] = (src_view, view)

    enc_cfg = contrastive.EncoderConfig(**resolved["encoder"])
    pre_stats = normalize_minmax(src_view.attributes)[1]
    pretrain_log: list[dict] = []
    if ablation == "no_pretrain":
        encoder, _ = contrastive.build_encoder(enc_cfg)
    else:
        res = st.run("pretrain", contrastive.pretrain, pretrain_samples(src_view, use_structure),
                     pre_stats, AugmentConfig(**resolved["augment"]), enc_cfg,
                     contrastive.ContrastiveConfig(**resolved["contrastive"]))
        encoder, pretrain_log = res.encoder, res.log
    encoder_checksum = contrastive.parameter_checksum(encoder)

    row = {a: i for i, a in enumerate(view.addresses)}
    train_rows = [row[a] for a in split.train]
    test_rows = [row[a] for a in split.test]
    stats = normalize_minmax(view.attributes[train_rows])[1]
    X_all = fused_matrix(view, stats, use_structure=use_structure)
    y_train = class_indices(dataset, split.train, classes, task)
    y_test = class_indices(dataset, split.test, classes, task)
    clf = st.run("finetune", classify.finetune, encoder, X_all[train_rows], y_train, classes,
                 classify.FinetuneConfig(**resolved["finetune"]))
    y_pred, scores = classify.predict(clf, X_all[test_rows])
    averaging = "binary" if task == "binary" else "macro"
    report = classify.metrics(y_test, y_pred, classes, averaging, positive=1)

    groups_of = [class_of(dataset.labels[a], "multiclass") for a in view.addresses]
    dcfg = resolved["distance"]
    group_order = class_names("multiclass", list(dataset.labels.values()))
    sampled = sample_groups(X_all, groups_of, group_order, dcfg["per_class"], dcfg["seed"])
    distances = (representation_distance(sampled, dcfg["normalize"]) if len(sampled) >= 2 else None)

    embeddings = contrastive.encode(X_all, encoder)
    split_of = {a: "train" for a in split.train} | {a: "test" for a in split.test}
    data = {
        "format": REPORT_VERSION,
        "config_hash": h,
        "config": resolved,
        "platforms": {"pretrain": source.platform, "finetune": dataset.platform},
        "dataset": {"n_transactions": len(dataset.transactions),
                    "n_addresses": len(dataset.addresses),
                    "n_labeled": len(dataset.labels),
                    "label_counts": _label_counts(dataset)},
        "split": {"protocol": split.protocol, "n_train": len(split.train), "n_test": len(split.test),
                  "n_unused": len(split.unused),
                  "train_counts": _counts(dataset, split.train, task),
                  "test_counts": _counts(dataset, split.test, task)},
        "classes": list(classes),
        "metrics": report.to_json(),
        "distances": distances.to_json() if distances is not None else None,
        "losses": {"gae": src_view.losses, "pretrain": pretrain_log, "finetune": clf.losses},
        "checksums": {"encoder": encoder_checksum},
        "seeds": {k: resolved[k]["seed"] for k in ("split", "gae", "encoder", "contrastive",
                                                  "finetune", "distance")},
        "warnings": clf.warnings,
    }
    st.times["total"] = round(time.perf_counter() - t_start, 3)
    data[WALL_CLOCK_KEY] = dict(st.times)
    artifacts = {
        "view": view, "source_view": src_view, "encoder": encoder, "classifier": clf,
        "split": split, "stats": stats, "fused": X_all, "embeddings": embeddings,
        "split_of": split_of, "y_test": y_test, "y_pred": y_pred, "scores": scores,
        "metrics_report": report, "distances": distances, "dataset": dataset,
    }
    return ExperimentReport(data, artifacts)


def cross_platform_run(pretrain_dataset: Dataset, finetune_dataset: Dataset,
                       config: ExperimentConfig | Mapping | None = None) -> ExperimentReport:
    """Pre-train on ``pretrain_dataset`` (labels unused), fine-tune and test on the other."""
    if not isinstance(config, ExperimentConfig):
        config = config_from_dict(config)
    resolved = resolve_config(config)
    resolved["split"]["protocol"] = "cross_platform"
    resolved["split"]["platforms"] = [pretrain_dataset.platform, finetune_dataset.platform]
    return run_pipeline(resolved, finetune_dataset,
                        None if pretrain_dataset is finetune_dataset else pretrain_dataset)


# ---------------------------------------------------------------- reporting

def strip_wall_clock(report: Mapping) -> dict:
    return {k: v for k, v in report.items() if k != WALL_CLOCK_KEY}


def report_json(report: Mapping) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(out_dir: str | Path, report: ExperimentReport) -> Path:
    """Write report.json, CSV tables, checkpoints and logs under ``out_dir``."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(parents=True, exist_ok=True)
    data, art = report.data, report.artifacts
    (out / "report.json").write_text(report_json(data), encoding="utf-8")
    (out / "config.resolved.json").write_text(
        json.dumps(data["config"], indent=2, sort_keys=True) + "\n", encoding="utf-8")

    m = data["metrics"]
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "f1", "support"])
        for c, row in m["per_class"].items():
            w.writerow([c, repr(row["precision"]), repr(row["recall"]), repr(row["f1"]), row["support"]])
        w.writerow([m["averaging"], repr(m["precision"]), repr(m["recall"]), repr(m["f1"]),
                    sum(r["support"] for r in m["per_class"].values())])

    write_distances(out / "distances.csv", art.get("distances"))

    view, emb = art["view"], art["embeddings"]
    ds = art["dataset"]
    with open(out / "embeddings.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["address", "label", "split", *[f"e{i}" for i in range(emb.shape[1])]])
        for a, vec in zip(view.addresses, emb):
            w.writerow([a, ds.labels[a].value, art["split_of"].get(a, "unused"),
                        *[repr(float(v)) for v in vec]])

    split = art["split"]
    classify.write_predictions(out / "predictions.csv", split.test,
                               art["y_test"], art["y_pred"], art["scores"], data["classes"])
    structgae.save_gae(art["source_view"].model, out / "checkpoints" / "gae.npz")
    contrastive.save_checkpoint(out / "checkpoints" / "encoder.npz", art["encoder"],
                                config_hash=data["config_hash"])
    structgae.write_loss_curve(out / "logs" / "gae_loss.csv", data["losses"]["gae"])
    contrastive.write_training_log(out / "logs" / "pretrain.csv", data["losses"]["pretrain"])
    with open(out / "logs" / "finetune.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, l in enumerate(data["losses"]["finetune"]):
            fh.write(f"{i},{l!r}\n")
    return out / "report.json"


def write_distances(path: str | Path, distances: DistanceMatrix | None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if distances is None:
            w.writerow(["group"])
            return
        w.writerow(["group", *distances.groups])
        for g, row in zip(distances.groups, distances.matrix):
            w.writerow([g, *["" if not np.isfinite(v) else repr(float(v)) for v in row]])


def run_experiment(config: ExperimentConfig | Mapping | str | Path,
                   out_dir: str | Path | None = None, cache: dict | None = None) -> ExperimentReport:
    """Resolve ``config``, run the pipeline and optionally write artifacts."""
    if isinstance(config, (str, Path)):
        config = load_config(config)
    elif not isinstance(config, ExperimentConfig):
        config = config_from_dict(config)
    resolved = resolve_config(config)
    report = run_pipeline(resolved, cache=cache)
    if out_dir is not None:
        write_report(out_dir, report)
    return report
