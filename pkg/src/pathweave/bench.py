"""Synthetic modality-incremental benchmark.

Each modality is a seeded recipe: a frozen random encoder with its own
nonlinearity and sequence length, a gaussian (optionally heavy-tailed) input
distribution, and a fixed linear readout whose argmax over the clean vector
labels every sample. In-domain datasets are independent draws from the base
distribution (val/test style); the out-of-domain dataset doubles the
covariance scale while keeping the label rule. Eval splits are materialized
once, hashed, and never resampled.

Class balance is enforced by quota-stratified sampling: draws are rejected
once their class quota is full, which yields exact balance or a
GenerationError if some class mass is so small that 100x oversampling
cannot fill it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import ENCODER_NONLINEARITIES, ModalityEncoder, forward
from .errors import ContractError, GenerationError
from .tensor import Tensor

IN_DOMAIN = "in_domain"
OUT_OF_DOMAIN = "out_of_domain"

_NONLIN_CYCLE = tuple(ENCODER_NONLINEARITIES)


@dataclass(frozen=True)
class DatasetSpec:
    dataset_id: int
    name: str
    domain: str
    n_train: int
    n_eval: int


@dataclass(frozen=True)
class SyntheticModalitySpec:
    """Seeded generative recipe for one modality."""

    modality: int
    seed: int
    d_raw: int
    seq_len: int
    d_enc: int
    n_classes: int
    nonlinearity: str
    mean_scale: float = 0.3
    cov_scale: float = 1.0
    heavy_tail: bool = False
    noise: float = 0.05
    margin: float = 0.5  # min top-2 readout gap, in units of cov_scale*sqrt(d_raw)
    datasets: tuple = ()


@dataclass
class Dataset:
    modality: int
    dataset_id: int
    name: str
    domain: str
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray
    eval_hash: str = ""

    def __post_init__(self):
        for arr in (self.train_x, self.train_y, self.eval_x, self.eval_y):
            arr.flags.writeable = False
        if not self.eval_hash:
            self.eval_hash = _split_hash(self.eval_x, self.eval_y)

    @property
    def n_train(self) -> int:
        return len(self.train_y)

    @property
    def n_eval(self) -> int:
        return len(self.eval_y)

    def train_hash(self) -> str:
        return _split_hash(self.train_x, self.train_y)


def _split_hash(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(x.tobytes())
    h.update(y.tobytes())
    return h.hexdigest()


def _quota_sample(n: int, spec: SyntheticModalitySpec, readout: np.ndarray,
                  mean: np.ndarray, cov_scale: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw n labelled samples with exact per-class quotas.

    Samples whose top-2 readout scores are closer than the margin are
    rejected, which keeps classes separable at the configured sample sizes.
    """
    c = spec.n_classes
    quota = np.full(c, n // c, dtype=np.int64)
    quota[: n % c] += 1
    xs = np.empty((n, spec.d_raw), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    gap_floor = spec.margin * cov_scale * np.sqrt(spec.d_raw)
    filled = 0
    budget = 100 * n
    chunk = max(256, n)
    while filled < n:
        if budget <= 0:
            raise GenerationError(
                f"modality {spec.modality}: class balance unachievable "
                f"(quotas left: {quota.tolist()})")
        k = min(chunk, budget)
        budget -= k
        z = rng.standard_normal((k, spec.d_raw))
        if spec.heavy_tail:
            z = z / np.sqrt(rng.chisquare(4.0, size=(k, 1)) / 4.0)
        clean = mean + cov_scale * z
        scores = clean @ readout
        part = np.partition(scores, c - 2, axis=1)
        ok = (part[:, c - 1] - part[:, c - 2]) >= gap_floor
        labels = np.argmax(scores, axis=1)
        for row in np.nonzero(ok)[0]:
            label = int(labels[row])
            if quota[label] == 0:
                continue
            quota[label] -= 1
            noisy = clean[row] + spec.noise * rng.standard_normal(spec.d_raw)
            xs[filled] = noisy.astype(np.float32)
            ys[filled] = label
            filled += 1
            if filled == n:
                break
    return xs, ys


def generate_modality(spec: SyntheticModalitySpec) -> tuple[ModalityEncoder, list[Dataset]]:
    """Materialize the encoder and every dataset of one modality."""
    encoder = ModalityEncoder(spec.modality, spec.d_raw, spec.seq_len, spec.d_enc,
                              spec.seed, spec.nonlinearity)
    readout = T.rng_for(spec.seed, "readout", spec.modality).standard_normal(
        (spec.d_raw, spec.n_classes))
    mean = T.rng_for(spec.seed, "mean", spec.modality).standard_normal(
        spec.d_raw) * spec.mean_scale

    datasets = []
    for ds in spec.datasets:
        cov = spec.cov_scale * (2.0 if ds.domain == OUT_OF_DOMAIN else 1.0)
        rng_train = T.rng_for(spec.seed, "train", spec.modality, ds.dataset_id)
        rng_eval = T.rng_for(spec.seed, "eval", spec.modality, ds.dataset_id)
        train_x, train_y = _quota_sample(ds.n_train, spec, readout, mean, cov, rng_train)
        eval_x, eval_y = _quota_sample(ds.n_eval, spec, readout, mean, cov, rng_eval)
        datasets.append(Dataset(spec.modality, ds.dataset_id, ds.name, ds.domain,
                                train_x, train_y, eval_x, eval_y))
    return encoder, datasets


def sample_batch(dataset: Dataset, batch_size: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """With-replacement batch from the train split only."""
    idx = rng.integers(0, dataset.n_train, size=batch_size)
    return dataset.train_x[idx], dataset.train_y[idx]


def evaluate(core, config, encoder: ModalityEncoder, dataset: Dataset,
             batch_size: int = 64) -> float:
    """Accuracy x100 over the frozen eval split; deterministic."""
    correct = 0
    for lo in range(0, dataset.n_eval, batch_size):
        x = dataset.eval_x[lo:lo + batch_size]
        y = dataset.eval_y[lo:lo + batch_size]
        logits = forward(core, config.query_bank, Tensor(encoder.encode(x)), config.path)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return 100.0 * correct / dataset.n_eval


def logits_on(core, config, encoder: ModalityEncoder, x: np.ndarray) -> np.ndarray:
    """Raw logits for a fixed probe batch (used for bit-identity checks)."""
    return forward(core, config.query_bank, Tensor(encoder.encode(x)), config.path).data


# ---------------------------------------------------------------------------
# Default benchmark


@dataclass(frozen=True)
class BenchmarkConfig:
    seed: int = 0
    n_modalities: int = 5
    n_classes: int = 8
    d_raw: int = 32
    d_enc: int = 16
    seq_lengths: tuple = (4, 6, 8, 10, 12)
    n_in_domain: int = 2
    n_out_domain: int = 1
    n_train: int = 2048
    n_eval: int = 256
    noise: float = 0.05
    mean_scale: float = 0.3
    cov_scale: float = 1.0
    margin: float = 0.5

    def __post_init__(self):
        if self.n_modalities > len(self.seq_lengths):
            raise ContractError("need one sequence length per modality")
        if self.n_modalities > len(_NONLIN_CYCLE):
            raise ContractError(
                f"at most {len(_NONLIN_CYCLE)} modalities (distinct nonlinearities)")


@dataclass
class ModalityBundle:
    spec: SyntheticModalitySpec
    encoder: ModalityEncoder
    datasets: list

    def in_domain(self) -> list:
        return [d for d in self.datasets if d.domain == IN_DOMAIN]


@dataclass
class Benchmark:
    config: BenchmarkConfig
    modalities: list = field(default_factory=list)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    def dataset_names(self, m: int) -> list[str]:
        return [d.name for d in self.modalities[m].datasets]

    def manifest(self) -> dict:
        mods = []
        for bundle in self.modalities:
            s = bundle.spec
            mods.append({
                "modality": s.modality,
                "seed": s.seed,
                "nonlinearity": s.nonlinearity,
                "seq_len": s.seq_len,
                "encoder_hash": bundle.encoder.content_hash(),
                "datasets": [{
                    "name": d.name,
                    "domain": d.domain,
                    "n_train": d.n_train,
                    "n_eval": d.n_eval,
                    "train_hash": d.train_hash(),
                    "eval_hash": d.eval_hash,
                } for d in bundle.datasets],
            })
        return {
            "format": "pathweave-benchmark",
            "version": 1,
            "seed": self.config.seed,
            "n_modalities": self.config.n_modalities,
            "n_classes": self.config.n_classes,
            "modalities": mods,
        }


def build_benchmark(cfg: BenchmarkConfig) -> Benchmark:
    """Deterministically materialize every modality of the benchmark."""
    bench = Benchmark(cfg)
    for m in range(cfg.n_modalities):
        specs = []
        for j in range(cfg.n_in_domain):
            specs.append(DatasetSpec(j, f"m{m}-in{j}", IN_DOMAIN, cfg.n_train, cfg.n_eval))
        for j in range(cfg.n_out_domain):
            specs.append(DatasetSpec(cfg.n_in_domain + j, f"m{m}-ood{j}",
                                     OUT_OF_DOMAIN, cfg.n_train, cfg.n_eval))
        spec = SyntheticModalitySpec(
            modality=m,
            seed=cfg.seed * 1000 + m,
            d_raw=cfg.d_raw,
            seq_len=cfg.seq_lengths[m],
            d_enc=cfg.d_enc,
            n_classes=cfg.n_classes,
            nonlinearity=_NONLIN_CYCLE[m],
            mean_scale=cfg.mean_scale,
            cov_scale=cfg.cov_scale,
            noise=cfg.noise,
            margin=cfg.margin,
            datasets=tuple(specs),
        )
        encoder, datasets = generate_modality(spec)
        bench.modalities.append(ModalityBundle(spec, encoder, datasets))
    return bench
