"""Stage-wise continual training for the adapter method, its ablations, and
the full-finetune baselines, producing the score matrix the metrics consume.

Stage 0 always pretrains the core, head, and modality-0 query bank on the
first modality. Adapter-family methods then freeze the core and grow one
frozen path per modality; baselines keep the core and head trainable and rely
on weight ensembling or an anchor penalty (or nothing, for plain continual
finetuning). Eval sweeps after every stage fill S[m][i][n] for all i <= m.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import ana, bench, metrics
from . import tensor as T
from .backbone import BackboneConfig, FrozenCore, Model, QueryBank, forward
from .errors import ContractError, TrainingDivergedError
from .tensor import AdamWState, Tape, Tensor, adamw_step, backward, rng_for

METHODS = (
    "pathweave",
    "continual_adapter",
    "pathweave_no_gating",
    "pathweave_no_in_adapter",
    "continual_ft",
    "wise_ft",
    "l2reg_we",
)

ADAPTER_METHODS = METHODS[:4]
BASELINE_METHODS = METHODS[4:]

SCHEDULES = ("cosine_half_floor", "cosine_to_zero", "cosine_restart_half")

PROBE_BATCH = 32


@dataclass(frozen=True)
class StageTrainConfig:
    iterations: int = 2000
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_iters: int = 100
    warmup_floor: float = 1e-8
    schedule: str = "cosine_half_floor"
    inner_epoch_iters: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.warmup_iters >= self.iterations:
            raise ContractError("warmup_iters must be < iterations")
        for name in ("iterations", "batch_size", "peak_lr", "warmup_iters",
                     "warmup_floor", "inner_epoch_iters"):
            if getattr(self, name) <= 0 and name != "warmup_iters":
                raise ContractError(f"{name} must be positive")
        if self.warmup_iters < 0:
            raise ContractError("warmup_iters must be >= 0")
        if self.schedule not in SCHEDULES:
            raise ContractError(f"schedule must be one of {SCHEDULES}")


@dataclass(frozen=True)
class MethodConfig:
    method: str
    alpha: float = 0.8       # weight-ensembling coefficient
    l2_lambda: float = 0.01  # anchor penalty strength

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; valid: {METHODS}")
        if not 0.0 < self.alpha <= 1.0:
            raise ContractError("alpha must lie in (0, 1]")
        if self.l2_lambda < 0.0:
            raise ContractError("l2_lambda must be >= 0")

    @property
    def is_adapter_family(self) -> bool:
        return self.method in ADAPTER_METHODS

    def ana_config(self, rank: int = 4, in_adapter_init: str = "identity") -> ana.AnaConfig:
        if self.method == "continual_adapter":
            return ana.AnaConfig(rank, in_adapter_init, use_in_adapter=False,
                                 use_gating=False, use_history=False)
        return ana.AnaConfig(
            rank, in_adapter_init,
            use_in_adapter=self.method != "pathweave_no_in_adapter",
            use_gating=self.method != "pathweave_no_gating",
        )


def lr_at(cfg: StageTrainConfig, step: int, stage: int = 0) -> float:
    """Linear warmup from the floor, then cosine decay.

    The default schedule decays to half the peak at the last executed step;
    cosine_to_zero decays all the way down; cosine_restart_half additionally
    halves the peak once per completed stage.
    """
    peak = cfg.peak_lr
    if cfg.schedule == "cosine_restart_half":
        peak = peak * (0.5 ** stage)
    if step < cfg.warmup_iters:
        return cfg.warmup_floor + (peak - cfg.warmup_floor) * (step / cfg.warmup_iters)
    last = cfg.iterations - 1
    if last <= cfg.warmup_iters:
        return peak
    progress = min((step - cfg.warmup_iters) / (last - cfg.warmup_iters), 1.0)
    floor = 0.5 * peak if cfg.schedule == "cosine_half_floor" else 0.0
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def wise_ft_ensemble(params: dict[str, Tensor], anchor: dict[str, np.ndarray],
                     alpha: float) -> None:
    """theta <- alpha * theta_current + (1 - alpha) * theta_anchor, in place."""
    a = np.float32(alpha)
    for name, anchored in anchor.items():
        p = params[name]
        p.data *= a
        p.data += np.float32(1.0 - alpha) * anchored


def l2_anchor_penalty(params: dict[str, Tensor], anchor: dict[str, np.ndarray],
                      lam: float):
    """lam * sum of squared distances to the anchor, as a differentiable scalar."""
    total = Tensor(np.zeros((), dtype=np.float32))
    for name, anchored in anchor.items():
        d = T.sub(params[name], Tensor(anchored))
        total = T.add(total, T.tensor_sum(T.mul(d, d)))
    return T.scale(total, lam)


def _snapshot(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in tensors.items()}


def sgd_loop(model: Model, encoder, bank: QueryBank, datasets, params: dict[str, Tensor],
             cfg: StageTrainConfig, method: str = "pretrain", path=None,
             method_cfg: MethodConfig | None = None, stage: int = 0,
             anchor: dict[str, np.ndarray] | None = None) -> dict:
    """Cross-entropy training loop shared by pretraining and every stage.

    Returns {"records": [{step, loss, lr}...], "eval_accuracy": float}.
    """
    train_sets = [d for d in datasets if d.domain == bench.IN_DOMAIN]
    if not train_sets:
        raise ContractError("no in-domain datasets to train on")
    ensembling = method in ("wise_ft", "l2reg_we")
    penalized = method == "l2reg_we"
    if (ensembling or penalized) and anchor is None:
        raise ContractError(f"{method} needs anchor weights")

    state = AdamWState(lr=cfg.peak_lr)
    rng = rng_for(cfg.seed, "batches", method, stage)
    records = []
    for step in range(cfg.iterations):
        ds = train_sets[step % len(train_sets)]
        x, y = bench.sample_batch(ds, cfg.batch_size, rng)
        lr = lr_at(cfg, step, stage)
        with Tape():
            logits = forward(model.core, bank, Tensor(encoder.encode(x)), path)
            loss = T.cross_entropy(logits, y)
            if penalized:
                loss = T.add(loss, l2_anchor_penalty(
                    params, anchor, method_cfg.l2_lambda))
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDivergedError(
                    f"{method} stage {stage}: loss={loss_val} at step {step}")
            backward(loss)
        adamw_step(params, state, lr)
        if ensembling and (step + 1) % cfg.inner_epoch_iters == 0:
            wise_ft_ensemble(params, anchor, method_cfg.alpha)
        records.append({"step": step, "loss": loss_val, "lr": lr})

    cfg_obj = ana.InferenceConfig(bank.modality, path, bank)
    accs = [bench.evaluate(model.core, cfg_obj, encoder, d) for d in train_sets]
    return {"records": records, "eval_accuracy": sum(accs) / len(accs)}


def train_stage(model: Model, benchmark: bench.Benchmark, m: int,
                cfg: StageTrainConfig, method_cfg: MethodConfig) -> dict:
    """Train stage m >= 1 for the given method and freeze what must freeze."""
    if m < 1:
        raise ContractError("train_stage handles stages >= 1; use pretraining for stage 0")
    bundle = benchmark.modalities[m]

    if method_cfg.is_adapter_family:
        if model.stack is None or m not in model.stack.paths:
            raise ContractError("expand_modality must run before train_stage")
        model.core.verify_hash()
        path = model.stack.paths[m]
        if path.frozen:
            raise ContractError(f"path {m} is already frozen")
        params = path.trainable_tensors()
        bank = path.query_bank
        log = sgd_loop(model, bundle.encoder, bank, bundle.datasets, params, cfg,
                       method=method_cfg.method, path=path, method_cfg=method_cfg,
                       stage=m)
        ana.freeze_path(path)
        return log

    # full-finetune baselines: core + head + the new modality's query bank
    if m in model.query_banks:
        raise ContractError(f"stage {m} already trained")
    bank = QueryBank(m, model.core.config, cfg.seed, init_from=model.query_banks[0])
    model.query_banks[m] = bank
    core_tensors = model.core.named_tensors()
    params = dict(core_tensors)
    params[f"query.m{m}"] = bank.tokens
    anchor = _snapshot(core_tensors)  # ensembling/penalty cover core + head only
    log = sgd_loop(model, bundle.encoder, bank, bundle.datasets, params, cfg,
                   method=method_cfg.method, path=None, method_cfg=method_cfg,
                   stage=m, anchor=anchor)
    bank.freeze()
    return log


@dataclass
class RunResult:
    method: str
    seed: int
    model: Model
    benchmark: bench.Benchmark
    score_matrix: metrics.ScoreMatrix
    stage_logs: list = field(default_factory=list)
    probe_logits: dict = field(default_factory=dict)  # (stage, modality) -> ndarray
    wall_seconds: float = 0.0

    def inference_config(self, i: int) -> ana.InferenceConfig:
        if self.model.stack is not None:
            return ana.switch_path(self.model.stack, i)
        if i not in self.model.query_banks:
            raise ContractError(f"unknown modality id {i}")
        return ana.InferenceConfig(i, None, self.model.query_banks[i])


def _probe_batch(benchmark: bench.Benchmark, i: int) -> np.ndarray:
    return benchmark.modalities[i].datasets[0].eval_x[:PROBE_BATCH]


def evaluate_sweep(result: RunResult, m: int) -> None:
    """Fill S[m][i][n] for every modality i <= m and record probe logits."""
    sm = result.score_matrix
    for i in range(m + 1):
        cfg_i = result.inference_config(i)
        bundle = result.benchmark.modalities[i]
        for n, ds in enumerate(bundle.datasets):
            sm.scores[m][i][n] = bench.evaluate(result.model.core, cfg_i,
                                                bundle.encoder, ds)
        result.probe_logits[(m, i)] = bench.logits_on(
            result.model.core, cfg_i, bundle.encoder, _probe_batch(result.benchmark, i))


def run_sequence(benchmark: bench.Benchmark, method_cfg: MethodConfig,
                 backbone_cfg: BackboneConfig, ana_cfg: ana.AnaConfig | None,
                 pretrain_cfg: StageTrainConfig, stage_cfg: StageTrainConfig,
                 seed: int) -> RunResult:
    """Full continual run: pretrain stage 0, then one stage per modality,
    evaluating every dataset of every learned modality after each stage."""
    t0 = time.perf_counter()
    core = FrozenCore(backbone_cfg, seed)
    q0 = QueryBank(0, backbone_cfg, seed)
    model = Model(core, {0: q0})
    if method_cfg.is_adapter_family:
        if ana_cfg is None:
            ana_cfg = method_cfg.ana_config()
        model.stack = ana.AdapterStack(backbone_cfg, ana_cfg, model.query_banks)

    pretrain_cfg = replace(pretrain_cfg, seed=seed)
    stage_cfg = replace(stage_cfg, seed=seed)

    mods = [{"name": f"m{i}",
             "datasets": [{"name": d.name, "domain": d.domain}
                          for d in benchmark.modalities[i].datasets]}
            for i in range(benchmark.n_modalities)]
    sm = metrics.ScoreMatrix.empty([f"m{i}" for i in range(benchmark.n_modalities)], mods)
    result = RunResult(method_cfg.method, seed, model, benchmark, sm)

    bundle0 = benchmark.modalities[0]
    params0 = dict(core.named_tensors())
    params0["query.m0"] = q0.tokens
    log0 = sgd_loop(model, bundle0.encoder, q0, bundle0.datasets, params0,
                    pretrain_cfg, method="pretrain", stage=0)
    q0.freeze()
    if method_cfg.is_adapter_family:
        core.freeze()
    result.stage_logs.append(log0)
    evaluate_sweep(result, 0)

    for m in range(1, benchmark.n_modalities):
        if method_cfg.is_adapter_family:
            ana.expand_modality(model.stack, m, seed)
        result.stage_logs.append(train_stage(model, benchmark, m, stage_cfg, method_cfg))
        evaluate_sweep(result, m)

    result.wall_seconds = time.perf_counter() - t0
    return result


def evaluate_frozen_control(result: RunResult, m: int, domain: str | None = None) -> float:
    """T_m of the untouched stage-0 model on modality m (no adapters, q_0)."""
    cfg0 = ana.InferenceConfig(m, None, result.model.query_banks[0])
    bundle = result.benchmark.modalities[m]
    scores = [bench.evaluate(result.model.core, cfg0, bundle.encoder, d)
              for d in bundle.datasets
              if domain is None or d.domain == domain]
    return sum(scores) / len(scores)
