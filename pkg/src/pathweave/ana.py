"""Adapter-in-adapter composition.

Each modality m >= 1 owns a ModalityPath: one low-rank uni-adapter per site,
one rank-space in-adapter per (site, earlier modality), one gating projection
per site, and the modality's query bank. A path freezes once trained; later
paths re-route the frozen adapters through their own in-adapters, so nothing
belonging to history is ever written again.

At a site with input x the path output added to the host transform is

    sum_{i<m} w_i * F_u_i(W_in_i(F_d_i(x))) + w_m * F_u_m(F_d_m(x))

with per-token weights w = softmax(x @ W_g) over the m paths (no top-k:
every path always contributes). Disabling gating fixes unit weights;
disabling in-adapters routes history adapters directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class AnaConfig:
    rank: int = 4
    in_adapter_init: str = "identity"  # or "zeros"
    use_in_adapter: bool = True
    use_gating: bool = True
    use_history: bool = True  # False: plain incremental adapters, no cross paths

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("adapter rank must be >= 1")
        if self.in_adapter_init not in ("identity", "zeros"):
            raise ContractError(f"unknown in_adapter_init {self.in_adapter_init!r}")
        if not self.use_history and self.use_gating:
            raise ContractError("gating needs cross paths; disable use_gating with use_history=False")


class UniAdapter:
    """Low-rank residual branch: x -> up(down(x)), scale fixed at 1."""

    def __init__(self, modality: int, site: str, d_model: int, rank: int, seed: int):
        self.modality = modality
        self.site = site
        self.rank = rank
        self.down = T.seeded_init((d_model, rank), "normal:0.02", seed,
                                  f"path.m{modality}", site, "uni.down")
        self.down.requires_grad = True
        self.up = T.seeded_init((rank, d_model), "zeros", seed)
        self.up.requires_grad = True

    @property
    def frozen(self) -> bool:
        return self.down.frozen and self.up.frozen


class InAdapter:
    """Square rank-space map spliced between a frozen adapter's projections."""

    def __init__(self, owner: int, target: UniAdapter, site: str, init: str):
        if not target.frozen:
            raise ContractError(
                f"in-adapter target (modality {target.modality}, site {site}) is not frozen")
        self.owner = owner
        self.target = target
        self.site = site
        scheme = "identity" if init == "identity" else "zeros"
        self.w = T.seeded_init((target.rank, target.rank), scheme, 0)
        self.w.requires_grad = True


class GatingModule:
    """Per-token linear producing one logit per path."""

    def __init__(self, modality: int, site: str, d_model: int, n_paths: int):
        if n_paths != modality:
            raise ContractError(f"gate for modality {modality} needs {modality} paths, got {n_paths}")
        self.modality = modality
        self.site = site
        self.n_paths = n_paths
        self.w = T.seeded_init((d_model, n_paths), "zeros", 0)
        self.w.requires_grad = True


def uni_forward(adapter: UniAdapter, x: Tensor) -> Tensor:
    """Additive adapter response up(down(x))."""
    if x.shape[-1] != adapter.down.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != adapter d_model {adapter.down.shape[0]}")
    return T.matmul(T.matmul(x, adapter.down), adapter.up)


def cross_forward(in_adapter: InAdapter, target: UniAdapter, x: Tensor) -> Tensor:
    """History adapter re-routed through the owner's rank-space map."""
    if not target.frozen:
        raise ContractError("cross_forward requires a frozen target adapter")
    if in_adapter.w.shape[0] != target.rank:
        raise ShapeError(f"in-adapter rank {in_adapter.w.shape[0]} != target rank {target.rank}")
    return T.matmul(T.matmul(T.matmul(x, target.down), in_adapter.w), target.up)


def gate_weights(gate: GatingModule, x: Tensor) -> Tensor:
    """Per-token softmax over path logits; rows land on the simplex."""
    return T.softmax(T.matmul(x, gate.w), axis=-1)


class ModalityPath:
    """Complete per-modality parameter set plus freeze state."""

    def __init__(self, modality: int, uni: dict, targets: dict, in_adapters: dict,
                 gates: dict, query_bank, use_in_adapter: bool, use_gating: bool):
        self.modality = modality
        self.uni = uni                    # site -> UniAdapter
        self.targets = targets            # site -> [UniAdapter of modalities 1..m-1]
        self.in_adapters = in_adapters    # site -> [InAdapter], aligned with targets
        self.gates = gates                # site -> GatingModule (empty if gating off)
        self.query_bank = query_bank
        self.use_in_adapter = use_in_adapter
        self.use_gating = use_gating
        self.frozen = False
        self.weight_hashes: dict[str, str] = {}

    def sites(self) -> list[str]:
        return list(self.uni.keys())

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for site, uni in self.uni.items():
            out[f"path.m{self.modality}.{site}.uni.down"] = uni.down
            out[f"path.m{self.modality}.{site}.uni.up"] = uni.up
            for ia in self.in_adapters[site]:
                out[f"path.m{self.modality}.{site}.in{ia.target.modality}.w"] = ia.w
            if site in self.gates:
                out[f"path.m{self.modality}.{site}.gate.w"] = self.gates[site].w
        return out

    def trainable_tensors(self) -> dict[str, Tensor]:
        out = dict(self.named_tensors())
        out[f"query.m{self.modality}"] = self.query_bank.tokens
        return out

    def freeze(self) -> None:
        for name, t in self.trainable_tensors().items():
            t.freeze()
            self.weight_hashes[name] = t.content_hash()
        self.frozen = True

    def verify_hashes(self) -> None:
        for name, t in self.trainable_tensors().items():
            if t.content_hash() != self.weight_hashes[name]:
                raise ContractError(f"frozen tensor {name} changed")


@dataclass
class InferenceConfig:
    """Exact evaluation setup for one modality: its path (None for the
    pretraining modality) and its query bank. In-adapters owned by later
    modalities are absent by construction."""

    modality: int
    path: "ModalityPath | None"
    query_bank: object


class AdapterStack:
    """All modality paths plus the shared query-bank registry."""

    def __init__(self, backbone_config, ana_config: AnaConfig, query_banks: dict):
        self.backbone_config = backbone_config
        self.config = ana_config
        self.query_banks = query_banks
        self.paths: dict[int, ModalityPath] = {}

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for m in sorted(self.paths):
            out.update(self.paths[m].named_tensors())
        return out

    def expand_modality(self, m: int, seed: int) -> ModalityPath:
        return expand_modality(self, m, seed)

    def freeze_path(self, m: int) -> None:
        freeze_path(self.paths[m])

    def switch_path(self, i: int) -> InferenceConfig:
        return switch_path(self, i)


def expand_modality(stack: AdapterStack, m: int, seed: int) -> ModalityPath:
    """Create the trainable path for a new modality.

    Uni-adapters start init-neutral (zero up-projection), in-adapters start
    at identity (reuse history verbatim) unless configured to zeros, gates
    start at zeros (uniform 1/m weights). Only these tensors plus the new
    query bank are trainable afterwards.
    """
    from .backbone import QueryBank  # deferred: backbone imports this module

    if m < 1:
        raise ContractError("modality 0 is the pretraining modality; paths start at 1")
    if m in stack.paths:
        raise ContractError(f"path {m} already exists")
    for i in range(1, m):
        if i not in stack.paths:
            raise ContractError(f"path {i} missing; expand modalities in order")
        if not stack.paths[i].frozen:
            raise ContractError(f"path {i} must be frozen before expanding to {m}")
    if 0 not in stack.query_banks or not stack.query_banks[0].frozen:
        raise ContractError("stage-0 query bank must exist and be frozen")

    bcfg, acfg = stack.backbone_config, stack.config
    uni, targets, in_adapters, gates = {}, {}, {}, {}
    for site in bcfg.site_ids():
        uni[site] = UniAdapter(m, site, bcfg.d_model, acfg.rank, seed)
        targets[site] = [stack.paths[i].uni[site] for i in range(1, m)] if acfg.use_history else []
        if acfg.use_history and acfg.use_in_adapter:
            in_adapters[site] = [InAdapter(m, t, site, acfg.in_adapter_init)
                                 for t in targets[site]]
        else:
            in_adapters[site] = []
        if acfg.use_gating:
            gates[site] = GatingModule(m, site, bcfg.d_model, m)

    bank = QueryBank(m, bcfg, seed, init_from=stack.query_banks[0])
    stack.query_banks[m] = bank
    path = ModalityPath(m, uni, targets, in_adapters, gates, bank,
                        acfg.use_in_adapter, acfg.use_gating)
    stack.paths[m] = path
    return path


def freeze_path(path: ModalityPath) -> None:
    path.freeze()


def switch_path(stack: AdapterStack, i: int) -> InferenceConfig:
    """Assemble modality i's exact inference configuration."""
    if i == 0:
        if 0 not in stack.query_banks:
            raise ContractError("modality 0 has no query bank yet")
        return InferenceConfig(0, None, stack.query_banks[0])
    path = stack.paths.get(i)
    if path is None:
        raise ContractError(f"unknown modality id {i}")
    current = max(stack.paths)
    if not path.frozen and i != current:
        raise ContractError(f"path {i} is neither frozen nor current")
    return InferenceConfig(i, path, path.query_bank)


def site_forward(host, x: Tensor, path: ModalityPath, site: str) -> Tensor:
    """Host output plus the gated mixture of cross and uni adapter paths."""
    uni = path.uni.get(site)
    if uni is None:
        raise ContractError(f"path {path.modality} has no site {site}")
    y = host(x)

    branches = []
    for k, target in enumerate(path.targets[site]):
        if path.use_in_adapter:
            branches.append(cross_forward(path.in_adapters[site][k], target, x))
        else:
            branches.append(uni_forward(target, x))
    branches.append(uni_forward(uni, x))

    if not path.use_gating:
        for b in branches:
            y = T.add(y, b)
        return y

    w = gate_weights(path.gates[site], x)
    for j, b in enumerate(branches):
        y = T.add(y, T.mul(T.slice_last(w, j), b))
    return y


def trainable_param_count(backbone_config, ana_config: AnaConfig, m: int) -> int:
    """Closed-form size of the stage-m trainable set.

    With both mechanisms enabled this is
    P_sites * (2*d*r + (m-1)*r^2 + d*m) + n_queries*d
    where P_sites = len(adapter_sites) * n_layers. Disabled mechanisms drop
    their term, matching what expand_modality actually registers.
    """
    if m < 1:
        raise ContractError("paths exist for modalities >= 1")
    d = backbone_config.d_model
    r = ana_config.rank
    p_sites = len(backbone_config.adapter_sites) * backbone_config.n_layers
    per_site = 2 * d * r
    if ana_config.use_history and ana_config.use_in_adapter:
        per_site += (m - 1) * r * r
    if ana_config.use_gating:
        per_site += d * m
    return p_sites * per_site + backbone_config.n_queries * d
