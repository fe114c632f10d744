"""Zero-cost saliency proxies for LoRA and shortcut modules.

Each proxy returns ``{ModuleId: SaliencyScore}``.  Scoring enables every
installed module for the duration of the pass, so disabled modules are ranked
on equal footing, and restores parameters, enablement and gradients after.

Two bases are supported:

``decomposed``
    per-parameter scores summed over the entries of ``A`` and ``B``.
``merged``
    per-parameter scores summed over the entries of the whole module weight
    ``W' = W0 + (alpha/r) B A``, with gradients taken with respect to ``W'``.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import LoraAdapter, ModuleId, ShortcutAdapter
from .autodiff import Tensor

PROXIES = ("constant", "snip", "synflow", "gradnorm")
BASES = ("decomposed", "merged")


@dataclass(frozen=True)
class SaliencyScore:
    module: ModuleId
    value: float
    proxy: str
    basis: str
    batch_budget: int

    def as_record(self) -> dict:
        return {"layer": self.module.layer, "site": self.module.site, "proxy": self.proxy,
                "basis": self.basis, "value": self.value}


def _check(proxy: str, basis: str) -> None:
    if proxy not in PROXIES:
        raise ValueError(f"unknown proxy {proxy!r}; expected one of {PROXIES}")
    if basis not in BASES:
        raise ValueError(f"unknown basis {basis!r}; expected one of {BASES}")


def _batches(data) -> list:
    data = list(data)
    if not data:
        raise ValueError("saliency scoring needs at least one batch")
    return data


def merged_weight(model, mid: ModuleId) -> np.ndarray:
    """Row-major ``W'`` of a module, the transpose of ``W0 + (alpha/r) B A``."""
    adapter = model.adapters[mid]
    if isinstance(adapter, ShortcutAdapter):
        base = adapter.base_matrix()
    else:
        base = model.params[f"layers.{mid.layer}.{mid.site}.weight"].data
    return base + adapter.delta().T


@contextmanager
def scoring_session(model):
    """Enable all modules and guarantee the model is restored afterwards."""
    params = model.named_parameters()
    snapshot = {k: p.data.copy() for k, p in params.items()}
    grads = {k: p.grad for k, p in params.items()}
    enabled = {m: a.enabled for m, a in model.adapters.items()}
    for a in model.adapters.values():
        a.enabled = True
        a.A.grad = a.B.grad = None
    try:
        yield
    finally:
        for k, p in params.items():
            p.data[...] = snapshot[k]
            p.grad = grads[k]
        for m, a in model.adapters.items():
            a.enabled = enabled[m]
            a.override = None
            a.masks = None


def _install_overrides(model, weights: Mapping[ModuleId, np.ndarray]) -> dict[ModuleId, Tensor]:
    out = {}
    for mid, w in weights.items():
        t = Tensor(np.array(w, dtype=model.dtype), requires_grad=True)
        model.adapters[mid].override = t
        out[mid] = t
    return out


def _install_masks(adapters: Iterable[LoraAdapter], merged: bool) -> dict[ModuleId, tuple[Tensor, ...]]:
    out = {}
    for a in adapters:
        if merged:
            masks = (Tensor(np.ones_like(a.override.data), requires_grad=True),)
        else:
            masks = (Tensor(np.ones_like(a.A.data), requires_grad=True),
                     Tensor(np.ones_like(a.B.data), requires_grad=True))
        a.masks = masks
        out[a.target] = masks
    return out


def _accumulate_loss_grads(model, batches: Sequence, loss_scale: float = 1.0) -> None:
    # gradient of the batch-averaged loss
    w = loss_scale / len(batches)
    for b in batches:
        loss = model.loss(b.tokens, b.targets, b.positions)
        ad.scale(loss, w).backward()


def _grad(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


def snip_scores(model, data, basis: str = "decomposed", via_mask: bool = False) -> dict[ModuleId, SaliencyScore]:
    """SNIP: ``sum |theta * dL/dtheta|`` over a module's parameters.

    With ``via_mask`` the derivative is taken with respect to an all-ones
    multiplicative mask instead; at mask = 1 the two coincide.
    """
    _check("snip", basis)
    batches = _batches(data)
    values = {}
    with scoring_session(model):
        adapters = list(model.adapters.values())
        overrides = _install_overrides(model, {a.target: merged_weight(model, a.target) for a in adapters}) \
            if basis == "merged" else {}
        masks = _install_masks(adapters, basis == "merged") if via_mask else {}
        _accumulate_loss_grads(model, batches)
        for a in adapters:
            mid = a.target
            if via_mask:
                values[mid] = float(np.sum([np.abs(_grad(m)).sum() for m in masks[mid]]))
            elif basis == "merged":
                w = overrides[mid]
                values[mid] = float(np.abs(w.data * _grad(w)).sum())
            else:
                values[mid] = float(np.abs(a.A.data * _grad(a.A)).sum() + np.abs(a.B.data * _grad(a.B)).sum())
    return {m: SaliencyScore(m, v, "snip", basis, len(batches)) for m, v in values.items()}


def synflow_scores(model, basis: str = "decomposed", seq_len: int | None = None) -> dict[ModuleId, SaliencyScore]:
    """SYNFLOW: data-free ``sum theta * dR/dtheta``.

    All weights are replaced by their magnitudes, an all-ones vector takes the
    place of every token embedding (positional rows are still added), and
    ``R`` is the sum of all output logits.  The product uses the original signed ``theta``.
    """
    _check("synflow", basis)
    cfg = model.config
    t = seq_len or cfg.max_seq_len
    values = {}
    with scoring_session(model):
        adapters = list(model.adapters.values())
        if basis == "merged":
            signed = {a.target: merged_weight(model, a.target) for a in adapters}
            overrides = _install_overrides(model, {m: np.abs(w) for m, w in signed.items()})
        else:
            signed = {a.target: (a.A.data.copy(), a.B.data.copy()) for a in adapters}
        for p in model.named_parameters().values():
            np.abs(p.data, out=p.data)
        # ones stand in for the token embeddings; positions keep the rows distinct
        # so attention scores still depend on Q and K
        h = np.ones((1, t, cfg.d_model), dtype=model.dtype) + model.params["embed.positions"].data[:t]
        ad.sum(model.forward(embeddings=Tensor(h))).backward()
        for a in adapters:
            mid = a.target
            if basis == "merged":
                values[mid] = float((signed[mid] * _grad(overrides[mid])).sum())
            else:
                sa, sb = signed[mid]
                values[mid] = float((sa * _grad(a.A)).sum() + (sb * _grad(a.B)).sum())
    return {m: SaliencyScore(m, v, "synflow", basis, 0) for m, v in values.items()}


def gradnorm_scores(model, data, basis: str = "decomposed", loss_scale: float = 1.0) -> dict[ModuleId, SaliencyScore]:
    """GRAD-NORM: ``||dL/dA|| + ||dL/dB||`` (Frobenius), or ``||dL/dW'||`` when merged."""
    _check("gradnorm", basis)
    batches = _batches(data)
    values = {}
    with scoring_session(model):
        adapters = list(model.adapters.values())
        overrides = _install_overrides(model, {a.target: merged_weight(model, a.target) for a in adapters}) \
            if basis == "merged" else {}
        _accumulate_loss_grads(model, batches, loss_scale)
        for a in adapters:
            if basis == "merged":
                values[a.target] = float(np.linalg.norm(_grad(overrides[a.target])))
            else:
                values[a.target] = float(np.linalg.norm(_grad(a.A)) + np.linalg.norm(_grad(a.B)))
    return {m: SaliencyScore(m, v, "gradnorm", basis, len(batches)) for m, v in values.items()}


def constant_scores(registry: Mapping[ModuleId, LoraAdapter], basis: str = "decomposed") -> dict[ModuleId, SaliencyScore]:
    return {m: SaliencyScore(m, 1.0, "constant", basis, 0) for m in registry}


def compute_scores(model, proxy: str, data=None, basis: str = "decomposed") -> dict[ModuleId, SaliencyScore]:
    _check(proxy, basis)
    if proxy == "constant":
        return constant_scores(model.adapters, basis)
    if proxy == "synflow":
        return synflow_scores(model, basis)
    if proxy == "snip":
        return snip_scores(model, data, basis)
    return gradnorm_scores(model, data, basis)


def write_scores_csv(scores: Mapping[ModuleId, SaliencyScore], path) -> None:
    lines = ["layer,site,proxy,basis,value"]
    for mid in sorted(scores):
        s = scores[mid]
        lines.append(f"{mid.layer},{mid.site},{s.proxy},{s.basis},{s.value!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
