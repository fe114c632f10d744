"""LoRA adapters and LoRA-adapted shortcut modules.

Weights in the host model are stored row-major (``y = x @ W``), so a frozen
base matrix here is the transpose of the column-convention ``W0`` used in the
usual LoRA notation.  Adapter factors keep the column convention:
``A`` is ``(r, d_in)``, ``B`` is ``(d_out, r)`` and the update is
``(alpha / r) * B @ A`` with shape ``(d_out, d_in)``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import rng_for

LORA_SITES = ("q_proj", "k_proj", "v_proj", "o_proj", "ffn_w1", "ffn_w2")
SHORTCUT_KINDS = ("res1", "res2", "in", "cut")
SITES = LORA_SITES + SHORTCUT_KINDS
_SITE_RANK = {s: i for i, s in enumerate(SITES)}

A_INIT_STD = 0.02


class AdapterConfigError(ValueError):
    pass


@functools.total_ordering
@dataclass(frozen=True)
class ModuleId:
    layer: int
    site: str

    def __post_init__(self):
        if self.site not in _SITE_RANK:
            raise AdapterConfigError(f"unknown site {self.site!r}; expected one of {SITES}")

    def _key(self):
        return (self.layer, _SITE_RANK[self.site])

    def __lt__(self, other: ModuleId) -> bool:
        return self._key() < other._key()

    def __str__(self) -> str:
        return f"{self.layer}.{self.site}"

    @property
    def is_shortcut(self) -> bool:
        return self.site in SHORTCUT_KINDS

    @classmethod
    def parse(cls, text: str) -> ModuleId:
        layer, site = text.split(".", 1)
        return cls(int(layer), site)


class LoraAdapter:
    """Trainable low-rank pair wrapping a frozen base matrix."""

    def __init__(self, target: ModuleId, d_in: int, d_out: int, r: int, alpha: float,
                 rng: np.random.Generator, dtype=np.float64):
        if r < 1 or r > min(d_in, d_out):
            raise AdapterConfigError(f"{target}: rank {r} must be in [1, min({d_in}, {d_out})]")
        if alpha <= 0:
            raise AdapterConfigError(f"{target}: alpha must be positive")
        self.target = target
        self.d_in, self.d_out, self.r, self.alpha = d_in, d_out, int(r), float(alpha)
        self.A = Tensor(rng.normal(0.0, A_INIT_STD, size=(r, d_in)).astype(dtype), requires_grad=True)
        self.B = Tensor(np.zeros((d_out, r), dtype=dtype), requires_grad=True)
        self.enabled = True
        # scoring hooks: a replacement row-major weight and/or 0/1 masks
        self.override: Tensor | None = None
        self.masks: tuple[Tensor, ...] | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    @property
    def n_params(self) -> int:
        return (self.d_in + self.d_out) * self.r

    def parameters(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}

    def delta(self) -> np.ndarray:
        """``(alpha / r) * B @ A`` in column convention, shape ``(d_out, d_in)``."""
        return self.scaling * (self.B.data @ self.A.data)

    def __repr__(self) -> str:
        state = "on" if self.enabled else "off"
        return f"{type(self).__name__}({self.target}, r={self.r}, alpha={self.alpha}, {state})"


class ShortcutAdapter(LoraAdapter):
    """LoRA-style projection on a residual (identity base) or cross-layer (zero base) path."""

    def __init__(self, kind: str, layer: int, d_model: int, r: int, alpha: float,
                 rng: np.random.Generator, dtype=np.float64):
        if kind not in SHORTCUT_KINDS:
            raise AdapterConfigError(f"unknown shortcut kind {kind!r}")
        if kind == "cut" and layer < 1:
            raise AdapterConfigError("a cut shortcut needs a previous layer; layer 0 has none")
        super().__init__(ModuleId(layer, kind), d_model, d_model, r, alpha, rng, dtype)
        self.kind = kind
        self.w0_kind = "identity" if kind in ("res1", "res2") else "zero"

    def base_matrix(self) -> np.ndarray:
        d = self.d_model
        return np.eye(d, dtype=self.A.dtype) if self.w0_kind == "identity" else np.zeros((d, d), self.A.dtype)

    @property
    def d_model(self) -> int:
        return self.d_in


def _low_rank(x: Tensor, adapter: LoraAdapter) -> Tensor:
    A, B = adapter.A, adapter.B
    if adapter.masks is not None and len(adapter.masks) == 2:
        A = ad.mul(adapter.masks[0], A)
        B = ad.mul(adapter.masks[1], B)
    # x A^T B^T without forming the d_in x d_out update
    return ad.scale(ad.matmul(ad.matmul(x, ad.transpose(A)), ad.transpose(B)), adapter.scaling)


def _override_weight(adapter: LoraAdapter) -> Tensor:
    w = adapter.override
    if adapter.masks is not None and len(adapter.masks) == 1:
        w = ad.mul(adapter.masks[0], w)
    return w


def lora_forward(x: Tensor, W0: Tensor | None, adapter: LoraAdapter | None, bias: Tensor | None = None) -> Tensor:
    """Project ``x`` through a frozen row-major ``W0`` plus an optional LoRA update.

    For shortcut adapters ``W0`` is ignored and the base path is the identity
    (``x`` itself) or absent.  Returns ``None`` only for a zero-base shortcut
    that is disabled.
    """
    if isinstance(adapter, ShortcutAdapter):
        if not adapter.enabled:
            return x if adapter.w0_kind == "identity" else None
        if adapter.override is not None:
            return ad.matmul(x, _override_weight(adapter))
        low = _low_rank(x, adapter)
        return ad.add(x, low) if adapter.w0_kind == "identity" else low

    if adapter is not None and adapter.enabled and adapter.override is not None:
        out = ad.matmul(x, _override_weight(adapter))
        return out if bias is None else ad.add(out, bias)
    out = ad.matmul(x, W0)
    if bias is not None:
        out = ad.add(out, bias)
    if adapter is None or not adapter.enabled:
        return out
    return ad.add(out, _low_rank(x, adapter))


def lora_merge(W0: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Fold the update into a row-major base matrix: ``W0 + ((alpha/r) B A)^T``."""
    if not adapter.enabled:
        raise AdapterConfigError(f"{adapter.target}: refusing to merge a disabled adapter")
    W0 = np.asarray(W0)
    if W0.shape != (adapter.d_in, adapter.d_out):
        raise ad.DimensionError(f"lora_merge: base {W0.shape} vs adapter ({adapter.d_in}, {adapter.d_out})")
    return W0 + adapter.delta().T


def shortcut_layer_forward(
    h: Tensor,
    a_prev: Tensor | None,
    attn: Callable[[Tensor], Tensor],
    ffn: Callable[[Tensor], Tensor],
    ln1: Callable[[Tensor], Tensor],
    ln2: Callable[[Tensor], Tensor],
    shortcuts: Mapping[str, ShortcutAdapter],
) -> tuple[Tensor, Tensor]:
    """One post-LN block with LoRA-adapted shortcuts.

    a   = LN1(LN1(s_res1(h) + Attn(h)) + s_cut(a_prev))
    out = LN2(LN2(s_res2(a) + FFN(a)) + s_in(h))

    A missing or disabled cross-layer shortcut drops both its term and the
    outer normalisation; a missing or disabled residual shortcut is the plain
    identity residual.
    """
    res1, res2 = shortcuts.get("res1"), shortcuts.get("res2")
    cut, inn = shortcuts.get("cut"), shortcuts.get("in")
    if cut is not None and cut.enabled and a_prev is None:
        raise AdapterConfigError("cut shortcut enabled but no previous-layer state was provided")

    r1 = h if res1 is None else lora_forward(h, None, res1)
    a = ln1(ad.add(r1, attn(h)))
    if cut is not None and cut.enabled:
        a = ln1(ad.add(a, lora_forward(a_prev, None, cut)))

    r2 = a if res2 is None else lora_forward(a, None, res2)
    out = ln2(ad.add(r2, ffn(a)))
    if inn is not None and inn.enabled:
        out = ln2(ad.add(out, lora_forward(h, None, inn)))
    return a, out


@dataclass
class AdapterConfig:
    lora_sites: tuple[str, ...] = ("q_proj", "v_proj")
    lora_rank: int = 8
    lora_alpha: float = 16.0
    shortcut_kinds: tuple[str, ...] = ()
    shortcut_rank: int = 8
    shortcut_alpha: float = 4.0
    layers: tuple[int, ...] | None = None

    def __post_init__(self):
        self.lora_sites = tuple(self.lora_sites)
        self.shortcut_kinds = tuple(self.shortcut_kinds)
        for name, sites, allowed in (("lora_sites", self.lora_sites, LORA_SITES),
                                     ("shortcut_kinds", self.shortcut_kinds, SHORTCUT_KINDS)):
            if len(set(sites)) != len(sites):
                raise AdapterConfigError(f"{name}: duplicate entries in {list(sites)}")
            for s in sites:
                if s not in allowed:
                    raise AdapterConfigError(f"{name}: unknown site {s!r}; expected one of {allowed}")
        if self.layers is not None:
            self.layers = tuple(self.layers)


def _site_dims(cfg, site: str) -> tuple[int, int]:
    if site == "ffn_w1":
        return cfg.d_model, cfg.d_ff
    if site == "ffn_w2":
        return cfg.d_ff, cfg.d_model
    return cfg.d_model, cfg.d_model


def inject(model, config: AdapterConfig) -> dict[ModuleId, LoraAdapter]:
    """Install adapters on ``model`` and freeze everything except adapters and head.

    Returns the model's registry, ordered by :class:`ModuleId`.
    """
    cfg = model.config
    layers = range(cfg.n_layers) if config.layers is None else config.layers
    new: dict[ModuleId, LoraAdapter] = {}
    for layer in layers:
        if not 0 <= layer < cfg.n_layers:
            raise AdapterConfigError(f"layer {layer} outside [0, {cfg.n_layers})")
        for site in config.lora_sites:
            mid = ModuleId(layer, site)
            d_in, d_out = _site_dims(cfg, site)
            new[mid] = LoraAdapter(mid, d_in, d_out, config.lora_rank, config.lora_alpha,
                                   rng_for(cfg.seed, f"adapter/{mid}"), model.dtype)
        for kind in config.shortcut_kinds:
            if kind == "cut" and layer == 0:
                continue
            mid = ModuleId(layer, kind)
            new[mid] = ShortcutAdapter(kind, layer, cfg.d_model, config.shortcut_rank, config.shortcut_alpha,
                                       rng_for(cfg.seed, f"adapter/{mid}"), model.dtype)
    dup = set(new) & set(model.adapters)
    if dup:
        raise AdapterConfigError(f"adapters already installed at {sorted(str(m) for m in dup)}")
    model.freeze_base(train_head=True)
    model.adapters = dict(sorted({**model.adapters, **new}.items()))
    return model.adapters


def set_enabled(registry: Mapping[ModuleId, LoraAdapter], enabled: Iterable[ModuleId]) -> None:
    """Enable exactly ``enabled`` and disable every other module.

    Parameters and optimizer state of disabled modules are left untouched.
    """
    wanted = set(getattr(enabled, "enabled", enabled))
    unknown = wanted - set(registry)
    if unknown:
        raise KeyError(f"unknown modules in plan: {sorted(str(m) for m in unknown)}")
    for mid, adapter in registry.items():
        adapter.enabled = mid in wanted
