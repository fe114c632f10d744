"""A small post-layer-norm decoder Transformer used as the adapter host.

Base weights are seeded-random and frozen by :func:`heterolora.adapters.inject`,
standing in for a pre-trained checkpoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .adapters import (AdapterConfig, LoraAdapter, ModuleId, ShortcutAdapter, inject, lora_forward,
                       shortcut_layer_forward)
from .autodiff import Tensor
from .seeding import rng_for

HEAD_TYPES = ("classification", "causal-lm")
CHECKPOINT_FORMAT = "heterolora-checkpoint/1"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 128
    vocab_size: int = 16
    max_seq_len: int = 16
    head: str = "classification"
    n_classes: int = 2
    seed: int = 0
    causal: bool = True
    ln_eps: float = 1e-5
    precision: str = "float64"

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_seq_len", "n_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.head not in HEAD_TYPES:
            raise ConfigError(f"head must be one of {HEAD_TYPES}, got {self.head!r}")
        if self.precision not in ("float64", "float32"):
            raise ConfigError(f"precision must be float64 or float32, got {self.precision!r}")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def n_out(self) -> int:
        return self.n_classes if self.head == "classification" else self.vocab_size


def causal_mask(t: int) -> np.ndarray:
    return np.triu(np.full((t, t), -np.inf), k=1)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else ad.add(out, b)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k) + mask) V over the last two axes."""
    if Q.shape[-1] != K.shape[-1]:
        raise ad.DimensionError(f"attention: query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise ad.DimensionError(f"attention: {K.shape[-2]} keys but {V.shape[-2]} values")
    scores = ad.scale(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None and mask.shape[-2:] != scores.shape[-2:]:
        raise ad.DimensionError(f"attention: mask {mask.shape} vs scores {scores.shape}")
    return ad.matmul(ad.softmax(scores, axis=-1, mask=mask), V)


Projector = Callable[[str, Tensor], Tensor]


def _plain_projector(lp: Mapping[str, Tensor]) -> Projector:
    return lambda site, x: linear(x, lp[f"{site}.weight"], lp.get(f"{site}.bias"))


def multi_head_attention(x: Tensor, lp: Mapping[str, Tensor], n_heads: int,
                         mask: np.ndarray | None = None, project: Projector | None = None) -> Tensor:
    """Self-attention on ``x`` of shape ``(..., t, d_model)``.

    ``project(site, x)`` computes a named linear projection; it defaults to
    the plain weights in ``lp`` and is how adapters hook in.
    """
    project = project or _plain_projector(lp)
    *lead, t, d = x.shape
    if d % n_heads:
        raise ad.DimensionError(f"d_model={d} not divisible by {n_heads} heads")
    dh = d // n_heads
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(y):
        return ad.transpose(ad.reshape(y, (*lead, t, n_heads, dh)), perm)

    q, k, v = (split(project(s, x)) for s in ("q_proj", "k_proj", "v_proj"))
    heads = scaled_dot_attention(q, k, v, mask)
    merged = ad.reshape(ad.transpose(heads, perm), (*lead, t, d))
    return project("o_proj", merged)


def ffn_forward(x: Tensor, lp: Mapping[str, Tensor], project: Projector | None = None) -> Tensor:
    project = project or _plain_projector(lp)
    return project("ffn_w2", ad.relu(project("ffn_w1", x)))


def block_forward(h: Tensor, lp: Mapping[str, Tensor], n_heads: int, mask: np.ndarray | None = None,
                  eps: float = 1e-5, project: Projector | None = None) -> Tensor:
    """Adapter-free post-LN block: a = LN1(h + Attn(h)); out = LN2(a + FFN(a))."""
    a = ad.layer_norm(ad.add(h, multi_head_attention(h, lp, n_heads, mask, project)),
                      lp["ln1.gain"], lp["ln1.bias"], eps)
    return ad.layer_norm(ad.add(a, ffn_forward(a, lp, project)), lp["ln2.gain"], lp["ln2.bias"], eps)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embed.tokens": (cfg.vocab_size, d),
        "embed.positions": (cfg.max_seq_len, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        for s in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[p + s + ".weight"] = (d, d)
            shapes[p + s + ".bias"] = (d,)
        shapes[p + "ffn_w1.weight"] = (d, f)
        shapes[p + "ffn_w1.bias"] = (f,)
        shapes[p + "ffn_w2.weight"] = (f, d)
        shapes[p + "ffn_w2.bias"] = (d,)
        for ln in ("ln1", "ln2"):
            shapes[p + ln + ".gain"] = (d,)
            shapes[p + ln + ".bias"] = (d,)
    shapes["head.weight"] = (d, cfg.n_out)
    shapes["head.bias"] = (cfg.n_out,)
    return shapes


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".gain"):
        return np.ones(shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    if name.startswith("embed."):
        return rng.normal(0.0, 1.0, size=shape)
    return rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)


class Transformer:
    """Decoder-style Transformer with learned absolute positions.

    ``forward`` accepts a single id sequence ``(t,)`` or a batch ``(B, t)``.
    Classification logits come from the last position.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.precision)
        rng = rng_for(config.seed, "base")
        self.params: dict[str, Tensor] = {
            name: Tensor(_init_param(name, shape, rng).astype(self.dtype), requires_grad=True)
            for name, shape in _param_shapes(config).items()
        }
        self.adapters: dict[ModuleId, LoraAdapter] = {}

    # -- parameter bookkeeping -------------------------------------------------

    def layer_params(self, i: int) -> dict[str, Tensor]:
        prefix = f"layers.{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def named_parameters(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for mid, adapter in self.adapters.items():
            out[f"adapters.{mid}.A"] = adapter.A
            out[f"adapters.{mid}.B"] = adapter.B
        return out

    def active_parameters(self) -> dict[str, Tensor]:
        """Parameters the optimizer may update: trainable base/head plus enabled adapters."""
        out = {k: p for k, p in self.params.items() if p.requires_grad}
        for mid, adapter in self.adapters.items():
            if adapter.enabled:
                out[f"adapters.{mid}.A"] = adapter.A
                out[f"adapters.{mid}.B"] = adapter.B
        return out

    def freeze_base(self, train_head: bool = True) -> None:
        for name, p in self.params.items():
            p.requires_grad = train_head and name.startswith("head.")
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ad.DimensionError(f"{k}: checkpoint shape {state[k].shape} vs model {p.shape}")
            p.data[...] = state[k]

    # -- forward ---------------------------------------------------------------

    def _project(self, layer: int) -> Projector:
        lp = self.layer_params(layer)
        adapters = self.adapters

        def project(site: str, x: Tensor) -> Tensor:
            return lora_forward(x, lp[f"{site}.weight"], adapters.get(ModuleId(layer, site)), lp[f"{site}.bias"])

        return project

    def embed(self, tokens) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        cfg = self.config
        if tokens.ndim != 2:
            raise ad.DimensionError(f"expected a (batch, time) id array, got shape {tokens.shape}")
        t = tokens.shape[1]
        if t > cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len={cfg.max_seq_len}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise IndexError(f"token ids must lie in [0, {cfg.vocab_size})")
        pos = np.broadcast_to(np.arange(t), tokens.shape)
        return ad.add(ad.embedding_gather(self.params["embed.tokens"], tokens),
                      ad.embedding_gather(self.params["embed.positions"], pos))

    def hidden(self, h: Tensor) -> Tensor:
        """Run the layer stack on embedded input ``(B, t, d_model)``."""
        cfg = self.config
        t = h.shape[-2]
        mask = causal_mask(t) if cfg.causal else None
        has_shortcuts = any(isinstance(a, ShortcutAdapter) for a in self.adapters.values())
        a_prev = None
        for i in range(cfg.n_layers):
            lp = self.layer_params(i)
            project = self._project(i)
            if not has_shortcuts:
                h = block_forward(h, lp, cfg.n_heads, mask, cfg.ln_eps, project)
                continue
            shortcuts = {m.site: a for m, a in self.adapters.items()
                         if m.layer == i and isinstance(a, ShortcutAdapter)}
            a_prev, h = shortcut_layer_forward(
                h, a_prev,
                attn=lambda x: multi_head_attention(x, lp, cfg.n_heads, mask, project),
                ffn=lambda x: ffn_forward(x, lp, project),
                ln1=lambda x: ad.layer_norm(x, lp["ln1.gain"], lp["ln1.bias"], cfg.ln_eps),
                ln2=lambda x: ad.layer_norm(x, lp["ln2.gain"], lp["ln2.bias"], cfg.ln_eps),
                shortcuts=shortcuts,
            )
        return h

    def head(self, h: Tensor) -> Tensor:
        if self.config.head == "classification":
            h = ad.index(h, (slice(None), -1))
        return linear(h, self.params["head.weight"], self.params["head.bias"])

    def forward(self, tokens=None, embeddings: Tensor | None = None) -> Tensor:
        """Logits for ``tokens``; ``embeddings`` bypasses the lookup tables."""
        if embeddings is not None:
            return self.head(self.hidden(embeddings))
        tokens = np.asarray(tokens, dtype=np.int64)
        single = tokens.ndim == 1
        logits = self.head(self.hidden(self.embed(tokens[None] if single else tokens)))
        return ad.index(logits, 0) if single else logits

    __call__ = forward

    def loss(self, tokens, targets, positions=None) -> Tensor:
        """Mean cross-entropy; ``positions`` selects scored steps for the LM head."""
        logits = self.forward(np.atleast_2d(tokens))
        targets = np.asarray(targets)
        if self.config.head == "classification":
            return ad.cross_entropy(logits, targets.reshape(-1))
        targets = np.atleast_2d(targets)
        if positions is not None:
            positions = np.asarray(positions)
            logits = ad.index(logits, (slice(None), positions))
            targets = targets[:, positions]
        return ad.cross_entropy(ad.reshape(logits, (-1, self.config.vocab_size)), targets.reshape(-1))

    def predict(self, tokens) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.forward(tokens).data, axis=-1)


def count_parameters(model: Transformer, trainable_only: bool = False) -> int:
    """Exact parameter count.

    With ``trainable_only`` this is trainable base/head parameters plus
    ``(d_in + d_out) * r`` for every enabled adapter.
    """
    n = sum(p.data.size for p in model.params.values() if p.requires_grad or not trainable_only)
    n += sum(a.n_params for a in model.adapters.values() if a.enabled or not trainable_only)
    return n


def _adapter_records(model: Transformer) -> list[dict]:
    recs = []
    for mid, a in model.adapters.items():
        recs.append({"module": str(mid), "r": a.r, "alpha": a.alpha, "enabled": a.enabled,
                     "shortcut": isinstance(a, ShortcutAdapter)})
    return recs


def save_checkpoint(model: Transformer, path: str | Path, extra: dict | None = None) -> Path:
    """Write a ``.npz`` holding every named array plus a JSON ``__meta__`` entry.

    The metadata records the model config (including seed), trainable flags
    and adapter layout; arrays are stored at full precision so a load is
    bit-exact.
    """
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "trainable": sorted(k for k, p in model.params.items() if p.requires_grad),
        "adapters": _adapter_records(model),
        "extra": extra or {},
    }
    arrays = model.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path: str | Path) -> Transformer:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unrecognised checkpoint format {meta.get('format')!r}")
        state = {k: z[k] for k in z.files if k != "__meta__"}
    model = Transformer(ModelConfig(**meta["config"]))
    recs = meta["adapters"]
    if recs:
        _rebuild_adapters(model, recs)
    trainable = set(meta["trainable"])
    for k, p in model.params.items():
        p.requires_grad = k in trainable
    model.load_state_dict(state)
    for rec in recs:
        model.adapters[ModuleId.parse(rec["module"])].enabled = rec["enabled"]
    return model


def _rebuild_adapters(model: Transformer, recs: list[dict]) -> None:
    for rec in recs:
        mid = ModuleId.parse(rec["module"])
        cfg = AdapterConfig(
            lora_sites=() if rec["shortcut"] else (mid.site,),
            shortcut_kinds=(mid.site,) if rec["shortcut"] else (),
            lora_rank=rec["r"], lora_alpha=rec["alpha"],
            shortcut_rank=rec["r"], shortcut_alpha=rec["alpha"],
            layers=(mid.layer,),
        )
        inject(model, cfg)
