"""Synthetic frozen backbone with pluggable trainable linear modules.

The backbone stands in for a pre-trained language model: a seeded embedding
table followed by frozen token-mixing layers. Trainable modules are inserted
between frozen layers; each one contains a linear map ``Y = X W + b`` whose
weight gradient ``X.T @ dL/dY`` is what a client uploads. Forward and backward
passes are written out by hand so the attacked layer's input batch ``X`` and
its output gradient are explicit.

Array layout: a batch of ``B`` sequences padded to length ``T`` is carried as
``(B, T, n)``; flattening gives the ``p = B * T`` rows of the layer input.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .exceptions import ValidationError
from .linalg import as_matrix

PAD_ID = 0
MODULE_KINDS = ("adapter", "lora", "qproj", "ffn_down")

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class BackboneConfig:
    """Shape and seed of the frozen backbone.

    ``anisotropy`` is the scale of a shared bias added before every frozen
    nonlinearity; larger values make embeddings of different samples point in
    more similar directions. ``hidden_scale`` multiplies every hidden state
    handed to a trainable module.
    """

    vocab_size: int = 256
    hidden_dim: int = 64
    num_frozen_layers: int = 2
    seed: int = 0
    max_seq_len: int = 128
    anisotropy: float = 0.5
    hidden_scale: float = 0.003

    def __post_init__(self):
        if self.hidden_dim < 2:
            raise ValidationError(f"hidden_dim must be >= 2, got {self.hidden_dim}")
        if self.vocab_size < 2:
            raise ValidationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.num_frozen_layers < 0:
            raise ValidationError("num_frozen_layers must be >= 0")
        if self.max_seq_len < 1:
            raise ValidationError("max_seq_len must be >= 1")
        if not self.hidden_scale > 0:
            raise ValidationError("hidden_scale must be positive")
        if self.anisotropy < 0:
            raise ValidationError("anisotropy must be >= 0")


@dataclass(frozen=True, eq=False)
class FrozenBackbone:
    config: BackboneConfig
    embedding: np.ndarray
    positions: np.ndarray
    layer_weights: tuple
    layer_biases: tuple
    output_weight: np.ndarray
    output_bias: np.ndarray

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "positions": self.positions,
               "output.weight": self.output_weight, "output.bias": self.output_bias}
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            out[f"layer{i}.weight"] = w
            out[f"layer{i}.bias"] = b
        return out


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def build_backbone(config: BackboneConfig) -> FrozenBackbone:
    """Deterministically sample backbone parameters from ``config.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB0B]))
    n = config.hidden_dim
    embedding = rng.standard_normal((config.vocab_size, n))
    positions = 0.5 * rng.standard_normal((config.max_seq_len, n))
    weights, biases = [], []
    for _ in range(config.num_frozen_layers):
        weights.append(_orthogonal(rng, n))
        biases.append(config.anisotropy * rng.standard_normal(n))
    out_w = _orthogonal(rng, n)
    out_b = config.anisotropy * rng.standard_normal(n)
    for a in (embedding, positions, *weights, *biases, out_w, out_b):
        a.setflags(write=False)
    return FrozenBackbone(config, embedding, positions, tuple(weights), tuple(biases), out_w, out_b)


@dataclass(frozen=True)
class HiddenBatch:
    """Per-token layer inputs: ``embeddings`` is ``p x n``, one row per (padded) token."""

    embeddings: np.ndarray
    token_owner: np.ndarray
    is_pad: Optional[np.ndarray] = None

    @property
    def p(self) -> int:
        return self.embeddings.shape[0]

    def rows_of(self, owner) -> np.ndarray:
        return self.embeddings[self.token_owner == owner]


@dataclass(frozen=True)
class ModuleSpec:
    """Where a trainable module sits and how wide its linear map is.

    ``ratio`` is the down-projection ratio for adapters and the rank ratio for
    LoRA; ``position`` counts frozen layers applied before the module.
    """

    kind: str = "adapter"
    ratio: float = 2.0
    position: int = 0
    module_id: str = "m0"

    def __post_init__(self):
        if self.kind not in MODULE_KINDS:
            raise ValidationError(f"unknown module kind {self.kind!r}; expected one of {MODULE_KINDS}")
        if self.kind in ("adapter", "lora") and not self.ratio > 0:
            raise ValidationError("ratio must be positive")
        if self.position < 0:
            raise ValidationError("position must be >= 0")

    def out_dim(self, n: int) -> int:
        if self.kind in ("adapter", "lora"):
            return max(1, int(round(n / self.ratio)))
        return n


@dataclass(frozen=True)
class TrainableModule:
    """A module spec together with its current weights."""

    spec: ModuleSpec
    weight: np.ndarray
    bias: np.ndarray
    up_weight: Optional[np.ndarray] = None
    up_bias: Optional[np.ndarray] = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    @classmethod
    def from_params(cls, spec: ModuleSpec, params: Mapping[str, np.ndarray]) -> "TrainableModule":
        mid = spec.module_id
        return cls(spec, params[f"{mid}.weight"], params[f"{mid}.bias"],
                   params.get(f"{mid}.up_weight"), params.get(f"{mid}.up_bias"))


@dataclass
class GradientUpdate:
    """Gradients of every trainable parameter uploaded by one client in one round."""

    grads: Dict[str, np.ndarray]
    round: int = -1
    client: int = -1

    @property
    def per_module(self) -> Dict[str, np.ndarray]:
        return {k[: -len(".weight")]: v for k, v in self.grads.items()
                if k.endswith(".weight") and not k.startswith("head.")}

    def vector(self) -> np.ndarray:
        return np.concatenate([self.grads[k].ravel() for k in sorted(self.grads)])

    def frobenius_norm(self) -> float:
        return float(np.sqrt(sum(np.sum(g * g) for g in self.grads.values())))


def forward_trainable(module: TrainableModule, x) -> np.ndarray:
    """Linear path of a trainable module: ``Y = X @ W + b`` over the rows of ``x``."""
    X = x.embeddings if isinstance(x, HiddenBatch) else as_matrix(x, "x")
    if X.shape[1] != module.weight.shape[0]:
        raise ValidationError(f"input has {X.shape[1]} columns, module expects {module.weight.shape[0]}")
    return X @ module.weight + module.bias


def upsample_forward(w_up, x) -> np.ndarray:
    """Up-project every token row: returns ``X @ w_up.T`` of shape ``p x n_up``."""
    w_up = as_matrix(w_up, "w_up")
    X = x.embeddings if isinstance(x, HiddenBatch) else as_matrix(x, "x")
    n_up, n = w_up.shape
    if n_up <= n:
        raise ValidationError(f"upsampling needs n_up > n, got {n_up} <= {n}")
    if X.shape[1] != n:
        raise ValidationError(f"x has {X.shape[1]} columns, w_up expects {n}")
    return X @ w_up.T


def pad_batch(sequences: Sequence[Sequence[int]], vocab_size: int, max_len: int):
    """Right-pad token sequences with ``PAD_ID``; returns ``(tokens, lengths)``."""
    if len(sequences) == 0:
        raise ValidationError("empty batch")
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if np.any(lengths < 1):
        raise ValidationError("every sequence needs at least one token")
    T = int(lengths.max())
    if T > max_len:
        raise ValidationError(f"sequence length {T} exceeds max_seq_len {max_len}")
    tokens = np.full((len(sequences), T), PAD_ID, dtype=np.int64)
    for i, s in enumerate(sequences):
        tokens[i, : len(s)] = s
    if np.any(tokens < 0) or np.any(tokens >= vocab_size):
        raise ValidationError(f"token id out of vocabulary [0, {vocab_size})")
    return tokens, lengths


def _cummean(h):
    t = np.arange(1, h.shape[1] + 1, dtype=np.float64)[None, :, None]
    return np.cumsum(h, axis=1) / t


def _cummean_transpose(g):
    t = np.arange(1, g.shape[1] + 1, dtype=np.float64)[None, :, None]
    return np.cumsum((g / t)[:, ::-1], axis=1)[:, ::-1]


def _embed(backbone: FrozenBackbone, tokens):
    s = backbone.config.hidden_scale
    return s * (backbone.embedding[tokens] + backbone.positions[: tokens.shape[1]][None])


def _frozen_layer(backbone: FrozenBackbone, i: int, h):
    s = backbone.config.hidden_scale
    u = (h + _cummean(h)) / (2.0 * s)
    return s * np.tanh(u @ backbone.layer_weights[i] + backbone.layer_biases[i])


def _frozen_layer_backward(backbone: FrozenBackbone, i: int, out, g_out):
    s = backbone.config.hidden_scale
    t = out / s
    du = (g_out * s * (1.0 - t * t)) @ backbone.layer_weights[i].T
    return (du + _cummean_transpose(du)) / (2.0 * s)


def _to_hidden_batch(h, tokens, owners=None) -> HiddenBatch:
    B, T, n = h.shape
    owner = np.repeat(np.arange(B) if owners is None else np.asarray(owners), T)
    return HiddenBatch(h.reshape(B * T, n).copy(), owner, (tokens == PAD_ID).reshape(-1))


def forward_hidden(backbone: FrozenBackbone, sequences, owners=None) -> HiddenBatch:
    """Run the frozen stack (no trainable modules) and return per-token rows."""
    tokens, _ = pad_batch(sequences, backbone.config.vocab_size, backbone.config.max_seq_len)
    h = _embed(backbone, tokens)
    for i in range(backbone.config.num_frozen_layers):
        h = _frozen_layer(backbone, i, h)
    return _to_hidden_batch(h, tokens, owners)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class FedModel:
    """Frozen backbone, trainable modules and a linear classification head.

    Trainable parameters live in a flat ``{name: array}`` mapping, so the
    federation layer can aggregate them without knowing the architecture.
    ``pool="all"`` averages every padded position before the head, so pad rows
    carry gradient like real tokens; ``pool="nonpad"`` averages real tokens only.
    """

    backbone: FrozenBackbone
    modules: tuple = field(default_factory=lambda: (ModuleSpec(),))
    num_classes: int = 2
    pool: str = "all"

    def __post_init__(self):
        ids = [m.module_id for m in self.modules]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"duplicate module ids: {ids}")
        L = self.backbone.config.num_frozen_layers
        for m in self.modules:
            if m.position > L:
                raise ValidationError(f"module {m.module_id} position {m.position} > {L} frozen layers")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.pool not in ("all", "nonpad"):
            raise ValidationError(f"pool must be 'all' or 'nonpad', got {self.pool!r}")

    @property
    def n(self) -> int:
        return self.backbone.hidden_dim

    def module(self, module_id: str) -> ModuleSpec:
        for m in self.modules:
            if m.module_id == module_id:
                return m
        raise ValidationError(f"no trainable module {module_id!r}")

    def init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
        n = self.n
        params: Params = {}
        for spec in self.modules:
            mid, m = spec.module_id, spec.out_dim(n)
            params[f"{mid}.weight"] = rng.standard_normal((n, m)) / np.sqrt(n)
            params[f"{mid}.bias"] = np.zeros(m)
            if spec.kind in ("adapter", "lora"):
                # non-zero up path: a zero init would zero the down-layer gradient
                params[f"{mid}.up_weight"] = rng.standard_normal((m, n)) / np.sqrt(m)
            if spec.kind == "adapter":
                params[f"{mid}.up_bias"] = np.zeros(n)
        params["head.weight"] = rng.standard_normal((n, self.num_classes)) / np.sqrt(n)
        params["head.bias"] = np.zeros(self.num_classes)
        return params

    # -- forward / backward -------------------------------------------------

    def _forward(self, params: Mapping[str, np.ndarray], tokens, lengths, upto=None):
        bb = self.backbone
        s = bb.config.hidden_scale
        B, T = tokens.shape
        h = _embed(bb, tokens)
        steps = []  # ("layer", i, out) | ("module", spec, X, Y, act)
        inputs = {}
        L = bb.config.num_frozen_layers
        for pos in range(L + 1):
            for spec in self.modules:
                if spec.position != pos:
                    continue
                inputs[spec.module_id] = h
                if upto is not None and set(upto) <= set(inputs):
                    return None, inputs
                h, rec = self._module_forward(spec, params, h, s)
                steps.append(("module", spec) + rec)
            if pos < L:
                h = _frozen_layer(bb, pos, h)
                steps.append(("layer", pos, h))
        z = np.tanh((h / s) @ bb.output_weight + bb.output_bias)
        # frozen centering so the head sees features without the shared offset
        zc = z - np.tanh(bb.output_bias)
        if self.pool == "all":
            w = np.full((B, T), 1.0 / T)
        else:
            w = (tokens != PAD_ID) / lengths[:, None].astype(np.float64)
        pooled = np.einsum("bt,btn->bn", w, zc)
        logits = pooled @ params["head.weight"] + params["head.bias"]
        cache = dict(steps=steps, z=z, w=w, pooled=pooled, logits=logits)
        return cache, inputs

    @staticmethod
    def _module_forward(spec: ModuleSpec, params, h, s):
        mid = spec.module_id
        # biases are stored in units of hidden_scale so training is scale-free
        Y = h @ params[f"{mid}.weight"] + s * params[f"{mid}.bias"]
        if spec.kind == "adapter":
            act = np.maximum(Y, 0.0)
            out = h + act @ params[f"{mid}.up_weight"] + s * params[f"{mid}.up_bias"]
        elif spec.kind == "lora":
            act = Y
            out = h + Y @ params[f"{mid}.up_weight"]
        elif spec.kind == "qproj":
            act = np.tanh(Y / s)
            out = h + s * act
        else:  # ffn_down
            act = None
            out = h + Y
        return out, (h, Y, act)

    @staticmethod
    def _module_backward(spec: ModuleSpec, params, rec, g_out, grads, s):
        mid = spec.module_id
        X, Y, act = rec
        n = X.shape[-1]
        m = Y.shape[-1]
        if spec.kind == "adapter":
            grads[f"{mid}.up_weight"] = act.reshape(-1, m).T @ g_out.reshape(-1, n)
            grads[f"{mid}.up_bias"] = s * g_out.reshape(-1, n).sum(axis=0)
            dY = (g_out @ params[f"{mid}.up_weight"].T) * (Y > 0)
        elif spec.kind == "lora":
            grads[f"{mid}.up_weight"] = Y.reshape(-1, m).T @ g_out.reshape(-1, n)
            dY = g_out @ params[f"{mid}.up_weight"].T
        elif spec.kind == "qproj":
            dY = g_out * (1.0 - act * act)
        else:
            dY = g_out
        dY2 = dY.reshape(-1, m)
        grads[f"{mid}.weight"] = X.reshape(-1, n).T @ dY2
        grads[f"{mid}.bias"] = s * dY2.sum(axis=0)
        return g_out + dY @ params[f"{mid}.weight"].T

    def _prepare(self, sequences, labels=None):
        cfg = self.backbone.config
        tokens, lengths = pad_batch(sequences, cfg.vocab_size, cfg.max_seq_len)
        if labels is None:
            return tokens, lengths, None
        y = np.asarray(labels, dtype=np.int64)
        if y.shape != (len(sequences),):
            raise ValidationError(f"got {y.shape[0] if y.ndim else 0} labels for {len(sequences)} sequences")
        if np.any(y < 0) or np.any(y >= self.num_classes):
            raise ValidationError("label out of range")
        return tokens, lengths, y

    def logits(self, params, sequences) -> np.ndarray:
        tokens, lengths, _ = self._prepare(sequences)
        cache, _ = self._forward(params, tokens, lengths)
        return cache["logits"]

    def per_sample_losses(self, params, sequences, labels) -> np.ndarray:
        tokens, lengths, y = self._prepare(sequences, labels)
        cache, _ = self._forward(params, tokens, lengths)
        return -_log_softmax(cache["logits"])[np.arange(len(y)), y]

    def predict(self, params, sequences) -> np.ndarray:
        return np.argmax(self.logits(params, sequences), axis=1)

    def loss_and_gradients(self, params, sequences, labels):
        """Mean cross-entropy over the batch and the gradient of every trainable parameter.

        Returns ``(loss, GradientUpdate)``. Frozen backbone parameters get no
        gradient.
        """
        tokens, lengths, y = self._prepare(sequences, labels)
        cache, _ = self._forward(params, tokens, lengths)
        B = tokens.shape[0]
        s = self.backbone.config.hidden_scale
        logits = cache["logits"]
        loss = float(-np.mean(_log_softmax(logits)[np.arange(B), y]))
        g_logits = _softmax(logits)
        g_logits[np.arange(B), y] -= 1.0
        g_logits /= B

        grads: Params = {}
        grads["head.weight"] = cache["pooled"].T @ g_logits
        grads["head.bias"] = g_logits.sum(axis=0)
        g_pooled = g_logits @ params["head.weight"].T
        z = cache["z"]
        g_z = cache["w"][:, :, None] * g_pooled[:, None, :]
        g_h = ((g_z * (1.0 - z * z)) @ self.backbone.output_weight.T) / s

        earliest = min(spec.position for spec in self.modules) if self.modules else 10**9
        for step in reversed(cache["steps"]):
            if step[0] == "module":
                g_h = self._module_backward(step[1], params, step[2:], g_h, grads, s)
            else:
                i = step[1]
                if i < earliest:
                    break
                g_h = _frozen_layer_backward(self.backbone, i, step[2], g_h)
        return loss, GradientUpdate({k: grads[k] for k in params})

    def layer_inputs(self, params, sequences, owners=None, module_ids=None) -> Dict[str, HiddenBatch]:
        """Per-token input rows of each trainable module at parameters ``params``."""
        tokens, lengths, _ = self._prepare(sequences)
        ids = list(module_ids) if module_ids is not None else [m.module_id for m in self.modules]
        _, inputs = self._forward(params, tokens, lengths, upto=ids)
        return {mid: _to_hidden_batch(inputs[mid], tokens, owners) for mid in ids}


def loss_and_gradients(model: FedModel, params, sequences, labels):
    return model.loss_and_gradients(params, sequences, labels)


def trainable_module(model: FedModel, params, module_id: str) -> TrainableModule:
    return TrainableModule.from_params(model.module(module_id), params)
