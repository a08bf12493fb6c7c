"""Masked-autoencoder density model over a joined relation, in plain numpy.

One network per joined relation: per-attribute encoders (one-hot for small
dictionaries, learned embeddings above a width threshold, slot 0 reserved for
the mask token), a shared ReLU trunk, and one softmax head per attribute.
Training masks a uniform random number of attributes per row and scores the
mean cross-entropy of the masked attributes only, optimized by SGD with
momentum.  Everything is deterministic under a fixed seed, and the backward
pass is written out by hand so gradients can be checked against finite
differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .base import ConditioningSession, Estimator
from ..joiner import RelationLayout

MODEL_MAGIC = b"CINM1"


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite; carries step diagnostics."""


@dataclass
class DaeConfig:
    hidden: tuple[int, ...] = (256, 256)
    one_hot_max: int = 64          # dictionaries up to this size are one-hot
    embed_cap: int = 64
    embed_scale: float = 1.6
    embed_power: float = 0.56
    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 256
    steps: int = 2000
    prob_floor: float = 1e-8       # inference-time floor before renormalizing
    dtype: str = "float32"

    def embed_dim(self, dom_size: int) -> int:
        return min(self.embed_cap, math.ceil(self.embed_scale * dom_size ** self.embed_power))


@dataclass(frozen=True)
class _Encoder:
    name: str
    kind: str        # "onehot" | "embed"
    offset: int
    width: int       # columns occupied in the input vector
    dom_size: int


class DaeModel(Estimator):
    """Masked autoencoder over one relation layout."""

    def __init__(self, layout: RelationLayout, config: DaeConfig, seed: int,
                 join_row_count: int = 0):
        self.layout = layout
        self.config = config
        self.join_row_count = join_row_count
        self.dtype = np.dtype(config.dtype)
        self.encoders: list[_Encoder] = []
        offset = 0
        for spec in layout.attributes:
            if spec.dom_size <= config.one_hot_max:
                width = spec.dom_size + 1  # slot 0 is the mask token
                self.encoders.append(_Encoder(spec.name, "onehot", offset, width, spec.dom_size))
            else:
                width = config.embed_dim(spec.dom_size)
                self.encoders.append(_Encoder(spec.name, "embed", offset, width, spec.dom_size))
            offset += width
        self.in_dim = offset
        self.params: dict[str, np.ndarray] = {}
        self._init_params(seed)
        self._positions = {spec.name: i for i, spec in enumerate(layout.attributes)}

    # --- construction -----------------------------------------------------

    def _init_params(self, seed: int) -> None:
        rng = np.random.Generator(np.random.PCG64(seed))

        def normal(shape, scale):
            return (rng.standard_normal(shape) * scale).astype(self.dtype)

        for enc in self.encoders:
            if enc.kind == "embed":
                self.params[f"embed.{enc.name}"] = normal(
                    (enc.dom_size + 1, enc.width), 1.0 / math.sqrt(enc.width))
        fan_in = self.in_dim
        for i, width in enumerate(self.config.hidden):
            self.params[f"trunk.{i}.W"] = normal((fan_in, width), math.sqrt(2.0 / fan_in))
            self.params[f"trunk.{i}.b"] = np.zeros(width, dtype=self.dtype)
            fan_in = width
        for spec in self.layout.attributes:
            self.params[f"head.{spec.name}.W"] = normal(
                (fan_in, spec.dom_size), 1.0 / math.sqrt(fan_in))
            self.params[f"head.{spec.name}.b"] = np.zeros(spec.dom_size, dtype=self.dtype)

    def parameter_names(self) -> list[str]:
        """Declared tensor order for the model file."""
        names = [f"embed.{e.name}" for e in self.encoders if e.kind == "embed"]
        for i in range(len(self.config.hidden)):
            names.extend([f"trunk.{i}.W", f"trunk.{i}.b"])
        for spec in self.layout.attributes:
            names.extend([f"head.{spec.name}.W", f"head.{spec.name}.b"])
        return names

    # --- forward / backward -----------------------------------------------

    def _encode(self, inputs: np.ndarray) -> np.ndarray:
        """Inputs (B, A) with -1 for masked; returns the dense input matrix."""
        batch = inputs.shape[0]
        x = np.zeros((batch, self.in_dim), dtype=self.dtype)
        rows = np.arange(batch)
        for a, enc in enumerate(self.encoders):
            idx = inputs[:, a] + 1
            if enc.kind == "onehot":
                x[rows, enc.offset + idx] = 1.0
            else:
                x[:, enc.offset:enc.offset + enc.width] = self.params[f"embed.{enc.name}"][idx]
        return x

    def _trunk(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations [x, h1, ..., hL]."""
        acts = [x]
        h = x
        for i in range(len(self.config.hidden)):
            z = h @ self.params[f"trunk.{i}.W"] + self.params[f"trunk.{i}.b"]
            h = np.maximum(z, 0)
            acts.append(h)
        return acts

    def _head_logits(self, h: np.ndarray, name: str) -> np.ndarray:
        return h @ self.params[f"head.{name}.W"] + self.params[f"head.{name}.b"]

    def loss_and_grads(self, batch: np.ndarray, mask: np.ndarray
                       ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean cross-entropy of the masked attributes, with all gradients.

        ``batch`` holds true codes (B, A); ``mask`` marks the attributes whose
        inputs are hidden and whose predictions are scored.  Unmasked
        attributes are never scored.
        """
        inputs = np.where(mask, -1, batch)
        x = self._encode(inputs)
        acts = self._trunk(x)
        h_last = acts[-1]
        n_terms = int(mask.sum())
        grads: dict[str, np.ndarray] = {}
        if n_terms == 0:
            return 0.0, grads
        d_last = np.zeros_like(h_last)
        total = 0.0
        for a, spec in enumerate(self.layout.attributes):
            rows = np.flatnonzero(mask[:, a])
            if len(rows) == 0:
                continue
            h = h_last[rows]
            logits = self._head_logits(h, spec.name)
            shifted = logits - logits.max(axis=1, keepdims=True)
            exp = np.exp(shifted)
            denom = exp.sum(axis=1, keepdims=True)
            probs = exp / denom
            true = batch[rows, a]
            log_p_true = shifted[np.arange(len(rows)), true] - np.log(denom[:, 0])
            total += float(-log_p_true.sum())
            dlogits = probs.astype(self.dtype)
            dlogits[np.arange(len(rows)), true] -= 1.0
            dlogits /= n_terms
            grads[f"head.{spec.name}.W"] = h.T @ dlogits
            grads[f"head.{spec.name}.b"] = dlogits.sum(axis=0)
            d_last[rows] += dlogits @ self.params[f"head.{spec.name}.W"].T
        dh = d_last
        for i in reversed(range(len(self.config.hidden))):
            dz = dh * (acts[i + 1] > 0)
            grads[f"trunk.{i}.W"] = acts[i].T @ dz
            grads[f"trunk.{i}.b"] = dz.sum(axis=0)
            dh = dz @ self.params[f"trunk.{i}.W"].T
        for a, enc in enumerate(self.encoders):
            if enc.kind != "embed":
                continue
            idx = inputs[:, a] + 1
            d_embed = np.zeros_like(self.params[f"embed.{enc.name}"])
            np.add.at(d_embed, idx, dh[:, enc.offset:enc.offset + enc.width])
            grads[f"embed.{enc.name}"] = d_embed
        return total / n_terms, grads

    # --- inference ----------------------------------------------------------

    def distributions_for(self, inputs: np.ndarray, target: str) -> np.ndarray:
        """Conditional distributions (B, dom) for inputs with -1 = unknown."""
        spec = self.layout.spec(target)
        pos = self._positions[target]
        work = inputs.copy()
        work[:, pos] = -1  # the target itself is never an input
        out = np.empty((len(work), spec.dom_size), dtype=np.float64)
        chunk = 8192
        for lo in range(0, len(work), chunk):
            part = work[lo:lo + chunk]
            h = self._trunk(self._encode(part))[-1]
            logits = self._head_logits(h, target).astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            probs = np.maximum(probs, self.config.prob_floor)
            probs /= probs.sum(axis=1, keepdims=True)
            out[lo:lo + chunk] = probs
        return out

    def conditional_distribution(self, inputs: dict[str, int], target: str) -> np.ndarray:
        vec = np.full((1, len(self.layout.attributes)), -1, dtype=np.int64)
        for name, code in inputs.items():
            vec[0, self._positions[name]] = code
        return self.distributions_for(vec, target)[0]

    def session(self, sample_count: int) -> "DaeSession":
        return DaeSession(self, sample_count)


class DaeSession(ConditioningSession):
    def __init__(self, model: DaeModel, sample_count: int):
        self.model = model
        self.inputs = np.full((sample_count, len(model.layout.attributes)), -1, dtype=np.int64)
        self._owner = np.arange(sample_count, dtype=np.int64)

    def distributions(self, target: str) -> tuple[np.ndarray, np.ndarray]:
        return self.model.distributions_for(self.inputs, target), self._owner

    def assign(self, target: str, values: np.ndarray) -> None:
        self.inputs[:, self.model._positions[target]] = values


def train(model: DaeModel, codes: np.ndarray, seed: int,
          steps: int | None = None) -> list[float]:
    """SGD-with-momentum training on sampled join rows; returns the loss curve.

    Masking per row: k ~ Uniform{1..n_attrs} attributes hidden, chosen
    uniformly without replacement.  Aborts with diagnostics when the loss
    leaves the finite range.
    """
    cfg = model.config
    steps = cfg.steps if steps is None else steps
    rows = np.ascontiguousarray(codes, dtype=np.int64)
    n_rows, n_attrs = rows.shape
    rng = np.random.Generator(np.random.PCG64(seed))
    velocity = {name: np.zeros_like(p) for name, p in model.params.items()}
    losses: list[float] = []
    for step in range(steps):
        idx = rng.integers(0, n_rows, size=cfg.batch_size)
        batch = rows[idx]
        k = rng.integers(1, n_attrs + 1, size=cfg.batch_size)
        noise = rng.random((cfg.batch_size, n_attrs))
        ranks = np.argsort(np.argsort(noise, axis=1), axis=1)
        mask = ranks < k[:, None]
        loss, grads = model.loss_and_grads(batch, mask)
        if not np.isfinite(loss):
            recent = ", ".join(f"{v:.4f}" for v in losses[-5:])
            raise TrainingDiverged(
                f"non-finite loss at step {step} (lr={cfg.learning_rate}, "
                f"momentum={cfg.momentum}); recent losses: [{recent}]")
        losses.append(loss)
        for name, param in model.params.items():
            grad = grads.get(name)
            vel = velocity[name]
            vel *= cfg.momentum
            if grad is not None:
                vel -= cfg.learning_rate * grad.astype(param.dtype, copy=False)
            param += vel
    return losses


def save_model(model: DaeModel, path: str, subschema_key: str) -> None:
    """Write the CINM1 file: header JSON, then float32 LE tensors in declared order."""
    names = model.parameter_names()
    header = {
        "layout_hash": model.layout.layout_hash,
        "subschema": subschema_key,
        "join_row_count": model.join_row_count,
        "config": asdict(model.config) | {"hidden": list(model.config.hidden)},
        "tensors": [[name, list(model.params[name].shape)] for name in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())


def load_model(path: str, layout: RelationLayout) -> DaeModel:
    """Read a CINM1 file, refusing mismatched layouts or shapes."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["layout_hash"] != layout.layout_hash:
            raise ValueError(
                f"{path}: layout hash mismatch (model {header['layout_hash'][:12]}, "
                f"data {layout.layout_hash[:12]})")
        raw_cfg = dict(header["config"])
        raw_cfg["hidden"] = tuple(raw_cfg["hidden"])
        config = DaeConfig(**raw_cfg)
        model = DaeModel(layout, config, seed=0, join_row_count=header["join_row_count"])
        for name, shape in header["tensors"]:
            expected = model.params[name].shape
            if tuple(shape) != expected:
                raise ValueError(f"{path}: tensor {name} has shape {shape}, expected {expected}")
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            model.params[name] = data.astype(model.dtype).copy()
    return model
