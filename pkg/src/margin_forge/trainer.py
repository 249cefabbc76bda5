"""A small dense network with hand-written backprop, enough to exercise
every loss and regularizer end to end on blob data.

The feature extractor is an MLP with ReLU hidden layers and a linear final
layer; the optional embedding normalization z/||z|| is a differentiable
layer so gradients flow through it. Prototypes live outside the model and
are updated by projected (sphere) SGD whenever the loss normalizes them,
plain SGD otherwise.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .datasets import Blobs
from .errors import InvalidSpecError, NumericOverflowError, TrainingDivergedError
from .geometry import normalize_rows, tangent_project_rows
from .losses import LossSpec, RegularizerSpec, composite
from .margins import MarginReport, build_report
from .sphere_opt import OptimConfig, cosine_lr


@dataclass
class MlpSpec:
    layer_sizes: tuple[int, ...]  # input d_in ... embedding d
    activation: str = "relu"
    embed_normalize: bool = True
    seed: int = 0

    def validate(self) -> None:
        if len(self.layer_sizes) < 3:
            raise InvalidSpecError("need at least one hidden layer")
        if self.layer_sizes[-1] < 2:
            raise InvalidSpecError("embedding dimension must be >= 2")
        if self.activation != "relu":
            raise InvalidSpecError(f"unsupported activation {self.activation!r}")


class Mlp:
    """Feature extractor phi: R^{d_in} -> R^d."""

    def __init__(self, spec: MlpSpec):
        spec.validate()
        self.spec = spec
        ss = np.random.SeedSequence(spec.seed)
        self.weights = []
        self.biases = []
        sizes = spec.layer_sizes
        for child, (fan_in, fan_out) in zip(ss.spawn(len(sizes) - 1),
                                            zip(sizes[:-1], sizes[1:])):
            rng = np.random.default_rng(child)
            scale = math.sqrt(2.0 / fan_in)
            self.weights.append(scale * rng.normal(size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray):
        """Returns (z, cache); z is the (optionally normalized) embedding."""
        h = np.asarray(x, dtype=float)
        pre, post = [], [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w.T + b
            pre.append(a)
            h = np.maximum(a, 0.0) if i < len(self.weights) - 1 else a
            post.append(h)
        e = h
        if self.spec.embed_normalize:
            norms = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), 1e-12)
            z = e / norms
            cache = (pre, post, z, norms)
        else:
            z = e
            cache = (pre, post, None, None)
        return z, cache

    def backward(self, cache, dz: np.ndarray):
        """Gradients of the loss w.r.t. every weight and bias."""
        pre, post, zhat, norms = cache
        if self.spec.embed_normalize:
            de = (dz - np.sum(dz * zhat, axis=1, keepdims=True) * zhat) / norms
        else:
            de = dz
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        d = de
        for i in reversed(range(len(self.weights))):
            grads_w[i] = d.T @ post[i]
            grads_b[i] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.weights[i]) * (pre[i - 1] > 0)
        return grads_w, grads_b

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def param_bytes(self) -> bytes:
        parts = [np.ascontiguousarray(p).tobytes()
                 for p in (*self.weights, *self.biases)]
        return b"".join(parts)


def build_mlp(spec: MlpSpec) -> Mlp:
    return Mlp(spec)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossSpec = field(default_factory=LossSpec)
    reg: RegularizerSpec = field(default_factory=RegularizerSpec)
    eval_every: int = 20
    base_weight: float = 1.0  # 0 trains on the regularizers alone


@dataclass
class EvalSnapshot:
    epoch: int
    train_loss: float
    test_accuracy: float
    report: MarginReport


@dataclass
class RunRecord:
    snapshots: list[EvalSnapshot]
    prototypes: np.ndarray
    final_digest: str

    @property
    def final(self) -> EvalSnapshot:
        return self.snapshots[-1]

    EVAL_COLUMNS = ("epoch", "train_loss", "test_accuracy", "class_margin_deg",
                    "gamma_min", "m_samp", "magnitude_ratio")

    def eval_rows(self) -> list[list[str]]:
        rows = []
        for s in self.snapshots:
            r = s.report
            vals = [s.train_loss, s.test_accuracy, r.class_margin_deg,
                    r.gamma_min, r.m_samp, r.magnitude_ratio]
            rows.append([str(s.epoch)] + [f"{v:.12g}" for v in vals])
        return rows

    def to_dict(self) -> dict:
        return {
            "final_digest": self.final_digest,
            "snapshots": [
                {"epoch": s.epoch, "train_loss": s.train_loss,
                 "test_accuracy": s.test_accuracy, "report": s.report.to_dict()}
                for s in self.snapshots
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def init_prototypes(k: int, d: int, seed: int, unit: bool) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC1A55)))
    w = rng.normal(size=(k, d)) / math.sqrt(d)
    return normalize_rows(w) if unit else w


def evaluate(model: Mlp, blobs: Blobs, w: np.ndarray):
    """Top-1 accuracy of the argmax rule plus the margin report.

    The report is computed on row-normalized embeddings; the argmax rule is
    invariant to that scaling, so the gamma=0 hard-margin rate equals the
    error rate exactly.
    """
    z = model.embed(blobs.inputs)
    logits = z @ w.T
    accuracy = float(np.mean(logits.argmax(axis=1) == blobs.labels))
    report = build_report(w, normalize_rows(z), blobs.labels)
    return accuracy, report


def train(model: Mlp, blobs_train: Blobs, blobs_test: Blobs, cfg: TrainConfig) -> RunRecord:
    """Mini-batch SGD; deterministic given the config and seeds.

    Hidden weights take plain momentum SGD with weight decay; prototypes
    take the projected sphere step (renormalized each update) when the loss
    normalizes prototypes. The shuffle stream is independent of the
    weight-init stream so ablations can share initial weights.
    """
    cfg.loss.validate()
    cfg.reg.validate()
    k = blobs_train.k
    counts = blobs_train.counts()
    d = model.spec.layer_sizes[-1]
    unit_protos = cfg.loss.normalize_prototypes
    w = init_prototypes(k, d, cfg.optim.seed, unit_protos)

    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence((cfg.optim.seed, 0x5EED)))
    n = blobs_train.inputs.shape[0]
    mom = cfg.optim.momentum
    wd = cfg.optim.weight_decay

    buf_w = [np.zeros_like(p) for p in model.weights]
    buf_b = [np.zeros_like(p) for p in model.biases]
    buf_proto = np.zeros_like(w)

    snapshots = []

    def snap(epoch, train_loss):
        acc, report = evaluate(model, blobs_test, w)
        snapshots.append(EvalSnapshot(epoch, train_loss, acc, report))

    epoch_loss = math.nan
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch % cfg.optim.t_max, cfg.optim)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            x, y = blobs_train.inputs[batch], blobs_train.labels[batch]
            z, cache = model.forward(x)
            try:
                out = composite(w, z, y, cfg.loss, cfg.reg, class_counts=counts,
                                base_weight=cfg.base_weight)
            except NumericOverflowError as e:
                raise TrainingDivergedError(
                    f"{e} ({cfg.loss.kind} loss at epoch {epoch}, "
                    f"batch {start // cfg.batch_size})"
                ) from e
            if not math.isfinite(out.value):
                raise TrainingDivergedError(
                    f"non-finite {cfg.loss.kind} loss at epoch {epoch}, "
                    f"batch {start // cfg.batch_size}"
                )
            total += out.value * len(batch)
            grads_w, grads_b = model.backward(cache, out.grad_Z)
            for i, (gw, gb) in enumerate(zip(grads_w, grads_b)):
                buf_w[i] = mom * buf_w[i] + gw + wd * model.weights[i]
                buf_b[i] = mom * buf_b[i] + gb
                model.weights[i] -= lr * buf_w[i]
                model.biases[i] -= lr * buf_b[i]
            if unit_protos:
                buf_proto = mom * buf_proto + tangent_project_rows(w, out.grad_W)
                w = normalize_rows(w - lr * buf_proto)
            else:
                buf_proto = mom * buf_proto + out.grad_W + wd * w
                w = w - lr * buf_proto
        epoch_loss = total / n
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            snap(epoch + 1, epoch_loss)
    if not snapshots:
        snap(cfg.epochs, epoch_loss)

    digest = hashlib.sha256(model.param_bytes() + w.tobytes()).hexdigest()
    return RunRecord(snapshots=snapshots, prototypes=w, final_digest=digest)


def histogram_rows(values, lo: float, hi: float, bins: int = 50):
    """(bin_left, bin_right, count) rows over uniform bins; outliers clipped in."""
    v = np.clip(np.asarray(values, dtype=float), lo, hi)
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return [[f"{edges[i]:.12g}", f"{edges[i + 1]:.12g}", str(int(c))]
            for i, c in enumerate(counts)]


def similarity_and_margins(model: Mlp, blobs: Blobs, w: np.ndarray):
    """Per-sample cosine similarity to the own prototype, and cosine margins."""
    z = normalize_rows(model.embed(blobs.inputs))
    wh = normalize_rows(w)
    c = z @ wh.T
    idx = np.arange(len(blobs.labels))
    sims = c[idx, blobs.labels]
    masked = c.copy()
    masked[idx, blobs.labels] = -np.inf
    margins = sims - masked.max(axis=1)
    return sims, margins
