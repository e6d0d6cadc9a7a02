"""Online gradient descent at the edge of stability.

Small training harness for the square orthogonal networks: IDX file
ingestion, synthetic cluster datasets with orthonormal class targets,
plain per-sample gradient descent on the MSE loss ||f - y||^2 / (2M),
and the (depth, learning rate) sweep that locates the divergence
boundary to compare against eta = 2 / lambda_max.
"""

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .meanfield import ActivationSpec, activation_apply, activation_deriv_sq
from .rmtsim import OrthogonalNet

logger = logging.getLogger(__name__)

LOSS_CLAMP = 10.0
BLOWUP_FACTOR = 1e3

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


def load_idx(path) -> np.ndarray:
    """Parse an IDX file of unsigned bytes (image tensors or labels).

    Header: big-endian 32-bit magic (two zero bytes, dtype code 0x08,
    dimension count), then one big-endian 32-bit size per dimension,
    then the raw payload. Accepts the 3-D image magic 0x00000803 and
    the 1-D label magic 0x00000801.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise ValueError(f"{path}: only {len(blob)} bytes, no room for a magic")
    (magic,) = struct.unpack(">i", blob[:4])
    if magic == IDX_MAGIC_IMAGES:
        ndim = 3
    elif magic == IDX_MAGIC_LABELS:
        ndim = 1
    else:
        raise ValueError(f"{path}: bad magic 0x{magic:08x} at offset 0")
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ValueError(f"{path}: header needs {header} bytes, file has {len(blob)}")
    dims = struct.unpack(f">{ndim}i", blob[4:header])
    if any(d < 0 for d in dims):
        raise ValueError(f"{path}: negative dimension in {dims}")
    expected = header + int(np.prod(dims))
    if len(blob) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for dims {dims}, got {len(blob)} "
            f"(payload starts at offset {header})"
        )
    return np.frombuffer(blob[header:], dtype=np.uint8).reshape(dims)


@dataclass
class Dataset:
    """Inputs normalized to ||x||^2 / M = 1 with orthonormal class targets.

    targets[k] is the standard basis vector e_k in R^M, so the encoded
    target of sample i is targets[labels[i]] and top-1 prediction is the
    argmax of the first `classes` output coordinates.
    """

    inputs: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be (n, M)")
        n, m = self.inputs.shape
        if len(self.labels) != n:
            raise ValueError("one label per input required")
        if not 1 <= self.classes <= m:
            raise ValueError(f"classes must be in [1, {m}]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError("labels must index into the class range")
        qhat = (self.inputs**2).sum(axis=1) / m
        worst = np.abs(qhat - 1.0).max()
        if worst > 1e-9:
            raise ValueError(f"inputs not normalized to q_hat = 1 (off by {worst:.2e})")

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.inputs.shape[1]

    def target(self, i: int) -> np.ndarray:
        y = np.zeros(self.width)
        y[self.labels[i]] = 1.0
        return y

    @classmethod
    def from_arrays(cls, vectors: np.ndarray, labels: np.ndarray, classes: int) -> "Dataset":
        """Normalize raw vectors to q_hat = 1 and wrap them up."""
        vectors = np.asarray(vectors, dtype=float)
        if vectors.ndim != 2:
            raise ValueError("vectors must be (n, M)")
        norms = np.linalg.norm(vectors, axis=1)
        dead = np.flatnonzero(norms == 0)
        if dead.size:
            raise ValueError(f"zero-norm input rows at indices {dead[:5].tolist()}")
        m = vectors.shape[1]
        scaled = vectors * (math.sqrt(m) / norms)[:, None]
        return cls(scaled, labels, classes)


def synth_dataset(M: int, n: int, classes: int, seed: int) -> Dataset:
    """Gaussian cluster dataset: per-class random centers plus unit noise,
    labels balanced, everything normalized to q_hat = 1."""
    if classes > M:
        raise ValueError("classes must not exceed the width")
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, M))
    labels = rng.permutation(np.arange(n) % classes)
    raw = centers[labels] + rng.standard_normal((n, M))
    return Dataset.from_arrays(raw, labels, classes)


def idx_dataset(images_path, labels_path, classes: int = 10, limit: int | None = None) -> Dataset:
    """Flatten an IDX image/label pair into a normalized Dataset."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise ValueError("images file must hold a 3-D tensor")
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images vs {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    flat = images.reshape(len(images), -1).astype(float)
    return Dataset.from_arrays(flat, labels.astype(int), classes)


@dataclass
class TrainConfig:
    """Knobs for one training run."""

    depth: int
    width: int
    activation: ActivationSpec
    eta: float
    steps: int
    sigma: float = 1.0
    seed: int = 0
    blowup_factor: float = BLOWUP_FACTOR
    loss_clamp: float = LOSS_CLAMP

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.steps < 1 or self.depth < 1 or self.width < 2:
            raise ValueError("steps, depth >= 1 and width >= 2 required")
        if self.blowup_factor <= 1:
            raise ValueError("blowup_factor must exceed 1")


def _forward_vectors(net: OrthogonalNet, x: np.ndarray):
    """Activations x^0..x^{L-1}, preactivations h^1..h^L. Output is h^L."""
    xs, hs = [x], []
    cur = x
    for ell in range(net.depth):
        h = net.weights[ell] @ cur
        hs.append(h)
        if ell < net.depth - 1:
            cur = activation_apply(net.activation, h)
            xs.append(cur)
    return xs, hs


def online_gd_step(net: OrthogonalNet, x: np.ndarray, y: np.ndarray, eta: float):
    """One SGD step on loss(x, y) = ||h^L - y||^2 / (2M), updating the
    network in place.

    Returns (pre-update loss, ok). A non-finite loss or gradient leaves
    the weights untouched and reports ok=False.
    """
    M = net.width
    xs, hs = _forward_vectors(net, x)
    resid = hs[-1] - y
    with np.errstate(over="ignore"):  # overflow lands in the finiteness check
        loss = float(resid @ resid) / (2.0 * M)
    if not math.isfinite(loss):
        return loss, False
    delta = resid / M
    grads = [None] * net.depth
    for ell in range(net.depth - 1, -1, -1):
        grads[ell] = np.outer(delta, xs[ell])
        if ell > 0:
            back = net.weights[ell].T @ delta
            dsq = activation_deriv_sq(net.activation, hs[ell - 1])
            delta = np.sqrt(dsq) * back
    if not all(np.all(np.isfinite(g)) for g in grads):
        return loss, False
    for ell in range(net.depth):
        net.weights[ell] -= eta * grads[ell]
    return loss, True


@dataclass
class TrainResult:
    """Per-step losses plus end-of-run metrics for one configuration."""

    losses: np.ndarray
    diverged: bool
    diverged_at: int | None
    train_loss: float
    train_acc: float
    test_loss: float = math.nan
    test_acc: float = math.nan


def evaluate(net: OrthogonalNet, data: Dataset):
    """Mean loss and top-1 accuracy of the current weights on a dataset."""
    total, hits = 0.0, 0
    for i in range(data.size):
        _, hs = _forward_vectors(net, data.inputs[i])
        resid = hs[-1] - data.target(i)
        total += float(resid @ resid) / (2.0 * net.width)
        if int(np.argmax(hs[-1][: data.classes])) == data.labels[i]:
            hits += 1
    return total / data.size, hits / data.size


def train_run(
    config: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
    net: OrthogonalNet | None = None,
) -> TrainResult:
    """One epoch of online gradient descent over a shuffled sample stream.

    The run aborts as diverged when a step produces a non-finite value
    or any layer's Frobenius norm exceeds blowup_factor times its
    initial value. Reported losses are clamped at loss_clamp.
    """
    if train.width != config.width:
        raise ValueError("dataset width does not match the config")
    if net is None:
        net = OrthogonalNet.sample(
            config.width, config.depth, config.activation, config.sigma, config.seed
        )
    rng = np.random.default_rng(config.seed + 0x5EED)
    order = rng.permutation(train.size)
    init_norms = [np.linalg.norm(w) for w in net.weights]
    limit = [config.blowup_factor * n for n in init_norms]

    losses = []
    diverged_at = None
    for step in range(config.steps):
        i = int(order[step % train.size])
        loss, ok = online_gd_step(net, train.inputs[i], train.target(i), config.eta)
        losses.append(min(loss, config.loss_clamp) if math.isfinite(loss) else config.loss_clamp)
        if not ok or any(np.linalg.norm(w) > lim for w, lim in zip(net.weights, limit)):
            diverged_at = step
            break

    diverged = diverged_at is not None
    if diverged:
        train_loss, train_acc = config.loss_clamp, 0.0
        test_loss, test_acc = (config.loss_clamp, 0.0) if test is not None else (math.nan, math.nan)
    else:
        train_loss, train_acc = evaluate(net, train)
        train_loss = min(train_loss, config.loss_clamp)
        if test is not None:
            test_loss, test_acc = evaluate(net, test)
            test_loss = min(test_loss, config.loss_clamp)
        else:
            test_loss, test_acc = math.nan, math.nan
    return TrainResult(
        losses=np.asarray(losses),
        diverged=diverged,
        diverged_at=diverged_at,
        train_loss=train_loss,
        train_acc=train_acc,
        test_loss=test_loss,
        test_acc=test_acc,
    )


@dataclass
class SweepCell:
    depth: int
    eta: float
    seed: int
    train_loss: float
    test_loss: float
    train_acc: float
    test_acc: float
    diverged: bool


@dataclass
class SweepResult:
    """Grid of training outcomes plus the estimated stability boundary.

    boundary maps each depth to the geometric midpoint between the
    largest surviving and smallest diverging learning rate, or None when
    the grid never brackets the transition.
    """

    cells: list = field(default_factory=list)
    boundary: dict = field(default_factory=dict)

    def to_csv_rows(self):
        yield "L,eta,train_loss,test_loss,train_acc,test_acc,diverged"
        for c in self.cells:
            yield (
                f"{c.depth},{c.eta:.10g},{c.train_loss:.10g},{c.test_loss:.10g},"
                f"{c.train_acc:.10g},{c.test_acc:.10g},{int(c.diverged)}"
            )

    def all_diverged(self) -> bool:
        return bool(self.cells) and all(c.diverged for c in self.cells)


def estimate_boundary(etas, diverged_flags):
    """Geometric midpoint between the largest stable and smallest diverged
    eta; None when the pattern never crosses."""
    pairs = sorted(zip(etas, diverged_flags))
    stable = [e for e, d in pairs if not d]
    blown = [e for e, d in pairs if d]
    if not stable or not blown:
        return None
    lo, hi = max(stable), min(blown)
    if hi < lo:
        logger.warning("non-monotone divergence pattern: stable at %g above diverged %g", lo, hi)
    return math.sqrt(lo * hi)


def lr_depth_sweep(
    depths,
    etas,
    base_config: TrainConfig,
    train: Dataset,
    test: Dataset | None = None,
) -> SweepResult:
    """Run train_run over the (depth, eta) grid.

    Every cell draws its own network from a seed derived from the base
    seed and the cell coordinates, so the grid can be evaluated in any
    order (or in parallel) with identical results.
    """
    depths = list(depths)
    etas = list(etas)
    if not depths or not etas:
        raise ValueError("depth and eta grids must be nonempty")
    result = SweepResult()
    for di, depth in enumerate(depths):
        flags = []
        for ei, eta in enumerate(etas):
            seed = base_config.seed + 100_003 * di + 1_009 * ei
            config = TrainConfig(
                depth=depth,
                width=base_config.width,
                activation=base_config.activation,
                eta=eta,
                steps=base_config.steps,
                sigma=base_config.sigma,
                seed=seed,
                blowup_factor=base_config.blowup_factor,
                loss_clamp=base_config.loss_clamp,
            )
            run = train_run(config, train, test)
            flags.append(run.diverged)
            result.cells.append(
                SweepCell(
                    depth=depth,
                    eta=eta,
                    seed=seed,
                    train_loss=run.train_loss,
                    test_loss=run.test_loss,
                    train_acc=run.train_acc,
                    test_acc=run.test_acc,
                    diverged=run.diverged,
                )
            )
        order = np.argsort(etas)
        sorted_flags = [flags[i] for i in order]
        if any(
            a and not b for a, b in zip(sorted_flags, sorted_flags[1:])
        ):
            logger.warning("depth %d: divergence not monotone in eta", depth)
        result.boundary[depth] = estimate_boundary(etas, flags)
    return result
