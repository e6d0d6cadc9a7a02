"""Finite-width random network simulator.

Networks have square Haar-orthogonal weight matrices scaled by sigma and
piecewise-linear activations; the output is the last preactivation. The
central object measured here is the dual conditional Fisher information

    H_L = (1/M) (df/dtheta)(df/dtheta)^T
        = sum_l q_hat_{l-1} delta_{L->l} delta_{L->l}^T,

built either by the layer recursion H_{l+1} = q_hat_l I + W_{l+1} D_l
H_l D_l W_{l+1}^T (starting from H_1 = q_hat_0 I) or from the dense
parameter Jacobian, plus the N-sample block kernel Theta whose diagonal
blocks are (M/N) H_L(x_n). Eigenvalue reports and empirical spectral
measures feed the comparison against the free-probability predictions.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .meanfield import ActivationSpec, activation_apply, activation_deriv_sq
from .specmeasure import GridDensity, NumericalError, SpectralMeasure

ORTHO_TOL = 1e-10
SYM_TOL = 1e-8
DENSE_MAX_WIDTH = 16
DENSE_MAX_DEPTH = 4
NTK_MAX_SIZE = 4096


def sample_haar_orthogonal(M: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed M x M orthogonal matrix.

    QR of a Gaussian matrix with the sign ambiguity fixed by forcing a
    positive triangular diagonal; without the fix numpy's QR biases the
    draw away from uniform. A (probability-zero) near-singular draw is
    resampled.
    """
    if M < 2:
        raise ValueError("M must be at least 2")
    for _ in range(8):
        a = rng.standard_normal((M, M))
        q, r = np.linalg.qr(a)
        d = np.diagonal(r)
        if np.abs(d).min() < 1e-12 * math.sqrt(M):
            continue
        return q * np.sign(d)[None, :]
    raise NumericalError("repeated rank-deficient Gaussian draws")


def normalized_input(M: int, rng: np.random.Generator, q_hat: float = 1.0) -> np.ndarray:
    """Standard Gaussian vector rescaled so that ||x||^2 / M = q_hat."""
    if q_hat <= 0:
        raise ValueError("q_hat must be positive")
    x = rng.standard_normal(M)
    return x * math.sqrt(M * q_hat) / np.linalg.norm(x)


@dataclass
class OrthogonalNet:
    """Depth-L, width-M network with scaled-orthogonal weights.

    weights[l] is W_{l+1} = sigma_{l+1} Q with Q orthogonal; the
    orthogonality of every W/sigma is checked at construction. Training
    code mutates `weights` afterwards, so the check certifies the
    initial state only.
    """

    width: int
    depth: int
    weights: list
    sigma: tuple
    activation: ActivationSpec
    seed: int | None = None

    def __post_init__(self):
        if self.width < 2 or self.depth < 1:
            raise ValueError("need width >= 2 and depth >= 1")
        self.sigma = tuple(float(s) for s in self.sigma)
        if len(self.weights) != self.depth or len(self.sigma) != self.depth:
            raise ValueError("need one weight matrix and one sigma per layer")
        if any(s <= 0 for s in self.sigma):
            raise ValueError("sigma entries must be positive")
        for ell, (w, s) in enumerate(zip(self.weights, self.sigma), start=1):
            if w.shape != (self.width, self.width):
                raise ValueError(f"weight {ell} has shape {w.shape}")
            q = w / s
            defect = np.abs(q.T @ q - np.eye(self.width)).max()
            if defect >= ORTHO_TOL:
                raise ValueError(f"layer {ell}: W/sigma off orthogonal by {defect:.2e}")

    @classmethod
    def sample(cls, width, depth, activation, sigma=1.0, seed=0):
        """Draw all layers from the Haar measure with one seeded generator."""
        rng = np.random.default_rng(seed)
        sig = tuple(sigma) if np.iterable(sigma) else (float(sigma),) * depth
        weights = [s * sample_haar_orthogonal(width, rng) for s in sig]
        return cls(width, depth, weights, sig, activation, seed)

    def copy(self) -> "OrthogonalNet":
        clone = object.__new__(OrthogonalNet)
        clone.width = self.width
        clone.depth = self.depth
        clone.weights = [w.copy() for w in self.weights]
        clone.sigma = self.sigma
        clone.activation = self.activation
        clone.seed = self.seed
        return clone


@dataclass
class ForwardTrace:
    """Everything the backward pass and the FIM recursions need.

    x[0..L] activations (x[0] the input), h[1..L] preactivations stored
    at index l-1, deriv[l-1] = phi'(h^l) for l = 1..L-1, and
    q_hat[l] = ||x^l||^2 / M for l = 0..L-1.
    """

    x: list
    h: list
    deriv: list
    q_hat: list


def forward_trace(net: OrthogonalNet, x: np.ndarray) -> ForwardTrace:
    """Run the network on one input, recording the full trace.

    The network output is the last preactivation h^L; x^L is recorded
    anyway for schedule measurements.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (net.width,):
        raise ValueError(f"input must have shape ({net.width},)")
    if not np.linalg.norm(x) > 0:
        raise ValueError("input must be nonzero")
    xs, hs, ds, qs = [x], [], [], []
    cur = x
    for ell in range(1, net.depth + 1):
        qs.append(float(cur @ cur) / net.width)
        h = net.weights[ell - 1] @ cur
        if not np.all(np.isfinite(h)):
            raise NumericalError(f"non-finite preactivation at layer {ell}")
        hs.append(h)
        cur = activation_apply(net.activation, h)
        xs.append(cur)
        if ell < net.depth:
            ds.append(np.sqrt(activation_deriv_sq(net.activation, h)))
    return ForwardTrace(x=xs, h=hs, deriv=ds, q_hat=qs)


def dual_fim_recursive(net: OrthogonalNet, trace: ForwardTrace) -> np.ndarray:
    """H_L by the layer recursion; O(L M^3) and no parameter Jacobian."""
    if len(trace.q_hat) != net.depth:
        raise ValueError("trace does not match the network depth")
    h = trace.q_hat[0] * np.eye(net.width)
    for ell in range(1, net.depth):
        d = trace.deriv[ell - 1]
        w = net.weights[ell]
        inner = w @ (d[:, None] * h * d[None, :]) @ w.T
        h = trace.q_hat[ell] * np.eye(net.width) + inner
    return (h + h.T) / 2.0


def _chain_matrices(net: OrthogonalNet, trace: ForwardTrace) -> list:
    """delta_{L->l} = W_L D_{L-1} ... W_{l+1} D_l for l = 1..L (identity at L)."""
    out = [np.eye(net.width)]
    for ell in range(net.depth - 1, 0, -1):
        out.append((out[-1] @ net.weights[ell]) * trace.deriv[ell - 1][None, :])
    out.reverse()
    return out


def dual_fim_dense(net: OrthogonalNet, x: np.ndarray):
    """(H_L, conditional FIM) from the explicit parameter Jacobian.

    Size-guarded: the conditional FIM is LM^2 x LM^2. The two returns
    satisfy H_L = J J^T / M and I_cond = J^T J, so the nonzero spectrum
    of I_cond / M is exactly that of H_L, with LM^2 - M zeros left over.
    """
    if net.width > DENSE_MAX_WIDTH or net.depth > DENSE_MAX_DEPTH:
        raise ValueError(
            f"dense construction limited to M <= {DENSE_MAX_WIDTH}, L <= {DENSE_MAX_DEPTH}"
        )
    trace = forward_trace(net, x)
    chains = _chain_matrices(net, trace)
    blocks = [np.kron(chains[ell], trace.x[ell][None, :]) for ell in range(net.depth)]
    jac = np.hstack(blocks)
    h = jac @ jac.T / net.width
    cond = jac.T @ jac
    return (h + h.T) / 2.0, (cond + cond.T) / 2.0


def ntk_block_matrix(net: OrthogonalNet, inputs: list) -> np.ndarray:
    """N-sample tangent-kernel block matrix Theta (NM x NM).

    Block (m, n) is (M/N) sum_l Sigma_l(m, n) delta_{L->l}(m)
    delta_{L->l}(n)^T with Sigma_l(m, n) = <x^{l-1}(m), x^{l-1}(n)> / M,
    so the diagonal blocks are (M/N) H_L(x_n) and the normalized traces
    satisfy tr(Theta/M) = sum_n tr(H_L(x_n)) / N^2 exactly.
    """
    n_samples = len(inputs)
    if n_samples < 1:
        raise ValueError("need at least one input")
    size = n_samples * net.width
    if size > NTK_MAX_SIZE:
        raise ValueError(f"NM = {size} exceeds the guard {NTK_MAX_SIZE}")
    traces = [forward_trace(net, x) for x in inputs]
    chains = [_chain_matrices(net, t) for t in traces]
    theta = np.zeros((size, size))
    M = net.width
    for m in range(n_samples):
        for n in range(m, n_samples):
            block = np.zeros((M, M))
            for ell in range(net.depth):
                overlap = float(traces[m].x[ell] @ traces[n].x[ell]) / M
                block += overlap * (chains[m][ell] @ chains[n][ell].T)
            block *= M / n_samples
            theta[m * M : (m + 1) * M, n * M : (n + 1) * M] = block
            if n != m:
                theta[n * M : (n + 1) * M, m * M : (m + 1) * M] = block.T
    return theta


@dataclass
class EigenReport:
    """Sorted spectrum of one symmetric matrix plus summary statistics."""

    eigenvalues: np.ndarray
    max: float
    mean: float
    histogram: tuple
    atom_mass_near_max: float


def eig_sym(a: np.ndarray, bin_count: int = 64, atom_window: float = 0.01) -> EigenReport:
    """Full spectrum of a symmetric matrix.

    The input must be symmetric to 1e-8; it is then symmetrized exactly
    before the solve. A handful of recomputed eigenpairs are checked
    against ||A v - lambda v|| <= 1e-8 ||A||. atom_mass_near_max is the
    fraction of eigenvalues within `atom_window` (relative) of the top.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("need a square matrix")
    asym = np.abs(a - a.T).max()
    if asym >= SYM_TOL:
        raise ValueError(f"matrix is not symmetric: max |A - A^T| = {asym:.2e}")
    sym = (a + a.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    scale = max(np.abs(vals).max(), 1e-300)
    spot = np.linspace(0, len(vals) - 1, min(5, len(vals)), dtype=int)
    for i in spot:
        resid = np.linalg.norm(sym @ vecs[:, i] - vals[i] * vecs[:, i])
        if resid > 1e-8 * scale:
            raise NumericalError(f"eigenpair residual {resid:.2e} exceeds tolerance")
    top = float(vals[-1])
    lo, hi = float(vals[0]), top
    # a near-degenerate spectrum can have hi - lo below what bin_count
    # finite bins can resolve; collapse it to one bin instead
    if hi - lo <= bin_count * np.spacing(max(abs(lo), abs(hi), 1.0)):
        edges = np.array([lo - 0.5, hi + 0.5])
        counts = np.array([len(vals)])
    else:
        counts, edges = np.histogram(vals, bins=bin_count, range=(lo, hi))
    window = atom_window * max(abs(top), 1e-300)
    near = float(np.count_nonzero(vals >= top - window)) / len(vals)
    return EigenReport(
        eigenvalues=vals,
        max=top,
        mean=float(vals.mean()),
        histogram=(edges, counts),
        atom_mass_near_max=near,
    )


def empirical_measure(
    report: EigenReport,
    bin_width: float,
    atom_window: float | None = None,
) -> SpectralMeasure:
    """Histogram the spectrum into a unit-mass SpectralMeasure.

    Bin edges sit at integer multiples of bin_width (the same alignment
    distance_L1 uses, so theory-vs-empirical comparisons bin
    consistently). With atom_window set, eigenvalues within that
    relative distance of the maximum become a single atom at their mean
    and only the rest is histogrammed.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    vals = report.eigenvalues
    if len(vals) == 0:
        raise ValueError("empty eigenvalue report")
    total = len(vals)
    atoms = []
    if atom_window is not None:
        window = atom_window * max(abs(report.max), 1e-300)
        mask = vals >= report.max - window
        if mask.any():
            atoms.append((float(vals[mask].mean()), float(mask.sum()) / total))
            vals = vals[~mask]
    if len(vals) == 0:
        return SpectralMeasure.from_atoms(atoms)
    if vals.max() - vals.min() < 1e-12 * max(1.0, abs(float(vals.max()))):
        atoms.append((float(vals.mean()), len(vals) / total))
        return SpectralMeasure.from_atoms(atoms)

    lo = math.floor(vals.min() / bin_width)
    hi = math.ceil(vals.max() / bin_width)
    if hi * bin_width <= vals.max():
        hi += 1
    edges = np.arange(lo, hi + 1) * bin_width
    counts, _ = np.histogram(vals, bins=edges)
    cdf = np.concatenate([[0.0], np.cumsum(counts)]) / total
    grid_count = max(64, 8 * len(counts) + 1)
    nodes = np.linspace(edges[0], edges[-1], grid_count)
    cell_edges = np.concatenate([[nodes[0]], (nodes[:-1] + nodes[1:]) / 2.0, [nodes[-1]]])
    cell_cdf = np.interp(cell_edges, edges, cdf)
    masses = np.maximum(np.diff(cell_cdf), 0.0)
    density = GridDensity.from_cell_masses(float(nodes[0]), float(nodes[-1]), masses)
    return SpectralMeasure.from_atoms(atoms, density=density)


def model_fim_sample(
    M: int,
    q: list,
    sigma: list,
    alpha: list,
    gamma: list,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample the matrix model behind the spectrum recursion directly.

    Runs H <- q_l I + W D H D W^T with independent Haar W = sigma Q and
    iid diagonal D whose squared entries follow (1-alpha) delta_0 +
    alpha delta_gamma. This replaces the network's correlated
    activations by their limiting law, which is what the free
    convolution describes exactly; finite-M agreement with network
    draws is itself a freeness check.
    """
    depth = len(q)
    if len(sigma) != depth or len(alpha) != depth - 1 or len(gamma) != depth - 1:
        raise ValueError("need len(sigma) = len(q) and len(alpha) = len(gamma) = len(q) - 1")
    h = float(q[0]) * np.eye(M)
    for ell in range(1, depth):
        d = math.sqrt(gamma[ell - 1]) * (rng.random(M) < alpha[ell - 1]).astype(float)
        wd = sigma[ell] * sample_haar_orthogonal(M, rng) * d[None, :]
        h = float(q[ell]) * np.eye(M) + wd @ h @ wd.T
    return (h + h.T) / 2.0


class FreenessProbe(NamedTuple):
    M: int
    trials: int
    moments: tuple
    median_abs: float


def freeness_probe(M: int, trials: int, rng: np.random.Generator) -> FreenessProbe:
    """Alternating-moment test of asymptotic freeness.

    Draws a diagonal projection P (iid 0/1 entries) and an independent
    Haar-conjugated diagonal B = W A W^T, centers both in normalized
    trace, and measures tr(P° B° P° B°). Freeness forces the limit to
    vanish, so the magnitudes should shrink as M grows; callers compare
    probes across several M.
    """
    if M < 32:
        raise ValueError("probe needs M >= 32")
    if trials < 1:
        raise ValueError("need at least one trial")
    moments = []
    for _ in range(trials):
        p = (rng.random(M) < 0.5).astype(float)
        a = (rng.random(M) < 0.5).astype(float)
        w = sample_haar_orthogonal(M, rng)
        b = (w * a[None, :]) @ w.T
        p0 = p - p.mean()
        b0 = b - (np.trace(b) / M) * np.eye(M)
        pb = p0[:, None] * b0
        moments.append(float(np.trace(pb @ pb)) / M)
    arr = np.abs(moments)
    return FreenessProbe(M, trials, tuple(moments), float(np.median(arr)))
