"""Free multiplicative convolution engine and the layer spectrum recursion.

The forward map for the limit spectrum of the dual conditional Fisher
information is

    mu_{l+1} = (q_l + sigma_{l+1}^2 * .)_* (nu_l boxtimes mu_l),

where nu_l = (1 - alpha_l) delta_0 + alpha_l delta_{gamma_l} is the
squared-Jacobian law of the activation at layer l. The convolution with
such a two-atom law is evaluated through S-transforms: with
h_mu(z) = z G_mu(z) - 1, the unknown w = h_{mu box nu}(z) solves the
subordination fixed point w = h_mu(z * S_nu(w)), after which
G(z) = (w + 1) / z and the density follows by Stieltjes inversion.
Atoms never come from the numerics: they obey the exact rule
(mu box nu)({ab}) = max(mu({a}) + nu({b}) - 1, 0) for ab != 0, while the
weight at zero is max(mu({0}), nu({0})) by the rank bound on products.

Also here: the closed-form three-layer solution, the max/mean/atom-weight
recursions along a schedule, and their depth-asymptotic limits.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .specmeasure import (
    GridDensity,
    NumericalError,
    SpectralMeasure,
    affine_pushforward,
)

logger = logging.getLogger(__name__)

# Damped fixed-point defaults for the subordination solve.
DAMPING = 0.5
SOLVER_TOL = 1e-12
MAX_ITER = 10_000
WINDOW_MARGIN = 0.05
DEFAULT_GRID = 2048

# Below this magnitude the expm1-based ratio switches to its series.
_SERIES_CUTOFF = 1e-8


@dataclass(frozen=True)
class TwoAtomJacobianLaw:
    """nu = (1 - alpha) delta_0 + alpha delta_gamma, alpha in (0, 1]."""

    alpha: float
    gamma: float

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.gamma > 0.0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    def as_measure(self) -> SpectralMeasure:
        if self.alpha == 1.0:
            return SpectralMeasure.dirac(self.gamma)
        return SpectralMeasure(atoms=((0.0, 1.0 - self.alpha), (self.gamma, self.alpha)))


@dataclass(frozen=True)
class LayerSchedule:
    """Per-layer scalars driving the spectrum recursion for depth L.

    `q` holds q_0 .. q_{L-1}, `sigma` holds sigma_1 .. sigma_L, and
    `jacobians` holds the laws nu_1 .. nu_{L-1}. sigma_1 never enters the
    measure recursion (the first weight matrix cancels by orthogonality)
    but belongs to the network description.
    """

    q: tuple
    sigma: tuple
    jacobians: tuple

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        sigma = tuple(float(v) for v in self.sigma)
        jac = tuple(self.jacobians)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "jacobians", jac)
        if len(q) < 1:
            raise ValueError("schedule needs depth >= 1")
        if len(sigma) != len(q):
            raise ValueError(f"need {len(q)} sigma values, got {len(sigma)}")
        if len(jac) != len(q) - 1:
            raise ValueError(f"need {len(q) - 1} jacobian laws, got {len(jac)}")
        if any(v <= 0 for v in q) or any(v <= 0 for v in sigma):
            raise ValueError("q and sigma entries must be positive")
        for nu in jac:
            if not isinstance(nu, TwoAtomJacobianLaw):
                raise TypeError("jacobians must be TwoAtomJacobianLaw instances")

    @property
    def depth(self) -> int:
        return len(self.q)

    @classmethod
    def constant(cls, depth: int, q: float, sigma: float, alpha: float, gamma: float):
        nu = TwoAtomJacobianLaw(alpha, gamma)
        return cls(q=(q,) * depth, sigma=(sigma,) * depth, jacobians=(nu,) * (depth - 1))


@dataclass(frozen=True)
class AsymptoticRegime:
    """Deep-limit scalars: q = lim q_L, eps1 = lim L(1 - alpha_L),
    eps2 = -lim L log(sigma_L^2 gamma_L); both eps bounded by 1."""

    q: float
    eps1: float
    eps2: float

    def __post_init__(self):
        if self.q <= 0:
            raise ValueError("q must be positive")
        if abs(self.eps1) >= 1 or abs(self.eps2) >= 1:
            raise ValueError("|eps1| and |eps2| must be < 1")


@dataclass(frozen=True)
class AtomTrack:
    """Per-layer support maximum and the weight of the atom sitting there.

    `valid_depth` is the deepest layer for which the atom claim holds
    (beta > 0); beyond it the lambda values still bound the support but
    carry no atom.
    """

    lam: tuple
    beta: tuple
    valid_depth: int

    @property
    def depth(self) -> int:
        return len(self.lam)


@dataclass(frozen=True)
class ConvolutionStats:
    """Diagnostics from one numeric free multiplicative convolution."""

    grid_count: int
    eps: float
    iterations_max: int
    iterations_mean: float
    flagged: tuple
    mass_defect: float
    clamped: float


# ----------------------------------------------------------------------
# transforms
# ----------------------------------------------------------------------


def s_transform_two_atom(nu: TwoAtomJacobianLaw, z):
    """S_nu(z) = (z + 1) / (gamma (z + alpha)) for the two-atom law."""
    z = complex(z) if np.isscalar(z) else np.asarray(z, dtype=complex)
    pole = np.abs(z + nu.alpha)
    if np.any(pole < 1e-12 * (1.0 + abs(nu.alpha))):
        raise ValueError(f"S-transform pole at z = {-nu.alpha}")
    return (z + 1.0) / (nu.gamma * (z + nu.alpha))


def atom_rule(wa: float, wb: float) -> float:
    """Weight of the product atom: max(wa + wb - 1, 0)."""
    if not (0.0 <= wa <= 1.0 and 0.0 <= wb <= 1.0):
        raise ValueError("atom weights must lie in [0, 1]")
    return max(wa + wb - 1.0, 0.0)


def _atomize(mu: SpectralMeasure):
    """Locations and masses of mu with the density collapsed onto its grid.

    Each grid node receives the mass of its trapezoid cell, so the
    discrete measure has exactly the continuous part's mass and the same
    first moments up to O(step^2). Used to evaluate h_mu inside the
    subordination iteration, where a rational function of ~2k poles is
    both fast and free of quadrature bias near the real axis.
    """
    locs = [loc for loc, _ in mu.atoms]
    masses = [w for _, w in mu.atoms]
    if mu.density is not None:
        d = mu.density
        cell = np.full(d.grid_count, d.step)
        cell[0] = cell[-1] = d.step / 2.0
        locs.extend(d.grid().tolist())
        masses.extend((d.values * cell).tolist())
    return np.asarray(locs), np.asarray(masses)


def _h_of(locs: np.ndarray, masses: np.ndarray, u: np.ndarray) -> np.ndarray:
    """h(u) = u G(u) - 1 for the discrete measure sum_k m_k delta_{x_k}."""
    g = (masses[None, :] / (u[:, None] - locs[None, :])).sum(axis=1)
    return u * g - 1.0


def _product_atoms(mu: SpectralMeasure, nu: TwoAtomJacobianLaw) -> list:
    """Exact atoms of mu boxtimes nu.

    Nonzero candidates are products of mu's atoms with gamma, weighted by
    the pairwise rule. The weight at zero is max(mu({0}), nu({0})): the
    pairwise rule undershoots there because a zero of either factor
    forces a zero of the product (rank bound), not just overlapping mass.
    """
    out = {}
    zero_weight = max(mu.atom_weight(0.0), 1.0 - nu.alpha)
    if zero_weight > 0:
        out[0.0] = zero_weight
    for loc, w in mu.atoms:
        if loc == 0.0:
            continue
        w_prod = atom_rule(w, nu.alpha)
        if w_prod > 0:
            key = loc * nu.gamma
            out[key] = out.get(key, 0.0) + w_prod
    return sorted(out.items())


def free_mult_conv_two_atom(
    mu: SpectralMeasure,
    nu: TwoAtomJacobianLaw,
    *,
    grid_count: int = DEFAULT_GRID,
    eps: float | None = None,
    margin: float = WINDOW_MARGIN,
    damping: float = DAMPING,
    tol: float = SOLVER_TOL,
    max_iter: int = MAX_ITER,
    method: str = "auto",
    return_stats: bool = False,
):
    """Free multiplicative convolution mu boxtimes nu.

    Atoms are placed by the exact rules; the continuous part comes from
    solving the subordination fixed point w = h_mu(z S_nu(w)) on the
    strip Im z = eps over [0, ||mu|| * gamma * (1 + margin)], followed by
    Stieltjes inversion with the atoms' Cauchy terms subtracted.

    With method="auto", purely atomic shortcuts (nu = delta_gamma, or mu
    a single atom) bypass the solver; method="numeric" forces the solver,
    which the tests use to cross-check the shortcuts.

    Parameters
    ----------
    return_stats : bool
        If True, also return a ConvolutionStats record.

    Raises
    ------
    NumericalError
        If more than 1% of the grid points fail to converge, or the
        recovered mass misses 1 by more than 1e-4.
    """
    if mu.support_min() < -1e-12:
        raise ValueError("mu must be supported on the nonnegative axis")
    if method not in ("auto", "numeric"):
        raise ValueError(f"unknown method {method!r}")
    if grid_count < 128:
        raise ValueError("grid_count must be at least 128")

    trivial_stats = ConvolutionStats(0, 0.0, 0, 0.0, (), 0.0, 0.0)
    if method == "auto":
        if nu.alpha == 1.0:
            result = affine_pushforward(mu, nu.gamma, 0.0)
            return (result, trivial_stats) if return_stats else result
        if mu.density is None and len(mu.atoms) == 1:
            loc, _ = mu.atoms[0]
            if loc == 0.0:
                result = SpectralMeasure.dirac(0.0)
            else:
                result = affine_pushforward(nu.as_measure(), loc, 0.0)
            return (result, trivial_stats) if return_stats else result

    atoms = _product_atoms(mu, nu)
    atom_mass = sum(w for _, w in atoms)
    target = 1.0 - atom_mass
    bound = mu.support_max * nu.gamma
    if target < 1e-9 or bound <= 0:
        # nothing continuous left; can happen only in degenerate corners
        result = SpectralMeasure.from_atoms(atoms)
        return (result, trivial_stats) if return_stats else result

    window = bound * (1.0 + margin)
    if eps is None:
        eps = 1e-4 * window
    x = np.linspace(0.0, window, grid_count)
    z = x + 1j * eps

    locs, masses = _atomize(mu)
    w_sol, iters, converged = _subordination_solve(
        locs, masses, nu, z, damping=damping, tol=tol, max_iter=max_iter
    )
    g = (w_sol + 1.0) / z
    # inside spectral gaps the iteration may settle on the spurious root
    # w = -1 (G identically 0); its roundoff-scale positive imaginary
    # part is harmless, so only flag violations above noise level
    bad = ~converged | ~np.isfinite(g) | (g.imag > 1e-8)
    flagged = x[bad]
    if flagged.size > 0.01 * grid_count:
        raise NumericalError(
            f"subordination failed at {flagged.size}/{grid_count} points, "
            f"first offenders near x = {flagged[:4].tolist()}"
        )
    if flagged.size:
        good = np.flatnonzero(~bad)
        g_interp_re = np.interp(x[bad], x[good], g.real[good])
        g_interp_im = np.interp(x[bad], x[good], g.imag[good])
        g[bad] = g_interp_re + 1j * g_interp_im

    for loc, w in atoms:
        g -= w / (z - loc)
    raw = -g.imag / np.pi
    clamped = max(0.0, float(-raw.min()))
    raw = np.maximum(raw, 0.0)

    # Trim to the exact support bound; the margin zone only catches the
    # strip smearing, whose small mass gets folded back by rescaling.
    keep = x <= bound + 1e-12
    x_kept = x[keep]
    raw = raw[keep]
    raw_mass = float(np.trapezoid(raw, dx=x_kept[1] - x_kept[0]))
    defect = abs(atom_mass + raw_mass - 1.0)
    # the strip smears O(eps) mass past the window edges and under the
    # atoms; renormalizing restores it, but a large defect means the
    # solve itself went wrong
    if defect > 1e-2:
        raise NumericalError(f"mass defect {defect:.3e} after convolution")
    values = raw * (target / raw_mass)
    density = GridDensity(float(x_kept[0]), float(x_kept[-1]), values)
    result = SpectralMeasure.from_atoms(atoms, density=density)
    stats = ConvolutionStats(
        grid_count=grid_count,
        eps=eps,
        iterations_max=int(iters.max()),
        iterations_mean=float(iters.mean()),
        flagged=tuple(flagged.tolist()),
        mass_defect=defect,
        clamped=clamped,
    )
    return (result, stats) if return_stats else result


def _subordination_solve(locs, masses, nu, z, *, damping, tol, max_iter):
    """Damped fixed-point solve of w = h_mu(z S_nu(w)) for each z.

    All points iterate together under an active mask; points that have
    converged drop out. Non-converged points then retry serially, warm
    started from their nearest converged neighbor.
    """
    z = np.asarray(z, dtype=complex)
    n = z.size

    def step(w, zz):
        s = (w + 1.0) / (nu.gamma * (w + nu.alpha))
        u = zz * s
        with np.errstate(divide="ignore", invalid="ignore"):
            return _h_of(locs, masses, u)

    w = _h_of(locs, masses, z)  # cold start: as if S_nu were 1
    iters = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        wa = w[active]
        nxt = step(wa, z[active])
        nxt = (1.0 - damping) * wa + damping * nxt
        bad = ~np.isfinite(nxt)
        if bad.any():
            nxt[bad] = wa[bad] + 0.1  # nudge off the pole and keep going
        delta = np.abs(nxt - wa)
        w[active] = nxt
        iters[active] += 1
        still = delta > tol * (1.0 + np.abs(nxt))
        idx = np.flatnonzero(active)
        active[idx[~still]] = False

    converged = ~active
    # serial retries for stragglers: warm start from the nearest settled
    # neighbor, then back off the damping (oscillatory regions need a
    # smaller step than the default)
    for i in np.flatnonzero(active):
        neighbors = np.flatnonzero(converged)
        if neighbors.size == 0:
            break
        j = neighbors[np.argmin(np.abs(neighbors - i))]
        for theta in (damping, damping / 4.0, damping / 16.0):
            wi = w[j]
            ok = False
            for k in range(max_iter):
                nxt = step(np.array([wi]), z[i : i + 1])[0]
                nxt = (1.0 - theta) * wi + theta * nxt
                if not np.isfinite(nxt):
                    break
                if abs(nxt - wi) <= tol * (1.0 + abs(nxt)):
                    wi = nxt
                    ok = True
                    break
                wi = nxt
            if ok:
                w[i] = wi
                iters[i] += k + 1
                converged[i] = True
                break

    # a converged iterate can still sit on a non-Herglotz root (Im G well
    # above roundoff). That happens in spectral gaps, where the physical
    # root repels the fixed-point map, so no amount of damping reaches it.
    # Newton continuation fixes it: start high in the upper half plane,
    # where the root is unique and the cold start lands on it, then walk
    # the imaginary part down to the strip. Newton converges to repelling
    # roots too, and the short descent keeps it on the physical branch.
    def off_branch(w_val, z_val):
        return ((w_val + 1.0) / z_val).imag > 1e-8

    def newton_descend(z_target):
        top = 8.0 * (abs(z_target.real) + 1.0)
        wi = _h_of(locs, masses, np.array([z_target.real + 1j * top]))[0]
        for lev in np.geomspace(top, z_target.imag, 24):
            zz = z_target.real + 1j * lev
            for _ in range(max_iter):
                u = zz * (wi + 1.0) / (nu.gamma * (wi + nu.alpha))
                g = (masses / (u - locs)).sum()
                dg = -(masses / (u - locs) ** 2).sum()
                dh_du = g + u * dg
                du_dw = zz * (nu.alpha - 1.0) / (nu.gamma * (wi + nu.alpha) ** 2)
                psi = wi - (u * g - 1.0)
                dpsi = 1.0 - dh_du * du_dw
                if dpsi == 0 or not np.isfinite(dpsi):
                    return None
                delta = psi / dpsi
                cap = 0.5 * (1.0 + abs(wi))  # guard against branch jumps
                if abs(delta) > cap:
                    delta *= cap / abs(delta)
                wi = wi - delta
                if not np.isfinite(wi):
                    return None
                if abs(delta) <= tol * (1.0 + abs(wi)):
                    break
            else:
                return None
        return wi

    for i in np.flatnonzero(converged & off_branch(w, z)):
        wi = newton_descend(z[i])
        if wi is not None and not off_branch(wi, z[i]):
            w[i] = wi
        else:
            converged[i] = False
    return w, iters, converged


# ----------------------------------------------------------------------
# layer recursion
# ----------------------------------------------------------------------


def propagate_layer(
    mu_l: SpectralMeasure,
    nu_l: TwoAtomJacobianLaw,
    sigma_next: float,
    q_l: float,
    **grid_kwargs,
) -> SpectralMeasure:
    """One layer of the spectrum recursion:
    (q_l + sigma_next^2 * .)_* (nu_l boxtimes mu_l)."""
    conv = free_mult_conv_two_atom(mu_l, nu_l, **grid_kwargs)
    return affine_pushforward(conv, sigma_next**2, q_l)


def propagate_schedule(schedule: LayerSchedule, **grid_kwargs) -> list:
    """All measures mu_1 .. mu_L along the schedule; mu_1 = delta_{q_0}."""
    out = [SpectralMeasure.dirac(schedule.q[0])]
    for ell in range(1, schedule.depth):
        out.append(
            propagate_layer(
                out[-1],
                schedule.jacobians[ell - 1],
                schedule.sigma[ell],
                schedule.q[ell],
                **grid_kwargs,
            )
        )
    return out


def solve_three_layer(
    q0: float,
    q1: float,
    q2: float,
    sigma2: float,
    sigma3: float,
    alpha1: float,
    alpha2: float,
    gamma1: float,
    gamma2: float,
    grid_count: int = DEFAULT_GRID,
) -> SpectralMeasure:
    """Closed-form limit spectrum of the three-layer dual FIM.

    Atoms: (1 - alpha2) at lambda_min = q2, (alpha2 - alpha1)^+ at
    lambda_mid, (alpha1 + alpha2 - 1)^+ at lambda_max. The density

        rho(x) = sqrt((lambda_plus - x)(x - lambda_minus))
                 / (2 pi (x - lambda_mid)(lambda_max - x))

    lives on [lambda_minus, lambda_plus]. Cell masses are integrated in
    the angular variable x = mid - (width/2) cos(theta), where the
    integrand is smooth even at the inverse-square-root edges, so the
    sampled grid carries the exact continuous mass.
    """
    for name, val in (("alpha1", alpha1), ("alpha2", alpha2)):
        if not 0.0 < val < 1.0:
            raise ValueError(f"{name} must be in (0, 1), got {val}")
    for name, val in (
        ("q0", q0), ("q1", q1), ("q2", q2),
        ("sigma2", sigma2), ("sigma3", sigma3),
        ("gamma1", gamma1), ("gamma2", gamma2),
    ):
        if not val > 0:
            raise ValueError(f"{name} must be positive, got {val}")

    lam_min = q2
    lam_mid = q2 + sigma3**2 * gamma2 * q1
    root_a = math.sqrt(alpha1 * (1.0 - alpha2))
    root_b = math.sqrt(alpha2 * (1.0 - alpha1))
    base = sigma2**2 * gamma1 * q0
    lam_minus = q2 + sigma3**2 * gamma2 * (q1 + base * (root_a - root_b) ** 2)
    lam_plus = q2 + sigma3**2 * gamma2 * (q1 + base * (root_a + root_b) ** 2)
    lam_max = q2 + sigma3**2 * gamma2 * (q1 + base)

    atom_pairs = [
        (lam_min, 1.0 - alpha2),
        (lam_mid, max(alpha2 - alpha1, 0.0)),
        (lam_max, max(alpha1 + alpha2 - 1.0, 0.0)),
    ]
    target = 1.0 - sum(w for _, w in atom_pairs)

    width = lam_plus - lam_minus
    a0 = lam_minus - lam_mid  # >= 0, zero iff alpha1 == alpha2
    b0 = lam_max - lam_plus  # >= 0, zero iff alpha1 + alpha2 == 1

    theta = np.linspace(0.0, math.pi, 16 * grid_count + 1)
    s2 = np.sin(theta / 2.0) ** 2
    c2 = np.cos(theta / 2.0) ** 2
    den_a = a0 + width * s2
    den_b = b0 + width * c2
    # the sin^2/cos^2 factors cancel analytically against vanishing a0/b0
    if a0 == 0.0 and b0 == 0.0:
        f = np.full_like(theta, 1.0 / (2.0 * math.pi))
    elif a0 == 0.0:
        f = width * c2 / (2.0 * math.pi * den_b)
    elif b0 == 0.0:
        f = width * s2 / (2.0 * math.pi * den_a)
    else:
        f = width**2 * s2 * c2 / (2.0 * math.pi * den_a * den_b)
    cum = np.concatenate([[0.0], np.cumsum((f[1:] + f[:-1]) * 0.5 * np.diff(theta))])
    total = cum[-1]
    if abs(total - target) > 1e-6:
        raise NumericalError(
            f"three-layer mass check failed: quadrature {total} vs weight budget {target}"
        )

    x_nodes = np.linspace(lam_minus, lam_plus, grid_count)
    edges = np.concatenate([[lam_minus], (x_nodes[:-1] + x_nodes[1:]) / 2.0, [lam_plus]])
    # theta(x) = arccos(1 - 2 (x - lam_minus) / width) increases with x
    cos_arg = np.clip(1.0 - 2.0 * (edges - lam_minus) / width, -1.0, 1.0)
    theta_edges = np.arccos(cos_arg)
    cdf_edges = np.interp(theta_edges, theta, cum)
    cell_masses = np.maximum(np.diff(cdf_edges), 0.0)
    cell_masses = cell_masses * (target / total)
    density = GridDensity.from_cell_masses(lam_minus, lam_plus, cell_masses)
    return SpectralMeasure.from_atoms(atom_pairs, density=density)


def max_support_track(schedule: LayerSchedule) -> AtomTrack:
    """Support maxima lambda_l and top-atom weights beta_l along a schedule.

    lambda_1 = q_0 and lambda_{l+1} = q_l + sigma_{l+1}^2 gamma_l lambda_l;
    beta_l = 1 - sum_{k<l} (1 - alpha_k). The lambda recursion always
    bounds the support (submultiplicativity); the atom interpretation is
    valid only while beta stays positive, recorded in `valid_depth`.
    """
    lam = [schedule.q[0]]
    beta = [1.0]
    for ell in range(1, schedule.depth):
        nu = schedule.jacobians[ell - 1]
        lam.append(schedule.q[ell] + schedule.sigma[ell] ** 2 * nu.gamma * lam[-1])
        beta.append(beta[-1] - (1.0 - nu.alpha))
    valid_depth = 0
    for b in beta:
        if b <= 0:
            break
        valid_depth += 1
    if valid_depth < schedule.depth:
        logger.info("atom track invalid beyond layer %d (beta <= 0)", valid_depth)
    return AtomTrack(lam=tuple(lam), beta=tuple(beta), valid_depth=valid_depth)


def _expm1_ratio(x: float) -> float:
    """(1 - exp(-x)) / x with its removable singularity filled at 0."""
    if abs(x) < _SERIES_CUTOFF:
        return 1.0 - x / 2.0 + x * x / 6.0
    return -math.expm1(-x) / x


def asymptotic_max(regime: AsymptoticRegime) -> float:
    """Deep limit of lambda_max / L: q (1 - exp(-eps2)) / eps2."""
    return regime.q * _expm1_ratio(regime.eps2)


def mean_track(schedule: LayerSchedule) -> list:
    """Means m_1(mu_l) by the recursion
    m_1(mu_{l+1}) = q_l + sigma_{l+1}^2 alpha_l gamma_l m_1(mu_l)."""
    means = [schedule.q[0]]
    for ell in range(1, schedule.depth):
        nu = schedule.jacobians[ell - 1]
        means.append(
            schedule.q[ell] + schedule.sigma[ell] ** 2 * nu.alpha * nu.gamma * means[-1]
        )
    return means


def theta_mean_limit(regime: AsymptoticRegime, ratio_alpha: float) -> float:
    """Deep limit of the mean eigenvalue of the block kernel over width:
    ratio * q (1 - exp(-(eps1 + eps2))) / (eps1 + eps2)."""
    if ratio_alpha < 0 or not math.isfinite(ratio_alpha):
        raise ValueError("ratio_alpha must be finite and nonnegative")
    return ratio_alpha * regime.q * _expm1_ratio(regime.eps1 + regime.eps2)


def io_jacobian_stransform(alpha: float, gamma: float, sigma: float, L: int, z):
    """S-transform of the input-output squared-Jacobian spectrum:
    ((1 + (1 - alpha)/(z + alpha)) / (sigma^2 gamma))^(L-1)."""
    z = complex(z)
    if abs(z + alpha) < 1e-12 * (1.0 + abs(alpha)):
        raise ValueError(f"pole at z = {-alpha}")
    factor = (1.0 + (1.0 - alpha) / (z + alpha)) / (sigma**2 * gamma)
    return factor ** (L - 1)


def di_conditions(alpha_L: float, sigma_L: float, gamma_L: float, L: int):
    """Finite-depth isometry deviations (eps1, eps2) =
    (L (1 - alpha), -L log(sigma^2 gamma))."""
    if alpha_L <= 0 or alpha_L > 1 or sigma_L <= 0 or gamma_L <= 0:
        raise ValueError("need alpha in (0, 1] and positive sigma, gamma")
    return L * (1.0 - alpha_L), -L * math.log(sigma_L**2 * gamma_L)
