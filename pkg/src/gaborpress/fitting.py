"""Exhaustive grid-search fitting of convolution kernels to Gabor filters.

Every candidate in the cartesian product of the grid's parameter lists is
synthesized and compared to the target kernel; the candidate with the
smallest L2 distance wins.  Enumeration order is fixed and documented:
amplitudes outermost, then centers, thetas, psis, sigmas, lambdas, gammas
innermost.  Ties break toward the lowest candidate index.

The fast path factors the amplitude out of synthesis: every amplitude-free
"base" kernel is synthesized once per (grid, k) and each candidate is
``amplitude * base``.  That product is bitwise identical to synthesizing the
candidate whole, so results match a plain per-candidate brute force exactly,
index and distance both.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InvalidParameterError
from .gabor import GaborParams, synth_bank

UNIT = "unit"
PER_KERNEL_MAX_ABS = "per-kernel-max-abs"

_CHUNK = 8192  # candidate rows per distance batch; bounds peak memory


@dataclass
class FitGrid:
    """The candidate space of one exhaustive search.

    ``amplitude_scale_mode`` "unit" uses amplitudes as listed;
    "per-kernel-max-abs" multiplies them by each target's own max |entry|.
    ``k`` is the kernel side length the centers are laid out for.
    """

    amplitudes: tuple
    centers: tuple          # (x0, y0) pairs
    thetas: tuple
    psis: tuple
    sigmas: tuple
    lambdas: tuple
    gammas: tuple
    k: int
    amplitude_scale_mode: str = UNIT
    _bank: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.amplitudes = tuple(float(v) for v in self.amplitudes)
        self.centers = tuple((float(x), float(y)) for x, y in self.centers)
        self.thetas = tuple(float(v) for v in self.thetas)
        self.psis = tuple(float(v) for v in self.psis)
        self.sigmas = tuple(float(v) for v in self.sigmas)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.gammas = tuple(float(v) for v in self.gammas)
        for name in ("amplitudes", "centers", "thetas", "psis", "sigmas", "lambdas", "gammas"):
            if not getattr(self, name):
                raise InvalidParameterError(f"fit grid field {name} must be non-empty")
        if any(v <= 0 for v in self.sigmas) or any(v <= 0 for v in self.lambdas):
            raise InvalidParameterError("sigmas and lambdas must be positive")
        if self.amplitude_scale_mode not in (UNIT, PER_KERNEL_MAX_ABS):
            raise InvalidParameterError(
                f"unknown amplitude scale mode {self.amplitude_scale_mode!r}"
            )
        if int(self.k) != self.k or self.k < 1:
            raise DimensionError(f"kernel side length must be an integer >= 1, got {self.k!r}")
        self.k = int(self.k)

    @property
    def count(self) -> int:
        """Cartesian-product cardinality of the candidate space."""
        return (
            len(self.amplitudes) * len(self.centers) * len(self.thetas)
            * len(self.psis) * len(self.sigmas) * len(self.lambdas) * len(self.gammas)
        )

    @property
    def base_count(self) -> int:
        """Number of amplitude-free candidates."""
        return self.count // len(self.amplitudes)

    def base_params(self) -> np.ndarray:
        """(base_count, 8) parameter rows with a=1, in enumeration order."""
        cidx = np.arange(len(self.centers))
        C, T, P, S, L, G = np.meshgrid(
            cidx, self.thetas, self.psis, self.sigmas, self.lambdas, self.gammas,
            indexing="ij",
        )
        xs = np.array([c[0] for c in self.centers])
        ys = np.array([c[1] for c in self.centers])
        c = C.ravel()
        return np.column_stack([
            L.ravel(), T.ravel(), P.ravel(), S.ravel(), G.ravel(),
            np.ones(c.size), xs[c], ys[c],
        ])

    def base_bank(self) -> np.ndarray:
        """(base_count, k*k) synthesized amplitude-free kernels, cached."""
        if "bank" not in self._bank:
            p = self.base_params()
            self._bank["params"] = p
            self._bank["bank"] = synth_bank(p, self.k).reshape(len(p), self.k * self.k)
        return self._bank["bank"]

    def candidate_params(self, index: int, amplitude_scale: float = 1.0) -> GaborParams:
        """Decode an enumeration index into its parameter values."""
        if not 0 <= index < self.count:
            raise InvalidParameterError(f"candidate index {index} out of range {self.count}")
        n_b = self.base_count
        ia, ib = divmod(index, n_b)
        dims = (len(self.centers), len(self.thetas), len(self.psis),
                len(self.sigmas), len(self.lambdas), len(self.gammas))
        sub = []
        for d in reversed(dims):
            ib, r = divmod(ib, d)
            sub.append(r)
        ic, it, ip, isg, il, ig = reversed(sub)
        x0, y0 = self.centers[ic]
        return GaborParams(
            lam=self.lambdas[il], theta=self.thetas[it], psi=self.psis[ip],
            sigma=self.sigmas[isg], gamma=self.gammas[ig],
            a=self.amplitudes[ia] * amplitude_scale, x0=x0, y0=y0,
        )


@dataclass
class FitResult:
    """Winning candidate of one kernel fit."""

    params: GaborParams
    l2_distance: float      # Euclidean norm of (target - synthesized kernel)
    candidate_index: int


def default_grid(k: int, amplitude_scale_mode: str = UNIT) -> FitGrid:
    """The standard candidate grid for k x k kernels.

    Amplitudes {-1, -0.5, 0, 0.5, 1}; centers all k^2 integer pairs; theta
    and psi at quarter turns {0, pi/4, pi/2, 3pi/4}; sigma and lambda in
    {1..5}; gamma in {0.2, 0.4, 0.6, 0.8, 1}.
    """
    if int(k) != k or k < 1:
        raise DimensionError(f"kernel side length must be an integer >= 1, got {k!r}")
    k = int(k)
    quarter = tuple(i * np.pi / 4 for i in range(4))
    return FitGrid(
        amplitudes=(-1.0, -0.5, 0.0, 0.5, 1.0),
        centers=tuple((float(x), float(y)) for x in range(1, k + 1) for y in range(1, k + 1)),
        thetas=quarter,
        psis=quarter,
        sigmas=(1.0, 2.0, 3.0, 4.0, 5.0),
        lambdas=(1.0, 2.0, 3.0, 4.0, 5.0),
        gammas=(0.2, 0.4, 0.6, 0.8, 1.0),
        k=k,
        amplitude_scale_mode=amplitude_scale_mode,
    )


def fit_kernel(target: np.ndarray, grid: FitGrid) -> FitResult:
    """Exhaustively search the grid for the L2-nearest Gabor kernel."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != (grid.k, grid.k):
        raise DimensionError(f"target shape {t.shape} does not match grid k={grid.k}")
    if not np.all(np.isfinite(t)):
        raise InvalidParameterError("target kernel must be finite")

    scale = float(np.max(np.abs(t))) if grid.amplitude_scale_mode == PER_KERNEL_MAX_ABS else 1.0
    bank = grid.base_bank()
    n_bases = bank.shape[0]
    tflat = t.ravel()

    best_d2 = np.inf
    best_ia = best_ib = 0
    for ia, a in enumerate(grid.amplitudes):
        amp = a * scale
        for start in range(0, n_bases, _CHUNK):
            chunk = bank[start : start + _CHUNK]
            diff = tflat[None, :] - amp * chunk
            d2 = np.sum(diff * diff, axis=-1)
            j = int(np.argmin(d2))
            # Strict < keeps the earliest index on exact ties.
            if d2[j] < best_d2:
                best_d2 = float(d2[j])
                best_ia, best_ib = ia, start + j

    row = grid._bank["params"][best_ib]
    params = GaborParams(
        lam=row[0], theta=row[1], psi=row[2], sigma=row[3], gamma=row[4],
        a=grid.amplitudes[best_ia] * scale, x0=row[6], y0=row[7],
    )
    return FitResult(
        params=params,
        l2_distance=float(np.sqrt(best_d2)),
        candidate_index=best_ia * n_bases + best_ib,
    )


def fit_layer(weights: np.ndarray, grid: FitGrid, workers: int = 1) -> list:
    """Fit every k x k slice of an (n_out, n_in, k, k) weight tensor.

    Returns a nested list of FitResult preserving (out, in) indexing.  The
    per-kernel fits are independent; any worker count gives identical output.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4:
        raise DimensionError(f"expected 4-d weights (n_out, n_in, k, k), got {w.shape}")
    if w.shape[2] != w.shape[3]:
        raise DimensionError(f"non-square kernels unsupported, got {w.shape}")
    n_out, n_in = w.shape[:2]
    grid.base_bank()  # materialize once, outside any worker

    if workers <= 1:
        return [[fit_kernel(w[o, i], grid) for i in range(n_in)] for o in range(n_out)]
    pairs = [(o, i) for o in range(n_out) for i in range(n_in)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        flat = list(pool.map(lambda oi: fit_kernel(w[oi[0], oi[1]], grid), pairs))
    return [flat[o * n_in : (o + 1) * n_in] for o in range(n_out)]


def params_grid(results: list) -> np.ndarray:
    """(n_out, n_in, 8) float64 parameter array from nested FitResults."""
    return np.stack([np.stack([r.params.as_array() for r in row]) for row in results])


def distance_grid(results: list) -> np.ndarray:
    """(n_out, n_in) float64 L2 distances from nested FitResults."""
    return np.array([[r.l2_distance for r in row] for row in results])
