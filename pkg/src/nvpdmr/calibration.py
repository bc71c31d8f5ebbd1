"""Power sweeps, contrast-peak location, rate fitting and spectrum fitting."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import least_squares

from .model import (
    ConfigError,
    FITTABLE_PARAMETERS,
    SimConfig,
    apply_parameter_updates,
)
from .observables import Observables, contrast, steady_observables

CURVE_KINDS = ("odmr_contrast", "pdmr_contrast", "pl", "photocurrent")


@dataclass(frozen=True)
class SweepPoint:
    power_mW: float
    mw_off: Observables
    mw_on: Observables
    contrast_odmr: float
    contrast_pdmr: float


@dataclass(frozen=True)
class SweepResult:
    points: tuple[SweepPoint, ...]

    @property
    def powers(self) -> np.ndarray:
        return np.array([p.power_mW for p in self.points])

    def curve(self, kind: str) -> np.ndarray:
        """Observable-versus-power values for one curve kind."""
        if kind == "odmr_contrast":
            return np.array([p.contrast_odmr for p in self.points])
        if kind == "pdmr_contrast":
            return np.array([p.contrast_pdmr for p in self.points])
        if kind == "pl":
            return np.array([p.mw_off.I_f for p in self.points])
        if kind == "photocurrent":
            return np.array([p.mw_off.I_p for p in self.points])
        raise ConfigError(f"unknown curve kind {kind!r}; choose from {CURVE_KINDS}")


@dataclass(frozen=True)
class PeakEstimate:
    power_mW: float
    value: float
    bracketed: bool            # False when the maximum sits on a sweep edge


@dataclass(frozen=True)
class FitResult:
    names: tuple[str, ...]
    values: tuple[float, ...]
    bounds: tuple[tuple[float, float], ...]
    residual_norm: float
    converged: bool
    at_bound: tuple[str, ...]
    n_evaluations: int

    def as_dict(self) -> dict:
        return {
            "parameters": dict(zip(self.names, self.values)),
            "bounds": {n: list(b) for n, b in zip(self.names, self.bounds)},
            "residual_norm": self.residual_norm,
            "converged": self.converged,
            "at_bound": list(self.at_bound),
            "n_evaluations": self.n_evaluations,
        }


@dataclass(frozen=True)
class ExperimentalCurve:
    kind: str                  # one of CURVE_KINDS
    powers_mW: tuple[float, ...]
    values: tuple[float, ...]
    sigmas: tuple[float, ...] | None = None

    def diagnostics(self) -> list[str]:
        out = []
        if self.kind not in CURVE_KINDS:
            out.append(f"unknown curve kind {self.kind!r}")
        if len(self.powers_mW) != len(self.values):
            out.append("powers and values differ in length")
        if any(p <= 0 for p in self.powers_mW):
            out.append("powers must be positive")
        if self.sigmas is not None:
            if len(self.sigmas) != len(self.values):
                out.append("sigmas and values differ in length")
            if any(s <= 0 for s in self.sigmas):
                out.append("uncertainties must be positive")
        return out


def _sweep_point(args) -> SweepPoint:
    config, power = args
    off = steady_observables(replace(config, laser_power_mW=power, mw_on=False))
    on = steady_observables(replace(config, laser_power_mW=power, mw_on=True))
    return SweepPoint(
        power_mW=power, mw_off=off, mw_on=on,
        contrast_odmr=contrast(off.I_f, on.I_f),
        contrast_pdmr=contrast(off.I_p, on.I_p),
    )


def power_sweep(config: SimConfig, powers, workers: int = 1) -> SweepResult:
    """Steady observables and both contrasts at each power, microwaves
    off and on.

    Powers must be strictly increasing.  ``workers > 1`` evaluates the
    independent powers in separate processes; results keep input order and
    are bit-identical to the sequential path.
    """
    powers = [float(p) for p in powers]
    if not powers:
        raise ConfigError("power sweep needs at least one power")
    if any(p <= 0 for p in powers):
        raise ConfigError("sweep powers must be positive")
    if any(b <= a for a, b in zip(powers, powers[1:])):
        raise ConfigError("sweep powers must be strictly increasing")
    jobs = [(config, p) for p in powers]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_sweep_point, jobs))
    else:
        points = [_sweep_point(j) for j in jobs]
    return SweepResult(points=tuple(points))


def find_contrast_max(sweep: SweepResult, kind: str = "pdmr_contrast") -> PeakEstimate:
    """Quadratic interpolation through the discrete maximum and neighbours.

    A maximum on the first or last sweep point cannot be bracketed and is
    returned with ``bracketed=False`` at the grid point itself.
    """
    powers = sweep.powers
    values = sweep.curve(kind)
    if len(powers) < 3:
        raise ConfigError("peak location needs at least three sweep points")
    i = int(np.argmax(values))
    if i == 0 or i == len(values) - 1:
        return PeakEstimate(power_mW=float(powers[i]), value=float(values[i]),
                            bracketed=False)
    x = powers[i - 1: i + 2]
    y = values[i - 1: i + 2]
    denom = (x[0] - x[1]) * (x[0] - x[2]) * (x[1] - x[2])
    a = (x[2] * (y[1] - y[0]) + x[1] * (y[0] - y[2]) + x[0] * (y[2] - y[1])) / denom
    b = (x[2] ** 2 * (y[0] - y[1]) + x[1] ** 2 * (y[2] - y[0])
         + x[0] ** 2 * (y[1] - y[2])) / denom
    if a >= 0.0:   # degenerate (flat or minimum); fall back to the grid point
        return PeakEstimate(power_mW=float(x[1]), value=float(y[1]), bracketed=True)
    p_star = -b / (2.0 * a)
    c = y[1] - a * x[1] ** 2 - b * x[1]
    return PeakEstimate(power_mW=float(p_star),
                        value=float(a * p_star ** 2 + b * p_star + c),
                        bracketed=True)


def _simulated_curve(config: SimConfig, curve: ExperimentalCurve) -> np.ndarray:
    out = np.empty(len(curve.powers_mW))
    for i, power in enumerate(curve.powers_mW):
        run = replace(config, laser_power_mW=power)
        if curve.kind == "odmr_contrast":
            off = steady_observables(replace(run, mw_on=False))
            on = steady_observables(replace(run, mw_on=True))
            out[i] = contrast(off.I_f, on.I_f)
        elif curve.kind == "pdmr_contrast":
            off = steady_observables(replace(run, mw_on=False))
            on = steady_observables(replace(run, mw_on=True))
            out[i] = contrast(off.I_p, on.I_p)
        elif curve.kind == "pl":
            out[i] = steady_observables(run).I_f
        elif curve.kind == "photocurrent":
            out[i] = steady_observables(run).I_p
        else:
            raise ConfigError(f"unknown curve kind {curve.kind!r}")
    return out


def _curve_residuals(sim: np.ndarray, curve: ExperimentalCurve) -> np.ndarray:
    measured = np.asarray(curve.values, dtype=float)
    weights = (1.0 / np.asarray(curve.sigmas, dtype=float)
               if curve.sigmas is not None else np.ones_like(measured))
    if curve.kind in ("pl", "photocurrent"):
        # amplitudes carry arbitrary experimental units; compare shapes by
        # scaling the simulation onto the data with the optimal factor
        w2 = weights ** 2
        denom = float(np.sum(w2 * sim * sim))
        scale = float(np.sum(w2 * sim * measured)) / denom if denom > 0 else 0.0
        sim = scale * sim
    return weights * (sim - measured)


def fit_rates(curves: list[ExperimentalCurve],
              free_params: dict[str, tuple[float, float]],
              config: SimConfig, *, seed: int = 0, n_restarts: int = 0,
              max_nfev: int | None = None) -> FitResult:
    """Bound-constrained least squares of named rates against measured curves.

    Free parameters come from the laser-pumping coefficients, the capture
    rates and the microwave mixing rate; each maps to a ``(lower, upper)``
    bound pair and starts from the value in ``config``.  The trust-region
    solver uses finite-difference gradients, accepts only steps that lower
    the weighted squared residual and is deterministic for a given seed
    (the seed only matters when restarts are requested, which draw
    log-uniform starting points inside the bounds).

    Contrast curves are fitted as-is; photoluminescence and photocurrent
    curves are amplitude-free and fitted after optimal scaling.
    """
    if not curves:
        raise ConfigError("fit needs at least one experimental curve")
    for curve in curves:
        problems = curve.diagnostics()
        if problems:
            raise ConfigError("; ".join(problems))
    for name in free_params:
        if name not in FITTABLE_PARAMETERS:
            raise ConfigError(
                f"{name!r} is not fittable; choose from {FITTABLE_PARAMETERS}"
            )

    names = tuple(free_params)
    evaluations = 0

    def model_residuals(values: dict[str, float]) -> np.ndarray:
        nonlocal evaluations
        evaluations += 1
        preset = apply_parameter_updates(config.preset, values)
        run = replace(config, preset=preset)
        parts = [
            _curve_residuals(_simulated_curve(run, curve), curve)
            for curve in curves
        ]
        return np.concatenate(parts)

    if not names:
        res = model_residuals({})
        return FitResult(names=(), values=(), bounds=(),
                         residual_norm=float(np.linalg.norm(res)),
                         converged=True, at_bound=(), n_evaluations=1)

    lower = np.array([free_params[n][0] for n in names])
    upper = np.array([free_params[n][1] for n in names])
    if np.any(lower <= 0) or np.any(upper <= lower):
        raise ConfigError("fit bounds must satisfy 0 < lower < upper")

    def start_from_config() -> np.ndarray:
        current = {}
        for n in names:
            if hasattr(config.preset.pumping, n):
                current[n] = getattr(config.preset.pumping, n)
            else:
                current[n] = getattr(config.preset.base, n)
        return np.clip(np.array([current[n] for n in names]), lower, upper)

    # fit in log space: the rates span decades and must stay positive
    def residual_vector(log_x: np.ndarray) -> np.ndarray:
        values = dict(zip(names, np.exp(log_x)))
        return model_residuals(values)

    rng = np.random.default_rng(seed)
    starts = [start_from_config()]
    for _ in range(n_restarts):
        starts.append(np.exp(rng.uniform(np.log(lower), np.log(upper))))

    best = None
    for x0 in starts:
        sol = least_squares(residual_vector, np.log(x0),
                            bounds=(np.log(lower), np.log(upper)),
                            method="trf", x_scale="jac",
                            xtol=1e-10, ftol=1e-10, gtol=1e-10,
                            max_nfev=max_nfev)
        if best is None or sol.cost < best.cost:
            best = sol

    values = np.exp(best.x)
    tol = 1e-6
    at_bound = tuple(
        n for n, v, lo, hi in zip(names, values, lower, upper)
        if v <= lo * (1 + tol) or v >= hi * (1 - tol)
    )
    return FitResult(
        names=names,
        values=tuple(float(v) for v in values),
        bounds=tuple((float(lo), float(hi)) for lo, hi in zip(lower, upper)),
        residual_norm=float(np.linalg.norm(best.fun)),
        converged=bool(best.status > 0),
        at_bound=at_bound,
        n_evaluations=evaluations,
    )


@dataclass(frozen=True)
class NsEstimate:
    best_count: int
    scores: dict[int, float]   # candidate count -> weighted residual norm


def estimate_ns_count(pdmr_curve: ExperimentalCurve, config: SimConfig,
                      candidate_counts, workers: int = 1) -> NsEstimate:
    """Pick the nitrogen count whose simulated contrast curve fits best.

    Each candidate rebuilds the mesh with that many nitrogen defects in the
    central bin.  Residuals within +-25% of the measured peak power are
    up-weighted threefold, because the peak position and height carry the
    nitrogen signature.
    """
    from .model import build_mesh
    if pdmr_curve.kind != "pdmr_contrast":
        raise ConfigError("nitrogen estimation expects a pdmr_contrast curve")
    problems = pdmr_curve.diagnostics()
    if problems:
        raise ConfigError("; ".join(problems))
    candidates = [int(c) for c in candidate_counts]
    if any(c < 0 for c in candidates):
        raise ConfigError("candidate counts must be non-negative")

    powers = np.asarray(pdmr_curve.powers_mW)
    values = np.asarray(pdmr_curve.values)
    peak_power = float(powers[int(np.argmax(values))])
    weights = np.where(np.abs(powers - peak_power) <= 0.25 * peak_power, 3.0, 1.0)
    if pdmr_curve.sigmas is not None:
        weights = weights / np.asarray(pdmr_curve.sigmas)

    mesh = config.mesh
    central = mesh.central_bin
    scores: dict[int, float] = {}
    for count in candidates:
        placements = []
        for b in range(mesh.n_bins):
            if mesh.n_nv[b]:
                placements.append((b, "nv", mesh.n_nv[b]))
            if mesh.n_x[b]:
                placements.append((b, "x", mesh.n_x[b]))
        if count:
            placements.append((central, "ns", count))
        candidate_mesh = build_mesh(mesh.transport.gap, mesh.n_bins, placements,
                                    mesh.transport)
        run = replace(config, mesh=candidate_mesh)
        sim = _simulated_curve(run, pdmr_curve)
        scores[count] = float(np.linalg.norm(weights * (sim - values)))
    best = min(scores, key=lambda c: (scores[c], c))
    return NsEstimate(best_count=best, scores=scores)


# ---------------------------------------------------------------------------
# resonance-spectrum fitting

@dataclass(frozen=True)
class ResonanceFit:
    center_MHz: float
    fwhm_MHz: float
    amplitude: float
    baseline: float

    @property
    def contrast(self) -> float:
        return self.amplitude / self.baseline if self.baseline else math.nan


class NoDipError(ValueError):
    """The spectrum shows no resolvable resonance dip."""


def fit_resonance(frequencies_MHz, signal) -> ResonanceFit:
    """Least-squares Gaussian-dip fit of a resonance spectrum.

    Model: baseline - amplitude * exp(-(f - center)^2 / (2 sigma^2)).
    Raises :class:`NoDipError` when the fitted dip is not significant
    against the residual scatter (flat or noise-only input).
    """
    f = np.asarray(frequencies_MHz, dtype=float)
    s = np.asarray(signal, dtype=float)
    if f.size < 5:
        raise ConfigError("resonance fit needs at least five points")
    order = np.argsort(f)
    f, s = f[order], s[order]

    baseline0 = float(np.median(s))
    amp0 = max(baseline0 - float(s.min()), 1e-12 * max(abs(baseline0), 1.0))
    center0 = float(f[int(np.argmin(s))])
    sigma0 = max((f[-1] - f[0]) / 10.0, 1e-9)

    def residuals(params):
        base, amp, center, sigma = params
        return base - amp * np.exp(-0.5 * ((f - center) / sigma) ** 2) - s

    span = f[-1] - f[0]
    sol = least_squares(
        residuals, [baseline0, amp0, center0, sigma0],
        bounds=([-np.inf, 0.0, f[0] - span, 1e-12],
                [np.inf, np.inf, f[-1] + span, 10.0 * max(span, 1e-9)]),
        xtol=1e-14, ftol=1e-14, gtol=1e-14,
    )
    base, amp, center, sigma = sol.x
    scatter = float(np.std(residuals(sol.x)))
    if amp <= 0.0 or amp < 3.0 * scatter:
        raise NoDipError(
            f"no significant dip: amplitude {amp:.3g} vs residual scatter "
            f"{scatter:.3g}"
        )
    if not (f[0] <= center <= f[-1]):
        raise NoDipError(f"fitted dip centre {center:.6g} MHz lies outside the spectrum")
    return ResonanceFit(center_MHz=float(center),
                        fwhm_MHz=float(2.0 * math.sqrt(2.0 * math.log(2.0)) * sigma),
                        amplitude=float(amp), baseline=float(base))


def kmw_sensitivity(config: SimConfig, powers,
                    factors=(0.5, 1.0, 2.0)) -> dict[float, SweepResult]:
    """Contrast curves with the microwave mixing rate scaled by each factor.

    The mixing rate behind a resonant drive is the least constrained input,
    so sweeps can report how strongly the contrasts depend on it.
    """
    out = {}
    for factor in factors:
        preset = apply_parameter_updates(
            config.preset, {"kMW": config.preset.base.kMW * factor})
        out[factor] = power_sweep(replace(config, preset=preset), powers)
    return out


# ---------------------------------------------------------------------------
# CSV interfaces

def load_curve(path, kind: str) -> ExperimentalCurve:
    """Read a measured curve: header ``power_mW,value[,sigma]``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"power_mW", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ConfigError(
                f"{path}: curve CSV must have header power_mW,value[,sigma]"
            )
        has_sigma = "sigma" in reader.fieldnames
        powers, values, sigmas = [], [], []
        for row in reader:
            powers.append(float(row["power_mW"]))
            values.append(float(row["value"]))
            if has_sigma and row["sigma"] not in (None, ""):
                sigmas.append(float(row["sigma"]))
    curve = ExperimentalCurve(
        kind=kind, powers_mW=tuple(powers), values=tuple(values),
        sigmas=tuple(sigmas) if sigmas else None,
    )
    problems = curve.diagnostics()
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return curve


def load_spectrum(path):
    """Read a resonance spectrum: header ``freq_MHz,signal``."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"freq_MHz", "signal"}.issubset(reader.fieldnames):
            raise ConfigError(f"{path}: spectrum CSV must have header freq_MHz,signal")
        freq, signal = [], []
        for row in reader:
            freq.append(float(row["freq_MHz"]))
            signal.append(float(row["signal"]))
    return np.asarray(freq), np.asarray(signal)
