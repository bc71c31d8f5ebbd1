"""Photoluminescence, photocurrent, spin contrast and quantum efficiencies.

All functions here are pure maps from a (steady) mesh state to scalars, so
they parallelise trivially.  Currents are returned in charge units per
second times cm/V scale factors as written; converting to amperes requires
a user-supplied collection-geometry factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .dynamics import (
    MeshState,
    P1, P2, P3, P4, P5, P6, PX, PNS, PCB, PVB,
    SteadyResult,
    initial_state_for,
    run_to_steady_state,
)
from .model import Mesh, RateSet, SimConfig, build_rate_set


class ObservableError(ValueError):
    """An observable is undefined for the given state (named in the message)."""


@dataclass(frozen=True)
class Lifetimes:
    tau_e: float
    tau_h: float
    tau_e_unbounded: bool = False
    tau_h_unbounded: bool = False


@dataclass(frozen=True)
class Observables:
    """Steady-state observables of one run (one power, one microwave state)."""

    I_f: float                 # photoluminescence rate, photons/s
    G_e: float                 # electron generation rate, 1/s
    G_h: float                 # hole generation rate, 1/s
    tau_e: float               # s (inf when no capture channel exists)
    tau_h: float               # s
    I_e: float
    I_h: float
    I_p: float
    QE_f: float
    QE_p: float
    nv_minus: float            # per-NV probabilities, averaged over NV bins
    nv_zero: float
    singlet: float
    es_total: float
    gs_total: float
    ns_neutral: float          # mean neutral-nitrogen occupancy (nan if no N_s)
    x_occupied: float          # mean acceptor occupancy (nan if no X)
    cb_total: float
    vb_mean: float
    time_to_steady: float
    steady_reached: bool

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def photoluminescence(state: MeshState, rates: RateSet, mesh: Mesh) -> float:
    """Radiative flux out of the NV- excited state, summed over the mesh."""
    nv = np.asarray(mesh.n_nv, dtype=float)
    es = state.populations[:, P3] + state.populations[:, P4]
    return float(rates.k2 * np.sum(nv * es))


def generation_rates(state: MeshState, rates: RateSet, mesh: Mesh):
    """Total ionisation fluxes into the conduction and valence bands."""
    pops = state.populations
    nv = np.asarray(mesh.n_nv, dtype=float)
    ns = np.asarray(mesh.n_ns, dtype=float)
    nx = np.asarray(mesh.n_x, dtype=float)
    g_e = np.sum(nv * rates.ion1 * (pops[:, P3] + pops[:, P4])
                 + ns * rates.ion3 * pops[:, PNS])
    g_h = np.sum(nv * rates.ion2 * pops[:, P6] * pops[:, PVB]
                 + nx * rates.ion4 * (1.0 - pops[:, PX]) * pops[:, PVB])
    return float(g_e), float(g_h)


def carrier_lifetimes(state: MeshState, rates: RateSet, mesh: Mesh) -> Lifetimes:
    """Reciprocal effective capture rates, weighted by where carriers sit.

    Electron capture channels are weighted by the local conduction-band
    content, hole channels by the local hole density; with no carriers
    anywhere the weights fall back to uniform.  A species with no capture
    channel at all gets an unbounded lifetime, reported via a flag rather
    than an overflow.
    """
    pops = state.populations
    nv = np.asarray(mesh.n_nv, dtype=float)
    ns = np.asarray(mesh.n_ns, dtype=float)
    nx = np.asarray(mesh.n_x, dtype=float)

    cap_e = (nv * rates.rec2 * pops[:, P6]
             + ns * rates.rec3 * (1.0 - pops[:, PNS])
             + nx * rates.rec5 * (1.0 - pops[:, PX]))
    b_d, b_e = rates.branch_D, rates.branch_E
    cap_h = (nv * rates.rec1 * (b_d * pops[:, P1] + b_e * pops[:, P2])
             + ns * rates.rec4 * pops[:, PNS]
             + nx * rates.rec6 * pops[:, PX])

    w_e = pops[:, PCB].clip(min=0.0)
    if w_e.sum() <= 0.0:
        w_e = np.ones_like(w_e)
    w_h = (1.0 - pops[:, PVB]).clip(min=0.0)
    if w_h.sum() <= 0.0:
        w_h = np.ones_like(w_h)

    rate_e = float(np.sum(w_e * cap_e) / w_e.sum())
    rate_h = float(np.sum(w_h * cap_h) / w_h.sum())
    return Lifetimes(
        tau_e=(1.0 / rate_e) if rate_e > 0.0 else math.inf,
        tau_h=(1.0 / rate_h) if rate_h > 0.0 else math.inf,
        tau_e_unbounded=rate_e <= 0.0,
        tau_h_unbounded=rate_h <= 0.0,
    )


def photocurrent_analytic(g_e: float, g_h: float, tau_e: float, tau_h: float,
                          transport) -> tuple[float, float, float]:
    """Electron and hole currents from generation, lifetime, mobility, field.

    Exactly linear in the field and in each mobility.  Unbounded lifetimes
    make the corresponding current undefined.
    """
    if not (math.isfinite(tau_e) and math.isfinite(tau_h)):
        raise ObservableError(
            "photocurrent undefined: carrier lifetime is unbounded "
            f"(tau_e={tau_e}, tau_h={tau_h})"
        )
    e = transport.electron_charge
    i_e = e * g_e * tau_e * transport.mu_e * transport.field_E
    i_h = e * g_h * tau_h * transport.mu_h * transport.field_E
    return i_e, i_h, i_e + i_h


def collection_rates(state: MeshState, mesh: Mesh) -> tuple[float, float]:
    """Instantaneous electrode collection rates (electrons/s, holes/s)."""
    from .dynamics import drift_divergence
    _, _, rate_e, rate_h = drift_divergence(state, mesh)
    return rate_e, rate_h


def photocurrent_transport(state: MeshState, mesh: Mesh) -> tuple[float, float, float]:
    """Currents from the steady boundary outflux of the drift scheme."""
    rate_e, rate_h = collection_rates(state, mesh)
    e = mesh.transport.electron_charge
    return e * rate_e, e * rate_h, e * (rate_e + rate_h)


def contrast(i_off: float, i_on: float) -> float:
    """Relative signal drop under resonant microwaves: (off - on) / off."""
    if i_off == 0.0:
        raise ObservableError("contrast undefined: reference signal is zero")
    return (i_off - i_on) / i_off


def quantum_efficiencies(state: MeshState, rates: RateSet, mesh: Mesh):
    """Photon and charge-pair yields per absorbed photon.

    The denominator counts ground-state absorption events plus both
    ionisation fluxes; in the dark it vanishes and the efficiency is
    undefined.
    """
    pops = state.populations
    nv = np.asarray(mesh.n_nv, dtype=float)
    absorbed = rates.k1 * float(np.sum(nv * (pops[:, P1] + pops[:, P2])))
    g_e, g_h = generation_rates(state, rates, mesh)
    denom = absorbed + g_e + g_h
    if denom <= 0.0:
        raise ObservableError("quantum efficiency undefined: no absorption")
    i_f = photoluminescence(state, rates, mesh)
    return i_f / denom, (g_e + g_h) / denom


def _population_summary(state: MeshState, mesh: Mesh) -> dict:
    pops = state.populations
    nv = np.asarray(mesh.n_nv, dtype=float)
    ns = np.asarray(mesh.n_ns, dtype=float)
    nx = np.asarray(mesh.n_x, dtype=float)
    nv_total = nv.sum()
    out = {}
    if nv_total > 0:
        w = nv / nv_total
        out["nv_minus"] = float(np.sum(w * pops[:, [P1, P2, P3, P4, P5]].sum(axis=1)))
        out["nv_zero"] = float(np.sum(w * pops[:, P6]))
        out["singlet"] = float(np.sum(w * pops[:, P5]))
        out["es_total"] = float(np.sum(w * (pops[:, P3] + pops[:, P4])))
        out["gs_total"] = float(np.sum(w * (pops[:, P1] + pops[:, P2])))
    else:
        out.update(nv_minus=0.0, nv_zero=0.0, singlet=0.0, es_total=0.0,
                   gs_total=0.0)
    out["ns_neutral"] = (float(np.sum(ns * pops[:, PNS]) / ns.sum())
                         if ns.sum() > 0 else math.nan)
    out["x_occupied"] = (float(np.sum(nx * pops[:, PX]) / nx.sum())
                         if nx.sum() > 0 else math.nan)
    out["cb_total"] = float(pops[:, PCB].sum())
    out["vb_mean"] = float(pops[:, PVB].mean())
    return out


def observables_from_state(result: SteadyResult, config: SimConfig) -> Observables:
    """Evaluate every observable at a steady state."""
    state = result.state
    mesh = config.mesh
    rates = build_rate_set(config.preset, config.laser_power_mW, config.mw_on)
    i_f = photoluminescence(state, rates, mesh)
    g_e, g_h = generation_rates(state, rates, mesh)
    lifetimes = carrier_lifetimes(state, rates, mesh)
    if config.photocurrent_mode == "transport":
        i_e, i_h, i_p = photocurrent_transport(state, mesh)
    else:
        if lifetimes.tau_e_unbounded or lifetimes.tau_h_unbounded:
            i_e = i_h = i_p = math.nan
        else:
            i_e, i_h, i_p = photocurrent_analytic(
                g_e, g_h, lifetimes.tau_e, lifetimes.tau_h, mesh.transport)
    try:
        qe_f, qe_p = quantum_efficiencies(state, rates, mesh)
    except ObservableError:
        qe_f = qe_p = math.nan
    summary = _population_summary(state, mesh)
    return Observables(
        I_f=i_f, G_e=g_e, G_h=g_h,
        tau_e=lifetimes.tau_e, tau_h=lifetimes.tau_h,
        I_e=i_e, I_h=i_h, I_p=i_p, QE_f=qe_f, QE_p=qe_p,
        time_to_steady=result.time_to_steady,
        steady_reached=result.reached,
        **summary,
    )


def steady_observables(config: SimConfig) -> Observables:
    """Run to steady state and evaluate all observables."""
    result = run_to_steady_state(initial_state_for(config), config)
    return observables_from_state(result, config)


def occupation_change(config: SimConfig) -> dict:
    """Steady occupation differences, microwaves off minus on.

    Returned per species: NV- excited state, NV0 and neutral nitrogen (the
    latter only when the mesh holds nitrogen).  Positive values mirror
    positive spin contrast.
    """
    from dataclasses import replace
    off = steady_observables(replace(config, mw_on=False))
    on = steady_observables(replace(config, mw_on=True))
    out = {
        "nv_minus_es": off.es_total - on.es_total,
        "nv_zero": off.nv_zero - on.nv_zero,
    }
    if config.mesh.total("ns") > 0:
        out["ns_neutral"] = off.ns_neutral - on.ns_neutral
    return out
