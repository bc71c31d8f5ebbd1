"""Domain types, rate presets and mesh construction for NV photodynamics.

Units used throughout the package:

* rates                 1/s
* optical pumping       1/(s*mW), multiplied by the laser power in mW
* laser power           mW
* lengths               um (converted to cm where mobilities enter)
* mobilities            cm^2/(V*s)
* electric field        V/cm (signed, positive points from bin 0 to bin N-1)
* time                  s

All types are frozen dataclasses: value data that is safe to share between
concurrent simulation workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources

ELEMENTARY_CHARGE = 1.602176634e-19  # C

#: names of the power-independent entries of a RateSet
_STATIC_RATE_NAMES = (
    "k2", "k3", "k4", "k5", "k6", "kMW",
    "rec1", "rec2", "rec3", "rec4", "rec5", "rec6",
)
_BRANCH_NAMES = ("branch_A", "branch_B", "branch_C", "branch_D", "branch_E")
_PUMPING_NAMES = ("W_k1", "W_ion1_ratio", "W_ion2", "W_ion3", "W_ion4")

#: rate names a calibration run may treat as free parameters
FITTABLE_PARAMETERS = _PUMPING_NAMES + ("rec1", "rec2", "rec3", "rec4", "rec5", "rec6", "kMW")


class ConfigError(ValueError):
    """A configuration violates one of its documented invariants."""


@dataclass(frozen=True)
class RateSet:
    """All transition, ionisation and recombination rates for one run.

    ``k1``..``k6`` are the intra-NV transitions (pumping, radiative decay,
    shelving into and relaxation out of the metastable singlet), ``kMW`` the
    microwave-driven ground-state mixing rate.  ``ion1`` ionises the NV-
    excited state into the conduction band, ``ion2`` converts NV0 back to NV-
    using a valence-band electron, ``ion3`` ionises neutral substitutional
    nitrogen and ``ion4`` lifts a valence electron onto the acceptor level.
    ``rec1``/``rec2`` are the NV hole/electron capture rates, ``rec3``/``rec4``
    the nitrogen electron/hole capture rates and ``rec5``/``rec6`` the same
    for the acceptor.  ``branch_A``..``branch_C`` partition the NV0 -> NV-
    back-conversion flux among ground state m_s=0, m_s=+-1 and the singlet
    (they sum to one); ``branch_D``/``branch_E`` weight hole capture out of
    the two ground-state sublevels.
    """

    k1: float
    k2: float
    k3: float
    k4: float
    k5: float
    k6: float
    kMW: float
    ion1: float
    ion2: float
    ion3: float
    ion4: float
    rec1: float
    rec2: float
    rec3: float
    rec4: float
    rec5: float
    rec6: float
    branch_A: float
    branch_B: float
    branch_C: float
    branch_D: float
    branch_E: float

    def diagnostics(self) -> list[str]:
        """Return one message per violated invariant (empty when valid)."""
        out = []
        for name in ("k1", "ion1", "ion2", "ion3", "ion4") + _STATIC_RATE_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                out.append(f"negative rate: {name} = {value!r}")
        branch_sum = self.branch_A + self.branch_B + self.branch_C
        if abs(branch_sum - 1.0) > 1e-9:
            out.append(
                "branching sum != 1: branch_A+branch_B+branch_C = "
                f"{branch_sum!r}"
            )
        for name in _BRANCH_NAMES:
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                out.append(f"branching coefficient outside [0, 1]: {name} = {value!r}")
        return out


@dataclass(frozen=True)
class OpticalPumping:
    """Linear laser-power-to-rate coefficients.

    ``k1 = W_k1 * P``, ``ion1 = W_ion1_ratio * k1`` and
    ``ion2..ion4 = W_ion2..W_ion4 * P`` with ``P`` in mW.
    """

    W_k1: float
    W_ion1_ratio: float
    W_ion2: float
    W_ion3: float
    W_ion4: float

    def diagnostics(self) -> list[str]:
        out = []
        for name in _PUMPING_NAMES:
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0.0:
                out.append(f"negative pumping coefficient: {name} = {value!r}")
        if not (0.0 <= self.W_ion1_ratio <= 1.0):
            out.append(f"W_ion1_ratio outside [0, 1]: {self.W_ion1_ratio!r}")
        return out


@dataclass(frozen=True)
class RatePreset:
    """Named bundle of a base RateSet (at 1 mW) and its pumping coefficients."""

    name: str
    base: RateSet
    pumping: OpticalPumping
    provenance: str = ""

    def diagnostics(self) -> list[str]:
        return self.base.diagnostics() + self.pumping.diagnostics()


@dataclass(frozen=True)
class TransportParams:
    """Carrier transport parameters of the inter-electrode gap."""

    mu_e: float = 2000.0           # cm^2/(V*s), literature order of magnitude
    mu_h: float = 2000.0           # cm^2/(V*s)
    field_E: float = 1000.0        # V/cm, signed
    electron_charge: float = ELEMENTARY_CHARGE  # C per collected carrier
    gap: float = 5.0               # um

    def diagnostics(self) -> list[str]:
        out = []
        if not (self.mu_e > 0.0):
            out.append(f"mobility must be positive: mu_e = {self.mu_e!r}")
        if not (self.mu_h > 0.0):
            out.append(f"mobility must be positive: mu_h = {self.mu_h!r}")
        if not (self.gap > 0.0):
            out.append(f"gap must be positive: gap = {self.gap!r}")
        if not math.isfinite(self.field_E):
            out.append(f"field must be finite: field_E = {self.field_E!r}")
        return out


@dataclass(frozen=True)
class Mesh:
    """1D discretisation of the gap with per-bin defect counts."""

    n_bins: int
    bin_width: float               # um, equals gap / n_bins
    n_nv: tuple[int, ...]
    n_ns: tuple[int, ...]
    n_x: tuple[int, ...]
    transport: TransportParams

    @property
    def central_bin(self) -> int:
        return self.n_bins // 2

    def diagnostics(self) -> list[str]:
        out = []
        if self.n_bins < 1:
            out.append(f"n_bins must be >= 1: {self.n_bins}")
        if self.n_bins % 2 == 0:
            out.append(f"n_bins must be odd so a central bin exists: {self.n_bins}")
        for name, counts in (("n_nv", self.n_nv), ("n_ns", self.n_ns), ("n_x", self.n_x)):
            if len(counts) != self.n_bins:
                out.append(f"{name} must have one entry per bin")
            if any(c < 0 for c in counts):
                out.append(f"negative defect count in {name}")
        width_sum = self.n_bins * self.bin_width
        gap = self.transport.gap
        if gap > 0 and abs(width_sum - gap) > 1e-9 * gap:
            out.append(
                f"bin widths do not tile the gap: {self.n_bins} * {self.bin_width} != {gap}"
            )
        out.extend(self.transport.diagnostics())
        return out

    def total(self, kind: str) -> int:
        return sum({"nv": self.n_nv, "ns": self.n_ns, "x": self.n_x}[kind])


@dataclass(frozen=True)
class BinState:
    """Occupations of one bin: six NV levels, acceptor, nitrogen and bands.

    ``p1``..``p6`` follow the level diagram (ground m_s=0, ground m_s=+-1,
    excited m_s=0, excited m_s=+-1, singlet, NV0).  ``p7`` is the acceptor
    electron occupancy, ``p8`` the neutral-nitrogen occupancy.  ``p_cb`` is
    the conduction-band electron content of the bin (may exceed 1 when many
    defects feed it) and ``p_vb`` the valence-band electron availability
    (1 = electron available, 0 = hole present).
    """

    p1: float = 0.0
    p2: float = 0.0
    p3: float = 0.0
    p4: float = 0.0
    p5: float = 0.0
    p6: float = 0.0
    p7: float = 0.0
    p8: float = 0.0
    p_cb: float = 0.0
    p_vb: float = 1.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.p1, self.p2, self.p3, self.p4, self.p5, self.p6,
                self.p7, self.p8, self.p_cb, self.p_vb)

    def diagnostics(self) -> list[str]:
        out = []
        for name in ("p1", "p2", "p3", "p4", "p5", "p6", "p7", "p8", "p_vb"):
            value = getattr(self, name)
            if not (-1e-12 <= value <= 1.0 + 1e-12):
                out.append(f"occupation outside [0, 1]: {name} = {value!r}")
        if self.p_cb < -1e-12:
            out.append(f"conduction-band content negative: p_cb = {self.p_cb!r}")
        nv_sum = self.p1 + self.p2 + self.p3 + self.p4 + self.p5 + self.p6
        if nv_sum > 0 and abs(nv_sum - 1.0) > 1e-9:
            out.append(f"NV probabilities do not sum to 1: {nv_sum!r}")
        return out


@dataclass(frozen=True)
class SimConfig:
    """Everything one simulation run needs.

    ``photocurrent_mode`` selects how the photocurrent is obtained:

    * ``"analytic"``: the rate system is integrated without carrier drift
      (a closed reaction volume) and the currents follow from generation
      rate, recombination lifetime, mobility and field.
    * ``"transport"``: carrier drift moves band populations across bins and
      the current is the steady charge-collection rate at the electrodes.

    ``balanced_recombination`` keeps the total NV probability exactly
    conserved by feeding the NV0 gain with the same sublevel weights that
    deplete the ground state.  Setting it to ``False`` restores the
    uncorrected variant (gain from sublevel 1 only), which conserves
    probability only for ``branch_D=1, branch_E=0``.
    """

    preset: RatePreset
    mesh: Mesh
    laser_power_mW: float = 1.0
    mw_on: bool = False
    rtol: float = 1e-8
    atol: float = 1e-10
    steady_rtol: float = 1e-6
    max_time_s: float = 1e-2
    photocurrent_mode: str = "analytic"
    balanced_recombination: bool = True
    ns_hole_scaling: str = "per_bin"   # or "per_ns"
    x_initial_occupancy: float = 0.0


def build_rate_set(preset: RatePreset, laser_power_mW: float, mw_on: bool) -> RateSet:
    """Scale the preset to one laser power and microwave state.

    Photon-driven rates are linear in power; everything else is copied from
    the preset.  The mixing rate is zeroed when the microwave drive is off.
    """
    if not (laser_power_mW >= 0.0) or not math.isfinite(laser_power_mW):
        raise ConfigError(f"laser power must be >= 0 mW, got {laser_power_mW!r}")
    pump = preset.pumping
    k1 = pump.W_k1 * laser_power_mW
    updates = {
        "k1": k1,
        "ion1": pump.W_ion1_ratio * k1,
        "ion2": pump.W_ion2 * laser_power_mW,
        "ion3": pump.W_ion3 * laser_power_mW,
        "ion4": pump.W_ion4 * laser_power_mW,
        "kMW": preset.base.kMW if mw_on else 0.0,
    }
    return replace(preset.base, **updates)


def build_mesh(gap_um: float, n_bins: int,
               placements: list[tuple[int, str, int]],
               transport: TransportParams | None = None) -> Mesh:
    """Assemble a mesh from defect placements ``(bin index, kind, count)``.

    ``kind`` is one of ``"nv"``, ``"ns"``, ``"x"``.  Bins not mentioned stay
    empty.  ``n_bins`` must be odd so the central bin is well defined.
    """
    if transport is None:
        transport = TransportParams(gap=gap_um)
    elif transport.gap != gap_um:
        transport = replace(transport, gap=gap_um)
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    if n_bins % 2 == 0:
        raise ConfigError(f"n_bins must be odd, got {n_bins}")
    counts = {"nv": [0] * n_bins, "ns": [0] * n_bins, "x": [0] * n_bins}
    for bin_index, kind, count in placements:
        if kind not in counts:
            raise ConfigError(f"unknown defect kind {kind!r} (use nv, ns or x)")
        if not (0 <= bin_index < n_bins):
            raise ConfigError(
                f"bin index {bin_index} out of range for {n_bins} bins"
            )
        if count < 0:
            raise ConfigError(f"negative defect count: {count}")
        counts[kind][bin_index] += count
    mesh = Mesh(
        n_bins=n_bins,
        bin_width=gap_um / n_bins,
        n_nv=tuple(counts["nv"]),
        n_ns=tuple(counts["ns"]),
        n_x=tuple(counts["x"]),
        transport=transport,
    )
    problems = mesh.diagnostics()
    if problems:
        raise ConfigError("; ".join(problems))
    return mesh


def refined_mesh(mesh: Mesh, factor: int = 2) -> Mesh:
    """Split every bin into ``factor`` sub-bins (defects go to the first).

    Used for mesh-convergence studies; the refined mesh may have an even
    bin count and is built directly rather than through :func:`build_mesh`.
    """
    if factor < 1:
        raise ConfigError(f"refinement factor must be >= 1, got {factor}")

    def spread(counts):
        out = []
        for c in counts:
            out.append(c)
            out.extend([0] * (factor - 1))
        return tuple(out)

    return Mesh(
        n_bins=mesh.n_bins * factor,
        bin_width=mesh.bin_width / factor,
        n_nv=spread(mesh.n_nv),
        n_ns=spread(mesh.n_ns),
        n_x=spread(mesh.n_x),
        transport=mesh.transport,
    )


def validate_config(config: SimConfig) -> list[str]:
    """Check every type invariant; returns one named diagnostic per violation."""
    out = []
    out.extend(config.preset.diagnostics())
    mesh_problems = [p for p in config.mesh.diagnostics()]
    out.extend(mesh_problems)
    if not (config.laser_power_mW >= 0.0 and math.isfinite(config.laser_power_mW)):
        out.append(f"laser power must be >= 0 mW: {config.laser_power_mW!r}")
    for name in ("rtol", "atol", "steady_rtol"):
        value = getattr(config, name)
        if not (value > 0.0):
            out.append(f"integrator tolerance must be positive: {name} = {value!r}")
    if not (config.max_time_s > 0.0):
        out.append(f"max simulated time must be positive: {config.max_time_s!r}")
    if config.photocurrent_mode not in ("analytic", "transport"):
        out.append(
            "photocurrent_mode must be 'analytic' or 'transport': "
            f"{config.photocurrent_mode!r}"
        )
    if config.ns_hole_scaling not in ("per_bin", "per_ns"):
        out.append(
            f"ns_hole_scaling must be 'per_bin' or 'per_ns': {config.ns_hole_scaling!r}"
        )
    if not (0.0 <= config.x_initial_occupancy <= 1.0):
        out.append(
            f"x_initial_occupancy outside [0, 1]: {config.x_initial_occupancy!r}"
        )
    return out


def require_valid(config: SimConfig) -> SimConfig:
    """Raise ConfigError with all diagnostics if the config is invalid."""
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))
    return config


# ---------------------------------------------------------------------------
# preset loading

def _preset_from_dict(name: str, entry: dict) -> RatePreset:
    base = RateSet(
        k1=entry["pumping"]["W_k1"],
        ion1=entry["pumping"]["W_ion1_ratio"] * entry["pumping"]["W_k1"],
        ion2=entry["pumping"]["W_ion2"],
        ion3=entry["pumping"]["W_ion3"],
        ion4=entry["pumping"]["W_ion4"],
        **{k: entry["rates"][k] for k in _STATIC_RATE_NAMES},
        **{k: entry["rates"][k] for k in _BRANCH_NAMES},
    )
    pumping = OpticalPumping(**entry["pumping"])
    return RatePreset(
        name=name, base=base, pumping=pumping,
        provenance=entry.get("provenance", ""),
    )


def load_presets() -> dict[str, RatePreset]:
    """Load the named presets shipped with the package."""
    text = resources.files("nvpdmr.data").joinpath("presets.json").read_text()
    raw = json.loads(text)
    presets = {}
    for name, entry in raw["presets"].items():
        preset = _preset_from_dict(name, entry)
        problems = preset.diagnostics()
        if problems:
            raise ConfigError(f"preset {name!r} is invalid: " + "; ".join(problems))
        presets[name] = preset
    return presets


def get_preset(name: str) -> RatePreset:
    presets = load_presets()
    if name not in presets:
        raise ConfigError(
            f"unknown preset {name!r}; available: {sorted(presets)}"
        )
    return presets[name]


def preset_with_overrides(preset: RatePreset,
                          rates: dict[str, float] | None = None,
                          pumping: dict[str, float] | None = None) -> RatePreset:
    """Return a copy of ``preset`` with named rate or pumping values replaced."""
    base = preset.base
    pump = preset.pumping
    if rates:
        for key in rates:
            if key not in _STATIC_RATE_NAMES + _BRANCH_NAMES:
                raise ConfigError(f"unknown rate override {key!r}")
        base = replace(base, **rates)
    if pumping:
        for key in pumping:
            if key not in _PUMPING_NAMES:
                raise ConfigError(f"unknown pumping override {key!r}")
        pump = replace(pump, **pumping)
    name = preset.name if not (rates or pumping) else "custom"
    return RatePreset(name=name, base=base, pumping=pump,
                      provenance=preset.provenance)


def apply_parameter_updates(preset: RatePreset, updates: dict[str, float]) -> RatePreset:
    """Apply fit-parameter updates (pumping coefficients, rec rates or kMW)."""
    rates = {}
    pumping = {}
    for key, value in updates.items():
        if key in _PUMPING_NAMES:
            pumping[key] = value
        elif key in ("rec1", "rec2", "rec3", "rec4", "rec5", "rec6", "kMW"):
            rates[key] = value
        else:
            raise ConfigError(
                f"{key!r} is not a fittable parameter; choose from {FITTABLE_PARAMETERS}"
            )
    return preset_with_overrides(preset, rates=rates or None, pumping=pumping or None)


def default_mesh(n_ns: int = 0, n_x: int = 0,
                 transport: TransportParams | None = None,
                 gap_um: float = 5.0, n_bins: int = 11) -> Mesh:
    """Canonical geometry: one NV in the central bin of an 11-bin, 5 um gap.

    Optional nitrogen and acceptor defects share the central bin with the NV.
    """
    placements = [(n_bins // 2, "nv", 1)]
    if n_ns:
        placements.append((n_bins // 2, "ns", n_ns))
    if n_x:
        placements.append((n_bins // 2, "x", n_x))
    return build_mesh(gap_um, n_bins, placements, transport)
