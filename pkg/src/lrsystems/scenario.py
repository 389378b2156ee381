"""Scenario files: schema, system construction, tasks and reports.

A scenario is a YAML mapping.  Every key is checked; unknown keys are
errors, reported with their path (``scenario.integrator.rtol: unknown key``).
See ``scenarios/README.md`` for the schema.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import yaml

from . import neumann as nm
from . import reconstruction as rc
from .algebra import Frame, InertiaSpec, killing_inner, random_frame, restricted_determinants, so_dim, wedge
from .dynamics import (
    BodyState,
    CustomPotential,
    MomentumSystem,
    MultiplierSystem,
    VeselovaFamilyPotential,
    ZeroPotential,
    Veselova3State,
    euler_poisson3_field,
    momentum_from_omega,
    omega_from_momentum,
    euler_poisson3_integrals,
    lr_integrals,
    measure_divergence_residual,
    random_on_constraint_state,
    veselova3_field,
    veselova3_integrals,
    veselova3_log_density,
)
from .integrate import IntegrationError, IntegratorConfig, integrate_flow, reparametrized_integrate, stabilize_state
from .reduced import (
    GeodesicSystem,
    SphereSystem,
    StiefelSystem,
    _random_cotangent,
    chaplygin_pi_residual,
    chaplygin_transform,
    reducing_multiplier,
    sphere_chart_measure_residual,
    sphere_energy,
    sphere_vector_field,
    state_from_velocity,
)


class ScenarioError(ValueError):
    """Invalid scenario; the message starts with the offending key path."""


SYSTEMS = (
    "lr_multiplier",
    "lr_momentum",
    "veselova3",
    "euler_poisson3",
    "reduced_sphere",
    "reduced_stiefel",
    "neumann",
    "geodesic",
    "quadric_geodesic",
)

TASKS = (
    "simulate",
    "verify_integrals",
    "verify_measure",
    "verify_determinants",
    "verify_multiplier",
    "correspond",
    "reconstruct",
    "abel_jacobi",
)

# metric name -> (default tolerance, comparison); ">" metrics are controls that must fail
METRICS = {
    "integral_drift": (1e-8, "<"),
    "constraint": (1e-8, "<"),
    "measure_residual": (1e-5, "<"),
    "measure_control": (1e-3, ">"),
    "determinant_duality": (1e-10, "<"),
    "normalization_spread": (1e-8, "<"),
    "pi_residual": (1e-6, "<"),
    "alpha_residual": (1e-6, "<"),
    "correspondence": (1e-6, "<"),
    "F0": (1e-8, "<"),
    "time_factor": (1e-8, "<"),
    "hamiltonian_drift": (1e-9, "<"),
    "F2_star_drift": (1e-8, "<"),
    "duality": (1e-8, "<"),
    "abel_jacobi": (1e-5, "<"),
    "abel_jacobi_control": (1e-3, ">"),
    "frame_orthogonality": (1e-8, "<"),
    "admissibility": (1e-7, "<"),
    "kinematics": (1e-5, "<"),
    "isospectral": (1e-8, "<"),
    "alpha_c": (1e-6, "<"),
    "linear_integrals": (1e-7, "<"),
    "explicit_frame": (1e-6, "<"),
    "time_chain": (1e-6, "<"),
}

_TOP = {"name", "description", "system", "n", "r", "inertia", "potential", "initial", "integrator", "samples", "tasks", "tolerances"}
_INTEGRATOR = {"method", "horizon", "rel_tol", "abs_tol", "min_step", "max_step", "step", "stabilize_every"}
_TASK_OPTIONS = {
    "simulate": set(),
    "verify_integrals": set(),
    "verify_measure": {"points", "fd_step", "seed"},
    "verify_determinants": {"frames", "seed"},
    "verify_multiplier": {"points", "seed", "n_power"},
    "correspond": {"target", "horizon", "h", "seed", "samples"},
    "reconstruct": {"R_init_seed", "branch_tol"},
    "abel_jacobi": {"branch_tol", "perturb", "h"},
}
_TARGETS = {
    "veselova3": {"neumann", "euler_poisson3"},
    "reduced_sphere": {"neumann", "geodesic"},
    "neumann": {"reduced_sphere"},
    "lr_multiplier": {"lr_momentum"},
    "lr_momentum": {"lr_multiplier"},
    "quadric_geodesic": {"neumann"},
}
_MEASURE_SYSTEMS = {"veselova3", "euler_poisson3", "lr_momentum", "reduced_sphere"}


# ----------------------------------------------------------------------------
# schema


@dataclass
class Task:
    kind: str
    options: dict = field(default_factory=dict)


@dataclass
class Scenario:
    name: str
    system: str
    n: int
    r: int = 1
    inertia: dict = field(default_factory=dict)
    potential: dict = None
    initial: dict = field(default_factory=dict)
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)
    samples: int = 201
    tasks: list = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)
    description: str = ""

    def tolerance(self, metric):
        return self.tolerances.get(metric, METRICS[metric][0])


def _keys(d, allowed, path):
    if not isinstance(d, dict):
        raise ScenarioError(f"{path}: expected a mapping")
    for k in d:
        if k not in allowed:
            raise ScenarioError(f"{path}.{k}: unknown key")


def _num(v, path, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{path}: expected a number, got {v!r}")
    v = float(v)
    if not math.isfinite(v) or (positive and v <= 0):
        raise ScenarioError(f"{path}: expected a {'positive ' if positive else ''}finite number, got {v!r}")
    return v


def _int(v, path, lo=None):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{path}: expected an integer, got {v!r}")
    if lo is not None and v < lo:
        raise ScenarioError(f"{path}: must be >= {lo}, got {v}")
    return v


def _vec(v, path, length=None, positive=False):
    if not isinstance(v, list):
        raise ScenarioError(f"{path}: expected a list")
    out = np.array([_num(x, f"{path}[{i}]", positive) for i, x in enumerate(v)])
    if length is not None and len(out) != length:
        raise ScenarioError(f"{path}: expected {length} entries, got {len(out)}")
    return out


def parse_scenario(data, source="scenario"):
    """Validate a mapping (as loaded from YAML) and return a :class:`Scenario`."""
    p = "scenario"
    _keys(data, _TOP, p)
    for req in ("name", "system", "n", "inertia", "initial", "integrator"):
        if req not in data:
            raise ScenarioError(f"{p}.{req}: required key missing")
    name = data["name"]
    if not isinstance(name, str) or not name or any(c in name for c in "/\\"):
        raise ScenarioError(f"{p}.name: expected a plain string usable as a directory name")
    system = data["system"]
    if system not in SYSTEMS:
        raise ScenarioError(f"{p}.system: unknown system {system!r} (choose from {', '.join(SYSTEMS)})")
    n = _int(data["n"], f"{p}.n", 2)
    r = _int(data.get("r", 1), f"{p}.r", 1)
    if r >= n:
        raise ScenarioError(f"{p}.r: need r < n, got r={r}, n={n}")
    if system in ("veselova3", "euler_poisson3") and n != 3:
        raise ScenarioError(f"{p}.n: {system} needs n = 3")
    if system in ("reduced_sphere", "neumann", "geodesic", "quadric_geodesic") and r != 1:
        raise ScenarioError(f"{p}.r: {system} is an r = 1 system")
    if system.startswith("lr_") or system in ("reduced_sphere", "neumann", "geodesic", "quadric_geodesic"):
        if n < 3:
            raise ScenarioError(f"{p}.n: need n >= 3")

    inertia = _parse_inertia(data["inertia"], system, n, f"{p}.inertia")
    potential = _parse_potential(data.get("potential"), system, f"{p}.potential")
    initial = _parse_initial(data["initial"], system, n, r, f"{p}.initial")
    integ = data["integrator"]
    _keys(integ, _INTEGRATOR, f"{p}.integrator")
    kw = {}
    for k, v in integ.items():
        if k == "method":
            if v not in ("adaptive", "rk4"):
                raise ScenarioError(f"{p}.integrator.method: expected 'adaptive' or 'rk4', got {v!r}")
            kw[k] = v
        elif k == "stabilize_every":
            kw[k] = None if v is None else _int(v, f"{p}.integrator.stabilize_every", 1)
        else:
            kw[k] = _num(v, f"{p}.integrator.{k}", positive=True)
    try:
        config = IntegratorConfig(**kw)
    except ValueError as exc:
        raise ScenarioError(f"{p}.integrator: {exc}") from None
    samples = _int(data.get("samples", 201), f"{p}.samples", 2)

    tasks = []
    for i, t in enumerate(data.get("tasks") or []):
        tp = f"{p}.tasks[{i}]"
        if isinstance(t, str):
            kind, opts = t, {}
        elif isinstance(t, dict) and len(t) == 1:
            kind, opts = next(iter(t.items()))
            opts = opts or {}
        else:
            raise ScenarioError(f"{tp}: expected a task name or a one-key mapping")
        if kind not in TASKS:
            raise ScenarioError(f"{tp}: unknown task {kind!r}")
        _keys(opts, _TASK_OPTIONS[kind], f"{tp}.{kind}")
        _check_task(kind, opts, system, inertia, potential, initial, f"{tp}.{kind}")
        tasks.append(Task(kind, dict(opts)))

    tols = data.get("tolerances") or {}
    _keys(tols, set(METRICS), f"{p}.tolerances")
    tols = {k: _num(v, f"{p}.tolerances.{k}", positive=True) for k, v in tols.items()}
    desc = data.get("description", "")
    if not isinstance(desc, str):
        raise ScenarioError(f"{p}.description: expected a string")
    return Scenario(name, system, n, r, inertia, potential, initial, config, samples, tasks, tols, desc)


def _parse_inertia(d, system, n, path):
    if system == "veselova3":
        _keys(d, {"I"}, path)
        key = "I"
    elif system == "euler_poisson3":
        _keys(d, {"J"}, path)
        key = "J"
    elif system in ("lr_multiplier", "lr_momentum", "reduced_stiefel"):
        _keys(d, {"A", "matrix"}, path)
        if len(d) != 1:
            raise ScenarioError(f"{path}: give exactly one of 'A' (special) or 'matrix' (generic)")
        key = next(iter(d))
    else:
        _keys(d, {"A"}, path)
        key = "A"
    if key not in d:
        raise ScenarioError(f"{path}.{key}: required key missing")
    if key == "matrix":
        rows = d["matrix"]
        m = so_dim(n)
        if not isinstance(rows, list) or len(rows) != m:
            raise ScenarioError(f"{path}.matrix: expected {m} rows for n={n}")
        M = np.array([_vec(row, f"{path}.matrix[{i}]", m) for i, row in enumerate(rows)])
        try:
            InertiaSpec.generic(M, n)
        except ValueError as exc:
            raise ScenarioError(f"{path}.matrix: {exc}") from None
        return {"matrix": M}
    # repeated A_i are fine for simulation; tasks that need spheroconic coordinates check it
    return {key: _vec(d[key], f"{path}.{key}", n, positive=True)}


def _parse_potential(d, system, path):
    if d is None:
        return None
    if system not in ("veselova3", "euler_poisson3"):
        raise ScenarioError(f"{path}: potentials are only supported for veselova3 and euler_poisson3")
    if not isinstance(d, dict) or "kind" not in d:
        raise ScenarioError(f"{path}.kind: required key missing")
    kind = d["kind"]
    if kind == "zero":
        _keys(d, {"kind"}, path)
        return {"kind": "zero"}
    if kind in ("veselova_family", "veselova_dual"):
        _keys(d, {"kind", "alphas"}, path)
        return {"kind": kind, "alphas": _vec(d.get("alphas"), f"{path}.alphas", 5)}
    if kind == "polynomial":
        _keys(d, {"kind", "terms", "dual_terms"}, path)
        out = {"kind": "polynomial", "terms": _terms(d.get("terms"), f"{path}.terms")}
        if "dual_terms" in d:
            out["dual_terms"] = _terms(d["dual_terms"], f"{path}.dual_terms")
        return out
    raise ScenarioError(f"{path}.kind: unknown potential kind {kind!r}")


def _terms(v, path):
    if not isinstance(v, list) or not v:
        raise ScenarioError(f"{path}: expected a nonempty list of {{coef, powers}} mappings")
    out = []
    for i, t in enumerate(v):
        _keys(t, {"coef", "powers"}, f"{path}[{i}]")
        c = _num(t.get("coef"), f"{path}[{i}].coef")
        pw = t.get("powers")
        if not isinstance(pw, list) or len(pw) != 3:
            raise ScenarioError(f"{path}[{i}].powers: expected three exponents")
        out.append((c, tuple(_int(x, f"{path}[{i}].powers[{j}]", 0) for j, x in enumerate(pw))))
    return out


def _parse_initial(d, system, n, r, path):
    _keys(d, {"seed", "energy", "state", "constraint_offset"}, path)
    if ("seed" in d) == ("state" in d):
        raise ScenarioError(f"{path}: give exactly one of 'seed' or 'state'")
    out = {}
    if "seed" in d:
        out["seed"] = _int(d["seed"], f"{path}.seed", 0)
    else:
        out["state"] = _vec(d["state"], f"{path}.state")
    if "energy" in d:
        out["energy"] = _num(d["energy"], f"{path}.energy", positive=True)
    if "constraint_offset" in d:
        if system != "veselova3":
            raise ScenarioError(f"{path}.constraint_offset: only meaningful for veselova3")
        out["constraint_offset"] = _num(d["constraint_offset"], f"{path}.constraint_offset")
    return out


def _check_task(kind, opts, system, inertia, potential, initial, path):
    if kind == "verify_measure" and system not in _MEASURE_SYSTEMS:
        raise ScenarioError(f"{path}: not available for {system}")
    if kind == "verify_determinants" and not system.startswith("lr_"):
        raise ScenarioError(f"{path}: needs an lr_* system")
    if kind == "verify_multiplier" and system != "reduced_sphere":
        raise ScenarioError(f"{path}: needs system reduced_sphere")
    if kind == "reconstruct" and system != "reduced_sphere":
        raise ScenarioError(f"{path}: needs system reduced_sphere")
    if kind == "abel_jacobi" and system not in ("reduced_sphere", "neumann"):
        raise ScenarioError(f"{path}: needs system reduced_sphere or neumann")
    if kind in ("reconstruct", "abel_jacobi") and len(np.unique(inertia["A"])) < len(inertia["A"]):
        raise ScenarioError(f"{path}: spheroconic coordinates need distinct A_i")
    if kind == "correspond":
        target = opts.get("target")
        if target not in _TARGETS.get(system, ()):
            allowed = ", ".join(sorted(_TARGETS.get(system, ()))) or "none"
            raise ScenarioError(f"{path}.target: {target!r} not available for {system} (allowed: {allowed})")
        if system == "veselova3" and target == "neumann":
            if potential and potential["kind"] != "zero":
                raise ScenarioError(f"{path}: the Neumann correspondence needs V = 0")
            if initial.get("constraint_offset"):
                raise ScenarioError(f"{path}: the Neumann correspondence needs an on-constraint state")
        if system == "veselova3" and target == "euler_poisson3":
            if not potential or potential["kind"] not in ("veselova_family", "polynomial"):
                raise ScenarioError(f"{path}: duality needs a veselova_family or polynomial potential")
            if potential["kind"] == "polynomial" and "dual_terms" not in potential:
                raise ScenarioError(f"{path}: a polynomial potential needs dual_terms for the duality check")
        for k in ("horizon", "h"):
            if k in opts:
                _num(opts[k], f"{path}.{k}", positive=True)
    for k in ("points", "frames", "samples"):
        if k in opts:
            _int(opts[k], f"{path}.{k}", 1)
    for k in ("fd_step", "branch_tol", "perturb", "n_power"):
        if k in opts:
            _num(opts[k], f"{path}.{k}", positive=True)


def load_scenario(path):
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"scenario: YAML syntax error: {exc}") from None
    if data is None:
        raise ScenarioError("scenario: empty file")
    return parse_scenario(data, str(path))


# ----------------------------------------------------------------------------
# potentials


class PolynomialPotential(CustomPotential):
    """``V = sum coef * g1^a g2^b g3^c``."""

    def __init__(self, terms):
        self.terms = list(terms)
        super().__init__(self._v, self._g)

    def _v(self, g):
        return sum(c * g[0] ** a * g[1] ** b * g[2] ** e for c, (a, b, e) in self.terms)

    def _g(self, g):
        out = np.zeros(3)
        for c, pw in self.terms:
            for i in range(3):
                if pw[i]:
                    q = list(pw)
                    q[i] -= 1
                    out[i] += c * pw[i] * g[0] ** q[0] * g[1] ** q[1] * g[2] ** q[2]
        return out


def build_potential(scn):
    d = scn.potential
    if d is None or d["kind"] == "zero":
        return ZeroPotential()
    if d["kind"] == "veselova_family":
        return VeselovaFamilyPotential(d["alphas"], scn.inertia["I"])
    if d["kind"] == "veselova_dual":
        return VeselovaFamilyPotential(d["alphas"], 1.0 / scn.inertia["J"]).dual()
    return PolynomialPotential(d["terms"])


def _dual_potential(scn, pot):
    d = scn.potential
    if d["kind"] == "veselova_family":
        return pot.dual()
    return PolynomialPotential(d["dual_terms"])


# ----------------------------------------------------------------------------
# systems as flat fields


class FlatSystem:
    """Uniform wrapper: ``field``, ``layout``, ``diagnostics``, ``energy``,
    ``integrals`` (name -> function of the flat state) and ``stabilizer``."""

    def __init__(self, field, layout, diagnostics, energy, integrals, constraints, stabilizer=None, model=None):
        self.field = field
        self.layout = layout
        self.diagnostics = diagnostics
        self.energy = energy
        self.integrals = integrals
        self.constraints = constraints
        self.stabilizer = stabilizer
        self.model = model


def _spec(scn):
    if "matrix" in scn.inertia:
        return InertiaSpec.generic(scn.inertia["matrix"], scn.n)
    return InertiaSpec.special(scn.inertia["A"])


def build_system(scn):
    s, n, r = scn.system, scn.n, scn.r
    if s == "veselova3":
        I = scn.inertia["I"]
        pot = build_potential(scn)
        f = veselova3_field(I, pot)

        def ints(y):
            return veselova3_integrals(Veselova3State(y[:3], y[3:]), I, pot)

        names = ["F1", "F2"] if isinstance(pot, ZeroPotential) else ["F1"]
        if isinstance(pot, VeselovaFamilyPotential):
            names.append("F_potential")
        off = abs(scn.initial.get("constraint_offset", 0.0)) > 0
        if off:
            names = ["jacobi_painleve", "squared_momentum"]
        integrals = {k: (lambda y, k=k: ints(y)[k]) for k in names}
        integrals["geometric"] = lambda y: ints(y)["geometric"]
        diags = {"constraint": lambda y: y[:3] @ y[3:], "geometric": lambda y: y[3:] @ y[3:] - 1.0}
        return FlatSystem(
            f,
            ["Omega_1", "Omega_2", "Omega_3", "gamma_1", "gamma_2", "gamma_3"],
            diags,
            lambda y: ints(y)["F1"] - pot.value(y[3:]),
            integrals,
            {"constraint": (lambda y: y[:3] @ y[3:], "drift" if off else "abs")},
            model=pot,
        )
    if s == "euler_poisson3":
        J = scn.inertia["J"]
        pot = build_potential(scn)

        def ep_ints(y):
            return euler_poisson3_integrals(Veselova3State(y[:3], y[3:]), J, pot)

        integrals = {k: (lambda y, k=k: ep_ints(y)[k]) for k in ("i1", "i2", "f1")}
        return FlatSystem(
            euler_poisson3_field(J, pot),
            ["Omega_1", "Omega_2", "Omega_3", "gamma_1", "gamma_2", "gamma_3"],
            {"f1": integrals["f1"], "i2": integrals["i2"]},
            lambda y: 0.5 * (J * y[:3]) @ y[:3],
            integrals,
            {},
            model=pot,
        )
    if s in ("lr_multiplier", "lr_momentum"):
        spec = _spec(scn)
        sysm = MultiplierSystem(spec, r) if s == "lr_multiplier" else MomentumSystem(spec, r)
        d = so_dim(n)
        k = n if s == "lr_multiplier" else r
        diags = sysm.diagnostics()

        def integrals_of(y):
            out = lr_integrals(sysm.state(y), spec)
            vals = {"energy": out["energy"], "char_coeffs": np.concatenate([out["char_coeffs"][j] for j in sorted(out["char_coeffs"])])}
            if s == "lr_multiplier" and r == 1:
                vals["linear_l"] = out["linear_l"]
            return vals

        names = ["energy", "char_coeffs"] + (["linear_l"] if s == "lr_multiplier" and r == 1 else [])
        integrals = {nm_: (lambda y, nm_=nm_: integrals_of(y)[nm_]) for nm_ in names}
        cons = {"frame_residual": (diags["frame_residual"], "abs")}
        if s == "lr_multiplier":
            cons["constraint"] = (diags["constraint"], "abs")
        else:
            cons["outside_plane"] = (diags["outside_plane"], "abs")

        def stab(y):
            return np.concatenate([y[:d], stabilize_state(y[d:], "frame_orthonormal", n, k)])

        return FlatSystem(sysm.field, sysm.layout, diags, diags["energy"], integrals, cons, stab, model=sysm)
    if s == "reduced_sphere":
        A = scn.inertia["A"]
        sysm = SphereSystem(A)
        diags = sysm.diagnostics()
        return FlatSystem(
            sysm.field, sysm.layout, diags, diags["energy"], {"energy": diags["energy"]},
            {"sphere": (diags["sphere"], "abs"), "tangency": (diags["tangency"], "abs")},
            lambda y: stabilize_state(y, "sphere_cotangent", n), model=sysm,
        )
    if s == "reduced_stiefel":
        spec = _spec(scn)
        sysm = StiefelSystem(spec, r)
        diags = sysm.diagnostics()
        integrals = {
            "energy": sysm.energy,
            "PtP": lambda y: sysm.invariants(y)[0].ravel(),
            "char_coeffs": lambda y: sysm.invariants(y)[1],
        }
        return FlatSystem(
            sysm.field, sysm.layout, diags, sysm.energy, integrals,
            {"stiefel": (diags["stiefel"], "abs"), "tangency": (diags["tangency"], "abs")},
            lambda y: stabilize_state(y, "stiefel_cotangent", n, r), model=sysm,
        )
    if s == "neumann":
        A = scn.inertia["A"]
        sysm = nm.NeumannSystem(A)
        diags = sysm.diagnostics()

        def energy(y):
            return 0.5 * y[n:] @ y[n:] + 0.5 * y[:n] @ (y[:n] / A)

        integrals = {"energy": energy, "phi_F": lambda y: nm.phi_F_poly(y[:n], y[n:], A)}
        return FlatSystem(
            sysm.field, sysm.layout, diags, energy, integrals,
            {"sphere": (diags["sphere"], "abs"), "tangency": (diags["tangency"], "abs")},
            lambda y: stabilize_state(y, "sphere_cotangent", n), model=sysm,
        )
    if s == "geodesic":
        A = scn.inertia["A"]
        sysm = GeodesicSystem(A)
        diags = sysm.diagnostics()
        integrals = {"H_star": diags["H_star"]}
        if n == 3:
            integrals["F2_star"] = diags["F2_star"]
        return FlatSystem(
            sysm.field, sysm.layout, diags, diags["H_star"], integrals,
            {"sphere": (diags["sphere"], "abs"), "tangency": (diags["tangency"], "abs")},
            lambda y: stabilize_state(y, "sphere_cotangent", n), model=sysm,
        )
    if s == "quadric_geodesic":
        A = scn.inertia["A"]
        sysm = rc.QuadricGeodesicSystem(A)
        diags = sysm.diagnostics()

        def spectrum(y):
            return np.sort(np.linalg.eigvalsh(rc.moser_matrices(y[:n], y[n:], A)[0]))

        return FlatSystem(
            sysm.field, sysm.layout, diags, lambda y: 0.5 * y[n:] @ y[n:], {"moser_spectrum": spectrum},
            {k: (v, "abs") for k, v in diags.items()}, model=sysm,
        )
    raise ScenarioError(f"scenario.system: unknown system {s!r}")


# ----------------------------------------------------------------------------
# initial states


def _rescale(y, vel, energy, target, offset=0.0):
    """Scale the velocity slice so that the (homogeneous quadratic) energy hits ``target``."""
    e = energy(y) - offset
    if e <= 0:
        raise ScenarioError("scenario.initial.energy: the drawn state has no kinetic energy to rescale")
    if target - offset <= 0:
        raise ScenarioError("scenario.initial.energy: target is below the potential energy of the drawn state")
    y = y.copy()
    y[vel] *= math.sqrt((target - offset) / e)
    return y


def random_admissible_state(system, n, r, seed, energy_target=None, inertia=None, potential=None, constraint_offset=0.0):
    """Seeded random initial state satisfying all constraints of ``system``.

    ``inertia`` is the scenario inertia mapping (``A``, ``I``, ``J`` or
    ``matrix``); ``potential`` a :class:`PotentialSpec` for the n = 3
    systems.  The velocity part is rescaled to ``energy_target`` when given.
    """
    rng = np.random.default_rng(seed)
    scn = Scenario("random", system, n, r, inertia or {}, None, {}, IntegratorConfig())
    if system == "veselova3":
        I = inertia["I"]
        g = rng.standard_normal(3)
        g /= np.linalg.norm(g)
        W = rng.standard_normal(3)
        W -= (W @ g) * g
        y = np.concatenate([W, g])
        pot = potential or ZeroPotential()
        if energy_target is not None:
            y = _rescale_with_potential(y, I, pot, energy_target)
        y[:3] += constraint_offset * y[3:]
        return y
    if system == "euler_poisson3":
        J = inertia["J"]
        g = rng.standard_normal(3)
        g /= np.linalg.norm(g)
        W = rng.standard_normal(3)
        W -= ((J * W) @ g) / (g @ g) * g / J  # area integral (J Omega, gamma) = 0
        y = np.concatenate([W, g])
        if energy_target is not None:
            y = _rescale(y, slice(0, 3), lambda z: 0.5 * (J * z[:3]) @ z[:3], energy_target)
        return y
    if system in ("lr_multiplier", "lr_momentum"):
        spec = _spec(scn)
        st = random_on_constraint_state(spec, r, rng)
        if system == "lr_multiplier":
            sysm = MultiplierSystem(spec, r)
            y = sysm.pack(BodyState("velocity", st.matrix, st.frame.complete()))
        else:
            sysm = MomentumSystem(spec, r)
            y = sysm.pack(BodyState("momentum", momentum_from_omega(st.matrix, st.frame, spec), Frame(st.frame.leading, r)))
        if energy_target is not None:
            y = _rescale(y, slice(0, so_dim(n)), sysm.diagnostics()["energy"], energy_target)
        return y
    if system == "reduced_sphere":
        A = inertia["A"]
        q, p = _random_cotangent(n, rng)
        y = np.concatenate([q, p])
        if energy_target is not None:
            y = _rescale(y, slice(n, 2 * n), lambda z: sphere_energy(z[:n], z[n:], A), energy_target)
        return y
    if system == "reduced_stiefel":
        spec = _spec(scn)
        X = random_frame(n, rng).vectors[:r].T
        V = rng.standard_normal((n, r))
        S = X.T @ V
        V = V - X @ (0.5 * (S + S.T))
        st = state_from_velocity(X, V, spec)
        sysm = StiefelSystem(spec, r)
        y = sysm.pack(st)
        if energy_target is not None:
            y = _rescale(y, slice(n * r, 2 * n * r), sysm.energy, energy_target)
        return y
    if system == "neumann":
        # a reduced state mapped to the Neumann flow lands on F0 = 0
        A = inertia["A"]
        q, p = _random_cotangent(n, rng)
        h = sphere_energy(q, p, A) if energy_target is None else energy_target
        if energy_target is not None:
            p *= math.sqrt(energy_target / sphere_energy(q, p, A))
        return np.concatenate(nm.reduced_to_neumann(q, p, A, h))
    if system == "geodesic":
        A = inertia["A"]
        q, p = _random_cotangent(n, rng)
        pt = chaplygin_transform(q, p, A).p_tilde
        y = np.concatenate([q, pt])
        if energy_target is not None:
            y = _rescale(y, slice(n, 2 * n), lambda z: GeodesicSystem(A).diagnostics()["H_star"](z), energy_target)
        return y
    if system == "quadric_geodesic":
        A = inertia["A"]
        q, p = _random_cotangent(n, rng)
        qdot = sphere_vector_field(q, p, A)[0]
        X, gam, _ = rc.sphere_to_quadric(q, qdot, A)
        return np.concatenate([X, gam])
    raise ScenarioError(f"scenario.system: unknown system {system!r}")


def _rescale_with_potential(y, I, pot, target):
    V = pot.value(y[3:])
    return _rescale(y, slice(0, 3), lambda z: 0.5 * (I * z[:3]) @ z[:3] + V, target, V)


def initial_state(scn, sysm):
    init = scn.initial
    if "state" in init:
        y = init["state"]
        if len(y) != len(sysm.layout):
            raise ScenarioError(f"scenario.initial.state: expected {len(sysm.layout)} entries ({', '.join(sysm.layout)})")
        for name, (fn, mode) in sysm.constraints.items():
            if mode == "abs" and abs(fn(y)) > 1e-8:
                raise ScenarioError(f"scenario.initial.state: violates {name} (residual {abs(fn(y)):.2e})")
        return np.array(y, dtype=float)
    return random_admissible_state(
        scn.system, scn.n, scn.r, init["seed"], init.get("energy"), scn.inertia,
        sysm.model if scn.system in ("veselova3", "euler_poisson3") else None,
        init.get("constraint_offset", 0.0),
    )


# ----------------------------------------------------------------------------
# running


@dataclass
class Report:
    scenario: str
    system: str
    metrics: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, scn, metric, value):
        tol, cmp = scn.tolerance(metric), METRICS[metric][1]
        value = float(value)
        ok = math.isfinite(value) and (value < tol if cmp == "<" else value > tol)
        prev = self.metrics.get(metric)
        if prev is not None:
            # repeated metric: keep the worst case
            worse = value > prev["value"] if cmp == "<" else value < prev["value"]
            if not worse and math.isfinite(prev["value"]):
                return
        self.metrics[metric] = {"value": value, "tolerance": tol, "comparison": cmp, "pass": ok}

    @property
    def passed(self):
        return not self.errors and all(m["pass"] for m in self.metrics.values())

    def as_dict(self):
        return _jsonable(
            {
                "scenario": self.scenario,
                "system": self.system,
                "pass": self.passed,
                "metrics": self.metrics,
                "diagnostics_max_abs": self.diagnostics,
                "details": self.extras,
                "errors": self.errors,
            }
        )


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def _drift(values):
    """``max |I(t) - I(0)| / max(|I(0)|, 1)``: relative, absolute for integrals near zero."""
    v = np.asarray(values, dtype=float)
    v = v.reshape(len(v), -1)
    ref = np.max(np.abs(v[0]))
    return float(np.max(np.abs(v - v[0])) / max(ref, 1.0))


def _grid(horizon, samples):
    return np.linspace(0.0, horizon, samples)


def _integrate(field, y0, config, samples, **kw):
    return integrate_flow(field, y0, config, t_eval=_grid(config.horizon, samples), **kw)


@dataclass
class RunResult:
    report: Report
    trajectory: object = None
    frames: object = None


def run(scn):
    """Run all tasks of a validated scenario; never raises for numerical failures."""
    rep = Report(scn.name, scn.system)
    sysm = build_system(scn)
    y0 = initial_state(scn, sysm)
    stab = sysm.stabilizer if scn.integrator.stabilize_every else None
    traj = None
    try:
        traj = _integrate(sysm.field, y0, scn.integrator, scn.samples, diagnostics=sysm.diagnostics, layout=sysm.layout, stabilizer=stab)
    except IntegrationError as exc:
        rep.errors.append(f"integration: {exc}")
        traj = exc.trajectory
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        rep.errors.append(f"integration: {type(exc).__name__}: {exc}")
    if traj is not None and len(traj):
        rep.diagnostics = {k: float(np.max(np.abs(v))) for k, v in traj.diagnostics.items()}
    result = RunResult(rep, traj)
    if rep.errors:
        return result
    for task in scn.tasks:
        try:
            _TASK_RUNNERS[task.kind](scn, sysm, traj, task.options, rep, result)
        except (IntegrationError, nm.DegenerateTorusError, rc.FrameDegeneracyError, ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            rep.errors.append(f"{task.kind}: {type(exc).__name__}: {exc}")
    return result


def _task_simulate(scn, sysm, traj, opts, rep, res):
    rep.extras["final_time"] = float(traj.times[-1])


def _task_integrals(scn, sysm, traj, opts, rep, res):
    drifts = {}
    for name, fn in sysm.integrals.items():
        drifts[name] = _drift([fn(y) for y in traj.states])
    rep.extras["integral_drifts"] = drifts
    if drifts:
        rep.add(scn, "integral_drift", max(drifts.values()))
    worst = 0.0
    for name, (fn, mode) in sysm.constraints.items():
        vals = np.array([fn(y) for y in traj.states])
        worst = max(worst, float(np.max(np.abs(vals - vals[0] if mode == "drift" else vals))))
    if sysm.constraints:
        rep.add(scn, "constraint", worst)


def _measure_points(scn, sysm, rng_seed, k):
    seeds = np.random.SeedSequence(rng_seed).generate_state(k)
    return [
        random_admissible_state(scn.system, scn.n, scn.r, int(s), None, scn.inertia, sysm.model if scn.n == 3 else None)
        for s in seeds
    ]


def _anisotropic(scn):
    for key in ("A", "I", "J"):
        if key in scn.inertia:
            return len(np.unique(scn.inertia[key])) > 1
    return True


def _task_measure(scn, sysm, traj, opts, rep, res):
    k = opts.get("points", 50)
    fd = opts.get("fd_step", 1e-5)
    pts = _measure_points(scn, sysm, opts.get("seed", 0), k)
    zero = lambda y: 0.0  # noqa: E731
    if scn.system == "veselova3":
        logd = veselova3_log_density(scn.inertia["I"])
        good = [measure_divergence_residual(sysm.field, logd, y, fd) for y in pts]
        bad = [measure_divergence_residual(sysm.field, zero, y, fd) for y in pts]
    elif scn.system == "euler_poisson3":
        good = [measure_divergence_residual(sysm.field, zero, y, fd) for y in pts]
        bad = None
    elif scn.system == "lr_momentum":
        good = [measure_divergence_residual(sysm.field, sysm.model.log_density, y, fd) for y in pts]
        bad = [measure_divergence_residual(sysm.field, zero, y, fd) for y in pts]
    else:
        A, n = scn.inertia["A"], scn.n
        good = [sphere_chart_measure_residual(y[:n], y[n:], A, fd_step=fd) for y in pts]
        bad = [sphere_chart_measure_residual(y[:n], y[n:], A, log_density=zero, fd_step=fd) for y in pts]
    good = np.abs(good)
    rep.extras["measure"] = {"max": float(good.max()), "median": float(np.median(good))}
    rep.add(scn, "measure_residual", good.max())
    if bad is not None:
        bad = np.abs(bad)
        rep.extras["measure"]["unit_density_max"] = float(bad.max())
        rep.extras["measure"]["unit_density_median"] = float(np.median(bad))
        if _anisotropic(scn):
            rep.add(scn, "measure_control", bad.max())


def _task_determinants(scn, sysm, traj, opts, rep, res):
    spec = sysm.model.spec
    rng = np.random.default_rng(opts.get("seed", 0))
    det_inv = 1.0 / np.linalg.det(spec.matrix)
    dual, ratios = [], []
    for _ in range(opts.get("frames", 100)):
        fr = random_frame(scn.n, rng, scn.r)
        md = restricted_determinants(spec, fr)
        dual.append(abs(md.mu**2 - det_inv * md.mu_tilde**2) / md.mu**2)
        if md.p_special is not None:
            ratios.append(md.mu_tilde**2 / md.p_special)
    rep.add(scn, "determinant_duality", max(dual))
    if ratios:
        ratios = np.array(ratios)
        rep.add(scn, "normalization_spread", float(np.ptp(ratios) / np.mean(np.abs(ratios))))


def _task_multiplier(scn, sysm, traj, opts, rep, res):
    A, n = scn.inertia["A"], scn.n
    pts = _measure_points(scn, sysm, opts.get("seed", 0), opts.get("points", 50))
    out = [chaplygin_pi_residual(y[:n], y[n:], A, n_power=opts.get("n_power", 1.0)) for y in pts]
    rep.add(scn, "pi_residual", max(o["pi_residual"] for o in out))
    rep.add(scn, "alpha_residual", max(o["alpha_residual"] for o in out))


def _task_correspond(scn, sysm, traj, opts, rep, res):
    target = opts["target"]
    key = (scn.system, target)
    # run against an empty metric table so the per-target values can be kept
    kept, rep.metrics = rep.metrics, {}
    try:
        _CORRESPONDENCES[key](scn, sysm, traj, opts, rep)
    finally:
        fresh, rep.metrics = rep.metrics, kept
    rep.extras.setdefault("correspond", {})[target] = {k: m["value"] for k, m in fresh.items()}
    for k, m in fresh.items():
        rep.add(scn, k, m["value"])


def _veselova_to_neumann(scn, sysm, traj, opts, rep):
    I = scn.inertia["I"]
    A = 1.0 / I
    h = sysm.integrals["F1"](traj.states[0])
    detA = np.prod(A)

    def factor(g):
        return np.sqrt(2 * h * detA / ((A * g) @ g))

    def qprime(y):
        g, W = y[3:], y[:3]
        return np.cross(g, W) / factor(g)

    ode, F0, tf = [], [], []
    for y in traj.states:
        g, W = y[3:], y[:3]
        qp = qprime(y)
        v = sysm.field(y)
        qpp = nm._complex_jvp(qprime, y.astype(complex), v) / factor(g)
        lam = nm.neumann_multiplier(g, qp, A)
        ode.append(np.max(np.abs(qpp + g / A - lam * g)))
        F0.append(abs(nm.neumann_integral_n3(g, qp, A)))
        tfs = nm.time_factors(g, np.cross(g, W), A, h)
        tf.append(abs(tfs["dtau1_dt"] - tfs["dtau1_dt_on_level"]) / tfs["dtau1_dt_on_level"])
    rep.add(scn, "correspondence", max(ode))
    rep.add(scn, "F0", max(F0))
    rep.add(scn, "time_factor", max(tf))


def _sphere_to_neumann(scn, sysm, traj, opts, rep):
    A, n = scn.inertia["A"], scn.n
    h = sysm.energy(traj.states[0])
    ode, F0 = [], []
    for y in traj.states:
        q, p = y[:n], y[n:]
        ode.append(nm.neumann_residual_of_reduced(q, p, A, h))
        F0.append(abs(nm.neumann_F0(*nm.reduced_to_neumann(q, p, A, h), A)))
    rep.add(scn, "correspondence", max(ode))
    rep.add(scn, "F0", max(F0))


def _neumann_to_sphere(scn, sysm, traj, opts, rep):
    A, n = scn.inertia["A"], scn.n
    h = opts.get("h", 1.0)
    res = [nm.reduced_residual_of_neumann(y[:n], y[n:], A, h) for y in traj.states]
    F0 = [abs(nm.neumann_F0(y[:n], y[n:], A)) for y in traj.states]
    rep.add(scn, "correspondence", max(res))
    rep.add(scn, "F0", max(F0))


def _sphere_to_geodesic(scn, sysm, traj, opts, rep):
    A, n = scn.inertia["A"], scn.n
    horizon = opts.get("horizon", 5.0)
    samples = opts.get("samples", 201)
    cfg = IntegratorConfig(**{**scn.integrator.__dict__, "horizon": horizon})
    y0 = traj.states[0]
    tau = _grid(horizon, samples)
    red = reparametrized_integrate(sysm.field, lambda y: 1.0 / reducing_multiplier(y[:n], A), y0, cfg, t_eval=tau)
    mapped = np.array([np.concatenate([y[:n], chaplygin_transform(y[:n], y[n : 2 * n], A).p_tilde]) for y in red.states])
    geo = GeodesicSystem(A)
    g0 = np.concatenate([y0[:n], chaplygin_transform(y0[:n], y0[n:], A).p_tilde])
    gt = integrate_flow(geo.field, g0, cfg, t_eval=tau)
    rep.add(scn, "correspondence", float(np.max(np.abs(mapped - gt.states))))
    H = [geo.diagnostics()["H_star"](y) for y in gt.states]
    rep.add(scn, "hamiltonian_drift", _drift(H))
    if n == 3:
        F2 = [geo.diagnostics()["F2_star"](y) for y in gt.states]
        rep.add(scn, "F2_star_drift", _drift(F2))


def _multiplier_vs_momentum(scn, sysm, traj, opts, rep):
    spec = sysm.model.spec
    r = scn.r
    other = MomentumSystem(spec, r) if scn.system == "lr_multiplier" else MultiplierSystem(spec, r)
    y0 = traj.states[0]
    st = sysm.model.state(y0)
    if scn.system == "lr_multiplier":
        z0 = other.pack(BodyState("momentum", momentum_from_omega(st.matrix, st.frame, spec), Frame(st.frame.leading, r)))
    else:
        omega = omega_from_momentum(st.matrix, st.frame, spec)
        z0 = other.pack(BodyState("velocity", omega, st.frame.complete()))
    cfg = IntegratorConfig(**{**scn.integrator.__dict__, "stabilize_every": None})
    ot = _integrate(other.field, z0, cfg, scn.samples)
    mult, mom = (sysm.model, other) if scn.system == "lr_multiplier" else (other, sysm.model)
    ys_mult, ys_mom = (traj.states, ot.states) if scn.system == "lr_multiplier" else (ot.states, traj.states)
    err = 0.0
    for a, b in zip(ys_mult, ys_mom):
        wa, Ea = mult.unpack(a)
        wb = mom.omega(b)
        Xb = mom.unpack(b)[1]
        err = max(err, float(np.max(np.abs(wa - wb))), float(np.max(np.abs(Ea[:r] - Xb))))
    rep.add(scn, "correspondence", err)


def _veselova_duality(scn, sysm, traj, opts, rep):
    I = scn.inertia["I"]
    pot = sysm.model
    dual = _dual_potential(scn, pot)
    ves = [veselova3_integrals(Veselova3State(y[:3], y[3:]), I)["F2"] + dual.value(y[3:]) for y in traj.states]
    J = 1.0 / I
    z0 = random_admissible_state("euler_poisson3", 3, 1, opts.get("seed", 1), None, {"J": J})
    ep = _integrate(euler_poisson3_field(J, dual), z0, scn.integrator, scn.samples)
    epv = [euler_poisson3_integrals(Veselova3State(y[:3], y[3:]), J, dual)["f2"] + pot.value(y[3:]) for y in ep.states]
    d1, d2 = _drift(ves), _drift(epv)
    rep.extras["duality"] = {"veselova_drift": d1, "euler_poisson_drift": d2}
    rep.add(scn, "duality", max(d1, d2))


def _quadric_to_neumann(scn, sysm, traj, opts, rep):
    A, n = scn.inertia["A"], scn.n
    horizon = opts.get("horizon", 5.0)
    samples = opts.get("samples", 2001)
    cfg = IntegratorConfig(**{**scn.integrator.__dict__, "horizon": horizon})
    tau1 = _grid(horizon, samples)

    def ds_dtau1(y):
        return rc.quadric_to_sphere(y[:n], y[n:], A)[2]

    tr = reparametrized_integrate(sysm.field, ds_dtau1, traj.states[0], cfg, t_eval=tau1)
    qs, qps = [], []
    for y in tr.states:
        q, qp, _ = rc.quadric_to_sphere(y[:n], y[n : 2 * n], A)
        qs.append(q)
        qps.append(qp)
    qs, qps = np.array(qs), np.array(qps)
    d = tau1[1] - tau1[0]
    dq = rc.central_derivative(qs, d)
    dqp = rc.central_derivative(qps, d)
    lam = np.array([nm.neumann_multiplier(q, qp, A) for q, qp in zip(qs, qps)])[2:-2]
    ode = np.abs(dqp + qs[2:-2] / A - lam[:, None] * qs[2:-2])
    rep.add(scn, "correspondence", max(float(np.max(np.abs(dq - qps[2:-2]))), float(np.max(ode))))
    rep.add(scn, "F0", max(abs(nm.neumann_F0(q, qp, A)) for q, qp in zip(qs, qps)))


_CORRESPONDENCES = {
    ("veselova3", "neumann"): _veselova_to_neumann,
    ("veselova3", "euler_poisson3"): _veselova_duality,
    ("reduced_sphere", "neumann"): _sphere_to_neumann,
    ("reduced_sphere", "geodesic"): _sphere_to_geodesic,
    ("neumann", "reduced_sphere"): _neumann_to_sphere,
    ("lr_multiplier", "lr_momentum"): _multiplier_vs_momentum,
    ("lr_momentum", "lr_multiplier"): _multiplier_vs_momentum,
    ("quadric_geodesic", "neumann"): _quadric_to_neumann,
}


def _random_orthogonal(m, seed):
    Q = random_frame(m, np.random.default_rng(seed)).vectors
    return Q


def _neumann_run(scn, y0_reduced, horizon, samples, h=None):
    """Neumann trajectory (uniform tau_1 grid) from a reduced state; returns (traj, constants, h)."""
    A, n = scn.inertia["A"], scn.n
    q, p = y0_reduced[:n], y0_reduced[n:]
    h = sphere_energy(q, p, A) if h is None else h
    q0, qp0 = nm.reduced_to_neumann(q, p, A, h)
    cfg = IntegratorConfig(**{**scn.integrator.__dict__, "horizon": horizon})
    tr = _integrate(nm.NeumannSystem(A).field, np.concatenate([q0, qp0]), cfg, samples)
    inv = nm.neumann_invariants(nm.NeumannState(q0, qp0), A)
    return tr, nm.MotionConstants(h, inv["cs"]), h


def _spheroconic_series(traj, A, n):
    lam, dlam = [], []
    for y in traj.states:
        sp = nm.spheroconic_forward(y[:n], A)
        lam.append(sp.lambdas)
        dlam.append(nm.spheroconic_velocity(y[:n], y[n:], sp.lambdas, A))
    return np.array(lam), np.array(dlam)


def _task_reconstruct(scn, sysm, traj, opts, rep, res):
    A, n = scn.inertia["A"], scn.n
    ts = traj.times
    Q = traj.states[:, :n]
    Qd = np.array([sphere_vector_field(y[:n], y[n:], A)[0] for y in traj.states])
    seed = opts.get("R_init_seed")
    R = None if seed is None else _random_orthogonal(n - 1, seed)
    fr = rc.reconstruct_frame(ts, Q, Qd, A, R)
    res.frames = fr
    good = ~fr.flags
    rep.extras["reconstruct"] = {"flagged_samples": int(fr.flags.sum())}
    orth = max(float(np.max(np.abs(G @ G.T - np.eye(n)))) for G in fr.g)
    dets = max(abs(np.linalg.det(G) - 1.0) for G in fr.g)
    rep.add(scn, "frame_orthogonality", max(orth, dets))
    adm = 0.0
    for G, w in zip(fr.g, fr.omega):
        for a in range(1, n):
            for b in range(a + 1, n):
                adm = max(adm, abs(killing_inner(w, wedge(G[a], G[b]))))
    rep.add(scn, "admissibility", adm)
    dt = np.diff(ts)
    if np.max(np.abs(dt - dt[0])) > 1e-9 * ts[-1]:
        raise ValueError("reconstruction needs uniformly spaced samples")
    gd = rc.central_derivative(fr.g, dt[0])
    rhs = np.einsum("mij,mjk->mik", fr.g, fr.omega)[2:-2]
    inner = good[:-4] & good[1:-3] & good[2:-2] & good[3:-1] & good[4:]
    rep.add(scn, "kinematics", float(np.max(np.abs(gd - rhs)[inner])) if inner.any() else math.nan)
    alphas = fr.alphas[good]
    rep.add(scn, "isospectral", float(np.max(np.ptp(alphas, axis=0))) if n > 3 or alphas.size else 0.0)
    h = sysm.energy(traj.states[0])
    q0, qp0 = nm.reduced_to_neumann(Q[0], traj.states[0, n:], A, h)
    cs = nm.neumann_invariants(nm.NeumannState(q0, qp0), A)["cs"]
    rep.add(scn, "alpha_c", float(np.max(np.abs(np.sort(alphas[0]) * np.sort(cs)[::-1] - 1.0))))
    spec = InertiaSpec.special(A)
    l = rc.linear_integrals(fr, spec)
    rep.add(scn, "linear_integrals", float(np.max(np.ptp(l, axis=0))))

    # explicit formulas against the eigenframe, away from branch points
    mc = nm.MotionConstants(h, cs)
    qps = np.array([nm.mu_h(q, A, h) * qd for q, qd in zip(Q, Qd)])
    bt = opts.get("branch_tol", 1e-3)
    err = 0.0
    for i in range(len(ts)):
        if not good[i]:
            continue
        lam = nm.spheroconic_forward(Q[i], A).lambdas
        if np.min(nm.branch_distance(lam, mc, A)) < bt:
            continue
        dl = nm.spheroconic_velocity(Q[i], qps[i], lam, A)
        m = n - 1
        vand = np.array([np.prod([lam[s] - lam[j] for j in range(m) if j != s]) for s in range(m)])
        base, normals, gam = rc.explicit_frame(lam, np.sign(dl * vand), mc, A)
        G = rc.reconstruct_frame(ts[i : i + 1], Q[i : i + 1], Qd[i : i + 1], A).g[0]
        err = max(err, float(np.max(np.abs(np.abs(base) - np.abs(G[0])))), float(np.max(np.abs(np.abs(gam) - np.abs(G[-1])))))
        # n_k <-> alpha_k = 1 / c_k; eigen rows are sorted by ascending alpha, i.e. descending c
        for k in range(n - 2):
            err = max(err, float(np.max(np.abs(np.abs(normals[k]) - np.abs(G[n - 2 - k])))))
    rep.add(scn, "explicit_frame", err)

    # time chain on a uniform tau_1 grid, cross-checked against the reparametrized t
    T1 = ts[-1]
    m = len(ts) if len(ts) % 2 == 1 else len(ts) + 1
    tau1 = _grid(T1, m)
    cfg = IntegratorConfig(**{**scn.integrator.__dict__, "horizon": T1})
    rt = reparametrized_integrate(sysm.field, lambda y: nm.mu_h(y[:n], A, h), traj.states[0], cfg, t_eval=tau1)
    qn = rt.states[:, :n]
    qpn = np.array([nm.mu_h(y[:n], A, h) * sphere_vector_field(y[:n], y[n : 2 * n], A)[0] for y in rt.states])
    tc = rc.time_chain(tau1, qn, qpn, A, h)
    rep.extras["time_chain"] = {"richardson": tc.richardson, "t_end": float(tc.t[-1]), "s_end": float(tc.s[-1])}
    rep.add(scn, "time_chain", max(float(np.max(np.abs(tc.t_quadrature - tc.t))), float(np.max(np.abs(tc.t_quadrature - rt.u)))))


def _task_abel_jacobi(scn, sysm, traj, opts, rep, res):
    A, n = scn.inertia["A"], scn.n
    bt = opts.get("branch_tol", 1e-3)
    if scn.system == "neumann":
        tr = traj
        y0 = traj.states[0]
        inv = nm.neumann_invariants(nm.NeumannState(y0[:n], y0[n:]), A)
        if abs(inv["F0"]) > 1e-8:
            raise ValueError(f"Abel-Jacobi quadratures need F0 = 0, got {inv['F0']:.2e}")
        mc = nm.MotionConstants(opts.get("h", 1.0), inv["cs"])
    else:
        tr, mc, _ = _neumann_run(scn, traj.states[0], scn.integrator.horizon, scn.samples)
    lam, dlam = _spheroconic_series(tr, A, n)
    r, mask = nm.abel_jacobi_residual(lam, dlam, mc, A, branch_tol=bt)
    rep.extras["abel_jacobi"] = {"samples_used": int(mask.sum()), "samples": int(len(mask))}
    rep.add(scn, "abel_jacobi", float(np.nanmax(np.abs(r))) if mask.any() else math.nan)
    cs = np.array(mc.cs, dtype=float).copy()
    cs[0] += opts.get("perturb", 1e-2)
    r2, m2 = nm.abel_jacobi_residual(lam, dlam, nm.MotionConstants(mc.h, cs), A, branch_tol=bt)
    per_sample = np.nanmax(np.abs(r2[m2]), axis=1) if m2.any() else np.array([math.nan])
    rep.add(scn, "abel_jacobi_control", float(np.median(per_sample)))


_TASK_RUNNERS = {
    "simulate": _task_simulate,
    "verify_integrals": _task_integrals,
    "verify_measure": _task_measure,
    "verify_determinants": _task_determinants,
    "verify_multiplier": _task_multiplier,
    "correspond": _task_correspond,
    "reconstruct": _task_reconstruct,
    "abel_jacobi": _task_abel_jacobi,
}


__all__ = [
    "METRICS",
    "Report",
    "RunResult",
    "SYSTEMS",
    "Scenario",
    "ScenarioError",
    "TASKS",
    "build_system",
    "load_scenario",
    "parse_scenario",
    "random_admissible_state",
    "run",
]
