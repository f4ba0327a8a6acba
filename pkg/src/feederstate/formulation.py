"""One iteration's MIQP: variables, linearized physics, outage logic, WLS.

Conventions
-----------
Every line carries one rectangular current variable pair per present
phase *and per end*: direction 0 sends from the from-bus, direction 1
from the to-bus.  Each direction satisfies its own sending-end current
definition, so a bus injection is the plain sum of the own-direction
currents of its incident lines and the symmetric pi shunt model is
recovered exactly.

Line rows are emitted in multiplied (residual) form — the self-
resistance stays as a coefficient on the current instead of dividing
the bracket — which is algebraically identical for R > 0 and better
scaled.  The shunt blocks are pure susceptance, so the scalar y
appearing in the real/imaginary splits is the imaginary part of the
complex shunt entry.

For a switched line the current definition holds only when the phase
status u is 1; the big-M activation rows keep the bracket F linear by
routing every binary-continuous product through auxiliary variables:

    d_k  ~ u_k * Vr_send_k,  d'_k ~ u_k * Vim_send_k
    E_(phi,p) ~ u_p * (Ir_p + 1/2 sum_{k in {phi,p}} b_pk Vim_send_k)
    H_(p,k) ~ B_(p,k) * 1/2 b_pk Vr_send_k   with  B_(p,k) ~ u_p u_k

E/E' depend on the row phase phi as well as p (the inner sum runs over
k in {phi, p}), and H/H' on the ordered pair (p, k); both are therefore
indexed by ordered phase pairs.  Activation-row big-M values are left
unscaled by the self-resistance so the open-branch slack stays large.

The bilinear power balance is replaced by its first-order Taylor
expansion around the previous iteration's voltages and injection
currents; with a flat start and zero injection currents the active-power
row degenerates to P = V0 . I.

A fully-switched three-phase line contributes 3 status binaries, 3 pair
binaries, and (with outage detection) 12 current-indicator binaries:
18 total.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .measurements import SIGMA_FLOOR, MeasurementSet
from .network import Device, LineSegment, Network, energized_set

V_BOUND = 2.0     # |Vr|, |Vim| variable bound, p.u.
I_BOUND = 5.0     # current and device-power variable bound, p.u.


class FormulationError(ValueError):
    pass


@dataclass(frozen=True)
class BigMConfig:
    """Big-M constants and the dead-zone current threshold.

    ``theta`` must separate the largest current a switch can carry into a
    fully de-energized region (pure line charging, about 1e-3 p.u. on the
    shipped corpus) from the smallest current a genuinely loaded switch
    carries (about 1.8e-2 p.u.); otherwise charging flows justify a
    closed reading into a dead island and outages become undetectable.
    """

    M: float = 10.0
    theta: float = 5e-3
    lam: float = 10.0

    def __post_init__(self):
        if not (0 < self.theta < self.lam):
            raise ValueError("require 0 < theta << lambda")
        if self.M <= V_BOUND:
            raise ValueError("M must exceed the voltage variable bound")


@dataclass
class LinearizationPoint:
    """Previous-iteration voltages and injection currents per bus-phase."""

    vr: dict[tuple[str, int], float]
    vi: dict[tuple[str, int], float]
    inr: dict[tuple[str, int], float]
    ini: dict[tuple[str, int], float]

    def check_finite(self):
        for d in (self.vr, self.vi, self.inr, self.ini):
            for k, v in d.items():
                if not math.isfinite(v):
                    raise FormulationError(f"non-finite linearization entry at {k}")


class VariableTable:
    """Index map from structured keys to column indices."""

    def __init__(self):
        self.names: list[tuple] = []
        self.index: dict[tuple, int] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.binaries: list[int] = []

    def add(self, key: tuple, lb: float, ub: float, binary: bool = False) -> int:
        if key in self.index:
            raise FormulationError(f"duplicate variable {key}")
        j = len(self.names)
        self.names.append(key)
        self.index[key] = j
        self.lb.append(lb)
        self.ub.append(ub)
        if binary:
            self.binaries.append(j)
        return j

    def __getitem__(self, key: tuple) -> int:
        return self.index[key]

    def __contains__(self, key: tuple) -> bool:
        return key in self.index

    def __len__(self) -> int:
        return len(self.names)


@dataclass
class QPModel:
    """Immutable convex QP with a binary index set."""

    variables: VariableTable
    A: sp.csc_matrix            # constraint rows only (no variable bounds)
    row_l: np.ndarray
    row_u: np.ndarray
    row_tags: list[str]
    p_diag: np.ndarray          # quadratic diagonal (1/2 x'Px convention)
    q: np.ndarray
    const: float
    binary_idx: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.variables)

    def var_lb(self) -> np.ndarray:
        return np.asarray(self.variables.lb, dtype=float)

    def var_ub(self) -> np.ndarray:
        return np.asarray(self.variables.ub, dtype=float)

    def objective_value(self, x: np.ndarray) -> float:
        """WLS objective evaluated term-wise (cancellation-free)."""
        terms = self.meta.get("objective_terms")
        if terms is None:
            return float(0.5 * x @ (self.p_diag * x) + self.q @ x + self.const)
        return float(sum((w * (x[j] - t)) ** 2 for j, w, t in terms))

    def max_violation(self, x: np.ndarray) -> float:
        ax = self.A @ x
        over = np.maximum(ax - self.row_u, 0.0)
        under = np.maximum(self.row_l - ax, 0.0)
        vb = np.maximum(x - self.var_ub(), 0.0) + np.maximum(self.var_lb() - x, 0.0)
        return float(max(over.max(initial=0), under.max(initial=0), vb.max(initial=0)))

    def dump(self) -> str:
        """Sparse text form: variables, rows, objective, binaries."""
        out = ["# variables (index name lb ub)"]
        for j, name in enumerate(self.variables.names):
            out.append(f"v {j} {name!r} {self.variables.lb[j]!r} {self.variables.ub[j]!r}")
        out.append("# rows (tag : l <= coeffs <= u)")
        acsr = self.A.tocsr()
        for i in range(acsr.shape[0]):
            s, e = acsr.indptr[i], acsr.indptr[i + 1]
            terms = " ".join(f"{acsr.data[k]!r}*x{acsr.indices[k]}" for k in range(s, e))
            out.append(f"r {self.row_tags[i]} : {self.row_l[i]!r} <= {terms} <= {self.row_u[i]!r}")
        out.append("# objective 1/2 sum p_j x_j^2 + sum q_j x_j + c")
        nz = np.flatnonzero(self.p_diag)
        out.append("p " + " ".join(f"{j}:{self.p_diag[j]!r}" for j in nz))
        nz = np.flatnonzero(self.q)
        out.append("q " + " ".join(f"{j}:{self.q[j]!r}" for j in nz))
        out.append(f"c {self.const!r}")
        out.append("b " + " ".join(str(j) for j in self.binary_idx))
        return "\n".join(out) + "\n"


class ModelBuilder:
    def __init__(self, net: Network):
        self.net = net
        self.vt = VariableTable()
        self.rows_i: list[int] = []
        self.rows_j: list[int] = []
        self.rows_v: list[float] = []
        self.row_l: list[float] = []
        self.row_u: list[float] = []
        self.row_tags: list[str] = []
        self.p_diag: dict[int, float] = {}
        self.q: dict[int, float] = {}
        self.const = 0.0
        self.obj_terms: list[tuple[int, float, float]] = []

    def add_row(self, coeffs: dict[int, float], l: float, u: float, tag: str):
        i = len(self.row_l)
        for j, c in coeffs.items():
            if c != 0.0:
                self.rows_i.append(i)
                self.rows_j.append(j)
                self.rows_v.append(float(c))
        self.row_l.append(l)
        self.row_u.append(u)
        self.row_tags.append(tag)

    def add_sq_term(self, j: int, weight: float, target: float):
        """Objective term weight^2 (x_j - target)^2."""
        w2 = weight * weight
        self.p_diag[j] = self.p_diag.get(j, 0.0) + 2.0 * w2
        self.q[j] = self.q.get(j, 0.0) - 2.0 * w2 * target
        self.const += w2 * target * target
        self.obj_terms.append((j, weight, target))

    def finish(self, binary_idx, meta) -> QPModel:
        n = len(self.vt)
        m = len(self.row_l)
        A = sp.coo_matrix((self.rows_v, (self.rows_i, self.rows_j)),
                          shape=(m, n)).tocsc()
        p = np.zeros(n)
        for j, v in self.p_diag.items():
            p[j] = v
        q = np.zeros(n)
        for j, v in self.q.items():
            q[j] = v
        return QPModel(variables=self.vt, A=A,
                       row_l=np.asarray(self.row_l), row_u=np.asarray(self.row_u),
                       row_tags=self.row_tags, p_diag=p, q=q, const=self.const,
                       binary_idx=tuple(sorted(binary_idx)), meta=meta)


# -- variable allocation ---------------------------------------------------

def _alloc_continuous(b: ModelBuilder):
    net, vt = b.net, b.vt
    for bus, ph in net.bus_phases():
        vt.add(("vr", bus, ph), -V_BOUND, V_BOUND)
        vt.add(("vi", bus, ph), -V_BOUND, V_BOUND)
        vt.add(("inr", bus, ph), -I_BOUND, I_BOUND)
        vt.add(("ini", bus, ph), -I_BOUND, I_BOUND)
    for lid in net.line_order:
        ln = net.lines[lid]
        for dr in (0, 1):
            for ph in ln.present():
                vt.add(("ir", lid, ph, dr), -I_BOUND, I_BOUND)
                vt.add(("ii", lid, ph, dr), -I_BOUND, I_BOUND)
    for did in net.device_order:
        dev = net.devices[did]
        for ph in range(3):
            if not dev.phases[ph]:
                continue
            if dev.kind == "load":
                vt.add(("dp", did, ph), -I_BOUND, I_BOUND)
                vt.add(("dq", did, ph), -I_BOUND, I_BOUND)
            elif dev.kind == "der":
                vt.add(("pg", did, ph), -I_BOUND, I_BOUND)
                vt.add(("qg", did, ph), -I_BOUND, I_BOUND)
            elif dev.kind == "capacitor":
                vt.add(("qc", did, ph), -I_BOUND, I_BOUND)
    for ph in range(3):
        if net.buses[net.slack].phases[ph]:
            vt.add(("ps", net.slack, ph), -I_BOUND, I_BOUND)
            vt.add(("qs", net.slack, ph), -I_BOUND, I_BOUND)


def _alloc_switch_variables(b: ModelBuilder, outage_detection: bool):
    """Status/pair binaries and big-M auxiliaries for switched lines."""
    net, vt = b.net, b.vt
    for lid in net.line_order:
        ln = net.lines[lid]
        if not ln.has_switch:
            continue
        pres = ln.present()
        for ph in pres:
            if ln.switch[ph]:
                vt.add(("u", lid, ph), 0.0, 1.0, binary=True)
            else:
                vt.add(("u", lid, ph), 1.0, 1.0)  # hard-wired phase
        for a in range(len(pres)):
            for bph in range(a + 1, len(pres)):
                p, k = pres[a], pres[bph]
                both_fixed = not (ln.switch[p] or ln.switch[k])
                if both_fixed:
                    vt.add(("B", lid, p, k), 1.0, 1.0)
                else:
                    vt.add(("B", lid, p, k), 0.0, 1.0, binary=True)
        for dr in (0, 1):
            for k in pres:
                vt.add(("d", lid, k, dr), -V_BOUND, V_BOUND)
                vt.add(("d'", lid, k, dr), -V_BOUND, V_BOUND)
            for phi in pres:
                for p in pres:
                    if p != phi:
                        vt.add(("E", lid, phi, p, dr), -2 * I_BOUND, 2 * I_BOUND)
                        vt.add(("E'", lid, phi, p, dr), -2 * I_BOUND, 2 * I_BOUND)
            if len(pres) == 3:
                for p in pres:
                    for k in pres:
                        if k != p:
                            vt.add(("H", lid, p, k, dr), -V_BOUND, V_BOUND)
                            vt.add(("H'", lid, p, k, dr), -V_BOUND, V_BOUND)
        if outage_detection:
            for ph in pres:
                if ln.switch[ph]:
                    for nm in ("alpha", "beta", "gamma", "mu"):
                        vt.add((nm, lid, ph), 0.0, 1.0, binary=True)


# -- plain line rows -------------------------------------------------------

def _line_ends(ln: LineSegment, dr: int) -> tuple[str, str]:
    return (ln.from_bus, ln.to_bus) if dr == 0 else (ln.to_bus, ln.from_bus)


def add_unswitched_line(b: ModelBuilder, ln: LineSegment,
                        closed: list[int] | None = None):
    """Current-definition equality rows, both directions, multiplied form.

    Term-by-term scalar expansion of the real/imaginary current split for
    a line without switches, with the self-resistance multiplied through.
    When ``closed`` restricts the phase set, the rows are those of the
    line's sub-block on the closed phases (an open phase carries no
    current and contributes no coupling).
    """
    vt = b.vt
    r = ln.z.entries.real
    x = ln.z.entries.imag
    bb = ln.y.entries.imag
    pres = ln.present() if closed is None else list(closed)
    for dr in (0, 1):
        n, m = _line_ends(ln, dr)
        for phi in pres:
            cr: dict[int, float] = {}
            ci: dict[int, float] = {}

            def acc(row, key, c):
                j = vt[key]
                row[j] = row.get(j, 0.0) + c

            # real row: R_pp*Ir_phi - [bracket] = 0
            acc(cr, ("ir", ln.id, phi, dr), r[phi, phi])
            acc(cr, ("vr", n, phi), -1.0)
            acc(cr, ("vr", m, phi), 1.0)
            acc(cr, ("ii", ln.id, phi, dr), -x[phi, phi])
            acc(cr, ("vi", n, phi), 0.5 * bb[phi, phi] * r[phi, phi])
            acc(cr, ("vr", n, phi), 0.5 * bb[phi, phi] * x[phi, phi])
            for k in pres:
                if k != phi:
                    acc(cr, ("vi", n, k), 0.5 * bb[phi, k] * r[phi, phi])
                    acc(cr, ("vr", n, k), 0.5 * bb[phi, k] * x[phi, phi])
            for p in pres:
                if p == phi:
                    continue
                acc(cr, ("ir", ln.id, p, dr), r[phi, p])
                acc(cr, ("ii", ln.id, p, dr), -x[phi, p])
                for k in pres:
                    acc(cr, ("vi", n, k), 0.5 * r[phi, p] * bb[p, k])
                    acc(cr, ("vr", n, k), 0.5 * x[phi, p] * bb[p, k])

            # imaginary row
            acc(ci, ("ii", ln.id, phi, dr), r[phi, phi])
            acc(ci, ("vi", n, phi), -1.0)
            acc(ci, ("vi", m, phi), 1.0)
            acc(ci, ("ir", ln.id, phi, dr), x[phi, phi])
            acc(ci, ("vr", n, phi), -0.5 * bb[phi, phi] * r[phi, phi])
            acc(ci, ("vi", n, phi), 0.5 * bb[phi, phi] * x[phi, phi])
            for k in pres:
                if k != phi:
                    acc(ci, ("vr", n, k), -0.5 * bb[phi, k] * r[phi, phi])
                    acc(ci, ("vi", n, k), 0.5 * bb[phi, k] * x[phi, phi])
            for p in pres:
                if p == phi:
                    continue
                acc(ci, ("ii", ln.id, p, dr), r[phi, p])
                acc(ci, ("ir", ln.id, p, dr), x[phi, p])
                for k in pres:
                    acc(ci, ("vr", n, k), -0.5 * r[phi, p] * bb[p, k])
                    acc(ci, ("vi", n, k), 0.5 * x[phi, p] * bb[p, k])

            b.add_row(cr, 0.0, 0.0, f"kvl_r:{ln.id}:{phi}:{dr}")
            b.add_row(ci, 0.0, 0.0, f"kvl_i:{ln.id}:{phi}:{dr}")


# -- switched line rows ----------------------------------------------------

def _bigm_pair(b: ModelBuilder, expr: dict[int, float], aux_j: int,
               gate_j: int, M: float, tag: str):
    """Rows forcing aux = expr when gate = 1 and aux = 0 when gate = 0."""
    # aux - expr <= M (1 - gate)  and  aux - expr >= -M (1 - gate)
    row = {aux_j: 1.0}
    for j, c in expr.items():
        row[j] = row.get(j, 0.0) - c
    hi = dict(row)
    hi[gate_j] = hi.get(gate_j, 0.0) + M
    b.add_row(hi, -np.inf, M, tag + ":on_hi")
    lo = dict(row)
    lo[gate_j] = lo.get(gate_j, 0.0) - M
    b.add_row(lo, -M, np.inf, tag + ":on_lo")
    # |aux| <= M gate
    b.add_row({aux_j: 1.0, gate_j: -M}, -np.inf, 0.0, tag + ":off_hi")
    b.add_row({aux_j: 1.0, gate_j: M}, 0.0, np.inf, tag + ":off_lo")


def add_switched_line(b: ModelBuilder, ln: LineSegment, cfg: BigMConfig):
    """Auxiliary definitions and activation rows for a switched line."""
    vt = b.vt
    M = cfg.M
    r = ln.z.entries.real
    x = ln.z.entries.imag
    bb = ln.y.entries.imag
    pres = ln.present()

    def u(ph):
        return vt[("u", ln.id, ph)]

    # pair-binary logic
    for a in range(len(pres)):
        for c in range(a + 1, len(pres)):
            p, k = pres[a], pres[c]
            Bj = vt[("B", ln.id, p, k)]
            b.add_row({Bj: 1.0, u(p): -1.0}, -np.inf, 0.0, f"pair_le_p:{ln.id}:{p}{k}")
            b.add_row({Bj: 1.0, u(k): -1.0}, -np.inf, 0.0, f"pair_le_k:{ln.id}:{p}{k}")
            b.add_row({Bj: 1.0, u(p): -1.0, u(k): -1.0}, -1.0, np.inf,
                      f"pair_ge:{ln.id}:{p}{k}")

    for dr in (0, 1):
        n, m = _line_ends(ln, dr)

        # d_k ~ u_k Vr_n_k ; d'_k ~ u_k Vim_n_k
        for k in pres:
            _bigm_pair(b, {vt[("vr", n, k)]: 1.0}, vt[("d", ln.id, k, dr)],
                       u(k), M, f"d:{ln.id}:{k}:{dr}")
            _bigm_pair(b, {vt[("vi", n, k)]: 1.0}, vt[("d'", ln.id, k, dr)],
                       u(k), M, f"d':{ln.id}:{k}:{dr}")

        # E_(phi,p) ~ u_p (Ir_p + 1/2 sum_{k in {phi,p}} b_pk Vim_n_k)
        for phi in pres:
            for p in pres:
                if p == phi:
                    continue
                ze = {vt[("ir", ln.id, p, dr)]: 1.0}
                zep = {vt[("ii", ln.id, p, dr)]: 1.0}
                for k in (phi, p):
                    ze[vt[("vi", n, k)]] = ze.get(vt[("vi", n, k)], 0.0) + 0.5 * bb[p, k]
                    zep[vt[("vr", n, k)]] = zep.get(vt[("vr", n, k)], 0.0) - 0.5 * bb[p, k]
                _bigm_pair(b, ze, vt[("E", ln.id, phi, p, dr)], u(p), M,
                           f"E:{ln.id}:{phi}{p}:{dr}")
                _bigm_pair(b, zep, vt[("E'", ln.id, phi, p, dr)], u(p), M,
                           f"E':{ln.id}:{phi}{p}:{dr}")

        # H_(p,k) ~ B_(p,k) 1/2 b_pk Vr_n_k
        if len(pres) == 3:
            for p in pres:
                for k in pres:
                    if k == p:
                        continue
                    Bj = vt[("B", ln.id, min(p, k), max(p, k))]
                    _bigm_pair(b, {vt[("vr", n, k)]: 0.5 * bb[p, k]},
                               vt[("H", ln.id, p, k, dr)], Bj, M,
                               f"H:{ln.id}:{p}{k}:{dr}")
                    _bigm_pair(b, {vt[("vi", n, k)]: 0.5 * bb[p, k]},
                               vt[("H'", ln.id, p, k, dr)], Bj, M,
                               f"H':{ln.id}:{p}{k}:{dr}")

        # activation rows: R_pp Ir_phi - F_phi within +/- M (1 - u_phi)
        for phi in pres:
            fr: dict[int, float] = {}
            fi: dict[int, float] = {}

            def acc(row, key, c):
                j = vt[key]
                row[j] = row.get(j, 0.0) + c

            # F_r terms (sign-flipped: row is R Ir - F)
            acc(fr, ("ir", ln.id, phi, dr), r[phi, phi])
            acc(fr, ("vr", n, phi), -1.0)
            acc(fr, ("vr", m, phi), 1.0)
            acc(fr, ("ii", ln.id, phi, dr), -x[phi, phi])
            acc(fr, ("vi", n, phi), 0.5 * bb[phi, phi] * r[phi, phi])
            acc(fr, ("vr", n, phi), 0.5 * bb[phi, phi] * x[phi, phi])
            for k in pres:
                if k != phi:
                    acc(fr, ("d'", ln.id, k, dr), 0.5 * bb[phi, k] * r[phi, phi])
                    acc(fr, ("d", ln.id, k, dr), 0.5 * bb[phi, k] * x[phi, phi])
            for p in pres:
                if p == phi:
                    continue
                acc(fr, ("E", ln.id, phi, p, dr), r[phi, p])
                acc(fr, ("E'", ln.id, phi, p, dr), -x[phi, p])
                if len(pres) == 3:
                    k3 = next(k for k in pres if k != phi and k != p)
                    acc(fr, ("H'", ln.id, p, k3, dr), r[phi, p])
                    acc(fr, ("H", ln.id, p, k3, dr), x[phi, p])

            acc(fi, ("ii", ln.id, phi, dr), r[phi, phi])
            acc(fi, ("vi", n, phi), -1.0)
            acc(fi, ("vi", m, phi), 1.0)
            acc(fi, ("ir", ln.id, phi, dr), x[phi, phi])
            acc(fi, ("vr", n, phi), -0.5 * bb[phi, phi] * r[phi, phi])
            acc(fi, ("vi", n, phi), 0.5 * bb[phi, phi] * x[phi, phi])
            for k in pres:
                if k != phi:
                    acc(fi, ("d", ln.id, k, dr), -0.5 * bb[phi, k] * r[phi, phi])
                    acc(fi, ("d'", ln.id, k, dr), 0.5 * bb[phi, k] * x[phi, phi])
            for p in pres:
                if p == phi:
                    continue
                acc(fi, ("E'", ln.id, phi, p, dr), r[phi, p])
                acc(fi, ("E", ln.id, phi, p, dr), x[phi, p])
                if len(pres) == 3:
                    k3 = next(k for k in pres if k != phi and k != p)
                    acc(fi, ("H", ln.id, p, k3, dr), -r[phi, p])
                    acc(fi, ("H'", ln.id, p, k3, dr), x[phi, p])

            for row, nm in ((fr, "act_r"), (fi, "act_i")):
                hi = dict(row)
                hi[u(phi)] = hi.get(u(phi), 0.0) + M
                b.add_row(hi, -np.inf, M, f"{nm}:{ln.id}:{phi}:{dr}:hi")
                lo = dict(row)
                lo[u(phi)] = lo.get(u(phi), 0.0) - M
                b.add_row(lo, -M, np.inf, f"{nm}:{ln.id}:{phi}:{dr}:lo")

            # open phase carries no current: |I| <= M u
            for comp in ("ir", "ii"):
                j = vt[(comp, ln.id, phi, dr)]
                b.add_row({j: 1.0, u(phi): -M}, -np.inf, 0.0,
                          f"zero_hi:{comp}:{ln.id}:{phi}:{dr}")
                b.add_row({j: 1.0, u(phi): M}, 0.0, np.inf,
                          f"zero_lo:{comp}:{ln.id}:{phi}:{dr}")


def add_outage_constraints(b: ModelBuilder, ln: LineSegment, cfg: BigMConfig):
    """Dead-zone logic: a switch carrying no current must read open.

    The indicators certify that the from-end current component exceeds
    the threshold theta in some direction; without any certificate the
    status is forced to zero.
    """
    vt = b.vt
    th, lam = cfg.theta, cfg.lam
    for phi in ln.present():
        if not ln.switch[phi]:
            continue
        ir = vt[("ir", ln.id, phi, 0)]
        ii = vt[("ii", ln.id, phi, 0)]
        al = vt[("alpha", ln.id, phi)]
        be = vt[("beta", ln.id, phi)]
        ga = vt[("gamma", ln.id, phi)]
        mu = vt[("mu", ln.id, phi)]
        b.add_row({ir: -1.0, al: lam}, -np.inf, lam - th, f"out_a:{ln.id}:{phi}")
        b.add_row({ir: 1.0, be: lam}, -np.inf, lam - th, f"out_b:{ln.id}:{phi}")
        b.add_row({ii: -1.0, ga: lam}, -np.inf, lam - th, f"out_c:{ln.id}:{phi}")
        b.add_row({ii: 1.0, mu: lam}, -np.inf, lam - th, f"out_d:{ln.id}:{phi}")
        b.add_row({vt[("u", ln.id, phi)]: 1.0, al: -1.0, be: -1.0, ga: -1.0, mu: -1.0},
                  -np.inf, 0.0, f"out_e:{ln.id}:{phi}")


# -- bus rows ----------------------------------------------------------------

def add_injection_and_balance(b: ModelBuilder, bus: str, lin: LinearizationPoint):
    """Injection-current sums and Taylor-linearized power balance."""
    net, vt = b.net, b.vt
    for ph in range(3):
        if not net.buses[bus].phases[ph]:
            continue
        rowr = {vt[("inr", bus, ph)]: 1.0}
        rowi = {vt[("ini", bus, ph)]: 1.0}
        for ln in net.lines_at(bus):
            if not ln.phases[ph]:
                continue
            dr = 0 if ln.from_bus == bus else 1
            rowr[vt[("ir", ln.id, ph, dr)]] = rowr.get(vt[("ir", ln.id, ph, dr)], 0.0) - 1.0
            rowi[vt[("ii", ln.id, ph, dr)]] = rowi.get(vt[("ii", ln.id, ph, dr)], 0.0) - 1.0
        b.add_row(rowr, 0.0, 0.0, f"inj_r:{bus}:{ph}")
        b.add_row(rowi, 0.0, 0.0, f"inj_i:{bus}:{ph}")

        # a bus-phase with no devices and no slack import is a
        # zero-injection point: the exact constraint I = 0 is linear, so
        # it replaces the Taylor power balance outright
        if bus != net.slack and not any(d.phases[ph] for d in net.devices_at(bus)):
            b.add_row({vt[("inr", bus, ph)]: 1.0}, 0.0, 0.0, f"zinj_r:{bus}:{ph}")
            b.add_row({vt[("ini", bus, ph)]: 1.0}, 0.0, 0.0, f"zinj_i:{bus}:{ph}")
            continue

        v0r = lin.vr[(bus, ph)]
        v0i = lin.vi[(bus, ph)]
        i0r = lin.inr[(bus, ph)]
        i0i = lin.ini[(bus, ph)]
        prow: dict[int, float] = {}
        qrow: dict[int, float] = {}
        nl_total = 0.0
        for dev in net.devices_at(bus):
            if not dev.phases[ph]:
                continue
            if dev.kind == "load":
                prow[vt[("dp", dev.id, ph)]] = -1.0
                qrow[vt[("dq", dev.id, ph)]] = -1.0
            elif dev.kind == "der":
                prow[vt[("pg", dev.id, ph)]] = 1.0
                qrow[vt[("qg", dev.id, ph)]] = 1.0
            elif dev.kind == "capacitor":
                qrow[vt[("qc", dev.id, ph)]] = 1.0
            elif dev.kind == "transformer":
                nl_total += dev.nl[ph]
        if bus == net.slack:
            prow[vt[("ps", bus, ph)]] = 1.0
            qrow[vt[("qs", bus, ph)]] = 1.0
        # P: devices = V0r I_r + V0i I_i + I0r V_r + I0i V_i - (V0.I0)
        prow[vt[("inr", bus, ph)]] = prow.get(vt[("inr", bus, ph)], 0.0) - v0r
        prow[vt[("ini", bus, ph)]] = prow.get(vt[("ini", bus, ph)], 0.0) - v0i
        prow[vt[("vr", bus, ph)]] = prow.get(vt[("vr", bus, ph)], 0.0) - i0r
        prow[vt[("vi", bus, ph)]] = prow.get(vt[("vi", bus, ph)], 0.0) - i0i
        rhs_p = nl_total - (v0r * i0r + v0i * i0i)
        b.add_row(prow, rhs_p, rhs_p, f"bal_p:{bus}:{ph}")
        # Q: devices = V0i I_r - V0r I_i + I0r V_i - I0i V_r - (V0i I0r - V0r I0i)
        qrow[vt[("inr", bus, ph)]] = qrow.get(vt[("inr", bus, ph)], 0.0) - v0i
        qrow[vt[("ini", bus, ph)]] = qrow.get(vt[("ini", bus, ph)], 0.0) + v0r
        qrow[vt[("vi", bus, ph)]] = qrow.get(vt[("vi", bus, ph)], 0.0) - i0r
        qrow[vt[("vr", bus, ph)]] = qrow.get(vt[("vr", bus, ph)], 0.0) + i0i
        rhs_q = -(v0i * i0r - v0r * i0i)
        b.add_row(qrow, rhs_q, rhs_q, f"bal_q:{bus}:{ph}")


def add_pf_bounds(b: ModelBuilder, load: Device, skip=()):
    """Power-factor band on a load whose Q is unmeasured.

    Phases in ``skip`` get no band: a de-energized load phase already
    has dp = dq = 0 forced by its balance rows, and a band activated on
    top of that makes the working set rank deficient.
    """
    vt = b.vt
    c_min = math.sqrt(1.0 / load.pf_max ** 2 - 1.0)
    c_max = math.sqrt(1.0 / load.pf_min ** 2 - 1.0)
    for ph in range(3):
        if not load.phases[ph] or ph in skip:
            continue
        dp = vt[("dp", load.id, ph)]
        dq = vt[("dq", load.id, ph)]
        b.add_row({dq: 1.0, dp: -c_min}, 0.0, np.inf, f"pf_lo:{load.id}:{ph}")
        b.add_row({dq: 1.0, dp: -c_max}, -np.inf, 0.0, f"pf_hi:{load.id}:{ph}")


# -- objective ---------------------------------------------------------------

def _channel_variable(net: Network, vt: VariableTable, c) -> int:
    if c.kind == "pmu_v":
        return vt[("vr" if c.part == "re" else "vi", c.bus, c.phase)]
    if c.kind == "pmu_i":
        return vt[("ir" if c.part == "re" else "ii", c.line, c.phase, 0)]
    if c.kind in ("sm_p", "sm_q"):
        loads = [d for d in net.devices_at(c.bus)
                 if d.kind == "load" and d.phases[c.phase]]
        if len(loads) != 1:
            raise FormulationError(
                f"channel {c.kind}@{c.bus}:{c.phase} maps to {len(loads)} loads")
        return vt[("dp" if c.kind == "sm_p" else "dq", loads[0].id, c.phase)]
    if c.kind in ("pv_p", "pv_q"):
        ders = [d for d in net.devices_at(c.bus)
                if d.kind == "der" and d.phases[c.phase]]
        if len(ders) != 1:
            raise FormulationError(
                f"channel {c.kind}@{c.bus}:{c.phase} maps to {len(ders)} DERs")
        return vt[("pg" if c.kind == "pv_p" else "qg", ders[0].id, c.phase)]
    if c.kind == "cap_q":
        caps = [d for d in net.devices_at(c.bus)
                if d.kind == "capacitor" and d.phases[c.phase]]
        if len(caps) != 1:
            raise FormulationError(
                f"channel cap_q@{c.bus}:{c.phase} maps to {len(caps)} capacitors")
        return vt[("qc", caps[0].id, c.phase)]
    if c.kind == "sub_p":
        return vt[("ps", c.bus, c.phase)]
    if c.kind == "sub_q":
        return vt[("qs", c.bus, c.phase)]
    raise FormulationError(f"unmappable channel kind {c.kind!r}")


def build_objective(b: ModelBuilder, ms: MeasurementSet,
                    pinned: set[int] | None = None):
    """WLS terms (1/sigma)^2 (x_j - value)^2 per non-missing channel.

    Channels whose sigma sits at the floor are exact by construction;
    they become equality rows instead of weighted terms.  Keeping them
    in the objective would put ~1e12 weights next to ~1e4 ones, and
    the resulting curvature spread makes regularized KKT solves drift
    along the weakly weighted directions.
    """
    pinned = pinned or set()
    for c in ms:
        if c.missing:
            continue
        j = _channel_variable(b.net, b.vt, c)
        if j in pinned:
            continue
        if c.sigma <= SIGMA_FLOOR:
            b.add_row({j: 1.0}, c.value, c.value,
                      f"exact:{c.kind}:{c.bus or c.line}:{c.phase}:{c.part}")
            pinned.add(j)
        else:
            b.add_sq_term(j, 1.0 / c.sigma, c.value)


# -- assembly ----------------------------------------------------------------

def binary_count(net: Network, outage_detection: bool = True) -> int:
    """Documented count formula for the binary set."""
    total = 0
    for lid in net.line_order:
        ln = net.lines[lid]
        if not ln.has_switch:
            continue
        pres = ln.present()
        sw = [p for p in pres if ln.switch[p]]
        total += len(sw)
        for a in range(len(pres)):
            for c in range(a + 1, len(pres)):
                if ln.switch[pres[a]] or ln.switch[pres[c]]:
                    total += 1
        if outage_detection:
            total += 4 * len(sw)
    return total


def flat_linearization(net: Network) -> LinearizationPoint:
    """Canonical balanced voltages and zero injection currents."""
    flat = [complex(1.0, 0.0),
            complex(-0.5, -math.sqrt(3.0) / 2.0),
            complex(-0.5, math.sqrt(3.0) / 2.0)]
    vr, vi, inr, ini = {}, {}, {}, {}
    for bus, ph in net.bus_phases():
        vr[(bus, ph)] = flat[ph].real
        vi[(bus, ph)] = flat[ph].imag
        inr[(bus, ph)] = 0.0
        ini[(bus, ph)] = 0.0
    return LinearizationPoint(vr, vi, inr, ini)


def _add_measurement_rows(b: ModelBuilder, ms: MeasurementSet,
                          dead: frozenset = frozenset()):
    """Power-factor bands, slack-voltage pins, and the WLS objective.

    ``dead`` lists (bus, phase) pairs that the (known) switch statuses
    de-energize; those load phases get no power-factor band.
    """
    net = b.net
    # loads without a reactive-power channel get the power-factor band
    q_metered = {(c.bus, c.phase) for c in ms if c.kind == "sm_q" and not c.missing}
    for did in net.device_order:
        dev = net.devices[did]
        if dev.kind != "load":
            continue
        if not all(q_metered >= {(dev.bus, ph)} for ph in range(3) if dev.phases[ph]):
            add_pf_bounds(b, dev,
                          skip=[ph for ph in range(3)
                                if (dev.bus, ph) in dead])

    # slack voltage reference: pinned to its voltage-phasor channels,
    # or to the canonical balanced set when none are present
    pinned: set[int] = set()
    slack_pins = {}
    for c in ms:
        if c.kind == "pmu_v" and c.bus == net.slack and not c.missing:
            slack_pins[(c.part, c.phase)] = c.value
    lin_flat = flat_linearization(net)
    for ph in range(3):
        if not net.buses[net.slack].phases[ph]:
            continue
        vre = slack_pins.get(("re", ph), lin_flat.vr[(net.slack, ph)])
        vim = slack_pins.get(("im", ph), lin_flat.vi[(net.slack, ph)])
        jr = b.vt[("vr", net.slack, ph)]
        ji = b.vt[("vi", net.slack, ph)]
        b.add_row({jr: 1.0}, vre, vre, f"slack_r:{ph}")
        b.add_row({ji: 1.0}, vim, vim, f"slack_i:{ph}")
        pinned.update((jr, ji))

    build_objective(b, ms, pinned)


def resolve_status(net: Network, status) -> dict[str, tuple[bool, bool, bool]]:
    """Normalize a per-line status mapping over the switched lines.

    Missing lines default to their nominal state (closed, except
    normally-open ties); phases without a switch are always closed.
    """
    status = dict(status or {})
    out: dict[str, tuple[bool, bool, bool]] = {}
    for lid in net.line_order:
        ln = net.lines[lid]
        if not ln.has_switch:
            continue
        given = status.pop(lid, None)
        st = []
        for ph in range(3):
            if not ln.phases[ph]:
                st.append(False)
            elif not ln.switch[ph]:
                st.append(True)
            elif given is not None:
                st.append(bool(given[ph]))
            else:
                st.append(not ln.nos)
        out[lid] = tuple(st)
    if status:
        raise FormulationError(f"status given for non-switched lines: {sorted(status)}")
    return out


def build_fixed_model(net: Network, ms: MeasurementSet,
                      lin: LinearizationPoint, status,
                      iteration: int = 0) -> QPModel:
    """Assemble the convex QP for one iteration with known switch statuses.

    Closed phases of a switched line behave as the line's sub-block on
    the closed set; open phases carry identically zero current.  No
    binaries and no big-M machinery are involved, so the result is an
    ordinary equality/inequality constrained WLS problem.

    Bus-phases the given statuses de-energize are linearized at the
    nominal flat point with zero current, whatever the caller's
    linearization says.  A Taylor power-balance row expanded around a
    previously energized operating point (nonzero injection current)
    would otherwise let an unconstrained island voltage absorb the
    power of a load that the candidate topology actually drops.
    """
    lin.check_finite()
    status = resolve_status(net, status)
    ene = energized_set(net, status)
    dead = [bp for bp in net.bus_phases() if bp not in ene]
    if dead:
        flat = flat_linearization(net)
        lin = LinearizationPoint(vr=dict(lin.vr), vi=dict(lin.vi),
                                 inr=dict(lin.inr), ini=dict(lin.ini))
        for bp in dead:
            lin.vr[bp] = flat.vr[bp]
            lin.vi[bp] = flat.vi[bp]
            lin.inr[bp] = 0.0
            lin.ini[bp] = 0.0
    b = ModelBuilder(net)
    _alloc_continuous(b)

    for lid in net.line_order:
        ln = net.lines[lid]
        st = status.get(lid)
        closed = ln.present() if st is None else [p for p in ln.present() if st[p]]
        if closed:
            add_unswitched_line(b, ln, closed)
        for ph in ln.present():
            if ph in closed:
                continue
            for dr in (0, 1):
                b.add_row({b.vt[("ir", lid, ph, dr)]: 1.0}, 0.0, 0.0,
                          f"open_r:{lid}:{ph}:{dr}")
                b.add_row({b.vt[("ii", lid, ph, dr)]: 1.0}, 0.0, 0.0,
                          f"open_i:{lid}:{ph}:{dr}")

    for bus in net.bus_order:
        add_injection_and_balance(b, bus, lin)

    _add_measurement_rows(b, ms, dead=frozenset(dead))
    return b.finish((), {"iteration": iteration,
                         "objective_terms": b.obj_terms,
                         "status": status})


def build_iteration_model(net: Network, ms: MeasurementSet,
                          lin: LinearizationPoint, cfg: BigMConfig,
                          outage_detection: bool = True,
                          iteration: int = 0) -> QPModel:
    """Assemble the full MIQP for one outer iteration."""
    lin.check_finite()
    b = ModelBuilder(net)
    _alloc_continuous(b)
    _alloc_switch_variables(b, outage_detection)

    for lid in net.line_order:
        ln = net.lines[lid]
        if ln.has_switch:
            add_switched_line(b, ln, cfg)
            if outage_detection:
                add_outage_constraints(b, ln, cfg)
        else:
            add_unswitched_line(b, ln)

    for bus in net.bus_order:
        add_injection_and_balance(b, bus, lin)

    _add_measurement_rows(b, ms)

    # hints for the solver's rounding heuristic: which currents gate
    # which binaries
    snap_u, snap_pairs, snap_ind = [], [], []
    for lid in net.line_order:
        ln = net.lines[lid]
        if not ln.has_switch:
            continue
        pres = ln.present()
        for ph in pres:
            if ln.switch[ph]:
                snap_u.append((b.vt[("u", lid, ph)],
                               b.vt[("ir", lid, ph, 0)],
                               b.vt[("ii", lid, ph, 0)]))
        for a in range(len(pres)):
            for c in range(a + 1, len(pres)):
                p, k = pres[a], pres[c]
                if ln.switch[p] or ln.switch[k]:
                    snap_pairs.append((b.vt[("B", lid, p, k)],
                                       b.vt[("u", lid, p)],
                                       b.vt[("u", lid, k)]))
        if outage_detection:
            for ph in pres:
                if ln.switch[ph]:
                    snap_ind.append((b.vt[("alpha", lid, ph)],
                                     b.vt[("beta", lid, ph)],
                                     b.vt[("gamma", lid, ph)],
                                     b.vt[("mu", lid, ph)],
                                     b.vt[("ir", lid, ph, 0)],
                                     b.vt[("ii", lid, ph, 0)],
                                     b.vt[("u", lid, ph)]))

    # per-phase switch table for the solver's status heuristic:
    # (line, phase, u index, current indices in both directions)
    switch_phases = []
    for lid in net.line_order:
        ln = net.lines[lid]
        if not ln.has_switch:
            continue
        for ph in ln.present():
            if ln.switch[ph]:
                switch_phases.append(
                    (lid, ph, b.vt[("u", lid, ph)],
                     b.vt[("ir", lid, ph, 0)], b.vt[("ii", lid, ph, 0)],
                     b.vt[("ir", lid, ph, 1)], b.vt[("ii", lid, ph, 1)]))

    model = b.finish(b.vt.binaries, {"iteration": iteration,
                                     "outage_detection": outage_detection,
                                     "objective_terms": b.obj_terms,
                                     "snap_u": snap_u,
                                     "snap_pairs": snap_pairs,
                                     "snap_indicators": snap_ind,
                                     "theta": cfg.theta,
                                     "switch_phases": switch_phases,
                                     "context": {"net": net, "ms": ms,
                                                 "lin": lin, "cfg": cfg}})
    expect = binary_count(net, outage_detection)
    assert len(model.binary_idx) == expect, (len(model.binary_idx), expect)
    return model
