"""Branch-and-bound MIQP solver over a convex-QP relaxation engine.

The QP engine wraps an operator-splitting solver (OSQP) set up once per
model; branch-and-bound nodes differ only in the bounds of binary
variables, so node solves are bound updates plus warm starts.  The
objective is scaled internally so the largest quadratic diagonal is one
(the argmin of a weighted least-squares problem is invariant under a
common weight rescaling); reported objective values are computed
term-wise from the residuals, never from the scaled quadratic form.

Node selection is best-bound-first with a deterministic insertion-order
tie break; branching picks the most fractional binary, ties broken by
lowest variable index.

Incumbents come from a status-space search rather than naive rounding:
candidate switch-status assignments (the nominal state, a guess from the
relaxation's line currents, and greedy single-line / single-phase flips)
are each evaluated by solving the binary-free fixed-status model — an
equality-constrained least-squares problem solved directly through its
sparse KKT system — and the winner is lifted back into the full variable
space with all auxiliaries and indicator binaries reconstructed.  The
big-M model with *every* binary pinned is numerically hostile to
operator splitting, so fixed assignments are never solved through it
when the fixed-status route is available.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np
import osqp
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .formulation import QPModel, build_fixed_model, resolve_status

INTEGRALITY_TOL = 1e-6


class SolverError(RuntimeError):
    pass


class Infeasible(SolverError):
    pass


@dataclass
class QPSolution:
    x: np.ndarray
    objective: float
    status: str                    # optimal | infeasible | iteration-limit
    max_violation: float = 0.0
    kkt_residual: float = 0.0
    iterations: int = 0
    active_rows: tuple = ()        # (row tag, side) pairs of the active set


@dataclass
class MIQPSolution:
    solution: QPSolution
    bound: float
    gap: float
    nodes: int
    wall_time: float
    status: str                    # optimal | limit | infeasible
    log: list[str] = field(default_factory=list)
    switch_status: dict | None = None   # winning per-line status, if known


class QPEngine:
    """One OSQP instance per model; nodes update variable bounds only."""

    def __init__(self, model: QPModel, eps: float = 1e-9, max_iter: int = 200_000):
        self.model = model
        n = model.n
        m_rows = model.A.shape[0]
        self.m_rows = m_rows
        pmax = float(model.p_diag.max()) if model.p_diag.size else 1.0
        self.scale = 1.0 / max(pmax, 1.0)
        P = sp.diags(model.p_diag * self.scale, format="csc")
        A = sp.vstack([model.A, sp.identity(n, format="csc")], format="csc")
        self.base_l = np.concatenate([model.row_l, model.var_lb()])
        self.base_u = np.concatenate([model.row_u, model.var_ub()])
        self.prob = osqp.OSQP()
        self.prob.setup(P=P, q=model.q * self.scale, A=A,
                        l=self.base_l, u=self.base_u,
                        verbose=False, polishing=True, polish_refine_iter=10,
                        eps_abs=eps, eps_rel=eps, max_iter=max_iter,
                        scaled_termination=False)
        self._A = A.tocsr()
        self._Pd = model.p_diag * self.scale
        self._q = model.q * self.scale

    def solve(self, var_lb: np.ndarray, var_ub: np.ndarray,
              warm: np.ndarray | None = None) -> QPSolution:
        l = self.base_l.copy()
        u = self.base_u.copy()
        l[self.m_rows:] = var_lb
        u[self.m_rows:] = var_ub
        self.prob.update(l=l, u=u)
        if warm is not None:
            self.prob.warm_start(x=warm)
        res = self.prob.solve()
        sv = res.info.status_val
        if sv in (3, 4):  # primal / dual infeasible
            return QPSolution(x=np.zeros(self.model.n), objective=np.inf,
                              status="infeasible", iterations=res.info.iter)
        if res.x is None or not np.all(np.isfinite(res.x)):
            return QPSolution(x=np.zeros(self.model.n), objective=np.inf,
                              status="iteration-limit", iterations=res.info.iter)
        x = np.asarray(res.x, dtype=float)
        viol = self._violation(x, var_lb, var_ub)
        kkt = self._stationarity(x, np.asarray(res.y, dtype=float))
        status = "optimal" if sv == 1 else "iteration-limit"
        return QPSolution(x=x, objective=self.model.objective_value(x),
                          status=status, max_violation=viol,
                          kkt_residual=kkt, iterations=res.info.iter)

    def _violation(self, x, var_lb, var_ub) -> float:
        ax = self._A[:self.m_rows] @ x
        over = np.maximum(ax - self.model.row_u, 0.0)
        under = np.maximum(self.model.row_l - ax, 0.0)
        vb = np.maximum(x - var_ub, 0.0) + np.maximum(var_lb - x, 0.0)
        return float(max(over.max(initial=0), under.max(initial=0),
                         vb.max(initial=0)))

    def _stationarity(self, x, y) -> float:
        r = self._Pd * x + self._q + self._A.T @ y
        return float(np.max(np.abs(r)))


def solve_qp(model: QPModel, var_lb: np.ndarray | None = None,
             var_ub: np.ndarray | None = None,
             engine: QPEngine | None = None) -> QPSolution:
    """Solve the continuous relaxation with the given variable bounds."""
    engine = engine or QPEngine(model)
    lb = engine.model.var_lb() if var_lb is None else np.asarray(var_lb, float)
    ub = engine.model.var_ub() if var_ub is None else np.asarray(var_ub, float)
    return engine.solve(lb, ub)


def branch_select(x: np.ndarray, binary_idx) -> int:
    """Most-fractional binary; ties broken by lowest variable index."""
    best_j, best_d = -1, 1.0
    for j in binary_idx:
        f = x[j] - np.floor(x[j])
        if min(f, 1.0 - f) <= INTEGRALITY_TOL:
            continue
        d = abs(0.5 - f)
        if d < best_d - 1e-15:
            best_j, best_d = j, d
    if best_j < 0:
        raise SolverError("branch_select called with integral relaxation")
    return best_j


# -- fixed-status evaluation --------------------------------------------------

_KKT_REG = 1e-9          # Tikhonov term keeping island null spaces invertible
# Accepts linearization-scale inconsistency in over-pinned (noise-free)
# models, where exact channels and first-iteration Taylor rows disagree
# at ~1e-7; genuinely impossible statuses overshoot this by orders of
# magnitude, so the same number doubles as the inconsistency cutoff.
_KKT_RESIDUAL_TOL = 1e-6


_ACTIVE_SET_MAX = 60
_PRIMAL_TOL = 1e-13
_DUAL_TOL = 1e-9
_KKT_POLISH_REG = 1e-12


def solve_fixed_qp(fx: QPModel, hint: tuple = ()) -> QPSolution:
    """Solve a binary-free fixed-status model.

    Equality rows (the bulk of the model) are handled directly through a
    regularized sparse KKT system with iterative refinement.  Inequality
    rows (power-factor bands, dead-zone current bounds) are handled by a
    primal active-set loop on top of the same factorization: every row
    the trial point violates is activated at its bound; once primal
    feasible, the active row with the most wrong-signed multiplier is
    released, one per round, because releasing in blocks can leave a
    rank-deficient working set.  A settled set gets one more solve with
    a much smaller Tikhonov term: constraint duals can reach ~1e7, so
    even ~1e-9 residuals visibly understate the objective.  If the loop
    fails to settle, the operator-splitting engine provides a point
    whose near-active rows seed one more pass; its own (sloppier)
    solution is the last resort.  Variable bounds are inactive at sane
    solutions and only triaged.

    ``hint`` carries ``(row tag, side)`` pairs from a previous related
    solve (the winning active set changes little between candidate
    statuses); the returned solution exposes its own set the same way.
    """
    n = fx.n
    A = fx.A.tocsr()
    eq = np.isfinite(fx.row_l) & (fx.row_l == fx.row_u)
    eq_idx = np.flatnonzero(eq)
    in_idx = np.flatnonzero(~eq)
    pmax = float(fx.p_diag.max()) if fx.p_diag.size else 1.0
    s = 1.0 / max(pmax, 1.0)

    m_eq = int(eq_idx.size)
    A_eq = A[eq_idx]
    b_eq = fx.row_l[eq_idx]

    def kkt_solve(Aw, b, reg, refinements):
        m = Aw.shape[0]
        kkt = sp.bmat([[sp.diags(fx.p_diag * s + reg), Aw.T],
                       [Aw, -reg * sp.identity(m)]], format="csc")
        rhs = np.concatenate([-fx.q * s, b])
        try:
            lu = spla.splu(kkt)
        except RuntimeError:
            return None
        z = lu.solve(rhs)
        for _ in range(refinements):
            z = z + lu.solve(rhs - kkt @ z)
        if not np.all(np.isfinite(z)):
            return None
        return z

    def infeasibility_certificate(Aw, b) -> bool:
        """True when the equality system is provably inconsistent."""
        res = spla.lsqr(Aw, b, atol=1e-12, btol=1e-12, iter_lim=2000)
        return float(res[3]) > 1e-6 * (1.0 + float(np.linalg.norm(b)))

    # The equality block never changes across active-set rounds, so its
    # KKT matrix is factored exactly once; each round's working set of
    # inequality rows is handled as a border through a small dense Schur
    # complement.  Each border column costs one cached back-solve, versus
    # a full refactorization per round.
    if m_eq:
        kkt0 = sp.bmat([[sp.diags(fx.p_diag * s + _KKT_REG), A_eq.T],
                        [A_eq, -_KKT_REG * sp.identity(m_eq)]], format="csc")
    else:
        kkt0 = sp.diags(fx.p_diag * s + _KKT_REG, format="csc")
    rhs0 = np.concatenate([-fx.q * s, b_eq])
    try:
        lu0 = spla.splu(kkt0)
    except RuntimeError:
        lu0 = None
    col_cache: dict[int, np.ndarray] = {}

    def border_col(i: int) -> np.ndarray:
        v = col_cache.get(i)
        if v is None:
            c = np.zeros(n + m_eq)
            c[:n] = A[i].toarray().ravel()
            v = lu0.solve(c)
            v = v + lu0.solve(c - kkt0 @ v)
            col_cache[i] = v
        return v

    def schur_solve(active, b_w, refinements=2):
        """Solve the working-set KKT system; layout matches a stacked solve."""
        if lu0 is None:
            return None
        if not active:
            z = lu0.solve(rhs0)
            for _ in range(refinements):
                z = z + lu0.solve(rhs0 - kkt0 @ z)
            return z if np.all(np.isfinite(z)) else None
        rows = [i for i, _ in active]
        A_act = A[rows]
        G = np.column_stack([border_col(i) for i in rows])
        S = -_KKT_REG * np.eye(len(rows)) - A_act @ G[:n]
        if not np.all(np.isfinite(S)):
            return None
        try:
            S_lu = sla.lu_factor(S, check_finite=False)
        except ValueError:
            return None

        def step(rt, rb):
            wt = lu0.solve(rt)
            y = sla.lu_solve(S_lu, rb - A_act @ wt[:n], check_finite=False)
            return wt - G @ y, y

        z, y = step(rhs0, b_w)
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y))):
            return None
        for _ in range(refinements):
            top = rhs0 - kkt0 @ z
            top[:n] -= A_act.T @ y
            bot = b_w - A_act @ z[:n] + _KKT_REG * y
            dz, dy = step(top, bot)
            z = z + dz
            y = y + dy
        full = np.concatenate([z, y])
        return full if np.all(np.isfinite(full)) else None

    def active_set_loop(active: list[tuple[int, int]]) -> QPSolution | None:
        # a failed block release of wrong-signed rows is retried one row
        # at a time from this saved state
        revert: tuple[list, int] | None = None
        # highly degenerate band structures (many loads at a band vertex)
        # can cycle; remember the best primal-feasible iterate so a cycle
        # still yields a valid upper-bound solution instead of a stall
        best_feas: QPSolution | None = None
        seen: set[frozenset] = set()
        cycled = False
        for _round in range(_ACTIVE_SET_MAX):
            b_w = np.array([fx.row_u[i] if side > 0 else fx.row_l[i]
                            for i, side in active])
            z = schur_solve(active, b_w)

            def residual(zz):
                xx = zz[:n]
                return max(float(np.max(np.abs(A_eq @ xx - b_eq), initial=0.0)),
                           float(np.max(np.abs(A[[i for i, _ in active]] @ xx
                                               - b_w), initial=0.0))
                           if active else 0.0)

            bad = z is None or residual(z) > _KKT_RESIDUAL_TOL
            if bad and active:
                # a working set with dependent rows makes the Schur block
                # too ill-conditioned; the monolithic regularized KKT
                # absorbs the dependency, so refactor for this round only
                zm = kkt_solve(sp.vstack([A_eq, A[[i for i, _ in active]]],
                                         format="csr"),
                               np.concatenate([b_eq, b_w]), _KKT_REG, 2)
                if zm is not None:
                    z = zm
                    bad = residual(z) > _KKT_RESIDUAL_TOL
            if not bad:
                x = z[:n]
                resid = residual(z)
            if bad:
                if revert is not None:
                    saved, worst_k = revert
                    active = [r for k, r in enumerate(saved) if k != worst_k]
                    revert = None
                    continue
                if not active:
                    # refinement stagnates at the least-squares residual of
                    # the equality system, so a large settled residual means
                    # the equalities themselves are inconsistent (a status
                    # that pins measurements it cannot serve); fall back to
                    # a least-squares probe only when the solve itself failed
                    if z is not None or infeasibility_certificate(A_eq, b_eq):
                        return QPSolution(x=np.zeros(n), objective=np.inf,
                                          status="infeasible",
                                          max_violation=np.inf)
                return None
            revert = None

            # activate every inequality row the trial point violates
            added = False
            if in_idx.size:
                held = {i for i, _ in active}
                ax = A[in_idx] @ x
                for i, v in zip(in_idx, ax):
                    if i in held:
                        continue
                    if v > fx.row_u[i] + _PRIMAL_TOL:
                        active.append((int(i), 1))
                        added = True
                    elif v < fx.row_l[i] - _PRIMAL_TOL:
                        active.append((int(i), -1))
                        added = True
            if added:
                continue

            # primal feasible: remember this iterate, stop on a repeated
            # working set
            excess0 = max(float(np.max(x - fx.var_ub(), initial=0.0)),
                          float(np.max(fx.var_lb() - x, initial=0.0)))
            if excess0 <= 1e-9:
                obj = fx.objective_value(x)
                if best_feas is None or obj < best_feas.objective:
                    acts = tuple((fx.row_tags[i], side) for i, side in active)
                    best_feas = QPSolution(x=x, objective=obj,
                                           status="optimal",
                                           max_violation=resid,
                                           kkt_residual=resid,
                                           active_rows=acts)
            state = frozenset(active)
            if state in seen:
                cycled = True
                break
            seen.add(state)

            # release wrong-signed rows as a block, but
            # remember enough state to retry one row at a time if the
            # reduced working set turns out rank-deficient; duals come out
            # of the scaled system, so rescale before the sign test or a
            # wrongly-active row hides below the tolerance
            y_act = z[n + len(eq_idx):] / s
            dual_tol = _DUAL_TOL * (1.0 + float(np.max(np.abs(y_act),
                                                       initial=0.0)))
            wrong = []
            worst_k, worst_m = -1, dual_tol
            for k, ((i, side), mult) in enumerate(zip(active, y_act)):
                w = -mult if side > 0 else mult
                if w > dual_tol:
                    wrong.append(k)
                if w > worst_m:
                    worst_k, worst_m = k, w
            if wrong:
                revert = (list(active), worst_k)
                if len(wrong) == 1:
                    revert = None
                drop = set(wrong)
                active = [r for k, r in enumerate(active) if k not in drop]
                continue

            # settled: low-regularization polish
            Aw = A[list(eq_idx) + [i for i, _ in active]]
            b = np.concatenate([b_eq, b_w])
            zp = kkt_solve(Aw, b, _KKT_POLISH_REG, 10)
            if zp is not None:
                xp = zp[:n]
                ok = float(np.max(np.abs(Aw @ xp - b), initial=0.0)) <= resid
                if ok and in_idx.size:
                    axp = A[in_idx] @ xp
                    ok = (float(np.max(axp - fx.row_u[in_idx], initial=0.0))
                          <= _PRIMAL_TOL
                          and float(np.max(fx.row_l[in_idx] - axp,
                                           initial=0.0)) <= _PRIMAL_TOL)
                if ok:
                    x = xp
                    resid = float(np.max(np.abs(Aw @ x - b), initial=0.0))

            excess = max(float(np.max(x - fx.var_ub(), initial=0.0)),
                         float(np.max(fx.var_lb() - x, initial=0.0)))
            if excess <= 1e-9:
                acts = tuple((fx.row_tags[i], side) for i, side in active)
                return QPSolution(x=x, objective=fx.objective_value(x),
                                  status="optimal", max_violation=resid,
                                  kkt_residual=resid, iterations=0,
                                  active_rows=acts)
            if excess > 0.5:
                # gross bound blow-ups mean a physically absurd status
                # (for example opening a line that feeds live load);
                # the bound-relaxed objective already disqualifies it
                return QPSolution(x=x, objective=fx.objective_value(x),
                                  status="infeasible",
                                  max_violation=excess,
                                  kkt_residual=resid, iterations=0)
            return best_feas
        return best_feas if (cycled or best_feas is not None) else None

    seed0: list[tuple[int, int]] = []
    if hint and in_idx.size:
        tag_row = {fx.row_tags[i]: int(i) for i in in_idx}
        seed0 = [(tag_row[t], side) for t, side in hint if t in tag_row]
    sol = active_set_loop(seed0)
    if sol is None and seed0:
        sol = active_set_loop([])
    if sol is not None:
        return sol
    fallback = QPEngine(fx, max_iter=20_000).solve(fx.var_lb(), fx.var_ub())
    if fallback.status != "optimal" or not in_idx.size:
        return fallback
    ax = A[in_idx] @ fallback.x
    seeded = []
    for i, v in zip(in_idx, ax):
        if v >= fx.row_u[i] - 1e-7:
            seeded.append((int(i), 1))
        elif v <= fx.row_l[i] + 1e-7:
            seeded.append((int(i), -1))
    sol = active_set_loop(seeded)
    return sol if sol is not None else fallback


def lift_status_solution(model: QPModel, fx: QPModel, xf: np.ndarray,
                         status) -> np.ndarray | None:
    """Embed a fixed-status solution into the full MIQP variable space.

    Binaries are set from the status, auxiliaries from their defining
    products, and current indicators from the direction-0 current
    components.  Returns ``None`` when a closed phase carries less than
    the dead-zone threshold in every component, because then no indicator
    assignment certifies the closed status.
    """
    ctx = model.meta["context"]
    net = ctx["net"]
    theta = model.meta.get("theta", 5e-3)
    out_det = model.meta.get("outage_detection", False)
    mv = model.variables
    x = np.zeros(model.n)
    for key, j in fx.variables.index.items():
        x[mv[key]] = xf[j]
    for lid, st in status.items():
        ln = net.lines[lid]
        pres = ln.present()
        bb = ln.y.entries.imag
        uval = {ph: (1.0 if st[ph] else 0.0) for ph in pres}
        for ph in pres:
            x[mv[("u", lid, ph)]] = uval[ph]
        for a in range(len(pres)):
            for c in range(a + 1, len(pres)):
                p, k = pres[a], pres[c]
                x[mv[("B", lid, p, k)]] = uval[p] * uval[k]
        for dr in (0, 1):
            send = ln.from_bus if dr == 0 else ln.to_bus
            vr = {k: x[mv[("vr", send, k)]] for k in pres}
            vi = {k: x[mv[("vi", send, k)]] for k in pres}
            for k in pres:
                x[mv[("d", lid, k, dr)]] = uval[k] * vr[k]
                x[mv[("d'", lid, k, dr)]] = uval[k] * vi[k]
            for phi in pres:
                for p in pres:
                    if p == phi:
                        continue
                    e = x[mv[("ir", lid, p, dr)]] + 0.5 * sum(
                        bb[p, k] * vi[k] for k in (phi, p))
                    ep = x[mv[("ii", lid, p, dr)]] - 0.5 * sum(
                        bb[p, k] * vr[k] for k in (phi, p))
                    x[mv[("E", lid, phi, p, dr)]] = uval[p] * e
                    x[mv[("E'", lid, phi, p, dr)]] = uval[p] * ep
            if len(pres) == 3:
                for p in pres:
                    for k in pres:
                        if k == p:
                            continue
                        bv = uval[p] * uval[k]
                        x[mv[("H", lid, p, k, dr)]] = bv * 0.5 * bb[p, k] * vr[k]
                        x[mv[("H'", lid, p, k, dr)]] = bv * 0.5 * bb[p, k] * vi[k]
        if out_det:
            for ph in pres:
                if not ln.switch[ph]:
                    continue
                ir0 = x[mv[("ir", lid, ph, 0)]]
                ii0 = x[mv[("ii", lid, ph, 0)]]
                al = 1.0 if ir0 >= theta else 0.0
                be = 1.0 if -ir0 >= theta else 0.0
                ga = 1.0 if ii0 >= theta else 0.0
                mu = 1.0 if -ii0 >= theta else 0.0
                if uval[ph] > 0.5 and al + be + ga + mu < 0.5:
                    return None
                x[mv[("alpha", lid, ph)]] = al
                x[mv[("beta", lid, ph)]] = be
                x[mv[("gamma", lid, ph)]] = ga
                x[mv[("mu", lid, ph)]] = mu
    return x


def evaluate_status(model: QPModel, status, cache: dict | None = None):
    """Fixed-status objective for an iteration model, with dead-zone cleanup.

    Solves the binary-free model for the given statuses; when outage
    detection is active, closed switch phases carrying less than the
    threshold current are re-opened (the dead-zone logic forbids a closed
    reading without current) and the model is re-solved.  Returns
    ``(resolved_status, fixed_model, QPSolution)`` with the solution
    lifted into the full variable space, or ``None`` if infeasible.
    """
    ctx = model.meta.get("context")
    if ctx is None:
        return None
    net = ctx["net"]
    theta = model.meta.get("theta", 5e-3)
    out_det = model.meta.get("outage_detection", False)
    status = resolve_status(net, status)
    key = tuple(sorted(status.items()))
    if cache is not None and key in cache:
        return cache[key]
    result = None
    hint = cache.get("__active_hint__", ()) if cache is not None else ()
    for _ in range(4):
        fx = build_fixed_model(net, ctx["ms"], ctx["lin"], status,
                               iteration=model.meta.get("iteration", 0))
        sol = solve_fixed_qp(fx, hint=hint)
        if sol.status == "infeasible" or not np.isfinite(sol.objective):
            break
        if cache is not None and sol.active_rows:
            cache["__active_hint__"] = sol.active_rows
        if out_det:
            reopen = []
            for lid, st in status.items():
                ln = net.lines[lid]
                for ph in ln.present():
                    if not (st[ph] and ln.switch[ph]):
                        continue
                    j_r = fx.variables[("ir", lid, ph, 0)]
                    j_i = fx.variables[("ii", lid, ph, 0)]
                    if max(abs(sol.x[j_r]), abs(sol.x[j_i])) < theta:
                        reopen.append((lid, ph))
            if reopen:
                status = dict(status)
                for lid, ph in reopen:
                    st = list(status[lid])
                    st[ph] = False
                    status[lid] = tuple(st)
                status = resolve_status(net, status)
                continue
        x = lift_status_solution(model, fx, sol.x, status)
        if x is None:
            break
        lifted = QPSolution(x=x, objective=model.objective_value(x),
                            status="optimal",
                            max_violation=model.max_violation(x),
                            kkt_residual=sol.kkt_residual,
                            iterations=sol.iterations)
        if lifted.max_violation <= 1e-6:
            result = (status, fx, lifted)
        break
    if cache is not None:
        cache[key] = result
        cache[tuple(sorted(resolve_status(net, status).items()))] = result
    return result


def _relaxation_status_guess(model: QPModel, x: np.ndarray):
    """Candidate statuses from the relaxation's switched-line currents."""
    ctx = model.meta.get("context")
    if ctx is None:
        return {}
    theta = model.meta.get("theta", 5e-3)
    cut = max(theta, 1e-3)
    guess: dict[str, list[bool]] = {}
    base = resolve_status(ctx["net"], {})
    for lid, ph, _uj, ir0, ii0, ir1, ii1 in model.meta.get("switch_phases", ()):
        mag = max(float(np.hypot(x[ir0], x[ii0])),
                  float(np.hypot(x[ir1], x[ii1])))
        guess.setdefault(lid, list(base[lid]))[ph] = mag >= cut
    return {lid: tuple(st) for lid, st in guess.items()}


def search_statuses(model: QPModel, x_relax: np.ndarray | None = None,
                    seeds=(), phase_flips: bool = True, max_passes: int = 3,
                    cache: dict | None = None, margin: float = 5.0):
    """Greedy status-space search for a strong integral incumbent.

    Starts from the nominal state, the relaxation-derived guess, and any
    caller-provided seed statuses; improves by whole-line flips, then by
    single-phase flips.  Returns ``(status, fixed_model, QPSolution)`` for
    the best assignment found, or ``None``.

    Candidates are ranked by the WLS objective plus ``margin`` per
    nominally-open switch phase that the candidate closes.  Closing an
    extra tie only improves the raw objective by an O(1) amount (one
    more loop to soak up measurement noise), while a genuine status
    error costs orders of magnitude more, so the closure prior breaks
    the noise-level ties toward the as-operated topology without masking
    real events.  Opening is never penalized: spurious opens of loaded
    lines already cost a huge residual, and opens of currentless lines
    are forced by the dead zone regardless.
    """
    ctx = model.meta.get("context")
    if ctx is None:
        return None
    net = ctx["net"]
    cache = {} if cache is None else cache
    nominal = resolve_status(net, {})
    best = None
    best_score = np.inf

    def deviation(status):
        return sum(1 for lid, st in status.items()
                   for p in range(3)
                   if net.lines[lid].switch[p]
                   and st[p] and not nominal[lid][p])

    def consider(status):
        nonlocal best, best_score
        res = evaluate_status(model, status, cache)
        if res is None:
            return False
        score = res[2].objective + margin * deviation(res[0])
        if score < best_score - 1e-12:
            best, best_score = res, score
            return True
        return False

    consider({})
    if x_relax is not None:
        consider(_relaxation_status_guess(model, x_relax))
    for seed in seeds:
        consider(seed)
    if best is None:
        return None

    switched = [net.lines[lid] for lid in net.line_order
                if net.lines[lid].has_switch]
    for _ in range(max_passes):
        improved = False
        for ln in switched:
            cur = best[0][ln.id]
            sw_phases = [p for p in ln.present() if ln.switch[p]]
            closed_any = any(cur[p] for p in sw_phases)
            flipped = list(cur)
            for p in sw_phases:
                flipped[p] = not closed_any
            cand = dict(best[0])
            cand[ln.id] = tuple(flipped)
            improved |= consider(cand)
        if not improved:
            break
    if phase_flips:
        for _ in range(max_passes):
            improved = False
            for ln in switched:
                for p in ln.present():
                    if not ln.switch[p]:
                        continue
                    cur = list(best[0][ln.id])
                    cur[p] = not cur[p]
                    cand = dict(best[0])
                    cand[ln.id] = tuple(cur)
                    improved |= consider(cand)
            if not improved:
                break
    return best


def _is_integral(x: np.ndarray, binary_idx) -> bool:
    return all(abs(x[j] - round(x[j])) <= INTEGRALITY_TOL for j in binary_idx)


def _status_from_x(model: QPModel, x: np.ndarray, fallback=None):
    """Per-line switch statuses read off a solution's status binaries."""
    if fallback is not None:
        return fallback
    ctx = model.meta.get("context")
    if ctx is None:
        return None
    status: dict[str, list[bool]] = {}
    base = resolve_status(ctx["net"], {})
    for lid, ph, uj, *_ in model.meta.get("switch_phases", ()):
        status.setdefault(lid, list(base[lid]))[ph] = bool(round(x[uj]))
    return {lid: tuple(st) for lid, st in status.items()}


def solve_miqp(model: QPModel, gap: float = 1e-6,
               node_limit: int = 100_000, time_limit: float | None = None,
               log: bool = False, status_seeds=(),
               node_max_iter: int = 25_000,
               status_margin: float = 5.0) -> MIQPSolution:
    """Best-bound branch-and-bound; certified to the requested gap.

    Node relaxations that hit the engine's iteration limit keep their
    parent's (valid) bound and stay in the tree; their objective is never
    trusted for pruning or incumbents.
    """
    t0 = time.monotonic()
    engine = QPEngine(model, max_iter=node_max_iter)
    lb0 = model.var_lb()
    ub0 = model.var_ub()
    bidx = model.binary_idx
    lines: list[str] = []
    inc_status = None

    if not bidx:
        sol = engine.solve(lb0, ub0)
        if sol.status == "infeasible":
            raise Infeasible("root relaxation infeasible")
        return MIQPSolution(solution=sol, bound=sol.objective, gap=0.0,
                            nodes=1, wall_time=time.monotonic() - t0,
                            status="optimal", log=lines)

    incumbent: QPSolution | None = None
    status_cache: dict = {}

    def offer(sol: QPSolution, st=None):
        nonlocal incumbent, inc_status
        if incumbent is None or sol.objective < incumbent.objective:
            incumbent = sol
            inc_status = st
            return True
        return False

    def offer_integral(sol: QPSolution):
        # An integral relaxation point from the engine can carry ~1e-6
        # constraint violations, and with duals around 1e7 its objective
        # understates the true one; re-solve its status exactly instead.
        st = _status_from_x(model, sol.x)
        if st is not None:
            res = evaluate_status(model, st, status_cache)
            if res is not None:
                return offer(res[2], res[0])
            return False
        if sol.max_violation <= 1e-6:
            return offer(sol)
        return False

    # root
    root = engine.solve(lb0, ub0)
    if root.status == "infeasible":
        raise Infeasible("root relaxation infeasible")
    root_bound = root.objective if root.status == "optimal" else 0.0
    nodes = 1
    counter = 0
    heap: list[tuple[float, int, dict[int, float], np.ndarray]] = []

    found = search_statuses(model, root.x if root.status == "optimal" else None,
                            seeds=status_seeds, cache=status_cache,
                            margin=status_margin)
    if found is not None:
        offer(found[2], found[0])

    def tol():
        ref = 1.0 if incumbent is None else max(1.0, abs(incumbent.objective))
        return gap * ref

    def log_line(bound):
        inc = incumbent.objective if incumbent is not None else float("inf")
        g = (inc - bound) / max(1.0, abs(inc)) if np.isfinite(inc) else float("inf")
        line = f"node={nodes} bound={bound:.9g} incumbent={inc:.9g} gap={g:.3g}"
        lines.append(line)
        if log:
            print(line)

    if root.status == "optimal" and _is_integral(root.x, bidx):
        offer_integral(root)
        if incumbent is None:
            incumbent = root
        log_line(root_bound)
        return MIQPSolution(solution=incumbent, bound=root_bound, gap=0.0,
                            nodes=nodes, wall_time=time.monotonic() - t0,
                            status="optimal", log=lines,
                            switch_status=_status_from_x(model, incumbent.x,
                                                         inc_status))

    status = "optimal"
    heapq.heappush(heap, (root_bound, counter, {}, root.x))
    log_line(root_bound)

    while heap:
        bound, _, fixed, warm = heapq.heappop(heap)
        if incumbent is not None and bound >= incumbent.objective - tol():
            break  # best-bound heap: everything else is at least as high
        if nodes >= node_limit:
            status = "limit"
            break
        if time_limit is not None and time.monotonic() - t0 > time_limit:
            status = "limit"
            break

        free = [j for j in bidx if j not in fixed]
        try:
            j = branch_select(warm, free)
        except SolverError:
            j = free[0] if free else None
        if j is None:
            break
        for val in (0.0, 1.0):
            child = dict(fixed)
            child[j] = val
            lb = lb0.copy()
            ub = ub0.copy()
            for jj, v in child.items():
                lb[jj] = ub[jj] = v
            sol = engine.solve(lb, ub, warm=warm)
            nodes += 1
            if sol.status == "infeasible":
                continue
            trusted = sol.status == "optimal" and np.isfinite(sol.objective)
            child_bound = max(bound, sol.objective) if trusted else bound
            if incumbent is not None and child_bound >= incumbent.objective - tol():
                continue
            if trusted and _is_integral(sol.x, bidx):
                offer_integral(sol)
                log_line(child_bound)
                continue
            counter += 1
            heapq.heappush(heap, (child_bound, counter, child,
                                  sol.x if trusted else warm))
        if nodes % 50 < 2:
            log_line(bound)

    if incumbent is None:
        if status == "limit":
            raise SolverError("limits exceeded without incumbent")
        raise Infeasible("no integral assignment is feasible")

    remaining = [h[0] for h in heap]
    bound = min(remaining) if (remaining and status == "limit") else incumbent.objective
    if status != "limit":
        bound = incumbent.objective if not remaining else min(min(remaining),
                                                              incumbent.objective)
    final_gap = (incumbent.objective - bound) / max(1.0, abs(incumbent.objective))
    final_gap = max(final_gap, 0.0)

    # exact integral report
    x = incumbent.x.copy()
    for j in bidx:
        x[j] = round(x[j])
    incumbent.x = x
    log_line(bound)
    return MIQPSolution(solution=incumbent, bound=bound, gap=final_gap,
                        nodes=nodes, wall_time=time.monotonic() - t0,
                        status=status, log=lines,
                        switch_status=_status_from_x(model, incumbent.x,
                                                     inc_status))


def fix_binaries(model: QPModel, values: dict[int, float]) -> QPModel | None:
    """Substitute binary variables by constants; None if trivially infeasible.

    The binaries' constraint coefficients move to the row bounds, rows
    that lose all variables are feasibility-checked and dropped, and
    complementary one-sided row pairs that meet at a common bound are
    merged back into the equality they encode (big-M activation pairs
    collapse this way once the gate is fixed), which keeps the reduced
    model solvable by the direct KKT path.
    """
    from .formulation import VariableTable

    n = model.n
    keep = np.array([j for j in range(n) if j not in values], dtype=int)
    bin_cols = np.array(sorted(values), dtype=int)
    vals = np.array([values[j] for j in bin_cols])
    A = model.A.tocsc()
    shift = A[:, bin_cols] @ vals
    Ak = A[:, keep].tocsr()
    row_l = model.row_l - shift
    row_u = model.row_u - shift

    nnz = np.diff(Ak.indptr)
    rows_keep = []
    for i in range(Ak.shape[0]):
        if nnz[i] == 0:
            if row_l[i] > 1e-9 or row_u[i] < -1e-9:
                return None
        else:
            rows_keep.append(i)
    Ak = Ak[rows_keep]
    row_l = row_l[rows_keep]
    row_u = row_u[rows_keep]
    tags = [model.row_tags[i] for i in rows_keep]

    # merge complementary one-sided pairs into equalities
    sig: dict[tuple, list[int]] = {}
    for i in range(Ak.shape[0]):
        s, e = Ak.indptr[i], Ak.indptr[i + 1]
        key = (tuple(Ak.indices[s:e]), tuple(Ak.data[s:e]))
        sig.setdefault(key, []).append(i)
    drop = set()
    for rows in sig.values():
        lo = [i for i in rows if np.isfinite(row_l[i]) and not np.isfinite(row_u[i])]
        up = [i for i in rows if np.isfinite(row_u[i]) and not np.isfinite(row_l[i])]
        for i in lo:
            for j in up:
                if j in drop or i in drop:
                    continue
                if abs(row_l[i] - row_u[j]) <= 1e-12:
                    row_u[i] = row_l[i]
                    drop.add(j)
    if drop:
        sel = [i for i in range(Ak.shape[0]) if i not in drop]
        Ak = Ak[sel]
        row_l = row_l[sel]
        row_u = row_u[sel]
        tags = [tags[i] for i in sel]

    vt = VariableTable()
    for j in keep:
        vt.add(model.variables.names[j], model.variables.lb[j],
               model.variables.ub[j])
    const = model.const + float(model.q[bin_cols] @ vals
                                + 0.5 * (model.p_diag[bin_cols] * vals) @ vals)
    return QPModel(variables=vt, A=Ak.tocsc(), row_l=row_l, row_u=row_u,
                   row_tags=tags, p_diag=model.p_diag[keep],
                   q=model.q[keep], const=const, binary_idx=(),
                   meta={"keep": keep})


def enumerate_miqp(model: QPModel) -> tuple[QPSolution, dict[int, float], list]:
    """Brute-force oracle: solve a fixed-binary QP per binary vector.

    Each leaf is reduced by binary substitution and solved through the
    direct fixed-model path; the leaf point is lifted back into the full
    variable space and only accepted if it satisfies every original
    constraint.  Returns the best solution, its assignment, and the full
    table of (assignment tuple, objective) pairs for debugging.
    """
    bidx = model.binary_idx
    if len(bidx) > 20:
        raise SolverError("enumeration oracle limited to 20 binaries")
    best: QPSolution | None = None
    best_fix: dict[int, float] = {}
    table = []
    hint: tuple = ()
    for mask in range(1 << len(bidx)):
        fixed = {j: float((mask >> k) & 1) for k, j in enumerate(bidx)}
        key = tuple(int(fixed[j]) for j in bidx)
        fx = fix_binaries(model, fixed)
        if fx is None:
            table.append((key, np.inf))
            continue
        sol = solve_fixed_qp(fx, hint=hint)
        if sol.active_rows:
            hint = sol.active_rows
        if sol.status != "optimal":
            table.append((key, np.inf))
            continue
        x = np.zeros(model.n)
        x[fx.meta["keep"]] = sol.x
        for j, v in fixed.items():
            x[j] = v
        viol = model.max_violation(x)
        if viol > 1e-6:
            table.append((key, np.inf))
            continue
        obj = model.objective_value(x)
        table.append((key, obj))
        if best is None or obj < best.objective:
            best = QPSolution(x=x, objective=obj, status="optimal",
                              max_violation=viol,
                              kkt_residual=sol.kkt_residual)
            best_fix = fixed
    if best is None:
        raise Infeasible("every binary assignment infeasible")
    return best, best_fix, table
