"""Experiment runners.

A runner maps ``(config, seed, threads)`` to ``(payload, events, artifacts)``:
a JSON-ready payload with a boolean ``passed``, the number of collision
events processed, and extra files keyed by file name. Ensemble members are
independent; member ``i`` draws from random stream ``(seed, i)``.
"""
from __future__ import annotations

import functools
import json
import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import formats
from ..core import PhasePoint, normalize_state
from ..flow import simulate
from ..neutral import NeutralTolerances, ansatz_probe, sufficiency_ladder
from ..symbolic import (
    WitnessNotFound,
    f_bound,
    f_bound_bruteforce,
    g_threshold,
    relative_speed_envelope,
    richness,
    witness_collision,
)
from ..tangent import (
    TangentVector,
    curvature_ratio,
    expansion_audit,
    find_contracting_vector,
    q_audit,
    q_form,
    sandwich_steps,
    section_projector,
    unstable_seed,
)
from .config import ExperimentConfig
from .rng import stream
from .sampling import random_state

AUX = 1 << 32  # stream-index offset for auxiliary draws of a member
ORDER_TOL = 1e-10


def initial_state(cfg: ExperimentConfig, seed: int, index: int) -> PhasePoint:
    params = cfg.params()
    if cfg.initial.mode == "explicit":
        return normalize_state(np.array(cfg.initial.q), np.array(cfg.initial.v), params)
    return random_state(params, seed, index)


def _run_members(fn, cfg, seed, threads):
    n = cfg.run.samples if cfg.initial.mode == "random" else min(cfg.run.samples, 1)
    job = functools.partial(fn, cfg, seed)
    if threads > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(job, range(n)))
    return [job(i) for i in range(n)]


def _trajectory(cfg, state):
    return simulate(state, cfg.params(), max_time=cfg.run.max_time, max_collisions=cfg.run.max_collisions,
                    tol=cfg.run.tolerances())


# --- simulate / conservation ------------------------------------------------------


def _simulate_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    e0 = state.energy(params)
    return {
        "index": i,
        "initial": formats.state_dict(state),
        "final": formats.state_dict(traj.final),
        "elapsed": traj.elapsed,
        "collisions": len(traj),
        "records": [rec.as_dict() for rec in traj.records],
        "gap_statistics": traj.gap_statistics(),
        "energy_drift": abs(traj.final.energy(params) - e0) / e0,
        "momentum_residual": float(np.abs(traj.final.momentum(params)).max()),
    }


def run_simulate(cfg, seed, threads):
    members = _run_members(_simulate_member, cfg, seed, threads)
    artifacts = {}
    if "jsonl" in cfg.output.formats:
        for m in members:
            artifacts[f"trajectory-{m['index']}.jsonl"] = "".join(json.dumps(r) + "\n" for r in m["records"])
    if "bin" in cfg.output.formats:
        for m in members:
            artifacts[f"final-{m['index']}.hbck"] = formats.checkpoint_bytes(
                PhasePoint(np.array(m["final"]["q"]), np.array(m["final"]["v"])))
    if "edges" in cfg.output.formats:
        for m in members:
            artifacts[f"graph-{m['index']}.txt"] = "".join(
                f"{r['pair'][0]} {r['pair'][1]} {r['time']!r}\n" for r in m["records"])
    payload = {"members": members, "passed": True}
    return payload, sum(m["collisions"] for m in members), artifacts


def _conservation_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    m = params.mass_array
    de = np.abs(np.einsum("i,kij,kij->k", m, traj.v_post, traj.v_post)
                - np.einsum("i,kij,kij->k", m, traj.v_pre, traj.v_pre)) * 0.5
    dp = np.abs(np.einsum("i,kij->kj", m, traj.v_post) - np.einsum("i,kij->kj", m, traj.v_pre))
    e0 = state.energy(params)
    return {
        "index": i,
        "collisions": len(traj),
        "energy_drift": abs(traj.final.energy(params) - e0) / e0,
        "momentum_residual": float(np.abs(traj.final.momentum(params)).max()),
        "max_collision_energy_change": float(de.max()) if de.size else 0.0,
        "max_collision_momentum_change": float(dp.max()) if dp.size else 0.0,
        "gap_statistics": traj.gap_statistics(),
    }


def run_conservation(cfg, seed, threads):
    members = _run_members(_conservation_member, cfg, seed, threads)
    e_tol, p_tol = cfg.experiment.get("energy_tol"), cfg.experiment.get("momentum_tol")
    for m in members:
        m["passed"] = m["energy_drift"] < e_tol and m["momentum_residual"] < p_tol
    payload = {"energy_tol": e_tol, "momentum_tol": p_tol, "members": members,
               "passed": all(m["passed"] for m in members)}
    rows = [{k: m[k] for k in ("index", "collisions", "energy_drift", "momentum_residual", "passed")}
            for m in members]
    artifacts = {}
    if "csv" in cfg.output.formats:
        artifacts["conservation.csv"] = formats.csv_text(rows, list(rows[0]) if rows else ["index"])
    return payload, sum(m["collisions"] for m in members), artifacts


# --- tangent audits -------------------------------------------------------------


def positive_q_vector(v, params, rng) -> TangentVector:
    """Random section vector with ``Q = <dq, dv> > 0``."""
    P = section_projector(v, params)
    dq = P @ rng.standard_normal(params.dim)
    dv = dq + 0.5 * (P @ rng.standard_normal(params.dim))
    if dq @ dv <= 0:
        dv = dq
    return TangentVector.from_scaled(dq, dv, params)


def _q_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    tv = positive_q_vector(state.v, params, stream(seed, AUX + i))
    stats = q_audit(traj, tv, flight_tol=cfg.experiment.get("flight_tol"))
    stats["index"] = i
    return stats


def run_q_audit(cfg, seed, threads):
    members = _run_members(_q_member, cfg, seed, threads)
    payload = {"members": members, "total_events": sum(m["events"] for m in members),
               "total_violations": sum(m["q_violations"] for m in members),
               "passed": all(m["ok"] for m in members)}
    artifacts = {}
    if "csv" in cfg.output.formats:
        fields = ["index", "events", "flights", "q_violations", "max_flight_error", "min_collision_increment"]
        artifacts["q_audit.csv"] = formats.csv_text(members, fields)
    return payload, payload["total_events"], artifacts


def expansion_member(params, state, traj, tol=None):
    """Seed at the first non-tangential collision, then audit the growth of ``||dq||``."""
    for k, rec in enumerate(traj.records):
        if not rec.is_tangential():
            break
    else:
        return {"skipped": "no usable collision"}
    contact = PhasePoint(traj.contact_q[k], traj.v_pre[k])
    seed_vec = unstable_seed(contact, rec.pair, params)
    c0 = curvature_ratio(seed_vec, params)
    seed_rate = rec.rel_speed / params.r
    audit = expansion_audit(traj, seed_vec, c0, t_from=rec.time, raise_on_failure=False)
    return {"collision": k, "c0": c0, "seed_bound": seed_rate, "seed_ok": c0 >= seed_rate * (1 - 1e-12),
            "events": len(audit["rows"]), "violations": [list(v) for v in audit["violations"]],
            "ok": audit["ok"] and c0 >= seed_rate * (1 - 1e-12), "rows": audit["rows"]}


def _expansion_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    out = expansion_member(params, state, traj)
    out["index"] = i
    return out


def run_expansion(cfg, seed, threads):
    members = _run_members(_expansion_member, cfg, seed, threads)
    artifacts = {}
    if "csv" in cfg.output.formats:
        rows = [dict(row, sample=m["index"]) for m in members for row in m.get("rows", [])]
        artifacts["expansion.csv"] = formats.csv_text(
            rows, ["sample", "t", "kind", "index", "log_norm_ratio", "log_bound", "log_q_over_norm"])
    for m in members:
        m.pop("rows", None)
    payload = {"members": members, "passed": all(m.get("ok", True) for m in members)}
    return payload, sum(m.get("events", 0) for m in members), artifacts


def _subspace_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    horizons = sorted(cfg.experiment.get("horizons"))
    traj = simulate(state, params, max_time=horizons[-1], tol=cfg.run.tolerances())
    out = {"index": i, "horizons": []}
    ok = True
    for T in horizons:
        rows = sandwich_steps(state, T, params, traj=traj)
        last = rows[-1]
        worst = min(min(r["order_margin"], r.get("flat_step_margin", 0.0), r.get("candle_step_margin", 0.0),
                        r["flat_min_eig"]) / r["scale"] for r in rows)
        good = worst >= -ORDER_TOL and last["gap"] <= 1.0 / T
        ok &= good
        out["horizons"].append({"T": T, "steps": len(rows), "gap": last["gap"], "gap_bound": 1.0 / T,
                                "worst_relative_margin": worst, "flat_min_eig": last["flat_min_eig"],
                                "ok": bool(good)})
    out["ok"] = bool(ok)
    out["collisions"] = len(traj)
    return out


def run_subspace(cfg, seed, threads):
    members = _run_members(_subspace_member, cfg, seed, threads)
    payload = {"order_tol": ORDER_TOL, "members": members, "passed": all(m["ok"] for m in members)}
    return payload, sum(m["collisions"] for m in members), {}


# --- neutral spaces -------------------------------------------------------------


def _sufficiency_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    if not len(traj):
        return {"index": i, "collisions": 0, "ladder": [], "first_sufficient": None}
    a = 0.5 * traj.times[0]
    ends = [traj.midgap_time(k) for k in range(1, len(traj) + 1)]
    tol = NeutralTolerances(rank=cfg.run.rank)
    ladder = sufficiency_ladder(traj, a, ends, tol)
    first = next((row["b"] for row in ladder if row["dimension"] == 1), None)
    dims = [row["dimension"] for row in ladder]
    return {"index": i, "collisions": len(traj), "a": a, "ladder": ladder, "first_sufficient": first,
            "nested_ok": all(x >= y for x, y in zip(dims, dims[1:]))}


def run_sufficiency(cfg, seed, threads):
    members = _run_members(_sufficiency_member, cfg, seed, threads)
    payload = {"members": members,
               "sufficient_fraction": (sum(m["first_sufficient"] is not None for m in members) / len(members))
               if members else None,
               "passed": all(m.get("nested_ok", True) for m in members)}
    return payload, sum(m["collisions"] for m in members), {}


def run_ansatz(cfg, seed, threads):
    params = cfg.params()
    report = ansatz_probe(params, cfg.run.samples, cfg.experiment.get("horizon"), seed,
                          threshold=cfg.experiment.get("threshold"), rungs=cfg.experiment.get("rungs"),
                          tol=NeutralTolerances(rank=cfg.run.rank))
    report["passed"] = True
    return report, sum(s.get("collisions", 0) for s in report["samples"]), {}


# --- symbolic -------------------------------------------------------------------


def _richness_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    traj = _trajectory(cfg, state)
    C = cfg.experiment.get("C")
    rich, blocks = richness(traj.records, C, params.N)
    G = g_threshold(params.masses)
    witnesses = []
    ok = True
    for lo, hi in blocks:
        try:
            w = witness_collision(traj.records[lo:hi], params, G)
            witnesses.append({"block": [lo, hi], "time": w.time, "pair": list(w.pair), "rel_speed": w.rel_speed})
        except WitnessNotFound as exc:
            ok = False
            witnesses.append({"block": [lo, hi], "error": str(exc), "max_rel_speed": exc.max_rel_speed})
    return {"index": i, "collisions": len(traj), "rich": rich, "blocks": [list(b) for b in blocks],
            "G": G, "witnesses": witnesses, "ok": ok,
            "edges": formats.edge_list(traj.records)}


def run_richness(cfg, seed, threads):
    members = _run_members(_richness_member, cfg, seed, threads)
    artifacts = {}
    for m in members:
        edges = m.pop("edges")
        if "edges" in cfg.output.formats:
            artifacts[f"graph-{m['index']}.txt"] = edges
    payload = {"C": cfg.experiment.get("C"), "members": members, "passed": all(m["ok"] for m in members)}
    return payload, sum(m["collisions"] for m in members), artifacts


def envelope_state(params, a, rng) -> PhasePoint:
    """Random overlap-free state whose pairwise relative speeds are all at most ``a``."""
    from .sampling import random_positions

    q = random_positions(params, rng)
    u = rng.standard_normal((params.N, params.nu))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u *= rng.random((params.N, 1)) ** (1.0 / params.nu)
    v = 0.5 * a * u
    v -= params.mass_array @ v / params.total_mass
    # momentum removal shifts every ball equally, so relative speeds stay <= a
    return PhasePoint(q, v)


def _bounds_member(cfg, seed, i):
    params = cfg.params()
    a = cfg.experiment.get("a")
    state = envelope_state(params, a, stream(seed, i))
    traj = simulate(state, params, max_time=cfg.run.max_time, max_collisions=cfg.run.max_collisions,
                    tol=cfg.run.tolerances(), require_normalized=False)
    out = relative_speed_envelope(traj, a, raise_on_failure=False)
    out["index"] = i
    out["collisions"] = len(traj)
    return out


def run_bounds(cfg, seed, threads):
    params = cfg.params()
    masses = params.masses
    f1 = f_bound(1.0, masses)
    payload = {"masses": list(masses), "f1": f1, "G": g_threshold(masses),
               "M": params.total_mass, "m_min": params.m_min,
               "envelope_factor": 2 * math.sqrt(params.total_mass / params.m_min)}
    if len(masses) <= 8:
        payload["f1_bruteforce"] = f_bound_bruteforce(1.0, masses)
    consistent = "f1_bruteforce" not in payload or math.isclose(payload["f1_bruteforce"], f1, rel_tol=1e-12)
    members = _run_members(_bounds_member, cfg, seed, threads) if cfg.run.samples else []
    payload["a"] = cfg.experiment.get("a")
    payload["members"] = members
    payload["passed"] = bool(consistent and all(m["ok"] for m in members))
    return payload, sum(m["collisions"] for m in members), {}


# --- contraction ----------------------------------------------------------------


def _contraction_member(cfg, seed, i):
    params = cfg.params()
    state = initial_state(cfg, seed, i)
    out = {"index": i, "results": []}
    n = cfg.run.max_collisions or 2000
    for L in cfg.experiment.get("L"):
        t, xi, info = find_contracting_vector(state, L, params, max_collisions=n)
        info = {k: (list(v) if isinstance(v, tuple) else v) for k, v in info.items()}
        info.update({"L": L, "t": t, "ok": info["measured_ratio"] < 1.0 / L, "q_at_0": q_form(xi, params)})
        out["results"].append(info)
    out["ok"] = all(r["ok"] for r in out["results"])
    return out


def run_contraction(cfg, seed, threads):
    members = _run_members(_contraction_member, cfg, seed, threads)
    payload = {"members": members, "passed": all(m["ok"] for m in members)}
    return payload, 0, {}


RUNNERS = {
    "simulate": run_simulate,
    "conservation-audit": run_conservation,
    "q-audit": run_q_audit,
    "expansion-audit": run_expansion,
    "subspace": run_subspace,
    "sufficiency-scan": run_sufficiency,
    "richness-scan": run_richness,
    "bounds-audit": run_bounds,
    "ansatz-probe": run_ansatz,
    "contraction-search": run_contraction,
}
