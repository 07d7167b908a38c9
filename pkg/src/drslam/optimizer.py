"""Levenberg-Marquardt bundle adjustment over pose and landmark variables.

One solver core drives all three problem shapes: motion-only (single free
pose, landmarks fixed), local BA (window of keyframes plus their landmarks),
and global BA (everything, first keyframe fixed). Visual factors carry a
Huber kernel; DR factors are whitened by their alpha-scaled information and
carry no kernel. The linear solve eliminates landmarks by Schur complement;
a dense path exists for verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AngleNearPi,
    Diverged,
    GaugeUnderconstrained,
    NoConstraints,
    SingularSystem,
)
from .factors import DrFactor, dr_residual, dr_residual_saturated, information_sqrt
from .geometry import CameraIntrinsics, Pose, Z_MIN, compose, exp_se3_vec
from .weighting import NominalDrInformation, WeightBounds, dr_weight


@dataclass
class PoseVariable:
    pose: Pose
    fixed: bool = False


@dataclass
class LandmarkVariable:
    position: np.ndarray
    fixed: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float).copy()


@dataclass
class Problem:
    intrinsics: CameraIntrinsics | None = None
    poses: dict = field(default_factory=dict)          # id -> PoseVariable
    landmarks: dict = field(default_factory=dict)      # id -> LandmarkVariable
    reprojection_factors: list = field(default_factory=list)
    dr_factors: list = field(default_factory=list)

    def add_pose(self, pose_id: int, pose: Pose, fixed: bool = False):
        self.poses[pose_id] = PoseVariable(pose, fixed)

    def add_landmark(self, lm_id: int, position, fixed: bool = False):
        self.landmarks[lm_id] = LandmarkVariable(position, fixed)

    def validate(self):
        for f in self.reprojection_factors:
            if f.frame_id not in self.poses:
                raise KeyError(f"reprojection factor references unknown pose {f.frame_id}")
            if f.landmark_id not in self.landmarks:
                raise KeyError(f"reprojection factor references unknown landmark {f.landmark_id}")
        for f in self.dr_factors:
            if f.from_id not in self.poses or f.to_id not in self.poses:
                raise KeyError("dr factor references unknown pose")

    def free_pose_ids(self):
        return [i for i, v in self.poses.items() if not v.fixed]


@dataclass
class SolverConfig:
    max_iterations: int = 20
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    cost_tolerance: float = 1e-8
    step_tolerance: float = 1e-10
    max_damping: float = 1e10


@dataclass
class SolverReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    termination: str = "empty"
    min_pose_eigenvalue: float = float("nan")


class NormalEquations:
    """Gauss-Newton system in pose/landmark block form.

    Hpp is the dense pose-pose block (6F x 6F), Hll the block-diagonal
    landmark block stored as (L, 3, 3). Pose-landmark coupling blocks are
    kept as flat arrays (one 6x3 block per active observation) so the Schur
    elimination can run fully vectorized.
    """

    def __init__(self, n_pose_free: int, n_lm_free: int):
        self.n_pose_free = n_pose_free
        self.n_lm_free = n_lm_free
        self.Hpp = np.zeros((6 * n_pose_free, 6 * n_pose_free))
        self.bp = np.zeros(6 * n_pose_free)
        self.Hll = np.zeros((n_lm_free, 3, 3))
        self.bl = np.zeros((n_lm_free, 3))
        self._w_parts = []
        self._flat = None

    def add_coupling(self, pose_free_idx: int, lm_rows: np.ndarray, blocks: np.ndarray):
        self._w_parts.append((pose_free_idx, lm_rows, blocks))
        self._flat = None

    def coupling(self):
        """(pose idx (M,), landmark row (M,), block (M, 6, 3)) plus the
        within-landmark ordered observer pairs used by the Schur complement."""
        if self._flat is None:
            if self._w_parts:
                pose_idx = np.concatenate([np.full(len(r), p, dtype=int)
                                           for p, r, _ in self._w_parts])
                lm_idx = np.concatenate([r for _, r, _ in self._w_parts])
                blocks = np.concatenate([w for _, _, w in self._w_parts])
            else:
                pose_idx = np.zeros(0, dtype=int)
                lm_idx = np.zeros(0, dtype=int)
                blocks = np.zeros((0, 6, 3))
            order = np.argsort(lm_idx, kind="stable")
            pose_idx, lm_idx, blocks = pose_idx[order], lm_idx[order], blocks[order]
            pair_a, pair_b = [], []
            start = 0
            for end in np.flatnonzero(np.diff(lm_idx, append=-1)) + 1:
                members = np.arange(start, end)
                grid = np.meshgrid(members, members, indexing="ij")
                pair_a.append(grid[0].ravel())
                pair_b.append(grid[1].ravel())
                start = end
            pair_a = np.concatenate(pair_a) if pair_a else np.zeros(0, dtype=int)
            pair_b = np.concatenate(pair_b) if pair_b else np.zeros(0, dtype=int)
            self._flat = (pose_idx, lm_idx, blocks, pair_a, pair_b)
        return self._flat

    def dense(self, damping: float = 0.0):
        n = 6 * self.n_pose_free + 3 * self.n_lm_free
        H = np.zeros((n, n))
        b = np.zeros(n)
        np_ = 6 * self.n_pose_free
        H[:np_, :np_] = self.Hpp
        b[:np_] = self.bp
        pose_idx, lm_idx, blocks, _, _ = self.coupling()
        for j in range(self.n_lm_free):
            s = np_ + 3 * j
            H[s:s + 3, s:s + 3] = self.Hll[j]
            b[s:s + 3] = self.bl[j]
        for p, j, w in zip(pose_idx, lm_idx, blocks):
            s = np_ + 3 * j
            H[6 * p:6 * p + 6, s:s + 3] += w
        H[np_:, :np_] = H[:np_, np_:].T
        if damping:
            H = H + damping * np.eye(n)
        return H, b

    def pose_block(self) -> np.ndarray:
        return self.Hpp


def min_pose_eigenvalue(neq: NormalEquations) -> float:
    """Smallest eigenvalue of the pose-pose block (conditioning diagnostic)."""
    if neq.n_pose_free == 0:
        return float("nan")
    return float(np.linalg.eigvalsh(0.5 * (neq.Hpp + neq.Hpp.T)).min())


def schur_solve(neq: NormalEquations, damping: float = 0.0) -> np.ndarray:
    """Landmark-eliminated step, identical to the dense solve.

    Returns the concatenated (pose, landmark) step vector. Raises
    SingularSystem when the reduced camera system cannot be factorized.
    """
    n_p = neq.n_pose_free
    pose_idx, lm_idx, blocks, pair_a, pair_b = neq.coupling()
    try:
        cinv = np.linalg.inv(neq.Hll + damping * np.eye(3)) if neq.n_lm_free else \
            np.zeros((0, 3, 3))
    except np.linalg.LinAlgError as e:
        raise SingularSystem("landmark block singular under damping") from e

    s = (neq.Hpp + damping * np.eye(6 * n_p)).reshape(n_p, 6, n_p, 6).transpose(0, 2, 1, 3).copy()
    bs = neq.bp.reshape(n_p, 6).copy()
    if len(lm_idx):
        y = np.einsum("mij,mjk->mik", blocks, cinv[lm_idx])
        np.add.at(bs, pose_idx, -np.einsum("mik,mk->mi", y, neq.bl[lm_idx]))
        contrib = np.einsum("qik,qjk->qij", y[pair_a], blocks[pair_b])
        np.add.at(s, (pose_idx[pair_a], pose_idx[pair_b]), -contrib)
    s = s.transpose(0, 2, 1, 3).reshape(6 * n_p, 6 * n_p)
    if n_p:
        try:
            dp = np.linalg.solve(s, bs.reshape(-1))
        except np.linalg.LinAlgError as e:
            raise SingularSystem("reduced camera system is singular") from e
    else:
        dp = np.zeros(0)
    rhs = neq.bl.copy()
    if len(lm_idx):
        dpb = dp.reshape(n_p, 6)
        np.add.at(rhs, lm_idx, -np.einsum("mik,mi->mk", blocks, dpb[pose_idx]))
    dl = np.einsum("ljk,lk->lj", cinv, rhs) if neq.n_lm_free else np.zeros((0, 3))
    return np.concatenate([dp, dl.reshape(-1)])


def dense_solve(neq: NormalEquations, damping: float = 0.0) -> np.ndarray:
    H, b = neq.dense(damping)
    if H.shape[0] == 0:
        return np.zeros(0)
    try:
        return np.linalg.solve(H, b)
    except np.linalg.LinAlgError as e:
        raise SingularSystem("dense system is singular") from e


class _Linearizer:
    """Caches the factor structure of a Problem for repeated evaluation."""

    def __init__(self, problem: Problem):
        problem.validate()
        self.k = problem.intrinsics
        self.pose_ids = sorted(problem.poses)
        self.slot = {pid: i for i, pid in enumerate(self.pose_ids)}
        self.fixed = np.array([problem.poses[p].fixed for p in self.pose_ids])
        free_slots = [i for i, pid in enumerate(self.pose_ids) if not problem.poses[pid].fixed]
        self.free_index = {s: j for j, s in enumerate(free_slots)}
        self.n_pose_free = len(free_slots)

        self.lm_ids = sorted(problem.landmarks)
        self.lm_row = {l: i for i, l in enumerate(self.lm_ids)}
        self.lm_fixed = np.array([problem.landmarks[l].fixed for l in self.lm_ids], dtype=bool) \
            if self.lm_ids else np.zeros(0, dtype=bool)
        free_rows = [i for i, l in enumerate(self.lm_ids) if not problem.landmarks[l].fixed]
        self.lm_free_index = np.full(len(self.lm_ids), -1, dtype=int)
        for j, r in enumerate(free_rows):
            self.lm_free_index[r] = j
        self.n_lm_free = len(free_rows)

        # Group visual factors by observing pose for vectorized evaluation.
        by_pose = {}
        for f in problem.reprojection_factors:
            by_pose.setdefault(f.frame_id, []).append(f)
        self.groups = []
        for pid in sorted(by_pose):
            fs = by_pose[pid]
            self.groups.append((
                self.slot[pid],
                np.array([self.lm_row[f.landmark_id] for f in fs], dtype=int),
                np.array([f.observed for f in fs]),
                np.array([1.0 / f.pixel_std for f in fs]),
                np.array([f.huber_threshold for f in fs]),
            ))
        self.dr = [(self.slot[f.from_id], self.slot[f.to_id], f,
                    information_sqrt(f.information)) for f in problem.dr_factors]

        self.poses = [problem.poses[p].pose for p in self.pose_ids]
        self.lm_pos = np.array([problem.landmarks[l].position for l in self.lm_ids]) \
            if self.lm_ids else np.zeros((0, 3))

    def n_active_factors_for(self, pose_id: int) -> int:
        n = 0
        for slot, rows, *_ in self.groups:
            if self.pose_ids[slot] == pose_id:
                n += len(rows)
        for fs, ts, f, _ in self.dr:
            if pose_id in (self.pose_ids[fs], self.pose_ids[ts]):
                n += 1
        return n

    def apply_step(self, poses, lm_pos, step):
        dp = step[:6 * self.n_pose_free]
        dl = step[6 * self.n_pose_free:]
        new_poses = list(poses)
        for s, j in self.free_index.items():
            new_poses[s] = compose(poses[s], exp_se3_vec(dp[6 * j:6 * j + 6]))
        new_lm = lm_pos
        if self.n_lm_free:
            new_lm = lm_pos.copy()
            rows = np.where(self.lm_free_index >= 0)[0]
            new_lm[rows] += dl.reshape(-1, 3)[self.lm_free_index[rows]]
        return new_poses, new_lm

    def evaluate(self, poses, lm_pos, with_jacobians: bool):
        cost = 0.0
        neq = NormalEquations(self.n_pose_free, self.n_lm_free) if with_jacobians else None
        k = self.k
        for slot, rows, obs, inv_std, huber_k in self.groups:
            pose = poses[slot]
            R = pose.rotation_matrix
            X = lm_pos[rows]
            Y = (X - pose.t) @ R
            # Cost is a total function: behind-camera points are evaluated at
            # the clamped near plane (a huge, honest residual) so candidate
            # steps that flip geometry are rejected, never rewarded. Only the
            # Jacobians treat such factors as inactive for the iteration.
            z_all = np.maximum(Y[:, 2], Z_MIN)
            u_all = np.stack([k.fx * Y[:, 0] / z_all + k.cx,
                              k.fy * Y[:, 1] / z_all + k.cy], axis=1)
            rw_all = (obs - u_all) * inv_std[:, None]
            norms_all = np.linalg.norm(rw_all, axis=1)
            inside_all = norms_all <= huber_k
            cost += float(np.sum(np.where(
                inside_all, 0.5 * norms_all ** 2,
                huber_k * (norms_all - 0.5 * huber_k))))
            if not with_jacobians:
                continue
            active = Y[:, 2] > Z_MIN
            Y, rows_a = Y[active], rows[active]
            inv_a, hub_a = inv_std[active], huber_k[active]
            r_w, norms = rw_all[active], norms_all[active]
            inside = inside_all[active]
            if len(rows_a) == 0:
                continue
            z = Y[:, 2]
            w = np.where(inside, 1.0, hub_a / np.maximum(norms, 1e-300))
            jpi = np.zeros((len(rows_a), 2, 3))
            jpi[:, 0, 0] = k.fx / z
            jpi[:, 0, 2] = -k.fx * Y[:, 0] / z ** 2
            jpi[:, 1, 1] = k.fy / z
            jpi[:, 1, 2] = -k.fy * Y[:, 1] / z ** 2
            haty = np.zeros((len(rows_a), 3, 3))
            haty[:, 0, 1] = -Y[:, 2]
            haty[:, 0, 2] = Y[:, 1]
            haty[:, 1, 0] = Y[:, 2]
            haty[:, 1, 2] = -Y[:, 0]
            haty[:, 2, 0] = -Y[:, 1]
            haty[:, 2, 1] = Y[:, 0]
            scale = (inv_a * np.sqrt(w))[:, None, None]
            jp = np.concatenate([jpi, -np.einsum("nij,njk->nik", jpi, haty)], axis=2) * scale
            rw = r_w * np.sqrt(w)[:, None]
            pose_free = not self.fixed[slot]
            if pose_free:
                pj = self.free_index[slot]
                neq.Hpp[6 * pj:6 * pj + 6, 6 * pj:6 * pj + 6] += np.einsum("nij,nik->jk", jp, jp)
                neq.bp[6 * pj:6 * pj + 6] -= np.einsum("nij,ni->j", jp, rw)
            lm_free = ~self.lm_fixed[rows_a]
            if lm_free.any():
                jl = -np.einsum("nij,jk->nik", jpi, R.T) * scale
                jl_f = jl[lm_free]
                rw_f = rw[lm_free]
                frows = self.lm_free_index[rows_a[lm_free]]
                np.add.at(neq.Hll, frows, np.einsum("nij,nik->njk", jl_f, jl_f))
                np.add.at(neq.bl, frows, -np.einsum("nij,ni->nj", jl_f, rw_f))
                if pose_free:
                    wblocks = np.einsum("nij,nik->njk", jp[lm_free], jl_f)
                    neq.add_coupling(self.free_index[slot], frows, wblocks)
        for fs, ts, f, sqrt_info in self.dr:
            try:
                r, jf, jt = dr_residual(f, poses[fs], poses[ts])
            except AngleNearPi:
                # inactive for Jacobians this iteration, re-tested next time;
                # the saturated residual keeps the cost total and large
                rw = sqrt_info @ dr_residual_saturated(f, poses[fs], poses[ts])
                cost += 0.5 * float(rw @ rw)
                continue
            rw = sqrt_info @ r.as_vector()
            cost += 0.5 * float(rw @ rw)
            if not with_jacobians:
                continue
            jfw = sqrt_info @ jf
            jtw = sqrt_info @ jt
            f_free = not self.fixed[fs]
            t_free = not self.fixed[ts]
            if f_free:
                a = self.free_index[fs]
                neq.Hpp[6 * a:6 * a + 6, 6 * a:6 * a + 6] += jfw.T @ jfw
                neq.bp[6 * a:6 * a + 6] -= jfw.T @ rw
            if t_free:
                b_ = self.free_index[ts]
                neq.Hpp[6 * b_:6 * b_ + 6, 6 * b_:6 * b_ + 6] += jtw.T @ jtw
                neq.bp[6 * b_:6 * b_ + 6] -= jtw.T @ rw
            if f_free and t_free:
                a, b_ = self.free_index[fs], self.free_index[ts]
                blk = jfw.T @ jtw
                neq.Hpp[6 * a:6 * a + 6, 6 * b_:6 * b_ + 6] += blk
                neq.Hpp[6 * b_:6 * b_ + 6, 6 * a:6 * a + 6] += blk.T
        return cost, neq


def build_normal_equations(problem: Problem):
    """Linearize at the problem's current variables; returns (neq, cost)."""
    lin = _Linearizer(problem)
    cost, neq = lin.evaluate(lin.poses, lin.lm_pos, with_jacobians=True)
    return neq, cost


def _write_back(problem: Problem, lin: _Linearizer, poses, lm_pos):
    for pid, s in lin.slot.items():
        problem.poses[pid].pose = poses[s]
    for lid, row in lin.lm_row.items():
        problem.landmarks[lid].position = lm_pos[row].copy()


def solve(problem: Problem, config: SolverConfig | None = None) -> SolverReport:
    """Core LM loop; updates the problem's variables in place."""
    config = config or SolverConfig()
    lin = _Linearizer(problem)
    if lin.n_pose_free == 0 and lin.n_lm_free == 0:
        return SolverReport(termination="no_free_variables")

    poses, lm_pos = lin.poses, lin.lm_pos
    lam = config.initial_damping
    report = SolverReport(termination="max_iterations")
    accepted_any = False
    cost, neq = lin.evaluate(poses, lm_pos, with_jacobians=True)
    report.initial_cost = cost
    for it in range(1, config.max_iterations + 1):
        report.iterations = it
        accepted = False
        best_overshoot = math.inf
        step = None
        while lam <= config.max_damping:
            try:
                step = schur_solve(neq, lam)
            except SingularSystem:
                lam *= config.damping_up
                continue
            cand_poses, cand_lm = lin.apply_step(poses, lm_pos, step)
            new_cost, _ = lin.evaluate(cand_poses, cand_lm, with_jacobians=False)
            if new_cost <= cost:
                poses, lm_pos = cand_poses, cand_lm
                lam = max(lam * config.damping_down, 1e-15)
                accepted = True
                accepted_any = True
                break
            best_overshoot = min(best_overshoot, new_cost - cost)
            lam *= config.damping_up
        if not accepted:
            # Float-level stall at an optimum counts as convergence, not failure.
            if accepted_any or best_overshoot <= 1e-12 * max(cost, 1e-12):
                report.termination = "stalled"
                break
            raise Diverged("no damping value produced a cost decrease")
        decrease = cost - new_cost
        cost = new_cost
        if decrease <= config.cost_tolerance * max(cost, 1e-30):
            report.termination = "cost_tolerance"
            cost, neq = lin.evaluate(poses, lm_pos, with_jacobians=True)
            break
        cost, neq = lin.evaluate(poses, lm_pos, with_jacobians=True)
        if np.max(np.abs(step)) < config.step_tolerance:
            report.termination = "step_tolerance"
            break
    report.final_cost = cost
    report.min_pose_eigenvalue = min_pose_eigenvalue(neq)
    _write_back(problem, lin, poses, lm_pos)
    return report


def solve_motion_only(problem: Problem, q: float | None = None,
                      bounds: WeightBounds | None = None,
                      nominal: NominalDrInformation | None = None,
                      alpha: float | None = None,
                      config: SolverConfig | None = None):
    """Single-pose refinement with landmarks fixed.

    The DR prior information is rescaled to alpha * nominal, where alpha is
    given directly or derived from the quality score q. Raises NoConstraints
    when the free pose has no factor at all.
    """
    free = problem.free_pose_ids()
    if len(free) != 1:
        raise ValueError(f"motion-only solve needs exactly one free pose, got {len(free)}")
    for lid, lm in problem.landmarks.items():
        if not lm.fixed:
            raise ValueError("landmarks must be fixed in a motion-only solve")
    if alpha is None and q is not None:
        alpha = dr_weight(q, bounds or WeightBounds())
    if alpha is not None:
        if alpha <= 0:
            raise ValueError("DR weight must be positive")
        nominal = nominal or NominalDrInformation()
        info = alpha * nominal.matrix()
        problem.dr_factors = [
            DrFactor(f.from_id, f.to_id, f.delta, info) for f in problem.dr_factors
        ]
    if _Linearizer(problem).n_active_factors_for(free[0]) == 0:
        raise NoConstraints(f"pose {free[0]} has no visual and no DR factor")
    config = config or SolverConfig(max_iterations=10)
    report = solve(problem, config)
    return problem.poses[free[0]].pose, report


def solve_local_ba(problem: Problem, config: SolverConfig | None = None) -> SolverReport:
    """Window refinement; keyframes outside the window act as gauge anchors."""
    if len([p for p in problem.poses]) < 2:
        raise ValueError("local BA needs at least two keyframes")
    if not any(v.fixed for v in problem.poses.values()):
        raise GaugeUnderconstrained("local BA window has no fixed anchor pose")
    return solve(problem, config or SolverConfig())


def solve_global_ba(problem: Problem, config: SolverConfig | None = None) -> SolverReport:
    """Full-map refinement triggered by loop closure; first keyframe fixed."""
    if not any(v.fixed for v in problem.poses.values()):
        raise GaugeUnderconstrained("global BA has no fixed anchor pose")
    return solve(problem, config or SolverConfig())
