"""Simulated plant (lagged effectors, fabric tension, table contact, camera)
and the closed visual-servo loop tying vision, impedance and the plant
together."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, GeometryError
from .geometry import (DiffRanges, FrameGraph, Pose6, euler_to_matrix,
                       matrix_to_euler, matrix_to_rotvec, rotvec_to_matrix,
                       transform_from)
from .impedance import (ImpedanceParams, VirtualState, compose_desired,
                        distribute_displacement, external_params,
                        external_wrench, impedance_step, internal_params,
                        internal_wrench, validate_axis_partition)
from .images import ssd
from .scene import (SceneState, apply_camera_diff, camera_frame_diff,
                    default_camera, make_texture, render)
from .servo import (GainMatrix, control_law, integrate_reference,
                    object_to_effector_refs, twist_camera_to_world)

# ---------------------------------------------------------------------------
# plant


@dataclass
class PlantConfig:
    z_table: float = 0.0
    rest_length: float = 190.0    # grasp-to-grasp separation with slack fabric
    k_fabric: float = 1.5         # N per mm of stretch
    k_contact: float = 2.0        # N per mm of penetration
    tau: float = 0.05             # effector tracking lag [s]; 0 = ideal

    def validate(self):
        if self.rest_length <= 0 or self.k_fabric < 0 or self.k_contact < 0:
            raise ConfigError("plant stiffnesses must be nonnegative, rest length positive")
        if self.tau < 0:
            raise ConfigError("tracking time constant must be nonnegative")
        return self

    def to_dict(self):
        from dataclasses import asdict
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown PlantConfig keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class PlantState:
    e1: Pose6
    e2: Pose6

    def copy(self):
        return PlantState(self.e1.copy(), self.e2.copy())


def fabric_pose_from_effectors(e1: Pose6, e2: Pose6) -> Pose6:
    """Held-fabric frame: origin at the grasp midpoint, x-axis along the
    horizontal projection of the effector-1-to-effector-2 direction, z-axis
    aligned with the world z (yaw-only orientation)."""
    axis = e2.t - e1.t
    if np.linalg.norm(axis[:2]) < 1e-9:
        raise GeometryError("effectors are vertically stacked: fabric axis undefined")
    yaw = math.atan2(axis[1], axis[0])
    return Pose6((e1.t + e2.t) / 2.0, [0.0, 0.0, yaw])


def _relax_pose(pose: Pose6, target: Pose6, alpha):
    if alpha >= 1.0:
        return target.copy()
    t = pose.t + alpha * (target.t - pose.t)
    R0 = euler_to_matrix(pose.r)
    dR = euler_to_matrix(target.r) @ R0.T
    R = rotvec_to_matrix(alpha * matrix_to_rotvec(dR)) @ R0
    return Pose6(t, matrix_to_euler(R))


def plant_step(state: PlantState, desired, dt, cfg: PlantConfig):
    """Advance the plant by dt and report the reaction wrenches the
    environment exerts on each effector, in that effector's frame (fabric
    tension pulls the effectors toward each other; the table pushes up)."""
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    cfg.validate()
    d1, d2 = desired
    alpha = 1.0 if cfg.tau == 0.0 else 1.0 - math.exp(-dt / cfg.tau)
    new = PlantState(_relax_pose(state.e1, d1, alpha), _relax_pose(state.e2, d2, alpha))

    sep_vec = new.e2.t - new.e1.t
    sep = float(np.linalg.norm(sep_vec))
    f1w = np.zeros(3)
    f2w = np.zeros(3)
    stretch = sep - cfg.rest_length
    if stretch > 0.0 and sep > 1e-12:
        u = sep_vec / sep
        tension = cfg.k_fabric * stretch
        f1w += tension * u          # pulled toward effector 2
        f2w -= tension * u
    for pose, fw in ((new.e1, f1w), (new.e2, f2w)):
        pen = cfg.z_table - pose.t[2]
        if pen > 0.0:
            fw[2] += cfg.k_contact * pen
    R1 = euler_to_matrix(new.e1.r)
    R2 = euler_to_matrix(new.e2.r)
    f_e1 = np.concatenate([R1.T @ f1w, np.zeros(3)])
    f_e2 = np.concatenate([R2.T @ f2w, np.zeros(3)])
    return new, f_e1, f_e2


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ServoConfig:
    resolution: tuple = (96, 54)
    texture_seed: int = 900_000
    texture_contrast: float = 0.9
    texture_size: tuple = (192, 256)
    fabric_a_size: tuple = (160.0, 90.0)
    fabric_b_size: tuple = (400.0, 300.0)
    diff_ranges: DiffRanges = field(default_factory=DiffRanges)
    initial_diff: object = None          # 6-vector camera-frame offset, or None
    initial_height: float = 5.0          # starting fabric height [mm]
    gains: GainMatrix = field(default_factory=GainMatrix)
    period: float = 0.1
    inner_dt: float = 1e-3
    max_cycles: int = 250
    conv_t: float = 0.5                  # mm, in-plane translation error
    conv_r: float = np.deg2rad(0.1)
    stop_on_convergence: bool = True
    plant: PlantConfig = field(default_factory=PlantConfig)
    # zero stiffness in the loop: a spring term would balance against the
    # contact force and leave a permanent force error
    impedance_ext: ImpedanceParams = field(
        default_factory=lambda: external_params(k=0.0))
    impedance_int: ImpedanceParams = field(default_factory=internal_params)
    force_control: bool = True
    oracle_noise: float = 0.0            # sigma on the normalized prediction
    oracle_clip: bool = False
    lighting_gain: float = 1.0
    lighting_gradient: tuple = (0.0, 0.0)
    occluder_radius: float = 10.8        # mm; 0 disables the discs
    image_noise_sigma: float = 0.0
    divergence_factor: float = 5.0
    divergence_cycles: int = 10
    seed: int = 0

    def validate(self):
        if self.period <= 0 or self.inner_dt <= 0 or self.inner_dt > self.period:
            raise ConfigError("need 0 < inner_dt <= period")
        if self.max_cycles < 1:
            raise ConfigError("max_cycles must be >= 1")
        self.gains.validate()
        self.plant.validate()
        if self.force_control:
            self.impedance_ext.validate()
            self.impedance_int.validate()
            validate_axis_partition(self.gains, self.impedance_ext, self.impedance_int)
        return self

    def to_dict(self):
        return {
            "resolution": list(self.resolution),
            "texture_seed": self.texture_seed,
            "texture_contrast": self.texture_contrast,
            "texture_size": list(self.texture_size),
            "fabric_a_size": list(self.fabric_a_size),
            "fabric_b_size": list(self.fabric_b_size),
            "diff_ranges": {"t_max": self.diff_ranges.t_max, "r_max": self.diff_ranges.r_max},
            "initial_diff": None if self.initial_diff is None else list(self.initial_diff),
            "initial_height": self.initial_height,
            "gains": self.gains.to_dict(),
            "period": self.period, "inner_dt": self.inner_dt,
            "max_cycles": self.max_cycles,
            "conv_t": self.conv_t, "conv_r": self.conv_r,
            "stop_on_convergence": self.stop_on_convergence,
            "plant": self.plant.to_dict(),
            "impedance_ext": self.impedance_ext.to_dict(),
            "impedance_int": self.impedance_int.to_dict(),
            "force_control": self.force_control,
            "oracle_noise": self.oracle_noise, "oracle_clip": self.oracle_clip,
            "lighting_gain": self.lighting_gain,
            "lighting_gradient": list(self.lighting_gradient),
            "occluder_radius": self.occluder_radius,
            "image_noise_sigma": self.image_noise_sigma,
            "divergence_factor": self.divergence_factor,
            "divergence_cycles": self.divergence_cycles,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ServoConfig keys: {sorted(unknown)}")
        if "diff_ranges" in d:
            d["diff_ranges"] = DiffRanges(**d["diff_ranges"])
        if "gains" in d:
            d["gains"] = GainMatrix.from_dict(d["gains"])
        if "plant" in d:
            d["plant"] = PlantConfig.from_dict(d["plant"])
        for key in ("impedance_ext", "impedance_int"):
            if key in d:
                d[key] = ImpedanceParams.from_dict(d[key])
        for key in ("resolution", "texture_size", "fabric_a_size", "fabric_b_size",
                    "lighting_gradient"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d).validate()


@dataclass
class RunMetrics:
    cycles: list = field(default_factory=list)        # per-cycle dicts
    converged_step: int | None = None
    diverged: bool = False
    initial_ssd: float = 0.0
    final_ssd: float = 0.0
    initial_error: np.ndarray | None = None
    final_error: np.ndarray | None = None
    features: list = field(default_factory=list)      # optional GAP features

    def error_trace(self):
        return np.array([c["err_t"] for c in self.cycles])


class ServoSession:
    """Owns the scene, plant and controller state for one closed-loop run."""

    def __init__(self, cfg: ServoConfig):
        cfg.validate()
        self.cfg = cfg
        self.camera = default_camera(cfg.resolution)
        self.texture = make_texture(cfg.texture_seed, cfg.texture_size,
                                    cfg.texture_contrast)
        self.aligned = Pose6()
        rng = np.random.default_rng(cfg.seed)
        if cfg.initial_diff is None:
            span = cfg.diff_ranges.span()
            diff0 = rng.uniform(-span, span)
            diff0[2] = 0.0
        else:
            diff0 = np.asarray(cfg.initial_diff, dtype=np.float64).reshape(6)
        start = apply_camera_diff(self.camera, Pose6([0.0, 0.0, cfg.initial_height]),
                                  diff0)
        half = cfg.plant.rest_length / 2.0
        R0 = euler_to_matrix(start.r)
        self.frames = FrameGraph(
            world_from_camera=self.camera.world_from_camera,
            object_from_e1=transform_from(np.eye(3), [-half, 0.0, 0.0]),
            object_from_e2=transform_from(np.eye(3), [half, 0.0, 0.0]),
            world_from_object=start.to_matrix())
        self.plant_state = PlantState(
            Pose6(start.t + R0 @ np.array([-half, 0.0, 0.0]), start.r.copy()),
            Pose6(start.t + R0 @ np.array([half, 0.0, 0.0]), start.r.copy()))
        self.q_ref = fabric_pose_from_effectors(self.plant_state.e1,
                                                self.plant_state.e2)
        self.ext_state = VirtualState()
        self.int_state = VirtualState()
        self.noise_rng = np.random.default_rng((cfg.seed << 8) ^ 0xC0FFEE)
        # the reference capture shows the bare sheet (no held fabric, no
        # occluders), matching the desired images the network trained on
        self.i_des = render(SceneState(
            camera=self.camera,
            fabric_a_pose=None,
            fabric_b_size=cfg.fabric_b_size,
            fabric_a_size=cfg.fabric_a_size), self.texture, cfg.resolution)

    def fabric_pose(self):
        return fabric_pose_from_effectors(self.plant_state.e1, self.plant_state.e2)

    def observe(self, cycle):
        """Current grayscale view: held fabric plus grasp occluders."""
        cfg = self.cfg
        occ = ()
        if cfg.occluder_radius > 0.0:
            occ = ((self.plant_state.e1.t.copy(), cfg.occluder_radius),
                   (self.plant_state.e2.t.copy(), cfg.occluder_radius))
        st = SceneState(
            camera=self.camera, fabric_a_pose=self.fabric_pose(),
            fabric_b_size=cfg.fabric_b_size, fabric_a_size=cfg.fabric_a_size,
            lighting_gain=cfg.lighting_gain, lighting_gradient=cfg.lighting_gradient,
            occluders=occ, noise_sigma=cfg.image_noise_sigma,
            noise_seed=(cfg.seed * 1_000_003 + cycle) & 0x7FFFFFFF)
        return render(st, self.texture, cfg.resolution)

    def true_diff(self):
        pose = self.fabric_pose()
        aligned = Pose6([0.0, 0.0, pose.t[2]], self.aligned.r.copy())
        return camera_frame_diff(self.camera, pose, aligned)

    def oracle_predict(self):
        label = self.cfg.diff_ranges.normalize(self.true_diff())
        if self.cfg.oracle_noise > 0.0:
            label = label + self.noise_rng.normal(0.0, self.cfg.oracle_noise, 6)
        if self.cfg.oracle_clip:
            label = np.clip(label, 0.0, 1.0)
        return label


def run_servo_loop(cfg: ServoConfig, predictor=None, out_dir=None,
                   feature_fn=None, log=None) -> RunMetrics:
    """Closed loop: observe, predict the pose difference, integrate the
    visual-servo reference, run the inner impedance/plant loop.  Raises
    DivergenceError (after writing logs) if the in-plane error exceeds
    divergence_factor times its initial value for divergence_cycles
    consecutive vision cycles."""
    session = ServoSession(cfg)
    metrics = RunMetrics()
    n_inner = max(int(round(cfg.period / cfg.inner_dt)), 1)
    bad_streak = 0
    initial_err_t = None

    for cycle in range(cfg.max_cycles):
        i_cur = session.observe(cycle)
        true = session.true_diff()
        if predictor is None:
            label = session.oracle_predict()
        else:
            label = np.asarray(predictor(session.i_des, i_cur), dtype=np.float64)
        if feature_fn is not None:
            metrics.features.append(np.asarray(feature_fn(session.i_des, i_cur)))
        pred = cfg.diff_ranges.denormalize(label)
        err_t = float(np.linalg.norm(true[:2]))
        err_r = abs(float(true[5]))
        frame = ssd(i_cur, session.i_des)
        if cycle == 0:
            metrics.initial_ssd = frame
            metrics.initial_error = true.copy()
            initial_err_t = max(err_t, 1e-9)

        v_cam = control_law(pred, cfg.gains)
        v_world = twist_camera_to_world(v_cam, session.frames)
        session.q_ref = integrate_reference(session.q_ref, v_world, cfg.period)
        ref_e1, ref_e2 = object_to_effector_refs(session.q_ref, session.frames)

        f_ext = np.zeros(6)
        f_int = np.zeros(6)
        for _ in range(n_inner):
            session.frames.world_from_object = session.fabric_pose().to_matrix()
            if cfg.force_control:
                ext1, ext2 = distribute_displacement(session.ext_state.dq,
                                                     np.zeros(6), session.frames)
                int1, int2 = distribute_displacement(np.zeros(6),
                                                     session.int_state.dq,
                                                     session.frames)
            else:
                ext1 = ext2 = int1 = int2 = np.zeros(6)
            d1 = compose_desired(ref_e1, ext1, int1)
            d2 = compose_desired(ref_e2, ext2, int2)
            session.plant_state, f_e1, f_e2 = plant_step(
                session.plant_state, (d1, d2), cfg.inner_dt, cfg.plant)
            if cfg.force_control:
                f_ext = external_wrench(f_e1, f_e2, session.frames)
                f_int = internal_wrench(f_e1, f_e2, session.frames)
                session.ext_state = impedance_step(session.ext_state,
                                                   cfg.impedance_ext, f_ext,
                                                   cfg.inner_dt)
                session.int_state = impedance_step(session.int_state,
                                                   cfg.impedance_int, f_int,
                                                   cfg.inner_dt)

        separation = float(np.linalg.norm(session.plant_state.e2.t
                                          - session.plant_state.e1.t))
        metrics.cycles.append({
            "cycle": cycle, "time": cycle * cfg.period,
            "ssd": frame, "err_t": err_t, "err_r": err_r,
            "true": true.tolist(), "pred": pred.tolist(),
            "q_ref": session.q_ref.as_vector().tolist(),
            "f_ext": f_ext.tolist(), "f_int": f_int.tolist(),
            "dq_ext": session.ext_state.dq.tolist(),
            "dq_int": session.int_state.dq.tolist(),
            "separation": separation,
        })
        if log and cycle % 25 == 0:
            log(f"cycle {cycle}: err_t {err_t:.3f} mm err_r {np.rad2deg(err_r):.3f} deg")

        if err_t > cfg.divergence_factor * initial_err_t:
            bad_streak += 1
            if bad_streak >= cfg.divergence_cycles:
                metrics.diverged = True
                _finalize(metrics, session, cfg, out_dir)
                raise DivergenceError(
                    f"in-plane error {err_t:.2f} mm exceeded "
                    f"{cfg.divergence_factor}x the initial error for "
                    f"{cfg.divergence_cycles} cycles")
        else:
            bad_streak = 0
        if (metrics.converged_step is None and err_t < cfg.conv_t
                and err_r < cfg.conv_r):
            metrics.converged_step = cycle
            if cfg.stop_on_convergence:
                break

    _finalize(metrics, session, cfg, out_dir)
    return metrics


def _finalize(metrics: RunMetrics, session: ServoSession, cfg: ServoConfig, out_dir):
    final_cycle = len(metrics.cycles)
    i_final = session.observe(final_cycle)
    metrics.final_ssd = ssd(i_final, session.i_des)
    metrics.final_error = session.true_diff()
    if out_dir is not None:
        write_run_logs(metrics, cfg, out_dir)


def _fmt(values):
    return ",".join(f"{v:.17g}" for v in values)


def write_run_logs(metrics: RunMetrics, cfg: ServoConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "trajectory.csv"), "w") as f:
        f.write("time," + ",".join(f"q_ref_{a}" for a in "xyz") + ","
                + ",".join(f"q_ref_r{a}" for a in "xyz") + ","
                + ",".join(f"pred_{i}" for i in range(6)) + ","
                + ",".join(f"true_{i}" for i in range(6)) + "\n")
        for c in metrics.cycles:
            f.write(_fmt([c["time"]] + c["q_ref"] + c["pred"] + c["true"]) + "\n")
    with open(os.path.join(out_dir, "wrench.csv"), "w") as f:
        f.write("time," + ",".join(f"f_ext_{i}" for i in range(6)) + ","
                + ",".join(f"f_int_{i}" for i in range(6)) + ","
                + ",".join(f"dq_ext_{i}" for i in range(6)) + ","
                + ",".join(f"dq_int_{i}" for i in range(6)) + "\n")
        for c in metrics.cycles:
            f.write(_fmt([c["time"]] + c["f_ext"] + c["f_int"]
                         + c["dq_ext"] + c["dq_int"]) + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as f:
        f.write("cycle,ssd,err_t_mm,err_r_rad,separation_mm\n")
        for c in metrics.cycles:
            f.write(_fmt([c["cycle"], c["ssd"], c["err_t"], c["err_r"],
                          c["separation"]]) + "\n")
    summary = {
        "converged_step": metrics.converged_step,
        "diverged": metrics.diverged,
        "initial_ssd": metrics.initial_ssd,
        "final_ssd": metrics.final_ssd,
        "initial_error": None if metrics.initial_error is None
        else metrics.initial_error.tolist(),
        "final_error": None if metrics.final_error is None
        else metrics.final_error.tolist(),
        "cycles_run": len(metrics.cycles),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)


def oracle_contraction_config(**overrides):
    """Ideal-tracking configuration for controller-only validation: no
    effector lag and no occluders or image noise."""
    base = dict(
        plant=PlantConfig(tau=0.0),
        initial_diff=np.array([20.0, 20.0, 0.0, 0.0, 0.0, np.deg2rad(10.0)]),
        initial_height=5.0,
        occluder_radius=0.0,
        image_noise_sigma=0.0,
        oracle_noise=0.0,
    )
    base.update(overrides)
    return ServoConfig(**base)
