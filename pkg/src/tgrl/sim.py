"""Three-bar tensegrity dynamics.

Rigid rods carry the mass; tendons are tension-only linear spring-dampers
between endcaps; the ground is a penalty plane at z = 0 with regularized
Coulomb friction. Ground slope is modelled by tilting gravity, so the contact
plane never moves.

Endcap ``2*r`` is the left end of rod ``r`` and ``2*r + 1`` its right end.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.spatial import ConvexHull

log = logging.getLogger(__name__)

PASSIVE = "passive_cross"
ACTIVE = "active_side"

TWIST = math.radians(150.0)
PENETRATION_BOUND = 0.02
BLOWUP_SPEED = 1e3

STIFFNESS_RANGE = (30.0, 1200.0)
# passive cables are cut to their rest length at this stiffness; other
# stiffness values change the material, not the cable length
DESIGN_PASSIVE_STIFFNESS = 450.0
SLOPE_RANGE_DEG = (0.0, 35.0)


class ConfigError(ValueError):
    pass


class SingularGeometryError(ValueError):
    pass


class DegenerateOrientationError(ValueError):
    pass


class SimulationBlowup(RuntimeError):
    def __init__(self, time: float, speed: float):
        super().__init__(f"simulation diverged at t={time:.4f}s (speed {speed:.3g} m/s)")
        self.time = time
        self.speed = speed


@dataclass(frozen=True)
class RobotConfig:
    rod_length: float = 1.0
    rod_mass: float = 0.5
    endcap_radius: float = 0.025
    face_radius: float = 0.35
    passive_stiffness: float = 450.0
    active_stiffness: float = 1500.0
    tendon_damping: float = 5.0
    passive_pretension: float = 40.0
    contact_stiffness: float = 1e4
    contact_damping: float = 100.0
    friction: float = 0.6
    friction_velocity: float = 0.02
    gravity: float = 9.81
    slope_deg: float = 0.0
    action_range: float = 0.4
    substep: float = 1e-3
    rate_limit: float = 0.5
    mirrored: bool = False

    def validate(self) -> None:
        positive = (
            "rod_length", "rod_mass", "endcap_radius", "face_radius", "passive_stiffness",
            "active_stiffness", "passive_pretension", "contact_stiffness", "substep", "rate_limit",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("tendon_damping", "contact_damping", "friction", "gravity", "friction_velocity"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0 < self.action_range < 1:
            raise ConfigError("action_range must lie in (0, 1)")
        if 2 * self.face_radius * math.sin(TWIST / 2) >= self.rod_length:
            raise ConfigError("face_radius too large for rod_length")


@dataclass(frozen=True)
class TendonSpec:
    endpoints: tuple[int, int]
    kind: str
    stiffness: float
    damping: float
    rest_length: float


@dataclass
class RobotModel:
    config: RobotConfig
    tendons: list[TendonSpec]
    rod_length: float
    rod_mass: float
    inertia: float  # about any axis through the center, perpendicular to the rod
    endcap_radius: float
    gravity: np.ndarray  # (3,) acceleration vector
    ends: np.ndarray  # (n_tendons, 2) int
    stiffness: np.ndarray
    damping: np.ndarray
    rest: np.ndarray  # nominal rest length of every tendon
    active: np.ndarray  # tendon indices of the 6 actuated tendons
    l0: np.ndarray  # nominal rest lengths of the active tendons
    l_min: np.ndarray
    l_max: np.ndarray

    n_rods = 3
    n_endcaps = 6

    @property
    def passive(self) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.tendons) if t.kind == PASSIVE])

    @property
    def slot(self) -> np.ndarray:
        """Index into the command vector for every tendon, -1 when passive."""
        out = np.full(len(self.tendons), -1, dtype=np.int64)
        out[self.active] = np.arange(len(self.active))
        return out


@dataclass
class SimState:
    pos: np.ndarray  # (3, 3) rod centers
    quat: np.ndarray  # (3, 4) w, x, y, z; body z axis runs left end -> right end
    vel: np.ndarray
    omega: np.ndarray
    time: float = 0.0
    rest: np.ndarray = field(default_factory=lambda: np.zeros(6))

    def copy(self) -> "SimState":
        return SimState(
            self.pos.copy(), self.quat.copy(), self.vel.copy(), self.omega.copy(),
            self.time, self.rest.copy(),
        )


@dataclass
class Observation:
    positions: np.ndarray  # (6, 3)
    velocities: np.ndarray  # (6, 3)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.positions, self.velocities], axis=1).ravel()


# ---------------------------------------------------------------------------
# construction


def _prism_nodes(config: RobotConfig) -> np.ndarray:
    R = config.face_radius
    half_width = 0.5 * math.sqrt(config.rod_length**2 - 2 * R * R * (1 - math.cos(TWIST)))
    # rotate so two endcaps sit level at the bottom
    phase = math.radians(15.0)
    X = np.zeros((6, 3))
    for r in range(3):
        th = 2 * math.pi * r / 3 + phase
        X[2 * r] = (R * math.cos(th), -half_width, R * math.sin(th))
        X[2 * r + 1] = (R * math.cos(th + TWIST), half_width, R * math.sin(th + TWIST))
    if config.mirrored:
        X[:, 1] *= -1
    return X


def _topology() -> list[tuple[tuple[int, int], str]]:
    """Tendon list: 3 cross tendons and the 6 edges of the two triangular faces."""
    out = []
    for r in range(3):
        # left end of rod r to the right end of rod r-1 (30 deg twist)
        out.append(((2 * r, 2 * ((r - 1) % 3) + 1), PASSIVE))
    for side in (0, 1):
        for a, b in ((0, 1), (1, 2), (0, 2)):
            out.append(((2 * a + side, 2 * b + side), ACTIVE))
    return out


def check_topology(ends: np.ndarray, kinds: list[str]) -> None:
    counts = {PASSIVE: kinds.count(PASSIVE), ACTIVE: kinds.count(ACTIVE)}
    if counts[PASSIVE] != 3 or counts[ACTIVE] != 6:
        raise ConfigError(f"expected 3 passive and 6 active tendons, got {counts}")
    seen = set()
    for a, b in ends:
        a, b = int(a), int(b)
        if a == b or a // 2 == b // 2:
            raise ConfigError(f"tendon ({a}, {b}) must join endcaps of different rods")
        key = (min(a, b), max(a, b))
        if key in seen:
            raise ConfigError(f"duplicate tendon {key}")
        seen.add(key)


def gravity_vector(config: RobotConfig) -> np.ndarray:
    th = math.radians(config.slope_deg)
    # uphill is +x
    return config.gravity * np.array([-math.sin(th), 0.0, -math.cos(th)])


def _quat_from_axis(axis: np.ndarray) -> np.ndarray:
    """Shortest rotation taking body z onto ``axis``."""
    z = np.array([0.0, 0.0, 1.0])
    a = axis / np.linalg.norm(axis)
    c = float(np.dot(z, a))
    if c < -1 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    v = np.cross(z, a)
    q = np.array([1.0 + c, *v])
    return q / np.linalg.norm(q)


def state_from_nodes(X: np.ndarray, rest: np.ndarray) -> SimState:
    left, right = X[0::2], X[1::2]
    pos = 0.5 * (left + right)
    quat = np.stack([_quat_from_axis(right[r] - left[r]) for r in range(3)])
    return SimState(pos, quat, np.zeros((3, 3)), np.zeros((3, 3)), 0.0, rest.copy())


def build_robot(config: RobotConfig | None = None) -> tuple[RobotModel, SimState]:
    config = config or RobotConfig()
    config.validate()
    X = _prism_nodes(config)
    topo = _topology()
    ends = np.array([e for e, _ in topo], dtype=np.int64)
    kinds = [k for _, k in topo]
    check_topology(ends, kinds)

    # Self-stress of the 150 deg prism: face force density = cross density / sqrt(3).
    lengths = np.linalg.norm(X[ends[:, 1]] - X[ends[:, 0]], axis=1)
    is_active = np.array([k == ACTIVE for k in kinds])
    q_cross = config.passive_pretension / lengths[~is_active][0]
    tension = np.where(is_active, q_cross / math.sqrt(3.0), q_cross) * lengths
    stiffness = np.where(is_active, config.active_stiffness, config.passive_stiffness)
    rest = lengths - tension / np.where(is_active, config.active_stiffness, DESIGN_PASSIVE_STIFFNESS)
    if np.any(rest <= 0):
        raise ConfigError("pretension too large for tendon stiffness")
    damping = np.full(len(topo), config.tendon_damping)

    tendons = [
        TendonSpec((int(a), int(b)), k, float(s), float(c), float(r))
        for (a, b), k, s, c, r in zip(ends, kinds, stiffness, damping, rest)
    ]
    active = np.flatnonzero(is_active)
    l0 = rest[active].copy()
    model = RobotModel(
        config=config,
        tendons=tendons,
        rod_length=config.rod_length,
        rod_mass=config.rod_mass,
        inertia=config.rod_mass * config.rod_length**2 / 12.0,
        endcap_radius=config.endcap_radius,
        gravity=gravity_vector(config),
        ends=ends,
        stiffness=stiffness.astype(float),
        damping=damping,
        rest=rest,
        active=active,
        l0=l0,
        l_min=l0 * (1 - config.action_range),
        l_max=l0 * (1 + config.action_range),
    )
    return model, state_from_nodes(_rest_pose(X, config.endcap_radius), l0)


def _rest_pose(X: np.ndarray, radius: float) -> np.ndarray:
    """Lay the prism on a side face of its hull, heading along +x, CoM over the origin."""
    hull = ConvexHull(X)
    faces = sorted(
        (tuple(sorted(int(i) for i in simp)), eq[:3])
        for simp, eq in zip(hull.simplices, hull.equations)
    )
    # side faces hold both left and right endcaps
    side = [(f, n) for f, n in faces if {i % 2 for i in f} == {0, 1}]
    _, normal = min(side, key=lambda fn: fn[1][2])
    X = X @ _rotation_between(normal, np.array([0.0, 0.0, -1.0])).T
    _, yaw = com_and_yaw_from_endcaps(X)
    c, s = math.cos(-yaw), math.sin(-yaw)
    X = X @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]).T
    return X - np.array([X[:, 0].mean(), X[:, 1].mean(), X[:, 2].min() - radius])


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(np.dot(a, b))
    K = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + K + K @ K / (1.0 + c)


def apply_perturbation(config: RobotConfig, kind: str, value: float) -> RobotConfig:
    """Return a copy of ``config`` with passive stiffness (N/m) or slope (degrees) replaced."""
    if kind == "stiffness":
        if value < 0:
            raise ConfigError(f"stiffness must be non-negative, got {value}")
        lo, hi = STIFFNESS_RANGE
        if not lo <= value <= hi:
            warnings.warn(f"stiffness {value} N/m outside swept range {STIFFNESS_RANGE}", stacklevel=2)
        return dataclasses.replace(config, passive_stiffness=float(value))
    if kind == "slope":
        lo, hi = SLOPE_RANGE_DEG
        if not lo <= value <= hi:
            warnings.warn(f"slope {value} deg outside swept range {SLOPE_RANGE_DEG}", stacklevel=2)
        return dataclasses.replace(config, slope_deg=float(value))
    raise ConfigError(f"unknown perturbation kind {kind!r}")


# ---------------------------------------------------------------------------
# force laws (scalar kernels shared by the integrator and the public API)


@njit(cache=True)
def _tendon_magnitude(k, c, rest, pa, pb, va, vb, out_u):
    dx = pb[0] - pa[0]
    dy = pb[1] - pa[1]
    dz = pb[2] - pa[2]
    length = math.sqrt(dx * dx + dy * dy + dz * dz)
    out_u[0] = dx / length
    out_u[1] = dy / length
    out_u[2] = dz / length
    ext = length - rest
    if ext <= 0.0:
        return 0.0
    rate = (
        out_u[0] * (vb[0] - va[0]) + out_u[1] * (vb[1] - va[1]) + out_u[2] * (vb[2] - va[2])
    )
    f = k * ext + c * rate
    return f if f > 0.0 else 0.0


@njit(cache=True)
def _contact(p, v, radius, kc, cc, mu, vreg, max_friction_gain, out):
    out[0] = 0.0
    out[1] = 0.0
    out[2] = 0.0
    pen = radius - p[2]
    if pen <= 0.0:
        return
    fn = kc * pen - cc * v[2]
    if fn <= 0.0:
        return
    out[2] = fn
    speed = math.sqrt(v[0] * v[0] + v[1] * v[1])
    if speed == 0.0:
        return
    ft = mu * fn * speed / math.sqrt(speed * speed + vreg * vreg)
    # cap so one substep of friction cannot reverse the slip
    cap = max_friction_gain * speed
    if ft > cap:
        ft = cap
    out[0] = -ft * v[0] / speed
    out[1] = -ft * v[1] / speed


@njit(cache=True)
def _rotate(q, v, out):
    w, x, y, z = q[0], q[1], q[2], q[3]
    # t = 2 * cross(q.xyz, v)
    tx = 2.0 * (y * v[2] - z * v[1])
    ty = 2.0 * (z * v[0] - x * v[2])
    tz = 2.0 * (x * v[1] - y * v[0])
    out[0] = v[0] + w * tx + (y * tz - z * ty)
    out[1] = v[1] + w * ty + (z * tx - x * tz)
    out[2] = v[2] + w * tz + (x * ty - y * tx)


@njit(cache=True)
def _endcaps(pos, quat, vel, omega, half, P, V):
    ez = np.array([0.0, 0.0, 1.0])
    a = np.zeros(3)
    for r in range(pos.shape[0]):
        _rotate(quat[r], ez, a)
        for s in range(2):
            sign = -1.0 if s == 0 else 1.0
            i = 2 * r + s
            for d in range(3):
                P[i, d] = pos[r, d] + sign * half * a[d]
            rx, ry, rz = sign * half * a[0], sign * half * a[1], sign * half * a[2]
            w = omega[r]
            V[i, 0] = vel[r, 0] + w[1] * rz - w[2] * ry
            V[i, 1] = vel[r, 1] + w[2] * rx - w[0] * rz
            V[i, 2] = vel[r, 2] + w[0] * ry - w[1] * rx


@njit(cache=True)
def _energy(pos, vel, omega, P, rest, ends, stiff, nominal, slot, mass, inertia, radius, grav, kc):
    e = 0.0
    for r in range(pos.shape[0]):
        for d in range(3):
            e += 0.5 * mass * vel[r, d] * vel[r, d] + 0.5 * inertia * omega[r, d] * omega[r, d]
            e -= mass * grav[d] * pos[r, d]
    for t in range(ends.shape[0]):
        a = ends[t, 0]
        b = ends[t, 1]
        r0 = rest[slot[t]] if slot[t] >= 0 else nominal[t]
        ln = math.sqrt((P[b, 0] - P[a, 0]) ** 2 + (P[b, 1] - P[a, 1]) ** 2 + (P[b, 2] - P[a, 2]) ** 2)
        if ln > r0:
            e += 0.5 * stiff[t] * (ln - r0) ** 2
    for i in range(P.shape[0]):
        pen = radius - P[i, 2]
        if pen > 0.0:
            e += 0.5 * kc * pen * pen
    return e


@njit(cache=True)
def _limit_energy(vel, omega, mass, inertia, excess):
    """Remove ``excess`` joules of kinetic energy relative to the centre of mass.

    Total linear momentum is untouched. Returns the part that could not be removed.
    """
    n = vel.shape[0]
    vc = np.zeros(3)
    for r in range(n):
        for d in range(3):
            vc[d] += vel[r, d] / n
    ke = 0.0
    for r in range(n):
        for d in range(3):
            ke += 0.5 * mass * (vel[r, d] - vc[d]) ** 2 + 0.5 * inertia * omega[r, d] ** 2
    if ke <= 0.0:
        return excess
    target = ke - excess
    if target < 0.0:
        target = 0.0
    scale = math.sqrt(target / ke)
    for r in range(n):
        for d in range(3):
            vel[r, d] = vc[d] + scale * (vel[r, d] - vc[d])
            omega[r, d] *= scale
    return excess - (ke - target)


@njit(cache=True)
def _advance(pos, quat, vel, omega, rest, command, nsub, dt, rate,
             ends, stiff, damp, nominal, slot, mass, half, inertia, radius, grav,
             kc, cc, mu, vreg, max_speed):
    """Semi-implicit Euler substeps, in place. Returns the substep index of a blowup or -1."""
    n_t = ends.shape[0]
    P = np.zeros((6, 3))
    V = np.zeros((6, 3))
    F = np.zeros((6, 3))
    u = np.zeros(3)
    fc = np.zeros(3)
    # effective mass of a rod endpoint (translation + rotation) bounds the friction gain
    m_end = 1.0 / (1.0 / mass + half * half / inertia)
    gain = m_end / dt
    max_step = rate * dt
    for k in range(nsub):
        for j in range(rest.shape[0]):
            d = command[j] - rest[j]
            if d > max_step:
                d = max_step
            elif d < -max_step:
                d = -max_step
            rest[j] += d
        _endcaps(pos, quat, vel, omega, half, P, V)
        e_ref = _energy(pos, vel, omega, P, rest, ends, stiff, nominal, slot, mass, inertia, radius, grav, kc)
        F[:, :] = 0.0
        for t in range(n_t):
            a = ends[t, 0]
            b = ends[t, 1]
            r0 = rest[slot[t]] if slot[t] >= 0 else nominal[t]
            f = _tendon_magnitude(stiff[t], damp[t], r0, P[a], P[b], V[a], V[b], u)
            for d in range(3):
                F[a, d] += f * u[d]
                F[b, d] -= f * u[d]
        for i in range(6):
            _contact(P[i], V[i], radius, kc, cc, mu, vreg, gain, fc)
            for d in range(3):
                F[i, d] += fc[d]
        for r in range(pos.shape[0]):
            a = np.zeros(3)
            for d in range(3):
                a[d] = 0.5 * (P[2 * r + 1, d] - P[2 * r, d])
            fl = F[2 * r]
            fr = F[2 * r + 1]
            # torque of endpoint forces about the center; both arms are +-a
            tx = a[1] * (fr[2] - fl[2]) - a[2] * (fr[1] - fl[1])
            ty = a[2] * (fr[0] - fl[0]) - a[0] * (fr[2] - fl[2])
            tz = a[0] * (fr[1] - fl[1]) - a[1] * (fr[0] - fl[0])
            for d in range(3):
                vel[r, d] += dt * ((fl[d] + fr[d]) / mass + grav[d])
            omega[r, 0] += dt * tx / inertia
            omega[r, 1] += dt * ty / inertia
            omega[r, 2] += dt * tz / inertia
            for d in range(3):
                pos[r, d] += dt * vel[r, d]
            # exact rotation by omega*dt; omega stays perpendicular to the rod
            wx, wy, wz = omega[r, 0], omega[r, 1], omega[r, 2]
            wn = math.sqrt(wx * wx + wy * wy + wz * wz)
            if wn > 0.0:
                ang = 0.5 * wn * dt
                s = math.sin(ang) / wn
                dw, dx, dy, dz = math.cos(ang), s * wx, s * wy, s * wz
                w0, x0, y0, z0 = quat[r, 0], quat[r, 1], quat[r, 2], quat[r, 3]
                qw = dw * w0 - dx * x0 - dy * y0 - dz * z0
                qx = dw * x0 + dx * w0 + dy * z0 - dz * y0
                qy = dw * y0 - dx * z0 + dy * w0 + dz * x0
                qz = dw * z0 + dx * y0 - dy * x0 + dz * w0
                nq = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
                quat[r, 0] = qw / nq
                quat[r, 1] = qx / nq
                quat[r, 2] = qy / nq
                quat[r, 3] = qz / nq
            sp = math.sqrt(vel[r, 0] ** 2 + vel[r, 1] ** 2 + vel[r, 2] ** 2)
            if sp > max_speed or not math.isfinite(sp) or wn * half > max_speed:
                return k
        # Semi-implicit Euler lets energy creep up by O(dt^2) per substep; the
        # continuous system is dissipative, so clip any gain.
        _endcaps(pos, quat, vel, omega, half, P, V)
        e_new = _energy(pos, vel, omega, P, rest, ends, stiff, nominal, slot, mass, inertia, radius, grav, kc)
        if e_new > e_ref:
            _limit_energy(vel, omega, mass, inertia, e_new - e_ref)
    return -1


# ---------------------------------------------------------------------------
# public force API


def tendon_force(spec: TendonSpec, p_a, p_b, v_a=None, v_b=None) -> tuple[np.ndarray, np.ndarray]:
    """Forces on endpoints a and b. Tension only: a slack tendon exerts nothing."""
    p_a = np.asarray(p_a, dtype=float)
    p_b = np.asarray(p_b, dtype=float)
    v_a = np.zeros(3) if v_a is None else np.asarray(v_a, dtype=float)
    v_b = np.zeros(3) if v_b is None else np.asarray(v_b, dtype=float)
    if np.linalg.norm(p_b - p_a) == 0.0:
        raise SingularGeometryError(f"tendon {spec.endpoints} has coincident endpoints")
    u = np.zeros(3)
    f = _tendon_magnitude(spec.stiffness, spec.damping, spec.rest_length, p_a, p_b, v_a, v_b, u)
    return f * u, -f * u


def contact_force(position, velocity, config: RobotConfig, dt: float | None = None) -> np.ndarray:
    """Penalty normal force plus regularized Coulomb friction on one endcap."""
    out = np.zeros(3)
    gain = math.inf
    if dt is not None:
        m_end = config.rod_mass / 4.0
        gain = m_end / dt
    _contact(
        np.asarray(position, dtype=float), np.asarray(velocity, dtype=float),
        config.endcap_radius, config.contact_stiffness, config.contact_damping,
        config.friction, config.friction_velocity, gain, out,
    )
    return out


# ---------------------------------------------------------------------------
# stepping


def step(model: RobotModel, state: SimState, commands, dt_control: float = 0.02) -> SimState:
    """Advance by one control period with ``commands`` as active rest-length targets (m)."""
    commands = np.asarray(commands, dtype=float)
    if commands.shape != (len(model.active),):
        raise ValueError(f"expected {len(model.active)} commands, got shape {commands.shape}")
    h = model.config.substep
    nsub = max(1, int(round(dt_control / h)))
    new = state.copy()
    cfg = model.config
    bad = _advance(
        new.pos, new.quat, new.vel, new.omega, new.rest, commands, nsub, h, cfg.rate_limit,
        model.ends, model.stiffness, model.damping, model.rest, model.slot,
        model.rod_mass, 0.5 * model.rod_length, model.inertia, model.endcap_radius,
        model.gravity, cfg.contact_stiffness, cfg.contact_damping, cfg.friction,
        cfg.friction_velocity, BLOWUP_SPEED,
    )
    if bad >= 0:
        t = state.time + (bad + 1) * h
        speed = float(np.max(np.linalg.norm(new.vel, axis=1)))
        raise SimulationBlowup(t, speed)
    new.time = state.time + nsub * h
    return new


def endcap_kinematics(model: RobotModel, state: SimState) -> tuple[np.ndarray, np.ndarray]:
    P = np.zeros((6, 3))
    V = np.zeros((6, 3))
    _endcaps(state.pos, state.quat, state.vel, state.omega, 0.5 * model.rod_length, P, V)
    return P, V


def kinetic_energy(model: RobotModel, state: SimState) -> float:
    return 0.5 * (model.rod_mass * float(np.sum(state.vel**2)) + model.inertia * float(np.sum(state.omega**2)))


def potential_energy(model: RobotModel, state: SimState) -> float:
    P, _ = endcap_kinematics(model, state)
    rest = model.rest.copy()
    rest[model.active] = state.rest
    ext = np.linalg.norm(P[model.ends[:, 1]] - P[model.ends[:, 0]], axis=1) - rest
    spring = 0.5 * float(np.sum(model.stiffness * np.maximum(ext, 0.0) ** 2))
    grav = -model.rod_mass * float(np.sum(state.pos @ model.gravity))
    pen = np.maximum(model.endcap_radius - P[:, 2], 0.0)
    contact = 0.5 * model.config.contact_stiffness * float(np.sum(pen**2))
    return spring + grav + contact


def total_energy(model: RobotModel, state: SimState) -> float:
    return kinetic_energy(model, state) + potential_energy(model, state)


def linear_momentum(model: RobotModel, state: SimState) -> np.ndarray:
    return model.rod_mass * state.vel.sum(axis=0)


def tendon_tensions(model: RobotModel, state: SimState) -> np.ndarray:
    P, V = endcap_kinematics(model, state)
    rest = model.rest.copy()
    rest[model.active] = state.rest
    out = np.zeros(len(model.tendons))
    u = np.zeros(3)
    for t, (a, b) in enumerate(model.ends):
        out[t] = _tendon_magnitude(model.stiffness[t], model.damping[t], rest[t], P[a], P[b], V[a], V[b], u)
    return out


def settle(model: RobotModel, state: SimState, duration: float = 3.0, dt_control: float = 0.02,
           ke_tol: float = 1e-8, min_steps: int = 5) -> SimState:
    """Hold the nominal rest lengths until the structure comes to rest.

    At least ``min_steps`` control steps are taken, since a pose with zero
    velocity need not be an equilibrium.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    s = state
    n = max(min_steps, int(round(duration / dt_control)))
    for k in range(n):
        s = step(model, s, model.l0, dt_control)
        if k + 1 >= min_steps and kinetic_energy(model, s) < ke_tol:
            return s
    warnings.warn(
        f"robot not settled after {n * dt_control:.2f}s (KE={kinetic_energy(model, s):.2e} J)", stacklevel=2
    )
    return s


def observe(model: RobotModel, state: SimState, noise_sigma: float = 0.0,
            rng: np.random.Generator | None = None) -> Observation:
    """Endcap positions and velocities; Gaussian noise corrupts positions only."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    P, V = endcap_kinematics(model, state)
    if noise_sigma > 0:
        if rng is None:
            raise ValueError("rng required when noise_sigma > 0")
        P = P + rng.normal(0.0, noise_sigma, size=P.shape)
    return Observation(P, V)


def wrap_angle(x: float) -> float:
    # IEEE remainder is exact and odd, so wrap(-x) == -wrap(x) bit for bit
    return math.remainder(x, 2 * math.pi)


def com_and_yaw(model: RobotModel, state: SimState, prev_yaw: float | None = None) -> tuple[np.ndarray, float]:
    """Ground-plane CoM and heading.

    The heading is the lateral axis (left-face centroid -> right-face centroid)
    turned -90 deg about the vertical. With ``prev_yaw`` the result is unwrapped
    to lie within pi of it.
    """
    P, _ = endcap_kinematics(model, state)
    return com_and_yaw_from_endcaps(P, prev_yaw)


def com_and_yaw_from_endcaps(P: np.ndarray, prev_yaw: float | None = None) -> tuple[np.ndarray, float]:
    # equal rod masses: CoM is the endcap mean
    com = P.mean(axis=0)[:2]
    lateral = (P[1::2].mean(axis=0) - P[0::2].mean(axis=0))[:2]
    if np.linalg.norm(lateral) < 1e-6:
        raise DegenerateOrientationError("lateral axis is vertical; yaw undefined")
    forward = np.array([lateral[1], -lateral[0]])
    yaw = math.atan2(forward[1], forward[0])
    if prev_yaw is not None:
        yaw = prev_yaw + wrap_angle(yaw - prev_yaw)
    return com, yaw


def transform_state(state: SimState, yaw: float = 0.0, shift=(0.0, 0.0, 0.0)) -> SimState:
    """Rotate about the vertical through the origin by ``yaw``, then translate."""
    c, s = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    qz = np.array([math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2)])
    out = state.copy()
    out.pos = state.pos @ Rz.T + np.asarray(shift, dtype=float)
    out.vel = state.vel @ Rz.T
    out.omega = state.omega @ Rz.T
    out.quat = np.stack([_quat_mul(qz, q) for q in state.quat])
    return out


def _quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def write_trajectory_csv(path, rows) -> None:
    """``rows`` holds (t, com_xy, yaw, endcaps (6, 3)) tuples."""
    import csv
    from datetime import datetime, timezone

    header = ["t", "com_x", "com_y", "yaw"] + [f"endcap{i}_{a}" for i in range(6) for a in "xyz"]
    with open(path, "w", newline="") as fh:
        fh.write(f"# run {datetime.now(timezone.utc).isoformat()}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for t, com, yaw, P in rows:
            w.writerow([repr(float(t)), repr(float(com[0])), repr(float(com[1])), repr(float(yaw))]
                       + [repr(float(x)) for x in np.asarray(P).ravel()])
