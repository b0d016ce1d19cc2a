"""Closed-loop evaluation suites and rendering.

Four experiment families: single-agent laps (speed/lap statistics until a
lap target, collision, or timeout), head-to-head scenario pools (outcome
counts and overtake/safety rates), beam-dropout noise sweeps over either
suite, and a single-step inference latency benchmark. Reports serialize to
JSON and CSV with stable formatting so equal-seed runs are byte-identical.
"""

from __future__ import annotations

import json
import time
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, field

import numpy as np

from . import simulator as rsim
from .expert import Role, expert_action
from .policy import InferenceSession, PolicyConfig, PolicyParameters
from .scenario import (
    FRAME_HZ,
    Outcome,
    ProgressTracker,
    RaceEnvironment,
    Scenario,
    _spawn_state,
    classify_outcome,
    rollout,
)
from .seeding import rng_for, sub_seed
from .simulator import Trace, VehicleCommand, WorldState


@dataclass
class SingleAgentReport:
    track_id: str
    mean_speed: float
    speed_variance: float
    mean_laptime: float | None
    laptime_variance: float | None
    laps_completed: float
    collided: bool
    noise_eta: float = 0.0

    def to_dict(self):
        return asdict(self)


@dataclass
class H2HReport:
    car_following: int
    overtaking: int
    collision: int
    noise_eta: float = 0.0

    @property
    def n(self) -> int:
        return self.car_following + self.overtaking + self.collision

    @property
    def overtake_rate(self) -> float:
        return 100.0 * self.overtaking / self.n

    @property
    def safety_rate(self) -> float:
        return 100.0 * (self.n - self.collision) / self.n

    def to_dict(self):
        d = asdict(self)
        d["n"] = self.n
        d["overtake_rate"] = self.overtake_rate
        d["safety_rate"] = self.safety_rate
        return d


@dataclass
class NoiseSweepReport:
    eta_levels: list[float]
    single: list[SingleAgentReport] = field(default_factory=list)
    h2h: list[H2HReport] = field(default_factory=list)

    def to_dict(self):
        return {
            "eta_levels": self.eta_levels,
            "single": [r.to_dict() for r in self.single],
            "h2h": [r.to_dict() for r in self.h2h],
        }


@dataclass
class LatencyReport:
    median_ms: float
    p99_ms: float
    max_ms: float
    samples: int
    precision: str
    input_dim: int
    hidden_dim: int

    def to_dict(self):
        return asdict(self)


class PolicySource:
    """A trained policy as a 10 Hz action source with optional beam dropout.

    The hidden state persists across queries within an episode and resets
    to zero at episode start. Inference runs in double precision for exact
    reproducibility; dropout uses a per-episode seeded stream.
    """

    def __init__(self, params: PolicyParameters, cfg: PolicyConfig,
                 noise_eta: float = 0.0, noise_seed: int = 0):
        self.session = InferenceSession(params, cfg, dtype=np.float64)
        self.cfg = cfg
        self.noise_eta = noise_eta
        self.noise_seed = noise_seed
        self._h = None
        self._rng = None

    def reset(self, scenario, env):
        self._h = self.session.zero_hidden()
        sid = scenario.id if scenario is not None else "single"
        self._rng = rng_for(self.noise_seed, f"noise:{sid}")

    def act(self, world, agent, scan):
        if self.noise_eta > 0.0:
            scan = rsim.apply_noise(scan, self.noise_eta, self._rng)
        action, self._h = self.session.step(scan, world.agents[agent].v, self._h)
        return VehicleCommand(float(action[0]), float(action[1]))


def run_single_agent(params: PolicyParameters, policy_cfg: PolicyConfig,
                     env: RaceEnvironment, raceline_id: str = "center",
                     laps_target: int = 10, noise_eta: float = 0.0,
                     seed: int = 0, timeout_s: float | None = None,
                     start_s: float = 0.0,
                     record_trace: bool = False) -> tuple[SingleAgentReport, Trace | None]:
    """Policy alone at 10 Hz on a 100 Hz world until laps_target laps,
    collision, or timeout. Speed statistics sample every sim step; lap
    times interpolate the crossing instant inside the crossing step."""
    sim_cfg = env.sim
    raceline = env.racelines[raceline_id]
    world = WorldState(env.track, [_spawn_state(raceline, start_s)])
    source = PolicySource(params, policy_cfg, noise_eta, sub_seed(seed, "single-noise"))
    source.reset(None, env)
    tracker = ProgressTracker(env.track, start_s)
    tracker.update(world.agents[0].x, world.agents[0].y)
    start_progress = tracker.progress
    length = env.track.total_length
    if timeout_s is None:
        timeout_s = laps_target * length / 1.0 + 60.0

    steps_per_frame = max(1, int(round(1.0 / (FRAME_HZ * sim_cfg.dt))))
    speeds = []
    lap_times = []
    next_lap = 1
    trace = Trace() if record_trace else None
    if trace is not None:
        trace.append(world)
    done = False
    max_frames = int(round(timeout_s * FRAME_HZ))
    for _ in range(max_frames):
        if done:
            break
        scan = rsim.scan_lidar(world, 0, sim_cfg)
        cmd = source.act(world, 0, scan)
        for _ in range(steps_per_frame):
            prev_progress = tracker.progress
            world = rsim.step(world, [cmd], sim_cfg)
            speeds.append(world.agents[0].v)
            progress = tracker.update(world.agents[0].x, world.agents[0].y)
            if trace is not None:
                trace.append(world)
            while progress - start_progress >= next_lap * length:
                covered = progress - prev_progress
                over = (progress - start_progress) - next_lap * length
                frac = over / covered if covered > 0 else 0.0
                lap_times.append(world.t - frac * sim_cfg.dt)
                next_lap += 1
            if world.collided[0] or next_lap > laps_target:
                done = True
                break

    laps_done = (tracker.progress - start_progress) / length
    if next_lap > laps_target:
        laps_done = float(laps_target)
    per_lap = np.diff(np.concatenate([[0.0], lap_times]))
    speeds_arr = np.asarray(speeds)
    report = SingleAgentReport(
        track_id=raceline_id,
        mean_speed=float(speeds_arr.mean()) if len(speeds_arr) else 0.0,
        speed_variance=float(speeds_arr.var()) if len(speeds_arr) else 0.0,
        mean_laptime=float(per_lap.mean()) if len(per_lap) else None,
        laptime_variance=float(per_lap.var()) if len(per_lap) else None,
        laps_completed=float(laps_done),
        collided=bool(world.collided[0]),
        noise_eta=noise_eta)
    return report, trace


def run_h2h(params: PolicyParameters, policy_cfg: PolicyConfig,
            scenarios: list[Scenario], env: RaceEnvironment,
            noise_eta: float = 0.0, seed: int = 0,
            duration: float = 8.0) -> tuple[H2HReport, list[str]]:
    """Roll the policy as ego against the expert leader over a scenario
    pool; returns the aggregate report and per-scenario outcomes."""
    counts = {k: 0 for k in Outcome.ALL}
    outcomes = []
    for sc in scenarios:
        source = PolicySource(params, policy_cfg, noise_eta,
                              sub_seed(seed, f"h2h-noise:{sc.id}"))
        record, _ = rollout(sc, source, env, duration=duration)
        counts[record.outcome] += 1
        outcomes.append(record.outcome)
    report = H2HReport(car_following=counts[Outcome.CAR_FOLLOWING],
                       overtaking=counts[Outcome.OVERTAKING],
                       collision=counts[Outcome.COLLISION],
                       noise_eta=noise_eta)
    return report, outcomes


def run_noise_sweep(params: PolicyParameters, policy_cfg: PolicyConfig,
                    env: RaceEnvironment, eta_levels: list[float],
                    seed: int = 0, mode: str = "single",
                    scenarios: list[Scenario] | None = None,
                    laps_target: int = 3,
                    timeout_s: float | None = None) -> NoiseSweepReport:
    levels = sorted(eta_levels)
    report = NoiseSweepReport(eta_levels=list(levels))
    for eta in levels:
        if mode in ("single", "both"):
            single, _ = run_single_agent(
                params, policy_cfg, env, laps_target=laps_target,
                noise_eta=eta, seed=sub_seed(seed, f"sweep:{eta}"),
                timeout_s=timeout_s)
            report.single.append(single)
        if mode in ("h2h", "both"):
            if scenarios is None:
                raise ValueError("h2h sweep needs scenarios")
            h2h, _ = run_h2h(params, policy_cfg, scenarios, env,
                             noise_eta=eta, seed=sub_seed(seed, f"sweep:{eta}"))
            report.h2h.append(h2h)
    return report


def bench_latency(params: PolicyParameters, cfg: PolicyConfig,
                  n_samples: int = 10000, warmup: int = 100,
                  precision: str = "float32", seed: int = 0) -> LatencyReport:
    """Time single-observation forward steps on randomized scans.

    The first `warmup` iterations are discarded; the hidden state streams
    through the whole run like a deployment loop."""
    dtype = np.float32 if precision == "float32" else np.float64
    session = InferenceSession(params, cfg, dtype=dtype)
    rng = rng_for(seed, "latency")
    scans = rng.uniform(0.0, 30.0, (256, cfg.n_beams))
    vs = rng.uniform(0.0, 8.0, 256)
    h = session.zero_hidden()
    times = np.empty(n_samples)
    for i in range(warmup):
        _, h = session.step(scans[i % 256], vs[i % 256], h)
    for i in range(n_samples):
        t0 = time.perf_counter_ns()
        _, h = session.step(scans[i % 256], vs[i % 256], h)
        times[i] = time.perf_counter_ns() - t0
    ms = times / 1e6
    return LatencyReport(
        median_ms=float(np.median(ms)),
        p99_ms=float(np.percentile(ms, 99)),
        max_ms=float(ms.max()),
        samples=n_samples,
        precision=precision,
        input_dim=cfg.input_dim,
        hidden_dim=cfg.hidden_dim)


# ---------------------------------------------------------------------------
# SVG rendering

EGO_COLOR = "#1f77b4"     # ego drawn blue
LEADER_COLOR = "#d62728"  # leader drawn red


def _transform(pts, bounds, scale, pad):
    (xmin, _, ymax, _) = bounds
    pts = np.atleast_2d(pts)
    out = np.empty_like(pts, dtype=float)
    out[:, 0] = (pts[:, 0] - xmin) * scale + pad
    out[:, 1] = (ymax - pts[:, 1]) * scale + pad
    return out


def render_episode(trace: Trace, track, outcome: str | None = None,
                   footprint_every: float = 0.5, width_px: int = 900) -> str:
    """Draw boundaries, color-coded trajectories, sampled vehicle
    footprints and the outcome label into a standalone SVG document."""
    if not trace.states:
        raise ValueError("empty trace")
    allpts = np.vstack([track.inner_boundary, track.outer_boundary])
    xmin, ymin = allpts.min(axis=0) - 1.0
    xmax, ymax = allpts.max(axis=0) + 1.0
    pad = 10.0
    scale = (width_px - 2 * pad) / (xmax - xmin)
    height_px = int((ymax - ymin) * scale + 2 * pad)
    bounds = (xmin, xmax, ymax, ymin)

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(width_px), height=str(height_px),
                     viewBox=f"0 0 {width_px} {height_px}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(width_px),
                  height=str(height_px), fill="white")

    def poly(points, color, w="1.5", closed=True, dash=None):
        pts = _transform(points, bounds, scale, pad)
        if closed:
            pts = np.vstack([pts, pts[:1]])
        attrs = {"points": " ".join(f"{x:.2f},{y:.2f}" for x, y in pts),
                 "fill": "none", "stroke": color, "stroke-width": w}
        if dash:
            attrs["stroke-dasharray"] = dash
        ET.SubElement(svg, "polyline", **attrs)

    poly(track.inner_boundary, "#333333")
    poly(track.outer_boundary, "#333333")

    n_agents = trace.n_agents
    colors = [EGO_COLOR, LEADER_COLOR]
    for a in range(n_agents):
        path = np.array([[st[a].x, st[a].y] for st in trace.states])
        poly(path, colors[a % 2], w="1.2", closed=False)

    dt = trace.times[1] - trace.times[0] if len(trace.times) > 1 else 1.0
    stride = max(1, int(round(footprint_every / dt)))
    from ._geom import obb_corners
    for a in range(n_agents):
        for k in range(0, len(trace.states), stride):
            st = trace.states[k][a]
            corners = obb_corners(st.x, st.y, st.theta, 0.58, 0.31)
            pts = _transform(corners, bounds, scale, pad)
            ET.SubElement(svg, "polygon",
                          points=" ".join(f"{x:.2f},{y:.2f}" for x, y in pts),
                          fill=colors[a % 2], **{"fill-opacity": "0.25",
                                                 "stroke": colors[a % 2],
                                                 "stroke-width": "0.5"})
    # mark the final pose of a collision episode
    if outcome == Outcome.COLLISION:
        st = trace.states[-1][0]
        c = _transform(np.array([[st.x, st.y]]), bounds, scale, pad)[0]
        ET.SubElement(svg, "circle", cx=f"{c[0]:.2f}", cy=f"{c[1]:.2f}", r="6",
                      fill="none", stroke="#000000", **{"stroke-width": "2"})
    if outcome:
        label = ET.SubElement(svg, "text", x=str(pad + 4), y=str(pad + 14),
                              fill="#000000", **{"font-size": "14",
                                                 "font-family": "sans-serif"})
        label.text = outcome
    return ET.tostring(svg, encoding="unicode")


# ---------------------------------------------------------------------------
# report serialization (stable bytes for equal seeds)


def report_json(report) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


SINGLE_CSV_HEADER = ("Track,Mean Speed (m/s),Speed Variance ((m/s)^2),"
                     "Mean LapTime (s),LapTime Variance (s^2),Laps Completed")
H2H_CSV_HEADER = ("Pool,Car Following,Overtaking,Collision,"
                  "Overtake Rate (%),Safety Rate (%)")


def single_csv_row(label: str, r: SingleAgentReport) -> str:
    lap = "-" if r.mean_laptime is None else f"{r.mean_laptime:.2f}"
    lap_var = "-" if r.laptime_variance is None else f"{r.laptime_variance:.2f}"
    return (f"{label},{r.mean_speed:.2f},{r.speed_variance:.2f},"
            f"{lap},{lap_var},{r.laps_completed:.1f}")


def h2h_csv_row(label: str, r: H2HReport) -> str:
    return (f"{label},{r.car_following},{r.overtaking},{r.collision},"
            f"{r.overtake_rate:.1f},{r.safety_rate:.1f}")


def write_single_csv(reports: list[tuple[str, SingleAgentReport]], path) -> None:
    with open(path, "w") as fh:
        fh.write(SINGLE_CSV_HEADER + "\n")
        for label, r in reports:
            fh.write(single_csv_row(label, r) + "\n")


def write_h2h_csv(reports: list[tuple[str, H2HReport]], path) -> None:
    with open(path, "w") as fh:
        fh.write(H2H_CSV_HEADER + "\n")
        for label, r in reports:
            fh.write(h2h_csv_row(label, r) + "\n")
