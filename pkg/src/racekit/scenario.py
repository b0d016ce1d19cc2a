"""Overtaking scenario generation, expert/policy rollouts and dataset assembly.

A scenario spawns the ego on one raceline and a non-reactive leader a fixed
arc distance ahead on its own raceline, both at flying-start speeds. The
simulation runs at 100 Hz; the ego's action source is queried at 10 Hz with
commands held in between, and a frame (raw 360-beam scan, ego speed, issued
action) is recorded at every query instant. Episodes terminate on collision
or at the time limit, are classified CarFollowing / Overtaking / Collision
by unwrapped centerline progress, and collision episodes are filtered out
of the training dataset (they remain valid for evaluation).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import _geom
from . import expert as rexpert
from . import simulator as rsim
from .expert import ExpertConfig, Role
from .seeding import sub_seed
from .simulator import SimConfig, Trace, VehicleCommand, VehicleState, WorldState
from .track import Raceline, SpeedConfig, TrackModel, generate_raceline


class ScenarioError(Exception):
    pass


class NoValidSpawn(ScenarioError):
    pass


class EmptyDataset(ScenarioError):
    pass


class Outcome:
    CAR_FOLLOWING = "CarFollowing"
    OVERTAKING = "Overtaking"
    COLLISION = "Collision"
    ALL = (CAR_FOLLOWING, OVERTAKING, COLLISION)


FRAME_HZ = 10.0
FRAME_FLOATS = 363  # 360 ranges + ego_v + v_cmd + delta_cmd


@dataclass(frozen=True)
class ScenarioConfig:
    ego_racelines: tuple[str, ...] = ("center",)
    leader_racelines: tuple[str, ...] = ("center",)
    k_positions: int = 100
    d_gap: float = 3.0            # initial leader lead along its raceline, m
    v_ell_discount: float = 0.6
    duration: float = 8.0
    seed: int = 0
    spawn_phase: float = 0.0      # fraction of one spacing; shifts every spawn

    def __post_init__(self):
        if self.k_positions < 1:
            raise ScenarioError("k_positions must be >= 1")
        if not 0.0 < self.v_ell_discount <= 1.0:
            raise ScenarioError("v_ell_discount must be in (0, 1]")
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")


@dataclass(frozen=True)
class Scenario:
    id: str
    ego_raceline: str
    ego_s: float
    leader_raceline: str
    leader_s: float
    seed: int


@dataclass
class EpisodeRecord:
    scenario_id: str
    seed: int
    scans: np.ndarray        # (T, n_beams) float32, raw ranges
    ego_v: np.ndarray        # (T,) float32
    actions: np.ndarray      # (T, 2) float32: v_cmd, delta_cmd
    outcome: str
    duration_actual: float
    ego_progress: float = 0.0      # unwrapped centerline arc at episode end
    leader_progress: float = 0.0

    @property
    def n_frames(self) -> int:
        return len(self.scans)


@dataclass
class Dataset:
    episodes: list[EpisodeRecord]
    pool_counts: dict[str, int]
    total_samples: int


@dataclass(frozen=True)
class RaceEnvironment:
    """Immutable bundle of everything a rollout needs."""

    track: TrackModel
    racelines: dict[str, Raceline]
    sim: SimConfig
    expert: ExpertConfig

    @classmethod
    def build(cls, track: TrackModel, sim: SimConfig = SimConfig(),
              expert_cfg: ExpertConfig = ExpertConfig(),
              speed: SpeedConfig = SpeedConfig(),
              raceline_ids: tuple[str, ...] = ("left", "center", "right")):
        racelines = {rid: generate_raceline(track, rid, speed) for rid in raceline_ids}
        return cls(track=track, racelines=racelines, sim=sim, expert=expert_cfg)


class ActionSource(Protocol):
    """Queried at 10 Hz; the returned command is held until the next query."""

    def reset(self, scenario: Scenario | None, env: RaceEnvironment) -> None: ...

    def act(self, world: WorldState, agent: int, scan: np.ndarray) -> VehicleCommand: ...


class ExpertSource:
    """The lattice expert as an ego action source (ignores the scan)."""

    def __init__(self, raceline_id: str = "center"):
        self.raceline_id = raceline_id
        self._raceline = None
        self._cfg = None

    def reset(self, scenario, env):
        rid = scenario.ego_raceline if scenario is not None else self.raceline_id
        self._raceline = env.racelines[rid]
        self._cfg = env.expert

    def act(self, world, agent, scan):
        return rexpert.expert_action(world, agent, Role.EGO, self._raceline, self._cfg)


def _spawn_state(raceline: Raceline, s: float, v_scale: float = 1.0) -> VehicleState:
    pos = raceline.position_at(s)
    return VehicleState(float(pos[0]), float(pos[1]), float(raceline.heading_at(s)),
                        float(raceline.v_ref_at(s)) * v_scale, 0.0)


class ProgressTracker:
    """Unwrapped arc progress along the track centerline.

    Projections are windowed around the last known progress; updates must
    be frequent relative to the window (true at the sim rate)."""

    WINDOW = 6.0  # meters of centerline searched around the last position

    def __init__(self, track: TrackModel, start_hint: float):
        self.track = track
        self.progress = float(start_hint)
        self._length = track.total_length
        n = len(track.xy)
        self._spacing = self._length / n
        self._n = n

    def update(self, x: float, y: float) -> float:
        half = max(2, int(self.WINDOW / self._spacing))
        center = int((self.progress % self._length) / self._spacing)
        idx = np.arange(center - half, center + half + 1) % self._n
        s, _, _ = _geom.project_to_polyline(
            np.array([[x, y]]), self.track.xy, self.track.arc_table, seg_idx=np.unique(idx))
        delta = (float(s[0]) - self.progress) % self._length
        if delta > self._length / 2:
            delta -= self._length
        self.progress += delta
        return self.progress


def enumerate_scenarios(cfg: ScenarioConfig, env: RaceEnvironment) -> tuple[list[Scenario], int]:
    """Spawn grid: k evenly spaced ego arc positions per raceline pair, the
    leader d_gap further along its own raceline. Returns the scenarios and
    the number of spawns skipped because they start in contact."""
    track = env.track
    used = set(cfg.ego_racelines) | set(cfg.leader_racelines)
    min_len = min(env.racelines[r].length for r in used)
    if cfg.d_gap >= min_len:
        raise ScenarioError(f"d_gap {cfg.d_gap} exceeds raceline length {min_len:.1f}")
    if cfg.d_gap <= env.sim.veh_length:
        raise ScenarioError("d_gap must exceed one vehicle length")
    scenarios = []
    skipped = 0
    for ego_rid in cfg.ego_racelines:
        ego_rl = env.racelines[ego_rid]
        for leader_rid in cfg.leader_racelines:
            leader_rl = env.racelines[leader_rid]
            for i in range(cfg.k_positions):
                s_e = ((i + cfg.spawn_phase) * ego_rl.length / cfg.k_positions) % ego_rl.length
                s_l = (s_e + cfg.d_gap) % leader_rl.length
                sid = f"{ego_rid}:{leader_rid}:{i:04d}"
                ego = _spawn_state(ego_rl, s_e)
                leader = _spawn_state(leader_rl, s_l, cfg.v_ell_discount)
                world = WorldState(track, [ego, leader])
                if any(rsim.check_collision(world, env.sim)):
                    skipped += 1
                    continue
                scenarios.append(Scenario(
                    id=sid, ego_raceline=ego_rid, ego_s=float(s_e),
                    leader_raceline=leader_rid, leader_s=float(s_l),
                    seed=sub_seed(cfg.seed, f"scenario:{sid}")))
    if not scenarios:
        raise NoValidSpawn(f"all {skipped} spawn candidates collide at t=0")
    return scenarios, skipped


def classify_outcome(ego_progress: float, leader_progress: float,
                     ego_collided: bool, leader_collided: bool) -> str:
    """Collision dominates; otherwise strict progress dominance means an
    overtake and anything else (ties included) is car-following."""
    if ego_collided or leader_collided:
        return Outcome.COLLISION
    if ego_progress > leader_progress:
        return Outcome.OVERTAKING
    return Outcome.CAR_FOLLOWING


def rollout(scenario: Scenario, ego_source: ActionSource, env: RaceEnvironment,
            duration: float = 8.0, record_trace: bool = False,
            single_agent: bool = False,
            stop_progress: float | None = None) -> tuple[EpisodeRecord, Trace | None]:
    """Run one scenario at the sim rate with 10 Hz action queries.

    Frames are recorded at the query instants before stepping, so an episode
    that collides mid-interval keeps every frame up to and including the
    interval it died in. stop_progress optionally ends the run once the
    ego's unwrapped centerline progress passes that arc (lap harnesses)."""
    sim_cfg = env.sim
    ego_rl = env.racelines[scenario.ego_raceline]
    agents = [_spawn_state(ego_rl, scenario.ego_s)]
    if not single_agent:
        leader_rl = env.racelines[scenario.leader_raceline]
        agents.append(_spawn_state(leader_rl, scenario.leader_s,
                                   env.expert.leader_speed_discount))
    world = WorldState(env.track, agents)
    ego_source.reset(scenario, env)

    ego_tracker = ProgressTracker(env.track, scenario.ego_s)
    ego_tracker.update(agents[0].x, agents[0].y)
    start_progress = ego_tracker.progress
    if not single_agent:
        lead = (scenario.leader_s - scenario.ego_s) % env.track.total_length
        leader_tracker = ProgressTracker(env.track, scenario.ego_s + lead)
        leader_tracker.update(agents[1].x, agents[1].y)

    steps_per_frame = max(1, int(round(1.0 / (FRAME_HZ * sim_cfg.dt))))
    max_frames = int(round(duration * FRAME_HZ))
    scans, speeds, actions = [], [], []
    trace = Trace() if record_trace else None
    if trace is not None:
        trace.append(world)

    done = False
    for _ in range(max_frames):
        if done:
            break
        scan = rsim.scan_lidar(world, 0, sim_cfg)
        ego_cmd = ego_source.act(world, 0, scan)
        scans.append(np.asarray(scan, dtype=np.float32))
        speeds.append(np.float32(world.agents[0].v))
        actions.append(np.array([ego_cmd.v_cmd, ego_cmd.delta_cmd], dtype=np.float32))
        cmds = [ego_cmd]
        if not single_agent:
            cmds.append(rexpert.expert_action(
                world, 1, Role.LEADER, env.racelines[scenario.leader_raceline], env.expert))
        for _ in range(steps_per_frame):
            world = rsim.step(world, cmds, sim_cfg)
            ego_tracker.update(world.agents[0].x, world.agents[0].y)
            if not single_agent:
                leader_tracker.update(world.agents[1].x, world.agents[1].y)
            if trace is not None:
                trace.append(world)
            if any(world.collided):
                done = True
                break
            if stop_progress is not None and ego_tracker.progress - start_progress >= stop_progress:
                done = True
                break

    ego_prog = ego_tracker.progress
    leader_prog = leader_tracker.progress if not single_agent else float("-inf")
    outcome = classify_outcome(
        ego_prog, leader_prog, world.collided[0],
        world.collided[1] if not single_agent else False)
    record = EpisodeRecord(
        scenario_id=scenario.id, seed=scenario.seed,
        scans=np.stack(scans) if scans else np.zeros((0, sim_cfg.n_beams), dtype=np.float32),
        ego_v=np.asarray(speeds, dtype=np.float32),
        actions=np.stack(actions) if actions else np.zeros((0, 2), dtype=np.float32),
        outcome=outcome, duration_actual=float(world.t),
        ego_progress=float(ego_prog), leader_progress=float(leader_prog))
    return record, trace


def build_dataset(episodes: list[EpisodeRecord]) -> Dataset:
    """Drop collision episodes; report source-pool outcome counts."""
    counts = {k: 0 for k in Outcome.ALL}
    kept = []
    for ep in episodes:
        counts[ep.outcome] += 1
        if ep.outcome != Outcome.COLLISION:
            kept.append(ep)
    if not kept:
        raise EmptyDataset("every episode in the pool ended in a collision")
    total = sum(ep.n_frames for ep in kept)
    return Dataset(episodes=kept, pool_counts=counts, total_samples=total)


# ---------------------------------------------------------------------------
# episode store: one file per episode, JSON header line + float32 frames


def save_episode(record: EpisodeRecord, path) -> None:
    header = {
        "scenario_id": record.scenario_id,
        "seed": record.seed,
        "outcome": record.outcome,
        "frame_count": int(record.n_frames),
        "duration_actual": record.duration_actual,
        "ego_progress": record.ego_progress,
        "leader_progress": record.leader_progress,
    }
    frames = np.concatenate(
        [record.scans, record.ego_v[:, None], record.actions], axis=1
    ).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(frames.tobytes())


def load_episode(path) -> EpisodeRecord:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = fh.read()
    n = header["frame_count"]
    expected = n * FRAME_FLOATS * 4
    if len(payload) != expected:
        raise ScenarioError(
            f"{path}: corrupt episode payload ({len(payload)} bytes, want {expected})")
    frames = np.frombuffer(payload, dtype="<f4").reshape(n, FRAME_FLOATS)
    return EpisodeRecord(
        scenario_id=header["scenario_id"], seed=header["seed"],
        scans=frames[:, :360].copy(), ego_v=frames[:, 360].copy(),
        actions=frames[:, 361:363].copy(), outcome=header["outcome"],
        duration_actual=header["duration_actual"],
        ego_progress=header.get("ego_progress", 0.0),
        leader_progress=header.get("leader_progress", 0.0))


def write_manifest(path, episode_files: list[str], excluded_files: list[str],
                   pool_counts: dict[str, int], total_samples: int,
                   skipped_spawns: int = 0) -> None:
    manifest = {
        "episodes": episode_files,
        "excluded": excluded_files,
        "counts": pool_counts,
        "total_samples": total_samples,
        "skipped_spawns": skipped_spawns,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_manifest_dataset(manifest_path) -> Dataset:
    manifest = json.loads(Path(manifest_path).read_text())
    base = Path(manifest_path).parent
    episodes = [load_episode(base / f) for f in manifest["episodes"]]
    if not episodes:
        raise EmptyDataset(f"manifest {manifest_path} lists no episodes")
    return Dataset(episodes=episodes, pool_counts=manifest["counts"],
                   total_samples=manifest["total_samples"])


# ---------------------------------------------------------------------------
# expert closed-loop sanity harness


def drive_expert_laps(track: TrackModel, laps: float = 3.0,
                      sim_cfg: SimConfig = SimConfig(),
                      expert_cfg: ExpertConfig = ExpertConfig(),
                      timeout_s: float | None = None) -> tuple[float, bool]:
    """Run the expert alone until it covers `laps` laps; returns the laps
    actually completed (fractional) and whether it collided."""
    env = RaceEnvironment.build(track, sim_cfg, expert_cfg, raceline_ids=("center",))
    scenario = Scenario(id="laps", ego_raceline="center", ego_s=0.0,
                        leader_raceline="center", leader_s=0.0, seed=0)
    if timeout_s is None:
        timeout_s = laps * track.total_length / 1.0 + 30.0
    record, _ = rollout(scenario, ExpertSource(), env, duration=timeout_s,
                        single_agent=True, stop_progress=laps * track.total_length)
    laps_done = (record.ego_progress - 0.0) / track.total_length
    return laps_done, record.outcome == Outcome.COLLISION
