import numpy as np
import pytest

from racekit import scenario as rscn
from racekit.expert import ExpertConfig
from racekit.scenario import (
    Dataset,
    EmptyDataset,
    EpisodeRecord,
    ExpertSource,
    Outcome,
    RaceEnvironment,
    Scenario,
    ScenarioConfig,
    ScenarioError,
    build_dataset,
    classify_outcome,
    enumerate_scenarios,
    load_episode,
    rollout,
    save_episode,
)
from racekit.simulator import SimConfig


@pytest.fixture(scope="module")
def env(stadium):
    return RaceEnvironment.build(stadium)


def fake_record(outcome, frames=5, sid="x", seed=1):
    return EpisodeRecord(
        scenario_id=sid, seed=seed,
        scans=np.random.default_rng(seed).uniform(0.1, 30.0, (frames, 360)).astype(np.float32),
        ego_v=np.linspace(2, 5, frames).astype(np.float32),
        actions=np.stack([np.full(frames, 4.0), np.full(frames, 0.02)], axis=1).astype(np.float32),
        outcome=outcome, duration_actual=frames / 10.0,
        ego_progress=12.0, leader_progress=10.0)


class TestEnumerate:
    def test_even_spacing(self, env):
        cfg = ScenarioConfig(k_positions=4, d_gap=3.0)
        scenarios, skipped = enumerate_scenarios(cfg, env)
        assert len(scenarios) == 4
        assert skipped == 0
        L = env.racelines["center"].length
        got = sorted(s.ego_s for s in scenarios)
        want = [0.0, L / 4, L / 2, 3 * L / 4]
        assert np.allclose(got, want, atol=1e-9)

    def test_leader_ahead_by_gap(self, env):
        cfg = ScenarioConfig(k_positions=3, d_gap=3.0)
        scenarios, _ = enumerate_scenarios(cfg, env)
        L = env.racelines["center"].length
        for sc in scenarios:
            assert (sc.leader_s - sc.ego_s) % L == pytest.approx(3.0, abs=1e-9)

    def test_gap_exceeding_track_rejected(self, env):
        with pytest.raises(ScenarioError):
            enumerate_scenarios(ScenarioConfig(k_positions=2, d_gap=1000.0), env)

    def test_gap_below_vehicle_length_rejected(self, env):
        with pytest.raises(ScenarioError):
            enumerate_scenarios(ScenarioConfig(k_positions=2, d_gap=0.5), env)

    def test_cross_product_racelines(self, env):
        cfg = ScenarioConfig(ego_racelines=("left", "right"),
                             leader_racelines=("center", "right"), k_positions=2)
        scenarios, _ = enumerate_scenarios(cfg, env)
        combos = {(s.ego_raceline, s.leader_raceline) for s in scenarios}
        assert combos == {("left", "center"), ("left", "right"),
                          ("right", "center"), ("right", "right")}
        assert len(scenarios) == 8

    def test_seeds_distinct_and_deterministic(self, env):
        cfg = ScenarioConfig(k_positions=5, seed=99)
        a, _ = enumerate_scenarios(cfg, env)
        b, _ = enumerate_scenarios(cfg, env)
        assert [s.seed for s in a] == [s.seed for s in b]
        assert len({s.seed for s in a}) == 5


class TestClassify:
    def test_overtaking(self):
        assert classify_outcome(52.1, 49.3, False, False) == Outcome.OVERTAKING

    def test_collision_precedence(self):
        assert classify_outcome(52.1, 49.3, True, False) == Outcome.COLLISION
        assert classify_outcome(10.0, 49.3, False, True) == Outcome.COLLISION

    def test_tie_is_car_following(self):
        assert classify_outcome(50.0, 50.0, False, False) == Outcome.CAR_FOLLOWING

    def test_behind_is_car_following(self):
        assert classify_outcome(45.0, 50.0, False, False) == Outcome.CAR_FOLLOWING


class TestRollout:
    def test_frame_count_full_duration(self, env):
        scenarios, _ = enumerate_scenarios(ScenarioConfig(k_positions=1, d_gap=6.0), env)
        record, trace = rollout(scenarios[0], ExpertSource(), env, duration=2.0,
                                record_trace=True)
        if record.outcome != Outcome.COLLISION:
            assert record.n_frames == 20
        assert record.scans.shape == (record.n_frames, 360)
        assert record.actions.shape == (record.n_frames, 2)
        # trace covers every sim step plus the initial state
        assert len(trace.times) == int(round(record.duration_actual / env.sim.dt)) + 1

    def test_frame_timestamps_at_query_rate(self, env):
        # frames recorded every 10 sim steps: duration_actual must be a
        # multiple of 0.1 for a non-collision episode
        scenarios, _ = enumerate_scenarios(ScenarioConfig(k_positions=1, d_gap=6.0), env)
        record, _ = rollout(scenarios[0], ExpertSource(), env, duration=1.5)
        assert record.duration_actual == pytest.approx(1.5, abs=1e-9)

    def test_collision_truncates_frames(self, env):
        # leader parked right at the spawn gap; drive the ego into it
        class Rammer:
            def reset(self, scenario, env):
                pass

            def act(self, world, agent, scan):
                from racekit.simulator import VehicleCommand
                return VehicleCommand(8.0, 0.0)

        scenarios, _ = enumerate_scenarios(ScenarioConfig(k_positions=1, d_gap=1.0), env)
        record, _ = rollout(scenarios[0], Rammer(), env, duration=8.0)
        assert record.outcome == Outcome.COLLISION
        assert record.duration_actual < 8.0
        # frames recorded up to and including the interval of death
        assert record.n_frames == int(np.ceil(record.duration_actual * 10 - 1e-9))

    def test_expert_vs_fast_leader_is_following(self, env):
        # leader at full expert speed cannot be caught within 2 s
        cfg_fast = ExpertConfig(leader_speed_discount=1.0)
        env_fast = RaceEnvironment(env.track, env.racelines, env.sim, cfg_fast)
        scenarios, _ = enumerate_scenarios(
            ScenarioConfig(k_positions=1, d_gap=6.0), env_fast)
        record, _ = rollout(scenarios[0], ExpertSource(), env_fast, duration=2.0)
        assert record.outcome == Outcome.CAR_FOLLOWING

    def test_determinism_bit_identical(self, env):
        scenarios, _ = enumerate_scenarios(ScenarioConfig(k_positions=1, d_gap=3.0), env)
        r1, _ = rollout(scenarios[0], ExpertSource(), env, duration=1.0)
        r2, _ = rollout(scenarios[0], ExpertSource(), env, duration=1.0)
        assert np.array_equal(r1.scans, r2.scans)
        assert np.array_equal(r1.actions, r2.actions)
        assert r1.ego_progress == r2.ego_progress


class TestDataset:
    def test_filtering_and_counts(self):
        pool = ([fake_record(Outcome.CAR_FOLLOWING) for _ in range(4)]
                + [fake_record(Outcome.OVERTAKING) for _ in range(3)]
                + [fake_record(Outcome.COLLISION) for _ in range(2)])
        ds = build_dataset(pool)
        assert len(ds.episodes) == 7
        assert ds.pool_counts == {Outcome.CAR_FOLLOWING: 4, Outcome.OVERTAKING: 3,
                                  Outcome.COLLISION: 2}
        assert all(ep.outcome != Outcome.COLLISION for ep in ds.episodes)

    def test_all_safe_keeps_everything(self):
        pool = [fake_record(Outcome.OVERTAKING, frames=7) for _ in range(5)]
        ds = build_dataset(pool)
        assert len(ds.episodes) == 5
        assert ds.total_samples == 35

    def test_total_samples_counts_frames(self):
        pool = [fake_record(Outcome.CAR_FOLLOWING, frames=80) for _ in range(572)]
        ds = build_dataset(pool)
        assert ds.total_samples == 45760

    def test_empty_dataset_raises(self):
        with pytest.raises(EmptyDataset):
            build_dataset([fake_record(Outcome.COLLISION)])


class TestEpisodeIO:
    def test_roundtrip(self, tmp_path):
        rec = fake_record(Outcome.OVERTAKING, frames=13, sid="center:center:0007", seed=42)
        path = tmp_path / "ep.bin"
        save_episode(rec, path)
        back = load_episode(path)
        assert back.scenario_id == rec.scenario_id
        assert back.seed == rec.seed
        assert back.outcome == rec.outcome
        assert np.array_equal(back.scans, rec.scans)
        assert np.array_equal(back.ego_v, rec.ego_v)
        assert np.array_equal(back.actions, rec.actions)

    def test_truncated_payload_rejected(self, tmp_path):
        rec = fake_record(Outcome.OVERTAKING, frames=13)
        path = tmp_path / "ep.bin"
        save_episode(rec, path)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ScenarioError):
            load_episode(path)

    def test_manifest_roundtrip(self, tmp_path):
        recs = [fake_record(Outcome.OVERTAKING, frames=6, sid=f"c:c:{i}") for i in range(3)]
        files = []
        for i, r in enumerate(recs):
            f = f"ep_{i}.bin"
            save_episode(r, tmp_path / f)
            files.append(f)
        rscn.write_manifest(tmp_path / "manifest.json", files, [],
                            {Outcome.CAR_FOLLOWING: 0, Outcome.OVERTAKING: 3,
                             Outcome.COLLISION: 0}, 18)
        ds = rscn.load_manifest_dataset(tmp_path / "manifest.json")
        assert len(ds.episodes) == 3
        assert ds.total_samples == 18
