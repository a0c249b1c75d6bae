import os
import random
import unittest
from dataclasses import replace

import ditparallel
from ditparallel.config import load_config
from ditparallel.exceptions import ValidationError
from ditparallel.model import Strategy, ModelSpec, WorkloadSpec, ClusterSpec, ParallelPlan
from ditparallel.schedule import build_pipefusion_schedule, bubble_count
from ditparallel.simulate import COMPUTE, ComputeModel, simulate, simulate_cfg, comm_share,\
    sweep_patch_number, sweep_warmup, sweep_devices, best_usp_plan, timeline_gantt
from ditparallel.utils import factor_pairs

MODEL = ModelSpec(layers=4, hidden_size=64, heads=4, param_count=200000)
WORKLOAD = WorkloadSpec(seq_len=256, diffusion_steps=10)
COMPUTE_MODEL = ComputeModel()


def cluster(n, bandwidth=1e9, latency=1e-6):
    return ClusterSpec(device_count=n, device_flops=1e12, link_bandwidth=bandwidth, link_latency=latency)


def step_time(model=MODEL, workload=WORKLOAD, compute_model=COMPUTE_MODEL, flops=1e12):
    p = workload.seq_len
    layer = compute_model.layer_flops(p, p, model.hidden_size, model.mlp_ratio)
    update = compute_model.update_flops(p * model.latent_channels)
    return (model.layers * layer + update) / flops


class CommShare_TestCase(unittest.TestCase):

    def test_01_reported_values(self):
        self.assertAlmostEqual(comm_share(32.1, 244.89, 8), 0.046, delta=0.001)
        self.assertAlmostEqual(comm_share(37.3, 244.89, 8), 0.179, delta=0.001)
        self.assertEqual(comm_share(2.0, 8.0, 4), 0.0)

    def test_02_errors(self):
        with self.assertRaises(ValidationError):
            comm_share(0.0, 8.0, 4)
        with self.assertRaises(ValidationError):
            comm_share(1.0, 8.0, 0)


class ComputeModel_TestCase(unittest.TestCase):

    def test_01_flops(self):
        cm = ComputeModel(alpha=4.0, beta=24.0)
        self.assertEqual(cm.attention_flops(2, 3, 4), 96.0)
        self.assertEqual(cm.projection_flops(2, 4, 4), 768.0)
        self.assertEqual(ComputeModel().beta_for(4), 24.0)

    def test_02_invalid(self):
        with self.assertRaises(ValidationError):
            ComputeModel(alpha=0)
        with self.assertRaises(ValidationError):
            ComputeModel(per_message_overhead=-1.0)


class Simulate_TestCase(unittest.TestCase):

    def test_01_single_device(self):
        expected = WORKLOAD.diffusion_steps * step_time()
        plans = [ParallelPlan(Strategy.TENSOR_PARALLEL), ParallelPlan(Strategy.SP_ULYSSES),
                 ParallelPlan(Strategy.SP_RING), ParallelPlan(Strategy.DISTRIFUSION),
                 ParallelPlan.usp(1, 1), ParallelPlan.pipefusion(1), ParallelPlan.pipefusion(4)]
        for plan in plans:
            timeline = simulate(plan, MODEL, WORKLOAD, cluster(1), COMPUTE_MODEL)
            self.assertAlmostEqual(timeline.makespan_s / expected, 1.0, places=9, msg=plan.name)
            self.assertEqual(timeline.comm_events(), [], plan.name)

    def test_02_pipefusion_follows_slot_grid(self):
        # no sampler update and (almost) free links: every patch micro-step costs the same
        cm = ComputeModel(per_message_overhead=0.0, update_flops_per_element=0.0)
        fast = cluster(4, bandwidth=1e30, latency=0.0)
        n, m = 4, 8
        patch_time = cm.layer_flops(WORKLOAD.seq_len // m, WORKLOAD.seq_len, MODEL.hidden_size, MODEL.mlp_ratio) / 1e12
        for warmup in (0, 1):
            workload = replace(WORKLOAD, warmup_steps=warmup)
            timeline = simulate(ParallelPlan.pipefusion(m), MODEL, workload, fast, cm)
            length = build_pipefusion_schedule(n, m, workload.diffusion_steps, warmup).length
            self.assertAlmostEqual(timeline.makespan_s / (length * patch_time), 1.0, places=9)
            self.assertLess(max(timeline.stall_s), 1e-12)

    def test_03_tensor_parallel_slower_than_pipefusion(self):
        tp = simulate(ParallelPlan(Strategy.TENSOR_PARALLEL), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        pf = simulate(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        self.assertGreater(tp.makespan_s, pf.makespan_s)

    def test_04_bandwidth_constrained_ordering(self):
        path = os.path.join(os.path.dirname(ditparallel.__file__), 'configs', 'bandwidth-constrained.yaml')
        config = load_config(path)
        self.assertEqual(config.cluster.device_count, 8)

        def makespan(plan):
            return simulate(plan, config.model, config.workload, config.cluster, config.compute_model).makespan_s

        pipefusion = makespan(config.plan)
        ulysses = makespan(ParallelPlan(Strategy.SP_ULYSSES))
        best_sp = makespan(best_usp_plan(config.model, config.workload, config.cluster, config.compute_model))
        tp = makespan(ParallelPlan(Strategy.TENSOR_PARALLEL))
        self.assertLess(pipefusion, best_sp)
        self.assertLess(best_sp, tp)

    def test_05_timeline_accessors(self):
        timeline = simulate(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        self.assertEqual(timeline.n_devices, 4)
        self.assertEqual(timeline.strategy, 'pipefusion(M=4)')
        for fraction in timeline.busy_fractions:
            self.assertGreater(fraction, 0.0)
            self.assertLessEqual(fraction, 1.0)
        trace = timeline.to_trace()
        self.assertEqual(len(trace), len(timeline.events))
        self.assertEqual(set(trace[0]), {'name', 'device', 'stream', 'start_us', 'dur_us', 'patch', 'timestep'})
        starts = [e.start_s for e in timeline.events]
        self.assertEqual(starts, sorted(starts))
        self.assertTrue(any(e.stream == COMPUTE for e in timeline.events))
        self.assertTrue(timeline.comm_events())

    def test_06_constraints(self):
        with self.assertRaisesRegex(ValidationError, 'heads'):
            simulate(ParallelPlan(Strategy.TENSOR_PARALLEL), MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL)
        with self.assertRaisesRegex(ValidationError, 'layers'):
            simulate(ParallelPlan.pipefusion(8), MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL)
        with self.assertRaises(ValidationError):
            simulate(ParallelPlan.usp(2, 2), MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL)

    def test_07_gantt(self):
        timeline = simulate(ParallelPlan.pipefusion(2), MODEL, WORKLOAD, cluster(2), COMPUTE_MODEL)
        chart = timeline_gantt(timeline, timeline.makespan_s / 50)
        lines = chart.splitlines()
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[0].startswith('d0  '))
        self.assertTrue(lines[1].startswith('d0~ '))
        with self.assertRaises(ValidationError):
            timeline_gantt(timeline, 0.0)

    def test_08_random_timelines(self):
        rng = random.Random(8)
        model = ModelSpec(layers=8, hidden_size=64, heads=8, param_count=100000)
        for _ in range(100):
            cfg = rng.choice((1, 2))
            devices = cfg * rng.choice((1, 2, 4, 8 // cfg))
            n = devices // cfg
            strategy = rng.choice(list(Strategy))
            if strategy is Strategy.USP:
                u, r = rng.choice(factor_pairs(n))
                plan = ParallelPlan.usp(u, r, cfg_degree=cfg)
            elif strategy is Strategy.PIPEFUSION:
                plan = ParallelPlan.pipefusion(rng.randint(1, 8), cfg_degree=cfg)
            else:
                plan = ParallelPlan(strategy, cfg_degree=cfg)
            steps = rng.randint(1, 6)
            workload = WorkloadSpec(seq_len=rng.choice((64, 128, 256)), diffusion_steps=steps,
                                    warmup_steps=rng.randint(0, steps))
            scaled = cluster(devices, bandwidth=10 ** rng.uniform(8, 11), latency=10 ** rng.uniform(-7, -4))
            timeline = simulate(plan, model, workload, scaled, COMPUTE_MODEL)
            tolerance = 1e-9 * timeline.makespan_s
            with self.subTest(plan=plan.name, devices=devices, steps=steps):
                lanes = {}
                for e in timeline.events:
                    lanes.setdefault((e.device, e.stream), []).append(e)
                for lane in lanes.values():
                    lane.sort(key=lambda e: e.start_s)
                    for previous, current in zip(lane, lane[1:]):
                        self.assertGreaterEqual(current.start_s, previous.end_s - tolerance)
                for device in range(timeline.n_devices):
                    self.assertGreaterEqual(timeline.makespan_s, timeline.compute_time(device) - tolerance)


class ClassifierFreeGuidance_TestCase(unittest.TestCase):

    def test_01_exchange_adds_per_step(self):
        plan = ParallelPlan.pipefusion(4, cfg_degree=2)
        group = simulate(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        both = simulate(plan, MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL)
        size = WORKLOAD.seq_len * MODEL.latent_channels * MODEL.bytes_per_element
        exchange = 1e-6 + COMPUTE_MODEL.per_message_overhead + size / 1e9
        self.assertEqual(both.n_devices, 8)
        self.assertAlmostEqual(both.makespan_s, group.makespan_s + WORKLOAD.diffusion_steps * exchange, places=12)

    def test_02_no_exchange(self):
        plan = ParallelPlan.pipefusion(4, cfg_degree=2)
        group = simulate(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        both = simulate_cfg(plan, MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL, exchange_elements=0)
        self.assertAlmostEqual(both.makespan_s, group.makespan_s, places=15)

    def test_03_needs_two_groups(self):
        with self.assertRaises(ValidationError):
            simulate_cfg(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)

    def test_04_steps_shift_by_exchange(self):
        group = simulate(ParallelPlan.pipefusion(4), MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        both = simulate(ParallelPlan.pipefusion(4, cfg_degree=2), MODEL, WORKLOAD, cluster(8), COMPUTE_MODEL)
        size = WORKLOAD.seq_len * MODEL.latent_channels * MODEL.bytes_per_element
        exchange = 1e-6 + COMPUTE_MODEL.per_message_overhead + size / 1e9
        steps = WORKLOAD.diffusion_steps

        def first_compute(timeline, device, timestep):
            return min(e.start_s for e in timeline.events
                       if e.device == device and e.stream == COMPUTE and e.timestep == timestep)

        for timestep in range(steps):
            expected = first_compute(group, 0, timestep) + (steps - 1 - timestep) * exchange
            self.assertAlmostEqual(first_compute(both, 0, timestep), expected, places=12)
            self.assertAlmostEqual(first_compute(both, 4, timestep), expected, places=12)


class Sweeps_TestCase(unittest.TestCase):

    def test_01_patch_number(self):
        rows = sweep_patch_number(MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL, [2, 4, 8])
        self.assertEqual([row.patches for row in rows], [2, 4, 8])
        for row in rows:
            schedule = build_pipefusion_schedule(4, row.patches, WORKLOAD.diffusion_steps, 0)
            self.assertEqual(row.bubbles, bubble_count(schedule).total)
            self.assertGreater(row.makespan_s, 0.0)

    def test_02_single_patch_single_device(self):
        rows = sweep_patch_number(MODEL, WORKLOAD, cluster(1), COMPUTE_MODEL, [1])
        serial = WORKLOAD.diffusion_steps * step_time()
        self.assertAlmostEqual(rows[0].makespan_s / serial, 1.0, places=9)
        self.assertEqual(rows[0].bubbles, 0)

    def test_03_warmup(self):
        rows = sweep_warmup(MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL, [0, 1, 2, 4])
        self.assertEqual(rows[0].relative_increase, 0.0)
        makespans = [row.makespan_s for row in rows]
        self.assertEqual(makespans, sorted(makespans))
        self.assertLess(makespans[0], makespans[-1])
        with self.assertRaises(ValidationError):
            sweep_warmup(MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL, [])

    def test_04_devices(self):
        strategies = [s.value for s in Strategy]
        with self.assertLogs('ditparallel.simulate', level='WARNING'):
            rows = sweep_devices(MODEL, WORKLOAD, cluster(1), COMPUTE_MODEL, [1, 8], strategies)
        for row in rows[:len(strategies)]:
            self.assertEqual(row.devices, 1)
            self.assertAlmostEqual(row.speedup, 1.0, places=9, msg=row.strategy)
        skipped = [row for row in rows if row.makespan_s is None]
        self.assertTrue(skipped)
        for row in skipped:
            self.assertEqual(row.devices, 8)
            self.assertTrue(row.note.startswith('skipped'))

    def test_05_best_usp(self):
        plan = best_usp_plan(MODEL, WORKLOAD, cluster(4), COMPUTE_MODEL)
        self.assertIs(plan.strategy, Strategy.USP)
        self.assertEqual(plan.ulysses_degree * plan.ring_degree, 4)

    def test_06_pipefusion_outscales_tensor_parallel(self):
        path = os.path.join(os.path.dirname(ditparallel.__file__), 'configs', 'bandwidth-constrained.yaml')
        config = load_config(path)
        rows = sweep_devices(config.model, config.workload, config.cluster, config.compute_model,
                             [1, 2, 4, 8], ['tp', 'pipefusion'])
        speedups = {}
        for row in rows:
            self.assertIsNotNone(row.speedup, row.note)
            speedups.setdefault(row.devices, {})[Strategy.parse(row.strategy.split('(')[0])] = row.speedup
        self.assertEqual(sorted(speedups), [1, 2, 4, 8])
        for devices, values in speedups.items():
            self.assertGreaterEqual(values[Strategy.PIPEFUSION], values[Strategy.TENSOR_PARALLEL] - 1e-9, devices)
