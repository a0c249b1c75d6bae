import random
import unittest

from ditparallel.costmodel import APPROX, EXACT, comm_cost, memory_cost, crossover_parallel_degree,\
    compare_strategies, default_candidates
from ditparallel.exceptions import ValidationError
from ditparallel.model import Strategy, ModelSpec, WorkloadSpec, ClusterSpec, ParallelPlan

SMALL_MODEL = ModelSpec(layers=2, hidden_size=8, heads=2, param_count=1000)
SMALL_WORKLOAD = WorkloadSpec(seq_len=16, diffusion_steps=4)

PIXART = ModelSpec(layers=28, hidden_size=1152, heads=16, param_count=600000000)
PIXART_1024 = WorkloadSpec(seq_len=4096, diffusion_steps=20, warmup_steps=1)
UNIT = 4096 * 1152


def cluster(n, memory=None):
    return ClusterSpec(device_count=n, device_flops=1e14, link_bandwidth=1e10, device_memory=memory)


def elements(strategy, n, mode=APPROX, model=PIXART, workload=PIXART_1024, **kwargs):
    plan = ParallelPlan(strategy, **kwargs)
    return comm_cost(plan, model, workload, mode, n_devices=n).elements_total


class CommCost_TestCase(unittest.TestCase):

    def test_01_small_rows(self):
        self.assertEqual(elements(Strategy.TENSOR_PARALLEL, 4, model=SMALL_MODEL, workload=SMALL_WORKLOAD), 1024)
        report = comm_cost(ParallelPlan.pipefusion(4), SMALL_MODEL, SMALL_WORKLOAD, APPROX, n_devices=4)
        self.assertEqual(report.elements_total, 256)
        self.assertEqual(report.bytes_total, 512)
        self.assertTrue(report.overlappable)

    def test_02_table_rows(self):
        self.assertEqual(elements(Strategy.TENSOR_PARALLEL, 8), 4 * UNIT * 28)
        self.assertEqual(elements(Strategy.DISTRIFUSION, 8), 2 * UNIT * 28)
        self.assertEqual(elements(Strategy.SP_RING, 8), 2 * UNIT * 28)
        self.assertEqual(elements(Strategy.SP_ULYSSES, 8), UNIT * 28 // 2)
        self.assertEqual(elements(Strategy.PIPEFUSION, 8, patches=8), 2 * UNIT)
        self.assertEqual(elements(Strategy.PIPEFUSION, 8, patches=32), 2 * UNIT)

    def test_03_overlap_flags(self):
        def overlappable(plan):
            return comm_cost(plan, PIXART, PIXART_1024, APPROX, n_devices=8).overlappable

        self.assertFalse(overlappable(ParallelPlan(Strategy.TENSOR_PARALLEL)))
        self.assertFalse(overlappable(ParallelPlan(Strategy.SP_ULYSSES)))
        self.assertTrue(overlappable(ParallelPlan(Strategy.SP_RING)))
        self.assertTrue(overlappable(ParallelPlan(Strategy.DISTRIFUSION)))
        self.assertTrue(overlappable(ParallelPlan.pipefusion(8)))
        self.assertTrue(overlappable(ParallelPlan.usp(1, 8)))
        self.assertFalse(overlappable(ParallelPlan.usp(2, 4)))

    def test_04_exact_mode(self):
        self.assertEqual(elements(Strategy.TENSOR_PARALLEL, 8, EXACT), 4 * UNIT * 28 * 7 // 8)
        self.assertEqual(elements(Strategy.SP_RING, 8, EXACT), 2 * UNIT * 28 * 7 // 8)
        self.assertEqual(elements(Strategy.SP_ULYSSES, 8, EXACT), elements(Strategy.SP_ULYSSES, 8))
        self.assertEqual(elements(Strategy.PIPEFUSION, 8, EXACT, patches=8), 2 * UNIT)

    def test_05_exact_approaches_approx(self):
        for n in (2, 4, 8, 16):
            exact = elements(Strategy.TENSOR_PARALLEL, n, EXACT)
            approx = elements(Strategy.TENSOR_PARALLEL, n)
            self.assertLessEqual(abs(exact - approx) / float(approx), 1.0 / n)

    def test_06_usp_endpoints(self):
        self.assertEqual(comm_cost(ParallelPlan.usp(8, 1), PIXART, PIXART_1024).elements_total,
                         elements(Strategy.SP_ULYSSES, 8))
        self.assertEqual(comm_cost(ParallelPlan.usp(1, 8), PIXART, PIXART_1024).elements_total,
                         elements(Strategy.SP_RING, 8))
        # Ulysses inside each ring group of 4, ring of size 4 over p/2 tokens
        self.assertEqual(comm_cost(ParallelPlan.usp(2, 4), PIXART, PIXART_1024).elements_total,
                         UNIT * 28 // 2 + UNIT * 28)

    def test_07_single_device(self):
        for strategy in (Strategy.TENSOR_PARALLEL, Strategy.SP_ULYSSES, Strategy.SP_RING, Strategy.DISTRIFUSION):
            self.assertEqual(elements(strategy, 1), 0)
            self.assertEqual(elements(strategy, 1, EXACT), 0)
        self.assertEqual(elements(Strategy.PIPEFUSION, 1, patches=4), 0)
        self.assertEqual(comm_cost(ParallelPlan.usp(1, 1), PIXART, PIXART_1024).elements_total, 0)

    def test_08_cfg_exchange(self):
        report = comm_cost(ParallelPlan.pipefusion(4, cfg_degree=2), PIXART, PIXART_1024, n_devices=8)
        self.assertEqual(report.cfg_elements, 4096 * 4)
        self.assertEqual(report.elements_total, 2 * UNIT + 4096 * 4)

    def test_09_errors(self):
        with self.assertRaisesRegex(ValidationError, 'mode'):
            comm_cost(ParallelPlan.pipefusion(4), PIXART, PIXART_1024, 'approximate', n_devices=4)
        with self.assertRaisesRegex(ValidationError, 'n_devices'):
            comm_cost(ParallelPlan(Strategy.TENSOR_PARALLEL), PIXART, PIXART_1024)
        with self.assertRaisesRegex(ValidationError, 'does not fit'):
            comm_cost(ParallelPlan(Strategy.TENSOR_PARALLEL, cfg_degree=2), PIXART, PIXART_1024, n_devices=5)

    def test_10_random_shapes(self):
        rng = random.Random(20)
        for _ in range(20):
            p, hs, layers, n = rng.randint(1, 4096), rng.randint(1, 2048), rng.randint(1, 64), rng.randint(2, 64)
            model = ModelSpec(layers=layers, hidden_size=hs, heads=1, param_count=0)
            workload = WorkloadSpec(seq_len=p, diffusion_steps=1)
            unit = p * hs
            expected = {
                Strategy.TENSOR_PARALLEL: 4 * unit * layers,
                Strategy.DISTRIFUSION: 2 * unit * layers,
                Strategy.SP_RING: 2 * unit * layers,
                Strategy.SP_ULYSSES: -(-4 * unit * layers // n),
            }
            with self.subTest(p=p, hs=hs, layers=layers, n=n):
                for strategy, value in expected.items():
                    self.assertEqual(elements(strategy, n, model=model, workload=workload), value)
                self.assertEqual(elements(Strategy.PIPEFUSION, n, model=model, workload=workload, patches=n),
                                 2 * unit)


class MemoryCost_TestCase(unittest.TestCase):

    def test_01_table_rows(self):
        full_kv = 2 * UNIT * 28
        tp = memory_cost(ParallelPlan(Strategy.TENSOR_PARALLEL), PIXART, PIXART_1024, n_devices=8)
        self.assertEqual((tp.param_elements, tp.kv_buffer_elements), (75000000, full_kv // 8))
        df = memory_cost(ParallelPlan(Strategy.DISTRIFUSION), PIXART, PIXART_1024, n_devices=8)
        self.assertEqual((df.param_elements, df.kv_buffer_elements), (600000000, full_kv))
        pf = memory_cost(ParallelPlan.pipefusion(8), PIXART, PIXART_1024, n_devices=8)
        self.assertEqual((pf.param_elements, pf.kv_buffer_elements), (75000000, full_kv // 8))
        self.assertEqual(df.kv_buffer_elements, 8 * pf.kv_buffer_elements)
        self.assertEqual(pf.unit_kv, 2 * UNIT)

    def test_02_small(self):
        ring = memory_cost(ParallelPlan(Strategy.SP_RING), SMALL_MODEL, SMALL_WORKLOAD, n_devices=4)
        self.assertEqual(ring.kv_buffer_elements, 128)
        self.assertEqual(ring.param_elements, 1000)
        single = memory_cost(ParallelPlan.pipefusion(1), SMALL_MODEL, SMALL_WORKLOAD, n_devices=1)
        self.assertEqual(single.param_elements, 1000)
        self.assertEqual(single.kv_buffer_elements, single.unit_kv * 2)

    def test_03_fits(self):
        report = memory_cost(ParallelPlan.pipefusion(8), PIXART, PIXART_1024, n_devices=8)
        self.assertIsNone(report.fits(PIXART, cluster(8)))
        self.assertTrue(report.fits(PIXART, cluster(8, memory=8e10)))
        self.assertFalse(report.fits(PIXART, cluster(8, memory=1e6)))


class Ranking_TestCase(unittest.TestCase):

    def test_01_crossover(self):
        self.assertEqual(crossover_parallel_degree(ModelSpec(38, 1536, 24, 2000000000)), 76)
        self.assertEqual(crossover_parallel_degree(ModelSpec(1, 8, 1, 0)), 2)
        self.assertEqual(crossover_parallel_degree(ModelSpec(57, 1152, 16, 0)), 114)

    def test_02_pipefusion_first_below_crossover(self):
        rows = compare_strategies(PIXART, PIXART_1024, cluster(8), default_candidates(cluster(8)))
        self.assertEqual(rows[0].plan.strategy, Strategy.PIPEFUSION)
        totals = [row.comm.elements_total for row in rows]
        self.assertEqual(totals, sorted(totals))

    def test_03_tie_at_crossover(self):
        n = crossover_parallel_degree(SMALL_MODEL)
        self.assertEqual(elements(Strategy.PIPEFUSION, n, model=SMALL_MODEL, workload=SMALL_WORKLOAD, patches=n),
                         elements(Strategy.SP_ULYSSES, n, model=SMALL_MODEL, workload=SMALL_WORKLOAD))

    def test_04_single_candidate(self):
        rows = compare_strategies(PIXART, PIXART_1024, cluster(8), [ParallelPlan(Strategy.SP_RING)])
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0].as_dict()['strategy'], 'sp-ring')
        with self.assertRaises(ValidationError):
            compare_strategies(PIXART, PIXART_1024, cluster(8), [])

    def test_05_candidates(self):
        names = [plan.name for plan in default_candidates(cluster(8), patches=16)]
        self.assertEqual(names, ['tp', 'sp-ulysses', 'sp-ring', 'usp(u=2,r=4)', 'usp(u=4,r=2)',
                                 'distrifusion', 'pipefusion(M=16)'])

    def test_06_warns_when_memory_short(self):
        with self.assertLogs('ditparallel.costmodel', level='WARNING'):
            compare_strategies(PIXART, PIXART_1024, cluster(8, memory=1e6), [ParallelPlan.pipefusion(8)])

    def test_07_pipefusion_lowest_below_crossover(self):
        others = (Strategy.TENSOR_PARALLEL, Strategy.SP_ULYSSES, Strategy.SP_RING, Strategy.DISTRIFUSION)
        for layers in range(1, 65):
            model = ModelSpec(layers=layers, hidden_size=8, heads=1, param_count=0)
            crossover = crossover_parallel_degree(model)
            for n in range(2, crossover + 1):
                pipefusion = elements(Strategy.PIPEFUSION, n, model=model, workload=SMALL_WORKLOAD, patches=n)
                costs = {s: elements(s, n, model=model, workload=SMALL_WORKLOAD) for s in others}
                if n < crossover:
                    for strategy, cost in costs.items():
                        self.assertLess(pipefusion, cost, (layers, n, strategy))
                else:
                    self.assertEqual(pipefusion, costs[Strategy.SP_ULYSSES], layers)
