"""
Command line front end.

    ditparallel cost       rank every strategy by per-device traffic for one config
    ditparallel schedule   PipeFusion / DistriFusion slot grid, JSON or ASCII Gantt
    ditparallel freshness  K/V age per slot and patch
    ditparallel simulate   discrete-event timeline of the configured plan
    ditparallel sweep      patch-number | warmup | devices sweeps
    ditparallel execute    run the toy network under stale activations

Exit codes: 0 success, 1 internal or numeric error, 2 usage or validation error.
"""
import argparse
import dataclasses
import logging
import sys
from typing import List, Optional, Sequence

from . import __version__
from .config import RunConfig, load_config
from .costmodel import APPROX, EXACT, MODES, compare_strategies, default_candidates
from .exceptions import DiTParallelException, ValidationError
from .execute import (auto_warmup, build_toy_model, compare_executions, execute, make_latent,
                      run_manifest, serial_manifest, serial_reference)
from .execute.generic import RUNNERS
from .formats import (CSV, FORMATS, JSON, chrome_trace, columns_of, render_json, render_rows,
                      save_trajectory, write_text)
from .freshness import freshness_map, heat_strip, mean_staleness
from .model import ParallelPlan, Strategy
from .schedule import (DISTRIFUSION, PIPEFUSION, bubble_count, build_distrifusion_schedule,
                       build_pipefusion_schedule, effective_compute_ratio, gantt, validate_dependencies)
from .simulate import (best_usp_plan, simulate, sweep_devices, sweep_patch_number, sweep_warmup,
                       timeline_gantt)

__all__ = ['main', 'build_parser']

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

COST_COLUMNS = ['strategy', 'elements_total', 'bytes_total', 'overlappable', 'param_elements',
                'kv_buffer_elements']
SWEEP_DEFAULTS = {
    'patch-number': [2, 4, 8, 16, 32],
    'warmup': [0, 1, 2, 4],
    'devices': [1, 2, 4, 8],
}


def _override(config, section, **values):
    # type: (RunConfig, str, object) -> RunConfig
    values = {key: value for key, value in values.items() if value is not None}
    if not values:
        return config
    try:
        updated = dataclasses.replace(getattr(config, section), **values)
    except TypeError as e:
        raise ValidationError('%s: %s' % (section, e))
    return dataclasses.replace(config, **{section: updated})


def _load(args):
    # type: (argparse.Namespace) -> RunConfig
    return load_config(args.config, args.overrides)


def _csv_or_json(rows, args, columns=None):
    # type: (Sequence[dict], argparse.Namespace, Optional[Sequence[str]]) -> None
    write_text(render_rows(rows, columns or columns_of(rows), args.format), args.out)


# ---[ Subcommands ]----

def cmd_cost(args):
    # type: (argparse.Namespace) -> int
    config = _load(args)
    config = _override(config, 'cluster', device_count=args.devices)
    plans = default_candidates(config.cluster, config.plan.cfg_degree, args.patches or config.plan.patches)
    rows = compare_strategies(config.model, config.workload, config.cluster, plans, args.mode)
    _csv_or_json([row.as_dict() for row in rows], args, COST_COLUMNS)
    return EXIT_OK


def _schedule_dims(args, config):
    n = args.n if args.n is not None else config.cluster.device_count // config.plan.cfg_degree
    m = args.m if args.m is not None else (config.plan.patches or n)
    steps = args.steps if args.steps is not None else config.workload.diffusion_steps
    warmup = args.warmup if args.warmup is not None else config.workload.warmup_steps
    return n, m, steps, warmup


def _build_schedule(args, config):
    n, m, steps, warmup = _schedule_dims(args, config)
    if args.strategy == DISTRIFUSION:
        schedule = build_distrifusion_schedule(n, steps, warmup)
    else:
        schedule = build_pipefusion_schedule(n, m, steps, warmup)
    validate_dependencies(schedule).raise_for_errors(DiTParallelException)
    return schedule


def cmd_schedule(args):
    # type: (argparse.Namespace) -> int
    schedule = _build_schedule(args, _load(args))
    if args.gantt:
        write_text(gantt(schedule), args.out)
        return EXIT_OK
    if args.format == CSV:
        _csv_or_json(schedule.to_events(), args, ['device', 'slot', 'patch', 'timestep', 'kind'])
        return EXIT_OK
    bubbles = bubble_count(schedule)
    write_text(render_json({
        'strategy': schedule.strategy,
        'n_devices': schedule.n_devices,
        'n_patches': schedule.n_patches,
        'steps': schedule.steps,
        'warmup': schedule.warmup,
        'length': schedule.length,
        'effective_compute_ratio': effective_compute_ratio(schedule.n_devices, schedule.n_patches,
                                                           schedule.steps),
        'bubbles': {'per_device': list(bubbles.per_device), 'startup': list(bubbles.startup),
                    'wait': list(bubbles.wait), 'warmup_idle': list(bubbles.warmup_idle)},
        'micro_steps': schedule.to_events(),
    }), args.out)
    return EXIT_OK


def cmd_freshness(args):
    # type: (argparse.Namespace) -> int
    schedule = _build_schedule(args, _load(args))
    if args.heat:
        write_text(heat_strip(schedule, args.device), args.out)
        return EXIT_OK
    fmap = freshness_map(schedule)
    rows = [{'slot': slot, 'device': device, 'patch': patch, 'age': age}
            for slot, device, patch, age in fmap.rows()]
    if args.format == JSON:
        write_text(render_json({'strategy': schedule.strategy, 'mean_staleness': mean_staleness(schedule),
                                'max_age': fmap.max_age(), 'ages': rows}), args.out)
    else:
        _csv_or_json(rows, args, ['slot', 'device', 'patch', 'age'])
    return EXIT_OK


def _plan(args, config):
    # type: (argparse.Namespace, RunConfig) -> ParallelPlan
    plan = config.plan
    if args.strategy is not None and Strategy.parse(args.strategy) is not plan.strategy:
        plan = ParallelPlan(Strategy.parse(args.strategy), cfg_degree=plan.cfg_degree)
    if plan.strategy is Strategy.USP and not (plan.ulysses_degree and plan.ring_degree):
        plan = best_usp_plan(config.model, config.workload, config.cluster, config.compute_model,
                             EXACT, plan.cfg_degree)
        logger.info('picked %s', plan.name)
    if plan.strategy is Strategy.PIPEFUSION and not plan.patches:
        plan = dataclasses.replace(plan, patches=config.cluster.device_count // plan.cfg_degree)
    return plan


def cmd_simulate(args):
    # type: (argparse.Namespace) -> int
    config = _load(args)
    config = _override(config, 'cluster', device_count=args.devices)
    plan = _plan(args, config)
    timeline = simulate(plan, config.model, config.workload, config.cluster, config.compute_model, args.mode)
    logger.info('%s on %d devices: makespan %.6g s', plan.name, config.cluster.device_count, timeline.makespan_s)
    if args.trace:
        write_text(render_json(timeline.to_trace()), args.trace)
    if args.chrome_trace:
        write_text(render_json(chrome_trace(timeline)), args.chrome_trace)
    if args.gantt is not None:
        write_text(timeline_gantt(timeline, args.gantt), args.out)
        return EXIT_OK
    busy = timeline.busy_fractions
    rows = [{'strategy': timeline.strategy, 'device': device, 'makespan_s': timeline.makespan_s,
             'compute_s': timeline.compute_time(device), 'busy_fraction': busy[device],
             'stall_s': timeline.stall_s[device]}
            for device in range(timeline.n_devices)]
    _csv_or_json(rows, args, ['strategy', 'device', 'makespan_s', 'compute_s', 'busy_fraction', 'stall_s'])
    return EXIT_OK


def cmd_sweep(args):
    # type: (argparse.Namespace) -> int
    config = _load(args)
    values = args.values or SWEEP_DEFAULTS[args.kind]
    if args.kind == 'patch-number':
        rows = sweep_patch_number(config.model, config.workload, config.cluster, config.compute_model,
                                  values, args.mode)
    elif args.kind == 'warmup':
        rows = sweep_warmup(config.model, config.workload, config.cluster, config.compute_model,
                            values, _plan(args, config), args.mode)
    else:
        strategies = args.strategies or [s.value for s in Strategy]
        rows = sweep_devices(config.model, config.workload, config.cluster, config.compute_model,
                             values, strategies, args.mode)
    dicts = [dataclasses.asdict(row) for row in rows]
    _csv_or_json(dicts, args, [f.name for f in dataclasses.fields(type(rows[0]))])
    return EXIT_OK


def cmd_execute(args):
    # type: (argparse.Namespace) -> int
    config = _load(args)
    config = _override(config, 'model', layers=args.layers, hidden_size=args.hidden_size, heads=args.heads)
    config = _override(config, 'workload', seq_len=args.seq_len, diffusion_steps=args.steps,
                       warmup_steps=args.warmup, step_size=args.step_size)
    config = _override(config, 'execute', seed=args.seed, workers=args.workers, patches=args.patches,
                       strategy=args.strategy, threshold=args.threshold, runner=args.runner,
                       compare=True if args.compare else None, auto_warmup=True if args.auto_warmup else None)
    spec, model, workload = config.execute, config.model, config.workload

    toy = build_toy_model(spec.seed, model.layers, model.hidden_size, model.heads, model.mlp_ratio)
    x_init = make_latent(spec.seed, workload.seq_len, model.hidden_size, workload.diffusion_steps)
    warmup = workload.warmup_steps
    extra = {}
    if spec.auto_warmup:
        chosen = auto_warmup(toy, x_init, workload.diffusion_steps, spec.threshold, workload.step_size)
        if not chosen.reached:
            logger.warning('latent change never fell below %g, running all %d steps synchronously',
                           spec.threshold, workload.diffusion_steps)
        warmup = chosen.warmup_steps
        extra = {'auto_warmup': True, 'auto_warmup_reached': chosen.reached}

    if spec.compare:
        results = compare_executions(toy, x_init, workload.diffusion_steps, spec.workers, warmup,
                                     workload.step_size, spec.effective_patches, spec.runner)
        manifests = [serial_manifest(toy, workload.seq_len, workload.diffusion_steps, workload.step_size,
                                     spec.seed)]
        manifests += [run_manifest(results[name], toy, workload.step_size, spec.seed)
                      for name in ('pipefusion', 'distrifusion')]
        trajectory_source = None
    else:
        result = execute(spec.strategy, toy, x_init, workload.diffusion_steps, spec.workers, warmup,
                         workload.step_size, spec.patches, spec.runner, keep_trajectory=bool(args.trajectory))
        manifests = [run_manifest(result, toy, workload.step_size, spec.seed)]
        trajectory_source = result
    for manifest in manifests:
        manifest.update(extra)
        if manifest['divergence'] is not None:
            logger.info('%s: divergence %.6g', manifest['strategy'], manifest['divergence'])

    if args.trajectory:
        if trajectory_source is None:
            trajectory = serial_reference(toy, x_init, workload.diffusion_steps, workload.step_size).trajectory
        else:
            trajectory = trajectory_source.trajectory
        save_trajectory(args.trajectory, trajectory)
    if args.format == JSON:
        write_text(render_json(manifests if spec.compare else manifests[0]), args.out)
    else:
        _csv_or_json(manifests, args)
    return EXIT_OK


# ---[ Parser ]----

def _common_options():
    # type: () -> argparse.ArgumentParser
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', metavar='PATH', help='YAML run configuration (default: built-in reference job)')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='override one config value (repeatable)')
    common.add_argument('--format', choices=FORMATS, default=CSV, help='output format (default: csv)')
    common.add_argument('--out', metavar='PATH', help='write output to PATH instead of stdout')
    common.add_argument('--seed', type=int, help='toy network and noise seed')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='debug logging')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='warnings and errors only')
    return common


def _grid_options(parser):
    # type: (argparse.ArgumentParser) -> None
    parser.add_argument('--n', type=int, help='devices (default: cluster.device_count / cfg)')
    parser.add_argument('--m', type=int, help='patches (default: plan.patches or --n)')
    parser.add_argument('--steps', type=int, help='diffusion steps (default: workload.diffusion_steps)')
    parser.add_argument('--warmup', type=int, help='warmup steps (default: workload.warmup_steps)')
    parser.add_argument('--strategy', choices=(PIPEFUSION, DISTRIFUSION), default=PIPEFUSION)


def build_parser():
    # type: () -> argparse.ArgumentParser
    common = _common_options()
    parser = argparse.ArgumentParser(prog='ditparallel', description='DiT parallel inference toolkit')
    parser.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('cost', parents=[common], help='analytic communication and memory per strategy')
    p.add_argument('--mode', choices=MODES, default=APPROX)
    p.add_argument('--devices', type=int, help='override cluster.device_count')
    p.add_argument('--patches', type=int, help='PipeFusion patch number (default: plan.patches or N)')
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser('schedule', parents=[common], help='pipeline slot grid')
    _grid_options(p)
    p.add_argument('--gantt', action='store_true', help='ASCII Gantt chart instead of data')
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser('freshness', parents=[common], help='K/V age per slot and patch')
    _grid_options(p)
    p.add_argument('--device', type=int, default=0, help='observer for --heat (default: 0)')
    p.add_argument('--heat', action='store_true', help='ASCII heat strip instead of data')
    p.set_defaults(func=cmd_freshness)

    p = sub.add_parser('simulate', parents=[common], help='discrete-event timeline of one plan')
    p.add_argument('--mode', choices=MODES, default=EXACT)
    p.add_argument('--devices', type=int, help='override cluster.device_count')
    p.add_argument('--strategy', choices=[s.value for s in Strategy], help='override plan.strategy')
    p.add_argument('--trace', metavar='PATH', help='write trace events JSON')
    p.add_argument('--chrome-trace', metavar='PATH', help='write Chrome trace-event JSON')
    p.add_argument('--gantt', type=float, metavar='SECONDS', help='ASCII timeline with this bucket width')
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser('sweep', parents=[common], help='parameter sweeps over the simulator')
    p.add_argument('kind', choices=sorted(SWEEP_DEFAULTS))
    p.add_argument('--values', type=int, nargs='+', help='swept values (default depends on KIND)')
    p.add_argument('--strategies', nargs='+', choices=[s.value for s in Strategy],
                   help='strategies for the devices sweep (default: all)')
    p.add_argument('--strategy', choices=[s.value for s in Strategy], help='plan for the warmup sweep')
    p.add_argument('--mode', choices=MODES, default=EXACT)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser('execute', parents=[common], help='run the toy network under stale activations')
    p.add_argument('--strategy', choices=(PIPEFUSION, DISTRIFUSION))
    p.add_argument('--workers', type=int)
    p.add_argument('--patches', type=int)
    p.add_argument('--layers', type=int)
    p.add_argument('--hidden-size', type=int)
    p.add_argument('--heads', type=int)
    p.add_argument('--seq-len', type=int)
    p.add_argument('--steps', type=int)
    p.add_argument('--warmup', type=int)
    p.add_argument('--step-size', type=float)
    p.add_argument('--compare', action='store_true', help='serial, PipeFusion and DistriFusion side by side')
    p.add_argument('--auto-warmup', action='store_true', help='pick the warmup from latent change')
    p.add_argument('--threshold', type=float, help='relative latent change for --auto-warmup')
    p.add_argument('--runner', choices=RUNNERS)
    p.add_argument('--trajectory', metavar='PATH', help='save latents per step (.npy)')
    p.set_defaults(func=cmd_execute)
    return parser


def _configure_logging(args):
    # type: (argparse.Namespace) -> None
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format='%(levelname)s %(name)s: %(message)s', force=True)


def main(argv=None):
    # type: (Optional[List[str]]) -> int
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    _configure_logging(args)
    try:
        return args.func(args)
    except ValidationError as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except DiTParallelException as e:
        logger.error('%s', e)
        return EXIT_ERROR
    except Exception:
        logger.exception('internal error')
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(main())
