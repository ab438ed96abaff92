#!/usr/bin/env python3
import argparse
import hashlib
import io
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from functools import wraps
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy
from dotenv.parser import parse_stream

from config import FBSM_MAX_ITERS, FBSM_RELAXATION, FBSM_TOL, LOG_LEVEL, OUTPUT_DIR, SCHEMA_VERSION, \
    THREADS, VERSION
from errors import ConfigError, HypothesisViolation, MeanFieldError, UnsupportedInstanceError
from mfcalc import FunctionalDescriptor, fd_check
from models import ParticleEnsemble, SolveResult, TimeGrid
from problem import ControlCost, ControlSet, DriftKind, DriftTerm, ProblemSpec, Schedule, validate_hypotheses
from storage import ArtifactStore
from utils import SAMPLERS, parse_value, sample_ensemble

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

ANALYSES = ('coercivity', 'lipschitz', 'sweep', 'oracle')
COERCIVITY_MODES = ('auto', 'dense', 'subspace')
FD_CHECK_TOL = 1e-4


# --- strict config schema --------------------------------------------------------

def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_integer(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_positions(v) -> bool:
    if not isinstance(v, list) or not v:
        return False
    return all(_is_number(x) for x in v) or all(
        isinstance(row, list) and row and all(_is_number(x) for x in row) for row in v)


TYPE_CHECKS: Dict[str, Tuple[Callable[[Any], bool], str]] = {
    'number': (_is_number, "expected a number"),
    'integer': (_is_integer, "expected an integer"),
    'string': (lambda v: isinstance(v, str), "expected a string"),
    'strings': (lambda v: isinstance(v, list) and all(isinstance(x, str) for x in v), "expected a list of strings"),
    'integers': (lambda v: isinstance(v, list) and bool(v) and all(_is_integer(x) for x in v),
                 "expected a non-empty list of integers"),
    'positions': (_is_positions, "expected a list of numbers or of coordinate lists"),
}


@dataclass(frozen=True)
class Field:
    kind: str
    default: Any = None
    required: bool = False
    check: Optional[Callable[[Any], Optional[str]]] = None


def _positive(v) -> Optional[str]:
    return None if v > 0 else "must be positive"


def _non_negative(v) -> Optional[str]:
    return None if v >= 0 else "must be non-negative"


def _one_of(options):
    def check(v):
        values = v if isinstance(v, list) else [v]
        bad = [x for x in values if x not in options]
        return f"unknown value(s) {bad}, expected one of {list(options)}" if bad else None
    return check


def _unit_interval(v) -> Optional[str]:
    return None if 0 < v <= 1 else "must lie in (0, 1]"


def _all_positive(v) -> Optional[str]:
    return None if min(v) >= 1 else "particle counts must be >= 1"


SCHEMA: Dict[str, Field] = {
    'grid.T': Field('number', required=True, check=_positive),
    'grid.M': Field('integer', required=True, check=_positive),
    'problem.d': Field('integer', 1, check=_positive),
    'problem.drift': Field('strings', [], check=_one_of([k.value for k in DriftKind])),
    'problem.running_cost': Field('string', 'constant'),
    'problem.final_cost': Field('string', 'constant'),
    'problem.control_cost': Field('string', required=True),
    'problem.control_set': Field('string', required=True),
    'problem.x0': Field('positions'),
    'ensemble.N': Field('integer', 32, check=_positive),
    'ensemble.sampler': Field('string', 'uniform', check=_one_of(sorted(SAMPLERS))),
    'solver.relaxation': Field('number', FBSM_RELAXATION, check=_unit_interval),
    'solver.tol': Field('number', FBSM_TOL, check=_positive),
    'solver.max_iters': Field('integer', FBSM_MAX_ITERS, check=_positive),
    'analysis.run': Field('strings', [], check=_one_of(ANALYSES)),
    'analysis.eps_sep': Field('number', check=_non_negative),
    'coercivity.mode': Field('string', 'auto', check=_one_of(COERCIVITY_MODES)),
    'coercivity.M': Field('integer', check=_positive),
    'coercivity.N': Field('integer', check=_positive),
    'sweep.N_list': Field('integers', check=_all_positive),
    'sweep.sampler': Field('string', check=_one_of(sorted(SAMPLERS))),
    'sweep.seed': Field('integer', check=_non_negative),
    'output.dir': Field('string'),
}

# sections whose sub-keys carry constructor parameters
PARAMETER_SECTIONS = ('problem.drift', 'problem.running_cost', 'problem.final_cost',
                      'problem.control_cost', 'problem.control_set')


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    grid: TimeGrid
    values: Dict[str, Any]
    sha256: str
    x0: Optional[ParticleEnsemble] = None

    def get(self, key: str) -> Any:
        return self.values.get(key, SCHEMA[key].default)

    @property
    def solver_options(self) -> Dict[str, Any]:
        return {'relaxation': float(self.get('solver.relaxation')),
                'tol': float(self.get('solver.tol')),
                'max_iters': int(self.get('solver.max_iters'))}

    def initial_ensemble(self, seed: int) -> ParticleEnsemble:
        if self.x0 is not None:
            return self.x0
        return ParticleEnsemble(sample_ensemble(self.get('ensemble.sampler'), self.get('ensemble.N'),
                                                self.problem.dimension, seed))


def _nest(params: Dict[str, Any]) -> Dict[str, Any]:
    """{'schedule.factors': v} -> {'schedule': {'factors': v}}"""
    nested: Dict[str, Any] = {}
    for key, value in params.items():
        node = nested
        parts = key.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return nested


def read_bindings(text: str) -> Tuple[Dict[str, Tuple[Any, int]], List[str]]:
    """Tokenise KEY = VALUE lines; returns {key: (value, line)} and diagnostics"""
    bindings: Dict[str, Tuple[Any, int]] = {}
    diagnostics: List[str] = []
    for binding in parse_stream(io.StringIO(text)):
        line = binding.original.line
        if binding.error:
            diagnostics.append(f"{line}: {binding.original.string.strip()}: unparsable line")
            continue
        if binding.key is None:
            continue
        if binding.value is None:
            diagnostics.append(f"{line}: {binding.key}: missing value")
            continue
        if binding.key in bindings:
            diagnostics.append(f"{line}: {binding.key}: duplicate key (first set on line {bindings[binding.key][1]})")
            continue
        bindings[binding.key] = (parse_value(binding.value), line)
    return bindings, diagnostics


def _section_params(bindings, section: str) -> Dict[str, Any]:
    prefix = section + '.'
    return _nest({key[len(prefix):]: value for key, (value, _) in bindings.items() if key.startswith(prefix)})


def _build_problem(bindings, values, diagnostics) -> Optional[ProblemSpec]:
    def line_of(key):
        return bindings.get(key, (None, 0))[1]

    def attempt(key, builder):
        try:
            return builder()
        except KeyError as e:
            diagnostics.append(f"{line_of(key)}: {key}: missing parameter {e}")
        except (ValueError, TypeError) as e:
            diagnostics.append(f"{line_of(key)}: {key}: {e}")
        return None

    d = values['problem.d']
    drift_params = _section_params(bindings, 'problem.drift')
    unknown_tags = sorted(set(drift_params) - set(values['problem.drift']))
    for tag in unknown_tags:
        diagnostics.append(f"{line_of('problem.drift')}: problem.drift.{tag}: parameters for a drift not listed")
    drift = [attempt('problem.drift', lambda tag=tag: DriftTerm.from_record({'kind': tag, **drift_params.get(tag, {})}))
             for tag in values['problem.drift']]

    running_params = _section_params(bindings, 'problem.running_cost')
    schedule = attempt('problem.running_cost', lambda: Schedule.from_record(running_params.pop('schedule', None)))
    running = attempt('problem.running_cost', lambda: FunctionalDescriptor.from_record(
        {'kind': values['problem.running_cost'], **running_params}))
    final = attempt('problem.final_cost', lambda: FunctionalDescriptor.from_record(
        {'kind': values['problem.final_cost'], **_section_params(bindings, 'problem.final_cost')}))
    control_cost = attempt('problem.control_cost', lambda: ControlCost.from_record(
        {'kind': values['problem.control_cost'], **_section_params(bindings, 'problem.control_cost')}))
    control_set = attempt('problem.control_set', lambda: ControlSet.from_record(
        {'kind': values['problem.control_set'], **_section_params(bindings, 'problem.control_set')}, d))

    if diagnostics:
        return None
    return attempt('problem', lambda: ProblemSpec(
        dimension=d, horizon=values['grid.T'], control_cost=control_cost, control_set=control_set,
        final_cost=final, running_cost=running, running_schedule=schedule, drift=tuple(drift)))


def load_config(text: str) -> ExperimentConfig:
    """Strict schema: every problem is reported as '<line>: <key>: <reason>'"""
    bindings, diagnostics = read_bindings(text)
    values: Dict[str, Any] = {}
    for key, (value, line) in bindings.items():
        if any(key.startswith(section + '.') for section in PARAMETER_SECTIONS):
            continue
        spec = SCHEMA.get(key)
        if spec is None:
            diagnostics.append(f"{line}: {key}: unknown key")
            continue
        type_check, message = TYPE_CHECKS[spec.kind]
        if not type_check(value):
            diagnostics.append(f"{line}: {key}: {message}, got {value!r}")
            continue
        problem = spec.check(value) if spec.check else None
        if problem:
            diagnostics.append(f"{line}: {key}: {problem}")
            continue
        values[key] = value
    for key, spec in SCHEMA.items():
        if spec.required and key not in bindings:
            diagnostics.append(f"0: {key}: required key missing")
        values.setdefault(key, spec.default)
    if diagnostics:
        raise ConfigError(diagnostics)

    problem = _build_problem(bindings, values, diagnostics)
    x0 = None
    if values['problem.x0'] is not None:
        try:
            x0 = ParticleEnsemble.from_list(values['problem.x0'])
            if x0.d != values['problem.d']:
                raise ValueError(f"positions have dimension {x0.d}, problem.d is {values['problem.d']}")
        except ValueError as e:
            diagnostics.append(f"{bindings['problem.x0'][1]}: problem.x0: {e}")
    if diagnostics:
        raise ConfigError(diagnostics)

    digest = hashlib.sha256(text.encode()).hexdigest()
    grid = TimeGrid(float(values['grid.T']), int(values['grid.M']))
    return ExperimentConfig(problem, grid, values, digest, x0)


# --- command wrapper -------------------------------------------------------------

EXPECTED_ERRORS = (ConfigError, HypothesisViolation, UnsupportedInstanceError)


def track_command(command_name: str):
    """Time a command and classify its failures before re-raising them"""
    def decorator(func: Callable):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.time()
            try:
                result = func(*args, **kwargs)
                logger.info(f"Command {command_name} finished in {(time.time() - start_time) * 1000:.0f} ms")
                return result
            except EXPECTED_ERRORS as e:
                logger.warning(f"Command {command_name} rejected its input: {e}")
                raise
            except Exception as e:
                logger.error(f"Critical error in {command_name}: {e}")
                logger.debug(traceback.format_exc())
                raise
        return wrapper
    return decorator


@dataclass
class RunContext:
    config: ExperimentConfig
    store: ArtifactStore
    seed: int
    threads: int
    summary: Dict[str, Any] = field(default_factory=dict)
    converged: bool = True

    def solve(self, x0: Optional[ParticleEnsemble] = None, grid: Optional[TimeGrid] = None,
              key: str = 'solve') -> SolveResult:
        from pmp import solve_fbsm
        x0 = x0 or self.config.initial_ensemble(self.seed)
        grid = grid or self.config.grid
        result = solve_fbsm(self.config.problem, x0, grid, **self.config.solver_options)
        self.summary[key] = {**result.to_dict(), 'N': x0.n, 'M': grid.M}
        self.converged &= result.converged
        return result


def _summary_header(config: ExperimentConfig, command: str, seed: int) -> Dict[str, Any]:
    return {
        'schema': SCHEMA_VERSION,
        'command': command,
        'config_sha256': config.sha256,
        'seed': seed,
        'grid': config.grid.to_dict(),
        'problem': config.problem.to_record(),
        'versions': {'mfc': VERSION, 'numpy': np.__version__, 'scipy': scipy.__version__},
    }


def _run_solve(ctx: RunContext) -> SolveResult:
    ctx.summary['hypotheses'] = validate_hypotheses(ctx.config.problem).to_dict()
    result = ctx.solve()
    ctx.store.write_triple('trajectory', result.triple)
    return result


def _run_coercivity(ctx: RunContext, result: SolveResult):
    from coercivity import estimate_rho, report_to_text, sufficient_constants
    config = ctx.config
    n_override, m_override = config.get('coercivity.N'), config.get('coercivity.M')
    if n_override or m_override:
        grid = TimeGrid(config.grid.T, m_override or config.grid.M)
        x0 = config.initial_ensemble(ctx.seed)
        if n_override:
            x0 = ParticleEnsemble(sample_ensemble(config.get('ensemble.sampler'), n_override,
                                                  config.problem.dimension, ctx.seed))
        result = ctx.solve(x0, grid, key='coercivity_solve')
    report = estimate_rho(config.problem, result.triple, mode=config.get('coercivity.mode'), seed=ctx.seed)
    _, constants = sufficient_constants(config.problem, result.triple)
    ctx.summary['coercivity'] = {**report.to_dict(), **constants}
    ctx.store.write_text('coercivity.txt', report_to_text(report))


def _run_lipschitz(ctx: RunContext, result: SolveResult):
    from regularity import lipschitz_scan, profile_csv
    report = lipschitz_scan(result.triple, ctx.config.get('analysis.eps_sep'))
    ctx.summary['lipschitz'] = report.to_dict()
    ctx.store.write_text('lipschitz_profile.csv', profile_csv(report, result.triple.grid))


def _run_sweep(ctx: RunContext):
    from regularity import convergence_sweep, sweep_csv
    config = ctx.config
    n_list = config.get('sweep.N_list')
    if n_list is None:
        raise ConfigError(["0: sweep.N_list: required for the sweep analysis"])
    seed = config.get('sweep.seed')
    records = convergence_sweep(config.problem, config.get('sweep.sampler') or config.get('ensemble.sampler'),
                                n_list, config.grid, seed=ctx.seed if seed is None else seed,
                                threads=ctx.threads, **config.solver_options)
    ctx.summary['sweep'] = [record.to_dict() for record in records]
    ctx.converged &= all(record.converged for record in records)
    ctx.store.write_text('sweep.csv', sweep_csv(records))


def _run_oracle(ctx: RunContext, result: SolveResult):
    from oracle_variance import closed_form_control, closed_form_rho, discrete_cost, lipschitz_bound
    x0 = ParticleEnsemble(result.triple.states[0])
    instance = ctx.config.problem.variance_instance(x0)
    if instance is None:
        raise UnsupportedInstanceError("oracle comparison needs the centered final-variance instance")
    oracle = closed_form_control(instance)
    gap = float(np.abs(result.triple.controls - oracle[np.newaxis]).max())
    ctx.summary['oracle'] = {
        'max_control_gap': gap,
        'rho': closed_form_rho(instance.lam, instance.T),
        'lipschitz_bound': lipschitz_bound(instance),
        'discrete_cost': discrete_cost(instance, oracle),
        'solver_cost': result.cost,
    }
    logger.info(f"Oracle comparison: max |u_fbsm - u_oracle| = {gap:.3e}")


@track_command('solve')
def cmd_solve(ctx: RunContext):
    """Solve the particle problem and dump the trajectory"""
    _run_solve(ctx)


@track_command('coercivity')
def cmd_coercivity(ctx: RunContext):
    """Solve, then estimate the coercivity constant"""
    _run_coercivity(ctx, _run_solve(ctx))


@track_command('lipschitz')
def cmd_lipschitz(ctx: RunContext):
    """Solve, then scan pairwise control quotients"""
    _run_lipschitz(ctx, _run_solve(ctx))


@track_command('sweep')
def cmd_sweep(ctx: RunContext):
    """Solve across sweep.N_list and compare with a reference"""
    ctx.summary['hypotheses'] = validate_hypotheses(ctx.config.problem).to_dict()
    _run_sweep(ctx)


@track_command('oracle')
def cmd_oracle(ctx: RunContext):
    """Solve and compare with the closed-form variance solution"""
    _run_oracle(ctx, _run_solve(ctx))


@track_command('run')
def cmd_run(ctx: RunContext):
    """Solve and run every analysis listed in analysis.run"""
    analyses = ctx.config.get('analysis.run')
    result = _run_solve(ctx)
    if 'coercivity' in analyses:
        _run_coercivity(ctx, result)
    if 'lipschitz' in analyses:
        _run_lipschitz(ctx, result)
    if 'oracle' in analyses:
        _run_oracle(ctx, result)
    if 'sweep' in analyses:
        _run_sweep(ctx)


@track_command('check')
def cmd_check(ctx: RunContext):
    """Validate hypotheses and finite-difference the cost derivatives"""
    problem = ctx.config.problem
    ctx.summary['hypotheses'] = validate_hypotheses(problem).to_dict()
    mu = ctx.config.initial_ensemble(ctx.seed)
    checks = {}
    for name, functional in (('final_cost', problem.final_cost), ('running_cost', problem.running_cost)):
        report = fd_check(functional, mu, FD_CHECK_TOL, seed=ctx.seed)
        checks[name] = report.to_dict()
        if not report.passed:
            logger.warning(f"Finite-difference check failed for {name}: max error {report.max_error:.3e}")
    ctx.summary['fd_check'] = checks
    if not all(check['passed'] for check in checks.values()):
        raise UnsupportedInstanceError("closed-form derivatives disagree with finite differences")


COMMANDS = {
    'run': cmd_run,
    'solve': cmd_solve,
    'coercivity': cmd_coercivity,
    'lipschitz': cmd_lipschitz,
    'sweep': cmd_sweep,
    'oracle': cmd_oracle,
    'check': cmd_check,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help="experiment config (KEY = VALUE lines)")
    common.add_argument('--out', help="output directory (overrides output.dir)")
    common.add_argument('--seed', type=int, default=0, help="seed for samplers and random probes")
    common.add_argument('--threads', type=int, default=THREADS, help="worker threads for sweeps")
    common.add_argument('--verbose', action='store_true', help="debug logging")

    parser = argparse.ArgumentParser(prog='mfc', description="Particle mean-field optimal control experiments")
    commands = parser.add_subparsers(dest='command', required=True)
    for name, handler in COMMANDS.items():
        commands.add_parser(name, parents=[common], help=handler.__doc__)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit status"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=logging.DEBUG if args.verbose else getattr(logging, LOG_LEVEL.upper(), logging.INFO)
    )
    if args.seed < 0:
        logger.error("--seed must be non-negative")
        return EXIT_INVALID

    try:
        with open(args.config) as stream:
            text = stream.read()
    except OSError as e:
        logger.error(f"Cannot read config {args.config}: {e}")
        return EXIT_INVALID

    try:
        config = load_config(text)
    except ConfigError as e:
        for diagnostic in e.diagnostics:
            print(diagnostic, file=sys.stderr)
        return EXIT_INVALID

    store = ArtifactStore(args.out or config.get('output.dir') or OUTPUT_DIR)
    ctx = RunContext(config, store, args.seed, max(1, args.threads))
    ctx.summary.update(_summary_header(config, args.command, args.seed))
    status = EXIT_OK
    with store:
        try:
            COMMANDS[args.command](ctx)
        except ConfigError as e:
            for diagnostic in e.diagnostics:
                print(diagnostic, file=sys.stderr)
            status = EXIT_INVALID
        except (HypothesisViolation, UnsupportedInstanceError) as e:
            print(str(e), file=sys.stderr)
            ctx.summary['error'] = str(e)
            status = EXIT_INVALID
        except MeanFieldError as e:
            ctx.summary['error'] = str(e)
            ctx.converged = False
        if status == EXIT_OK and not ctx.converged:
            status = EXIT_NOT_CONVERGED
        ctx.summary['exit_status'] = status
        store.write_json('summary.json', ctx.summary)
    return status


if __name__ == '__main__':
    sys.exit(main())
