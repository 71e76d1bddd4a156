"""
``hypergs <subcommand> [--config file.json] [--set key=value ...] [--json-logs] [--debug]``

Config resolution: DTO defaults, then the JSON file, then every ``--set`` in order. ``--set`` values
are parsed as JSON when possible (``--set latent_dims=[1,2]``), dotted keys reach nested models
(``--set scene_config.preset=swirl``).

Exit codes: 0 success, 2 invalid config or missing input, 1 any other failure.
"""
import argparse
import logging
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Type

import orjson
from pydantic import ValidationError

from .commands import BENCH_SUMMARY_NAME, cmd_bench, cmd_fit, cmd_gradcheck, cmd_render, cmd_scene, cmd_uncertainty
from .const import ErrorCode
from .dto import (
    BaseDTO,
    BenchRunConfig,
    FitRunConfig,
    GradcheckRunConfig,
    RenderRunConfig,
    SceneRunConfig,
    UncertaintyRunConfig,
)
from .errors import ConfigError, ErrorReport, HyperGsError, unknown_error
from .logger import configure_logging, log_extra
from .serialization import default, dumps, read_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

USAGE_ERRORS = (ErrorCode.CONFIG_ERROR, ErrorCode.ARTIFACT_ERROR)


def _summary_bench(result: Any) -> Dict[str, Any]:
    return {'csv': str(result), 'ratios': read_json(result.parent / BENCH_SUMMARY_NAME)['ratios']}


def _summary_fit(result: Any) -> Dict[str, Any]:
    return {'final_loss': result.final_loss, 'mean_psnr': sum(result.psnr) / len(result.psnr)}


def _summary_path(result: Any) -> Dict[str, Any]:
    return {'path': str(result)}


def _summary_gradcheck(result: Any) -> Dict[str, Any]:
    worst = max(result, key=lambda r: r.max_rel_error)
    return {'checks': len(result), 'max_rel_error': worst.max_rel_error, 'op': worst.op, 'argmax': worst.argmax}


SUBCOMMANDS: Dict[str, Tuple[Type[BaseDTO], Callable[[Any], Any], Callable[[Any], Dict[str, Any]], str]] = {
    'bench': (BenchRunConfig, cmd_bench, _summary_bench, 'time naive vs fast conditioning, write a CSV'),
    'fit': (FitRunConfig, cmd_fit, _summary_fit, 'fit HyperGaussians to a synthetic dynamic scene'),
    'render': (RenderRunConfig, cmd_render, _summary_path, 'render one frame of a checkpoint to PPM'),
    'gradcheck': (GradcheckRunConfig, cmd_gradcheck, _summary_gradcheck, 'compare analytic and numeric gradients'),
    'uncertainty': (UncertaintyRunConfig, cmd_uncertainty, _summary_path, 'render per-primitive uncertainty'),
    'scene': (SceneRunConfig, cmd_scene, _summary_path, 'generate a synthetic scene JSON'),
}


def _fields(model: Type[BaseDTO]) -> Dict[str, Tuple[Any, Optional[str]]]:
    # pydantic 2 exposes model_fields, 1.x __fields__ with the FieldInfo one level down
    fields = getattr(model, 'model_fields', None)
    if fields is not None:
        return {name: (f.default, f.description) for name, f in fields.items()}
    return {name: (f.default, f.field_info.description) for name, f in model.__fields__.items()}


def config_help(model: Type[BaseDTO]) -> str:
    lines = ['config keys:']
    for name, (default, description) in _fields(model).items():
        shown = '' if isinstance(default, BaseDTO) or default is Ellipsis else f' (default: {default})'
        lines.append(f'  {name}: {description or ""}{shown}')
    return '\n'.join(lines)


def _parse_value(raw: str) -> Any:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError:
        return raw


def apply_overrides(content: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        key, sep, raw = item.partition('=')
        if not sep or not key:
            raise ConfigError(f'--set expects key=value, got {item!r}')
        node = content
        *parents, leaf = key.split('.')
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f'{part!r} in {key!r} is not a nested config')
            node = child
        node[leaf] = _parse_value(raw)
    return content


def load_config(model: Type[BaseDTO], path: Optional[str], overrides: Sequence[str]) -> BaseDTO:
    content: Dict[str, Any] = {}
    if path:
        loaded = read_json(path)
        if not isinstance(loaded, dict):
            raise ConfigError(f'{path} must hold a JSON object')
        content = loaded
    content = apply_overrides(content, overrides)
    try:
        return model.parse_obj(content)
    except ValidationError as exc:
        raise ConfigError('invalid config', errors=orjson.loads(exc.json())) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='hypergs', description='HyperGaussian conditioning, fitting and benchmarks')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, (model, _, _, description) in SUBCOMMANDS.items():
        p = sub.add_parser(
            name,
            help=description,
            description=description,
            epilog=config_help(model),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument('--config', help='JSON config file')
        p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE')
        p.add_argument('--json-logs', action='store_true', help='one JSON object per log line')
        p.add_argument('--debug', action='store_true', help='debug level for hypergs loggers')
    return parser


def _report(report: ErrorReport) -> None:
    # single line, last on stderr
    sys.stderr.write(orjson.dumps(report, default=default).decode() + '\n')


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(enable_json=args.json_logs, debug_loggers=['hypergs'] if args.debug else None)
    model, command, summary, _ = SUBCOMMANDS[args.command]
    try:
        cfg = load_config(model, args.config, args.overrides)
        logger.info('run', **log_extra(command=args.command, config=cfg.dict()))
        result = command(cfg)
    except HyperGsError as exc:
        logger.error('run failed', **log_extra(command=args.command, code=str(exc.code), error=exc.message))
        _report(exc.report())
        return EXIT_USAGE if exc.code in USAGE_ERRORS else EXIT_FAILURE
    except Exception as exc:
        logger.exception('run failed')
        _report(unknown_error(exc, {'command': args.command}))
        return EXIT_FAILURE
    sys.stdout.write(dumps({'command': args.command, **summary(result)}).decode())
    return EXIT_OK

