"""
Command-line entry point.

    lor2c pretrain CONFIG [--force] [--section.key value ...]
    lor2c finetune CONFIG [--method M] [--rank R] [--mmax N] [--imax N] [--base PREFIX] [--force]
    lor2c grid CONFIG [--force]
    lor2c report RUN_DIR... --kind {sfs,sv-trajectory,grad-ratio,params} [--out FILE]

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .config import load_config, parse_overrides
from .errors import ConfigError, Lor2cError
from .experiment import REPORT_KINDS, report, run_finetune, run_grid, run_pretrain

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_EXTRA = {"ignore_unknown_options": True, "allow_extra_args": True}


def _fail(code: int, msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        return fn()
    except ConfigError as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (Lor2cError, ArithmeticError, FloatingPointError) as exc:
        _fail(EXIT_RUNTIME, str(exc))


def _load(config: str, extra: list[str], **shortcuts):
    overrides = parse_overrides(extra)
    for key, value in shortcuts.items():
        if value is not None:
            overrides[key] = value
    return load_config(config, overrides)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def main(verbose: bool):
    """Low-rank residual connection adaptation experiments."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command(context_settings=_EXTRA)
@click.argument("config")
@click.option("--force", is_flag=True, help="Overwrite an existing run directory.")
@click.pass_context
def pretrain(ctx, config: str, force: bool):
    """Pretrain and freeze the base model, then write its checkpoint."""
    def go():
        cfg = _load(config, ctx.args)
        click.echo(run_pretrain(cfg, force=force))
    _guarded(go)


@main.command(context_settings=_EXTRA)
@click.argument("config")
@click.option("--method", type=click.Choice(["lora", "lor2c", "sharelor2c", "imlor2c"]), default=None)
@click.option("--rank", type=int, default=None)
@click.option("--mmax", type=int, default=None, help="Maximum number of merges.")
@click.option("--imax", type=int, default=None, help="Maximum number of injections.")
@click.option("--base", "base", default=None, help="Base checkpoint prefix (default: the config's pretrain run).")
@click.option("--force", is_flag=True, help="Overwrite an existing run directory.")
@click.pass_context
def finetune(ctx, config: str, method, rank, mmax, imax, base, force: bool):
    """Fine-tune adapters on the frozen base; writes metrics, op log and checkpoints."""
    def go():
        cfg = _load(config, ctx.args, **{"train.method": method, "train.rank": rank,
                                          "schedule.m_max": mmax, "schedule.i_max": imax})
        click.echo(run_finetune(cfg, force=force, base=base))
    _guarded(go)


@main.command(context_settings=_EXTRA)
@click.argument("config")
@click.option("--base", "base", default=None, help="Base checkpoint prefix.")
@click.option("--force", is_flag=True, help="Overwrite an existing grid directory.")
@click.pass_context
def grid(ctx, config: str, base, force: bool):
    """Sweep IMLoR2C over the configured (m_max, i_max) grid."""
    def go():
        cfg = _load(config, ctx.args)
        gdir = run_grid(cfg, force=force, base=base)
        click.echo(gdir)
        text = (gdir / "grid.csv").read_text()
        if "failed" in text:
            _fail(EXIT_RUNTIME, f"some grid cells failed; see {gdir / 'grid.csv'}")
    _guarded(go)


@main.command(name="report")
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--kind", type=click.Choice(REPORT_KINDS), required=True)
@click.option("--top-m", type=int, default=50, show_default=True, help="Singular values kept per epoch.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write CSV here instead of stdout.")
def report_cmd(run_dirs, kind: str, top_m: int, out):
    """Emit a CSV table from stored run artifacts."""
    def go():
        text = report(run_dirs, kind, top_m)
        if out:
            Path(out).write_text(text)
        else:
            click.echo(text, nl=False)
    _guarded(go)


if __name__ == "__main__":
    main()
