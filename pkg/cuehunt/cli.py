import functools
import logging
import os
import sys

import click

from .checkpoint import load_checkpoint, save_checkpoint
from .config import OMNIGLOT_ENV, load_train_config, setup_logging, write_manifest
from .errors import CheckpointError, ConfigurationError, IngestionError

logger = logging.getLogger("cuehunt")

EXIT_THRESHOLD = 1
EXIT_CONFIG = 2
EXIT_INGESTION = 3


def exit_code_for(error):
    if isinstance(error, IngestionError):
        return EXIT_INGESTION
    if isinstance(error, CheckpointError):
        return EXIT_CONFIG if error.incompatible else 1
    if isinstance(error, ConfigurationError):
        return EXIT_CONFIG
    return 1


def handle_errors(func):
    """Report any failure as ``Error: ...`` on stderr and exit with its code."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, SystemExit):
            raise
        except Exception as e:
            logger.debug("Traceback:", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            sys.exit(exit_code_for(e))

    return wrapper


def _store(ctx, protocol, shapes_variant="full", shapes_seed=0):
    from .stores import open_store

    return open_store(protocol, ctx.obj["omniglot_root"], shapes_variant, shapes_seed, strict=ctx.obj["strict"])


def _shapes_seed(checkpoint):
    return int((checkpoint.train_config or {}).get("shapes_seed", 0)) if checkpoint else 0


def _run_logging(ctx, out_dir):
    log_file = os.path.join(out_dir, "cuehunt.log") if out_dir else None
    setup_logging(ctx.obj["verbosity"], log_file)


def _command(ctx):
    return " ".join(["cuehunt"] + sys.argv[1:]) if sys.argv else ctx.command_path


@click.group()
@click.option("--omniglot-root", envvar=OMNIGLOT_ENV, default=None,
              help=f"Omniglot directory with images_background/ and images_evaluation/ (env: {OMNIGLOT_ENV})")
@click.option("--strict/--no-strict", default=True, help="Require the published 40/10 Omniglot alphabet split")
@click.option("-v", "--verbose", count=True, help="More log output (-v for debug)")
@click.option("-q", "--quiet", is_flag=True, help="Only warnings and errors")
@click.pass_context
def cli(ctx, omniglot_root, strict, verbose, quiet):
    """cuehunt: one-shot localization of cued objects."""
    ctx.ensure_object(dict)
    ctx.obj.update({
        "omniglot_root": omniglot_root,
        "strict": strict,
        "verbosity": -1 if quiet else verbose,
    })
    setup_logging(ctx.obj["verbosity"])


@cli.command()
@click.option("--protocol", type=click.Choice(["omniglot", "shapes"]), default="omniglot", show_default=True)
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.option("--count", type=int, default=256, show_default=True, help="Number of episodes")
@click.option("--cue", type=click.Choice(["red", "green"]), default="red", show_default=True)
@click.option("--jitter", type=float, default=0.0, show_default=True, help="Red-dot jitter as a fraction of object size")
@click.option("--canvas", type=int, default=150, show_default=True, help="Canvas side in pixels")
@click.option("--shapes-variant", type=click.Choice(["full", "truncated"]), default="full", show_default=True)
@click.option("--shapes-seed", type=int, default=0, show_default=True)
@click.option("--stream", type=int, default=0, show_default=True, help="Stream index (0 train/test, 1 validation)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", required=True, help="Archive directory")
@click.pass_context
@handle_errors
def generate(ctx, protocol, split, count, cue, jitter, canvas, shapes_variant, shapes_seed, stream, seed, out):
    """Write an episode archive (adapt.png, target.png, meta.json per episode)."""
    from .scenes import Canvas, CueSpec, archive_digest, episode_stream, take, write_archive

    if count < 1:
        raise ConfigurationError(f"--count must be at least 1, got {count}")
    _run_logging(ctx, out)
    cue_spec = CueSpec(cue, jitter=jitter)
    scene_canvas = Canvas(size=canvas)
    store = _store(ctx, protocol, shapes_variant, shapes_seed)
    episodes = take(episode_stream(store, split, cue_spec, seed, scene_canvas, stream=stream), count)
    write_archive(episodes, out)
    digest = archive_digest(out)
    write_manifest(out, _command(ctx), {
        "protocol": protocol, "split": split, "count": count, "cue": cue_spec.to_dict(),
        "canvas": scene_canvas.to_dict(), "shapes_variant": shapes_variant, "stream": stream,
    }, {"seed": seed, "shapes_seed": shapes_seed})
    click.echo(f"Wrote {count} episodes to {out} (sha256 {digest})")


def _train_config(config_file, experiment, overrides):
    from .experiments import get_experiment

    base = {}
    if experiment:
        spec = get_experiment(experiment)
        base.update({"protocol": spec.protocol, "cue": spec.cue.to_dict(), "shapes_variant": spec.shapes_variant})
        base.update(spec.train_overrides)
    return load_train_config(config_file, overrides, base)


def _checkpoint_path(out):
    return out if out.endswith(".ckpt") else os.path.join(out, "model.ckpt")


def _default_out(ckpt, name):
    """``name`` beside the checkpoint, or under ``runs/`` without one."""
    return os.path.join(os.path.dirname(os.path.abspath(ckpt)) if ckpt else "runs", name)


@cli.command()
@click.option("--config", "config_file", default=None, help="JSON (or YAML) training config")
@click.option("--experiment", default=None, help="Start from a named experiment's protocol and cue")
@click.option("--seed", type=int, default=None, help="Initialization and data seed")
@click.option("--steps", type=int, default=None, help="Step budget")
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--canvas", type=int, default=None)
@click.option("--float-width", type=click.Choice(["float64", "float32"]), default=None)
@click.option("--resume", default=None, help="Checkpoint to continue from")
@click.option("--workers", type=int, default=None, help="Parallel validation workers")
@click.option("-o", "--out", required=True, help="Run directory, or a .ckpt path")
@click.pass_context
@handle_errors
def train(ctx, config_file, experiment, seed, steps, batch_size, lr, canvas, float_width, resume, workers, out):
    """Train a localizer and write its checkpoint."""
    from .train import train as run_training
    from .visualize import write_training_report

    ckpt_path = _checkpoint_path(out)
    run_dir = os.path.dirname(os.path.abspath(ckpt_path))
    _run_logging(ctx, run_dir)
    config = _train_config(config_file, experiment, {
        "seed": seed, "data_seed": seed, "steps": steps, "batch_size": batch_size, "lr": lr,
        "canvas": canvas, "float_width": float_width, "workers": workers,
    })
    write_manifest(run_dir, _command(ctx), config.to_dict(), {"seed": config.seed, "data_seed": config.data_seed})
    store = _store(ctx, config.protocol, config.shapes_variant, config.shapes_seed)
    start = load_checkpoint(resume) if resume else None

    metric_log = os.path.join(run_dir, "metrics.jsonl")
    if start is None and os.path.exists(metric_log):
        os.remove(metric_log)
    ckpt = run_training(config, store, resume=start, metric_log=metric_log, checkpoint_path=ckpt_path)
    save_checkpoint(ckpt, ckpt_path)
    if os.path.exists(metric_log):
        write_training_report(metric_log, os.path.join(run_dir, "training_report.html"))
    click.echo(f"Checkpoint (step {ckpt.step}) written to {ckpt_path}")


def _predictor(kind, ckpt_path):
    from .baseline import TemplateMatcher
    from .train import ModelPredictor

    if kind == "baseline":
        return TemplateMatcher(), None
    if not ckpt_path:
        raise ConfigurationError("--ckpt is required for the model predictor")
    ckpt = load_checkpoint(ckpt_path)
    return ModelPredictor.from_checkpoint(ckpt), ckpt


@cli.command(name="eval")
@click.option("--ckpt", default=None, help="Checkpoint to evaluate")
@click.option("--experiment", required=True, help="Experiment name, e.g. omniglot-base")
@click.option("--episodes", type=int, default=None, help="Test episodes (default 256)")
@click.option("--predictor", type=click.Choice(["model", "baseline"]), default="model", show_default=True)
@click.option("--hotspot-episodes", type=int, default=0, show_default=True, help="Episodes for the attention hot-spot rate")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("-o", "--out", default=None, help="Report directory (default eval-<experiment> beside the checkpoint)")
@click.pass_context
@handle_errors
def evaluate(ctx, ckpt, experiment, episodes, predictor, hotspot_episodes, seed, workers, out):
    """Evaluate on an experiment's test stream; exit 1 when its thresholds are missed."""
    from .experiments import get_experiment, run_experiment

    spec = get_experiment(experiment)
    out = out or _default_out(ckpt, f"eval-{spec.name}")
    _run_logging(ctx, out)
    model, checkpoint = _predictor(predictor, ckpt)
    store = _store(ctx, spec.protocol, spec.shapes_variant, _shapes_seed(checkpoint))
    write_manifest(out, _command(ctx), {
        "experiment": spec.to_dict(), "ckpt": os.path.abspath(ckpt) if checkpoint else None,
        "episodes": episodes or spec.eval_episodes, "predictor": predictor, "workers": workers,
        "hotspot_episodes": hotspot_episodes,
    }, {"seed": seed, "shapes_seed": _shapes_seed(checkpoint)})
    result = run_experiment(spec, store, checkpoint=checkpoint, seed=seed, out_dir=out, predictor=model,
                            episodes=episodes, workers=workers, hotspot_episodes=hotspot_episodes)
    report = result.report
    click.echo(
        f"{spec.name}: {report.episodes} episodes, mse {report.mse:.5f} ({report.percent:.2f}% per axis), "
        f"success@10% {report.success_at_10:.3f}, success@15% {report.success_at_15:.3f}"
    )
    if result.hotspot is not None:
        click.echo(f"attention hot-spot rate: {result.hotspot:.3f}")
    if result.passed is False:
        click.echo(f"Thresholds missed: {[k for k, ok in result.checks.items() if not ok]}", err=True)
        sys.exit(EXIT_THRESHOLD)


@cli.command()
@click.option("--ckpt", default=None, help="Checkpoint to drive the mock")
@click.option("--experiment", default="shapes-full", show_default=True, help="Shapes experiment providing the store")
@click.option("--trials", type=int, default=20, show_default=True)
@click.option("--tolerance", type=float, default=0.10, show_default=True, help="Grasp tolerance (normalized)")
@click.option("--predictor", type=click.Choice(["model", "baseline"]), default="model", show_default=True)
@click.option("--min-successes", type=int, default=None, help="Exit 1 below this many successful trials")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", default=None, help="Report directory (default pickplace beside the checkpoint)")
@click.pass_context
@handle_errors
def pickplace(ctx, ckpt, experiment, trials, tolerance, predictor, min_successes, seed, out):
    """Pick-and-place mock on unseen shapes."""
    from .experiments import get_experiment, pick_place_mock
    from .scenes import Canvas

    spec = get_experiment(experiment)
    if spec.protocol != "shapes":
        raise ConfigurationError(f"Pick-and-place runs on a shapes experiment, got {experiment}")
    out = out or _default_out(ckpt, "pickplace")
    _run_logging(ctx, out)
    model, checkpoint = _predictor(predictor, ckpt)
    canvas = Canvas(size=checkpoint.architecture.height) if checkpoint else Canvas(size=64)
    store = _store(ctx, "shapes", spec.shapes_variant, _shapes_seed(checkpoint))
    write_manifest(out, _command(ctx), {
        "experiment": experiment, "ckpt": os.path.abspath(ckpt) if checkpoint else None, "predictor": predictor,
        "trials": trials, "tolerance": tolerance, "canvas": canvas.to_dict(), "cue": spec.cue.to_dict(),
        "min_successes": min_successes,
    }, {"seed": seed, "shapes_seed": _shapes_seed(checkpoint)})
    result = pick_place_mock(model, store, n=trials, grasp_tolerance=tolerance, seed=seed, canvas=canvas, cue=spec.cue)
    result.write(out)
    counts = result.counts()
    click.echo(
        f"{result.successes}/{trials} successful "
        f"({counts['wrong-object']} wrong-object, {counts['collision']} collision)"
    )
    if min_successes is not None and result.successes < min_successes:
        sys.exit(EXIT_THRESHOLD)


@cli.command()
@click.option("--ckpt", required=True, help="Checkpoint to visualize")
@click.option("--experiment", default="omniglot-base", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--count", type=int, default=1, show_default=True, help="Number of test episodes to render")
@click.option("-o", "--out", required=True, help="Output directory")
@click.pass_context
@handle_errors
def visualize(ctx, ckpt, experiment, seed, count, out):
    """Render attention overlays, score maps and predictions as PNG."""
    from .experiments import evaluation_episodes, get_experiment
    from .scenes import Canvas
    from .train import ModelPredictor
    from .visualize import render_episode

    _run_logging(ctx, out)
    spec = get_experiment(experiment)
    checkpoint = load_checkpoint(ckpt)
    predictor = ModelPredictor.from_checkpoint(checkpoint)
    store = _store(ctx, spec.protocol, spec.shapes_variant, _shapes_seed(checkpoint))
    episodes = evaluation_episodes(store, spec.cue, Canvas(size=checkpoint.architecture.height), seed, count)
    write_manifest(out, _command(ctx), {"experiment": experiment, "count": count, "ckpt": os.path.abspath(ckpt)}, {"seed": seed})
    for n, ep in enumerate(episodes):
        render_episode(ep, predictor, os.path.join(out, f"episode_{n:06d}"))
    click.echo(f"Rendered {len(episodes)} episodes to {out}")


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", default=os.path.join("runs", "selftest"), show_default=True, help="Report directory")
@click.pass_context
@handle_errors
def selftest(ctx, seed, out):
    """Oracle, sliding-window and gradient checks."""
    from .selftest import run_selftest

    _run_logging(ctx, out)
    write_manifest(out, _command(ctx), {"checks": "all"}, {"seed": seed})
    report = run_selftest(seed)
    report.write(out)
    for r in report.results:
        click.echo(f"{'PASS' if r.passed else 'FAIL'}  {r.name}: {r.detail}")
    if not report.passed:
        sys.exit(1)


@cli.command()
@click.option("-e", "--experiment", "experiments", multiple=True, help="Experiment to reproduce (repeatable, default all)")
@click.option("--seeds", default="0,1,2", show_default=True, help="Comma-separated seeds")
@click.option("--steps", type=int, default=None, help="Step budget per run")
@click.option("--eval-episodes", type=int, default=256, show_default=True)
@click.option("--pickplace-trials", type=int, default=20, show_default=True)
@click.option("--hotspot-episodes", type=int, default=50, show_default=True)
@click.option("-t", "--threads", type=int, default=1, show_default=True, help="Snakemake cores")
@click.option("-o", "--output", required=True, help="Output directory")
@click.option("--snake-args", default=None, help="Extra arguments passed to Snakemake")
@click.pass_context
@handle_errors
def reproduce(ctx, experiments, seeds, steps, eval_episodes, pickplace_trials, hotspot_episodes, threads, output, snake_args):
    """Train and evaluate every experiment across seeds with Snakemake."""
    from .reproduce import run_reproduction

    try:
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
    except ValueError as e:
        raise ConfigurationError(f"--seeds must be comma-separated integers, got '{seeds}'") from e
    acceptance = run_reproduction(experiments, seed_list, ctx.obj["omniglot_root"], steps, eval_episodes,
                                  pickplace_trials, hotspot_episodes, threads, output, snake_args)
    click.echo(f"Acceptance table: {acceptance}")


if __name__ == "__main__":
    cli()
