import os
import shlex
import subprocess

import click
import yaml

from .errors import ConfigurationError, CueHuntError
from .experiments import EXPERIMENTS


def run_reproduction(experiments, seeds, omniglot_root, steps, eval_episodes, pickplace_trials,
                     hotspot_episodes, threads, output, snake_args=None):
    """
    Write the workflow config and run the Snakemake reproduction of every experiment × seed.
    """
    # 1. Resolve output directory
    if not os.path.exists(output):
        os.makedirs(output)
        click.echo(f"Created output directory: {output}")

    # 2. Check the requested experiments
    experiments = list(experiments) or list(EXPERIMENTS)
    unknown = [name for name in experiments if name not in EXPERIMENTS]
    if unknown:
        raise ConfigurationError(f"Unknown experiments: {', '.join(unknown)}. Available: {', '.join(EXPERIMENTS)}")
    needs_omniglot = [name for name in experiments if EXPERIMENTS[name].protocol == "omniglot"]
    if needs_omniglot and not omniglot_root:
        raise ConfigurationError(f"Experiments {', '.join(needs_omniglot)} need --omniglot-root")

    # 3. Locate Snakefile
    current_dir = os.path.dirname(os.path.abspath(__file__))
    snakefile_path = os.path.join(current_dir, "workflow", "Snakefile")

    # 4. Construct configuration
    config = {
        "experiments": experiments,
        "seeds": [int(s) for s in seeds],
        "shapes_experiments": [name for name in experiments if EXPERIMENTS[name].protocol == "shapes"],
        "omniglot_root": os.path.abspath(omniglot_root) if omniglot_root else None,
        "steps": steps,
        "eval_episodes": eval_episodes,
        "pickplace_trials": pickplace_trials,
        "hotspot_episodes": hotspot_episodes,
        "output_dir": os.path.abspath(output),
        "threads": threads,
    }

    click.echo("Starting cuehunt reproduction workflow...")
    click.echo(f"  Snakemake: {snakefile_path}")
    click.echo(f"  Output: {output}")
    click.echo(f"  Experiments: {', '.join(experiments)}")
    click.echo(f"  Seeds: {', '.join(str(s) for s in config['seeds'])}")
    click.echo(f"  Steps per run: {steps if steps is not None else 'experiment default'}")

    # 5. Run Snakemake using subprocess
    config_path = os.path.join(config["output_dir"], "cuehunt_reproduce_config.yaml")
    with open(config_path, "w") as f:
        yaml.dump(config, f)

    click.echo(f"Configuration written to: {config_path}")

    cmd = [
        "python", "-m", "snakemake",
        "-s", snakefile_path,
        "--configfile", config_path,
        "--cores", str(threads),
        "--printshellcmds",
        "--keep-going",
    ]

    if snake_args:
        cmd.extend(shlex.split(snake_args))

    try:
        click.echo("Running Snakemake command: " + " ".join(cmd))
        subprocess.run(cmd, check=True, cwd=config["output_dir"])
        click.echo("Reproduction workflow completed successfully.")
    except subprocess.CalledProcessError as e:
        raise CueHuntError("Snakemake workflow failed.") from e
    except FileNotFoundError as e:
        raise CueHuntError("'snakemake' not found. Please ensure Snakemake is installed in this environment.") from e
    return os.path.join(config["output_dir"], "acceptance.tsv")
