"""Command-line pipeline: demo generation, training, evaluation, adaptation,
continual runs, and analysis export.

Every command resolves its settings as: explicit flags > --config JSON file >
defaults, validates them, and writes the resolved configuration next to its
outputs so any directory can be reproduced bit-for-bit by re-running with the
embedded config and the same seed. Exit codes: 0 success, 2 usage error,
3 runtime error. The FDP_SEED environment variable is the fallback for every
--seed flag.
"""

from __future__ import annotations

import functools
import json
from dataclasses import asdict
from pathlib import Path

import click

from .adaptation import AdaptationConfig, adapt, continual_adapt
from .analysis import build_probe_set, convergence_report, score_similarity, solo_rollout
from .bench import (
    EpisodeDataset,
    evaluate,
    generate_demos,
    make_env,
    make_suite,
)
from .numerics import Rng
from .policy import FactorizedPolicy, PolicyConfig, TrainingLog, canonical_json


def _fail(message: str) -> "SystemExit":
    click.echo(f"error: {message}", err=True)
    return SystemExit(3)


def runtime_errors_exit_3(fn):
    """Map runtime failures to exit code 3 (usage errors stay click's 2)."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except SystemExit:
            raise
        except Exception as exc:  # noqa: BLE001 - boundary of the CLI
            raise _fail(f"{type(exc).__name__}: {exc}") from exc

    return wrapper


def load_config_defaults(ctx, param, value):
    """--config callback: JSON entries become defaults; explicit flags win."""
    if value is None:
        return None
    with open(value) as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise click.BadParameter("config file must hold a JSON object")
    ctx.default_map = {**(ctx.default_map or {}), **data}
    return value


config_option = click.option(
    "--config",
    type=click.Path(exists=True, dir_okay=False),
    callback=load_config_defaults,
    is_eager=True,
    expose_value=False,
    help="JSON file with default values for this command's flags (flags win).",
)

seed_option = click.option(
    "--seed", type=int, default=0, show_default=True, envvar="FDP_SEED",
    help="Master seed (falls back to FDP_SEED).",
)


def write_outputs(out_dir: Path, resolved: dict, files: dict) -> None:
    """Write the resolved config plus artifact files under out_dir."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(canonical_json(resolved) + "\n")
    for name, content in files.items():
        path = out_dir / name
        if isinstance(content, (dict, list)):
            path.write_text(canonical_json(content) + "\n")
        else:
            path.write_text(content)


def policy_config_options(fn):
    opts = [
        click.option("--components", type=int, default=4, show_default=True),
        click.option("--diffusion-steps", type=int, default=100, show_default=True),
        click.option(
            "--schedule",
            type=click.Choice(["cosine", "linear"]),
            default="cosine",
            show_default=True,
        ),
        click.option("--obs-embed-dim", type=int, default=64, show_default=True),
        click.option("--denoiser-hidden", default="256,256", show_default=True),
        click.option("--router-hidden", default="64", show_default=True),
        click.option("--router-temperature", type=float, default=1.0, show_default=True),
        click.option("--router-lr-scale", type=float, default=1.0, show_default=True),
        click.option("--t-pred", type=int, default=16, show_default=True),
        click.option("--t-exec", type=int, default=8, show_default=True),
        click.option("--h-obs", type=int, default=2, show_default=True),
        click.option("--learning-rate", type=float, default=1e-3, show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _widths(text: str) -> tuple:
    text = text.strip()
    return tuple(int(w) for w in text.split(",") if w) if text else ()


def build_policy_config(params: dict) -> PolicyConfig:
    return PolicyConfig(
        n_components=params["components"],
        diffusion_steps=params["diffusion_steps"],
        schedule_kind=params["schedule"],
        obs_embed_dim=params["obs_embed_dim"],
        denoiser_hidden=_widths(params["denoiser_hidden"]),
        router_hidden=_widths(params["router_hidden"]),
        router_temperature=params["router_temperature"],
        router_lr_scale=params["router_lr_scale"],
        t_pred=params["t_pred"],
        t_exec=params["t_exec"],
        h_obs=params["h_obs"],
        learning_rate=params["learning_rate"],
    )


@click.group()
def cli():
    """Factorized diffusion policy: train, evaluate, adapt, analyze."""


@cli.command("gen-demos")
@config_option
@click.option("--suite", required=True, help="Benchmark suite name.")
@click.option("--per-task", type=int, default=25, show_default=True)
@seed_option
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@runtime_errors_exit_3
def cmd_gen_demos(suite, per_task, seed, out):
    """Generate scripted-expert demonstrations into a dataset file."""
    try:
        specs = make_suite(suite)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    dataset = generate_demos(specs, per_task, seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    dataset.save(out)
    click.echo(f"wrote {len(dataset.episodes)} episodes to {out}")


@cli.command("train")
@config_option
@click.option("--demos", type=click.Path(exists=True, dir_okay=False), required=True)
@policy_config_options
@click.option("--epochs", type=int, default=150, show_default=True)
@click.option("--batch-size", type=int, default=96, show_default=True)
@seed_option
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@runtime_errors_exit_3
def cmd_train(demos, epochs, batch_size, seed, out_dir, **net_params):
    """Train a policy on a demonstration dataset."""
    dataset = EpisodeDataset.load(demos)
    cfg = build_policy_config(net_params)
    policy = FactorizedPolicy(
        obs_dim=dataset.state_dim, action_dim=dataset.action_dim, config=cfg, seed=seed
    )
    policy.fit(dataset, epochs=epochs, batch_size=batch_size, seed=seed)
    out = Path(out_dir)
    resolved = {
        "command": "train",
        "demos": str(demos),
        "epochs": epochs,
        "batch_size": batch_size,
        "seed": seed,
        "policy": asdict(cfg),
    }
    log = policy.training_log_
    csv = "epoch,train_mse,val_mse\n" + "\n".join(
        f"{e['epoch']},{e['train_mse']!r},{e['val_mse']!r}" for e in log.entries
    ) + "\n"
    write_outputs(
        out,
        resolved,
        {"training_log.json": log.to_json(), "training_log.csv": csv},
    )
    policy.save(out / "checkpoint.json")
    click.echo(
        f"trained {cfg.n_components} components for {epochs} epochs; "
        f"final val MSE {log.entries[-1]['val_mse']:.4f}; checkpoint in {out}"
    )


def _parse_seeds(text: str) -> list[int]:
    return [int(s) for s in str(text).split(",") if s != ""]


@cli.command("eval")
@config_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--suite", required=True)
@click.option("--episodes", type=int, default=40, show_default=True)
@click.option("--seeds", default="0,1,2,3,4", show_default=True, help="Comma-separated.")
@click.option("--top-k", type=int, default=None)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@runtime_errors_exit_3
def cmd_eval(checkpoint, suite, episodes, seeds, top_k, jobs, out_dir):
    """Evaluate a checkpoint: success table over tasks x seeds."""
    try:
        specs = make_suite(suite)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    policy = FactorizedPolicy.load(checkpoint)
    seed_list = _parse_seeds(seeds)
    table = evaluate(
        policy, specs, episodes_per_task=episodes, seeds=seed_list, top_k=top_k, jobs=jobs
    )
    resolved = {
        "command": "eval",
        "checkpoint": str(checkpoint),
        "suite": suite,
        "episodes": episodes,
        "seeds": seed_list,
        "top_k": top_k,
    }
    write_outputs(
        Path(out_dir),
        resolved,
        {"success_table.json": table.to_json(), "success_table.csv": table.to_csv()},
    )
    click.echo(f"average success {table.average():.3f} over {len(specs)} tasks")


@cli.command("adapt")
@config_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--demos", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--replay-demos", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option(
    "--strategy",
    type=click.Choice(["full", "router", "router+encoder", "new_module"]),
    default="new_module",
    show_default=True,
)
@click.option("--replay-per-task", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@seed_option
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@runtime_errors_exit_3
def cmd_adapt(
    checkpoint, demos, replay_demos, strategy, replay_per_task, epochs, batch_size, seed, out_dir
):
    """Adapt a pretrained checkpoint to a new task dataset."""
    policy = FactorizedPolicy.load(checkpoint)
    new_ds = EpisodeDataset.load(demos)
    replay_ds = EpisodeDataset.load(replay_demos) if replay_demos else None
    config = AdaptationConfig(
        strategy=strategy,
        replay_per_task=replay_per_task,
        epochs=epochs,
        batch_size=batch_size,
    )
    log = adapt(policy, config, new_ds, replay_dataset=replay_ds, seed=seed)
    out = Path(out_dir)
    resolved = {
        "command": "adapt",
        "checkpoint": str(checkpoint),
        "demos": str(demos),
        "replay_demos": str(replay_demos) if replay_demos else None,
        "seed": seed,
        "adaptation": config.to_json(),
    }
    write_outputs(out, resolved, {"adaptation_log.json": log.to_json()})
    policy.save(out / "checkpoint.json")
    click.echo(
        f"adapted with strategy={strategy}; components now {policy.n_components}; "
        f"trainable fraction {log.trainable_parameters / log.total_parameters:.3f}"
    )


@cli.command("continual")
@config_option
@click.option("--suite", default="continual12", show_default=True)
@click.option("--pretrain-tasks", type=int, default=4, show_default=True)
@click.option("--demos-per-task", type=int, default=25, show_default=True)
@click.option("--adapt-demos-per-task", type=int, default=10, show_default=True)
@policy_config_options
@click.option("--epochs", type=int, default=150, show_default=True)
@click.option("--adapt-epochs", type=int, default=60, show_default=True)
@click.option("--batch-size", type=int, default=96, show_default=True)
@click.option("--eval-episodes", type=int, default=10, show_default=True)
@seed_option
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@runtime_errors_exit_3
def cmd_continual(
    suite,
    pretrain_tasks,
    demos_per_task,
    adapt_demos_per_task,
    epochs,
    adapt_epochs,
    batch_size,
    eval_episodes,
    seed,
    out_dir,
    **net_params,
):
    """Pretrain on the first tasks of a suite, then add one component per
    remaining task, evaluating on everything seen after each stage."""
    try:
        specs = make_suite(suite)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    if not 1 <= pretrain_tasks < len(specs):
        raise click.UsageError(
            f"--pretrain-tasks must lie in [1, {len(specs) - 1}] for suite '{suite}'"
        )
    cfg = build_policy_config(net_params)
    pre_specs = specs[:pretrain_tasks]
    pretrain = generate_demos(pre_specs, demos_per_task, seed)
    policy = FactorizedPolicy(
        obs_dim=pretrain.state_dim, action_dim=pretrain.action_dim, config=cfg, seed=seed
    )
    policy.fit(pretrain, epochs=epochs, batch_size=batch_size, seed=seed)

    stages = [
        (spec, generate_demos([spec], adapt_demos_per_task, Rng(seed).child(100 + i).seed % (2**31)))
        for i, spec in enumerate(specs[pretrain_tasks:])
    ]
    adapt_cfg = AdaptationConfig(
        strategy="new_module", epochs=adapt_epochs, batch_size=batch_size
    )

    def eval_fn(p, seen):
        return evaluate(p, seen, episodes_per_task=eval_episodes, seeds=(seed,)).to_json()

    log = continual_adapt(policy, pre_specs, stages, adapt_cfg, seed=seed, evaluate_fn=eval_fn)
    out = Path(out_dir)
    resolved = {
        "command": "continual",
        "suite": suite,
        "pretrain_tasks": pretrain_tasks,
        "demos_per_task": demos_per_task,
        "adapt_demos_per_task": adapt_demos_per_task,
        "epochs": epochs,
        "adapt_epochs": adapt_epochs,
        "eval_episodes": eval_episodes,
        "seed": seed,
        "policy": asdict(cfg),
        "adaptation": adapt_cfg.to_json(),
    }
    write_outputs(out, resolved, {"continual_log.json": log.to_json()})
    policy.save(out / "checkpoint.json")
    click.echo(
        f"continual run over {len(specs)} tasks finished with "
        f"{policy.n_components} components"
    )


@cli.command("analyze")
@config_option
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--demos", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Probe episodes for the similarity matrix.")
@click.option("--probes", type=int, default=256, show_default=True)
@click.option("--suite", default=None, help="Run per-component solo rollouts on task 0.")
@click.option("--logs", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="training_log.json files for a convergence table (repeatable).")
@seed_option
@click.option("--out-dir", type=click.Path(file_okay=False), required=True)
@runtime_errors_exit_3
def cmd_analyze(checkpoint, demos, probes, suite, logs, seed, out_dir):
    """Export similarity matrices, solo-rollout traces, and convergence tables."""
    files: dict = {}
    resolved = {
        "command": "analyze",
        "checkpoint": str(checkpoint) if checkpoint else None,
        "demos": str(demos) if demos else None,
        "probes": probes,
        "suite": suite,
        "logs": [str(p) for p in logs],
        "seed": seed,
    }
    did_anything = False
    if demos:
        if not checkpoint:
            raise click.UsageError("--demos needs --checkpoint")
        policy = FactorizedPolicy.load(checkpoint)
        dataset = EpisodeDataset.load(demos)
        probe_set = build_probe_set(policy, dataset, n=probes, seed=seed)
        sim = score_similarity(policy, probe_set)
        files["similarity.json"] = sim.to_json()
        files["similarity.csv"] = sim.to_csv()
        did_anything = True
    if suite:
        if not checkpoint:
            raise click.UsageError("--suite needs --checkpoint")
        policy = FactorizedPolicy.load(checkpoint)
        spec = make_suite(suite)[0]
        solo = []
        for i in range(policy.n_components):
            r = solo_rollout(policy, i, make_env(spec), Rng(seed).child(i))
            solo.append(
                {
                    "component": i,
                    "task": spec.task,
                    "success": r.success,
                    "steps": len(r.trajectory),
                    "positions": [obs.tolist() for obs, _ in r.trajectory],
                }
            )
        files["solo_rollouts.json"] = solo
        did_anything = True
    if logs:
        loaded = []
        for path in logs:
            with open(path) as f:
                data = json.load(f)
            loaded.append(TrainingLog(entries=data["entries"]))
        labels = [Path(p).parent.name or f"run_{i}" for i, p in enumerate(logs)]
        if len(set(labels)) != len(labels):
            labels = [f"run_{i}" for i in range(len(logs))]
        table = convergence_report(loaded, labels=labels)
        files["convergence.json"] = table.to_json()
        files["convergence.csv"] = table.to_csv()
        did_anything = True
    if not did_anything:
        raise click.UsageError("nothing to analyze: give --demos, --suite, or --logs")
    write_outputs(Path(out_dir), resolved, files)
    click.echo(f"wrote {', '.join(sorted(files))} to {out_dir}")


def main():
    cli(prog_name="fdp")


if __name__ == "__main__":
    main()
