import csv
import io
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import click
import colorlog
import numpy as np

from abclust.__version__ import __version__
from abclust.common_registries import CommonRegistries as CR
from abclust.common_registries import root_registry
from abclust.core import Environment, KernelMethod, RunConfig, RunRecorder, load_config_file, validate_config
from abclust.datasets import (CirclesConfig, Instance, gen_blob_pool, gen_circles, gen_instance,
                              load_instances, read_pool, write_instance_dir, write_labels, write_matrix,
                              write_pool)
from abclust.dynamics import CheckReport, CheckSuite, SuiteOptions, write_trajectory
from abclust.model import VARIANTS, ModelParams
from abclust.pipeline import ClusterPipeline, PipelineReport, parse_k_mode
from abclust.regunion import make_registry_schema_generator
from abclust.tensor import set_check_finite
from abclust.training import (CirclesStream, FixedStream, InstanceStream, PoolStream, train,
                              write_loss_trace)
from abclust.utils import (ConfigurationError, DataError, FriendlyException, NumericalError,
                           VerificationError, write_atomic)

COMPONENT_LOGGERS = ["Trainer", "Cluster", "Dynamics", "Report", "Generator", "Eigen"]
CHECKPOINT_NAME = "checkpoint.json"
LOSS_NAME = "loss.csv"
REPORT_METHODS = ("abc-mul", "abc-add", "pairwise", "spectral")

LOG_FORMATTER = colorlog.ColoredFormatter(
    '%(log_color)s[%(asctime)s][%(name)s/%(levelname)s]: %(message)s',
    datefmt='%H:%M:%S',
    log_colors={
        "DEBUG": "light_cyan",
        "WARNING": "light_yellow",
        "ERROR": "light_red"
    }
)


def setup_logging(debug: bool):
    root = logging.getLogger()
    handler = colorlog.StreamHandler(sys.stdout)
    handler.setFormatter(LOG_FORMATTER)
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    for name in COMPONENT_LOGGERS:
        logging.getLogger(name).setLevel(logging.DEBUG if debug else logging.INFO)


@dataclass
class Options:
    debug: bool
    progress: bool


class AbclustGroup(click.Group):
    """Maps errors escaping a command onto exit codes"""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.exceptions.Abort):
            raise
        except click.UsageError as e:
            e.exit_code = 1
            raise
        except click.ClickException:
            raise
        except FriendlyException as e:
            opts: Options | None = ctx.obj
            logging.getLogger("abclust").error(f"💥 {e}", exc_info=e if opts and opts.debug else None)
            ctx.exit(e.exit_code)
        except Exception as e:
            logging.getLogger("abclust").error(f"💥 Unexpected error: {e}", exc_info=e)
            ctx.exit(3)


@click.group(cls=AbclustGroup)
@click.version_option(__version__)
@click.option("--debug", is_flag=True, help="Debug logging switch")
@click.option("--no-progress", is_flag=True, help="Hide progress bars")
@click.pass_context
def main(ctx: click.Context, debug: bool, no_progress: bool):
    """Attention-based clustering: learned similarity kernels for spectral clustering"""
    setup_logging(debug)
    set_check_finite(debug)
    ctx.obj = Options(debug, not no_progress)


# gen

@main.group()
def gen():
    """Generate datasets"""
    pass


@gen.command("circles", help="Sample points from overlapping circles")
@click.option("--points", type=click.IntRange(min=1), default=50, show_default=True,
              help="Points per instance")
@click.option("--circles", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--noise", type=click.FloatRange(min=0), default=0.0, show_default=True,
              help="Radial Gaussian noise")
@click.option("--count", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path, file_okay=False), required=True)
def gen_circles_cmd(points: int, circles: int, noise: float, count: int, seed: int, out: Path):
    logger = logging.getLogger("Generator")
    if points < circles:
        raise click.UsageError(f"--points {points} cannot cover --circles {circles}")
    recorder = RunRecorder("gen circles", out, logger)
    cfg = CirclesConfig(n_points=points, n_circles=circles, noise_sigma=noise, seed=seed)
    instances = [gen_circles(cfg, np.random.default_rng([seed, i]), i) for i in range(count)]
    recorder.add_output(*write_instance_dir(out, instances))
    recorder.finish({"circles": cfg.model_dump(mode="json"), "count": count}, seed)
    logger.info(f"✅ Wrote {count} circles instance(s) to {out}")


@gen.command("blobs", help="Sample a labelled pool of Gaussian blobs")
@click.option("--classes", type=click.IntRange(min=1), default=10, show_default=True)
@click.option("--per-class", type=click.IntRange(min=1), default=20, show_default=True)
@click.option("--dim", type=click.IntRange(min=1), default=2, show_default=True)
@click.option("--spread", type=click.FloatRange(min=0), default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path, dir_okay=False), required=True)
def gen_blobs_cmd(classes: int, per_class: int, dim: int, spread: float, seed: int, out: Path):
    logger = logging.getLogger("Generator")
    recorder = RunRecorder("gen blobs", out.parent, logger)
    pool = gen_blob_pool(classes, per_class, dim, spread, seed)
    write_pool(out, pool)
    recorder.add_output(out)
    recorder.finish({"classes": classes, "per_class": per_class, "dim": dim, "spread": spread}, seed)
    logger.info(f"✅ Wrote pool of {len(pool)} points in {classes} classes to {out}")


@gen.command("instances", help="Draw fixed-length instances from a labelled pool")
@click.option("--pool", "pool_path", type=click.Path(path_type=Path, dir_okay=False, exists=True),
              required=True)
@click.option("--length", type=click.IntRange(min=1), required=True)
@click.option("--count", type=click.IntRange(min=1), default=100, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path, file_okay=False), default=Path("instances"),
              show_default=True)
def gen_instances_cmd(pool_path: Path, length: int, count: int, seed: int, out: Path):
    logger = logging.getLogger("Generator")
    recorder = RunRecorder("gen instances", out, logger)
    recorder.add_input(pool_path)
    pool = read_pool(pool_path)
    instances = [gen_instance(pool, length, np.random.default_rng([seed, i]), i) for i in range(count)]
    recorder.add_output(*write_instance_dir(out, instances))
    recorder.finish({"pool": str(pool_path), "length": length, "count": count}, seed)
    logger.info(f"✅ Wrote {count} instance(s) of length {length} to {out}")


# train

def apply_overrides(cfg: RunConfig, variant: str | None, compat: str | None,
                    train_flags: dict[str, Any]) -> RunConfig:
    registries = root_registry()
    model = cfg.model
    if variant is not None:
        model = model.with_variant(variant)  # type: ignore[arg-type]
    d = {"model": model.model_dump(mode="json"), "train": cfg.train.model_dump(mode="json")}
    if compat is not None:
        d["model"]["compat_embed"] = compat
        d["model"]["compat_sim"] = compat
    d["train"].update({k: v for k, v in train_flags.items() if v is not None})
    return validate_config(d, RunConfig, registries, "flags")


def make_stream(cfg: RunConfig, data: Path | None, pool: Path | None) -> InstanceStream:
    if data is not None and pool is not None:
        raise click.UsageError("--data and --pool are mutually exclusive")
    t = cfg.train
    if data is not None:
        return FixedStream(load_instances(data))
    if pool is not None:
        return PoolStream(read_pool(pool), t.instance_length, t.seed)
    return CirclesStream(t.instance_length, t.n_circles, t.seed)


@main.command("train", help="Train a similarity model")
@click.option("--config", "config_path", type=click.Path(path_type=Path, dir_okay=False), default=None,
              help="RunConfig file (json, yaml, json5)")
@click.option("--variant", type=click.Choice(VARIANTS), default=None, help="Ablation variant")
@click.option("--compat", type=str, default=None,
              help="Compatibility for embedding and similarity, e.g. multiplicative or additive")
@click.option("--data", type=click.Path(path_type=Path, exists=True), default=None,
              help="Instance CSV file or directory to cycle through")
@click.option("--pool", type=click.Path(path_type=Path, dir_okay=False, exists=True), default=None,
              help="Labelled pool to draw instances from")
@click.option("--steps", type=click.IntRange(min=0), default=None)
@click.option("--lr", "learning_rate", type=click.FloatRange(min=0, min_open=True), default=None)
@click.option("--batch-size", type=click.IntRange(min=1), default=None)
@click.option("--length", "instance_length", type=click.IntRange(min=1), default=None)
@click.option("--circles", "n_circles", type=click.IntRange(min=1), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@click.option("--checkpoint-every", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", is_flag=True, help="Continue from the checkpoint in --out")
@click.option("--out", "-o", type=click.Path(path_type=Path, file_okay=False), default=Path("run"),
              show_default=True)
@click.pass_obj
def train_cmd(opts: Options, config_path: Path | None, variant: str | None, compat: str | None,
              data: Path | None, pool: Path | None, out: Path, resume: bool, **train_flags: Any):
    logger = logging.getLogger("Trainer")
    registries = root_registry()
    recorder = RunRecorder("train", out, logger)
    cfg = RunConfig()
    if config_path is not None:
        cfg = load_config_file(config_path, RunConfig, registries)
        recorder.add_input(config_path)
    cfg = apply_overrides(cfg, variant, compat, train_flags)
    stream = make_stream(cfg, data, pool)
    for p in (data, pool):
        if p is not None:
            recorder.add_input(p)

    checkpoint = out / CHECKPOINT_NAME
    state = None
    if resume:
        params, state = ModelParams.load(checkpoint, registries)
        if params.config != cfg.model:
            logger.warning("⚠ Model config of the checkpoint overrides the requested one")
            cfg = cfg.model_copy(update={"model": params.config})
        if state is None:
            raise DataError(f"Checkpoint {checkpoint} holds no training state to resume from")
    else:
        params = ModelParams.init(cfg.model, cfg.train.seed)
    logger.info(f"🔄 Training {len(params.parameters())} tensors for {cfg.train.steps} steps")

    out.mkdir(parents=True, exist_ok=True)
    result = train(params, stream, cfg.train, logger, resume=state, checkpoint=checkpoint,
                   progress=opts.progress)
    params.save(checkpoint, result.train_state())
    write_loss_trace(out / LOSS_NAME, result.loss_trace)
    recorder.add_output(checkpoint, out / LOSS_NAME)
    recorder.finish(cfg.model_dump(mode="json"), cfg.train.seed)
    logger.info(f"✅ Saved {checkpoint}")


# cluster

def setup_method(key: str, env: Environment) -> KernelMethod:
    method: KernelMethod | None = env.registries.get_entry(CR.METHOD, key)
    if method is None:
        raise ConfigurationError(f"Unknown method {key!r}")
    method.setup(env)
    return method


def write_scores(path: Path, report: PipelineReport):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instance_id", "k_true", "k_used", "k_source", "ari", "nmi"])
    for o in report.outcomes:
        writer.writerow([o.instance_id, o.k_true, o.result.k_used, o.result.k_source,
                         format(o.ari, ".17g"), format(o.nmi, ".17g")])
    write_atomic(path, buf.getvalue())


@main.command("cluster", help="Cluster instances with a trained model or a baseline")
@click.option("--data", type=click.Path(path_type=Path, exists=True), required=True,
              help="Instance CSV file or directory")
@click.option("--checkpoint", type=click.Path(path_type=Path, dir_okay=False), default=None)
@click.option("--k", "k_value", type=str, default="auto", show_default=True,
              help="auto (eigengap), true (from the instance) or a fixed count")
@click.option("--baseline", type=click.Choice(["spectral", "pairwise"]), default=None,
              help="Cluster with a baseline kernel instead of the full model")
@click.option("--k-max", type=click.IntRange(min=1), default=None, help="Cap of the eigengap search")
@click.option("--literal-eigengap", is_flag=True, help="Read the eigengap the literal way")
@click.option("--gamma", type=click.FloatRange(min=0, min_open=True), default=1.0, show_default=True,
              help="Bandwidth of the spectral baseline")
@click.option("--kernels", is_flag=True, help="Also write every similarity matrix as kernel_<id>.csv")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path, file_okay=False), default=Path("clusters"),
              show_default=True)
@click.pass_obj
def cluster_cmd(opts: Options, data: Path, checkpoint: Path | None, k_value: str, baseline: str | None,
                k_max: int | None, literal_eigengap: bool, gamma: float, kernels: bool, seed: int,
                out: Path):
    logger = logging.getLogger("Cluster")
    k_mode = parse_k_mode(k_value)
    key = baseline or "abc"
    if key != "spectral" and checkpoint is None:
        raise ConfigurationError(f"Clustering with {key!r} needs --checkpoint")
    recorder = RunRecorder("cluster", out, logger)
    recorder.add_input(data)
    if checkpoint is not None and key != "spectral":
        recorder.add_input(checkpoint)
    env = Environment(root_registry(), opts.debug, seed, checkpoint, gamma)
    method = setup_method(key, env)
    instances = load_instances(data)
    pipeline = ClusterPipeline(method, k_mode, seed, logger, k_max, literal_eigengap,
                               opts.debug, opts.progress, keep_kernels=kernels)
    report = pipeline.run(instances)

    out.mkdir(parents=True, exist_ok=True)
    for o in report.outcomes:
        path = out / f"labels_{o.instance_id:05d}.csv"
        write_labels(path, o.result.labels)
        recorder.add_output(path)
        if o.kernel is not None:
            path = out / f"kernel_{o.instance_id:05d}.csv"
            write_matrix(path, o.kernel.entries)
            recorder.add_output(path)
    write_scores(out / "scores.csv", report)
    recorder.add_output(out / "scores.csv")
    recorder.finish({"method": key, "k": str(k_mode), "k_max": k_max,
                     "literal_eigengap": literal_eigengap, "gamma": gamma, "kernels": kernels}, seed)
    if report.failed:
        raise NumericalError(f"{len(report.failed)} instance(s) could not be clustered: {report.failed}")


# dynamics

@main.command("dynamics", help="Run numerical checks of the attention dynamics")
@click.argument("suites", nargs=-1)
@click.option("--trials", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--steps", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--directions", type=click.IntRange(min=1), default=1000, show_default=True)
@click.option("--out", "-o", type=click.Path(path_type=Path, dir_okay=False),
              default=Path("dynamics.json"), show_default=True)
@click.option("--trajectory", type=click.Path(path_type=Path, dir_okay=False), default=None,
              help="Write one sample trajectory as CSV")
@click.pass_obj
def dynamics_cmd(opts: Options, suites: tuple[str, ...], trials: int, seed: int, steps: int,
                 directions: int, out: Path, trajectory: Path | None):
    logger = logging.getLogger("Dynamics")
    registry = root_registry().require(CR.Dynamics.SUITE)
    names = list(suites) or registry.keys()
    unknown = [n for n in names if registry.get(n) is None]
    if unknown:
        raise click.UsageError(f"Unknown suite(s) {unknown}, expected some of {registry.keys()}")
    options = SuiteOptions(trials=trials, seed=seed, steps=steps, directions=directions)
    recorder = RunRecorder("dynamics", out.parent, logger)

    reports: list[CheckReport] = []
    sample = None
    for name in names:
        suite: CheckSuite = registry.require(name)
        run = suite.run(options, opts.progress)
        reports.extend(run.reports)
        sample = sample or run.sample
        for r in run.reports:
            mark = "✅" if r.violations == 0 else "💥"
            logger.info(f"{mark} {r.name}: {r.violations} violation(s) over {r.trials} trial(s), "
                        f"worst margin {r.worst_margin:.3e}")

    write_atomic(out, json.dumps([r.model_dump(mode="json") for r in reports], indent=2))
    recorder.add_output(out)
    if trajectory is not None:
        if sample is None:
            logger.warning("⚠ Selected suites produce no trajectory")
        else:
            write_trajectory(trajectory, sample)
            recorder.add_output(trajectory)
    recorder.finish(options.model_dump(mode="json") | {"suites": names}, seed)
    failed = [r.name for r in reports if r.violations]
    if failed:
        raise VerificationError(f"Violations in {failed}, see {out}")


# report

def eval_instances(length: int, circles: int, count: int, seed: int) -> list[Instance]:
    cfg = CirclesConfig(n_points=length, n_circles=circles, seed=seed)
    return [gen_circles(cfg, np.random.default_rng([seed, length, i]), i) for i in range(count)]


def method_for(name: str, runs: Path, length: int) -> tuple[str, Path | None]:
    if name == "spectral":
        return "spectral", None
    ckpt = runs / f"len{length}" / name / CHECKPOINT_NAME
    return ("pairwise" if name == "pairwise" else "abc"), ckpt


def write_scatter(path: Path, inst: Instance, labels: np.ndarray):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "abclust"
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(inst.x[:, 0], inst.x[:, 1], c=labels, cmap="tab10", s=18)
    ax.set_aspect("equal")
    ax.set_title(f"{inst.n} points, {len(set(labels.tolist()))} predicted clusters")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


@main.command("report", help="Evaluate trained models against baselines over instance lengths")
@click.option("--runs", type=click.Path(path_type=Path, file_okay=False), default=Path("runs"),
              show_default=True, help="Holds len<L>/<variant>/checkpoint.json")
@click.option("--length", "lengths", type=click.IntRange(min=1), multiple=True, required=True)
@click.option("--circles", type=click.IntRange(min=1), default=4, show_default=True)
@click.option("--count", type=click.IntRange(min=1), default=100, show_default=True,
              help="Test instances per length")
@click.option("--gamma", type=click.FloatRange(min=0, min_open=True), default=1.0, show_default=True)
@click.option("--seed", type=int, default=1000, show_default=True)
@click.option("--svg", is_flag=True, help="Also draw one clustered instance")
@click.option("--out", "-o", type=click.Path(path_type=Path, file_okay=False), default=Path("report"),
              show_default=True)
@click.pass_obj
def report_cmd(opts: Options, runs: Path, lengths: tuple[int, ...], circles: int, count: int,
               gamma: float, seed: int, svg: bool, out: Path):
    logger = logging.getLogger("Report")
    lengths = tuple(sorted(set(lengths)))
    missing = [str(ckpt) for length in lengths for name in REPORT_METHODS
               for _, ckpt in [method_for(name, runs, length)] if ckpt is not None and not ckpt.is_file()]
    if missing:
        raise DataError("Missing checkpoints:\n" + "\n".join(f" - {m}" for m in missing))
    recorder = RunRecorder("report", out, logger)
    registries = root_registry()

    fig_rows: list[list[Any]] = []
    k_rows: list[list[Any]] = []
    for length in lengths:
        instances = eval_instances(length, circles, count, seed)
        for name in REPORT_METHODS:
            key, ckpt = method_for(name, runs, length)
            if ckpt is not None:
                recorder.add_input(ckpt)
            method = setup_method(key, Environment(registries, opts.debug, seed, ckpt, gamma))
            by_mode: dict[str, PipelineReport] = {}
            for mode in ("true", "auto"):
                pipeline = ClusterPipeline(method, mode, seed, logger, debug=opts.debug,  # type: ignore[arg-type]
                                           progress=opts.progress)
                by_mode[mode] = pipeline.run(instances)
                if by_mode[mode].failed:
                    raise NumericalError(f"{name} failed on {len(by_mode[mode].failed)} instance(s) "
                                         f"of length {length}")
            known, unknown = by_mode["true"], by_mode["auto"]
            fig_rows.append([length, name, format(known.mean_ari, ".17g"), format(known.stderr_ari, ".17g")])
            k_rows.append([length, name, format(known.mean_nmi, ".17g"), format(unknown.mean_nmi, ".17g"),
                           format(unknown.mean_nmi - known.mean_nmi, ".17g")])
            if svg and name == "abc-mul" and length == lengths[-1]:
                out.mkdir(parents=True, exist_ok=True)
                path = out / "scatter.svg"
                write_scatter(path, instances[0], known.outcomes[0].result.labels)
                recorder.add_output(path)

    for fname, header, rows in (("fig2.csv", ["instance_length", "method", "mean_ari", "stderr"], fig_rows),
                                ("kmodes.csv", ["instance_length", "method", "nmi_true_k",
                                                "nmi_eigengap_k", "difference"], k_rows)):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        write_atomic(out / fname, buf.getvalue())
        recorder.add_output(out / fname)
    recorder.finish({"lengths": list(lengths), "circles": circles, "count": count, "gamma": gamma}, seed)
    logger.info(f"✅ Wrote report for {len(lengths)} length(s) to {out}")


@main.command(help="Generate training config schema")
@click.option("--out", "-o", type=click.Path(path_type=Path), default="config_schema.json",
              help="Path where to store schema")
@click.option("--pretty", "-p", is_flag=True, help="Indent schema by 2 spaces")
def schema(out: Path, pretty: bool):
    """Generates JSON schema for the training config and saves it"""
    click.echo(f"Generating schema to {out}")
    r = RunConfig.model_json_schema(schema_generator=make_registry_schema_generator(root_registry()))
    out.write_text(json.dumps(r, indent=2 if pretty else None))
    click.echo("Done")


def run():
    main()


if __name__ == "__main__":
    run()
