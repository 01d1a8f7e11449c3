"""Command-line entry points.

Layout:
    previewlab toy gen|train|distill|table
    previewlab intrinsics gen-data|train-dit
    previewlab decoder train|eval
    previewlab probe sweep
    previewlab steer demo
    previewlab serve --port N

Every artifact-producing command writes a ``run.json`` capturing the
resolved configuration and content hashes of its inputs, and is byte-stable
per seed. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import click


def _set_threads(n: int | None) -> None:
    if n is not None:
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _hash_path(path: Path) -> str:
    h = hashlib.sha256()
    targets = sorted(path.rglob("*")) if path.is_dir() else [path]
    for p in targets:
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


def _write_run_json(out_dir: Path, command: str, config: dict, inputs: dict[str, str] | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "config": config,
        "inputs": {k: _hash_path(Path(v)) for k, v in (inputs or {}).items()},
    }
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


@click.group()
@click.option("--seed", default=0, show_default=True, help="Global seed for every stream.")
@click.option("--out-dir", default="out", show_default=True, type=click.Path(path_type=Path))
@click.option("--threads", default=None, type=int, help="BLAS thread cap.")
@click.pass_context
def main(ctx, seed: int, out_dir: Path, threads: int | None):
    _set_threads(threads)
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["out_dir"] = out_dir


# -- toy ------------------------------------------------------------------------


@main.group()
def toy():
    """Moving-dot world: data, training, distillation, the dot-count table."""


def _dot_preset(ctx, variant: str, **overrides):
    from .pipelines import DotPreset

    fields = {f.name for f in dataclasses.fields(DotPreset)}
    kwargs = {k: v for k, v in overrides.items() if v is not None and k in fields}
    return DotPreset(variant=variant, seed=ctx.obj["seed"], **kwargs)


@toy.command("gen")
@click.option("--variant", type=click.Choice(["motion_only", "motion_position"]), default="motion_only")
@click.pass_context
def toy_gen(ctx, variant):
    """Write the enumerated dot dataset to disk."""
    from . import worlds

    out = ctx.obj["out_dir"] / f"dot_{variant}" / "dataset"
    spec = worlds.DotSpec(variant=variant)
    worlds.save_dot_dataset(out, worlds.gen_dot_dataset(spec), spec)
    _write_run_json(out.parent, "toy gen", {"variant": variant, "seed": ctx.obj["seed"]})
    click.echo(f"wrote {out}")


@toy.command("train")
@click.option("--variant", type=click.Choice(["motion_only", "motion_position"]), default="motion_only")
@click.option("--steps", "train_steps", type=int, default=None)
@click.option("--lr", "train_lr", type=float, default=None)
@click.pass_context
def toy_train(ctx, variant, **overrides):
    """Train the dot diffusion model (also distills and fits the toy heads)."""
    from .pipelines import build_dot_world

    preset = _dot_preset(ctx, variant, **overrides)
    art = build_dot_world(preset, ctx.obj["out_dir"])
    _write_run_json(art.directory, "toy train", dataclasses.asdict(preset))
    click.echo(f"artifacts in {art.directory}")


@toy.command("distill")
@click.option("--variant", type=click.Choice(["motion_only", "motion_position"]), default="motion_only")
@click.option("--steps", "cd_steps", type=int, default=None)
@click.pass_context
def toy_distill(ctx, variant, **overrides):
    """(Re)build the consistency-distilled one-step student."""
    from .pipelines import build_dot_world

    preset = _dot_preset(ctx, variant, **overrides)
    art = build_dot_world(preset, ctx.obj["out_dir"])
    _write_run_json(art.directory, "toy distill", dataclasses.asdict(preset))
    click.echo(f"student checkpoint in {art.directory / 'cd'}")


@toy.command("table")
@click.option("--variant", type=click.Choice(["motion_only", "motion_position"]), default="motion_only")
@click.option("--samples", type=int, default=64, show_default=True)
@click.option("--full-steps", type=int, default=1000, show_default=True)
@click.pass_context
def toy_table(ctx, variant, samples, full_steps):
    """Emit the dot-count table (CSV + Markdown) plus a sample frame grid."""
    from .pipelines import build_dot_world, toy_table_rows, DotPreset
    from .report import save_frame_grid, save_toy_table
    from .diffusion import sample_ancestral

    preset = _dot_preset(ctx, variant)
    art = build_dot_world(preset, ctx.obj["out_dir"])
    rows = toy_table_rows(art, n_samples=samples, seed=ctx.obj["seed"] + 123, full_steps=full_steps)
    out = art.directory
    save_toy_table(rows, out / "toy_table.csv", out / "toy_table.md")
    demo, _ = sample_ancestral(art.model, full_steps, ctx.obj["seed"] + 7, 6)
    save_frame_grid(list(demo), out / "toy_samples.png")
    _write_run_json(out, "toy table", {"variant": variant, "samples": samples, "full_steps": full_steps, "seed": ctx.obj["seed"]})
    click.echo((out / "toy_table.md").read_text())


# -- intrinsics ---------------------------------------------------------------------


@main.group()
def intrinsics():
    """Shapes world with analytic intrinsics."""


def _shapes_preset(ctx, small: bool, **overrides):
    from .pipelines import SMALL_SHAPES, ShapesPreset

    base = SMALL_SHAPES if small else ShapesPreset()
    fields = {k: v for k, v in overrides.items() if v is not None}
    return dataclasses.replace(base, seed=ctx.obj["seed"], **fields)


@intrinsics.command("gen-data")
@click.option("--small/--full", default=False, help="Use the reduced desk preset.")
@click.option("--count", type=int, default=None, help="Override total scene count.")
@click.pass_context
def intrinsics_gen(ctx, small, count):
    """Generate the shapes dataset directory."""
    from . import worlds
    from .pipelines import shapes_config

    preset = _shapes_preset(ctx, small)
    if count is not None:
        preset = dataclasses.replace(preset, n_train=max(1, count * 8 // 10), n_val=max(1, count - count * 8 // 10))
    cfg = shapes_config(preset)
    bundles = worlds.gen_shapes_dataset(preset.seed, cfg, preset.n_train + preset.n_val)
    out = ctx.obj["out_dir"] / f"shapes_{preset.grid}x{preset.frames}" / "dataset"
    worlds.save_shapes_dataset(out, bundles, cfg, preset.seed)
    _write_run_json(out.parent, "intrinsics gen-data", dataclasses.asdict(preset))
    click.echo(f"wrote {len(bundles)} scenes to {out}")


@intrinsics.command("train-dit")
@click.option("--small/--full", default=False)
@click.option("--steps", "train_steps", type=int, default=None)
@click.option("--lr", "train_lr", type=float, default=None)
@click.pass_context
def intrinsics_train(ctx, small, **overrides):
    """Train the shapes diffusion transformer (plus both preview decoders)."""
    from .pipelines import build_shapes_world
    from .report import save_frame_grid
    from .diffusion import sample_ode

    preset = _shapes_preset(ctx, small, **overrides)
    art = build_shapes_world(preset, ctx.obj["out_dir"])
    samples, _ = sample_ode(art.model, art.preset.T, ctx.obj["seed"] + 7, 4)
    save_frame_grid(list(samples), art.directory / "shapes_samples.png")
    _write_run_json(art.directory, "intrinsics train-dit", dataclasses.asdict(preset))
    click.echo(f"artifacts in {art.directory}")


# -- decoder --------------------------------------------------------------------------


@main.group()
def decoder():
    """Preview decoder training and evaluation."""


@decoder.command("train")
@click.option("--arch", type=click.Choice(["naive", "mb"]), default="mb", show_default=True)
@click.option("--depth", type=click.Choice(["4", "6", "8"]), default="6", show_default=True)
@click.option("--k", "branches", type=int, default=4, show_default=True)
@click.option("--small/--full", default=True)
@click.option("--steps", type=int, default=None)
@click.pass_context
def decoder_train(ctx, arch, depth, branches, small, steps):
    """Train a preview decoder variant against the shapes model's taps."""
    from .decoder import DecoderConfig, LossConfig, MBDecoder, save_decoder, train_decoder
    from .pipelines import build_shapes_world, feature_pairs
    from .report import save_loss_curve

    preset = _shapes_preset(ctx, small)
    art = build_shapes_world(preset, ctx.obj["out_dir"])
    k = 1 if arch == "naive" else branches
    lam = 0.0 if arch == "naive" else preset.lambda_ens
    dec = MBDecoder(
        DecoderConfig(in_channels=preset.dim, branches=k, width=preset.dec_width, depth=int(depth)),
        seed=preset.seed + 17,
    )
    feats, targets = feature_pairs(art.model, art.train, art.tap_block, art.tap_steps, preset.seed)
    losses = train_decoder(
        dec,
        feats,
        targets,
        LossConfig(lambda_ens=lam, lambda_edge=preset.lambda_edge),
        steps or preset.dec_steps,
        preset.dec_lr,
        preset.seed,
        batch=preset.dec_batch,
    )
    out = art.directory / f"decoder_{arch}_d{depth}_k{k}"
    save_decoder(out, dec, extra={"tap_block": art.tap_block, "tap_steps": art.tap_steps})
    save_loss_curve(losses, out / "loss.png", title=f"{arch} decoder loss")
    _write_run_json(out, "decoder train", {"arch": arch, "depth": int(depth), "k": k, "preset": dataclasses.asdict(preset)})
    click.echo(f"decoder in {out}")


@decoder.command("eval")
@click.option("--small/--full", default=True)
@click.pass_context
def decoder_eval(ctx, small):
    """Held-out per-channel ensemble L1 for the MB and naive decoders."""
    import csv as _csv

    from .decoder import eval_decoder_l1
    from .pipelines import build_shapes_world, feature_pairs

    preset = _shapes_preset(ctx, small)
    art = build_shapes_world(preset, ctx.obj["out_dir"])
    feats, targets = feature_pairs(art.model, art.val, art.tap_block, art.tap_steps, preset.seed + 999)
    rows = []
    for name, dec in (("mb", art.mb), ("naive", art.naive)):
        report = eval_decoder_l1(dec, feats, targets)
        for channel, val in report.items():
            rows.append({"decoder": name, "channel": channel, "l1": f"{val:.5f}"})
    out = art.directory / "decoder_eval.csv"
    with open(out, "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=["decoder", "channel", "l1"])
        writer.writeheader()
        writer.writerows(rows)
    _write_run_json(art.directory, "decoder eval", dataclasses.asdict(preset))
    click.echo(out.read_text())


# -- probes ------------------------------------------------------------------------------


@main.group()
def probe():
    """Feature-to-intrinsics probing."""


@probe.command("sweep")
@click.option("--small/--full", default=True)
@click.option("--kinds", default="linear", show_default=True, help="Comma-separated probe kinds.")
@click.option("--timesteps", type=int, default=10, show_default=True)
@click.pass_context
def probe_sweep(ctx, small, kinds, timesteps):
    """Probe every (block, timestep, channel) cell; emit sweep.json/csv + heatmaps."""
    from .metrics import trend_stats
    from .pipelines import build_shapes_world
    from .probes import run_sweep
    from .report import save_sweep_heatmaps

    preset = _shapes_preset(ctx, small)
    art = build_shapes_world(preset, ctx.obj["out_dir"])
    sweep = run_sweep(
        art.model,
        art.train[: min(48, len(art.train))],
        art.val[: min(16, len(art.val))],
        kinds=tuple(kinds.split(",")),
        n_timesteps=timesteps,
        seed=preset.seed,
    )
    out = art.directory
    sweep.write(out / "sweep.json", out / "sweep.csv")
    save_sweep_heatmaps(sweep, out)
    stats = trend_stats(sweep)
    (out / "sweep_trends.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    _write_run_json(out, "probe sweep", {"kinds": kinds, "timesteps": timesteps, "preset": dataclasses.asdict(preset)})
    click.echo(json.dumps(stats, indent=2, sort_keys=True))


# -- steering ---------------------------------------------------------------------------


@main.group()
def steer():
    """Decoder-guided latent steering."""


@steer.command("demo")
@click.option("--small/--full", default=True)
@click.option(
    "--construction",
    type=click.Choice(["normal_flip_y", "sobel_edge_boost", "kmeans_recolor"]),
    default="normal_flip_y",
    show_default=True,
)
@click.pass_context
def steer_demo(ctx, small, construction):
    """Steer one trajectory at 10% of T and render the loss trace + previews."""
    from .pipelines import build_shapes_world
    from .report import save_frame_grid, save_trace_plot
    from .tree import Session

    preset = _shapes_preset(ctx, small)
    art = build_shapes_world(preset, ctx.obj["out_dir"])
    session = Session(str(art.directory / "dit"), str(art.directory / "decoder_mb"), ctx.obj["seed"])
    node = session.denoise(session.root_id, preset.T - max(1, round(0.1 * preset.T)), "ode")
    spec = {"construction": {"kind": construction}, "seed": ctx.obj["seed"]}
    if construction == "kmeans_recolor":
        spec["construction"].update({"k": 3, "from_cluster": 0, "to_cluster": 1})
    child, info = session.steer(node.id, spec)
    out = art.directory / f"steer_{construction}"
    out.mkdir(parents=True, exist_ok=True)
    save_trace_plot(info["trace"], out / "trace.png")
    before = session.preview_array(node.id, session.modalities()[0], "ensemble")
    after = session.preview_array(child.id, session.modalities()[0], "ensemble")
    save_frame_grid([before, after], out / "before_after.png", labels=["before", "after"])
    _write_run_json(out, "steer demo", {"construction": construction, "preset": dataclasses.asdict(preset)})
    click.echo(
        f"steering loss {info['initial_loss']:.4f} -> {info['final_loss']:.4f} "
        f"({info['iterations']} iters, converged={info['converged']}); outputs in {out}"
    )


# -- service -------------------------------------------------------------------------------


@main.command("serve")
@click.option("--port", type=int, default=8321, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve_cmd(port, host):
    """Run the generation-tree HTTP service."""
    from .service import serve

    click.echo(f"previewlab service on http://{host}:{port}")
    serve(host, port)


def run() -> None:
    try:
        main(standalone_mode=False)
    except click.exceptions.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.exceptions.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except Exception as exc:  # runtime failure contract: exit 1
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run()
