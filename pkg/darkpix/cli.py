"""
Command-line interface for DarkPix.
"""

import json
import logging
import secrets
import sys
import time
from pathlib import Path
from typing import List, Optional

import click
import numpy as np

from . import __version__
from .calibration import SensorCalibrator, ppcc_coords, ppcc_frame, ppcc_pixel
from .manifest import RunManifest, digest_tree
from .noisemodel import NoiseModelConfig, load_params, save_params
from .quality import compare
from .rawio import RawFrame, load_frame, load_stack, save_frame
from .rectflow import (AdamConfig, infer, load_field, oracle_infer, patchify, prior_draw,
                       sample_search, save_field, train, unpatchify)
from .synthesis import SynthesisConfig, condition_from_noisy, load_pairs, synthesize_directory
from .utils import (Config, NumericalError, ValidationError, format_duration, parse_range,
                    setup_logging)
from .velocity import FieldArchitecture, VelocityField
from .virtual import VirtualSensor

logger = logging.getLogger(__name__)

EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3


def _fail(e: Exception):
    """Report an error on stderr and exit with its code."""
    if isinstance(e, ValidationError):
        code = EXIT_VALIDATION
    elif isinstance(e, NumericalError):
        code = EXIT_NUMERICAL
    else:
        code = EXIT_IO
    click.echo(f"Error: {e}", err=True)
    sys.exit(code)


def _resolve_seed(seed: Optional[int], config: Config) -> int:
    """Flag, then config, then a freshly drawn seed (recorded in the manifest)."""
    if seed is not None:
        return seed
    if config.seed is not None:
        return config.seed
    drawn = secrets.randbits(63)
    logger.info(f"No seed given; drew {drawn}")
    return drawn


def _write_manifest(ctx, config: Config, seed: int, inputs, outputs, out_dir) -> Path:
    manifest = RunManifest(
        command=ctx.info_name,
        config=config.to_dict(),
        seed=seed,
        version=__version__,
        inputs=digest_tree(inputs),
        outputs=digest_tree(outputs),
    )
    return manifest.write(out_dir)


def _flow_arrays(pairs, patch: int, compensate: bool):
    """Stack target and condition patches of every (stem, noisy, clean) pair."""
    targets, conds = [], []
    for _, noisy, clean in pairs:
        ratio = float(noisy.attrs.get('ratio', 1.0))
        targets.append(patchify(clean.normalized(), patch))
        conds.append(patchify(condition_from_noisy(noisy, ratio, compensate), patch))
    return np.concatenate(targets), np.concatenate(conds)


def _stem(path: Path) -> str:
    name = path.name[:-len(".pgm")]
    for suffix in ("_clean", "_noisy", "_restored"):
        if name.endswith(suffix):
            return name[:-len(suffix)]
    return name


@click.group()
@click.option('--config', '-c', type=click.Path(exists=True), help='Configuration file path')
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose logging')
@click.option('--log-file', type=click.Path(), help='Log file path')
@click.option('--threads', type=int, help='Worker threads (results do not depend on it)')
@click.option('--progress', is_flag=True, help='Show progress bars')
@click.pass_context
def cli(ctx, config, verbose, log_file, threads, progress):
    """DarkPix: per-pixel low-light sensor noise calibration, synthesis and flow denoising"""

    # Load configuration
    try:
        config_obj = Config.load(config) if config else Config()
        config_obj = config_obj.merged(threads=threads, log_file=log_file,
                                       progress=progress or None)
    except Exception as e:
        _fail(e)

    if verbose:
        config_obj.log_level = "DEBUG"

    setup_logging(config_obj)

    ctx.obj = config_obj


@cli.command()
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--size', default=64, help='Sensor side length in pixels')
@click.option('--flat-frames', default=200, help='Flat frames')
@click.option('--bias-frames', default=200, help='Bias frames')
@click.option('--dark-frames', default=100, help='Dark frames per exposure')
@click.option('--exposure', '-e', 'exposures', type=float, multiple=True, help='Dark exposure (s), repeatable')
@click.option('--illumination', default=500.0, help='Flat-field photo-electrons per pixel')
@click.option('--row-sigma', default=2.0, help='Row noise sigma (DN)')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def simulate(ctx, out, size, flat_frames, bias_frames, dark_frames, exposures, illumination,
             row_sigma, seed):
    """Capture calibration stacks from a virtual sensor with known parameters."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        out = Path(out)
        sensor = VirtualSensor.random(height=size, width=size, seed=seed, row_sigma=row_sigma,
                                      progress=config.progress)
        written = sensor.write_stacks(out, n_flat=flat_frames, n_bias=bias_frames,
                                      n_dark=dark_frames, dark_exposures=exposures or (1.0, 4.0, 16.0),
                                      illumination_e=illumination)
        truth_path = out / "truth.pxcal"
        save_params(sensor.truth, truth_path)

        _write_manifest(ctx, config, seed, [], [out / name for name in written] + [truth_path], out)
        click.echo(f"✅ Wrote {len(written)} stacks of a {size}x{size} virtual sensor to {out}")

    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--flat', type=click.Path(exists=True, file_okay=False), required=True, help='Flat stack directory')
@click.option('--bias', type=click.Path(exists=True, file_okay=False), required=True, help='Bias stack directory')
@click.option('--dark', type=click.Path(exists=True, file_okay=False), multiple=True, required=True,
              help='Dark stack directory, one per exposure (repeatable)')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--global', 'global_mode', is_flag=True, help='Global (spatial median) calibration')
@click.option('--crop', type=int, help='Center-crop size')
@click.option('--exact-gain', is_flag=True, help='Subtract the bias variance before estimating the gain')
@click.option('--no-destripe', is_flag=True, help='Subtract the row variance instead of destriping')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def calibrate(ctx, flat, bias, dark, out, global_mode, crop, exact_gain, no_destripe, seed):
    """Calibrate per-pixel noise parameters from flat, bias and dark stacks."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        config = config.merged(crop_size=crop, seed=seed,
                               exact_gain=True if exact_gain else None,
                               destripe_read=False if no_destripe else None)
        out = Path(out)

        report = SensorCalibrator(config).calibrate(
            load_stack(flat), load_stack(bias), [load_stack(d) for d in dark], global_mode)

        params_path = out / "params.pxcal"
        summary_path = out / "summary.json"
        save_params(report.params, params_path)
        with open(summary_path, 'w') as f:
            json.dump(report.summary(), f, indent=2, sort_keys=True)
            f.write("\n")

        _write_manifest(ctx, config, seed, [flat, bias, *dark], [params_path, summary_path], out)
        summary = report.summary()
        click.echo(f"Gain median: {summary['gain_median']:.4f} DN/e-")
        click.echo(f"Read sigma median: {summary['read_sigma_median']:.4f} DN")
        click.echo(f"Row sigma: {summary['row_sigma']:.4f} DN")
        click.echo(f"Time law: {summary['time_law']}")
        click.echo(f"✅ Parameters written to {params_path}")

    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--stack', type=click.Path(exists=True, file_okay=False), required=True, help='Stack directory')
@click.option('--pixel', type=(int, int), multiple=True, help='Pixel X Y (repeatable)')
@click.option('--frame', 'frame_index', type=int, help='Also fit all pixels of this frame')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--plot-dir', type=click.Path(file_okay=False), help='Write probability plots here')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def ppcc(ctx, stack, pixel, frame_index, out, plot_dir, seed):
    """Probability-plot correlation of pixel noise against a Gaussian."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        frames = load_stack(stack)
        coords = list(pixel) or ppcc_coords(frames.shape, config.ppcc_pixels)
        reports = [ppcc_pixel(frames, x, y) for x, y in coords]
        if frame_index is not None:
            reports.append(ppcc_frame(frames, frame_index))

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in reports]
        for line in lines:
            click.echo(line)
        report_path = out / "ppcc.jsonl"
        report_path.write_text("\n".join(lines) + "\n")

        outputs = [report_path]
        if plot_dir:
            from .plots import plot_probability_plot
            plot_dir = Path(plot_dir)
            plot_dir.mkdir(parents=True, exist_ok=True)
            for x, y in coords:
                path = plot_dir / f"ppcc_{x}_{y}.png"
                plot_probability_plot([f.signal()[y, x] for f in frames.frames], path,
                                      title=f"Pixel ({x}, {y})")
                outputs.append(path)

        _write_manifest(ctx, config, seed, [stack], outputs, out)

    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--clean', type=click.Path(exists=True, file_okay=False), required=True, help='Clean frame directory')
@click.option('--params', type=click.Path(exists=True, dir_okay=False), required=True, help='PXCAL1 parameter file')
@click.option('--ratio', type=float, help='Fixed darkening ratio')
@click.option('--ratio-range', type=(float, float), help='Uniform ratio range LO HI')
@click.option('--exposure', type=float, default=1.0, help='Fixed exposure (s)')
@click.option('--exposure-range', type=(float, float), help='Uniform exposure range LO HI')
@click.option('--terms', default="P+G+F+H+Q+A", help='Active noise terms, e.g. P+G+noD')
@click.option('--no-compensate', is_flag=True, help='Record that conditions are not ratio-compensated')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def synthesize(ctx, clean, params, ratio, ratio_range, exposure, exposure_range, terms,
               no_compensate, out, seed):
    """Synthesize (noisy, clean) low-light pairs from clean frames."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        ratio_range = parse_range(ratio_range) if ratio_range else (
            None if ratio is not None else config.ratio_range)
        exposure_range = parse_range(exposure_range) or config.exposure_range
        config = config.merged(seed=seed, ratio_range=ratio_range, exposure_range=exposure_range,
                               compensate=False if no_compensate else None)

        sc = SynthesisConfig(
            ratio=ratio if ratio is not None else 1.0,
            ratio_range=ratio_range,
            exposure_s=exposure,
            exposure_range=exposure_range,
            seed=seed,
            cfg=NoiseModelConfig.from_label(terms),
            compensate=config.compensate,
        )
        written = synthesize_directory(clean, load_params(params), sc, out, progress=config.progress)

        _write_manifest(ctx, config, seed, [clean, params], written, out)
        click.echo(f"✅ Wrote {len(written) // 4} pairs to {out} ({sc.cfg.to_label()})")

    except Exception as e:
        _fail(e)


@cli.command('rf-train')
@click.option('--pairs', type=click.Path(exists=True, file_okay=False), required=True, help='Pair directory')
@click.option('--patch', type=int, help='Patch side length')
@click.option('--steps', type=int, help='Optimizer steps')
@click.option('--lr', type=float, help='Learning rate')
@click.option('--batch', type=int, help='Batch size')
@click.option('--out', '-o', type=click.Path(dir_okay=False), required=True, help='Model file (.rfw)')
@click.option('--plot', type=click.Path(dir_okay=False), help='Write the loss curve here')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def rf_train(ctx, pairs, patch, steps, lr, batch, out, plot, seed):
    """Train a velocity field on synthesized pairs."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        config = config.merged(patch=patch, train_steps=steps, learning_rate=lr,
                               batch_size=batch, seed=seed)
        x1, T = _flow_arrays(load_pairs(pairs), config.patch, config.compensate)
        click.echo(f"Training on {x1.shape[0]} patches of {config.patch}x{config.patch}")

        arch = FieldArchitecture(dim=config.patch ** 2, hidden=tuple(config.hidden), embed=config.embed)
        start = time.time()
        result = train(
            VelocityField.initialized(arch, seed),
            x1, T,
            AdamConfig(learning_rate=config.learning_rate, batch_size=config.batch_size,
                       steps=config.train_steps),
            seed=seed,
            progress=config.progress,
        )
        click.echo(f"Training time: {format_duration(time.time() - start)}")

        out = Path(out)
        save_field(result.field, out, extra={'patch': config.patch, 'compensate': config.compensate})
        outputs = [out]
        if plot:
            from .plots import plot_loss_curve
            plot_loss_curve(result.losses, plot)
            outputs.append(Path(plot))

        _write_manifest(ctx, config, seed, [pairs], outputs, out.parent)
        if result.losses:
            click.echo(f"Loss: {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
        click.echo(f"✅ Model saved to {out}")

    except Exception as e:
        _fail(e)


@cli.command('rf-search')
@click.option('--model', type=click.Path(exists=True, dir_okay=False), required=True, help='Model file')
@click.option('--val', type=click.Path(exists=True, file_okay=False), required=True, help='Validation pair directory')
@click.option('--s', 'step', type=float, help='Candidate step')
@click.option('--n', 'count', type=int, help='Number of candidates')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def rf_search(ctx, model, val, step, count, out, seed):
    """Search the second sampling time on a validation split."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        config = config.merged(search_step=step, search_count=count, seed=seed)
        field, header = load_field(model)
        x1, T = _flow_arrays(load_pairs(val), int(header.get('patch', config.patch)),
                             bool(header.get('compensate', config.compensate)))

        result = sample_search(field, x1, T, config.search_step, config.search_count, seed)
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        result_path = out / "search.json"
        with open(result_path, 'w') as f:
            json.dump(result.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        click.echo(json.dumps(result.to_dict(), sort_keys=True))

        _write_manifest(ctx, config, seed, [model, val], [result_path], out)

    except Exception as e:
        _fail(e)


@cli.command('rf-infer')
@click.option('--model', type=click.Path(exists=True, dir_okay=False), required=True, help='Model file')
@click.option('--input', 'input_dir', type=click.Path(exists=True, file_okay=False), required=True,
              help='Directory of *_noisy.pgm frames')
@click.option('--t-best', type=float, help='Frozen second sampling time')
@click.option('--oracle-search', is_flag=True, help='Re-search per image against ground truth')
@click.option('--s', 'step', type=float, help='Candidate step (oracle search)')
@click.option('--n', 'count', type=int, help='Number of candidates (oracle search)')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def rf_infer(ctx, model, input_dir, t_best, oracle_search, step, count, out, seed):
    """Restore noisy frames with two-stage sampling."""

    config = ctx.obj

    try:
        if t_best is None and not oracle_search:
            raise ValidationError("--t-best is required unless --oracle-search is given")
        seed = _resolve_seed(seed, config)
        config = config.merged(search_step=step, search_count=count, seed=seed)
        field, header = load_field(model)
        patch = int(header.get('patch', config.patch))
        compensate = bool(header.get('compensate', config.compensate))

        out = Path(out)
        written: List[Path] = []
        for index, (stem, noisy, clean) in enumerate(load_pairs(input_dir, require_clean=oracle_search)):
            ratio = float(noisy.attrs.get('ratio', 1.0))
            T = patchify(condition_from_noisy(noisy, ratio, compensate), patch)
            x0 = prior_draw(T.shape, seed, index)
            if oracle_search:
                restored, result = oracle_infer(field, x0, T, patchify(clean.normalized(), patch),
                                                config.search_step, config.search_count)
                attrs = {'t_best': result.t_best, 'oracle_assisted': True}
            else:
                restored = infer(field, x0, T, t_best)
                attrs = {'t_best': t_best, 'oracle_assisted': False}

            meta = noisy.meta
            image = unpatchify(restored, noisy.shape, patch)
            dn = np.clip(np.rint(image * meta.dynamic_range + meta.black_level), 0, meta.white_level)
            path = out / f"{stem}_restored.pgm"
            save_frame(RawFrame(data=dn.astype(np.uint16), meta=meta, attrs=attrs), path)
            written.extend([path, Path(str(path) + ".json")])

        _write_manifest(ctx, config, seed, [model, input_dir], written, out)
        label = " (oracle-assisted)" if oracle_search else ""
        click.echo(f"✅ Restored {len(written) // 2} frames to {out}{label}")

    except Exception as e:
        _fail(e)


@cli.command()
@click.option('--ref', type=click.Path(exists=True, file_okay=False), required=True, help='Reference frame directory')
@click.option('--test', 'test_dir', type=click.Path(exists=True, file_okay=False), required=True,
              help='Test frame directory')
@click.option('--out', '-o', type=click.Path(file_okay=False), required=True, help='Output directory')
@click.option('--seed', type=int, help='Random seed')
@click.pass_context
def metrics(ctx, ref, test_dir, out, seed):
    """PSNR/SSIM of test frames against references with matching stems."""

    config = ctx.obj

    try:
        seed = _resolve_seed(seed, config)
        refs = {_stem(p): p for p in sorted(Path(ref).glob("*.pgm")) if not p.name.endswith("_noisy.pgm")}
        tests = {_stem(p): p for p in sorted(Path(test_dir).glob("*.pgm"))}
        stems = sorted(set(refs) & set(tests))
        if not stems:
            raise ValidationError(f"no frames with matching stems in {ref} and {test_dir}")

        lines = []
        for stem in stems:
            a, b = load_frame(refs[stem]), load_frame(tests[stem])
            report = compare(a.signal(), b.signal(), peak=a.meta.dynamic_range)
            lines.append(json.dumps({'stem': stem, **report.to_dict()}, sort_keys=True))
            click.echo(lines[-1])

        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        report_path = out / "metrics.jsonl"
        report_path.write_text("\n".join(lines) + "\n")
        _write_manifest(ctx, config, seed, [ref, test_dir], [report_path], out)

    except Exception as e:
        _fail(e)


def main():
    """Main entry point."""
    cli()


if __name__ == '__main__':
    main()
