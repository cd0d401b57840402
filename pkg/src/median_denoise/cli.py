"""Command-line surface: one subcommand per experiment.

Every stochastic subcommand takes ``--seed`` and is fully deterministic
given its flags; repeated runs produce byte-identical output files.  The
default output directory is the current one, overridable with the
MEDIAN_DENOISE_OUT environment variable.
"""

from __future__ import annotations

import csv
import math
import os
import sys

import click
import numpy as np

from . import evaluation, gradcheck, imgio, median_ops, network, training
from .metrics import psnr
from .noise import NoiseSpec, apply_salt_pepper

DEFAULT_LEVELS = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"


def _out_dir(value):
    return value or os.environ.get("MEDIAN_DENOISE_OUT", ".")


def _echo_config(**kwargs):
    click.echo("resolved config: " +
               " ".join(f"{k}={v}" for k, v in sorted(kwargs.items())))


def _parse_levels(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def load_config_file(path) -> dict:
    """Flat key=value config file; blank lines and # comments are ignored."""
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.ClickException(
                    f"{path}: malformed config line {line!r}")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


@click.group()
def main():
    """Salt-and-pepper denoising: median layers, classic filters, metrics."""


@main.command("add-noise")
@click.argument("input_path", type=click.Path(exists=True))
@click.argument("output_path", type=click.Path())
@click.option("--level", type=float, required=True, help="noise level in (0,1)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--channel-mode", type=click.Choice(["per_channel", "per_pixel"]),
              default="per_channel", show_default=True)
def add_noise_cmd(input_path, output_path, level, seed, channel_mode):
    """Contaminate an image with seeded salt-and-pepper noise."""
    _echo_config(input=input_path, output=output_path, level=level, seed=seed,
                 channel_mode=channel_mode)
    buf = imgio.read_image(input_path)
    spec = NoiseSpec(level=level, seed=seed, channel_mode=channel_mode,
                     salt=255.0, pepper=0.0)
    noisy = apply_salt_pepper(buf.to_float(), spec)
    if noisy.ndim == 2:
        noisy = noisy[..., None]
    imgio.write_image(imgio.ImageBuffer(noisy.astype(np.uint8)), output_path)


@main.command("filter")
@click.argument("noisy_path", type=click.Path(exists=True))
@click.option("--median", "kernel", type=int, default=5, show_default=True,
              help="median window size (odd)")
@click.option("--repeat", type=int, default=25, show_default=True)
@click.option("--ref", "ref_path", type=click.Path(exists=True), required=True,
              help="clean reference for the PSNR trajectory")
@click.option("--out-dir", type=click.Path(), default=None)
def filter_cmd(noisy_path, kernel, repeat, ref_path, out_dir):
    """Repeated median filtering with a PSNR trajectory CSV."""
    out_dir = _out_dir(out_dir)
    _echo_config(noisy=noisy_path, median=kernel, repeat=repeat, ref=ref_path,
                 out_dir=out_dir)
    os.makedirs(out_dir, exist_ok=True)
    noisy = imgio.read_image(noisy_path)
    ref = imgio.read_image(ref_path)
    images, traj = median_ops.repeated_median(
        noisy.to_float(), kernel, repeat, ref.to_float())
    for i, img in enumerate(images[1:], start=1):
        arr = np.floor(np.clip(img, 0, 255) + 0.5).astype(np.uint8)
        if arr.ndim == 2:
            arr = arr[..., None]
        imgio.write_image(imgio.ImageBuffer(arr),
                          os.path.join(out_dir, f"filtered_{i:03d}.png"))
    with open(os.path.join(out_dir, "psnr_trajectory.csv"), "w",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "psnr"])
        for i, value in enumerate(traj):
            writer.writerow([i, f"{value:.6f}"])
    click.echo(f"wrote {repeat} images and psnr_trajectory.csv to {out_dir}")


@main.command("demo-1d")
@click.option("--schedule", default="median,gaussian,median,gaussian",
              show_default=True, help="comma-separated median/gaussian steps")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--level", type=float, default=0.5, show_default=True)
@click.option("--window", type=int, default=5, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="CSV output path [default: demo1d.csv in the output dir]")
def demo_1d_cmd(schedule, seed, level, window, out_path):
    """1D sine denoising: 200 samples of sin(2*pi*t) hit by +/-1 extremes."""
    out_path = out_path or os.path.join(_out_dir(None), "demo1d.csv")
    _echo_config(schedule=schedule, seed=seed, level=level, window=window,
                 out=out_path)
    kinds = [s.strip() for s in schedule.split(",") if s.strip()]
    t = np.arange(200) / 200.0
    clean = np.sin(2 * np.pi * t)
    spec = NoiseSpec(level=level, seed=seed, salt=1.0, pepper=-1.0)
    noisy = apply_salt_pepper(clean[None, :], spec)[0]
    _, mses = median_ops.alternate_filters_1d(noisy, kinds, clean,
                                              window=window)
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "filter_kind", "mse"])
        for i, (kind, m) in enumerate(zip(kinds, mses), start=1):
            writer.writerow([i, kind, f"{m:.10f}"])
    click.echo(f"wrote {out_path}")


def _load_clean_images(data, resize):
    if os.path.isdir(data):
        paths = sorted(
            os.path.join(data, n) for n in os.listdir(data)
            if os.path.splitext(n)[1].lower() in (".png", ".pgm", ".ppm"))
        manifest = imgio.DatasetManifest(name=os.path.basename(data),
                                         paths=paths, resize=resize)
    else:
        manifest = imgio.DatasetManifest.from_file(data)
        if resize is not None:
            manifest.resize = resize
    images = []
    for _, buf in manifest.load():
        images.append(buf.to_tensor()[0].transpose(1, 2, 0))
    if not images:
        raise click.ClickException(f"no images found in {data}")
    return images, manifest


def _train_options(fn):
    opts = [
        click.option("--blocks", type=int, default=16, show_default=True),
        click.option("--features", type=int, default=64, show_default=True),
        click.option("--median-kernel", type=int, default=3, show_default=True),
        click.option("--no-medians", is_flag=True,
                     help="drop all median layers (ablation arm)"),
        click.option("--block-kind", type=click.Choice(["residual", "conv_relu"]),
                     default="residual", show_default=True),
        click.option("--steps", type=int, default=5000, show_default=True),
        click.option("--batch-size", type=int, default=16, show_default=True),
        click.option("--lr", type=float, default=1e-3, show_default=True),
        click.option("--levels", default=DEFAULT_LEVELS, show_default=True),
        click.option("--patch-size", type=int, default=70, show_default=True),
        click.option("--resize", default="200x200", show_default=True,
                     help="resize images to WxH before patching ('none' to skip)"),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="flat key=value config file; CLI flags win"),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _resolve_train(kwargs):
    """Apply config-file defaults under explicit CLI flags."""
    path = kwargs.pop("config_path", None)
    if path:
        ctx = click.get_current_context()
        file_values = load_config_file(path)
        for key, value in file_values.items():
            param = key.replace("-", "_")
            if param in kwargs and \
                    ctx.get_parameter_source(param).name == "DEFAULT":
                current = kwargs[param]
                if isinstance(current, bool):
                    kwargs[param] = value.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    kwargs[param] = int(value)
                elif isinstance(current, float):
                    kwargs[param] = float(value)
                else:
                    kwargs[param] = value
    return kwargs


def _parse_resize(text):
    if text is None or text.lower() == "none":
        return None
    w, h = text.lower().split("x")
    return int(w), int(h)


def _build_train_setup(data, kwargs, median_half):
    images, _ = _load_clean_images(data, _parse_resize(kwargs["resize"]))
    channels = 3 if images[0].shape[-1] == 3 else 1
    net_cfg = network.NetworkConfig(
        blocks=kwargs["blocks"], features=kwargs["features"],
        median_kernel=kwargs["median_kernel"], median_half=median_half,
        block_kind=kwargs["block_kind"], in_channels=channels,
        seed=kwargs["seed"])
    train_cfg = training.TrainConfig(
        lr=kwargs["lr"], batch_size=kwargs["batch_size"],
        total_steps=kwargs["steps"], seed=kwargs["seed"],
        noise_levels=_parse_levels(kwargs["levels"]),
        ckpt_interval=max(1, kwargs["steps"] // 5),
        val_interval=max(1, kwargs["steps"] // 20))
    patchset = training.PatchSet.from_images(images, kwargs["patch_size"])
    val_pairs = training.make_validation(patchset, count=8, level=0.5,
                                         seed=kwargs["seed"])
    return net_cfg, train_cfg, patchset, val_pairs


@main.command("train")
@click.argument("data", type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(), default=None)
@click.option("--resume", is_flag=True)
@_train_options
def train_cmd(data, out_dir, resume, **kwargs):
    """Train the denoising network on a directory or manifest of images."""
    kwargs = _resolve_train(kwargs)
    out_dir = _out_dir(out_dir)
    _echo_config(data=data, out_dir=out_dir, resume=resume, **kwargs)
    net_cfg, train_cfg, patchset, val_pairs = _build_train_setup(
        data, kwargs, median_half=not kwargs["no_medians"])
    model = network.build_network(net_cfg)
    _, ckpt = training.train_loop(model, patchset, train_cfg, out_dir,
                                  val_pairs=val_pairs, resume=resume)
    click.echo(f"final checkpoint: {ckpt}")


@main.command("denoise")
@click.argument("input_path", type=click.Path(exists=True))
@click.argument("output_path", type=click.Path())
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
def denoise_cmd(input_path, output_path, checkpoint):
    """Denoise one image with a trained checkpoint."""
    _echo_config(input=input_path, output=output_path, checkpoint=checkpoint)
    model, _, _ = network.load_checkpoint(checkpoint)
    buf = imgio.read_image(input_path)
    if buf.channels != model.config.in_channels:
        raise click.ClickException(
            f"image has {buf.channels} channels but the checkpoint expects "
            f"{model.config.in_channels}")
    out = model.predict(buf.to_tensor(), mode="eval")
    imgio.write_image(imgio.ImageBuffer.from_tensor(out), output_path)


@main.command("evaluate")
@click.argument("manifest", type=click.Path(exists=True))
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--levels", default="0.3,0.5,0.7", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="report CSV path [default: report.csv in the output dir]")
def evaluate_cmd(manifest, checkpoint, levels, seed, out_path):
    """Per-noise-level PSNR/MSE report over a dataset manifest."""
    out_path = out_path or os.path.join(_out_dir(None), "report.csv")
    _echo_config(manifest=manifest, checkpoint=checkpoint, levels=levels,
                 seed=seed, out=out_path)
    model, meta, _ = network.load_checkpoint(checkpoint)
    mani = imgio.DatasetManifest.from_file(manifest)
    images = list(mani.load())
    report = evaluation.evaluate_model(
        model, images, _parse_levels(levels), noise_seed=seed,
        dataset=mani.name, model_id=f"{checkpoint}@step{meta.get('step', 0)}")
    report.to_csv(out_path)
    click.echo(report.to_text())


@main.command("ablation")
@click.argument("data", type=click.Path(exists=True))
@click.option("--out-dir", type=click.Path(), default=None)
@click.option("--val-level", type=float, default=0.5, show_default=True)
@_train_options
def ablation_cmd(data, out_dir, val_level, **kwargs):
    """Paired with/without-median training runs plus a delta report."""
    kwargs = _resolve_train(kwargs)
    out_dir = _out_dir(out_dir)
    _echo_config(data=data, out_dir=out_dir, val_level=val_level, **kwargs)
    net_cfg, train_cfg, patchset, _ = _build_train_setup(
        data, kwargs, median_half=True)
    val_pairs = training.make_validation(patchset, count=16, level=val_level,
                                         seed=kwargs["seed"])
    result = evaluation.ablation_compare(net_cfg, train_cfg, patchset,
                                         val_pairs, out_dir)
    click.echo(f"with medians:    {result.with_psnr:.3f} db "
               f"(final loss {result.with_final_loss:.6f})")
    click.echo(f"without medians: {result.without_psnr:.3f} db "
               f"(final loss {result.without_final_loss:.6f})")
    click.echo(f"delta: {result.delta:+.3f} db")


@main.command("grad-check")
@click.option("--blocks", type=int, default=2, show_default=True)
@click.option("--features", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=None,
              help="input/init seed [default: first tie-stable seed]")
@click.option("--sample", type=int, default=64, show_default=True,
              help="coordinates checked per tensor (0 = all)")
@click.option("--threshold", type=float, default=1e-5, show_default=True)
def grad_check_cmd(blocks, features, seed, sample, threshold):
    """Compare tape gradients against central finite differences."""
    if seed is None:
        seed = gradcheck.find_stable_seed(blocks=blocks, features=features)
    _echo_config(blocks=blocks, features=features, seed=seed, sample=sample,
                 threshold=threshold)
    result = gradcheck.run_gradcheck(blocks=blocks, features=features,
                                     seed=seed,
                                     sample=None if sample == 0 else sample)
    click.echo(f"max relative gradient error: {result.max_rel_error:.3e} "
               f"over {result.checked} coordinates "
               f"(median gap {result.median_gap:.2e}, "
               f"relu gap {result.relu_gap:.2e})")
    if not math.isfinite(result.max_rel_error) or \
            result.max_rel_error > threshold:
        click.echo(f"FAIL: error above threshold {threshold:g}", err=True)
        sys.exit(1)
    click.echo("OK")


if __name__ == "__main__":
    main()
