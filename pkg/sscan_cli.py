import json
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click
import numpy as np
from PIL import Image, ImageDraw
from dotenv import load_dotenv
from loguru import logger

import complexity
import gradcheck
from errors import (
    ConfigValidationError,
    ContractError,
    GradientCheckError,
    MissingPairError,
    MissingWeightError,
    ShapeError,
    UnsupportedFormatError,
    WeightFormatError,
)
from file_io import (
    image_to_tensor,
    load_patch_pairs,
    load_png,
    load_run_config,
    load_weights,
    run_config_schema,
    save_png,
    save_weights,
    tensor_to_image,
)
from metrics import psnr, ssim
from models import AttentionMode, CostGridPoint, EvalRecord, EvalSummary, ImageU8, ModelConfig, PatchPair, RegionGrid, WeightStore
from network import count_params, first_fgca_routing, forward, validate_weights
from optim import synthetic_patches, train_toy, write_loss_csv
from tensor import Tensor, no_grad
from windowing import region_grid

load_dotenv()

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {message}"
DEFAULT_GRID = "32x32,64x64,128x128,256x256,512x512"

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_GRADCHECK = 4

QUERY_COLOR = (255, 0, 0)
KEY_COLOR = (255, 255, 255)


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    logger.remove()
    logger.add(sink=lambda msg: print(msg, end=""), format=LOG_FORMAT, level=level.upper())
    if log_file:
        logger.add(log_file, format=LOG_FORMAT, level=level.upper(), rotation="10 MB")


class SSCANGroup(click.Group):
    """Click group that turns the toolkit's exceptions into the documented exit codes."""

    def main(self, *args, **kwargs):
        kwargs["standalone_mode"] = False
        try:
            rv = super().main(*args, **kwargs)
        except click.exceptions.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except click.ClickException as e:
            e.show()
            sys.exit(EXIT_USAGE)
        except GradientCheckError as e:
            logger.error(f"gradient check failed: {e}")
            sys.exit(EXIT_GRADCHECK)
        except (WeightFormatError, UnsupportedFormatError, MissingPairError, OSError) as e:
            logger.error(f"I/O error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_IO)
        except (ConfigValidationError, ShapeError, ContractError, MissingWeightError) as e:
            logger.error(f"validation error: {e}")
            click.echo(f"Error: {e}", err=True)
            sys.exit(EXIT_VALIDATION)
        sys.exit(rv if isinstance(rv, int) else 0)


@click.group(cls=SSCANGroup)
@click.option("--log-level", envvar="SSCAN_LOG_LEVEL", default="INFO", show_default=True, help="Log level")
@click.option("--log-file", envvar="SSCAN_LOG_FILE", default=None, help="Also log to this file (rotated at 10 MB)")
def cli(log_level: str, log_file: Optional[str]):
    """Super-resolution with fine-grained context-aware attention: inference, cost models and checks."""
    configure_logging(log_level, log_file)


# ---------------------------------------------------------------- helpers


def load_config(config_path: Optional[str], topk: Optional[int] = None) -> ModelConfig:
    cfg = load_run_config(config_path)[0] if config_path else ModelConfig()
    if topk is not None:
        if topk < 1:
            raise click.BadParameter(f"must be >= 1, got {topk}", param_hint="--topk")
        cfg = cfg.model_copy(update={"topk_infer": topk})
    return cfg


def load_model(weights_path: str, cfg: ModelConfig) -> WeightStore:
    weights = load_weights(weights_path)
    validate_weights(weights, cfg)
    return weights


def model_input(img: ImageU8, cfg: ModelConfig) -> Tensor:
    """[C_in, H, W] tensor; grayscale images are replicated to three channels for RGB models."""
    data = img.data
    if img.channels != cfg.in_channels:
        if img.channels == 1 and cfg.in_channels == 3:
            logger.warning("replicating a grayscale input to three channels")
            data = np.repeat(data, 3, axis=2)
        else:
            raise ShapeError(f"image has {img.channels} channels, the model expects {cfg.in_channels}", data.shape)
    return image_to_tensor(ImageU8(data=data))


def super_resolve(img: ImageU8, cfg: ModelConfig, weights: WeightStore) -> ImageU8:
    with no_grad():
        out = forward(model_input(img, cfg), cfg, weights, AttentionMode.INFER)
    return tensor_to_image(out)


def parse_window(value: str) -> Tuple[int, int]:
    try:
        row, col = (int(v) for v in value.split(","))
    except ValueError:
        raise click.BadParameter(f"expected ROW,COL, got {value!r}", param_hint="--window") from None
    return row, col


def parse_topk_list(value: str) -> List[int]:
    try:
        values = [int(v) for v in value.split(",")]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}", param_hint="--topk") from None
    if not values or min(values) < 1:
        raise click.BadParameter("top-k values must be >= 1", param_hint="--topk")
    return values


def render_routing(
    img: ImageU8, grid: RegionGrid, query: int, routed: Sequence[int], scale: int = 1
) -> Tuple[ImageU8, List[Tuple[Tuple[int, int, int, int], Tuple[int, int, int]]]]:
    """Outline routed key windows in white and the query window in red, drawn last."""
    data = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    canvas = Image.fromarray(np.ascontiguousarray(data))
    draw = ImageDraw.Draw(canvas)
    boxes = [(grid.region_box(int(r)), KEY_COLOR) for r in routed]
    boxes.append((grid.region_box(query), QUERY_COLOR))
    for (top, left, bottom, right), color in boxes:
        draw.rectangle(
            [left * scale, top * scale, (right + 1) * scale - 1, (bottom + 1) * scale - 1], outline=color, width=1
        )
    return ImageU8(data=np.asarray(canvas, dtype=np.uint8)), boxes


def evaluate_pairs(
    pairs: Sequence[PatchPair], cfg: ModelConfig, weights: Optional[WeightStore], crop_border: int
) -> EvalSummary:
    summary = EvalSummary()
    for pair in pairs:
        candidate = super_resolve(pair.lr, cfg, weights) if weights is not None else pair.lr
        if candidate.channels == 1 and pair.hr.channels == 3:
            candidate = ImageU8(data=np.repeat(candidate.data, 3, axis=2))
        record = EvalRecord(
            stem=pair.stem,
            psnr=psnr(candidate, pair.hr, crop_border, on_y=True),
            ssim=ssim(candidate, pair.hr, crop_border, on_y=True),
        )
        logger.debug(f"{pair.stem}: PSNR {record.psnr:.3f} dB, SSIM {record.ssim:.4f}")
        summary.records.append(record)
    return summary


# ---------------------------------------------------------------- commands


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False), help="Low-resolution PNG")
@click.option("--weights", "weights_path", required=True, type=click.Path(dir_okay=False), help="SSCW weight file")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults if omitted)")
@click.option("--output", "output_path", required=True, type=click.Path(dir_okay=False), help="Upscaled PNG to write")
@click.option("--topk", type=int, default=None, help="Inference top-k override (default: topk_infer of the config)")
def sr(input_path: str, weights_path: str, config_path: Optional[str], output_path: str, topk: Optional[int]):
    """Super-resolve one image."""
    cfg = load_config(config_path, topk)
    weights = load_model(weights_path, cfg)
    img = load_png(input_path)
    out = super_resolve(img, cfg, weights)
    save_png(out, output_path)
    logger.info(f"wrote {output_path}")
    k_used = min(cfg.topk_infer, region_grid(img.height, img.width, cfg.window_size).n_regions)
    click.echo(f"output: {out.width}x{out.height} (x{cfg.scale}), inference top-k: {k_used}")


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults if omitted)")
@click.option("--grid", "grid_spec", default=DEFAULT_GRID, show_default=True, help="Comma-separated HxW sizes")
@click.option("--region-side", type=int, default=8, show_default=True, help="S of the variable-window baseline (S^2 regions)")
@click.option("--bytes-per-scalar", type=int, default=4, show_default=True)
@click.option("--tiled", is_flag=True, help="Model block-tiled score storage")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="CSV file to write")
def analyze(config_path: Optional[str], grid_spec: str, region_side: int, bytes_per_scalar: int, tiled: bool, out_path: str):
    """FLOPs and peak-memory sweep of fixed-window vs variable-window routing."""
    cfg = load_config(config_path)
    base = CostGridPoint(
        height=1,
        width=1,
        channels=cfg.embed_dim,
        window_size=cfg.window_size,
        region_side=region_side,
        topk=cfg.topk_infer,
        bytes_per_scalar=bytes_per_scalar,
    )
    try:
        grid = complexity.parse_grid(grid_spec, base)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint="--grid") from None
    rows = complexity.sweep_costs(grid, tiled=tiled)
    complexity.write_cost_csv(rows, Path(out_path))
    crossover = complexity.find_crossover(rows)
    click.echo(f"wrote {len(rows)} rows to {out_path}")
    if crossover is None:
        click.echo("crossover: none within the swept sizes")
    else:
        click.echo(f"crossover: fixed-window routing is cheaper from H*W = {crossover}")


@cli.command("viz-attn")
@click.option("--input", "input_path", required=True, type=click.Path(dir_okay=False), help="Low-resolution PNG")
@click.option("--weights", "weights_path", required=True, type=click.Path(dir_okay=False), help="SSCW weight file")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults if omitted)")
@click.option("--window", "window_spec", required=True, help="Query window as ROW,COL in window units")
@click.option("--topk", type=int, default=None, help="Inference top-k override")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="Overlay PNG to write")
def viz_attn(input_path: str, weights_path: str, config_path: Optional[str], window_spec: str, topk: Optional[int], out_path: str):
    """Draw the key windows the first FGCA layer routes a query window to."""
    cfg = load_config(config_path, topk)
    img = load_png(input_path)
    grid = region_grid(img.height, img.width, cfg.window_size)
    row, col = parse_window(window_spec)
    if not (0 <= row < grid.h_windows and 0 <= col < grid.w_windows):
        raise click.BadParameter(
            f"window ({row},{col}) outside the {grid.h_windows}x{grid.w_windows} window grid", param_hint="--window"
        )
    weights = load_model(weights_path, cfg)
    routing, grid = first_fgca_routing(model_input(img, cfg), cfg, weights, AttentionMode.INFER)
    query = row * grid.w_windows + col
    routed = routing.topk_indices[query].tolist()
    overlay, boxes = render_routing(img, grid, query, routed)
    save_png(overlay, out_path)
    click.echo(f"query window {query} routed to {routed} (k={routing.k_used}); drew {len(boxes)} boxes")


@cli.command("gradcheck")
@click.option("--seed", type=int, envvar="SSCAN_SEED", default=0, show_default=True)
@click.option(
    "--suite", "suites", multiple=True, type=click.Choice(list(gradcheck.SUITES)), help="Run only these suites"
)
def gradcheck_cmd(seed: int, suites: Tuple[str, ...]):
    """Finite-difference gradient verification; exits 4 if any suite fails."""
    names = list(suites) or list(gradcheck.SUITES)
    failed = []
    for name in names:
        result = gradcheck.SUITES[name](seed=seed)
        status = "PASS" if result.passed else "FAIL"
        note = "" if result.selection_stable else " (top-k selection unstable)"
        click.echo(f"{name:<18} max rel err {result.max_rel_error:.3e}  tol {result.tolerance:g}  {status}{note}")
        if not result.passed:
            failed.append(name)
    if failed:
        raise GradientCheckError(f"suites failed: {', '.join(failed)}")
    click.echo("all gradient checks passed")


@cli.command("train-toy")
@click.option("--dir", "patch_dir", type=click.Path(file_okay=False), help="Directory of <stem>_lr.png/<stem>_hr.png pairs")
@click.option("--synthetic", type=int, default=None, help="Train on N generated patches instead of --dir")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults to the micro config)")
@click.option("--iters", type=int, default=500, show_default=True)
@click.option("--lr", "learning_rate", type=float, default=2e-4, show_default=True)
@click.option("--batch-size", type=int, default=1, show_default=True)
@click.option("--augment", is_flag=True, help="Random flips and rotations")
@click.option("--seed", type=int, envvar="SSCAN_SEED", default=0, show_default=True)
@click.option("--weights-out", type=click.Path(dir_okay=False), help="Write trained weights here")
@click.option("--loss-csv", type=click.Path(dir_okay=False), help="Write the loss curve here")
def train_toy_cmd(
    patch_dir: Optional[str],
    synthetic: Optional[int],
    config_path: Optional[str],
    iters: int,
    learning_rate: float,
    batch_size: int,
    augment: bool,
    seed: int,
    weights_out: Optional[str],
    loss_csv: Optional[str],
):
    """Train a small network on a patch set with L1 + Adam."""
    if (patch_dir is None) == (synthetic is None):
        raise click.UsageError("give exactly one of --dir or --synthetic")
    cfg = load_run_config(config_path)[0] if config_path else ModelConfig.micro()
    if patch_dir is not None:
        patches = load_patch_pairs(patch_dir)
    else:
        patches = synthetic_patches(synthetic, scale=cfg.scale, seed=seed)
    logger.info(f"training {count_params(cfg):,} parameters on {len(patches)} patches for {iters} iterations")
    weights, curve = train_toy(cfg, patches, iters, learning_rate, seed, batch_size=batch_size, augment=augment)
    if curve:
        click.echo(f"loss: {curve[0]:.5f} -> {curve[-1]:.5f} over {len(curve)} iterations")
    if weights_out:
        save_weights(weights, weights_out)
    if loss_csv:
        write_loss_csv(curve, Path(loss_csv))


@cli.command("eval")
@click.option("--dir", "patch_dir", required=True, type=click.Path(file_okay=False), help="Directory of LR/HR pairs")
@click.option("--weights", "weights_path", type=click.Path(dir_okay=False), help="Super-resolve LR images with these weights first")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults if omitted)")
@click.option("--topk", type=int, default=None, help="Inference top-k override")
@click.option("--crop-border", type=int, default=None, help="Border to ignore (default: the config's scale)")
def eval_cmd(patch_dir: str, weights_path: Optional[str], config_path: Optional[str], topk: Optional[int], crop_border: Optional[int]):
    """PSNR/SSIM on the Y channel over a directory of pairs."""
    cfg = load_config(config_path, topk)
    pairs = load_patch_pairs(patch_dir)
    if not pairs:
        raise ContractError(f"no <stem>_lr.png/<stem>_hr.png pairs in {patch_dir}")
    weights = load_model(weights_path, cfg) if weights_path else None
    border = cfg.scale if crop_border is None else crop_border
    summary = evaluate_pairs(pairs, cfg, weights, border)
    for record in summary.records:
        click.echo(f"{record.stem}: PSNR {record.psnr:.3f} dB  SSIM {record.ssim:.4f}")
    click.echo(f"mean over {len(summary.records)} pairs: PSNR {summary.mean_psnr:.3f} dB  SSIM {summary.mean_ssim:.4f}")


@cli.command("sweep-topk")
@click.option("--dir", "patch_dir", required=True, type=click.Path(file_okay=False), help="Directory of LR/HR pairs")
@click.option("--weights", "weights_path", required=True, type=click.Path(dir_okay=False), help="SSCW weight file")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON run config (defaults if omitted)")
@click.option("--topk", "topk_spec", default="16,32,64", show_default=True, help="Comma-separated inference top-k values")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Optional JSON report")
def sweep_topk(patch_dir: str, weights_path: str, config_path: Optional[str], topk_spec: str, out_path: Optional[str]):
    """Mean PSNR/SSIM of one model across inference top-k values."""
    values = parse_topk_list(topk_spec)
    base = load_config(config_path)
    weights = load_model(weights_path, base)
    pairs = load_patch_pairs(patch_dir)
    if not pairs:
        raise ContractError(f"no <stem>_lr.png/<stem>_hr.png pairs in {patch_dir}")
    report = []
    for k in values:
        cfg = base.model_copy(update={"topk_infer": k})
        summary = evaluate_pairs(pairs, cfg, weights, cfg.scale)
        click.echo(f"top-k {k:>4}: PSNR {summary.mean_psnr:.3f} dB  SSIM {summary.mean_ssim:.4f}")
        report.append({"topk": k, "psnr": summary.mean_psnr, "ssim": summary.mean_ssim})
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2))


@cli.command("make-patches")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Directory to create")
@click.option("--count", type=int, default=10, show_default=True)
@click.option("--lr-size", type=int, default=32, show_default=True)
@click.option("--scale", type=click.IntRange(2, 4), default=2, show_default=True)
@click.option("--seed", type=int, envvar="SSCAN_SEED", default=0, show_default=True)
def make_patches(out_dir: str, count: int, lr_size: int, scale: int, seed: int):
    """Write synthetic LR/HR training pairs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for pair in synthetic_patches(count, lr_size, scale, seed):
        save_png(pair.lr, out / f"{pair.stem}_lr.png")
        save_png(pair.hr, out / f"{pair.stem}_hr.png")
    click.echo(f"wrote {count} pairs to {out}")


@cli.command()
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False), help="JSON Schema file to write")
def schema(out_path: str):
    """Write the JSON Schema of run-config files."""
    Path(out_path).write_text(json.dumps(run_config_schema(), indent=2))
    logger.info(f"wrote run-config schema to {out_path}")


if __name__ == "__main__":
    cli()
