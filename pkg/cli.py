#!/usr/bin/env python3
"""
CLI interface for rawtobit
Data preparation, training, bitstream encode/decode, RD evaluation,
plots and KD ablations from the command line
"""

import functools
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import click
import numpy as np
import torch
from dotenv import load_dotenv

from bitcodec import deserialize, serialize
from data_pipeline import (
    DatasetSplit,
    RawImage,
    SrgbImage,
    list_pair_ids,
    load_raw,
    load_subset,
    make_split,
    raw_preview,
    read_srgb_png,
    save_pair,
    synthesize_pair,
    write_srgb_png,
)
from distillation import AblationVariant
from errors import InvalidSpec, ModelMismatch, RawToBitError
from evaluation import (
    bpp,
    error_map,
    evaluate_system,
    plot_attention_curves,
    plot_loss_curves,
    plot_rd_curves,
    psnr,
    rd_sweep,
    read_rd_csv,
)
from networks import LearnedCodec, ModelConfig, SystemName, build_model, count_parameters, load_checkpoint
from training import resolve_train_config, train, train_schedule_presets

load_dotenv()

logger = logging.getLogger(__name__)

SPLIT_FILE = "split.txt"


def handle_errors(func):
    """Turn library errors into a ❌ line and exit status 1"""
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (RawToBitError, FileNotFoundError, OSError) as e:
            click.echo(f"❌ {e}", err=True)
            raise SystemExit(1)
    return wrapper


def _read_config(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"invalid JSON in {path}: {e}")
    if not isinstance(data, dict):
        raise InvalidSpec(f"{path} must hold a JSON object")
    data.pop("_comment", None)
    return data


def _training_pairs(ctx, split_path: Optional[str], subset: str) -> List[Tuple[RawImage, SrgbImage]]:
    data_dir = Path(ctx.obj['data_dir'])
    split_path = Path(split_path) if split_path else data_dir / SPLIT_FILE
    split = DatasetSplit.load(split_path) if split_path.exists() else None
    if split is None:
        logger.warning(f"No split file at {split_path}; using every pair in {data_dir}")
    pairs = load_subset(data_dir, split, subset)
    if not pairs:
        raise InvalidSpec(f"no image pairs found in {data_dir} ({subset})")
    return pairs


def _load_codec(path: str, device: str) -> Tuple[LearnedCodec, ModelConfig]:
    model, config, _ = load_checkpoint(path, device)
    if not isinstance(model, LearnedCodec):
        raise ModelMismatch(f"{path} holds a {config.system.value} model, which has no bitstream")
    return model, config


def _run_dir(ctx, system: SystemName, lmbda: Optional[float], stage: str, suffix: str = "") -> Path:
    name = system.value
    if lmbda is not None:
        name += f"_lambda{lmbda:g}"
    if system is SystemName.CASCADED:
        name += f"_{stage}"
    return Path(ctx.obj['out_dir']) / f"{name}{suffix}"


def _warn_scale(scale: float) -> None:
    if scale >= 1.0:
        click.echo("⚠️  Running the full iteration budget (--scale 1.0); this takes days on one GPU. "
                   "Use --scale 0.001 for a desk-scale run.")


@click.group()
@click.option('--data-dir', envvar='RAWTOBIT_DATA_DIR', default='data', show_default=True,
              help='Dataset root holding <id>.raw16/.meta.json/.srgb.png pairs')
@click.option('--out-dir', default='runs', show_default=True, help='Where checkpoints, logs and plots go')
@click.option('--seed', default=0, show_default=True, help='Seed for data, splits and initialization')
@click.option('--scale', default=1.0, show_default=True, help='Multiplier on every preset iteration budget')
@click.option('--log-level', envvar='RAWTOBIT_LOG_LEVEL', default='INFO', show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
@click.option('--device', envvar='RAWTOBIT_DEVICE', default='cpu', show_default=True, help='cpu or cuda')
@click.pass_context
def cli(ctx, data_dir, out_dir, seed, scale, log_level, device):
    """rawtobit - learned RAW-to-bitstream compression from the command line"""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    ctx.ensure_object(dict)
    ctx.obj.update(data_dir=data_dir, out_dir=out_dir, seed=seed, scale=scale, device=device)


@cli.command('prepare-data')
@click.option('--count', '-n', default=16, show_default=True, help='Number of synthetic pairs')
@click.option('--height', default=256, show_default=True, help='Mosaic height')
@click.option('--width', default=256, show_default=True, help='Mosaic width')
@click.option('--bit-depth', type=click.Choice(['8', '16']), default='8', show_default=True)
@click.option('--prefix', default='synth', show_default=True)
@click.pass_context
@handle_errors
def prepare_data(ctx, count, height, width, bit_depth, prefix):
    """Write synthetic RAW/sRGB pairs into the data directory"""
    rng = np.random.default_rng(ctx.obj['seed'])
    data_dir = Path(ctx.obj['data_dir'])
    for i in range(count):
        pair_id = f"{prefix}_{i:04d}"
        pair = synthesize_pair(rng, height, width, pair_id)
        save_pair(data_dir, pair_id, pair.mosaic, pair.metadata, pair.srgb, int(bit_depth))
    click.echo(f"✅ Wrote {count} pairs of {height}x{width} to {data_dir}")


@cli.command('make-split')
@click.option('--output', '-o', default=None, help='Split file (default <data-dir>/split.txt)')
@click.pass_context
@handle_errors
def make_split_cmd(ctx, output):
    """Split the pairs in the data directory into train/val/test"""
    data_dir = Path(ctx.obj['data_dir'])
    ids = list_pair_ids(data_dir)
    split = make_split(ids, ctx.obj['seed'])
    path = Path(output) if output else data_dir / SPLIT_FILE
    split.save(path)
    click.echo(f"✅ Split {len(ids)} pairs: {len(split.train_ids)} train, "
               f"{len(split.val_ids)} val, {len(split.test_ids)} test -> {path}")


def _train(ctx, system, lmbda, config_path, stage, iters, batch_size, comp_teacher, isp_teacher,
           split_path, dtype, variant=None, suffix="", init_checkpoint=None):
    system = SystemName(system)
    file_values = _read_config(config_path)
    cli_values = {
        'stage': stage,
        'total_iters': iters,
        'batch_size': batch_size,
        'comp_teacher': comp_teacher,
        'isp_teacher': isp_teacher,
        'init_checkpoint': init_checkpoint,
        'dtype': dtype,
        'seed': ctx.obj['seed'],
        'device': ctx.obj['device'],
    }
    config = resolve_train_config(system, lmbda, file_values, cli_values, ctx.obj['scale'])
    if variant is not None:
        config = config.model_copy(update={'kd': config.kd.with_variant(variant)})
        # ablations need every teacher their variant distills from
        if config.kd.encoder.enabled and not config.comp_teacher:
            raise click.UsageError(f"variant '{variant.value}' distills encoder pairs and needs --comp-teacher")
        if config.kd.decoder.enabled and not config.isp_teacher:
            raise click.UsageError(f"variant '{variant.value}' distills decoder pairs and needs --isp-teacher")
    if iters is None and 'total_iters' not in file_values:
        _warn_scale(ctx.obj['scale'])

    pairs = _training_pairs(ctx, split_path, 'train')
    run_dir = _run_dir(ctx, system, config.lmbda, config.stage, suffix)
    click.echo(f"📊 Training {system.value} (lambda={config.lmbda}, {config.total_iters} iterations) "
               f"on {len(pairs)} pairs -> {run_dir}")
    result = train(system, config, pairs, run_dir)
    click.echo(f"✅ Saved {result.checkpoint_path}")
    click.echo(f"   Loss log: {result.loss_log_path}")
    return result, config


@cli.command('train')
@click.option('--system', '-s', required=True, type=click.Choice([s.value for s in SystemName]))
@click.option('--lambda', 'lmbda', type=float, default=None, help='Rate-distortion tradeoff')
@click.option('--config', 'config_path', type=click.Path(), default=None, help='JSON training config')
@click.option('--stage', type=click.Choice(['isp', 'codec', 'joint']), default=None,
              help='Cascaded baseline stage')
@click.option('--iters', type=int, default=None, help='Override the total iteration count')
@click.option('--batch-size', type=int, default=None)
@click.option('--comp-teacher', type=click.Path(), default=None, help='Compression teacher checkpoint')
@click.option('--isp-teacher', type=click.Path(), default=None, help='ISP teacher checkpoint')
@click.option('--split', 'split_path', type=click.Path(), default=None)
@click.option('--dtype', type=click.Choice(['float32', 'float64']), default=None)
@click.option('--init-checkpoint', type=click.Path(), default=None,
              help='Start from these weights (cascaded codec and joint stages)')
@click.pass_context
@handle_errors
def train_cmd(ctx, system, lmbda, config_path, stage, iters, batch_size, comp_teacher, isp_teacher,
              split_path, dtype, init_checkpoint):
    """Train one system at one lambda"""
    _train(ctx, system, lmbda, config_path, stage, iters, batch_size, comp_teacher, isp_teacher,
           split_path, dtype, init_checkpoint=init_checkpoint)


@cli.command('ablate')
@click.option('--variant', required=True, type=click.Choice([v.value for v in AblationVariant]))
@click.option('--lambda', 'lmbda', type=float, default=0.0932, show_default=True)
@click.option('--config', 'config_path', type=click.Path(), default=None)
@click.option('--iters', type=int, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--comp-teacher', type=click.Path(), default=None)
@click.option('--isp-teacher', type=click.Path(), default=None)
@click.option('--split', 'split_path', type=click.Path(), default=None)
@click.pass_context
@handle_errors
def ablate(ctx, variant, lmbda, config_path, iters, batch_size, comp_teacher, isp_teacher, split_path):
    """Train RBN with one KD ablation and plot its attention-loss curves"""
    variant = AblationVariant(variant)
    result, config = _train(ctx, SystemName.RBN.value, lmbda, config_path, None, iters, batch_size,
                            comp_teacher, isp_teacher, split_path, None, variant, f"_{variant.value}")
    run_dir = result.checkpoint_path.parent
    plot_path = run_dir / "attention_curves.png"
    plot_attention_curves({variant.value: result.loss_log_path}, plot_path)

    history = result.history
    tail = history[-min(len(history), 50):]
    click.echo(f"\n📊 Ablation '{variant.value}' after {len(history)} iterations:")
    click.echo("=" * 50)
    click.echo(f"encoder pairs: {'on' if config.kd.encoder.enabled else 'off'}   "
               f"decoder pairs: {'on' if config.kd.decoder.enabled else 'off'}   "
               f"abs maps: {'yes' if config.kd.encoder.abs_mode else 'no'}")
    click.echo(f"mean L_AT     {np.mean([r['L_AT'] for r in tail]):.6g}")
    click.echo(f"mean at_enc   {np.mean([r['at_enc'] for r in tail]):.6g}")
    click.echo(f"mean at_dec   {np.mean([r['at_dec'] for r in tail]):.6g}")
    click.echo(f"✅ Attention curves: {plot_path}")


@cli.command('encode')
@click.argument('checkpoint', type=click.Path())
@click.argument('raw_path', type=click.Path())
@click.argument('output', type=click.Path())
@click.option('--report', is_flag=True, help='Print bpp (and PSNR with --gt)')
@click.option('--gt', type=click.Path(), default=None, help='Ground-truth sRGB PNG for --report')
@click.pass_context
@handle_errors
def encode(ctx, checkpoint, raw_path, output, report, gt):
    """Compress a .raw16 file (with its .meta.json) into a .rbb bitstream"""
    model, config = _load_codec(checkpoint, ctx.obj['device'])
    raw = load_raw(raw_path)
    reference = next(model.parameters())
    x = raw.data.unsqueeze(0).to(device=reference.device, dtype=reference.dtype)
    data = serialize(model.compress(x, config.quality_index))
    Path(output).write_bytes(data)
    click.echo(f"✅ Wrote {len(data)} bytes to {output}")
    if report:
        decoded = model.decompress(deserialize(data))[0].cpu()
        _report(len(data), decoded, gt)


@cli.command('decode')
@click.argument('stream_path', type=click.Path())
@click.argument('checkpoint', type=click.Path())
@click.argument('output', type=click.Path())
@click.option('--bit-depth', type=click.Choice(['8', '16']), default='8', show_default=True,
              help='PNG bit depth (ignored for .npy)')
@click.option('--report', is_flag=True, help='Print bpp (and PSNR with --gt)')
@click.option('--gt', type=click.Path(), default=None, help='Ground-truth sRGB PNG for --report')
@click.pass_context
@handle_errors
def decode(ctx, stream_path, checkpoint, output, bit_depth, report, gt):
    """Decode a .rbb bitstream to .npy (float32) or PNG"""
    data = Path(stream_path).read_bytes()
    stream = deserialize(data)
    model, config = _load_codec(checkpoint, ctx.obj['device'])
    if stream.header.quality_index != config.quality_index:
        raise ModelMismatch(
            f"{stream_path} was written at quality index {stream.header.quality_index}, "
            f"{checkpoint} is quality index {config.quality_index}"
        )
    decoded = model.decompress(stream)[0].cpu()
    if output.endswith('.npy'):
        array = decoded.permute(1, 2, 0).numpy() if decoded.shape[0] == 3 else decoded.numpy()
        np.save(output, array.astype(np.float32))
    else:
        if decoded.shape[0] != 3:
            raise InvalidSpec(f"{decoded.shape[0]}-channel output can only be written as .npy")
        write_srgb_png(output, decoded.permute(1, 2, 0).numpy(), int(bit_depth))
    click.echo(f"✅ Decoded {stream.header.width}x{stream.header.height} image to {output}")
    if report:
        _report(len(data), decoded, gt)


def _report(n_bytes: int, decoded: torch.Tensor, gt: Optional[str]) -> None:
    height, width = decoded.shape[-2:]
    if decoded.shape[0] != 3:
        height, width = 2 * height, 2 * width
    click.echo(f"📊 {n_bytes} bytes, {bpp(n_bytes, height, width):.6f} bpp")
    if gt:
        target = torch.from_numpy(read_srgb_png(gt)).permute(2, 0, 1)
        click.echo(f"📊 PSNR {psnr(decoded, target):.10f} dB")


@cli.command('eval-rd')
@click.argument('checkpoints', nargs=-1, required=True, type=click.Path())
@click.option('--split', 'split_path', type=click.Path(), default=None)
@click.option('--subset', type=click.Choice(['train', 'val', 'test']), default='test', show_default=True)
@click.option('--error-maps', is_flag=True, help='Also write one error map per checkpoint and image')
@click.pass_context
@handle_errors
def eval_rd(ctx, checkpoints, split_path, subset, error_maps):
    """Evaluate checkpoints on the test split and plot the RD curves"""
    pairs = _training_pairs(ctx, split_path, subset)
    out_dir = Path(ctx.obj['out_dir'])
    points = rd_sweep(checkpoints, pairs, out_dir, ctx.obj['device'])
    if not points:
        click.echo("⚠️  No checkpoint could be evaluated")
        raise SystemExit(1)

    click.echo(f"\n📊 Rate-distortion over {len(pairs)} images:")
    click.echo("=" * 50)
    for p in points:
        lmbda = "-" if p.lmbda is None else f"{p.lmbda:g}"
        click.echo(f"   {p.system:<14} lambda={lmbda:<8} {p.bpp:8.4f} bpp {p.psnr_db:8.2f} dB")
    click.echo(f"✅ Wrote {out_dir / 'rd_points.csv'} and {out_dir / 'rd_curve.png'}")

    if error_maps:
        for path in checkpoints:
            if not Path(path).exists():
                continue
            model, config = _load_codec(path, ctx.obj['device'])
            reference = next(model.parameters())
            for raw, srgb in pairs:
                x = raw.data.unsqueeze(0).to(device=reference.device, dtype=reference.dtype)
                decoded = model.decompress(model.compress(x, config.quality_index))[0].cpu()
                if decoded.shape[0] != 3:
                    continue
                name = f"error_{Path(path).stem}_{srgb.source_id or 'image'}.png"
                error_map(srgb, decoded, out_dir / name)
        click.echo(f"✅ Error maps written to {out_dir}")


@cli.command('plot')
@click.option('--kind', type=click.Choice(['loss', 'attention', 'rd', 'error']), required=True)
@click.argument('inputs', nargs=-1, required=True)
@click.option('--output', '-o', required=True, type=click.Path())
@click.option('--column', default='L_total', show_default=True, help='Loss-log column for --kind loss')
@click.pass_context
@handle_errors
def plot(ctx, kind, inputs, output, column):
    """Plot loss logs (LABEL=log.csv ...), an rd_points.csv, or an error map (GT RECON)"""
    if kind in ('loss', 'attention'):
        logs = {}
        for item in inputs:
            label, sep, path = item.partition('=')
            logs[label if sep else Path(item).parent.name] = path if sep else item
        if kind == 'loss':
            plot_loss_curves(logs, output, column)
        else:
            plot_attention_curves(logs, output)
    elif kind == 'rd':
        points = [p for path in inputs for p in read_rd_csv(path)]
        plot_rd_curves(points, output)
    else:
        if len(inputs) != 2:
            raise click.UsageError("--kind error takes GT and RECON image paths")
        gt, recon = (torch.from_numpy(read_srgb_png(p)).permute(2, 0, 1) for p in inputs)
        error_map(gt, recon, output)
    click.echo(f"✅ Wrote {output}")


@cli.command('preview')
@click.argument('raw_path', type=click.Path())
@click.argument('output', type=click.Path())
@click.pass_context
@handle_errors
def preview(ctx, raw_path, output):
    """Render a .raw16 file through bilinear demosaicing and the toy ISP"""
    image = raw_preview(load_raw(raw_path))
    write_srgb_png(output, image.data.permute(1, 2, 0).numpy())
    click.echo(f"✅ Wrote preview {output}")


@cli.command('presets')
@click.option('--system', '-s', type=click.Choice([s.value for s in SystemName]), default=None)
@click.option('--show-models', is_flag=True, help='Also print parameter counts per system')
@click.pass_context
@handle_errors
def presets(ctx, system, show_models):
    """List lambda presets and iteration budgets"""
    table = train_schedule_presets(ctx.obj['scale'])
    for name, entries in table.items():
        if system and not name.startswith(system):
            continue
        click.echo(f"\n📊 {name}:")
        for lmbda, preset in entries.items():
            lam = "-" if lmbda is None else f"{lmbda:g}"
            k = f" K={preset.K}" if preset.K else ""
            click.echo(f"   lambda={lam:<8} q={preset.quality_index} iters={preset.total_iters} "
                       f"decay@{preset.lr_decay_iter} batch={preset.batch_size} stage={preset.stage}{k}")
    if show_models:
        click.echo("\n📊 Parameters:")
        for name in SystemName:
            if system and name.value != system:
                continue
            count = count_parameters(build_model(ModelConfig(system=name)))
            click.echo(f"   {name.value:<14} {count:>12,}")


@cli.command('demo')
@click.option('--iters', default=20, show_default=True)
@click.pass_context
@handle_errors
def demo(ctx, iters):
    """Tiny end-to-end run on synthetic data: prepare, train RBN, encode, decode, evaluate"""
    out_dir = Path(ctx.obj['out_dir']) / 'demo'
    rng = np.random.default_rng(ctx.obj['seed'])
    pairs = [synthesize_pair(rng, 128, 128, f"demo_{i}").to_images() for i in range(4)]
    click.echo(f"✅ Synthesized {len(pairs)} pairs of 128x128")

    tiny = {'width': 16, 'latent_channels': 8, 'teacher_k': 8, 'hyper_channels': 8,
            'reduction': 4, 'baseline_channels': 8, 'isp_width': 8}
    config = resolve_train_config(
        SystemName.RBN, 0.0932,
        {'model': tiny, 'kd': {'encoder': {'enabled': False}, 'decoder': {'enabled': False}}},
        {'total_iters': iters, 'lr_decay_iter': iters, 'batch_size': 2, 'patch_size': 32,
         'lr_initial': 1e-3, 'seed': ctx.obj['seed'], 'log_every': max(1, iters // 4)},
    )
    result = train(SystemName.RBN, config, pairs, out_dir)
    click.echo(f"✅ Trained tiny RBN for {iters} iterations -> {result.checkpoint_path}")

    model, _, _ = load_checkpoint(result.checkpoint_path)
    point, images = evaluate_system(model, pairs[:1], system='rbn', lmbda=0.0932)
    click.echo(f"📊 {images[0].file_bytes} bytes, {point.bpp:.4f} bpp, {point.psnr_db:.2f} dB")
    click.echo("\n✅ Demo completed!")


if __name__ == '__main__':
    cli()
