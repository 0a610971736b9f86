import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from config.constants import CONFIG_FILE
from sigcam_core.cam_engine import CamConfig
from sigcam_core.config_io import load_config
from sigcam_core.distortion import DistortionKind, DistortionSpec
from sigcam_core.engine import Engine, RunManifest
from sigcam_core.errors import SigCamError, exit_code_for
from sigcam_core.synth_data import DatasetSpec
from sigcam_core.training import TrainConfig, TrainPhase
from sigcam_core.utils import format_duration

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description='SigCAM Lab - dual-branch sigmoid CAM experiments',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python cli/main.py gen-data --config config/experiments/dataset.cfg --out data/synth
  python cli/main.py train-softmax --config config/experiments/softmax_pretrain.cfg --data data/synth --out runs/softmax.ckpt
  python cli/main.py train-sigmoid --config config/experiments/sigmoid_finetune.cfg --data data/synth \\
      --checkpoint runs/softmax.ckpt --out runs/sigmoid.ckpt
  python cli/main.py eval-wsol --checkpoint runs/sigmoid.ckpt --data data/synth \\
      --config config/experiments/cam_gradcam_sigmoid.cfg --out runs/wsol.csv --sweep
  python cli/main.py distort --checkpoint runs/sigmoid.ckpt --data data/synth --sweep all --out runs/distortion.csv
  python cli/main.py pipeline --out runs/full
        """
    )
    parser.add_argument('--settings', default=CONFIG_FILE,
                        help=f'Settings YAML (default: {CONFIG_FILE})')
    parser.add_argument('--verbose', '-v', action='store_true',
                        help='Debug logging')
    parser.add_argument('--manifest',
                        help='Where to write the run manifest (default: next to the output)')

    commands = parser.add_subparsers(dest='command', required=True)

    gen = commands.add_parser('gen-data', help='Generate the synthetic dataset')
    gen.add_argument('--config', help='Dataset spec config (default: built-in spec)')
    gen.add_argument('--out', required=True, help='Output directory')

    soft = commands.add_parser('train-softmax', help='Pretrain backbone + softmax head')
    soft.add_argument('--config', help='Training config')
    soft.add_argument('--data', required=True, help='Dataset directory')
    soft.add_argument('--out', required=True, help='Output checkpoint')

    sig = commands.add_parser('train-sigmoid', help='Replicate and fine-tune the sigmoid head')
    sig.add_argument('--config', help='Training config')
    sig.add_argument('--data', required=True, help='Dataset directory')
    sig.add_argument('--checkpoint', required=True, help='Softmax checkpoint')
    sig.add_argument('--out', required=True, help='Output checkpoint')

    cam = commands.add_parser('cam', help='Export heatmaps and comparison panels')
    cam.add_argument('--checkpoint', required=True)
    cam.add_argument('--data', required=True)
    cam.add_argument('--config', help='CAM config')
    cam.add_argument('--out', required=True, help='Output directory')
    cam.add_argument('--limit', type=int, help='Number of images (default: evaluation.panel_images)')

    distort = commands.add_parser('distort', help='Run softmax distortion experiments')
    distort.add_argument('--checkpoint', required=True)
    distort.add_argument('--data', required=True)
    distort.add_argument('--config', help='Distortion spec config')
    distort.add_argument('--sweep', choices=[k.value for k in DistortionKind] + ['all'],
                         help='Run the default delta grid instead of a single spec')
    distort.add_argument('--out', required=True, help='Output CSV')

    for name, text in (('eval-wsol', 'Localization metrics'), ('eval-fidelity', 'Fidelity metrics')):
        sub = commands.add_parser(name, help=text)
        sub.add_argument('--checkpoint', required=True, nargs='+',
                         help='One or more checkpoints (one per pos_weight_mode)')
        sub.add_argument('--data', required=True)
        sub.add_argument('--config', help='CAM config')
        sub.add_argument('--sweep', action='store_true', help='Expand nwc on/off into rows')
        sub.add_argument('--out', required=True, help='Output CSV')

    report = commands.add_parser('report', help='Join metric CSVs into one table')
    report.add_argument('--inputs', required=True, nargs='+')
    report.add_argument('--out', required=True)

    pipe = commands.add_parser('pipeline', help='Run the full experiment matrix')
    pipe.add_argument('--dataset-config', help='Dataset spec config')
    pipe.add_argument('--softmax-config', help='Softmax training config')
    pipe.add_argument('--sigmoid-config', help='Sigmoid training config')
    pipe.add_argument('--out', required=True, help='Output directory')
    return parser


def _load(path: Optional[str], cls, default):
    return load_config(path, cls) if path else default


def _manifest_path(args) -> str:
    if args.manifest:
        return args.manifest
    if args.command in ('gen-data', 'cam', 'pipeline'):
        return os.path.join(args.out, 'manifest.yaml')
    return f"{args.out}.manifest.yaml"


def dispatch(engine: Engine, args) -> RunManifest:
    if args.command == 'gen-data':
        spec = _load(args.config, DatasetSpec, DatasetSpec())
        return engine.gen_data(spec, args.out, config_path=args.config or '')
    if args.command == 'train-softmax':
        config = _load(args.config, TrainConfig, TrainConfig.default_for(TrainPhase.SOFTMAX_PRETRAIN))
        return engine.train_softmax(config, args.data, args.out, config_path=args.config or '')
    if args.command == 'train-sigmoid':
        config = _load(args.config, TrainConfig, TrainConfig.default_for(TrainPhase.SIGMOID_FINETUNE))
        return engine.train_sigmoid(config, args.data, args.checkpoint, args.out, config_path=args.config or '')
    if args.command == 'cam':
        config = _load(args.config, CamConfig, CamConfig())
        return engine.cam(args.checkpoint, args.data, config, args.out, limit=args.limit,
                          config_path=args.config or '')
    if args.command == 'distort':
        spec = _load(args.config, DistortionSpec, None)
        return engine.distort(args.checkpoint, args.data, args.out, spec=spec, sweep=args.sweep,
                              config_path=args.config or '')
    if args.command in ('eval-wsol', 'eval-fidelity'):
        config = _load(args.config, CamConfig, CamConfig())
        evaluate = engine.eval_wsol if args.command == 'eval-wsol' else engine.eval_fidelity
        return evaluate(args.checkpoint, args.data, config, args.out, sweep=args.sweep,
                        config_path=args.config or '')
    if args.command == 'report':
        return engine.report(args.inputs, args.out)
    spec = _load(args.dataset_config, DatasetSpec, DatasetSpec())
    softmax_config = _load(args.softmax_config, TrainConfig, TrainConfig.default_for(TrainPhase.SOFTMAX_PRETRAIN))
    sigmoid_config = _load(args.sigmoid_config, TrainConfig, TrainConfig.default_for(TrainPhase.SIGMOID_FINETUNE))
    return engine.pipeline(spec, softmax_config, sigmoid_config, args.out, config_path=args.dataset_config or '')


def display_manifest(manifest: RunManifest, verbose: bool = False):
    """Display a command summary on the console."""
    print("\n" + "=" * 60)
    print(f"🔬 SIGCAM LAB: {manifest.command}")
    print("=" * 60)
    if manifest.dataset_fingerprint:
        print(f"Dataset fingerprint: {manifest.dataset_fingerprint[:16]}")

    print(f"\n📁 OUTPUTS:")
    for i, path in enumerate(manifest.outputs):
        branch = "└─" if i == len(manifest.outputs) - 1 else "├─"
        print(f"{branch} {path}")

    if manifest.timings:
        print(f"\n⏱️ TIMINGS:")
        for key, value in sorted(manifest.timings.items()):
            shown = f"{value:.2f} ms" if key.startswith('latency') else format_duration(value)
            print(f"├─ {key}: {shown}")

    if manifest.overhead:
        print(f"\n📊 PARAMETERS:")
        print(f"├─ Single head: {manifest.overhead.get('single_head_parameters', 0):,}")
        print(f"├─ Dual branch: {manifest.overhead.get('dual_branch_parameters', 0):,}")
        print(f"└─ Overhead: {manifest.overhead.get('overhead_percent', 0.0):.2f}%")

    if verbose and manifest.checkpoint_fingerprints:
        print(f"\n🔍 CHECKPOINTS:")
        for path, digest in sorted(manifest.checkpoint_fingerprints.items()):
            print(f"├─ {path}: {digest}")


def configure_logging(engine: Engine, verbose: bool):
    level = logging.DEBUG if verbose else getattr(logging, str(engine.setting('output', 'log_level')).upper(),
                                                 logging.INFO)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point; returns the process exit code."""
    args = build_parser().parse_args(argv)
    try:
        engine = Engine(args.settings)
        configure_logging(engine, args.verbose)
        manifest = dispatch(engine, args)
        manifest_path = manifest.write(_manifest_path(args))
        display_manifest(manifest, args.verbose)
        print(f"\n✅ Manifest saved to: {manifest_path}")
        return 0
    except SigCamError as e:
        print(f"error[{e.category}]: {e.message}", file=sys.stderr)
        return exit_code_for(e)
    except Exception as e:
        logger.debug("unexpected failure", exc_info=True)
        print(f"error[internal]: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
