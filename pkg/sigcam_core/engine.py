import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from config.constants import (
    CONFIG_FILE, DEFAULT_DATA_DIR, DEFAULT_OUTPUT_DIR, POS_WEIGHT_MODES,
    REPORT_KEY_COLUMNS, REPORT_METRIC_COLUMNS, SPLIT_IDS,
)
from models import get_model_info
from models.dual_branch import Branch, DualBranchModel, ModelPart, replicate_head
from visualizations.export import export_heatmaps, panel_strip, read_csv, write_csv, write_pgm
from .autograd import Tensor, no_grad, sigmoid, softmax
from .cam_engine import CamConfig, explain
from .checkpoint import checkpoint_fingerprint, model_from_checkpoint, read_checkpoint, save_checkpoint
from .config_io import format_config, parse_config_text
from .distortion import DistortionKind, DistortionSpec, reports_frame, run_distortion_experiment
from .distortion import run_distortion_sweep, summary_text
from .errors import ConfigError, ContractError, FingerprintError, FrozenParameterError
from .evaluation_result import EvalRecord, ExperimentResult
from .metrics import average_drop, excluded_count, fidelity_record, increase_in_confidence, summarize_records
from .synth_data import DatasetSpec, generate, load_dataset, save_dataset, dataset_fingerprint
from .training import PosWeightMode, TrainConfig, TrainPhase, sigmoid_finetune, softmax_pretrain
from .utils import atomic_write_text, sha256_hex

logger = logging.getLogger(__name__)

DATASET_SPEC_NAME = "dataset.cfg"

DEFAULT_SETTINGS: Dict[str, Any] = {
    'app_name': 'SigCAM Lab',
    'version': '0.1.0',
    'output': {'log_level': 'INFO', 'data_dir': DEFAULT_DATA_DIR, 'run_dir': DEFAULT_OUTPUT_DIR},
    'evaluation': {'score_source': 'softmax', 'split': 'test', 'panel_images': 8},
    'distortion': {'nwc': False},
    'pipeline': {
        'methods': ['cam', 'gradcam'],
        'branches': ['softmax', 'sigmoid'],
        'pos_weight_modes': list(POS_WEIGHT_MODES),
    },
}


@dataclass
class RunManifest:
    """What a command read, what it wrote and how long it took."""
    command: str
    config_path: str = ""
    dataset_fingerprint: str = ""
    checkpoint_fingerprints: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)
    overhead: Dict[str, Any] = field(default_factory=dict)

    def write(self, path: str) -> str:
        missing = [p for p in self.outputs if not os.path.exists(p)]
        if missing:
            raise ContractError(f"manifest references missing outputs: {', '.join(missing)}")
        payload = {
            'command': self.command,
            'config_path': self.config_path,
            'dataset_fingerprint': self.dataset_fingerprint,
            'checkpoint_fingerprints': dict(self.checkpoint_fingerprints),
            'outputs': list(self.outputs),
            'timings': {k: float(v) for k, v in self.timings.items()},
            'overhead': self.overhead,
        }
        atomic_write_text(path, yaml.safe_dump(payload, sort_keys=True))
        return path


def _merge(defaults: Dict[str, Any], loaded: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(defaults)
    for key, value in (loaded or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class Engine:
    """Runs the lab's commands: data, training, explanation, distortion and evaluation."""

    def __init__(self, config_path: str = CONFIG_FILE):
        """Initialize the engine with configuration."""
        self.config_path = config_path
        self.settings = self._load_config()
        self.command_handlers: Dict[str, Callable[..., RunManifest]] = {
            'gen-data': self.gen_data,
            'train-softmax': self.train_softmax,
            'train-sigmoid': self.train_sigmoid,
            'cam': self.cam,
            'distort': self.distort,
            'eval-wsol': self.eval_wsol,
            'eval-fidelity': self.eval_fidelity,
            'report': self.report,
            'pipeline': self.pipeline,
        }

    def _load_config(self) -> Dict[str, Any]:
        """Load settings from YAML, falling back to built-in defaults."""
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logger.debug(f"settings file {self.config_path} not found, using defaults")
            return _merge(DEFAULT_SETTINGS, {})
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse settings {self.config_path}: {exc}")
        return _merge(DEFAULT_SETTINGS, loaded)

    def setting(self, section: str, key: str) -> Any:
        return self.settings.get(section, {}).get(key, DEFAULT_SETTINGS[section][key])

    def run(self, command: str, **kwargs) -> RunManifest:
        if command not in self.command_handlers:
            raise ContractError(f"unknown command: {command}")
        return self.command_handlers[command](**kwargs)

    # ------------------------------------------------------------------
    # Data
    # ------------------------------------------------------------------

    def gen_data(self, spec: DatasetSpec, out_dir: str, config_path: str = "") -> RunManifest:
        started = time.perf_counter()
        spec.validate()
        manifest = RunManifest(command='gen-data', config_path=config_path)
        for split in SPLIT_IDS:
            manifest.outputs.append(save_dataset(generate(spec, split), os.path.join(out_dir, split)))
        spec_path = os.path.join(out_dir, DATASET_SPEC_NAME)
        atomic_write_text(spec_path, format_config(spec))
        manifest.outputs.append(spec_path)
        manifest.dataset_fingerprint = self.data_fingerprint(out_dir)
        manifest.timings['total_seconds'] = time.perf_counter() - started
        return manifest

    @staticmethod
    def data_fingerprint(data_dir: str) -> str:
        """sha256 over the fingerprints of every split, in split order."""
        return sha256_hex(dataset_fingerprint(os.path.join(data_dir, split)).encode("ascii")
                          for split in SPLIT_IDS)

    @staticmethod
    def dataset_spec(data_dir: str) -> DatasetSpec:
        path = os.path.join(data_dir, DATASET_SPEC_NAME)
        if not os.path.exists(path):
            raise ConfigError(f"dataset spec not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            return parse_config_text(f.read(), DatasetSpec, source=path)

    @staticmethod
    def load_split(data_dir: str, split: str) -> list:
        if split not in SPLIT_IDS:
            raise ConfigError(f"unknown split '{split}'", key="split")
        return load_dataset(os.path.join(data_dir, split))

    def _check_fingerprint(self, metadata: Dict[str, str], data_dir: str) -> str:
        actual = self.data_fingerprint(data_dir)
        recorded = metadata.get('dataset')
        if recorded and recorded != actual:
            raise FingerprintError(f"dataset {data_dir} does not match the checkpoint's training data")
        return actual

    def _load_model(self, ckpt: str, data_dir: str) -> Tuple[DualBranchModel, Dict[str, str], str]:
        checkpoint = read_checkpoint(ckpt)
        fingerprint = self._check_fingerprint(checkpoint.metadata, data_dir)
        return model_from_checkpoint(checkpoint), checkpoint.metadata, fingerprint

    # ------------------------------------------------------------------
    # Training
    # ------------------------------------------------------------------

    def train_softmax(self, config: TrainConfig, data_dir: str, out_ckpt: str,
                      config_path: str = "") -> RunManifest:
        if config.train_phase is not TrainPhase.SOFTMAX_PRETRAIN:
            raise ConfigError(f"train-softmax needs phase softmax_pretrain, got '{config.phase}'", key="phase")
        spec = self.dataset_spec(data_dir)
        fingerprint = self.data_fingerprint(data_dir)
        model = DualBranchModel.create(config.seed, spec.num_classes)
        history = softmax_pretrain(model, self.load_split(data_dir, 'train'), config)
        metadata = {
            'seed': config.seed,
            'num_classes': spec.num_classes,
            'dataset': fingerprint,
            'phase': config.phase,
            'train_accuracy': f"{history.final_accuracy:.6f}",
            **{f"config.softmax.{k}": v for k, v in _config_items(config)},
        }
        digest = save_checkpoint(model, out_ckpt, metadata)
        return RunManifest(command='train-softmax', config_path=config_path, dataset_fingerprint=fingerprint,
                           checkpoint_fingerprints={out_ckpt: digest}, outputs=[out_ckpt],
                           timings={'softmax_pretrain_seconds': history.wall_seconds},
                           overhead=get_model_info(model))

    def train_sigmoid(self, config: TrainConfig, data_dir: str, in_ckpt: str, out_ckpt: str,
                      config_path: str = "") -> RunManifest:
        if config.train_phase is not TrainPhase.SIGMOID_FINETUNE:
            raise ConfigError(f"train-sigmoid needs phase sigmoid_finetune, got '{config.phase}'", key="phase")
        model, metadata, fingerprint = self._load_model(in_ckpt, data_dir)
        before = model.parameter_hashes([ModelPart.BACKBONE, ModelPart.SOFTMAX_HEAD])
        replicate_head(model, config.seed)
        history = sigmoid_finetune(model, self.load_split(data_dir, 'train'), config)
        if model.parameter_hashes([ModelPart.BACKBONE, ModelPart.SOFTMAX_HEAD]) != before:
            raise FrozenParameterError("softmax branch differs from the input checkpoint after fine-tuning")
        metadata = {k: v for k, v in metadata.items() if not k.startswith('hash.') and k != 'frozen'}
        metadata.update({
            'phase': config.phase,
            'pos_weight_mode': config.pos_weight_mode,
            **{f"config.sigmoid.{k}": v for k, v in _config_items(config)},
        })
        digest = save_checkpoint(model, out_ckpt, metadata)
        return RunManifest(command='train-sigmoid', config_path=config_path, dataset_fingerprint=fingerprint,
                           checkpoint_fingerprints={in_ckpt: checkpoint_fingerprint(in_ckpt), out_ckpt: digest},
                           outputs=[out_ckpt], timings={'sigmoid_finetune_seconds': history.wall_seconds},
                           overhead=get_model_info(model))

    # ------------------------------------------------------------------
    # Explanation
    # ------------------------------------------------------------------

    def explain_split(self, model: DualBranchModel, samples: Sequence, config: CamConfig,
                      use_label: bool = True) -> Tuple[List[EvalRecord], float]:
        """One record per image (prediction plus normalized heatmap) and mean latency (ms)."""
        records = []
        started = time.perf_counter()
        for index, sample in enumerate(samples):
            target = sample.label if use_label else None
            result, heatmap = explain(model, sample.image, config, target_class=target)
            records.append(EvalRecord(index=index, label=int(sample.label), predicted=result.predicted,
                                      heatmap=heatmap.normalized, gt_box=sample.gt_box, gt_mask=sample.gt_mask))
        elapsed = time.perf_counter() - started
        latency = 1000.0 * elapsed / max(len(samples), 1)
        logger.info(f"{config.label()}: explained {len(samples)} images, {latency:.2f} ms/image")
        return records, latency

    def cam(self, ckpt: str, data_dir: str, cam_config: CamConfig, out_dir: str,
            limit: Optional[int] = None, config_path: str = "") -> RunManifest:
        """Heatmaps (PGM + raw) and comparison panels for the first images of the split."""
        model, _, fingerprint = self._load_model(ckpt, data_dir)
        split = self.setting('evaluation', 'split')
        limit = self.setting('evaluation', 'panel_images') if limit is None else limit
        samples = self.load_split(data_dir, split)[:limit]
        records, latency = self.explain_split(model, samples, cam_config, use_label=False)
        outputs = export_heatmaps({f"heatmap_{r.index:04d}": r.heatmap for r in records}, out_dir)

        branches = [Branch.SOFTMAX] + ([Branch.SIGMOID] if model.sigmoid_head is not None else [])
        for i, sample in enumerate(samples):
            tiles = []
            for method in ('cam', 'gradcam'):
                for branch in branches:
                    panel_config = CamConfig(method=method, branch=branch.value, nwc=cam_config.nwc)
                    tiles.append(explain(model, sample.image, panel_config)[1].normalized)
            strip = panel_strip(sample.image, tiles, sample.gt_box)
            outputs.append(write_pgm(strip, os.path.join(out_dir, f"panel_{i:04d}.pgm")))
        return RunManifest(command='cam', config_path=config_path, dataset_fingerprint=fingerprint,
                           checkpoint_fingerprints={ckpt: checkpoint_fingerprint(ckpt)}, outputs=outputs,
                           timings={'latency_ms_per_image': latency}, overhead=get_model_info(model))

    # ------------------------------------------------------------------
    # Distortion lab
    # ------------------------------------------------------------------

    def distort(self, ckpt: str, data_dir: str, out_csv: str, spec: Optional[DistortionSpec] = None,
                sweep: Optional[str] = None, config_path: str = "") -> RunManifest:
        """One experiment from ``spec`` or a whole delta grid for the ``sweep`` kind."""
        started = time.perf_counter()
        model, _, fingerprint = self._load_model(ckpt, data_dir)
        samples = self.load_split(data_dir, self.setting('evaluation', 'split'))
        if sweep:
            kinds = list(DistortionKind) if sweep == 'all' else [DistortionKind(sweep)]
            reports = []
            for kind in kinds:
                reports.extend(run_distortion_sweep(model, samples, kind, nwc=self.setting('distortion', 'nwc')))
        else:
            reports = [run_distortion_experiment(model, samples, spec or DistortionSpec())]
        write_csv(reports_frame(reports), out_csv)
        summary_path = os.path.splitext(out_csv)[0] + "_summary.txt"
        atomic_write_text(summary_path, summary_text(reports))
        return RunManifest(command='distort', config_path=config_path, dataset_fingerprint=fingerprint,
                           checkpoint_fingerprints={ckpt: checkpoint_fingerprint(ckpt)},
                           outputs=[out_csv, summary_path],
                           timings={'total_seconds': time.perf_counter() - started})

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------

    @staticmethod
    def sweep_configs(cam_config: CamConfig, sweep: bool) -> List[CamConfig]:
        if not sweep:
            return [cam_config]
        return [replace(cam_config, nwc=True), replace(cam_config, nwc=False)]

    def wsol_result(self, model: DualBranchModel, samples: Sequence, config: CamConfig,
                    pos_weight_mode: str) -> ExperimentResult:
        records, latency = self.explain_split(model, samples, config, use_label=True)
        metrics = summarize_records(records)
        return ExperimentResult(config.method, config.branch, config.clamp_negative_weights, pos_weight_mode,
                                metrics, timings={'latency_ms_per_image': latency})

    def score_fn(self, model: DualBranchModel, branch: Branch) -> Callable[[np.ndarray], np.ndarray]:
        """Class scores used by the fidelity metrics."""
        source = self.setting('evaluation', 'score_source')
        if source not in ('softmax', 'branch'):
            raise ConfigError(f"unknown score_source '{source}'", key="score_source")
        use_sigmoid = source == 'branch' and branch is Branch.SIGMOID

        def scores(images: np.ndarray) -> np.ndarray:
            with no_grad():
                features = model.backbone.forward(Tensor(images))
                if use_sigmoid:
                    return sigmoid(model.sigmoid_head.logits(features)).data.astype(np.float64)
                return softmax(model.softmax_head.logits(features)).data.astype(np.float64)
        return scores

    def fidelity_result(self, model: DualBranchModel, samples: Sequence, config: CamConfig,
                        pos_weight_mode: str) -> ExperimentResult:
        score = self.score_fn(model, config.branch_kind)
        records = []
        started = time.perf_counter()
        for sample in samples:
            result, heatmap = explain(model, sample.image, config)
            records.append(fidelity_record(score, sample.image, heatmap.normalized, result.predicted))
        latency = 1000.0 * (time.perf_counter() - started) / max(len(samples), 1)
        notes = []
        if excluded_count(records):
            notes.append(f"{excluded_count(records)} image(s) excluded from average drop")
        metrics = {'avg_drop': average_drop(records), 'inc_conf': increase_in_confidence(records)}
        return ExperimentResult(config.method, config.branch, config.clamp_negative_weights, pos_weight_mode,
                                metrics, timings={'latency_ms_per_image': latency}, notes=notes)

    def _evaluate(self, kind: str, ckpts: Sequence[str], data_dir: str, cam_config: CamConfig,
                  out_csv: str, sweep: bool, config_path: str) -> RunManifest:
        started = time.perf_counter()
        samples = None
        results: List[ExperimentResult] = []
        fingerprints = {}
        fingerprint = ""
        for ckpt in ckpts:
            model, metadata, fingerprint = self._load_model(ckpt, data_dir)
            fingerprints[ckpt] = checkpoint_fingerprint(ckpt)
            if samples is None:
                samples = self.load_split(data_dir, self.setting('evaluation', 'split'))
            mode = metadata.get('pos_weight_mode', 'n/a')
            for config in self.sweep_configs(cam_config, sweep):
                evaluate = self.wsol_result if kind == 'wsol' else self.fidelity_result
                results.append(evaluate(model, samples, config, mode))
        write_csv(results_frame(results), out_csv)
        latencies = [r.timings['latency_ms_per_image'] for r in results]
        return RunManifest(command=f"eval-{kind}", config_path=config_path, dataset_fingerprint=fingerprint,
                           checkpoint_fingerprints=fingerprints, outputs=[out_csv],
                           timings={'total_seconds': time.perf_counter() - started,
                                    'latency_ms_per_image': float(np.mean(latencies)) if latencies else 0.0})

    def eval_wsol(self, ckpts: Sequence[str], data_dir: str, cam_config: CamConfig, out_csv: str,
                  sweep: bool = False, config_path: str = "") -> RunManifest:
        return self._evaluate('wsol', ckpts, data_dir, cam_config, out_csv, sweep, config_path)

    def eval_fidelity(self, ckpts: Sequence[str], data_dir: str, cam_config: CamConfig, out_csv: str,
                      sweep: bool = False, config_path: str = "") -> RunManifest:
        return self._evaluate('fidelity', ckpts, data_dir, cam_config, out_csv, sweep, config_path)

    def report(self, csv_paths: Sequence[str], out_csv: str) -> RunManifest:
        """Join metric CSVs on the key columns into one summary table."""
        frames = [read_csv(path) for path in csv_paths]
        write_csv(join_reports(frames), out_csv)
        return RunManifest(command='report', outputs=[out_csv])

    # ------------------------------------------------------------------
    # Full matrix
    # ------------------------------------------------------------------

    def pipeline(self, spec: DatasetSpec, softmax_config: TrainConfig, sigmoid_config: TrainConfig,
                 out_dir: str, config_path: str = "") -> RunManifest:
        """gen-data, both training phases per pos_weight_mode, evaluation and report."""
        started = time.perf_counter()
        data_dir = os.path.join(out_dir, 'data')
        manifest = RunManifest(command='pipeline', config_path=config_path)
        self.gen_data(spec, data_dir)
        softmax_ckpt = os.path.join(out_dir, 'softmax.ckpt')
        step = self.train_softmax(softmax_config, data_dir, softmax_ckpt)
        manifest.timings.update(step.timings)
        manifest.checkpoint_fingerprints.update(step.checkpoint_fingerprints)

        sigmoid_ckpts = []
        for mode in self.setting('pipeline', 'pos_weight_modes'):
            ckpt = os.path.join(out_dir, f"sigmoid_{mode}.ckpt")
            step = self.train_sigmoid(replace(sigmoid_config, pos_weight_mode=mode), data_dir, softmax_ckpt, ckpt)
            manifest.timings[f"sigmoid_finetune_seconds.{mode}"] = step.timings['sigmoid_finetune_seconds']
            manifest.checkpoint_fingerprints.update(step.checkpoint_fingerprints)
            manifest.overhead = step.overhead
            sigmoid_ckpts.append((mode, ckpt))

        samples = self.load_split(data_dir, self.setting('evaluation', 'split'))
        wsol, fidelity, latencies = [], [], []
        for method in self.setting('pipeline', 'methods'):
            for branch in self.setting('pipeline', 'branches'):
                for nwc in (True, False):
                    config = CamConfig(method=method, branch=branch, nwc=nwc)
                    if branch == 'softmax':
                        # The softmax branch is identical in every fine-tuned checkpoint.
                        model = model_from_checkpoint(read_checkpoint(sigmoid_ckpts[0][1]))
                        w, f = self.wsol_result(model, samples, config, ''), \
                            self.fidelity_result(model, samples, config, '')
                        for mode, _ in sigmoid_ckpts:
                            wsol.append(_with_mode(w, mode))
                            fidelity.append(_with_mode(f, mode))
                        latencies.append(w.timings['latency_ms_per_image'])
                        continue
                    for mode, ckpt in sigmoid_ckpts:
                        model = model_from_checkpoint(read_checkpoint(ckpt))
                        wsol.append(self.wsol_result(model, samples, config, mode))
                        fidelity.append(self.fidelity_result(model, samples, config, mode))
                        latencies.append(wsol[-1].timings['latency_ms_per_image'])

        wsol_csv = write_csv(results_frame(wsol), os.path.join(out_dir, 'wsol.csv'))
        fidelity_csv = write_csv(results_frame(fidelity), os.path.join(out_dir, 'fidelity.csv'))
        summary_csv = write_csv(join_reports([results_frame(wsol), results_frame(fidelity)]),
                                os.path.join(out_dir, 'summary.csv'))

        balanced = dict(sigmoid_ckpts).get(PosWeightMode.BALANCED.value, sigmoid_ckpts[-1][1])
        distort_csv = os.path.join(out_dir, 'distortion.csv')
        step = self.distort(balanced, data_dir, distort_csv, sweep='all')

        manifest.dataset_fingerprint = self.data_fingerprint(data_dir)
        manifest.outputs = [softmax_ckpt] + [c for _, c in sigmoid_ckpts] + \
            [wsol_csv, fidelity_csv, summary_csv] + step.outputs
        manifest.timings['latency_ms_per_image'] = float(np.mean(latencies)) if latencies else 0.0
        manifest.timings['total_seconds'] = time.perf_counter() - started
        return manifest


def _config_items(config) -> List[Tuple[str, str]]:
    items = []
    for line in format_config(config).splitlines():
        key, _, value = line.partition(" = ")
        items.append((key, value))
    return items


def _with_mode(result: ExperimentResult, mode: str) -> ExperimentResult:
    return ExperimentResult(result.method, result.branch, result.nwc, mode, dict(result.metrics),
                            dict(result.timings), list(result.notes))


def results_frame(results: Sequence[ExperimentResult]) -> pd.DataFrame:
    return pd.DataFrame([r.row() for r in results], columns=REPORT_KEY_COLUMNS + REPORT_METRIC_COLUMNS)


def join_reports(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """Combine rows sharing the key columns, keeping the first non-empty value per metric."""
    frames = [f for f in frames if not f.empty]
    if not frames:
        return pd.DataFrame(columns=REPORT_KEY_COLUMNS + REPORT_METRIC_COLUMNS)
    combined = pd.concat(frames, ignore_index=True)
    for column in REPORT_METRIC_COLUMNS:
        if column not in combined:
            combined[column] = np.nan
    combined['pos_weight_mode'] = combined['pos_weight_mode'].fillna('').astype(str)
    joined = combined.groupby(REPORT_KEY_COLUMNS, sort=True, dropna=False)[REPORT_METRIC_COLUMNS].first()
    return joined.reset_index()[REPORT_KEY_COLUMNS + REPORT_METRIC_COLUMNS]
