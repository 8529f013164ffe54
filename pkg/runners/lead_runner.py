"""
Lead Runner - orchestrates the command bodies: data generation, training, evaluation,
tracking and the comparison report
"""

import asyncio
import json
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Sequence

import numpy as np
import pandas as pd

from runners.tracker import track_sequence
from runners.trainer import Trainer, write_history_csv
from tools.dataset import (
    Corpus,
    build_sequence,
    corpus_poses,
    quantized_body,
    read_corpus,
    split_sequences,
    write_corpus,
)
from tools.evaluation import MetricsReport, evaluate_frame, foreign_part_response, query_throughput
from tools.kinematics import forward_kinematics
from tools.occmodels import ModelConfig, OracleModel, build_model, describe, load_checkpoint, save_checkpoint
from tools.plotting import plot_level_sets, plot_loss_history, plot_metric_bars
from tools.synthbody import chain_body
from utils.config import RunConfig, default_threads
from utils.errors import ConfigError, InvalidInputError, PlainIOError
from utils.logger import attach_log_file, detach_log_file, setup_logger

logger = setup_logger(__name__)

CORPUS_FILE = "corpus.nasaocc"
MANIFEST_FILE = "manifest.json"
REPORT_METRICS = ("miou", "chamfer_l1", "fscore")
# chamfer is a distance, so smaller is better
HIGHER_IS_BETTER = {"miou": True, "chamfer_l1": False, "fscore": True}


class LeadRunner:
    """Runs one command inside --out with a bounded worker pool"""

    def __init__(self, config: RunConfig, out_dir: str | Path, threads: int | None = None, progress: bool = True):
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = threads or default_threads()
        self.progress = progress
        self.semaphore = None
        self.log_file = None

    async def initialize(self):
        """Create the output directory and route logs into it"""
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise PlainIOError(f"Cannot create output directory {self.out_dir}: {str(e)}") from e
        self.log_file = attach_log_file(self.out_dir)
        self.semaphore = asyncio.Semaphore(self.threads)
        logger.info(f"Lead runner ready: out={self.out_dir}, threads={self.threads}")

    async def cleanup(self):
        detach_log_file()

    async def _run(self, fn: Callable, *args, **kwargs):
        async with self.semaphore:
            return await asyncio.to_thread(fn, *args, **kwargs)

    async def _map(self, fn: Callable, items: Iterable, **kwargs) -> List[Any]:
        """Apply fn to every item in the pool; results keep submission order"""
        return list(await asyncio.gather(*(self._run(fn, item, **kwargs) for item in items)))

    def _path(self, name: str) -> Path:
        return self.out_dir / name

    def _write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self._path(name)
        try:
            with open(path, "w", encoding="utf-8") as f:
                json.dump(payload, f, indent=2, sort_keys=True)
        except OSError as e:
            raise PlainIOError(f"Cannot write {path}: {str(e)}") from e
        return path

    # --- gen-data --------------------------------------------------------------------

    async def generate_data(self) -> Dict[str, Any]:
        """Deterministic corpus plus a manifest of seeds, counts and the split"""
        self.config.require(["body.dim", "body.bone_count"])
        b, data = self.config.body, self.config.data

        try:
            logger.info("Step 1: Building the capsule body")
            body = quantized_body(
                chain_body(b.dim, b.bone_count, b.segment_length, b.radius, b.bulge)
            )

            logger.info(f"Step 2: Sampling {data.sequences} sequences of {data.frames_per_sequence} frames")
            sequences = await self._map(
                lambda s: build_sequence(
                    body,
                    s,
                    data.frames_per_sequence,
                    data.uniform_points,
                    data.surface_points,
                    data.vertices,
                    sigma_frac=data.sigma_frac,
                    seed=data.seed,
                    max_velocity=data.max_velocity,
                    max_amplitude=data.max_amplitude,
                    components=data.components,
                    root_motion=data.root_motion,
                ),
                range(data.sequences),
            )

            logger.info("Step 3: Splitting train and test sequences")
            train_ids, test_ids = split_sequences(data.sequences, data.test_sequences, data.seed)
            corpus = Corpus(
                body=body,
                train_frames=[f for s in train_ids for f in sequences[s]],
                test_frames=[f for s in test_ids for f in sequences[s]],
                train_sequences=train_ids,
                test_sequences=test_ids,
            )

            logger.info("Step 4: Writing corpus and manifest")
            corpus_path = self._path(CORPUS_FILE)
            write_corpus(corpus, corpus_path)
            manifest = {
                "corpus": CORPUS_FILE,
                "seed": data.seed,
                "dim": body.dim,
                "bone_count": body.bone_count,
                "sequences": data.sequences,
                "frames_per_sequence": data.frames_per_sequence,
                "train_sequences": list(train_ids),
                "test_sequences": list(test_ids),
                "train_frames": len(corpus.train_frames),
                "test_frames": len(corpus.test_frames),
                "config": {k: v for k, v in self.config.as_dict().items() if k.split(".")[0] in ("body", "data")},
            }
            self._write_json(MANIFEST_FILE, manifest)
            return manifest

        except Exception as e:
            logger.error(f"Error generating data: {str(e)}")
            raise

    # --- train -----------------------------------------------------------------------

    def model_config(self, kind: str, dim: int, bone_count: int) -> ModelConfig:
        m = self.config.model
        return ModelConfig(
            kind=kind,
            dim=dim,
            bone_count=bone_count,
            width=m.width_u if kind == "u" else m.width_s,
            code_dim=m.code_dim,
            temperature=m.temperature,
            pose_features=m.pose_features,
            unstructured_input=m.unstructured_input,
            use_projection=m.use_projection,
        )

    async def train(self, kind: str, corpus_path: str | Path) -> Dict[str, Path]:
        """Checkpoint, loss-history CSV and loss curve for one model kind"""
        train_cfg = self.config.train
        if kind == "u" and "train.lambda_weights" in self.config.provided and train_cfg.lambda_weights > 0:
            raise ConfigError("The unstructured model has no parts; the skinning-weight weight must be 0")

        try:
            logger.info(f"Step 1: Loading corpus {corpus_path}")
            corpus = read_corpus(corpus_path)
            body = corpus.body

            logger.info(f"Step 2: Building the {kind.upper()} model")
            model = build_model(self.model_config(kind, body.dim, body.bone_count), seed=train_cfg.seed)

            logger.info("Step 3: Training")
            checkpoints = self._path("checkpoints") if train_cfg.checkpoint_every else None
            if checkpoints:
                try:
                    checkpoints.mkdir(parents=True, exist_ok=True)
                except OSError as e:
                    raise PlainIOError(f"Cannot create checkpoint directory {checkpoints}: {str(e)}") from e
            trainer = Trainer(
                model,
                body,
                corpus_poses(corpus.train_frames),
                train_cfg,
                checkpoint_dir=checkpoints,
                progress=self.progress,
            )
            result = await self._run(trainer.run)

            logger.info("Step 4: Writing checkpoint and loss history")
            outputs = {
                "checkpoint": self._path(f"model_{kind}.nasaw"),
                "history": self._path(f"loss_{kind}.csv"),
                "plot": self._path(f"loss_{kind}.svg"),
            }
            save_checkpoint(result.model, outputs["checkpoint"])
            write_history_csv(result.history, outputs["history"])
            plot_loss_history(result.history, outputs["plot"])
            self._write_json(
                f"model_{kind}.json",
                {**describe(result.model), "skipped_steps": result.skipped_steps, "iterations": train_cfg.iterations},
            )
            return outputs

        except Exception as e:
            logger.error(f"Error training {kind.upper()} model: {str(e)}")
            raise

    # --- eval ------------------------------------------------------------------------

    async def evaluate(self, checkpoint: str | Path | None, corpus_path: str | Path) -> MetricsReport:
        """Per-frame metrics over the test split; the oracle stands in when no checkpoint is given"""
        ev = self.config.eval
        try:
            logger.info(f"Step 1: Loading corpus {corpus_path}")
            corpus = read_corpus(corpus_path)
            body = corpus.body
            if not corpus.test_frames:
                raise InvalidInputError(f"{corpus_path} has no test frames")

            logger.info("Step 2: Loading the model")
            model = OracleModel(body) if checkpoint is None else load_checkpoint(checkpoint)
            if model.config.dim != body.dim or model.config.bone_count != body.bone_count:
                raise InvalidInputError("Checkpoint and corpus disagree on dimension or bone count")
            name = model.kind

            logger.info(f"Step 3: Evaluating {len(corpus.test_frames)} test frames")
            frames = await self._map(
                lambda frame: evaluate_frame(
                    model,
                    body,
                    frame,
                    grid_res=ev.grid_res,
                    reference_count=ev.reference_points,
                    seed=ev.seed,
                    fscore_fraction=ev.fscore_fraction,
                ),
                corpus.test_frames,
            )
            report = MetricsReport(name, frames)
            report.write_csv(self._path(f"metrics_{name}.csv"))
            logger.info(
                f"{name}: mIoU={report.miou:.4f} chamfer={report.chamfer_l1:.6f} F={report.fscore:.4f}"
            )

            logger.info("Step 4: Diagnostics and plots")
            diagnostics: Dict[str, Any] = {"model": describe(model), "summary": report.summary()}
            if model.part_based and not isinstance(model, OracleModel):
                response = foreign_part_response(model, body.rig, corpus.test_frames)
                diagnostics["foreign_part_response"] = [float(r) for r in response]
            if ev.throughput_queries:
                posed = [forward_kinematics(body.rig, f.pose) for f in corpus.test_frames]
                diagnostics["throughput"] = query_throughput(model, posed, ev.throughput_queries, ev.seed)
            self._write_json(f"diagnostics_{name}.json", diagnostics)

            if ev.plots:
                firsts = {}
                for frame in corpus.test_frames:
                    firsts.setdefault(frame.sequence_id, frame)
                for sequence_id, frame in sorted(firsts.items()):
                    last = [f for f in corpus.test_frames if f.sequence_id == sequence_id][-1]
                    for shown in (frame, last):
                        posed = forward_kinematics(body.rig, shown.pose)
                        plot_level_sets(
                            model,
                            body,
                            posed,
                            self._path(f"plots/{name}_seq{sequence_id}_frame{shown.frame_index}.svg"),
                            title=f"{name.upper()} sequence {sequence_id} frame {shown.frame_index}",
                        )
            return report

        except Exception as e:
            logger.error(f"Error evaluating model: {str(e)}")
            raise

    # --- track -----------------------------------------------------------------------

    async def track(
        self,
        checkpoint: str | Path,
        corpus_path: str | Path,
        clouds_path: str | Path | None = None,
    ) -> pd.DataFrame:
        """Track one held-out sequence from its frame-0 ground truth"""
        track_cfg = self.config.track
        try:
            logger.info(f"Step 1: Loading corpus {corpus_path} and model {checkpoint}")
            corpus = read_corpus(corpus_path)
            body = corpus.body
            model = load_checkpoint(checkpoint)
            if model.config.dim != body.dim or model.config.bone_count != body.bone_count:
                raise InvalidInputError("Checkpoint and corpus disagree on dimension or bone count")

            sequence_id = track_cfg.sequence
            if sequence_id < 0:
                sequence_id = corpus.test_sequences[0]
            frames = _sequence_frames(corpus, sequence_id)
            cloud_source = _sequence_frames(read_corpus(clouds_path), sequence_id) if clouds_path else frames
            if track_cfg.frames:
                frames, cloud_source = frames[: track_cfg.frames], cloud_source[: track_cfg.frames]
            if len(cloud_source) != len(frames):
                raise InvalidInputError(
                    f"Cloud file has {len(cloud_source)} frames for sequence {sequence_id}, corpus has {len(frames)}"
                )

            logger.info(f"Step 2: Preparing {len(frames)} clouds of sequence {sequence_id}")
            clouds = [f.vertices[: track_cfg.cloud_points] for f in cloud_source]
            if any(c.shape[0] < track_cfg.cloud_points for c in clouds):
                logger.warning(f"Some clouds hold fewer than {track_cfg.cloud_points} points; using all of them")
            truths = [forward_kinematics(body.rig, f.pose) for f in frames]

            logger.info(
                f"Step 3: Tracking (w_prior={track_cfg.w_prior}, smoothing={track_cfg.smoothing}, "
                f"S={track_cfg.samples})"
            )
            result = await self._run(
                track_sequence,
                model,
                body,
                truths[0],
                clouds,
                track_cfg,
                truths=truths,
                eval_frames=frames,
                eval_config=self.config.eval,
                progress=self.progress,
            )

            logger.info("Step 4: Writing tracking report and keyframes")
            result.write_csv(self._path("track_report.csv"))
            if track_cfg.keyframe_every:
                for t in range(0, len(frames), track_cfg.keyframe_every):
                    plot_level_sets(
                        model,
                        body,
                        result.states[t].posed(),
                        self._path(f"track_frames/frame_{t:04d}.svg"),
                        title=f"frame {t}",
                        cloud=clouds[t],
                        truth=truths[t],
                    )
            mean_error = float(result.report["joint_error"].mean())
            logger.info(f"Mean joint error {mean_error:.4f} body diagonals; failed frames {result.failed_frames}")
            return result.report

        except Exception as e:
            logger.error(f"Error tracking sequence: {str(e)}")
            raise

    # --- report ----------------------------------------------------------------------

    async def report(self, inputs: Sequence[str | Path]) -> pd.DataFrame:
        """One row per metrics CSV, plus whether D >= R >= U holds per metric"""
        try:
            if not inputs:
                raise InvalidInputError("report needs at least one metrics CSV")
            rows = [_summary_row(path) for path in inputs]
            table = pd.DataFrame(rows, columns=["model", *REPORT_METRICS])
            for metric in REPORT_METRICS:
                table[f"ordering_{metric}"] = ordering_holds(table, metric)

            table.to_csv(self._path("report.csv"), index=False, float_format="%.10g")
            _write_text(self._path("report.md"), markdown_table(table))
            plot_metric_bars(table, self._path("report.svg"))
            logger.info(f"Report over {len(table)} models written to {self.out_dir}")
            return table

        except Exception as e:
            logger.error(f"Error building report: {str(e)}")
            raise


def _sequence_frames(corpus: Corpus, sequence_id: int):
    frames = [f for f in corpus.test_frames + corpus.train_frames if f.sequence_id == sequence_id]
    if not frames:
        raise InvalidInputError(f"Sequence {sequence_id} is not in the corpus")
    return sorted(frames, key=lambda f: f.frame_index)


def _summary_row(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"Metrics file {path} does not exist")
    table = pd.read_csv(path)
    missing = {"model", "row", "iou", "chamfer_l1", "fscore"} - set(table.columns)
    if missing:
        raise InvalidInputError(f"{path} is not a metrics CSV (missing {sorted(missing)})")
    mean = table[table["row"] == "mean"]
    if mean.empty:
        raise InvalidInputError(f"{path} has no aggregate row")
    row = mean.iloc[-1]
    return {
        "model": str(row["model"]),
        "miou": float(row["iou"]),
        "chamfer_l1": float(row["chamfer_l1"]),
        "fscore": float(row["fscore"]),
    }


def ordering_holds(table: pd.DataFrame, metric: str) -> bool:
    """True when models d, r and u are all present and ranked d >= r >= u on metric"""
    values = table.drop_duplicates("model", keep="last").set_index("model")[metric]
    if not {"u", "r", "d"} <= set(values.index):
        return False
    u, r, d = values["u"], values["r"], values["d"]
    if HIGHER_IS_BETTER[metric]:
        return bool(d >= r >= u)
    return bool(d <= r <= u)


def markdown_table(table: pd.DataFrame) -> str:
    """Pipe table written by hand; tabulate is not part of the dependency stack"""
    columns = list(table.columns)
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for _, row in table.iterrows():
        cells = [f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise PlainIOError(f"Cannot write {path}: {str(e)}") from e
