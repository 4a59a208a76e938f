import json
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger

from app.config import Settings
from app.models.containers import Dataset, SplitAssignment, SyntheticGroundTruth
from app.models.schemas import CheckResult, Method, MetricRecord, MetricReport, PairUniverse
from app.services.checkpoints import load_checkpoint, save_checkpoint
from app.services.exposure import LearnedExposure, PopularityExposure, popularity_from_pairs
from app.services.metrics import evaluate, mean_user_pcc, per_pair_dcg, snips_metric
from app.services.model import score_matrix
from app.services.ratings import load_ratings, load_test_ratings, write_ratings
from app.services.splits import build_splits, read_split_manifest, sample_test_pairs, write_split_manifest
from app.services.studies import run_grad_checks, variance_study, write_variance_csv
from app.services.synthetic import (
    draw_synthetic_test,
    generate_semi_synthetic,
    read_ground_truth,
    write_ground_truth,
)
from app.services.trainers import TrainResult, train_method
from app.utils.helpers import write_json, write_manifest, write_text

DATASET_FILE = "dataset.tsv"
GROUND_TRUTH_FILE = "ground_truth.tsv"
SPLITS_FILE = "splits.tsv"
RUN_FILE = "run.json"


class ExperimentPipeline:
    """Runs the data, training, evaluation and verification commands for one settings object."""

    def __init__(self, settings: Settings):
        self.settings = settings
        self.config_hash = settings.config_hash()
        logger.info(f"Pipeline ready (config {self.config_hash[:12]})")

    def _out_dir(self, out_dir: Optional[str]) -> Path:
        path = Path(out_dir or self.settings.OUT_DIR)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def _manifest(self, out_dir: Path, command: str, artifacts: List[Path], **extra) -> Path:
        return write_manifest(out_dir, command, self.config_hash, artifacts,
                              {"settings": self.settings.model_dump(mode="json"), **extra})

    def generate(self, out_dir: Optional[str] = None) -> Dict[str, Path]:
        """Semi-synthetic dataset, ground truth and split manifest from a base ratings file."""
        settings = self.settings
        out = self._out_dir(out_dir)
        if not settings.RATINGS_PATH:
            raise ValueError("generate needs RATINGS_PATH (--ratings)")

        logger.info("Step 1: Loading base ratings...")
        base = load_ratings(settings.RATINGS_PATH, settings.POSITIVE_THRESHOLD, PairUniverse.OBSERVED)

        logger.info("Step 2: Sampling semi-synthetic feedback...")
        ds, truth = generate_semi_synthetic(base, settings.synth_config(), settings.SEED)

        logger.info("Step 3: Building splits...")
        test = draw_synthetic_test(truth, settings.TEST_ITEMS_PER_USER, settings.SEED)
        splits = build_splits(ds, settings.ACTIVE_FRACTION, settings.HYPER_VAL_FRACTION, settings.SEED, test)

        logger.info("Step 4: Writing artifacts...")
        paths = {
            "dataset": write_ratings(ds, out / DATASET_FILE),
            "ground_truth": write_ground_truth(truth, out / GROUND_TRUTH_FILE),
            "splits": write_split_manifest(splits, out / SPLITS_FILE),
        }
        paths["manifest"] = self._manifest(out, "generate", list(paths.values()))
        return paths

    def load_training_data(self) -> Tuple[Dataset, SplitAssignment, Optional[SyntheticGroundTruth]]:
        """Generated data from DATA_DIR, else a ratings file split on the fly."""
        settings = self.settings
        if settings.DATA_DIR:
            data_dir = Path(settings.DATA_DIR)
            # generated datasets store binary feedback as the rating
            ds = load_ratings(data_dir / DATASET_FILE, positive_threshold=1.0, pair_universe=PairUniverse.GRID)
            splits = read_split_manifest(data_dir / SPLITS_FILE, ds.n_users, ds.n_items)
            truth_path = data_dir / GROUND_TRUTH_FILE
            truth = read_ground_truth(truth_path) if truth_path.is_file() else None
            return ds, splits, truth

        if not settings.RATINGS_PATH:
            raise ValueError("train needs DATA_DIR (--data) or RATINGS_PATH (--ratings)")
        ds = load_ratings(settings.RATINGS_PATH, settings.POSITIVE_THRESHOLD, settings.PAIR_UNIVERSE)
        if settings.TEST_RATINGS_PATH:
            test = load_test_ratings(settings.TEST_RATINGS_PATH, ds, settings.POSITIVE_THRESHOLD)
        else:
            test = sample_test_pairs(ds, settings.TEST_FRACTION, settings.SEED)
        splits = build_splits(ds, settings.ACTIVE_FRACTION, settings.HYPER_VAL_FRACTION, settings.SEED, test)
        return ds, splits, None

    def hyper_validation_score(self, result: TrainResult, splits: SplitAssignment) -> float:
        """SNIPS estimate of per-pair DCG on the hyper-validation set."""
        theta = popularity_from_pairs(splits.train, splits.n_items)
        hyper = splits.hyper_val
        values = per_pair_dcg(score_matrix(result.model), hyper, self.settings.SNIPS_K)
        return snips_metric(values, theta.theta[hyper.items], hyper.labels, self.settings.CLIP_FLOOR)

    def tune_weight_decay(self, method: Method, ds: Dataset, splits: SplitAssignment,
                          truth: Optional[SyntheticGroundTruth]) -> float:
        grid = self.settings.WEIGHT_DECAY_GRID
        if len(grid) <= 1:
            return grid[0] if grid else self.settings.WEIGHT_DECAY

        seed = self.settings.seeds[0]
        scores = {}
        for weight_decay in grid:
            config = self.settings.bilevel_config(seed=seed, weight_decay=weight_decay)
            result = train_method(method, ds, splits, config, truth)
            try:
                scores[weight_decay] = self.hyper_validation_score(result, splits)
            except ValueError as e:
                logger.warning(f"Weight decay {weight_decay} not scored: {e}")
        if not scores:
            logger.warning(f"No weight decay candidate could be scored for {method.value}; using {grid[0]}")
            return grid[0]

        best = max(scores, key=lambda wd: (scores[wd], -wd))
        logger.info(f"Weight decay for {method.value}: {best} (SNIPS DCG@{self.settings.SNIPS_K} {scores[best]:.6f})")
        return best

    def train(self, out_dir: Optional[str] = None) -> Dict[str, Path]:
        settings = self.settings
        out = self._out_dir(out_dir)

        logger.info("Step 1: Loading training data...")
        ds, splits, truth = self.load_training_data()
        artifacts = [write_split_manifest(splits, out / SPLITS_FILE)]

        chosen_decay: Dict[str, float] = {}
        for method in settings.methods:
            logger.info(f"Step 2: Training {method.value} over seeds {settings.seeds}...")
            weight_decay = self.tune_weight_decay(method, ds, splits, truth)
            chosen_decay[method.value] = weight_decay

            for seed in settings.seeds:
                checkpoint_dir = out / "checkpoints" / method.value

                def on_checkpoint(epoch, model, exposure, seed=seed, checkpoint_dir=checkpoint_dir):
                    artifacts.append(save_checkpoint(checkpoint_dir / f"seed{seed}_epoch{epoch}.bin", model, exposure))

                config = settings.bilevel_config(seed=seed, weight_decay=weight_decay)
                result = train_method(method, ds, splits, config, truth, on_checkpoint=on_checkpoint)
                artifacts.append(save_checkpoint(checkpoint_dir / f"seed{seed}.bin", result.model, result.exposure))
                artifacts.append(write_text(out / "traces" / method.value / f"seed{seed}.jsonl",
                                            result.trace.to_jsonl()))

        run_info = {
            "methods": [m.value for m in settings.methods],
            "seeds": settings.seeds,
            "n_users": ds.n_users,
            "n_items": ds.n_items,
            "ground_truth": str(Path(settings.DATA_DIR) / GROUND_TRUTH_FILE) if truth is not None else None,
            "weight_decay": chosen_decay,
        }
        artifacts.append(write_json(out / RUN_FILE, run_info))
        manifest = self._manifest(out, "train", artifacts, weight_decay=chosen_decay)
        return {"run": out / RUN_FILE, "manifest": manifest}

    def evaluate(self, run_dir: Optional[str] = None, out_dir: Optional[str] = None) -> MetricReport:
        settings = self.settings
        run = Path(run_dir or settings.RUN_DIR or settings.OUT_DIR)
        out = self._out_dir(out_dir or str(run / "evaluation"))

        run_file = run / RUN_FILE
        if not run_file.is_file():
            raise FileNotFoundError(f"No training run found at {run} ({RUN_FILE} missing)")
        run_info = json.loads(run_file.read_text(encoding="utf-8"))
        splits = read_split_manifest(run / SPLITS_FILE, run_info["n_users"], run_info["n_items"])
        if len(splits.test) == 0:
            raise ValueError(f"run {run} has an empty test split")
        truth = read_ground_truth(run_info["ground_truth"]) if run_info.get("ground_truth") else None
        theta = popularity_from_pairs(splits.train, splits.n_items)

        records: List[MetricRecord] = []
        for method_name in run_info["methods"]:
            method = Method(method_name)
            for seed in run_info["seeds"]:
                path = run / "checkpoints" / method.value / f"seed{seed}.bin"
                if not path.is_file():
                    raise FileNotFoundError(f"missing checkpoint for {method.value} seed {seed}: {path}")
                model, exposure = load_checkpoint(path)
                records.extend(evaluate(model, splits.test, settings.KS, method.value, seed).records)

                if truth is not None and method != Method.NAIVE:
                    source = LearnedExposure(exposure, theta) if exposure is not None else PopularityExposure(theta)
                    pcc = mean_user_pcc(source.matrix(model), truth.m)
                    records.append(MetricRecord(method=method.value, seed=seed, metric="pcc", value=pcc))

        report = MetricReport(records=records, provenance={"run_dir": str(run), "config_hash": self.config_hash})
        artifacts = self.write_report(report, out)
        self._manifest(out, "evaluate", artifacts)
        return report

    @staticmethod
    def summarize(report: MetricReport) -> pd.DataFrame:
        """Mean and population standard deviation across seeds."""
        frame = pd.DataFrame([r.model_dump() for r in report.records])
        frame["k"] = frame["k"].astype("Int64")
        summary = (
            frame.groupby(["method", "metric", "k"], dropna=False, sort=True)["value"]
            .agg(mean="mean", std=lambda v: float(np.std(v, ddof=0)), n_seeds="count")
            .reset_index()
        )
        return summary

    def write_report(self, report: MetricReport, out: Path) -> List[Path]:
        frame = pd.DataFrame([r.model_dump() for r in report.records], columns=["method", "seed", "metric", "k", "value"])
        frame["k"] = frame["k"].astype("Int64")
        metrics_csv = out / "metrics.csv"
        frame.to_csv(metrics_csv, index=False, float_format="%.10g", lineterminator="\n")
        metrics_json = write_json(out / "metrics.json", report.model_dump(mode="json"))
        summary_csv = out / "summary.csv"
        self.summarize(report).to_csv(summary_csv, index=False, float_format="%.10g", lineterminator="\n")
        logger.info(f"Metrics written to {out}")
        return [metrics_csv, metrics_json, summary_csv]

    def variance_study(self, out_dir: Optional[str] = None) -> Path:
        settings = self.settings
        out = self._out_dir(out_dir)
        rows = variance_study(
            settings.VARIANCE_GAMMAS, settings.VARIANCE_M_BARS, settings.VARIANCE_PS,
            n_samples=settings.VARIANCE_SAMPLES, seed=settings.SEED, sampling=settings.VARIANCE_SAMPLING,
        )
        path = write_variance_csv(rows, out / "variance.csv")
        self._manifest(out, "variance-study", [path])
        return path

    def grad_check(self, out_dir: Optional[str] = None) -> List[CheckResult]:
        settings = self.settings
        out = self._out_dir(out_dir)
        results = run_grad_checks(
            instances=settings.GRAD_CHECK_INSTANCES,
            tolerance=settings.GRAD_CHECK_TOLERANCE,
            step=settings.FD_STEP,
            seed=settings.SEED,
        )
        path = write_json(out / "grad_check.json", [r.model_dump(mode="json") for r in results])
        self._manifest(out, "grad-check", [path], passed=all(r.passed for r in results))
        return results
