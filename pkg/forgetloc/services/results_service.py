"""
Results Service Module

Writes and reads experiment directories:

    <out>/manifest.json
    <out>/runs/run_000.json                 RunResult (no timestamps)
    <out>/runs/run_000_t0_ledger.npz        per-parameter contributions
    <out>/runs/run_000_model.npz            final parameters, with --save-model
    <out>/stats_t0.json                     MultiRunStats, when runs >= 2
    <results_dir>/LATEST                    path of the last written experiment
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from forgetloc.config.settings import app_settings
from forgetloc.engine.network import save_snapshot
from forgetloc.models.schemas import (
    AttributionReport, ExperimentSummary, MultiRunStats, RunManifest, RunResult
)
from forgetloc.services.report_service import multi_run
from forgetloc.services.training_service import RunArtifacts
from forgetloc.utils.exceptions import ExportError, FetchError, InvalidInputError
from forgetloc.utils.logger import logger

LATEST_POINTER = "LATEST"


def _write_json(path: Path, payload: Any) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise ExportError(f"could not write {path.name} ({e})", path) from e
    return path


def write_experiment(out_dir: Path, manifest: RunManifest, artifacts: Sequence[RunArtifacts],
                     results_dir: Optional[Path] = None) -> RunManifest:
    """Persist every run, per-transition statistics and the manifest; returns the completed manifest"""
    out_dir = Path(out_dir)
    runs, ledgers, models = [], [], []
    for item in artifacts:
        stem = f"run_{item.result.run_index:03d}"
        runs.append(str(_write_json(out_dir / "runs" / f"{stem}.json",
                                    item.result.model_dump(mode="json")).relative_to(out_dir)))
        for k, contributions in enumerate(item.ledgers):
            ledger_path = out_dir / "runs" / f"{stem}_t{k}_ledger.npz"
            _save_npz(ledger_path, contributions)
            ledgers.append(str(ledger_path.relative_to(out_dir)))
        if item.model is not None:
            models.append(str(save_snapshot(item.model, out_dir / "runs" / f"{stem}_model.npz").relative_to(out_dir)))

    stats_files = []
    if len(artifacts) >= 2:
        for k in range(len(artifacts[0].result.reports)):
            stats = multi_run([item.result.reports[k] for item in artifacts])
            stats_files.append(str(_write_json(out_dir / f"stats_t{k}.json",
                                               stats.model_dump(mode="json")).relative_to(out_dir)))

    manifest = manifest.model_copy(update={"artifacts": {"runs": runs, "ledgers": ledgers, "stats": stats_files,
                                                      "models": models}})
    _write_json(out_dir / "manifest.json", manifest.model_dump(mode="json"))

    results_dir = Path(results_dir) if results_dir is not None else app_settings.results_dir
    try:
        results_dir.mkdir(parents=True, exist_ok=True)
        (results_dir / LATEST_POINTER).write_text(str(out_dir.resolve()) + "\n", encoding="utf-8")
    except OSError as e:
        logger.warning(f"Could not update {results_dir / LATEST_POINTER}: {e}")
    logger.info(f"Experiment written to {out_dir}")
    return manifest


def _save_npz(path: Path, contributions: Dict[str, Any]) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as handle:
            np.savez(handle, **contributions)
    except OSError as e:
        raise ExportError(f"could not write ledger ({e})", path) from e


def latest_experiment(results_dir: Optional[Path] = None) -> Path:
    results_dir = Path(results_dir) if results_dir is not None else app_settings.results_dir
    pointer = results_dir / LATEST_POINTER
    if not pointer.exists():
        raise InvalidInputError(f"no experiment recorded yet ({pointer} is missing); pass --in")
    return Path(pointer.read_text(encoding="utf-8").strip())


def load_run_results(experiment_dir: Path) -> List[RunResult]:
    runs_dir = Path(experiment_dir) / "runs"
    files = sorted(runs_dir.glob("run_*.json"))
    if not files:
        raise FetchError(f"no run results under {runs_dir}")
    return [RunResult.model_validate_json(path.read_text(encoding="utf-8")) for path in files]


def reports_for_transition(results: Sequence[RunResult], transition: int) -> List[AttributionReport]:
    reports = [r.reports[transition] for r in results if transition < len(r.reports)]
    if len(reports) != len(results):
        raise InvalidInputError(f"transition {transition} is missing from some runs")
    return reports


class ResultsService:
    """Read-only access to stored experiments, keeping parsed JSON in memory"""

    def __init__(self, results_dir: Optional[Path] = None):
        self.results_dir = Path(results_dir) if results_dir is not None else app_settings.results_dir
        self._cache: Dict[Path, Any] = {}

    def _load_json_file(self, path: Path) -> Optional[Any]:
        """Load data from a JSON file with caching"""
        if path in self._cache:
            return self._cache[path]
        try:
            if not path.exists():
                logger.error(f"Results file not found: {path}")
                return None
            data = json.loads(path.read_text(encoding="utf-8"))
            self._cache[path] = data
            logger.debug(f"Loaded results from {path}")
            return data
        except json.JSONDecodeError as e:
            logger.error(f"Error parsing JSON file {path}: {str(e)}")
            return None

    def experiment_dir(self, experiment_id: str) -> Optional[Path]:
        candidate = (self.results_dir / experiment_id).resolve()
        if candidate.parent != self.results_dir.resolve() or not (candidate / "manifest.json").exists():
            return None
        return candidate

    def list_experiments(self) -> List[ExperimentSummary]:
        if not self.results_dir.exists():
            return []
        summaries = []
        for manifest_path in sorted(self.results_dir.glob("*/manifest.json")):
            data = self._load_json_file(manifest_path) or {}
            artifacts = data.get("artifacts", {})
            runs = artifacts.get("runs", [])
            first_run = self._load_json_file(manifest_path.parent / runs[0]) if runs else None
            summaries.append(ExperimentSummary(
                id=manifest_path.parent.name,
                scenario=data.get("scenario", {}).get("kind"),
                run_count=len(runs),
                transitions=len(first_run.get("reports", [])) if first_run else 0,
                started_at=data.get("started_at")
            ))
        return summaries

    def get_manifest(self, experiment_id: str) -> Optional[Dict[str, Any]]:
        folder = self.experiment_dir(experiment_id)
        return self._load_json_file(folder / "manifest.json") if folder else None

    def get_runs(self, experiment_id: str) -> Optional[List[Dict[str, Any]]]:
        folder = self.experiment_dir(experiment_id)
        if folder is None:
            return None
        return [self._load_json_file(path) for path in sorted((folder / "runs").glob("run_*.json"))]

    def get_stats(self, experiment_id: str, transition: int = 0) -> Optional[MultiRunStats]:
        folder = self.experiment_dir(experiment_id)
        if folder is None:
            return None
        results = load_run_results(folder)
        return multi_run(reports_for_transition(results, transition))

    def clear_cache(self):
        """Clear the results cache"""
        self._cache.clear()
        logger.info("Results cache cleared")

    def get_results_stats(self) -> Dict[str, Any]:
        return {
            "results_directory": str(self.results_dir),
            "experiments": len(self.list_experiments()),
            "cached_files": len(self._cache),
        }


# Create global results service instance
results_service = ResultsService()
