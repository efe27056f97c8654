import json
import logging
from pathlib import Path
from typing import Dict, Union

import numpy as np
import polars as pl

from impact_remediation.objective import ChangeReport, comparison_text
from impact_remediation.scenario import Scenario

logger = logging.getLogger(__name__)

RESULT_FILE = "result.csv"
REPORT_FILE = "report.csv"
SUMMARY_FILE = "summary.txt"
GEOJSON_FILE = "selected.geojson"
COMPARE_CSV = "compare.csv"
COMPARE_TEXT = "compare.txt"


def save_to_csv(df: pl.DataFrame, filename: Union[str, Path]) -> Path:
    """Saves a Polars DataFrame to a CSV file, creating the directory if needed."""
    filename = Path(filename)
    try:
        filename.parent.mkdir(parents=True, exist_ok=True)
        df.write_csv(filename)
        logger.info(f"Data saved successfully to {filename}")
        return filename
    except Exception as e:
        logger.error(f"An error occurred while saving {filename}: {e}")
        raise


def result_frame(set_ids, z: np.ndarray) -> pl.DataFrame:
    return pl.DataFrame({"set_id": list(set_ids), "z": np.asarray(z, dtype=np.int64)},
                        schema={"set_id": pl.Utf8, "z": pl.Int64})


def save_result(set_ids, z: np.ndarray, out_dir: Union[str, Path]) -> Path:
    """result.csv: one row per intervention set with its z value."""
    return save_to_csv(result_frame(set_ids, z), Path(out_dir) / RESULT_FILE)


def load_result(path: Union[str, Path], scenario: Scenario) -> np.ndarray:
    """
    Reads result.csv back into a z vector aligned with `scenario.sets`.

    Raises:
        ValueError: If a set is missing or a z value is not 0/1
    """
    df = pl.read_csv(path, schema={"set_id": pl.Utf8, "z": pl.Int64})
    values: Dict[str, int] = dict(zip(df["set_id"].to_list(), df["z"].to_list()))
    missing = [sid for sid in scenario.set_ids if sid not in values]
    if missing:
        raise ValueError(f"{path}: no z value for set(s) {', '.join(missing[:5])}")
    z = np.array([values[sid] for sid in scenario.set_ids], dtype=np.int64)
    if not np.isin(z, (0, 1)).all():
        raise ValueError(f"{path}: z values must be 0 or 1")
    return z


def save_report(report: ChangeReport, out_dir: Union[str, Path]) -> Path:
    return save_to_csv(report.to_frame(), Path(out_dir) / REPORT_FILE)


def save_summary(text: str, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / SUMMARY_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n")
    logger.info(f"Summary saved to {path}")
    return path


def selected_geojson(scenario: Scenario, z: np.ndarray) -> Dict:
    """Point features for the chosen sets, coordinates as [lon, lat]."""
    features = []
    for s, chosen in zip(scenario.sets, z):
        if not chosen:
            continue
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [s.longitude, s.latitude]},
            "properties": {
                "id": s.id,
                "counselors": s.counselors_f,
                "offers_ap": s.offers_ap_p,
                "offers_calc": s.offers_calc_c,
            },
        })
    return {"type": "FeatureCollection", "features": features}


def save_geojson(scenario: Scenario, z: np.ndarray, out_dir: Union[str, Path]) -> Path:
    path = Path(out_dir) / GEOJSON_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(selected_geojson(scenario, z), indent=2, sort_keys=True) + "\n")
    logger.info(f"Selected sets saved to {path}")
    return path


def save_comparison(frame: pl.DataFrame, out_dir: Union[str, Path]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    text_path = out_dir / COMPARE_TEXT
    csv_path = save_to_csv(frame, out_dir / COMPARE_CSV)
    text_path.write_text(comparison_text(frame) + "\n")
    return {"csv": csv_path, "text": text_path}


def save_artifacts(scenario: Scenario, z: np.ndarray, report: ChangeReport, summary: str,
                   out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Writes result.csv, report.csv, summary.txt and selected.geojson for one solve."""
    out_dir = Path(out_dir)
    return {
        "result": save_result(scenario.set_ids, z, out_dir),
        "report": save_report(report, out_dir),
        "summary": save_summary(summary, out_dir),
        "geojson": save_geojson(scenario, z, out_dir),
    }
