import csv
import io
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from pyspil.errors import UsageError
from pyspil.models import ExperimentConfig, TrainRecord
from pyspil.network import ParamVector

logger = logging.getLogger(__name__)

CURVE_COLUMNS = (
    "iter",
    "J",
    "p_s",
    "delta",
    "I",
    "lambda",
    "grad_J_norm",
    "grad_Phi_norm",
    "wallclock_s",
)
CURVE_FILE = "curve.csv"
CONFIG_FILE = "config.toml"


def _curve_row(record: TrainRecord) -> List[str]:
    row = record.model_dump(by_alias=True)
    return [str(row["iter"])] + [repr(float(row[c])) for c in CURVE_COLUMNS[1:]]


def format_curve(records: Iterable[TrainRecord]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    writer.writerows(_curve_row(r) for r in records)
    return buffer.getvalue()


def parse_curve(text: str) -> List[TrainRecord]:
    """Records of a curve file; the header must match and iterations must increase."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != CURVE_COLUMNS:
        raise UsageError(f"unexpected curve header {header}")
    records = []
    for row in reader:
        if not row:
            continue
        if len(row) != len(CURVE_COLUMNS):
            raise UsageError(f"curve row has {len(row)} fields, expected {len(CURVE_COLUMNS)}")
        record = TrainRecord.model_validate(dict(zip(CURVE_COLUMNS, row)))
        if records and record.iteration <= records[-1].iteration:
            raise UsageError(f"iteration {record.iteration} does not increase")
        records.append(record)
    return records


def mean_curve(runs: Sequence[Sequence[TrainRecord]]) -> List[TrainRecord]:
    """Per-iteration mean of several runs' curves, up to the shortest run."""
    length = min((len(records) for records in runs), default=0)
    mean = []
    for k in range(length):
        rows = np.array([[float(v) for v in records[k].model_dump().values()] for records in runs])
        fields = dict(zip(TrainRecord.model_fields, rows.mean(axis=0)))
        fields["iteration"] = runs[0][k].iteration
        mean.append(TrainRecord(**fields))
    return mean


def write_curve(records: Iterable[TrainRecord], path: Union[str, Path]) -> None:
    Path(path).write_text(format_curve(records))


def read_curve(path: Union[str, Path]) -> List[TrainRecord]:
    return parse_curve(Path(path).read_text())


class RunDirectory:
    """Output folder of one training run: config copy, learning curve and checkpoints.

    Used as a context manager; the curve is appended row by row while training runs
    so a failed run still leaves its partial curve behind.

        with RunDirectory(path, checkpoint_interval=100) as run:
            result = train(..., on_iteration=run.on_iteration)
            run.finish(result.actor, result.critic)
    """

    def __init__(self, path: Union[str, Path], checkpoint_interval: int = 0):
        self.path = Path(path)
        self.checkpoint_interval = checkpoint_interval
        self._curve = None
        self._writer = None

    @property
    def curve_path(self) -> Path:
        return self.path / CURVE_FILE

    @property
    def checkpoint_dir(self) -> Path:
        return self.path / "checkpoints"

    def __enter__(self) -> "RunDirectory":
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self._curve = open(self.curve_path, "w", newline="")
        self._writer = csv.writer(self._curve, lineterminator="\n")
        self._writer.writerow(CURVE_COLUMNS)
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._curve is not None:
            self._curve.close()
            self._curve = None
        return False

    def write_config(self, config: ExperimentConfig) -> Path:
        path = self.path / CONFIG_FILE
        self.path.mkdir(parents=True, exist_ok=True)
        path.write_text(config.dumps())
        return path

    def checkpoint(self, label: Union[int, str], actor: ParamVector, critic: ParamVector) -> Path:
        actor_path = self.checkpoint_dir / f"actor_{label}.params"
        actor.save(actor_path)
        critic.save(self.checkpoint_dir / f"critic_{label}.params")
        logger.debug("checkpoint %s written to %s", label, self.checkpoint_dir)
        return actor_path

    def on_iteration(self, k: int, actor: ParamVector, critic: ParamVector, record: TrainRecord) -> None:
        if self._writer is None:
            raise UsageError("RunDirectory must be entered before training")
        self._writer.writerow(_curve_row(record))
        if self.checkpoint_interval and (k + 1) % self.checkpoint_interval == 0:
            self.checkpoint(k + 1, actor, critic)

    def finish(self, actor: ParamVector, critic: ParamVector) -> Path:
        """Write the final checkpoint and flush the curve; returns the final actor path."""
        if self._curve is not None:
            self._curve.flush()
        return self.checkpoint("final", actor, critic)


def write_episodes(path: Union[str, Path], returns, safe) -> None:
    """Per-episode evaluation table: episode index, discounted return, joint safety flag."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["episode", "return", "safe"])
    for i, (ret, ok) in enumerate(zip(returns, safe)):
        writer.writerow([i, repr(float(ret)), int(bool(ok))])
    Path(path).write_text(buffer.getvalue())
