"""
Progress and loss tracking for training runs and batch jobs.
"""

import csv
import sys
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Tuple, Union

try:
    from tqdm import tqdm

    TQDM_AVAILABLE = True
except ImportError:
    TQDM_AVAILABLE = False

LOSS_WINDOW = 100


def _format_eta(seconds: float) -> str:
    if seconds < 60:
        return f"{seconds:.0f}s"
    return f"{seconds / 60:.1f}m"


def _write_status(message: str) -> None:
    if TQDM_AVAILABLE:
        tqdm.write(message, file=sys.stderr)
    else:
        print(message, file=sys.stderr, flush=True)


@dataclass
class ProgressTracker:
    """Item counter with rate and ETA for translation and evaluation batches."""

    total: int
    label: str = "Progress"
    quiet: bool = False
    processed: int = 0
    failed: int = 0
    start_time: float = field(default_factory=time.time)
    last_update: float = field(default_factory=time.time)

    def update(self, success: bool = True) -> None:
        """Increment counters and display at milestones."""
        self.processed += 1
        if not success:
            self.failed += 1

        # Every 10 items, at completion, or every 5 seconds
        current_time = time.time()
        if (
            self.processed % 10 == 0
            or self.processed == self.total
            or current_time - self.last_update > 5
        ):
            self.show_progress()
            self.last_update = current_time

    def show_progress(self) -> None:
        if self.quiet:
            return
        elapsed = time.time() - self.start_time
        rate = self.processed / elapsed if elapsed > 0 else 0.0
        remaining = self.total - self.processed
        eta = remaining / rate if rate > 0 else 0.0
        percent = (self.processed / self.total * 100) if self.total > 0 else 0

        _write_status(
            f"  {self.label}: {self.processed}/{self.total} ({percent:.1f}%) | "
            f"Failed: {self.failed} | Rate: {rate:.2f}/s | ETA: {_format_eta(eta)}"
        )

    def final_stats(self) -> Dict[str, Any]:
        elapsed = time.time() - self.start_time
        success_rate = (
            ((self.processed - self.failed) / self.processed * 100)
            if self.processed > 0
            else 0
        )
        return {
            "total": self.total,
            "processed": self.processed,
            "failed": self.failed,
            "success_rate": success_rate,
            "elapsed_time": elapsed,
            "rate": self.processed / elapsed if elapsed > 0 else 0,
        }


@dataclass
class TrainingTracker:
    """
    Loss curve bookkeeping for the denoiser training loop.

    Keeps every (iteration, loss, lr) row for the CSV loss log and a sliding
    window for the smoothed loss shown in progress lines.
    """

    total: int
    log_every: int = 100
    window: int = LOSS_WINDOW
    quiet: bool = False
    rows: List[Tuple[int, float, float]] = field(default_factory=list)
    start_time: float = field(default_factory=time.time)
    _recent: Deque[float] = field(default_factory=deque, repr=False)

    def update(self, iteration: int, loss: float, lr: float) -> None:
        self.rows.append((iteration, float(loss), float(lr)))
        self._recent.append(float(loss))
        if len(self._recent) > self.window:
            self._recent.popleft()

        if self.log_every and (
            iteration % self.log_every == 0 or iteration == self.total
        ):
            self.show_progress(iteration)

    @property
    def iterations(self) -> int:
        return len(self.rows)

    def smoothed_loss(self) -> float:
        if not self._recent:
            return float("nan")
        return sum(self._recent) / len(self._recent)

    def smoothed_at(self, iteration: int) -> float:
        """Mean loss over the window ending at ``iteration`` (1-based)."""
        losses = [loss for it, loss, _ in self.rows if it <= iteration]
        if not losses:
            raise ValueError(f"no losses recorded up to iteration {iteration}")
        tail = losses[-self.window :]
        return sum(tail) / len(tail)

    def show_progress(self, iteration: int) -> None:
        if self.quiet:
            return
        elapsed = time.time() - self.start_time
        rate = iteration / elapsed if elapsed > 0 else 0.0
        eta = (self.total - iteration) / rate if rate > 0 else 0.0
        lr = self.rows[-1][2] if self.rows else 0.0
        _write_status(
            f"  Iter {iteration}/{self.total} | loss {self.smoothed_loss():.4f} "
            f"| lr {lr:.2e} | {rate:.2f} it/s | ETA: {_format_eta(eta)}"
        )

    def write_csv(self, path: Union[str, Path]) -> Path:
        output = Path(path)
        output.parent.mkdir(parents=True, exist_ok=True)
        with open(output, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["iter", "loss", "lr"])
            for iteration, loss, lr in self.rows:
                writer.writerow([iteration, repr(loss), repr(lr)])
        return output

    def final_stats(self) -> Dict[str, Any]:
        elapsed = time.time() - self.start_time
        return {
            "iterations": self.iterations,
            "final_smoothed_loss": self.smoothed_loss(),
            "elapsed_time": elapsed,
            "rate": self.iterations / elapsed if elapsed > 0 else 0,
        }
