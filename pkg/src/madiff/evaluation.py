"""
Evaluation protocols over a sprite corpus: removal after transfer, transfer
quality with the style-shift KID, and the K sweep.
"""

import dataclasses
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .codecs import dequantize
from .dataset import DatasetManifest, SpriteSample, load_sample
from .denoiser import ConditionKind, EpsPredictor
from .errors import ValidationError
from .logging_config import get_logger
from .metrics import MetricReport, feature_shift_eval, psnr, ssim, to_pixels
from .numerics import derive_substream, seeded_rng
from .trackers import ProgressTracker
from .translator import (
    TranslationOptions,
    build_components,
    makeup_removal,
    makeup_transfer,
    reference_makeup_removal,
)


def job_seed(seed: int, index: int) -> int:
    """Per-item seed derived from the run seed."""
    return derive_substream(seeded_rng(seed), index).stream


class Evaluator:
    """
    Runs the evaluation protocols for one model and corpus.

    Items pair the i-th non-makeup sprite with the i-th makeup sprite (cycling
    the shorter list) up to ``max_pairs`` pairs. Each item gets its own seed
    derived from ``options.seed``, so reports are reproducible item by item.
    """

    def __init__(
        self,
        model: EpsPredictor,
        manifest: DatasetManifest,
        options: TranslationOptions,
        max_pairs: int = 10,
        quiet: bool = True,
    ):
        self.logger = get_logger(__name__)
        self.model = model
        self.manifest = manifest
        self.options = options
        self.quiet = quiet

        plain = manifest.by_domain(ConditionKind.NON_MAKEUP)
        makeup = manifest.by_domain(ConditionKind.MAKEUP)
        if not plain or not makeup:
            raise ValidationError("evaluation needs sprites from both domains")
        count = min(max(len(plain), len(makeup)), max_pairs)
        if count < 1:
            raise ValidationError(f"max_pairs must be >= 1, got {max_pairs}")
        self.pairs: List[Tuple[SpriteSample, SpriteSample]] = [
            (
                load_sample(manifest, plain[i % len(plain)]),
                load_sample(manifest, makeup[i % len(makeup)]),
            )
            for i in range(count)
        ]
        self._plain = plain

    def _options(self, index: int, **changes) -> TranslationOptions:
        return dataclasses.replace(self.options, seed=job_seed(self.options.seed, index), **changes)

    def transfer(self, index: int, options: Optional[TranslationOptions] = None) -> np.ndarray:
        source, reference = self.pairs[index]
        opts = options or self._options(index)
        components = build_components(source.masks, opts)
        return makeup_transfer(
            source.image,
            reference.image,
            source.landmarks,
            reference.landmarks,
            components,
            opts,
            self.model,
        )

    def _protocol(self, task: str, **extra) -> Dict[str, Any]:
        return {
            "task": task,
            "pairs": len(self.pairs),
            "K": self.options.K,
            "gamma": self.options.gamma,
            "seed": self.options.seed,
            "cam": self.options.cam,
            **extra,
        }

    def evaluate_removal(self, with_reference: bool = False) -> MetricReport:
        """Transfer makeup onto each source, remove it again and compare with the source."""
        report = MetricReport(protocol=self._protocol("removal", with_reference=with_reference))
        tracker = ProgressTracker(total=len(self.pairs), label="Removal", quiet=self.quiet)
        for index, (source, _) in enumerate(self.pairs):
            opts = self._options(index)
            transferred = self.transfer(index, opts)
            if with_reference:
                plain = load_sample(self.manifest, self._plain[(index + 1) % len(self._plain)])
                restored = reference_makeup_removal(
                    transferred,
                    plain.image,
                    source.landmarks,
                    plain.landmarks,
                    opts,
                    self.model,
                    build_components(source.masks, opts),
                )
            else:
                restored = makeup_removal(transferred, opts, self.model)
            original = to_pixels(source.image)
            report.add("ssim", ssim(to_pixels(restored), original))
            report.add("psnr", psnr(to_pixels(restored), original))
            tracker.update()
        self.logger.info(
            f"Removal evaluation: SSIM {report.summary('ssim')['mean']:.4f}, "
            f"PSNR {report.summary('psnr')['mean']:.2f} dB over {len(self.pairs)} pairs"
        )
        return report

    def _removal_pixels(self, pixels: np.ndarray) -> np.ndarray:
        opts = self._options(len(self.pairs))
        return to_pixels(makeup_removal(dequantize(pixels), opts, self.model))

    def _style_shift(self, transferred: Sequence[np.ndarray]) -> float:
        shift = feature_shift_eval(
            [to_pixels(source.image) for source, _ in self.pairs],
            [to_pixels(reference.image) for _, reference in self.pairs],
            [to_pixels(x) for x in transferred],
            self._removal_pixels,
        )
        return shift.values["style_shift_kid"][0]

    def evaluate_transfer(self) -> MetricReport:
        """Identity SSIM/PSNR per pair plus the style-shift KID of the whole set."""
        if len(self.pairs) < 2:
            raise ValidationError("transfer evaluation needs at least 2 pairs for KID")
        report = MetricReport(protocol=self._protocol("transfer", extractor="color_histogram_8"))
        tracker = ProgressTracker(total=len(self.pairs), label="Transfer", quiet=self.quiet)
        transferred = []
        for index, (source, _) in enumerate(self.pairs):
            output = self.transfer(index)
            transferred.append(output)
            report.add("identity_ssim", ssim(to_pixels(output), to_pixels(source.image)))
            report.add("identity_psnr", psnr(to_pixels(output), to_pixels(source.image)))
            tracker.update()
        report.add("style_shift_kid", self._style_shift(transferred))
        return report

    def sweep_k(self, k_list: Sequence[int]) -> Dict[str, Any]:
        """One row per K with the mean identity SSIM and the style-shift KID."""
        if not k_list:
            raise ValidationError("the K list is empty")
        if len(self.pairs) < 2:
            raise ValidationError("a K sweep needs at least 2 pairs for KID")
        rows = []
        for K in sorted(set(int(k) for k in k_list)):
            transferred = [
                self.transfer(index, self._options(index, K=K)) for index in range(len(self.pairs))
            ]
            identity = [
                ssim(to_pixels(x), to_pixels(source.image))
                for x, (source, _) in zip(transferred, self.pairs)
            ]
            row = {
                "K": K,
                "identity_ssim": float(np.mean(identity)),
                "style_shift_kid": self._style_shift(transferred),
            }
            self.logger.info(
                f"K={K}: identity SSIM {row['identity_ssim']:.4f}, style-shift KID {row['style_shift_kid']:.6g}"
            )
            rows.append(row)
        return {"rows": rows, "protocol": self._protocol("sweep-k", k_list=[r["K"] for r in rows])}
