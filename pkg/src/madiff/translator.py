"""
Cross-domain translation by latent-code reuse.

A source image is pushed K steps into the forward process and walked back
down under the source condition; the per-step latent codes recorded on the
way are replayed while denoising under the target condition. Mask-preserving
generation pins selected pixels to a preservation chain at every step, and
component-aware schedules release facial components at their own time.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .codecs import check_binary
from .config import DEFAULT_ALPHA, DEFAULT_T_C, RunConfig, scale_steps
from .denoiser import DOMAIN_ALIASES, ConditionId, EpsPredictor, predict_eps
from .errors import RangeError, ShapeError, UnknownConditionError, ValidationError
from .geometry import (
    BlendItem,
    ComponentSpec,
    LandmarkSet,
    assemble_alpha,
    blend,
    build_warp,
    cam_mask,
    complement,
    component_masks_from_landmarks,
    multi_blend,
    warp_image,
    warp_mask,
)
from .logging_config import get_logger
from .numerics import DTYPE, RngState, Tensor, derive_substream, sample_gaussian, seeded_rng
from .scheduler import (
    Schedule,
    ddim_timesteps,
    forward_sample,
    inversion_step,
    mu_f,
    posterior_sample,
    sigma,
    skip_step,
)

logger = get_logger(__name__)

ENCODE_VARIANTS = ("posterior", "marginal")
CAM_MODES = ("default", "off", "literal")


@dataclass(frozen=True)
class LatentTrajectory:
    """
    Encoding of one image: the chain x_K .. x_0 and the codes that let the
    reverse process reproduce it.

    ``codes[t]`` holds z_t for steps with sigma_t > 0. Steps with sigma_t = 0
    keep the raw offset ``x_{t-1} - mu_f`` in ``residuals[t]`` instead.
    """

    K: int
    gamma: float
    cond: ConditionId
    x0: Tensor
    eps_K: Optional[Tensor]
    states: Tuple[Tensor, ...]  # states[K - t] == x_t
    codes: Dict[int, Tensor] = field(default_factory=dict)
    residuals: Dict[int, Tensor] = field(default_factory=dict)

    def state(self, t: int) -> Tensor:
        if not 0 <= t <= self.K:
            raise RangeError(f"trajectory holds steps 0..{self.K}, asked for {t}")
        return self.states[self.K - t]

    @property
    def stochastic_steps(self) -> int:
        return len(self.codes)


@dataclass(frozen=True)
class Preservation:
    """Chain whose states are pasted wherever the step mask is 1."""

    chain: LatentTrajectory
    background: Tensor
    components: Tuple[ComponentSpec, ...] = ()

    def mask_at(self, t: int) -> Tensor:
        return cam_mask(t, self.components, self.background)


@dataclass(frozen=True)
class TranslationJob:
    source: Tensor
    l_so: ConditionId
    l_ta: ConditionId
    K: int
    gamma: float = 1.0
    preserve_mask: Optional[Tensor] = None
    components: Tuple[ComponentSpec, ...] = ()
    blend_target: Optional[Tensor] = None
    seed: int = 0
    encode_variant: str = "posterior"
    cam: str = "default"

    def __post_init__(self):
        source = np.asarray(self.source, dtype=DTYPE)
        if source.ndim != 3:
            raise ShapeError(f"source must be H x W x C, got {source.shape}")
        if self.K < 0:
            raise RangeError(f"K must be >= 0, got {self.K}")
        if not 0.0 <= self.gamma <= 1.0:
            raise RangeError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.encode_variant not in ENCODE_VARIANTS:
            raise ValidationError(f"unknown encode variant '{self.encode_variant}'")
        if self.cam not in CAM_MODES:
            raise ValidationError(f"unknown cam mode '{self.cam}'")
        if self.preserve_mask is not None:
            mask = check_binary(self.preserve_mask, "preserve mask")
            if mask.shape != source.shape[:2]:
                raise ShapeError(f"preserve mask {mask.shape} does not match image {source.shape[:2]}")
        for spec in self.components:
            if spec.mask.shape != source.shape[:2]:
                raise ShapeError(f"component mask '{spec.name}' does not match the image")
        if self.blend_target is not None and np.shape(self.blend_target) != source.shape:
            raise ShapeError("blend target must have the source image shape")


@dataclass(frozen=True)
class TranslationOptions:
    """Per-task knobs; ``from_config`` resolves them from a RunConfig."""

    K: int = 180
    gamma: float = 1.0
    seed: int = 0
    encode_variant: str = "posterior"
    cam: str = "default"
    t_c: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_T_C))
    alpha: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_ALPHA))
    constraint_scope: str = "overlap"
    ddim_steps: int = 20
    l_so: Optional[ConditionId] = None
    l_ta: Optional[ConditionId] = None

    @classmethod
    def from_config(
        cls, config: RunConfig, T: Optional[int] = None, **overrides
    ) -> "TranslationOptions":
        """Step counts are scaled to ``T`` (the model's schedule), else to the configured one."""
        K, t_c = scale_steps(config.translation.K, config.translation.t_c, T or config.schedule.T)
        settings = config.translation
        values = dict(
            K=K,
            gamma=settings.gamma,
            seed=config.translation_seed(),
            encode_variant=settings.encode_variant,
            cam=settings.cam,
            t_c=t_c,
            alpha=dict(settings.alpha),
            constraint_scope=settings.constraint_scope,
            ddim_steps=settings.ddim_steps,
        )
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class ReferenceSpec:
    """One reference of a multi-reference job; ``mask`` is in the reference frame."""

    image: Tensor
    landmarks: LandmarkSet
    mask: Optional[Tensor] = None
    alpha: Union[float, Mapping[str, float]] = 0.8


# ---------------------------------------------------------------------------
# Encoding and generation
# ---------------------------------------------------------------------------


def _sample_chain(
    x0: Tensor, K: int, rng: RngState, variant: str, s: Schedule
) -> Tuple[Optional[Tensor], List[Tensor]]:
    """x_K .. x_0 drawn from the forward process; the draw order is shared by every chain."""
    x0 = np.asarray(x0, dtype=DTYPE)
    if K == 0:
        return None, [x0.copy()]
    eps_K, rng = sample_gaussian(rng, x0.shape)
    x_t = forward_sample(x0, K, eps_K, s)
    states = [x_t]
    for t in range(K, 0, -1):
        if variant == "posterior":
            x_t, rng = posterior_sample(x0, x_t, t, s, rng)
        elif t == 1:
            x_t = x0.copy()
        else:
            noise, rng = sample_gaussian(rng, x0.shape)
            x_t = forward_sample(x0, t - 1, noise, s)
        states.append(x_t)
    return eps_K, states


def encode(
    x0: Tensor,
    l_so: ConditionId,
    K: int,
    gamma: float,
    model: EpsPredictor,
    rng: RngState,
    variant: str = "posterior",
) -> LatentTrajectory:
    """Record the latent codes z_t = (x_{t-1} - mu_f(x_t, t, l_so)) / sigma_t for t = K..1."""
    s = model.schedule
    if not 0 <= K <= s.T:
        raise RangeError(f"K must lie in [0, {s.T}], got {K}")
    if variant not in ENCODE_VARIANTS:
        raise ValidationError(f"unknown encode variant '{variant}'")
    x0 = np.asarray(x0, dtype=DTYPE)
    eps_K, states = _sample_chain(x0, K, rng, variant, s)

    codes: Dict[int, Tensor] = {}
    residuals: Dict[int, Tensor] = {}
    for t in range(K, 0, -1):
        x_t = states[K - t]
        x_prev = states[K - t + 1]
        mean = mu_f(x_t, predict_eps(model, x_t, t, l_so), t, gamma, s)
        sig = sigma(t, gamma, s)
        if sig > 0.0:
            codes[t] = (x_prev - mean) / sig
        else:
            residuals[t] = x_prev - mean
    return LatentTrajectory(K, float(gamma), l_so, x0, eps_K, tuple(states), codes, residuals)


def initial_state(init: Optional[Tensor], traj: LatentTrajectory, s: Schedule) -> Tensor:
    """
    x_hat_K: the init noised with the trajectory's own eps_K.

    Without an init (only allowed at K = T) generation starts from the encoded
    x_T, so replaying the codes under the encoding condition returns x0 exactly.
    """
    if init is None:
        if traj.K != s.T or traj.eps_K is None:
            raise ValidationError("an initial image is required unless K equals T")
        return np.array(traj.state(traj.K), copy=True)
    if traj.K == 0:
        return np.array(init, dtype=DTYPE, copy=True)
    return forward_sample(init, traj.K, traj.eps_K, s)


def generate(
    init: Optional[Tensor],
    l_ta: ConditionId,
    traj: LatentTrajectory,
    model: EpsPredictor,
    preserve: Optional[Preservation] = None,
) -> Tensor:
    """Denoise from x_hat_K under ``l_ta`` replaying the trajectory's codes."""
    s = model.schedule
    x_hat = initial_state(init, traj, s)
    for t in range(traj.K, 0, -1):
        mean = mu_f(x_hat, predict_eps(model, x_hat, t, l_ta), t, traj.gamma, s)
        sig = sigma(t, traj.gamma, s)
        if sig > 0.0:
            if t not in traj.codes:
                raise ValidationError(f"trajectory has no latent code for stochastic step {t}")
            proposal = mean + sig * traj.codes[t]
        else:
            if t not in traj.residuals:
                raise ValidationError(f"trajectory has no residual for deterministic step {t}")
            proposal = mean + traj.residuals[t]

        if preserve is None:
            x_hat = proposal
        else:
            m = preserve.mask_at(t)[:, :, None]
            x_hat = m * preserve.chain.state(t - 1) + (1.0 - m) * proposal
    return x_hat


def run_job(job: TranslationJob, model: EpsPredictor) -> Tensor:
    """Encode the source under l_so, then regenerate under l_ta from the job's init."""
    source = np.asarray(job.source, dtype=DTYPE)
    vocabulary = model.vocabulary
    logger.debug(
        f"Translation job: {job.l_so.describe(vocabulary)} -> {job.l_ta.describe(vocabulary)}, "
        f"K={job.K}, gamma={job.gamma}, seed={job.seed}, cam={job.cam}, "
        f"components={[c.name for c in job.components]}"
    )
    enc_rng = derive_substream(seeded_rng(job.seed), 0)
    traj = encode(source, job.l_so, job.K, job.gamma, model, enc_rng, job.encode_variant)

    if job.blend_target is None:
        init = source
        chain = traj
        components: Tuple[ComponentSpec, ...] = job.components
    else:
        init = np.asarray(job.blend_target, dtype=DTYPE)
        if job.cam == "literal":
            chain = traj
        else:
            eps_K, states = _sample_chain(init, job.K, enc_rng, job.encode_variant, model.schedule)
            chain = LatentTrajectory(
                job.K, job.gamma, job.l_so, init, eps_K, tuple(states)
            )
        components = () if job.cam == "off" else job.components

    if job.preserve_mask is None and not components:
        return generate(init, job.l_ta, traj, model)
    background = (
        check_binary(job.preserve_mask)
        if job.preserve_mask is not None
        else np.zeros(source.shape[:2], dtype=DTYPE)
    )
    preserve = Preservation(chain, background, tuple(components))
    return generate(init, job.l_ta, traj, model, preserve)


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------


def translate(
    x0: Tensor,
    l_so: ConditionId,
    l_ta: ConditionId,
    opts: TranslationOptions,
    model: EpsPredictor,
    mask: Optional[Tensor] = None,
) -> Tensor:
    """Last-K translation; ``mask`` pixels are kept from the source chain."""
    job = TranslationJob(
        source=np.asarray(x0, dtype=DTYPE),
        l_so=l_so,
        l_ta=l_ta,
        K=opts.K,
        gamma=opts.gamma,
        preserve_mask=mask,
        seed=opts.seed,
        encode_variant=opts.encode_variant,
    )
    return run_job(job, model)


def beauty_filter(x0: Tensor, opts: TranslationOptions, model: EpsPredictor, mask=None) -> Tensor:
    return translate(x0, ConditionId.non_makeup(), ConditionId.makeup(), opts, model, mask)


def makeup_removal(x0: Tensor, opts: TranslationOptions, model: EpsPredictor, mask=None) -> Tensor:
    return translate(x0, ConditionId.makeup(), ConditionId.non_makeup(), opts, model, mask)


def resolve_descriptor(name: str, vocabulary: Sequence[str]) -> ConditionId:
    """A tag name, ``tag:<name>``, or a domain descriptor such as ``nomakeup``."""
    text = name.strip()
    if text.startswith("tag:"):
        return ConditionId.parse(text, vocabulary)
    if text in vocabulary:
        return ConditionId.tag(list(vocabulary).index(text))
    if text in DOMAIN_ALIASES:
        return ConditionId(DOMAIN_ALIASES[text])
    raise UnknownConditionError(text, vocabulary)


def text_modify(
    x0: Tensor,
    from_tag: str,
    to_tag: str,
    opts: TranslationOptions,
    model: EpsPredictor,
    mask: Optional[Tensor] = None,
) -> Tensor:
    """
    Translate between two text descriptors. With ``mask`` given, only the
    masked region is edited; everything else is pinned to the source chain.
    """
    l_so = resolve_descriptor(from_tag, model.vocabulary)
    l_ta = resolve_descriptor(to_tag, model.vocabulary)
    preserve = None if mask is None else complement(mask)
    return translate(x0, l_so, l_ta, opts, model, preserve)


def build_components(
    masks: Mapping[str, Tensor],
    opts: TranslationOptions,
    alpha: Optional[Mapping[str, float]] = None,
) -> Tuple[ComponentSpec, ...]:
    """ComponentSpecs from per-component masks using the option defaults."""
    weights = dict(opts.alpha)
    if alpha:
        weights.update(alpha)
    specs = []
    for name, mask in masks.items():
        if name not in opts.t_c:
            raise ValidationError(f"no CAM start time configured for component '{name}'")
        specs.append(ComponentSpec(name, check_binary(mask), float(weights.get(name, 0.8)), int(opts.t_c[name])))
    return tuple(specs)


def _default_components(
    src_lm: LandmarkSet, shape: Tuple[int, int], opts: TranslationOptions
) -> Tuple[ComponentSpec, ...]:
    names = [name for name in opts.t_c]
    return build_components(component_masks_from_landmarks(src_lm, shape, names), opts)


def prepare_transfer(
    source: Tensor,
    reference: Tensor,
    src_lm: LandmarkSet,
    ref_lm: LandmarkSet,
    components: Sequence[ComponentSpec],
) -> Tuple[Tensor, Tensor]:
    """Blend target x'_0 and the warp validity (face hull in the source frame)."""
    source = np.asarray(source, dtype=DTYPE)
    warp_map = build_warp(src_lm, ref_lm, source.shape[:2])
    warped = warp_image(warp_map, reference)
    validity = warp_map.validity
    alpha = assemble_alpha(components, validity)
    return blend(source, warped, alpha), validity


def _transfer_job(
    source: Tensor,
    x_blend: Tensor,
    validity: Tensor,
    components: Sequence[ComponentSpec],
    opts: TranslationOptions,
    l_so: ConditionId,
    l_ta: ConditionId,
) -> TranslationJob:
    return TranslationJob(
        source=np.asarray(source, dtype=DTYPE),
        l_so=l_so,
        l_ta=l_ta,
        K=opts.K,
        gamma=opts.gamma,
        preserve_mask=complement(validity),
        components=tuple(components),
        blend_target=x_blend,
        seed=opts.seed,
        encode_variant=opts.encode_variant,
        cam=opts.cam,
    )


def makeup_transfer(
    source: Tensor,
    reference: Tensor,
    src_lm: LandmarkSet,
    ref_lm: LandmarkSet,
    components: Optional[Sequence[ComponentSpec]],
    opts: TranslationOptions,
    model: EpsPredictor,
) -> Tensor:
    """
    Single-reference transfer: warp and blend the reference into the source,
    encode the source under non-makeup, regenerate under makeup from the
    blend with component-aware masks and the background kept.
    """
    source = np.asarray(source, dtype=DTYPE)
    if components is None:
        components = _default_components(src_lm, source.shape[:2], opts)
    x_blend, validity = prepare_transfer(source, reference, src_lm, ref_lm, components)
    job = _transfer_job(
        source,
        x_blend,
        validity,
        components,
        opts,
        opts.l_so or ConditionId.non_makeup(),
        opts.l_ta or ConditionId.makeup(),
    )
    return run_job(job, model)


def multi_blend_target(
    source: Tensor,
    src_lm: LandmarkSet,
    refs: Sequence[ReferenceSpec],
    components: Sequence[ComponentSpec],
    scope: str = "overlap",
) -> Tuple[Tensor, Tensor]:
    """Multi-reference blend target and the union of warp validities."""
    source = np.asarray(source, dtype=DTYPE)
    shape = source.shape[:2]
    items = []
    validity = np.zeros(shape, dtype=DTYPE)
    for index, ref in enumerate(refs):
        image = np.asarray(ref.image, dtype=DTYPE)
        warp_map = build_warp(src_lm, ref.landmarks, shape)
        mask = np.ones(image.shape[:2]) if ref.mask is None else check_binary(ref.mask, f"reference {index} mask")
        if mask.shape != image.shape[:2]:
            raise ShapeError(f"reference {index}: mask {mask.shape} does not match image {image.shape[:2]}")
        if isinstance(ref.alpha, Mapping):
            weights = {str(k): float(v) for k, v in ref.alpha.items()}
        else:
            weights = {c.name: float(ref.alpha) for c in components}
        alpha = assemble_alpha(
            [ComponentSpec(c.name, c.mask, weights.get(c.name, 0.0), c.t_c) for c in components]
        )
        items.append(
            BlendItem(
                warped_content=warp_image(warp_map, mask[:, :, None] * image),
                warped_mask=warp_mask(warp_map, mask),
                alpha=alpha,
            )
        )
        validity = np.maximum(validity, warp_map.validity)
    return multi_blend(source, items, scope), validity


def multi_makeup_transfer(
    source: Tensor,
    src_lm: LandmarkSet,
    refs: Sequence[ReferenceSpec],
    opts: TranslationOptions,
    model: EpsPredictor,
    components: Optional[Sequence[ComponentSpec]] = None,
) -> Tensor:
    """Transfer from several references, each restricted to its own mask."""
    if not refs:
        raise ValidationError("multi-reference transfer needs at least one reference")
    source = np.asarray(source, dtype=DTYPE)
    if components is None:
        components = _default_components(src_lm, source.shape[:2], opts)
    x_blend, validity = multi_blend_target(source, src_lm, refs, components, opts.constraint_scope)
    job = _transfer_job(
        source,
        x_blend,
        validity,
        components,
        opts,
        opts.l_so or ConditionId.non_makeup(),
        opts.l_ta or ConditionId.makeup(),
    )
    return run_job(job, model)


def reference_makeup_removal(
    makeup_img: Tensor,
    reference_plain: Tensor,
    src_lm: LandmarkSet,
    ref_lm: LandmarkSet,
    opts: TranslationOptions,
    model: EpsPredictor,
    components: Optional[Sequence[ComponentSpec]] = None,
) -> Tensor:
    """Removal guided by a bare-faced reference: blend it in, then translate makeup -> non-makeup."""
    source = np.asarray(makeup_img, dtype=DTYPE)
    if components is None:
        components = _default_components(src_lm, source.shape[:2], opts)
    x_blend, validity = prepare_transfer(source, reference_plain, src_lm, ref_lm, components)
    job = _transfer_job(
        source,
        x_blend,
        validity,
        components,
        opts,
        ConditionId.makeup(),
        ConditionId.non_makeup(),
    )
    return run_job(job, model)


# ---------------------------------------------------------------------------
# Deterministic skipping sampler (ablation path)
# ---------------------------------------------------------------------------


def ddim_translate(
    x0: Tensor,
    l_so: ConditionId,
    l_ta: ConditionId,
    n_steps: int,
    K: int,
    model: EpsPredictor,
) -> Tensor:
    """Deterministic inversion to K under l_so, then skip-step generation under l_ta."""
    s = model.schedule
    if not 1 <= K <= s.T:
        raise RangeError(f"K must lie in [1, {s.T}], got {K}")
    descending = ddim_timesteps(n_steps, K)

    x = np.asarray(x0, dtype=DTYPE)
    previous = 0
    for t in reversed(descending):
        x = inversion_step(x, predict_eps(model, x, t, l_so), previous, t, s)
        previous = t

    for index, t in enumerate(descending):
        t_prev = descending[index + 1] if index + 1 < len(descending) else 0
        x = skip_step(x, predict_eps(model, x, t, l_ta), t, t_prev, s)
    return x


def ddim_makeup_transfer(
    source: Tensor,
    reference: Tensor,
    src_lm: LandmarkSet,
    ref_lm: LandmarkSet,
    components: Optional[Sequence[ComponentSpec]],
    opts: TranslationOptions,
    model: EpsPredictor,
) -> Tensor:
    """Makeup transfer where the last-K chain is replaced by DDIM inversion and skipping."""
    source = np.asarray(source, dtype=DTYPE)
    if components is None:
        components = _default_components(src_lm, source.shape[:2], opts)
    x_blend, _ = prepare_transfer(source, reference, src_lm, ref_lm, components)
    return ddim_translate(
        x_blend,
        opts.l_so or ConditionId.non_makeup(),
        opts.l_ta or ConditionId.makeup(),
        opts.ddim_steps,
        opts.K,
        model,
    )
