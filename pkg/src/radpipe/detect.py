"""Downstream detector: per-class confidence maps over the RA grid.

Ground-truth maps are Gaussian bumps with range-scaled width, compared to
predictions with a summed binary cross-entropy. The decoder is a small MLP
on top of the transferred radar encoder, optionally fused with pooled
semantic-depth features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .citymodel import SDM
from .nn import (
    MlpParams,
    TrainingDivergedError,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_forward_cached,
    pool_to,
    sgd_step,
)

CLASS_ORDER = ("pedestrian", "cyclist", "car")
CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class GtAnnotation:
    """One annotated object in sensor polar coordinates."""

    frame_id: str
    class_label: str
    range_m: float
    azimuth_rad: float

    def __post_init__(self):
        if self.class_label not in CLASS_ORDER:
            raise ValueError(f"unknown class {self.class_label!r}")


@dataclass(frozen=True)
class KappaTable:
    """Per-class location error tolerance (relative to range)."""

    kappa: dict[str, float] = field(
        default_factory=lambda: {"pedestrian": 0.01, "cyclist": 0.015, "car": 0.02}
    )

    def __post_init__(self):
        for label, value in self.kappa.items():
            if not value > 0:
                raise ValueError(f"kappa[{label!r}] must be > 0, got {value}")

    def for_class(self, label: str) -> float:
        return self.kappa[label]


@dataclass
class ConfMaps:
    """Per-class confidence grids in [0, 1] over (range bin, azimuth bin)."""

    grid: np.ndarray  # (n_classes, n_range, n_azimuth)
    class_order: tuple[str, ...] = CLASS_ORDER

    def __post_init__(self):
        if self.grid.ndim != 3 or self.grid.shape[0] != len(self.class_order):
            raise ValueError(
                f"grid shape {self.grid.shape} does not carry "
                f"{len(self.class_order)} class channels"
            )


def gt_confmaps(
    annotations: list[GtAnnotation],
    axes: tuple[np.ndarray, np.ndarray],
    kappa: KappaTable,
    sigma_scale: float = 1.0,
) -> ConfMaps:
    """Ground-truth maps: one Gaussian bump per object, peak 1.0 at its bin.

    Bump width in bins is kappa_cls * range / range_resolution * sigma_scale,
    so tolerance grows with distance. Overlapping bumps combine by max.
    """
    range_axis, azimuth_axis = axes
    n_r, n_a = len(range_axis), len(azimuth_axis)
    d_r = float(range_axis[1] - range_axis[0])
    grid = np.zeros((len(CLASS_ORDER), n_r, n_a))
    ii = np.arange(n_r)[:, None]
    jj = np.arange(n_a)[None, :]

    for ann in annotations:
        i0 = int(np.argmin(np.abs(range_axis - ann.range_m)))
        j0 = int(np.argmin(np.abs(azimuth_axis - ann.azimuth_rad)))
        if abs(range_axis[i0] - ann.range_m) > d_r:
            raise ValueError(
                f"annotation out of range bounds: frame={ann.frame_id!r} "
                f"range={ann.range_m:.3f} m"
            )
        if abs(azimuth_axis[j0] - ann.azimuth_rad) > float(
            np.max(np.diff(azimuth_axis))
        ):
            raise ValueError(
                f"annotation outside azimuth coverage: frame={ann.frame_id!r} "
                f"azimuth={math.degrees(ann.azimuth_rad):.2f} deg"
            )
        sigma = kappa.for_class(ann.class_label) * ann.range_m / d_r * sigma_scale
        sigma = max(sigma, 1e-6)
        bump = np.exp(-((ii - i0) ** 2 + (jj - j0) ** 2) / (2.0 * sigma**2))
        ch = CLASS_ORDER.index(ann.class_label)
        np.maximum(grid[ch], bump, out=grid[ch])
    return ConfMaps(grid=grid)


def _as_grid(maps) -> np.ndarray:
    return maps.grid if isinstance(maps, ConfMaps) else np.asarray(maps, dtype=float)


def bce_loss_and_grad(pred, gt) -> tuple[float, np.ndarray]:
    """Summed binary cross-entropy over classes and pixels, with gradient
    with respect to the (clamped) prediction."""
    p = _as_grid(pred)
    d = _as_grid(gt)
    if p.shape != d.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {d.shape}")
    p = np.clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    loss = -float(np.sum(d * np.log(p) + (1.0 - d) * np.log(1.0 - p)))
    grad = -(d / p - (1.0 - d) / (1.0 - p))
    return loss, grad


@dataclass
class SdmFeatureParams:
    """Bias-free 1x1 linear map over pooled SDM channels."""

    weight: np.ndarray  # (out_channels, n_semantic_classes + 1)
    depth_scale: float = 35.0  # depth channel is divided by this before mixing


def sdm_channel_stack(sdm: SDM, depth_scale: float) -> np.ndarray:
    """Semantic one-hots plus scaled depth; masked pixels are zero in all."""
    depth = np.where(sdm.mask, sdm.depth / depth_scale, 0.0)
    return np.concatenate([sdm.semantic, depth[None]], axis=0)


def sdm_features(sdm: SDM, params: SdmFeatureParams,
                 out_shape: tuple[int, int]) -> np.ndarray:
    """Average-pool each SDM channel to out_shape, then mix channels with the
    learned 1x1 linear map. Masked pixels contribute zero."""
    stack = sdm_channel_stack(sdm, params.depth_scale)
    if params.weight.shape[1] != stack.shape[0]:
        raise ValueError(
            f"weight expects {params.weight.shape[1]} channels, SDM has {stack.shape[0]}"
        )
    pooled = np.stack([pool_to(ch, out_shape) for ch in stack])
    return np.einsum("oc,chw->ohw", params.weight, pooled)


def fuse(radar_feat: np.ndarray, sdm_feat: np.ndarray, mode: str) -> np.ndarray:
    """Combine (channels, h, w) feature tensors by element-wise addition or
    channel-wise concatenation (radar channels first)."""
    if mode == "add":
        if radar_feat.shape != sdm_feat.shape:
            raise ValueError(
                f"add fusion needs identical shapes, got {radar_feat.shape} "
                f"vs {sdm_feat.shape}"
            )
        return radar_feat + sdm_feat
    if mode == "concat":
        if radar_feat.shape[1:] != sdm_feat.shape[1:]:
            raise ValueError(
                f"concat fusion needs identical spatial dims, got "
                f"{radar_feat.shape[1:]} vs {sdm_feat.shape[1:]}"
            )
        return np.concatenate([radar_feat, sdm_feat], axis=0)
    raise ValueError(f"unknown fusion mode {mode!r}, expected 'add' or 'concat'")


@dataclass
class DetectConfig:
    """Hyperparameters and shapes for downstream detector training."""

    fuse_mode: str = "concat"
    radar_channels: int = 24
    sdm_channels: int = 8
    feature_shape: tuple[int, int] = (4, 4)
    decoder_hidden: int = 128
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    freeze_encoder: bool = False
    pool_shape: tuple[int, int] = (32, 32)
    sigma_scale: float = 1.0
    background_prior: float = 0.05  # initial output level via final-layer bias
    decoder_upsample: int = 2       # trained grid is out_shape / this factor

    def __post_init__(self):
        if self.fuse_mode not in ("add", "concat"):
            raise ValueError(f"unknown fuse_mode {self.fuse_mode!r}")
        if self.fuse_mode == "add" and self.radar_channels != self.sdm_channels:
            raise ValueError("add fusion requires radar_channels == sdm_channels")
        if not 0.0 < self.background_prior < 1.0:
            raise ValueError("background_prior must lie in (0, 1)")
        if self.decoder_upsample < 1:
            raise ValueError("decoder_upsample must be >= 1")


def _upsample_matrix(n_coarse: int, factor: int) -> np.ndarray:
    """Linear interpolation weights (n_coarse*factor, n_coarse); coarse node i
    lands exactly on fine row i*factor."""
    n_full = n_coarse * factor
    w = np.zeros((n_full, n_coarse))
    for k in range(n_full):
        c = k / factor
        i0 = min(int(c), n_coarse - 1)
        i1 = min(i0 + 1, n_coarse - 1)
        t = c - i0
        w[k, i0] += 1.0 - t
        w[k, i1] += t
    return w


@dataclass
class DetectorModel:
    """Trained detector: encoder -> spatial features (-> SDM fusion) -> decoder.

    The decoder MLP paints logits on a grid coarsened by decoder_upsample;
    a fixed bilinear stage brings them to the full map resolution.
    """

    encoder: MlpParams
    to_spatial: MlpParams
    decoder: MlpParams
    sdm_params: SdmFeatureParams | None
    use_sdm: bool
    config: DetectConfig
    out_shape: tuple[int, int]  # (n_range, n_azimuth)
    class_order: tuple[str, ...] = CLASS_ORDER

    def __post_init__(self):
        f = self.config.decoder_upsample
        if self.out_shape[0] % f or self.out_shape[1] % f:
            raise ValueError(f"out_shape {self.out_shape} not divisible by "
                             f"decoder_upsample {f}")
        self._up_r = _upsample_matrix(self.out_shape[0] // f, f)
        self._up_a = _upsample_matrix(self.out_shape[1] // f, f)

    @property
    def coarse_shape(self) -> tuple[int, int]:
        f = self.config.decoder_upsample
        return self.out_shape[0] // f, self.out_shape[1] // f

    def upsample_logits(self, coarse: np.ndarray) -> np.ndarray:
        """(..., 3*Rc*Ac) coarse logits -> (..., 3*R*A) full-resolution."""
        lead = coarse.shape[:-1]
        rc, ac = self.coarse_shape
        grid = coarse.reshape(lead + (len(self.class_order), rc, ac))
        full = np.einsum("ri,...cia,sa->...crs", self._up_r, grid, self._up_a)
        return full.reshape(lead + (-1,))

    def upsample_adjoint(self, grad_full: np.ndarray) -> np.ndarray:
        lead = grad_full.shape[:-1]
        r, a = self.out_shape
        grid = grad_full.reshape(lead + (len(self.class_order), r, a))
        coarse = np.einsum("ri,...crs,sa->...cia", self._up_r, grid, self._up_a)
        return coarse.reshape(lead + (-1,))


def _prep_ra_input(grid: np.ndarray, pool_shape) -> np.ndarray:
    pooled = pool_to(np.asarray(grid, dtype=float), pool_shape)
    lo, hi = pooled.min(), pooled.max()
    if hi > lo:
        pooled = (pooled - lo) / (hi - lo)
    return pooled.reshape(-1)


def _forward(model: DetectorModel, ra_vec: np.ndarray, sdm_feat: np.ndarray | None):
    """Single-frame forward pass keeping caches for backprop."""
    cfg = model.config
    fh, fw = cfg.feature_shape
    emb, enc_cache = mlp_forward_cached(model.encoder, ra_vec)
    spatial_flat, spat_cache = mlp_forward_cached(model.to_spatial, emb)
    radar_feat = spatial_flat.reshape(cfg.radar_channels, fh, fw)
    fused = fuse(radar_feat, sdm_feat, cfg.fuse_mode) if model.use_sdm else radar_feat
    coarse, dec_cache = mlp_forward_cached(model.decoder, fused.reshape(-1))
    logits = model.upsample_logits(coarse)
    pred = 1.0 / (1.0 + np.exp(-logits))
    caches = (enc_cache, spat_cache, dec_cache, pred)
    return pred, caches


def infer_confmaps(model: DetectorModel, ra, sdm: SDM | None = None) -> ConfMaps:
    """Pure forward pass to per-class confidence maps in [eps, 1-eps]."""
    if model.use_sdm != (sdm is not None):
        raise ValueError(
            f"model trained with use_sdm={model.use_sdm} but sdm "
            f"{'missing' if sdm is None else 'provided'}"
        )
    grid = ra.grid if hasattr(ra, "grid") else np.asarray(ra, dtype=float)
    ra_vec = _prep_ra_input(grid, model.config.pool_shape)
    sdm_feat = None
    if model.use_sdm:
        sdm_feat = sdm_features(sdm, model.sdm_params, model.config.feature_shape)
    pred, _ = _forward(model, ra_vec, sdm_feat)
    n_r, n_a = model.out_shape
    pred = np.clip(pred.reshape(len(model.class_order), n_r, n_a),
                   CLAMP_EPS, 1.0 - CLAMP_EPS)
    return ConfMaps(grid=pred, class_order=model.class_order)


def detect_train(
    dataset: list,
    encoder: MlpParams,
    use_sdm: bool,
    config: DetectConfig,
    kappa: KappaTable | None = None,
) -> tuple[DetectorModel, list[float]]:
    """Train decoder (and optionally fine-tune the encoder) with SGD on the
    summed BCE against ground-truth confidence maps.

    dataset: list of (RAMap, SDM or None, list of GtAnnotation). Deterministic
    for a fixed config.seed; returns (model, per-epoch mean loss).
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if use_sdm and any(sdm is None for _, sdm, _ in dataset):
        raise ValueError("use_sdm=True but a frame has no SDM")
    kappa = kappa or KappaTable()

    rng = np.random.default_rng(config.seed)
    cfg = config
    fh, fw = cfg.feature_shape
    first_ra = dataset[0][0]
    out_shape = first_ra.grid.shape
    axes = (first_ra.range_axis, first_ra.azimuth_axis)
    n_out = len(CLASS_ORDER) * out_shape[0] * out_shape[1]

    encoder = encoder.copy()  # fine-tuning must not mutate the caller's copy
    to_spatial = init_mlp([encoder.out_dim, cfg.radar_channels * fh * fw],
                          ["identity"], rng)
    fused_channels = cfg.radar_channels
    sdm_params = None
    if use_sdm:
        n_sdm_ch = dataset[0][1].semantic.shape[0] + 1
        sdm_params = SdmFeatureParams(
            weight=rng.standard_normal((cfg.sdm_channels, n_sdm_ch))
            * math.sqrt(1.0 / n_sdm_ch)
        )
        if cfg.fuse_mode == "concat":
            fused_channels = cfg.radar_channels + cfg.sdm_channels
    decoder = init_mlp([fused_channels * fh * fw, cfg.decoder_hidden, n_out],
                       ["relu", "identity"], rng)
    # start the output at the background prior so the flat background does
    # not dominate the early gradient steps
    decoder.layers[-1][1][:] = math.log(cfg.background_prior
                                        / (1.0 - cfg.background_prior))

    model = DetectorModel(
        encoder=encoder, to_spatial=to_spatial, decoder=decoder,
        sdm_params=sdm_params, use_sdm=use_sdm, config=cfg, out_shape=out_shape,
    )

    # static per-frame tensors
    ra_vecs = np.stack([
        _prep_ra_input(ra.grid, cfg.pool_shape) for ra, _, _ in dataset
    ])
    gts = np.stack([
        gt_confmaps(anns, axes, kappa, cfg.sigma_scale).grid.reshape(-1)
        for _, _, anns in dataset
    ])
    sdm_pooled = None
    if use_sdm:
        pooled_cache: dict[int, np.ndarray] = {}
        stacks = []
        for _, sdm, _ in dataset:
            key = id(sdm)
            if key not in pooled_cache:
                stack = sdm_channel_stack(sdm, sdm_params.depth_scale)
                pooled_cache[key] = np.stack(
                    [pool_to(ch, cfg.feature_shape) for ch in stack]
                )
            stacks.append(pooled_cache[key])
        sdm_pooled = np.stack(stacks)  # (n, channels, fh, fw)

    history = []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)

            emb, enc_cache = mlp_forward_cached(encoder, ra_vecs[idx])
            spat, spat_cache = mlp_forward_cached(to_spatial, emb)
            radar_feat = spat.reshape(b, cfg.radar_channels, fh, fw)
            if use_sdm:
                sdm_feat = np.einsum("oc,bchw->bohw", sdm_params.weight,
                                     sdm_pooled[idx])
                if cfg.fuse_mode == "concat":
                    fused = np.concatenate([radar_feat, sdm_feat], axis=1)
                else:
                    fused = radar_feat + sdm_feat
            else:
                fused = radar_feat
            logits, dec_cache = mlp_forward_cached(decoder, fused.reshape(b, -1))
            pred = 1.0 / (1.0 + np.exp(-logits))

            loss, grad_pred = bce_loss_and_grad(pred, gts[idx])
            batch_loss = loss / b
            if not math.isfinite(batch_loss):
                raise TrainingDivergedError(
                    f"non-finite detection loss at epoch {epoch}, step {start}"
                )
            losses.append(batch_loss)

            grad_logits = grad_pred * pred * (1.0 - pred) / b
            dec_grads, grad_fused = mlp_backward(decoder, dec_cache, grad_logits)
            grad_fused = grad_fused.reshape(b, fused_channels, fh, fw)
            grad_radar = grad_fused
            if use_sdm:
                if cfg.fuse_mode == "concat":
                    grad_radar = grad_fused[:, : cfg.radar_channels]
                    grad_sdm = grad_fused[:, cfg.radar_channels:]
                else:
                    grad_sdm = grad_fused
                grad_w = np.einsum("bohw,bchw->oc", grad_sdm, sdm_pooled[idx])
            spat_grads, grad_emb = mlp_backward(
                to_spatial, spat_cache, grad_radar.reshape(b, -1)
            )
            enc_grads, _ = mlp_backward(encoder, enc_cache, grad_emb)

            sgd_step(decoder, dec_grads, cfg.learning_rate)
            sgd_step(to_spatial, spat_grads, cfg.learning_rate)
            if not cfg.freeze_encoder:
                sgd_step(encoder, enc_grads, cfg.learning_rate)
            if use_sdm:
                sdm_params.weight -= cfg.learning_rate * grad_w
        history.append(float(np.mean(losses)))
    return model, history
