"""Promptable segmentation backends.

The refinement and propagation pipelines talk to a :class:`PromptableSegmenter`.
Real SAM / SAM 2 models are loaded lazily from optional packages; the oracle
backends answer from ground truth so both pipelines can be tested on phantoms.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .volume_io import to_uint8_frame

log = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


class UnsupportedCapabilityError(NotImplementedError):
    pass


class EmptySeedMaskError(ValueError):
    pass


class FrameShapeError(ValueError):
    pass


class UnknownImageError(KeyError):
    pass


class BackendUnavailableError(ImportError):
    pass


@dataclass(frozen=True)
class BoxPrompt:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self}")
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box {self} has negative coordinates")

    def check_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape
        if self.x_max >= w or self.y_max >= h:
            raise ValueError(f"box {self} outside image of shape {shape}")

    def expand(self, margin: int, shape: tuple[int, int]) -> "BoxPrompt":
        h, w = shape
        return BoxPrompt(
            max(0, self.x_min - margin),
            max(0, self.y_min - margin),
            min(w - 1, self.x_max + margin),
            min(h - 1, self.y_max + margin),
        )

    def to_mask(self, shape: tuple[int, int]) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.y_min : self.y_max + 1, self.x_min : self.x_max + 1] = True
        return m

    @property
    def area(self) -> int:
        """Pixel count; coordinates are inclusive so a valid box is never empty."""
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def as_xyxy(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True)
class Capabilities:
    box_prompt: bool = False
    mask_prompt: bool = False
    stateful_propagation: bool = False


@dataclass
class PropagationState:
    """Opaque per-backend memory carried from frame to frame."""

    frame_shape: tuple[int, int]
    data: dict[str, Any] = field(default_factory=dict)


class PromptableSegmenter:
    capabilities = Capabilities()
    thread_safe = False

    def _require(self, name: str) -> None:
        if not getattr(self.capabilities, name):
            raise UnsupportedCapabilityError(f"{type(self).__name__} does not support {name}")

    def segment_with_box(self, image: np.ndarray, prompt: BoxPrompt) -> np.ndarray:
        self._require("box_prompt")
        prompt.check_bounds(image.shape)
        return self._segment_box(image, prompt)

    def init_propagation(self, frame: np.ndarray, seed_mask: np.ndarray) -> PropagationState:
        self._require("stateful_propagation")
        seed_mask = np.asarray(seed_mask, dtype=bool)
        if seed_mask.shape != frame.shape:
            raise FrameShapeError(f"seed mask {seed_mask.shape} vs frame {frame.shape}")
        if not seed_mask.any():
            raise EmptySeedMaskError("propagation needs a nonempty seed mask")
        return self._init(frame, seed_mask)

    def propagate_step(self, state: PropagationState, next_frame: np.ndarray) -> tuple[PropagationState, np.ndarray]:
        self._require("stateful_propagation")
        if tuple(next_frame.shape) != tuple(state.frame_shape):
            raise FrameShapeError(f"frame shape {next_frame.shape} != initial {state.frame_shape}")
        return self._step(state, next_frame)

    def _segment_box(self, image, prompt):
        raise UnsupportedCapabilityError

    def _init(self, frame, seed_mask):
        raise UnsupportedCapabilityError

    def _step(self, state, frame):
        raise UnsupportedCapabilityError


class NullSegmenter(PromptableSegmenter):
    """Always returns empty masks."""

    capabilities = Capabilities(box_prompt=True, mask_prompt=True, stateful_propagation=True)
    thread_safe = True

    def _segment_box(self, image, prompt):
        return np.zeros(image.shape, dtype=bool)

    def _init(self, frame, seed_mask):
        return PropagationState(tuple(frame.shape))

    def _step(self, state, frame):
        return state, np.zeros(frame.shape, dtype=bool)


def image_key(image: np.ndarray) -> str:
    a = np.ascontiguousarray(image)
    h = hashlib.sha1(a.tobytes())
    h.update(str((a.dtype.str, a.shape)).encode())
    return h.hexdigest()


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, iterations=radius)


@dataclass(frozen=True)
class NoiseModel:
    """Degradation applied by the noisy oracle.

    Every returned mask is dilated by ``dilation_radius`` plus a drift term: each
    propagation step adds one more pixel of dilation with probability
    ``drift_prob``, so errors grow with distance from the prompted frame.
    """

    dilation_radius: int = 0
    drift_prob: float = 0.0
    seed: int = 0

    @property
    def active(self) -> bool:
        return self.dilation_radius > 0 or self.drift_prob > 0


class OracleSegmenter(PromptableSegmenter):
    """Answers from registered ground truth, looked up by exact image content.

    * box prompt: every ground-truth component that overlaps the box, whole;
    * propagation: the ground-truth mask of each frame (the prompted frame
      returns the seed mask itself), degraded by ``noise`` if configured.
    """

    capabilities = Capabilities(box_prompt=True, mask_prompt=True, stateful_propagation=True)
    thread_safe = True

    def __init__(self, pairs: Iterable[tuple[np.ndarray, np.ndarray]] = (), noise: NoiseModel = NoiseModel()):
        self.noise = noise
        self._truth: dict[str, np.ndarray] = {}
        for image, mask in pairs:
            self.register(image, mask)

    def register(self, image: np.ndarray, mask: np.ndarray) -> None:
        self._truth[image_key(image)] = np.asarray(mask, dtype=bool)

    @classmethod
    def for_slices(cls, images: Sequence[np.ndarray], masks: Sequence[np.ndarray], noise: NoiseModel = NoiseModel()):
        """Register raw slices and their 8-bit frame versions."""
        pairs = []
        for img, m in zip(images, masks):
            pairs.append((img, m))
            pairs.append((to_uint8_frame(img), m))
        return cls(pairs, noise)

    @classmethod
    def for_volume(cls, volume, noise: NoiseModel = NoiseModel()):
        if volume.label is None:
            raise ValueError(f"oracle needs a labeled volume, {volume.scan_id} has none")
        d = volume.depth
        return cls.for_slices(
            [volume.voxels[:, :, s] for s in range(d)], [volume.label[:, :, s] for s in range(d)], noise
        )

    def truth(self, image: np.ndarray) -> np.ndarray:
        try:
            return self._truth[image_key(image)]
        except KeyError:
            raise UnknownImageError("oracle has no ground truth registered for this image") from None

    def _segment_box(self, image, prompt):
        gt = self.truth(image)
        labels, _ = ndimage.label(gt, structure=EIGHT_CONNECTED)
        box = prompt.to_mask(gt.shape)
        hit = np.unique(labels[box & gt])
        out = np.isin(labels, hit[hit > 0])
        return dilate(out, self.noise.dilation_radius)

    def _init(self, frame, seed_mask):
        rng = np.random.default_rng([self.noise.seed, int(image_key(frame)[:8], 16)])
        return PropagationState(tuple(frame.shape), {"radius": self.noise.dilation_radius, "rng": rng, "steps": 0})

    def _step(self, state, frame):
        gt = self.truth(frame)
        radius = state.data["radius"]
        if self.noise.drift_prob > 0 and state.data["rng"].random() < self.noise.drift_prob:
            radius += 1
        new = PropagationState(state.frame_shape, {**state.data, "radius": radius, "steps": state.data["steps"] + 1})
        return new, dilate(gt, radius)


class SamSegmenter(PromptableSegmenter):
    """Box-prompted SAM through the optional ``segment_anything`` package.

    When SAM returns several candidate masks the one with the highest
    predicted quality score is kept.
    """

    capabilities = Capabilities(box_prompt=True)

    def __init__(self, weights: str, model_type: str = "vit_b", mask_threshold: float = 0.0, device: str = "cpu"):
        try:
            from segment_anything import SamPredictor, sam_model_registry
        except ImportError as e:
            raise BackendUnavailableError("install segment_anything to use the 'sam' backend") from e
        sam = sam_model_registry[model_type](checkpoint=weights).to(device)
        self.predictor = SamPredictor(sam)
        self.predictor.model.mask_threshold = mask_threshold
        self._current = None

    def _segment_box(self, image, prompt):
        key = image_key(image)
        if key != self._current:
            rgb = np.repeat(to_uint8_frame(image)[..., None], 3, axis=2)
            self.predictor.set_image(rgb)
            self._current = key
        masks, scores, _ = self.predictor.predict(box=np.asarray(prompt.as_xyxy()), multimask_output=True)
        return np.asarray(masks[int(np.argmax(scores))], dtype=bool)


class Sam2Segmenter(PromptableSegmenter):
    """SAM 2 video predictor through the optional ``sam2`` package.

    The video predictor wants the whole clip up front, so each step re-runs
    the clip buffered so far. Correct but quadratic; fine for short volumes.
    """

    capabilities = Capabilities(mask_prompt=True, stateful_propagation=True)

    def __init__(self, weights: str, config: str = "sam2_hiera_s.yaml", mask_threshold: float = 0.0, device: str = "cpu"):
        try:
            from sam2.build_sam import build_sam2_video_predictor
        except ImportError as e:
            raise BackendUnavailableError("install sam2 to use the 'sam2' backend") from e
        self.predictor = build_sam2_video_predictor(config, weights, device=device)
        self.mask_threshold = mask_threshold

    def _init(self, frame, seed_mask):
        return PropagationState(tuple(frame.shape), {"frames": [to_uint8_frame(frame)], "seed": seed_mask})

    def _step(self, state, frame):
        import tempfile
        from pathlib import Path

        from PIL import Image

        frames = [*state.data["frames"], to_uint8_frame(frame)]
        with tempfile.TemporaryDirectory() as tmp:
            for i, f in enumerate(frames):
                Image.fromarray(f).convert("RGB").save(Path(tmp) / f"{i:05d}.jpg", quality=100)
            inference = self.predictor.init_state(video_path=tmp)
            self.predictor.add_new_mask(inference, frame_idx=0, obj_id=1, mask=state.data["seed"])
            last = None
            for idx, _, logits in self.predictor.propagate_in_video(inference):
                if idx == len(frames) - 1:
                    last = (logits[0, 0] > self.mask_threshold).cpu().numpy()
        return PropagationState(state.frame_shape, {**state.data, "frames": frames}), np.asarray(last, dtype=bool)


BACKENDS = ("oracle", "oracle_noisy", "null", "sam", "sam2")


def get_backend(name: str, **kwargs) -> PromptableSegmenter:
    """Instantiate a backend by its config key.

    Oracle backends take ``pairs`` (image, mask) or are filled later through
    :meth:`OracleSegmenter.register`; ``oracle_noisy`` defaults to a
    one-pixel dilation. ``sam`` / ``sam2`` need ``weights``.
    """
    if name == "null":
        return NullSegmenter()
    if name == "oracle":
        return OracleSegmenter(kwargs.get("pairs", ()), NoiseModel())
    if name == "oracle_noisy":
        noise = kwargs.get("noise") or NoiseModel(
            dilation_radius=kwargs.get("dilation_radius", 1),
            drift_prob=kwargs.get("drift_prob", 0.0),
            seed=kwargs.get("seed", 0),
        )
        return OracleSegmenter(kwargs.get("pairs", ()), noise)
    if name == "sam":
        return SamSegmenter(kwargs["weights"], **{k: v for k, v in kwargs.items() if k in ("model_type", "mask_threshold", "device")})
    if name == "sam2":
        return Sam2Segmenter(kwargs["weights"], **{k: v for k, v in kwargs.items() if k in ("config", "mask_threshold", "device")})
    raise ValueError(f"unknown backend {name!r}; choose from {BACKENDS}")
