"""COVID-19 detection and per-lung infection quantification.

A case is positive as soon as a single pixel survives the infection
pipeline (which already intersects with the lung mask). Severity is the
percentage of lung pixels predicted infected, reported overall and per
side. Sides use explicit image-left / image-right keys: image-left is
the side with the smaller centroid column (the patient's right on a
frontal view).
"""

from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import maskops
from .errors import ConfigurationError, DimensionError, NoLungError
from .models import SegModel, forward
from .tensor import Tensor

MODES = ("parallel", "cascaded")


def detect(infection) -> str:
    """``"positive"`` iff at least one infection pixel is set."""
    return "positive" if maskops.as_mask(infection).any() else "negative"


def infection_percentage(infection, lung) -> float:
    """100 * |infection| / |lung|; raises when no lung was detected."""
    inf_mask, lung_mask = maskops.as_mask(infection), maskops.as_mask(lung)
    lung_total = int(lung_mask.sum())
    if lung_total == 0:
        raise NoLungError("no lung pixels detected; infection percentage undefined")
    return 100.0 * int(inf_mask.sum()) / lung_total


@dataclass(frozen=True)
class LungSides:
    left: np.ndarray  # image-left
    right: np.ndarray  # image-right


def split_lungs(lung) -> LungSides:
    """Split a lung mask into image-left and image-right sides.

    With two or more regions, the two largest are assigned by centroid
    column and every remaining fragment joins the side with the nearer
    centroid. A single merged region splits at the vertical midline of
    its bounding box.
    """
    lung_mask = maskops.as_mask(lung)
    comp = maskops.connected_components(lung_mask)
    if not comp.regions:
        raise NoLungError("cannot split an empty lung mask")

    left = np.zeros_like(lung_mask)
    right = np.zeros_like(lung_mask)
    if comp.count == 1:
        region = comp.regions[1]
        _, cmin, _, cmax = region.bbox
        mid = (cmin + cmax + 1) // 2  # columns < mid go image-left
        cols = np.arange(lung_mask.shape[1])
        left[:, cols < mid] = lung_mask[:, cols < mid]
        right[:, cols >= mid] = lung_mask[:, cols >= mid]
        return LungSides(left=left, right=right)

    by_size = sorted(comp.regions.items(), key=lambda kv: (-kv[1].count, kv[0]))
    (id_a, reg_a), (id_b, reg_b) = by_size[0], by_size[1]
    if reg_a.centroid[1] <= reg_b.centroid[1]:
        left_id, right_id = id_a, id_b
    else:
        left_id, right_id = id_b, id_a
    left_c = comp.regions[left_id].centroid
    right_c = comp.regions[right_id].centroid

    for rid, region in comp.regions.items():
        if rid == left_id:
            target = left
        elif rid == right_id:
            target = right
        else:
            d_left = np.hypot(region.centroid[0] - left_c[0], region.centroid[1] - left_c[1])
            d_right = np.hypot(region.centroid[0] - right_c[0], region.centroid[1] - right_c[1])
            target = left if d_left <= d_right else right
        target[comp.labels == rid] = 1
    return LungSides(left=left, right=right)


@dataclass(frozen=True)
class PerLungPercentages:
    left_pct: float
    right_pct: float
    left_absent: bool
    right_absent: bool
    left_lung_pixels: int
    right_lung_pixels: int
    left_infection_pixels: int
    right_infection_pixels: int


def per_lung_percentages(infection, lung) -> PerLungPercentages:
    """Infection percentage per side; an absent side reports 0 plus a flag."""
    inf_mask = maskops.as_mask(infection)
    sides = split_lungs(lung)

    def side_stats(side_mask: np.ndarray) -> tuple[float, bool, int, int]:
        lung_px = int(side_mask.sum())
        inf_px = int((inf_mask & side_mask).sum())
        if lung_px == 0:
            return 0.0, True, 0, inf_px
        return 100.0 * inf_px / lung_px, False, lung_px, inf_px

    l_pct, l_absent, l_lung, l_inf = side_stats(sides.left)
    r_pct, r_absent, r_lung, r_inf = side_stats(sides.right)
    return PerLungPercentages(
        left_pct=l_pct,
        right_pct=r_pct,
        left_absent=l_absent,
        right_absent=r_absent,
        left_lung_pixels=l_lung,
        right_lung_pixels=r_lung,
        left_infection_pixels=l_inf,
        right_infection_pixels=r_inf,
    )


@dataclass
class QuantReport:
    case_id: str
    timestamp: str
    status: str  # "ok" or "no_lung"
    detection: str  # "positive" or "negative"
    overall_pct: float
    left_pct: float
    right_pct: float
    lung_pixels: int
    infection_pixels: int
    left_lung_pixels: int
    right_lung_pixels: int
    left_infection_pixels: int
    right_infection_pixels: int
    mode: str
    left_absent: bool = False
    right_absent: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def quantify(infection, lung, case_id: str = "", mode: str = "parallel",
             timestamp: Optional[str] = None) -> QuantReport:
    """Assemble a report from post-processed infection and lung masks."""
    inf_mask, lung_mask = maskops.as_mask(infection), maskops.as_mask(lung)
    if inf_mask.shape != lung_mask.shape:
        raise DimensionError(f"mask shapes differ: {inf_mask.shape} vs {lung_mask.shape}")
    ts = timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat()
    lung_total = int(lung_mask.sum())
    inf_total = int(inf_mask.sum())
    if lung_total == 0:
        return QuantReport(
            case_id=case_id, timestamp=ts, status="no_lung",
            detection=detect(inf_mask), overall_pct=0.0, left_pct=0.0, right_pct=0.0,
            lung_pixels=0, infection_pixels=inf_total,
            left_lung_pixels=0, right_lung_pixels=0,
            left_infection_pixels=0, right_infection_pixels=0,
            mode=mode, left_absent=True, right_absent=True,
        )
    per_side = per_lung_percentages(inf_mask, lung_mask)
    return QuantReport(
        case_id=case_id, timestamp=ts, status="ok",
        detection=detect(inf_mask),
        overall_pct=infection_percentage(inf_mask, lung_mask),
        left_pct=per_side.left_pct, right_pct=per_side.right_pct,
        lung_pixels=lung_total, infection_pixels=inf_total,
        left_lung_pixels=per_side.left_lung_pixels,
        right_lung_pixels=per_side.right_lung_pixels,
        left_infection_pixels=per_side.left_infection_pixels,
        right_infection_pixels=per_side.right_infection_pixels,
        mode=mode, left_absent=per_side.left_absent, right_absent=per_side.right_absent,
    )


def _predict_probs(model: SegModel, image01: np.ndarray) -> np.ndarray:
    probs = forward(model, Tensor(image01[None, None, :, :]))
    return probs.data[0]


def run_pipeline(
    image: np.ndarray,
    lung_model: SegModel,
    inf_model: SegModel,
    mode: str = "parallel",
    case_id: str = "",
    remove_small_infection: bool = False,
) -> QuantReport:
    """Segment, post-process, detect, and quantify one radiograph.

    ``image`` is an HxW 8-bit grayscale array at the models' input size.
    Parallel mode feeds the raw image to both models; cascaded mode feeds
    the infection model the image with non-lung pixels zeroed.
    """
    if mode not in MODES:
        raise ConfigurationError(f"unknown pipeline mode {mode!r}; expected one of {MODES}")
    img = np.asarray(image)
    if img.ndim != 2:
        raise DimensionError(f"expected an HxW grayscale image, got shape {img.shape}")
    image01 = img.astype(np.float64) / 255.0

    lung_probs = _predict_probs(lung_model, image01)
    lung_mask = maskops.postprocess_lung(lung_probs)

    if mode == "cascaded":
        inf_input = image01 * lung_mask
    else:
        inf_input = image01
    inf_probs = _predict_probs(inf_model, inf_input)
    infection = maskops.postprocess_infection(
        inf_probs, lung_mask, remove_small=remove_small_infection
    )
    return quantify(infection, lung_mask, case_id=case_id, mode=mode)
