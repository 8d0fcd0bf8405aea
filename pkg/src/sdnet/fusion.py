"""Twin fusion: combine the 4-class predictions for x+ and x- into one P/N decision."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import CLASS_NAMES, predict_batch
from .errors import DegenerateProbabilities
from .preprocess import prepare_image, segment_and_crop

# theta / psi are indexed (P+, P-, N+, N-); the 4-class model emits (N-, N+, P-, P+)
THETA_ORDER = ("P+", "P-", "N+", "N-")
_MODEL_TO_THETA = [CLASS_NAMES[4].index(name) for name in THETA_ORDER]
# argmax ties go to the earliest class of the model order N-, N+, P-, P+
_TIE_PRIORITY = [THETA_ORDER.index(name) for name in CLASS_NAMES[4]]


def theta_from_model_probs(probs) -> np.ndarray:
    """Reorder a 4-class model output into (P+, P-, N+, N-)."""
    return np.asarray(probs, dtype=np.float64)[..., _MODEL_TO_THETA]


@dataclass(frozen=True)
class FusionInput:
    theta: tuple[float, float, float, float]
    psi: tuple[float, float, float, float]

    def __post_init__(self):
        for name in ("theta", "psi"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if v.shape != (4,):
                raise DegenerateProbabilities(f"{name} must have 4 entries, got shape {v.shape}")
            if not np.all(np.isfinite(v)) or v.min() < -1e-9 or v.max() > 1 + 1e-9:
                raise DegenerateProbabilities(f"{name} has entries outside [0, 1]: {v.tolist()}")
            if abs(v.sum() - 1.0) > 1e-6:
                raise DegenerateProbabilities(f"{name} sums to {v.sum()!r}, not 1")
            object.__setattr__(self, name, tuple(float(t) for t in v))


@dataclass(frozen=True)
class FusionDecision:
    label: str
    rule_fired: str
    y_plus: str
    y_minus: str
    evidence: tuple[float, float] | None = None  # (max over N entries, max over P entries), rule c only


def argmax4(v) -> int:
    """Index into (P+, P-, N+, N-) of the largest entry, ties resolved N- > N+ > P- > P+."""
    best = max(v)
    for i in _TIE_PRIORITY:
        if v[i] == best:
            return i
    raise DegenerateProbabilities(f"no maximum in {v}")  # only reachable with NaN


def fuse(inp: FusionInput | None = None, *, theta=None, psi=None) -> FusionDecision:
    """Decision rule:

    (a) argmax theta = N+ and argmax psi = N-  -> N
    (b) argmax theta = P+ and argmax psi = P-  -> P
    (c) otherwise N if the largest N-entry of theta and psi beats the largest P-entry, else P
        (an exact tie favours P).
    """
    if inp is None:
        inp = FusionInput(theta, psi)
    t, s = inp.theta, inp.psi
    y_plus = THETA_ORDER[argmax4(t)]
    y_minus = THETA_ORDER[argmax4(s)]
    if y_plus == "N+" and y_minus == "N-":
        return FusionDecision("N", "a", y_plus, y_minus)
    if y_plus == "P+" and y_minus == "P-":
        return FusionDecision("P", "b", y_plus, y_minus)
    max_n = max(t[2], t[3], s[2], s[3])
    max_p = max(t[0], t[1], s[0], s[1])
    return FusionDecision("N" if max_n > max_p else "P", "c", y_plus, y_minus, (max_n, max_p))


def fuse_model_outputs(probs_plus, probs_minus) -> list[FusionDecision]:
    """Fuse batches of raw 4-class model outputs (model class order) for x+ and x-."""
    thetas = theta_from_model_probs(probs_plus)
    psis = theta_from_model_probs(probs_minus)
    return [fuse(FusionInput(tuple(t), tuple(p))) for t, p in zip(thetas, psis)]


@dataclass
class InferenceSettings:
    side: int = 224
    margin: float = 0.025
    margin_relative_to: str = "box"
    threshold: float = 0.5
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)
    crop: bool = True


def infer_case(image, backend, gens, model, settings: InferenceSettings | None = None, image_id: str = ""):
    """Full pipeline for one raw image: crop, standardize, G_P/G_N, 4-class model twice, fuse.

    Returns (decision, trace) where the trace holds the box, fallback flag, theta, psi
    and the fired rule.
    """
    settings = settings or InferenceSettings()
    h, w = image.shape[:2]
    if settings.crop:
        res = segment_and_crop(image, backend, settings.margin, settings.threshold, settings.margin_relative_to)
        cropped, box, fallback = res.image, res.box.to_dict(), res.empty_mask_fallback
    else:
        cropped, box, fallback = image, {"x0": 0, "y0": 0, "x1": w - 1, "y1": h - 1}, False
    x = prepare_image(cropped, settings.side, settings.mean, settings.std)
    plus, minus = gens.transform(x[None])
    probs_plus, _ = predict_batch(model, plus)
    probs_minus, _ = predict_batch(model, minus)
    decision = fuse_model_outputs(probs_plus, probs_minus)[0]
    trace = {
        "id": image_id,
        "box": box,
        "fallback": fallback,
        "backend_identity": getattr(backend, "identity", None),
        "theta": theta_from_model_probs(probs_plus[0]).tolist(),
        "psi": theta_from_model_probs(probs_minus[0]).tolist(),
        "rule": decision.rule_fired,
        "label": decision.label,
    }
    return decision, trace
