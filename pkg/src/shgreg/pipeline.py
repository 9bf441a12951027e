"""Prealignment followed by instance optimisation.

When prealignment fails the pipeline does not abort: instance optimisation
is started from the identity and from a few rotations about the image
centre, and the start whose result best agrees with the fixed image in
feature space is kept.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .contrastive import encode, normalize_features, split_encoders
from .core import AffineTransform2D, RegistrationError
from .instopt import InstOptConfig, alignment_score, instance_optimize_details
from .prealign import PrealignConfig, prealign_details

log = logging.getLogger(__name__)


@dataclass
class RegistrationOutcome:
    phi_init: AffineTransform2D
    phi_final: AffineTransform2D
    prealign: object = None  # PrealignResult, or None when it failed or was skipped
    prealign_error: str = None
    instopt: object = None  # InstOptResult of the chosen start, or None when skipped
    timings_ms: dict = field(default_factory=dict)
    # one entry per start: {"angle", "score"}; empty when a single start was used
    starts: list = field(default_factory=list)

    @property
    def fallback(self):
        return self.prealign is None


def _ms(t0):
    return round((time.perf_counter() - t0) * 1000.0, 3)


@dataclass
class Initialisation:
    transforms: list  # candidate starting transforms, best guess first
    angles: list  # fallback rotation per candidate, None for a prealignment result
    prealign: object = None
    error: str = None


def initialise(fixed, moving, enc, cfg=None, phi_init=None):
    """Starting transform(s) for instance optimisation.

    ``phi_init`` is used as given. Otherwise prealignment runs, and if it
    fails the configured fallback rotations about the image centre are
    returned instead (the first one is the reported initial transform).
    """
    cfg = (cfg or PrealignConfig()).validate()
    if phi_init is not None:
        return Initialisation([phi_init], [None])
    try:
        pre = prealign_details(fixed, moving, enc, cfg)
        return Initialisation([pre.transform], [None], pre, None)
    except RegistrationError as e:
        err = str(e)
    h, w = np.shape(fixed)[:2]
    centre = ((w - 1) / 2.0, (h - 1) / 2.0)
    angles = [float(a) for a in cfg.fallback_angles]
    log.warning("prealignment failed (%s); trying %d fallback starts", err, len(angles))
    starts = [AffineTransform2D.rotation(a, center=centre) for a in angles]
    return Initialisation(starts, angles, None, err)


def optimise_from(fixed, moving, enc, init, instopt_cfg=None):
    """Run instance optimisation from every candidate start and keep the best.

    Returns (initial transform, InstOptResult, per-start records).
    """
    cfg = instopt_cfg or InstOptConfig()
    if len(init.transforms) == 1:
        res = instance_optimize_details(fixed, moving, enc, init.transforms[0], cfg)
        return init.transforms[0], res, []
    enc_f, _ = split_encoders(enc)
    ff = normalize_features(encode(enc_f, fixed))
    best = None
    records = []
    for t0, angle in zip(init.transforms, init.angles):
        res = instance_optimize_details(fixed, moving, enc, t0, cfg)
        score = alignment_score(fixed, moving, enc, res.transform, feat_fixed=ff)
        records.append({"angle": angle, "score": score})
        # strict comparison: ties keep the earlier start
        if best is None or score > best[0]:
            best = (score, t0, res)
    return best[1], best[2], records


def register_pair(fixed, moving, enc, prealign_cfg=None, instopt_cfg=None,
                  run_instopt=True, phi_init=None):
    """Register ``moving`` onto ``fixed``; both transforms map moving -> fixed.

    Passing ``phi_init`` skips prealignment altogether. With ``run_instopt``
    false only the initialisation is computed and ``phi_final`` equals the
    first starting transform.
    """
    timings = {}
    t0 = time.perf_counter()
    init = initialise(fixed, moving, enc, prealign_cfg, phi_init)
    timings["prealign"] = _ms(t0)

    start, res, records = init.transforms[0], None, []
    if run_instopt:
        t0 = time.perf_counter()
        start, res, records = optimise_from(fixed, moving, enc, init, instopt_cfg)
        timings["instopt"] = _ms(t0)
    phi_final = res.transform if res is not None else start
    return RegistrationOutcome(start, phi_final, init.prealign, init.error, res, timings, records)
