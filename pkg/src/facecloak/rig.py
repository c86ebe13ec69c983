"""Seeded desk-scale harness: procedural corpus, trained toy backend, and the
identification split used for protection measurements.

Identities are split in half.  The first half are users: images 0-4 of each
are probes and images 5-9 are the same-identity gallery images injected while
that user's probes are scored.  The second half are permanent distractors and
also form the anchor pool.  Each user's cloak is optimised from their first
injectable image, so probes are never seen by the optimiser.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .backends.toy import ToyBackend, ToyTrainConfig, train_toy_backend
from .core import CloakMask, EvalReport, ImagePlane
from .errors import DataError
from .evaluation import Evaluator, TransformSpec
from .ingestion import ProbeGallerySplit, Sample
from .optimizer import AnchorPool, OptimizerConfig, protect
from .synthgen import RealImageGenerator
from .toyfaces import make_corpus

log = logging.getLogger(__name__)


@dataclass
class RigConfig:
    n_identities: int = 40
    images_per_identity: int = 10
    image_size: int = 64
    corpus_seed: int = 0
    n_users: int = 20
    probes_per_user: int = 5
    train: ToyTrainConfig = field(default_factory=ToyTrainConfig)

    def __post_init__(self):
        if not 1 <= self.n_users < self.n_identities:
            raise DataError("n_users must leave at least one distractor identity")
        if not 1 <= self.probes_per_user < self.images_per_identity:
            raise DataError("each user needs probes and at least one injectable image")


def split_from_arrays(images: np.ndarray, labels: Sequence[str], users: Sequence[str],
                      probes_per_user: int) -> ProbeGallerySplit:
    probes, injectable, distractors = [], {}, []
    users = set(users)
    seen: dict[str, int] = {}
    for i, (img, lab) in enumerate(zip(images, labels)):
        k = seen.get(lab, 0)
        seen[lab] = k + 1
        s = Sample(lab, f"{lab}/{k:03d}", image=ImagePlane(img))
        if lab not in users:
            distractors.append(s)
        elif k < probes_per_user:
            probes.append(s)
        else:
            injectable.setdefault(lab, []).append(s)
    return ProbeGallerySplit(probes, injectable, distractors)


class DeskRig:
    def __init__(self, images: np.ndarray, labels: Sequence[str], backend, cfg: RigConfig):
        self.images = images
        self.labels = list(labels)
        self.backend = backend
        self.cfg = cfg
        ids = sorted(set(self.labels))
        self.users = ids[:cfg.n_users]
        self.split = split_from_arrays(images, self.labels, self.users, cfg.probes_per_user)
        self.evaluator = Evaluator(self.split, backend)
        d_emb = self.evaluator.cache.get(self.split.distractors)
        self.pool = AnchorPool([s.label for s in self.split.distractors], d_emb, source="rig-distractors")

    @classmethod
    def build(cls, cfg: RigConfig | None = None) -> "DeskRig":
        cfg = cfg or RigConfig()
        images, labels = make_corpus(cfg.n_identities, cfg.images_per_identity, cfg.image_size, cfg.corpus_seed)
        weights = train_toy_backend(images, labels, cfg.train)
        return cls(images, labels, ToyBackend(weights), cfg)

    @property
    def holdout_top1(self) -> float | None:
        w = getattr(self.backend, "weights", None)
        return None if w is None else w.metadata.get("holdout_top1")

    def zero_cloaks(self) -> dict[str, CloakMask | None]:
        return {u: None for u in self.users}

    def generate_cloaks(self, cfg: OptimizerConfig, jobs: int = 1, variants: str = "synthetic") -> dict[str, CloakMask]:
        """One cloak per user.  ``variants="real"`` optimises over the user's real
        injectable images instead of augmentations of the seed."""
        if variants not in ("synthetic", "real"):
            raise ValueError(f"variants must be 'synthetic' or 'real', got {variants!r}")
        digest = cfg.digest()

        def one(user):
            seed = self.split.seed_sample(user).load()
            gen = None
            if variants == "real":
                gen = RealImageGenerator([s.load() for s in self.split.injectable[user]])
            return user, protect(seed, self.backend, self.pool, cfg, gen, config_id=digest)

        if jobs > 1:
            with ThreadPoolExecutor(jobs) as ex:
                return dict(ex.map(one, self.users))
        return dict(one(u) for u in self.users)

    def evaluate(self, cloaks: Mapping[str, CloakMask | None], cfg: OptimizerConfig | None = None,
                 transforms: Sequence[TransformSpec] = (), verification: bool = True) -> EvalReport:
        return self.evaluator.report(cloaks, cfg, transforms, verification)
