"""Seeded phantom datasets, lambda tuning and the end-to-end method comparison."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import write_container
from .encoding import undersample
from .lowrank import IstaSchedule, recon_glr, recon_llr, zero_filled
from .metrics import EvalReport, ReportConfig, make_report, nrmse
from .network import NetParams, NetSpec
from .phantom import KNEE_TE_MS, PhantomSpec, make_phantom, synthesize_echoes, tissue_names
from .sampling import make_mask_library
from .sigmodel import fit_pixelwise
from .training import PhantomData, TrainConfig, TrainResult, infer, train

logger = logging.getLogger(__name__)

METHODS = ("zf", "glr", "llr", "cnn-only", "mantis")

# seed offsets keeping train / validation / test / tuning phantoms disjoint
TRAIN_BASE, VAL_BASE, TEST_BASE, TUNE_SEED = 1000, 2000, 3000, 999
NOISE_OFFSET = 1_000_000


@dataclass(frozen=True)
class Profile:
    name: str = "desk"
    ny: int = 64
    nx: int = 64
    n_objects: int = 8
    n_train: int = 32
    n_val: int = 3
    n_test: int = 6
    noise_sd: float = 0.025
    r_values: tuple = (5.0, 8.0)
    center_frac: float = 0.05
    library_size: int = 200
    levels: int = 3
    base_filters: int = 16
    epochs: int = 200
    batch: int = 3
    lr: float = 1e-3
    lam_data: float = 0.1
    lam_cnn: float = 1.0
    seed: int = 0


PROFILES = {
    "desk": Profile(),
    # seconds-scale plumbing check, not a meaningful comparison
    "smoke": Profile(name="smoke", ny=32, nx=32, n_objects=5, n_train=3, n_val=1, n_test=2,
                     library_size=4, levels=2, base_filters=4, epochs=2),
}


def phantom_data(seed: int, profile: Profile = Profile()) -> PhantomData:
    """One noisy fully sampled phantom with its pixelwise-fit reference.

    The reference is fitted inside the phantom's known object mask so that
    pure-noise background never enters the supervision target.
    """
    truth = make_phantom(PhantomSpec(profile.ny, profile.nx, profile.n_objects, seed=seed))
    echoes = synthesize_echoes(truth, KNEE_TE_MS, profile.noise_sd, seed=seed + NOISE_OFFSET)
    reference = fit_pixelwise(echoes, roi_labels=truth.roi_labels)
    return PhantomData(echoes, reference, truth)


def _seeds(base: int, n: int, profile: Profile) -> list[int]:
    return [base + 10_000 * profile.seed + i for i in range(n)]


def datasets(profile: Profile) -> dict[str, list[PhantomData]]:
    return {name: [phantom_data(s, profile) for s in _seeds(base, n, profile)]
            for name, base, n in (("train", TRAIN_BASE, profile.n_train),
                                  ("val", VAL_BASE, profile.n_val),
                                  ("test", TEST_BASE, profile.n_test))}


def mask_seeds(profile: Profile, r: float) -> dict[str, int]:
    """Distinct library seeds for training, validation and two unseen test sets."""
    k = int(round(10 * r))
    s = 100 * profile.seed
    return {"train": 5 + s + k, "val": 6 + s + k, "test": 7 + s + k, "test_alt": 8 + s + k}


def masks(profile: Profile, r: float, n: int, which: str):
    return make_mask_library(n, profile.ny, len(KNEE_TE_MS), r, profile.center_frac,
                             seed=mask_seeds(profile, r)[which])


def netspec(profile: Profile) -> NetSpec:
    return NetSpec(in_channels=len(KNEE_TE_MS), levels=profile.levels,
                   base_filters=profile.base_filters)


def train_config(profile: Profile, lam_data: float | None = None) -> TrainConfig:
    return TrainConfig(lam_data=profile.lam_data if lam_data is None else lam_data,
                       lam_cnn=profile.lam_cnn, lr=profile.lr, batch=profile.batch,
                       epochs=profile.epochs, seed=profile.seed)


def train_method(profile: Profile, data: dict, r: float, method: str = "mantis") -> TrainResult:
    """Train MANTIS (lam_data from the profile) or the CNN-only ablation (lam_data = 0)."""
    lam = 0.0 if method == "cnn-only" else None
    library = masks(profile, r, profile.library_size, "train")
    val_masks = masks(profile, r, len(data["val"]), "val")
    return train(train_config(profile, lam), data["train"], library, netspec(profile),
                 val_phantoms=data["val"], val_masks=val_masks)


def evaluate_network(params: NetParams, spec: NetSpec, test: list[PhantomData], test_masks):
    out = []
    for p, m in zip(test, test_masks):
        _, zf = undersample(p.echoes, m)
        out.append(infer(params, spec, zf, roi_labels=p.truth.roi_labels))
    return out


def evaluate_classical(method: str, test: list[PhantomData], test_masks,
                       sched: IstaSchedule = IstaSchedule()):
    out = []
    for p, m in zip(test, test_masks):
        k, _ = undersample(p.echoes, m)
        if method == "zf":
            rec = zero_filled(k)
        elif method == "glr":
            rec = recon_glr(k, sched)
        elif method == "llr":
            rec = recon_llr(k, sched)
        else:
            raise ValueError(f"unknown method {method!r}")
        out.append(fit_pixelwise(rec, roi_labels=p.truth.roi_labels))
    return out


def mean_nrmse(maps, test: list[PhantomData]) -> float:
    return float(np.mean([nrmse(m.t2_ms, p.reference.t2_ms, p.truth.roi_labels > 0)
                          for m, p in zip(maps, test)]))


def tune_lambdas(r: float = 5.0, grid=tuple(float(v) for v in np.round(np.logspace(-4, -1, 10), 6)),
                 profile: Profile = Profile(), seed: int = TUNE_SEED) -> dict:
    """Grid search of the relative GLR weight on one held-out phantom.

    The grid is log-spaced in fractions of the largest singular value of the
    zero-filled Casorati matrix. Returns the winner, the T2 nRMSE per grid
    point and the LLR nRMSE at the winner (LLR inherits the weight through
    its fixed reduction factor).
    """
    p = [phantom_data(seed, profile)]
    m = masks(profile, r, 1, "val")
    scores = {lam: mean_nrmse(evaluate_classical("glr", p, m, IstaSchedule(lam_glr=lam)), p)
              for lam in grid}
    best = min(scores, key=scores.get)
    llr = mean_nrmse(evaluate_classical("llr", p, m, IstaSchedule(lam_glr=best)), p)
    zf = mean_nrmse(evaluate_classical("zf", p, m), p)
    return {"lam_glr": best, "glr": scores, "llr_at_best": llr, "zf": zf}


@dataclass
class ReproResult:
    report: EvalReport
    networks: dict = field(default_factory=dict)  # (method, r) -> TrainResult
    data: dict = field(default_factory=dict)
    seconds: float = 0.0


def repro(profile: Profile | str = "desk", out_dir=None, methods=METHODS) -> ReproResult:
    """Generate data, train both networks per R, run the classical baselines, evaluate.

    With ``out_dir`` writes report.csv, previews, trained networks, loss
    histories and the resolved profile.
    """
    if isinstance(profile, str):
        profile = PROFILES[profile]
    t0 = time.perf_counter()
    data = datasets(profile)
    test = data["test"]
    spec = netspec(profile)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "profile.json").write_text(json.dumps(asdict(profile), indent=2) + "\n")

    outputs, networks = {}, {}
    for r in profile.r_values:
        test_masks = masks(profile, r, len(test), "test")
        for method in methods:
            logger.info("R=%g %s", r, method)
            if method in ("mantis", "cnn-only"):
                res = train_method(profile, data, r, method)
                networks[(method, r)] = res
                outputs[(method, r)] = evaluate_network(res.params, spec, test, test_masks)
                if out is not None:
                    tag = f"{method}_r{r:g}"
                    write_container(out / f"{tag}.qmt", res.params, seed=profile.seed)
                    (out / f"{tag}_history.csv").write_text(res.history_csv())
            else:
                outputs[(method, r)] = evaluate_classical(method, test, test_masks)

    names = tissue_names(PhantomSpec(profile.ny, profile.nx, profile.n_objects))
    report = make_report([p.reference for p in test], outputs, ReportConfig(roi_names=names),
                         out_dir=out, regions=[p.truth.roi_labels for p in test])
    return ReproResult(report, networks, data, time.perf_counter() - t0)
