"""Paired-to-paired dataset synthesis.

Each output pair couples a noisy low-light RAW frame with the untouched
reference sRGB image of the same scene.  A capture is cropped to the target
geometry, exposure-aligned to a per-band standard frame (with the offset
found by ``search_eta``), and degraded with the calibrated noise model at a
band-appropriate ISO.  Every pair derives its own RNG stream from the config
seed and the pair id, so results are independent of build order and worker
count.

Outputs land in ``out/<band>/<split>/<pair_id>.{siedraw,ppm}`` where the
train/eval split is a stable hash of the pair id.  The manifest records
enough provenance (eta, KL, ISO, seed) to re-execute any single pair.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import shutil
import warnings
from dataclasses import dataclass

from .errors import (
    AllEntriesFailed,
    DarkforgeError,
    EmptyManifest,
    InvalidRange,
    IoFailure,
    KlAboveThreshold,
    MissingFile,
    OddDimensions,
)
from .illumination import (
    DEFAULT_BINS,
    SATURATION_WARN_FRACTION,
    IlluminanceBand,
    align_exposure_stats,
    expo,
    kl_divergence,
    luma_histogram,
    search_eta,
)
from .imaging import BayerFrame, SrgbFrame, crop, load_bayer, load_ppm, write_bayer
from .noise import NoiseModel, RngStream, add_noise, draw_iso

KL_WARN_THRESHOLD = 0.06
DEFAULT_CROP = (3840, 2160)
# 1500 of 1680 pairs go to training.
DEFAULT_TRAIN_FRACTION = 1500.0 / 1680.0


def thread_budget() -> int:
    """Worker cap from DARKFORGE_THREADS; unset or malformed means serial."""
    raw = os.environ.get("DARKFORGE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


# ---------------------------------------------------------------------------
# configuration and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourcePair:
    """One captured scene: a RAW capture path and its reference sRGB path."""

    pair_id: str
    cap_path: str
    ref_path: str


@dataclass(frozen=True)
class SynthConfig:
    """Per-band build settings.

    ``standard_refs`` lists candidate standard-frame paths for the band; the
    first entry is used.  ``crop`` is (width, height) and must be even on
    both axes so the Bayer phase survives.
    """

    band: IlluminanceBand
    standard_refs: tuple = ()
    crop: tuple = DEFAULT_CROP
    seed: int = 0
    bins: int = DEFAULT_BINS
    gains: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not self.standard_refs:
            raise InvalidRange("standard_refs must name at least one frame")
        w, h = self.crop
        if w <= 0 or h <= 0:
            raise InvalidRange(f"crop must be positive, got {self.crop}")
        if w % 2 or h % 2:
            raise OddDimensions(f"crop must be even, got {self.crop}")
        if self.bins < 2:
            raise InvalidRange(f"bins must be at least 2, got {self.bins}")
        if self.seed < 0:
            raise InvalidRange(f"seed must be non-negative, got {self.seed}")


@dataclass(frozen=True)
class PairProvenance:
    """Synthesis facts recorded for one pair."""

    eta: float
    achieved_kl: float
    iso: float
    seed: int
    saturation_warning: bool


@dataclass(frozen=True)
class PairEntry:
    pair_id: str
    source_cap_path: str
    source_ref_path: str
    band: IlluminanceBand
    eta: float
    achieved_kl: float
    iso: float
    seed: int
    out_raw_path: str
    out_srgb_path: str
    saturation_warning: bool

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "source_cap_path": self.source_cap_path,
            "source_ref_path": self.source_ref_path,
            "band": self.band.value,
            "eta": self.eta,
            "achieved_kl": self.achieved_kl,
            "iso": self.iso,
            "seed": self.seed,
            "out_raw_path": self.out_raw_path,
            "out_srgb_path": self.out_srgb_path,
            "saturation_warning": self.saturation_warning,
        }

    @staticmethod
    def from_dict(d: dict) -> "PairEntry":
        return PairEntry(
            pair_id=d["pair_id"],
            source_cap_path=d["source_cap_path"],
            source_ref_path=d["source_ref_path"],
            band=IlluminanceBand.parse(d["band"]),
            eta=float(d["eta"]),
            achieved_kl=float(d["achieved_kl"]),
            iso=float(d["iso"]),
            seed=int(d["seed"]),
            out_raw_path=d["out_raw_path"],
            out_srgb_path=d["out_srgb_path"],
            saturation_warning=bool(d["saturation_warning"]),
        )


@dataclass(frozen=True)
class FailedEntry:
    pair_id: str
    error: str

    def to_dict(self) -> dict:
        return {"pair_id": self.pair_id, "error": self.error}


@dataclass(frozen=True)
class DatasetManifest:
    """Record of a dataset build; entries are kept sorted by pair id."""

    entries: tuple = ()
    failures: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple(sorted(self.entries, key=lambda e: e.pair_id))
        )
        object.__setattr__(
            self, "failures", tuple(sorted(self.failures, key=lambda e: e.pair_id))
        )
        ids = [e.pair_id for e in self.entries] + [f.pair_id for f in self.failures]
        if len(set(ids)) != len(ids):
            raise IoFailure("manifest pair ids are not unique")

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "failures": [f.to_dict() for f in self.failures],
        }

    @staticmethod
    def from_dict(d: dict) -> "DatasetManifest":
        return DatasetManifest(
            entries=tuple(PairEntry.from_dict(e) for e in d.get("entries", ())),
            failures=tuple(
                FailedEntry(f["pair_id"], f["error"]) for f in d.get("failures", ())
            ),
        )


def load_source_manifest(path: str) -> tuple:
    """Parse a source manifest: JSON ``{"pairs": [{"id", "cap", "ref"}]}``."""
    if not os.path.isfile(path):
        raise MissingFile(f"source manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IoFailure(f"source manifest is not valid JSON: {exc}") from exc
    pairs = doc.get("pairs") if isinstance(doc, dict) else None
    if not isinstance(pairs, list):
        raise IoFailure("source manifest must be an object with a 'pairs' list")
    out = []
    seen = set()
    for row in pairs:
        try:
            src = SourcePair(str(row["id"]), str(row["cap"]), str(row["ref"]))
        except (TypeError, KeyError) as exc:
            raise IoFailure(f"source entry missing id/cap/ref: {row!r}") from exc
        if src.pair_id in seen:
            raise IoFailure(f"duplicate source id: {src.pair_id}")
        seen.add(src.pair_id)
        out.append(src)
    return tuple(out)


def save_manifest(manifest: DatasetManifest, path: str) -> None:
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def load_manifest(path: str) -> DatasetManifest:
    if not os.path.isfile(path):
        raise MissingFile(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise IoFailure(f"manifest is not valid JSON: {exc}") from exc
    return DatasetManifest.from_dict(doc)


def split_of(pair_id: str, train_fraction: float = DEFAULT_TRAIN_FRACTION) -> str:
    """Stable train/eval assignment from the pair id alone."""
    if not 0.0 <= train_fraction <= 1.0:
        raise InvalidRange(f"train fraction must lie in [0, 1], got {train_fraction}")
    digest = hashlib.blake2b(pair_id.encode("utf-8"), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2.0 ** 64
    return "train" if u < train_fraction else "eval"


# ---------------------------------------------------------------------------
# single-pair synthesis
# ---------------------------------------------------------------------------

def centered_crop(frame: BayerFrame, width: int, height: int) -> BayerFrame:
    """Crop the middle window, snapping the origin to the CFA phase."""
    if frame.width == width and frame.height == height:
        return frame
    x0 = ((frame.width - width) // 2) & ~1
    y0 = ((frame.height - height) // 2) & ~1
    return crop(frame, x0, y0, width, height)


def synthesize_pair(cap: BayerFrame, ref_srgb: SrgbFrame, standard: BayerFrame,
                    model: NoiseModel, cfg: SynthConfig, rng: RngStream):
    """Build one noisy low-light frame paired with its untouched reference.

    Returns ``(noisy, ref_srgb, provenance)``.  The KL reported is the exact
    histogram divergence of the aligned frame against the standard; a
    KlAboveThreshold warning fires when it exceeds 0.06, but synthesis still
    completes.
    """
    eta, achieved_kl = search_eta(cap, standard, bins=cfg.bins, gains=cfg.gains)
    aligned, sat_fraction = align_exposure_stats(cap, expo(standard), eta)
    if achieved_kl > KL_WARN_THRESHOLD:
        warnings.warn(
            f"aligned KL {achieved_kl:.4f} exceeds {KL_WARN_THRESHOLD}",
            KlAboveThreshold,
            stacklevel=2,
        )
    iso = draw_iso(cfg.band, rng)
    noisy = add_noise(aligned, iso, model, rng)
    prov = PairProvenance(
        eta=eta,
        achieved_kl=achieved_kl,
        iso=iso,
        seed=cfg.seed,
        saturation_warning=sat_fraction > SATURATION_WARN_FRACTION,
    )
    return noisy, ref_srgb, prov


# ---------------------------------------------------------------------------
# dataset build
# ---------------------------------------------------------------------------

def _build_one(src: SourcePair, cfg: SynthConfig, standard: BayerFrame,
               model: NoiseModel, out_dir: str, train_fraction: float):
    pair_id = f"{src.pair_id}-{cfg.band.value}"
    try:
        cap = load_bayer(src.cap_path)
        ref = load_ppm(src.ref_path)
        cap = centered_crop(cap, cfg.crop[0], cfg.crop[1])
        rng = RngStream(cfg.seed).child(pair_id)
        noisy, _, prov = synthesize_pair(cap, ref, standard, model, cfg, rng)
        split = split_of(pair_id, train_fraction)
        rel_raw = "/".join((cfg.band.value, split, pair_id + ".siedraw"))
        rel_srgb = "/".join((cfg.band.value, split, pair_id + ".ppm"))
        dest = os.path.join(out_dir, cfg.band.value, split)
        os.makedirs(dest, exist_ok=True)
        write_bayer(noisy, os.path.join(dest, pair_id + ".siedraw"))
        # The reference image passes through untouched, so copy bytes rather
        # than re-encode.
        shutil.copyfile(src.ref_path, os.path.join(dest, pair_id + ".ppm"))
        return PairEntry(
            pair_id=pair_id,
            source_cap_path=src.cap_path,
            source_ref_path=src.ref_path,
            band=cfg.band,
            eta=prov.eta,
            achieved_kl=prov.achieved_kl,
            iso=prov.iso,
            seed=prov.seed,
            out_raw_path=rel_raw,
            out_srgb_path=rel_srgb,
            saturation_warning=prov.saturation_warning,
        )
    except (DarkforgeError, OSError) as exc:
        return FailedEntry(pair_id, f"{type(exc).__name__}: {exc}")


def build_dataset(sources, configs, model: NoiseModel, out_dir: str,
                  train_fraction: float = DEFAULT_TRAIN_FRACTION) -> DatasetManifest:
    """Synthesize one pair per source per configured band.

    Individual pair failures are recorded in the manifest and do not stop
    the build; a build where nothing succeeded raises AllEntriesFailed.
    The manifest is also written to ``out_dir/manifest.json``.
    """
    sources = tuple(sources)
    configs = tuple(configs)
    if not sources:
        raise EmptyManifest("no source pairs to build")
    if not configs:
        raise EmptyManifest("no band configurations to build")
    bands = [cfg.band for cfg in configs]
    if len(set(bands)) != len(bands):
        raise InvalidRange("duplicate band configurations")

    standards = {cfg.band: load_bayer(cfg.standard_refs[0]) for cfg in configs}
    jobs = [(src, cfg) for cfg in configs for src in sources]

    def run(job):
        src, cfg = job
        return _build_one(src, cfg, standards[cfg.band], model, out_dir,
                          train_fraction)

    workers = thread_budget()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    entries = tuple(r for r in results if isinstance(r, PairEntry))
    failures = tuple(r for r in results if isinstance(r, FailedEntry))
    if not entries:
        detail = failures[0].error if failures else "no jobs ran"
        raise AllEntriesFailed(f"all {len(failures)} entries failed; first: {detail}")
    manifest = DatasetManifest(entries=entries, failures=failures)
    os.makedirs(out_dir, exist_ok=True)
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


# ---------------------------------------------------------------------------
# dataset verification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandReport:
    band: IlluminanceBand
    pairs: int
    mean_kl: float
    max_kl: float
    saturation_fraction: float
    within_threshold: bool

    def to_dict(self) -> dict:
        return {
            "band": self.band.value,
            "pairs": self.pairs,
            "mean_kl": self.mean_kl,
            "max_kl": self.max_kl,
            "saturation_fraction": self.saturation_fraction,
            "within_threshold": self.within_threshold,
        }


@dataclass(frozen=True)
class VerifyReport:
    rows: tuple = ()
    threshold: float = KL_WARN_THRESHOLD

    @property
    def all_within(self) -> bool:
        return all(r.within_threshold for r in self.rows)

    def render_json(self) -> str:
        doc = {
            "threshold": self.threshold,
            "all_within": self.all_within,
            "bands": [r.to_dict() for r in self.rows],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def render_text(self) -> str:
        header = f"{'band':<8}{'pairs':>6}{'mean_kl':>10}{'max_kl':>10}{'sat':>7}"
        lines = [header]
        for r in self.rows:
            lines.append(
                f"{r.band.value:<8}{r.pairs:>6}{r.mean_kl:>10.4f}"
                f"{r.max_kl:>10.4f}{r.saturation_fraction:>7.2f}"
            )
        return "\n".join(lines) + "\n"


def verify_dataset(manifest: DatasetManifest, standards: dict, root: str = ".",
                   bins: int = DEFAULT_BINS, gains=(1.0, 1.0, 1.0),
                   threshold: float = KL_WARN_THRESHOLD) -> VerifyReport:
    """Re-measure every stored frame's histogram KL against its band standard.

    ``standards`` maps IlluminanceBand to the standard BayerFrame; ``root``
    anchors the manifest's relative output paths.
    """
    if not manifest.entries:
        raise EmptyManifest("manifest has no successful entries to verify")
    by_band = {}
    for entry in manifest.entries:
        by_band.setdefault(entry.band, []).append(entry)

    rows = []
    for band in sorted(by_band, key=lambda b: b.value):
        if band not in standards:
            raise MissingFile(f"no standard frame supplied for band {band.value}")
        std_hist = luma_histogram(standards[band], bins=bins, gains=gains)
        kls = []
        saturated = 0
        for entry in by_band[band]:
            raw_path = os.path.join(root, entry.out_raw_path)
            srgb_path = os.path.join(root, entry.out_srgb_path)
            if not os.path.isfile(raw_path):
                raise MissingFile(f"{entry.pair_id}: missing {raw_path}")
            if not os.path.isfile(srgb_path):
                raise MissingFile(f"{entry.pair_id}: missing {srgb_path}")
            frame = load_bayer(raw_path)
            hist = luma_histogram(frame, bins=bins, gains=gains)
            kls.append(kl_divergence(hist, std_hist))
            saturated += int(entry.saturation_warning)
        n = len(kls)
        mean_kl = sum(kls) / n
        rows.append(BandReport(
            band=band,
            pairs=n,
            mean_kl=mean_kl,
            max_kl=max(kls),
            saturation_fraction=saturated / n,
            within_threshold=mean_kl <= threshold,
        ))
    return VerifyReport(rows=tuple(rows), threshold=threshold)
