"""Data model, canonical JSONL feature files, split protocols, synthesis.

A corpus is a list of validated ``VideoRecord`` objects.  The JSONL schema
is the contract between this engine and any upstream feature extractor:
one object per line with ``id``, ``domain``, ``label``, ``text`` and a
``features`` object holding ``visual``/``text``/``audio`` arrays, plus an
optional ``reports`` object with pre-generated reasoning.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError


class Domain(enum.Enum):
    SOCIETY = "Society"
    HEALTH = "Health"
    DISASTER = "Disaster"
    CULTURE = "Culture"
    EDUCATION = "Education"
    FINANCE = "Finance"
    POLITICS = "Politics"
    SCIENCE = "Science"
    MILITARY = "Military"

    @classmethod
    def parse(cls, raw: str) -> "Domain":
        """Case-sensitive parse of the canonical domain string."""
        try:
            return cls(raw)
        except ValueError:
            raise DataError(f"unknown domain {raw!r}") from None


DOMAINS: tuple[Domain, ...] = tuple(Domain)

MODALITIES = ("v", "t", "a")

# Marker tokens the synthetic generator may leak into record text; the
# stub reasoning client keys its report polarity off them.
FAKE_MARKER = "mrk-fabricated"
REAL_MARKER = "mrk-verified"


@dataclass
class FeatureDims:
    """Configured lengths of the three raw feature vectors."""

    d_v: int = 768
    d_t: int = 768
    d_a: int = 128

    def of(self, modality: str) -> int:
        return {"v": self.d_v, "t": self.d_t, "a": self.d_a}[modality]


SYNTH_DIMS = FeatureDims(d_v=32, d_t=32, d_a=16)


@dataclass(eq=False)
class VideoRecord:
    id: str
    domain: Domain
    label: int
    text: str
    visual_feature: np.ndarray
    text_feature: np.ndarray
    audio_feature: np.ndarray
    reports: dict[str, dict] | None = None

    def feature(self, modality: str) -> np.ndarray:
        return {
            "v": self.visual_feature,
            "t": self.text_feature,
            "a": self.audio_feature,
        }[modality]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain == other.domain
            and self.label == other.label
            and self.text == other.text
            and np.array_equal(self.visual_feature, other.visual_feature)
            and np.array_equal(self.text_feature, other.text_feature)
            and np.array_equal(self.audio_feature, other.audio_feature)
            and self.reports == other.reports
        )


def validate_record(rec: VideoRecord, dims: FeatureDims, where: str = "record") -> None:
    """Raise DataError unless the record satisfies every invariant."""
    if not isinstance(rec.id, str) or not rec.id:
        raise DataError(f"{where}: id must be a nonempty string")
    if rec.label not in (0, 1):
        raise DataError(f"{where}: label must be 0 or 1, got {rec.label!r}")
    if not isinstance(rec.text, str):
        raise DataError(f"{where}: text must be a string")
    for modality, name in (("v", "visual"), ("t", "text"), ("a", "audio")):
        vec = rec.feature(modality)
        want = dims.of(modality)
        if vec.ndim != 1 or vec.shape[0] != want:
            raise DataError(
                f"{where}: {name} feature has length {vec.shape[0] if vec.ndim == 1 else vec.shape},"
                f" expected {want}"
            )
        if not np.isfinite(vec).all():
            raise DataError(f"{where}: {name} feature contains non-finite values")
    if rec.reports is not None:
        for key, rep in rec.reports.items():
            if key not in MODALITIES:
                raise DataError(f"{where}: reports key {key!r} not in {MODALITIES}")
            if not isinstance(rep.get("text"), str):
                raise DataError(f"{where}: reports[{key!r}].text must be a string")
            conf = rep.get("confidence")
            if not isinstance(conf, (int, float)) or not math.isfinite(conf):
                raise DataError(f"{where}: reports[{key!r}].confidence must be finite")


def _record_from_obj(obj: dict, dims: FeatureDims, where: str) -> VideoRecord:
    for key in ("id", "domain", "label", "text", "features"):
        if key not in obj:
            raise DataError(f"{where}: missing field {key!r}")
    feats = obj["features"]
    for key in ("visual", "text", "audio"):
        if key not in feats:
            raise DataError(f"{where}: features missing {key!r}")
    try:
        domain = Domain.parse(obj["domain"])
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None
    rec = VideoRecord(
        id=obj["id"],
        domain=domain,
        label=obj["label"],
        text=obj["text"],
        visual_feature=np.asarray(feats["visual"], dtype=np.float64),
        text_feature=np.asarray(feats["text"], dtype=np.float64),
        audio_feature=np.asarray(feats["audio"], dtype=np.float64),
        reports=obj.get("reports"),
    )
    validate_record(rec, dims, where)
    return rec


def load_corpus(path: str | Path, dims: FeatureDims | None = None) -> list[VideoRecord]:
    """Load and validate a JSONL feature file.

    With ``dims=None`` the dimensions are inferred from the first record
    and then enforced on the rest.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    records: list[VideoRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path.name} line {lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            if dims is None:
                feats = obj.get("features", {})
                try:
                    dims = FeatureDims(
                        d_v=len(feats["visual"]),
                        d_t=len(feats["text"]),
                        d_a=len(feats["audio"]),
                    )
                except (KeyError, TypeError):
                    raise DataError(f"{where}: malformed features object") from None
            rec = _record_from_obj(obj, dims, where)
            if rec.id in seen:
                raise DataError(f"{where}: duplicate id {rec.id!r}")
            seen.add(rec.id)
            records.append(rec)
    if not records:
        raise DataError(f"{path}: corpus is empty")
    return records


def record_to_obj(rec: VideoRecord) -> dict:
    obj = {
        "id": rec.id,
        "domain": rec.domain.value,
        "label": rec.label,
        "text": rec.text,
        "features": {
            "visual": rec.visual_feature.tolist(),
            "text": rec.text_feature.tolist(),
            "audio": rec.audio_feature.tolist(),
        },
    }
    if rec.reports is not None:
        obj["reports"] = rec.reports
    return obj


def save_corpus(records: list[VideoRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_obj(rec), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class SplitSpec:
    kind: str = "general"  # "general" | "leave-one-domain-out"
    seed: int = 0
    ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)
    target_domain: Domain | None = None

    def validate(self) -> None:
        if self.kind not in ("general", "leave-one-domain-out"):
            raise DataError(f"unknown split kind {self.kind!r}")
        if self.kind == "general":
            if any(r <= 0 for r in self.ratios):
                raise DataError("split ratios must all be positive")
            if abs(sum(self.ratios) - 1.0) > 1e-9:
                raise DataError(f"split ratios must sum to 1, got {sum(self.ratios)}")
        elif self.target_domain is None:
            raise DataError("leave-one-domain-out split needs a target domain")


def _largest_remainder(total: int, ratios: tuple[float, ...]) -> list[int]:
    exact = [total * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    rem = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    return counts


def split(
    corpus: list[VideoRecord], spec: SplitSpec
) -> tuple[list[VideoRecord], list[VideoRecord], list[VideoRecord]]:
    """Stratified (label, domain) split with deterministic assignment.

    Per-cell counts stay within +-1 of the exact ratio share while global
    split sizes match the largest-remainder rounding of ``n * ratio``.
    """
    spec.validate()
    if spec.kind != "general":
        raise DataError("split() handles the general kind; use lodo_split for LODO")
    if not corpus:
        raise DataError("cannot split an empty corpus")
    rng = np.random.default_rng(spec.seed)
    cells: dict[tuple[int, str], list[VideoRecord]] = {}
    for rec in corpus:
        cells.setdefault((rec.label, rec.domain.value), []).append(rec)
    targets = _largest_remainder(len(corpus), spec.ratios)

    cell_keys = sorted(cells)
    alloc: dict[tuple[int, str], list[int]] = {}
    for key in cell_keys:
        members = cells[key]
        order = rng.permutation(len(members))
        cells[key] = [members[i] for i in order]
        alloc[key] = _largest_remainder(len(members), spec.ratios)

    # Rebalance so global totals hit the targets while every cell stays
    # within +-1 of its exact share.  A donor cell with alloc > exact
    # always contains a destination split with alloc < exact, so a
    # +-1-preserving single move always exists.
    def exact(key, s):
        return len(cells[key]) * spec.ratios[s]

    totals = [sum(alloc[k][s] for k in cell_keys) for s in range(3)]
    guard = 0
    while totals != targets:
        guard += 1
        if guard > 10 * len(corpus) + 100:
            raise DataError("stratified split failed to rebalance")
        over = max(range(3), key=lambda s: (totals[s] - targets[s], -s))
        move = None  # (priority, key, dest)
        for key in cell_keys:
            if alloc[key][over] < exact(key, over) - 1e-9:
                continue
            for dest in range(3):
                if dest == over or alloc[key][dest] > exact(key, dest) + 1e-9:
                    continue
                deficit = targets[dest] - totals[dest]
                cand = (deficit, key, dest)
                if move is None or cand > move:
                    move = cand
        if move is None:
            raise DataError("stratified split failed to rebalance")
        _, key, dest = move
        alloc[key][over] -= 1
        alloc[key][dest] += 1
        totals[over] -= 1
        totals[dest] += 1

    parts: tuple[list[VideoRecord], ...] = ([], [], [])
    for key in cell_keys:
        members = cells[key]
        lo = 0
        for s in range(3):
            hi = lo + alloc[key][s]
            parts[s].extend(members[lo:hi])
            lo = hi
    return parts


def lodo_split(
    corpus: list[VideoRecord], target: Domain
) -> tuple[list[VideoRecord], list[VideoRecord]]:
    """Leave-one-domain-out partition: test gets every target-domain record."""
    test = [r for r in corpus if r.domain == target]
    train = [r for r in corpus if r.domain != target]
    if not test:
        raise DataError(f"target domain {target.value} absent from corpus")
    if not train:
        raise DataError("corpus has no records outside the target domain")
    return train, test


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_WORDS = (
    "ridge", "harbor", "lantern", "meadow", "copper", "violet", "summit",
    "ember", "willow", "falcon", "quartz", "prairie", "cobalt", "drift",
    "marble", "sable",
)


def _hash_words(rng: np.random.Generator, count: int) -> str:
    return " ".join(_WORDS[int(i)] for i in rng.integers(0, len(_WORDS), size=count))


def _weighted_cycle(weights: np.ndarray, count: int) -> list[int]:
    """Largest-remainder apportionment of ``count`` slots over weights."""
    if count == 0:
        return []
    share = weights / weights.sum() * count
    base = np.floor(share).astype(int)
    rem = count - int(base.sum())
    order = sorted(range(len(weights)), key=lambda i: (-(share[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    out: list[int] = []
    for i, c in enumerate(base):
        out.extend([i] * int(c))
    return out


def synth_generate(
    n: int,
    separability: float,
    leak: float,
    seed: int,
    dims: FeatureDims = SYNTH_DIMS,
    fake_fraction: float = 1.0 / 3.0,
    latent_dim: int = 16,
    noise: float = 0.05,
    domain_label_skew: float = 0.0,
    label_cluster: float = 0.0,
) -> list[VideoRecord]:
    """Generate a labeled synthetic corpus with controllable difficulty.

    Real records draw all three features near one shared per-record
    latent; fake records rotate the text latent away from it by an angle
    proportional to ``separability``.  With probability ``leak`` the
    record text embeds the label's marker token for the stub reasoning
    client to find.  A nonzero ``domain_label_skew`` tilts per-domain
    fake rates around the global ratio (domain identity becomes
    informative) while keeping the overall label balance.  A nonzero
    ``label_cluster`` pulls fake latents toward a fixed direction so
    semantic neighbours tend to share labels.
    """
    if n < 18:
        raise DataError(f"synthetic corpus needs n >= 18, got {n}")
    if not (0.0 <= separability <= 1.0 and 0.0 <= leak <= 1.0):
        raise DataError("separability and leak must lie in [0, 1]")
    if not (0.0 <= domain_label_skew <= 1.0):
        raise DataError("domain_label_skew must lie in [0, 1]")
    if label_cluster < 0.0:
        raise DataError("label_cluster must be >= 0")
    rng = np.random.default_rng(seed)

    n_fake = int(round(n * fake_fraction))
    labels = [1] * n_fake + [0] * (n - n_fake)
    # cycle domains within each label group; with skew, fakes favour the
    # front of the domain list and reals the back, keeping totals intact
    k = len(DOMAINS)
    fake_w = np.asarray([1.0 + domain_label_skew * (1.0 - 2.0 * i / (k - 1)) for i in range(k)])
    real_w = 2.0 - fake_w
    domains = [DOMAINS[i] for i in _weighted_cycle(fake_w, n_fake)]
    domains += [DOMAINS[i] for i in _weighted_cycle(real_w, n - n_fake)]
    order = rng.permutation(n)

    # one shared base projection, sliced per modality, keeps the feature
    # spaces aligned so raw cross-modal cosines reflect latent agreement
    d_max = max(dims.d_v, dims.d_t, dims.d_a)
    base = rng.normal(0.0, 1.0 / math.sqrt(latent_dim), size=(latent_dim, d_max))
    proj = {m: base[:, : dims.of(m)] for m in ("v", "t", "a")}
    max_angle = 0.95 * math.pi / 2.0
    cluster_dir = rng.normal(size=latent_dim)
    cluster_dir /= np.linalg.norm(cluster_dir)
    # opposite pulls sized so the population latent mean stays near zero
    pull = {1: label_cluster, 0: -label_cluster * n_fake / max(1, n - n_fake)}

    records: list[VideoRecord] = []
    for idx in order:
        label = labels[idx]
        domain = domains[idx]
        z = rng.normal(size=latent_dim)
        z /= np.linalg.norm(z)
        if label_cluster > 0.0:
            z = z + pull[label] * cluster_dir
            z /= np.linalg.norm(z)
        if label == 1 and separability > 0.0:
            u = rng.normal(size=latent_dim)
            u -= (u @ z) * z
            u /= np.linalg.norm(u)
            angle = separability * max_angle
            z_text = math.cos(angle) * z + math.sin(angle) * u
        else:
            z_text = z
        f_v = z @ proj["v"] + noise * rng.normal(size=dims.d_v)
        f_t = z_text @ proj["t"] + noise * rng.normal(size=dims.d_t)
        f_a = z @ proj["a"] + noise * rng.normal(size=dims.d_a)

        text = f"{domain.value.lower()} clip {int(idx)}: {_hash_words(rng, 4)}"
        if rng.random() < leak:
            text += " " + (FAKE_MARKER if label == 1 else REAL_MARKER)

        records.append(
            VideoRecord(
                id=f"synth-{seed}-{int(idx):05d}",
                domain=domain,
                label=label,
                text=text,
                visual_feature=f_v,
                text_feature=f_t,
                audio_feature=f_a,
            )
        )
    for rec in records:
        validate_record(rec, dims, rec.id)
    return records
