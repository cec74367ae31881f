"""Procedural synthetic benchmark: parametric objects with exact metadata,
three-level question/rationale/answer templates, and object-level splitting.

Objects are unions of box/cylinder/disk primitives sampled on their surfaces.
Every metadata fact (part counts, removed parts, stability, containment,
symmetry, handle side) is computed analytically from the generative
parameters, so rationale assertions are verifiable by construction.

Frame conventions (build frame, before unit-sphere normalization): +z is up,
+x is the front of the object, +y is its right side as seen from the front
camera. Stability: an object is stable iff the surface-area-weighted centroid
projects strictly inside the convex hull of its ground-contact points.

Rationale strings embed machine-parsable assertions (see ``evalverify``),
e.g. ``count(leg)=3``, ``missing(rear-left-leg)``, ``property(stable)=false``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from hashlib import blake2b
from pathlib import Path

import numpy as np

from .autodiff import Rng
from .geometry import PointCloud, normalize_to_unit_sphere

FAMILIES = ["chair", "table", "mug", "box", "container"]

LEG_POSITIONS = ["front-left", "front-right", "rear-left", "rear-right"]


class DatagenError(ValueError):
    pass


class TemplateUnsatisfiable(Exception):
    """Raised when a template has no valid instantiation for the metadata."""


@dataclass
class ObjectMetadata:
    object_id: str
    family: str
    part_counts: dict  # present counts per part name
    removed_parts: list
    dimensions: dict
    handle: bool = False
    handle_side: str | None = None  # "left" | "right"
    mirror_symmetric: bool = True
    stable: bool = True
    containment: bool = False
    open_direction: str | None = None
    relations: dict = field(default_factory=dict)  # (subj, obj) key -> [dirs]

    def to_json(self) -> dict:
        d = asdict(self)
        d["relations"] = {f"{a}|{b}": v for (a, b), v in self.relations.items()}
        return d

    @staticmethod
    def from_json(d: dict) -> "ObjectMetadata":
        d = dict(d)
        d["relations"] = {
            tuple(k.split("|")): v for k, v in d.get("relations", {}).items()
        }
        return ObjectMetadata(**d)


@dataclass
class DatasetRecord:
    object_id: str
    level: int
    question: str
    rationale: str
    answer: str
    points_path: str = ""
    views_path: str = ""

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list
    ratios: tuple

    def split_of(self, object_id: str) -> str:
        for name in ("train", "val", "test"):
            if object_id in getattr(self, name):
                return name
        raise DatagenError(f"unknown object {object_id}")


# -- primitives -------------------------------------------------------------


@dataclass
class _Box:
    center: np.ndarray
    size: np.ndarray  # full extents

    @property
    def area(self) -> float:
        a, b, c = self.size
        return 2.0 * (a * b + b * c + a * c)

    @property
    def centroid(self) -> np.ndarray:
        return self.center

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        a, b, c = self.size
        face_areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
        # area-weighted face choice keeps thin parts from oversampling
        cdf = np.cumsum(face_areas / face_areas.sum())
        faces = np.searchsorted(cdf, rng.uniform((n,)))
        u = rng.uniform((n,), -0.5, 0.5)
        v = rng.uniform((n,), -0.5, 0.5)
        pts = np.zeros((n, 3))
        half = self.size / 2.0
        axis = faces // 2
        sign = np.where(faces % 2 == 0, 1.0, -1.0)
        others = np.array([[1, 2], [0, 2], [0, 1]])
        for i in range(n):
            ax = axis[i]
            o1, o2 = others[ax]
            pts[i, ax] = sign[i] * half[ax]
            pts[i, o1] = u[i] * self.size[o1]
            pts[i, o2] = v[i] * self.size[o2]
        return pts + self.center


@dataclass
class _Cylinder:
    center: np.ndarray  # of the axis midpoint
    radius: float
    height: float
    caps: tuple = (False, False)  # (bottom, top)

    @property
    def area(self) -> float:
        lateral = 2.0 * np.pi * self.radius * self.height
        cap = np.pi * self.radius**2
        return lateral + cap * sum(self.caps)

    @property
    def centroid(self) -> np.ndarray:
        # lateral centroid is the center; caps offset it along z
        lateral = 2.0 * np.pi * self.radius * self.height
        cap = np.pi * self.radius**2
        total = self.area
        z = lateral * self.center[2]
        if self.caps[0]:
            z += cap * (self.center[2] - self.height / 2.0)
        if self.caps[1]:
            z += cap * (self.center[2] + self.height / 2.0)
        return np.array([self.center[0], self.center[1], z / total])

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        lateral = 2.0 * np.pi * self.radius * self.height
        cap = np.pi * self.radius**2
        weights = [lateral]
        kinds = ["side"]
        if self.caps[0]:
            weights.append(cap)
            kinds.append("bottom")
        if self.caps[1]:
            weights.append(cap)
            kinds.append("top")
        cdf = np.cumsum(np.array(weights) / np.sum(weights))
        choice = np.searchsorted(cdf, rng.uniform((n,)))
        theta = rng.uniform((n,), 0.0, 2.0 * np.pi)
        z = rng.uniform((n,), -0.5, 0.5) * self.height
        r = self.radius * np.sqrt(rng.uniform((n,)))
        pts = np.zeros((n, 3))
        for i in range(n):
            kind = kinds[choice[i]]
            if kind == "side":
                pts[i] = [
                    self.radius * np.cos(theta[i]),
                    self.radius * np.sin(theta[i]),
                    z[i],
                ]
            else:
                zz = -self.height / 2.0 if kind == "bottom" else self.height / 2.0
                pts[i] = [r[i] * np.cos(theta[i]), r[i] * np.sin(theta[i]), zz]
        return pts + self.center


# -- stability --------------------------------------------------------------


def _point_in_hull_2d(point: np.ndarray, hull_pts: np.ndarray, eps: float = 1e-9):
    """Strictly-inside test against the convex hull of 2D points."""
    if hull_pts.shape[0] < 3:
        return False
    center = hull_pts.mean(axis=0)
    angles = np.arctan2(hull_pts[:, 1] - center[1], hull_pts[:, 0] - center[0])
    ordered = hull_pts[np.argsort(angles, kind="stable")]
    n = ordered.shape[0]
    for i in range(n):
        a, b = ordered[i], ordered[(i + 1) % n]
        edge = b - a
        cross = edge[0] * (point[1] - a[1]) - edge[1] * (point[0] - a[0])
        if cross <= eps:  # on or outside an edge: not strictly inside
            return False
    return True


def _stability(parts: dict, contact_xy: np.ndarray) -> bool:
    total_area = sum(p.area for p in parts.values())
    centroid = sum(p.area * p.centroid for p in parts.values()) / total_area
    return _point_in_hull_2d(centroid[:2], contact_xy)


# -- object builders --------------------------------------------------------


def _build_chair(rng: Rng):
    seat_w = 0.8 + 0.2 * rng.uniform(())
    seat_d = 0.8 + 0.2 * rng.uniform(())
    seat_t = 0.08
    leg_h = 0.45 + 0.15 * rng.uniform(())
    leg_w = 0.07
    back_h = 0.5 + 0.2 * rng.uniform(())
    armrests = 2 if rng.uniform(()) < 0.5 else 0
    removed = None
    if rng.uniform(()) < 0.5:
        removed = LEG_POSITIONS[int(rng.integers(0, 4))]

    parts = {}
    parts["seat"] = _Box(
        np.array([0.0, 0.0, leg_h + seat_t / 2]), np.array([seat_d, seat_w, seat_t])
    )
    parts["back"] = _Box(
        np.array([-(seat_d / 2 - 0.04), 0.0, leg_h + seat_t + back_h / 2]),
        np.array([0.08, seat_w, back_h]),
    )
    contact = []
    leg_xy = {
        "front-left": (seat_d / 2 - leg_w, -(seat_w / 2 - leg_w)),
        "front-right": (seat_d / 2 - leg_w, seat_w / 2 - leg_w),
        "rear-left": (-(seat_d / 2 - leg_w), -(seat_w / 2 - leg_w)),
        "rear-right": (-(seat_d / 2 - leg_w), seat_w / 2 - leg_w),
    }
    for name, (x, y) in leg_xy.items():
        if name == removed:
            continue
        parts[f"{name}-leg"] = _Box(
            np.array([x, y, leg_h / 2]), np.array([leg_w, leg_w, leg_h])
        )
        contact.append([x, y])
    if armrests:
        for sy in (-1.0, 1.0):
            tag = "left" if sy < 0 else "right"
            parts[f"{tag}-armrest"] = _Box(
                np.array([0.0, sy * (seat_w / 2 - 0.03), leg_h + seat_t + 0.15]),
                np.array([seat_d * 0.8, 0.06, 0.06]),
            )

    stable = _stability(parts, np.array(contact))
    meta = ObjectMetadata(
        object_id="",
        family="chair",
        part_counts={
            "leg": 4 - (1 if removed else 0),
            "armrest": armrests,
            "seat": 1,
            "back": 1,
        },
        removed_parts=[f"{removed}-leg"] if removed else [],
        dimensions={
            "seat": [seat_d, seat_w, seat_t],
            "leg": [leg_w, leg_w, leg_h],
            "back-height": [back_h],
        },
        mirror_symmetric=removed is None,
        stable=stable,
        relations={("back", "seat"): ["rear-of"]},
    )
    return parts, meta


def _build_table(rng: Rng):
    top_w = 1.0 + 0.4 * rng.uniform(())
    top_d = 1.0 + 0.4 * rng.uniform(())
    top_t = 0.08
    leg_h = 0.6 + 0.2 * rng.uniform(())
    leg_w = 0.08
    removed = None
    if rng.uniform(()) < 0.5:
        removed = LEG_POSITIONS[int(rng.integers(0, 4))]

    parts = {
        "top": _Box(
            np.array([0.0, 0.0, leg_h + top_t / 2]), np.array([top_d, top_w, top_t])
        )
    }
    contact = []
    leg_xy = {
        "front-left": (top_d / 2 - leg_w, -(top_w / 2 - leg_w)),
        "front-right": (top_d / 2 - leg_w, top_w / 2 - leg_w),
        "rear-left": (-(top_d / 2 - leg_w), -(top_w / 2 - leg_w)),
        "rear-right": (-(top_d / 2 - leg_w), top_w / 2 - leg_w),
    }
    for name, (x, y) in leg_xy.items():
        if name == removed:
            continue
        parts[f"{name}-leg"] = _Box(
            np.array([x, y, leg_h / 2]), np.array([leg_w, leg_w, leg_h])
        )
        contact.append([x, y])

    stable = _stability(parts, np.array(contact))
    meta = ObjectMetadata(
        object_id="",
        family="table",
        part_counts={"leg": 4 - (1 if removed else 0), "top": 1},
        removed_parts=[f"{removed}-leg"] if removed else [],
        dimensions={"top": [top_d, top_w, top_t], "leg": [leg_w, leg_w, leg_h]},
        mirror_symmetric=removed is None,
        stable=stable,
    )
    return parts, meta


def _build_mug(rng: Rng):
    radius = 0.35 + 0.1 * rng.uniform(())
    height = 0.7 + 0.2 * rng.uniform(())
    side = "left" if rng.uniform(()) < 0.5 else "right"
    sy = -1.0 if side == "left" else 1.0

    parts = {
        "body": _Cylinder(
            np.array([0.0, 0.0, height / 2]), radius, height, caps=(True, False)
        ),
        "handle": _Box(
            np.array([0.0, sy * (radius + 0.06), height / 2]),
            np.array([0.08, 0.12, height * 0.5]),
        ),
    }
    contact = np.array(
        [
            [radius * np.cos(t), radius * np.sin(t)]
            for t in np.linspace(0, 2 * np.pi, 16, endpoint=False)
        ]
    )
    stable = _stability(parts, contact)
    meta = ObjectMetadata(
        object_id="",
        family="mug",
        part_counts={"handle": 1, "body": 1, "base": 1},
        removed_parts=[],
        dimensions={"body": [radius, height], "handle": [0.08, 0.12, height * 0.5]},
        handle=True,
        handle_side=side,
        mirror_symmetric=False,
        stable=stable,
        containment=True,
        open_direction="up",
        relations={("handle", "body"): [f"{side}-of"]},
    )
    return parts, meta


def _build_box(rng: Rng):
    size = np.array(
        [0.6 + 0.5 * rng.uniform(()), 0.6 + 0.5 * rng.uniform(()),
         0.5 + 0.4 * rng.uniform(())]
    )
    parts = {"shell": _Box(np.array([0.0, 0.0, size[2] / 2]), size)}
    corners = np.array(
        [[sx * size[0] / 2, sy * size[1] / 2] for sx in (-1, 1) for sy in (-1, 1)]
    )
    meta = ObjectMetadata(
        object_id="",
        family="box",
        part_counts={"shell": 1, "wall": 4},
        removed_parts=[],
        dimensions={"shell": size.tolist()},
        mirror_symmetric=True,
        stable=_stability(parts, corners),
        containment=False,
    )
    return parts, meta


def _build_container(rng: Rng):
    d = 0.7 + 0.4 * rng.uniform(())
    w = 0.7 + 0.4 * rng.uniform(())
    h = 0.5 + 0.3 * rng.uniform(())
    t = 0.05
    parts = {
        "base": _Box(np.array([0.0, 0.0, t / 2]), np.array([d, w, t])),
        "front-wall": _Box(np.array([d / 2 - t / 2, 0.0, h / 2]), np.array([t, w, h])),
        "rear-wall": _Box(np.array([-(d / 2 - t / 2), 0.0, h / 2]), np.array([t, w, h])),
        "left-wall": _Box(np.array([0.0, -(w / 2 - t / 2), h / 2]), np.array([d, t, h])),
        "right-wall": _Box(np.array([0.0, w / 2 - t / 2, h / 2]), np.array([d, t, h])),
    }
    corners = np.array(
        [[sx * d / 2, sy * w / 2] for sx in (-1, 1) for sy in (-1, 1)]
    )
    meta = ObjectMetadata(
        object_id="",
        family="container",
        part_counts={"base": 1, "wall": 4},
        removed_parts=[],
        dimensions={"base": [d, w, t], "wall-height": [h]},
        mirror_symmetric=True,
        stable=_stability(parts, corners),
        containment=True,
        open_direction="up",
    )
    return parts, meta


_BUILDERS = {
    "chair": _build_chair,
    "table": _build_table,
    "mug": _build_mug,
    "box": _build_box,
    "container": _build_container,
}


def generate_object(
    family: str, rng: Rng, n_points: int = 1024, object_id: str = ""
) -> tuple[PointCloud, ObjectMetadata]:
    """Sample a normalized surface point cloud; metadata is exact by design."""
    if family not in _BUILDERS:
        raise DatagenError(f"unsupported family: {family}")
    parts, meta = _BUILDERS[family](rng)
    areas = np.array([p.area for p in parts.values()])
    alloc = np.maximum(1, np.round(areas / areas.sum() * n_points).astype(int))
    # trim/pad to the exact budget, largest part absorbs the difference
    alloc[int(np.argmax(alloc))] += n_points - int(alloc.sum())
    chunks = [p.sample(int(k), rng) for p, k in zip(parts.values(), alloc)]
    cloud = normalize_to_unit_sphere(np.concatenate(chunks), object_id=object_id)
    meta.object_id = object_id
    return cloud, meta


# -- question / rationale templates -----------------------------------------


def _legs_rationale(meta: ObjectMetadata) -> str:
    n = meta.part_counts["leg"]
    if meta.removed_parts:
        return (
            f"count(leg)={n} and missing({meta.removed_parts[0]}) "
            "so one support is absent"
        )
    return f"count(leg)={n} and every support is present"


def _template_l1_legs(meta, rng):
    if "leg" not in meta.part_counts:
        raise TemplateUnsatisfiable
    return (
        f"how many legs does this {meta.family} have ?",
        _legs_rationale(meta),
        str(meta.part_counts["leg"]),
    )


def _template_l1_armrests(meta, rng):
    if "armrest" not in meta.part_counts:
        raise TemplateUnsatisfiable
    n = meta.part_counts["armrest"]
    return (
        f"how many armrests does this {meta.family} have ?",
        f"the side views show count(armrest)={n}",
        str(n),
    )


def _template_l1_handle(meta, rng):
    if "handle" not in meta.part_counts:
        raise TemplateUnsatisfiable
    return (
        f"does this {meta.family} have a handle ?",
        "exists(handle) attached to the body",
        "yes",
    )


def _template_l2_opening(meta, rng):
    if not meta.containment and meta.family != "box":
        raise TemplateUnsatisfiable
    if meta.containment and meta.open_direction == "up":
        return (
            f"which view looks into the opening of this {meta.family} ?",
            "property(containment)=true and the open side faces up "
            "so the zenith view reveals it",
            "zenith",
        )
    return (
        f"which view looks into the opening of this {meta.family} ?",
        "property(containment)=false because the shell is sealed on every side",
        "none",
    )


def _template_l2_nadir_legs(meta, rng):
    if "leg" not in meta.part_counts:
        raise TemplateUnsatisfiable
    n = meta.part_counts["leg"]
    return (
        f"how many leg tips are visible from the nadir view ?",
        f"the nadir view shows the underside where count(leg)={n}",
        str(n),
    )


def _template_l2_handle_side(meta, rng):
    if not meta.handle:
        raise TemplateUnsatisfiable
    side = meta.handle_side
    return (
        "on which side of the body does the handle appear in the front view ?",
        f"relation(handle,{side}-of,body) as seen from the front view",
        side,
    )


def _template_l3_stability(meta, rng):
    if "leg" not in meta.part_counts and meta.family not in (
        "mug", "box", "container",
    ):
        raise TemplateUnsatisfiable
    if meta.stable:
        return (
            f"is this {meta.family} stable when placed on the ground ?",
            "the supports enclose the center of mass so property(stable)=true",
            "yes",
        )
    reason = (
        f"missing({meta.removed_parts[0]}) shifts support away "
        "from the center of mass so property(stable)=false"
        if meta.removed_parts
        else "the support polygon excludes the center of mass "
        "so property(stable)=false"
    )
    return (
        f"is this {meta.family} stable when placed on the ground ?",
        reason,
        "no",
    )


def _template_l3_containment(meta, rng):
    word = "true" if meta.containment else "false"
    rationale = (
        f"property(containment)={word} with walls and an open top"
        if meta.containment
        else f"property(containment)={word} since no cavity opens outward"
    )
    return (
        f"can this {meta.family} hold water ?",
        rationale,
        "yes" if meta.containment else "no",
    )


def _template_l3_symmetry(meta, rng):
    word = "true" if meta.mirror_symmetric else "false"
    detail = (
        f"missing({meta.removed_parts[0]}) breaks the mirror"
        if meta.removed_parts
        else (
            "exists(handle) on one side only"
            if meta.handle
            else "both halves mirror each other"
        )
    )
    return (
        f"is this {meta.family} mirror symmetric ?",
        f"property(symmetric)={word} because {detail}",
        "yes" if meta.mirror_symmetric else "no",
    )


_TEMPLATES = {
    1: [_template_l1_legs, _template_l1_armrests, _template_l1_handle],
    2: [_template_l2_opening, _template_l2_nadir_legs, _template_l2_handle_side],
    3: [_template_l3_stability, _template_l3_containment, _template_l3_symmetry],
}


def generate_qa(meta: ObjectMetadata, level: int, rng: Rng) -> DatasetRecord:
    """Instantiate a random satisfiable template at the given level."""
    if level not in _TEMPLATES:
        raise DatagenError(f"level must be 1-3, got {level}")
    order = list(range(len(_TEMPLATES[level])))
    rng.shuffle(order)
    for i in order:
        try:
            question, rationale, answer = _TEMPLATES[level][i](meta, rng)
        except TemplateUnsatisfiable:
            continue
        return DatasetRecord(
            object_id=meta.object_id,
            level=level,
            question=question,
            rationale=rationale,
            answer=answer,
        )
    raise TemplateUnsatisfiable(f"no level-{level} template fits {meta.family}")


# -- lexicon ----------------------------------------------------------------


def build_lexicon() -> list[str]:
    """Deterministic word list covering every template output."""
    words: set[str] = set()
    words.update(FAMILIES)
    words.update(str(n) for n in range(9))
    words.update(
        """how many legs does this have ? armrests a handle yes no the side
        views show attached to body which view looks into opening of and open
        faces up so zenith reveals it because shell is sealed on every leg
        tips are visible from nadir where underside appear in front as seen
        stable when placed ground supports enclose center mass shifts support
        away polygon excludes can hold water walls an top since cavity opens
        outward mirror symmetric breaks one only both halves each other none
        left right absent present shows with""".split()
    )
    # assertion tokens
    for n in range(7):
        words.add(f"count(leg)={n}")
    for n in range(3):
        words.add(f"count(armrest)={n}")
    words.add("exists(handle)")
    for pos in LEG_POSITIONS:
        words.add(f"missing({pos}-leg)")
    for prop in ("stable", "containment", "symmetric"):
        words.add(f"property({prop})=true")
        words.add(f"property({prop})=false")
    words.add("relation(handle,left-of,body)")
    words.add("relation(handle,right-of,body)")
    return sorted(words)


# -- splitting --------------------------------------------------------------


def _split_key(object_id: str, seed: int) -> int:
    digest = blake2b(
        f"{seed}:{object_id}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


def split_objects(
    ids: list[str], ratios=(0.795, 0.102, 0.103), seed: int = 0
) -> SplitManifest:
    """Deterministic keyed-hash partition with exact per-split sizes.

    Objects are ordered by a 64-bit keyed hash of their id and cut at the
    ratio boundaries, so all records of one object share a split and sizes
    deviate by at most one object from the targets.
    """
    if not ids:
        raise DatagenError("empty id list")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatagenError("ratios must sum to 1")
    ordered = sorted(set(ids), key=lambda oid: (_split_key(oid, seed), oid))
    n = len(ordered)
    # largest-remainder apportionment keeps sizes within one of the targets
    raw = np.array(ratios) * n
    sizes = np.floor(raw).astype(int)
    remainder = n - sizes.sum()
    for i in np.argsort(-(raw - np.floor(raw)), kind="stable")[:remainder]:
        sizes[i] += 1
    train = ordered[: sizes[0]]
    val = ordered[sizes[0] : sizes[0] + sizes[1]]
    test = ordered[sizes[0] + sizes[1] :]
    return SplitManifest(train=train, val=val, test=test, ratios=tuple(ratios))


def save_manifest(manifest: SplitManifest, path) -> None:
    Path(path).write_text(
        json.dumps(
            {
                "train": manifest.train,
                "val": manifest.val,
                "test": manifest.test,
                "ratios": list(manifest.ratios),
            },
            indent=2,
        )
    )


def load_manifest(path) -> SplitManifest:
    d = json.loads(Path(path).read_text())
    return SplitManifest(
        train=d["train"], val=d["val"], test=d["test"], ratios=tuple(d["ratios"])
    )
