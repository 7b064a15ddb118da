"""Interaction records, catalogs, per-school datasets, and rating matrices.

File formats
------------

Interaction CSV (one file per school), header required::

    student,course,kind,activity,t_or_As,T_or_Ac[,date]

* ``kind=duration``: an enrollment whose engagement signal is time spent
  ``t`` out of course length ``T`` (the two trailing numeric columns);
  ``activity`` is empty.
* ``kind=score``: an enrollment whose signal is assessment points ``A_s``
  against the class average ``A_c``; ``activity`` is empty.
* ``kind=activity``: participation in an extracurricular activity tied to a
  course; ``activity`` names the activity, the numeric columns hold the
  engagement duration for the activity session.

The optional ``date`` column (ISO ``YYYY-MM-DD``) must be present on all
records of a file or none.

Catalog sidecar (shared across schools), tab separated::

    course:<id>\t<description text>
    activity:<id>\t<description text>

Dense indices follow order of appearance in the catalog file; student dense
indices follow sorted raw id order within a school.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from fedcourse.errors import DatasetError

CSV_COLUMNS = ("student", "course", "kind", "activity", "t_or_As", "T_or_Ac")
CSV_DATE_COLUMN = "date"


@dataclass(frozen=True)
class Duration:
    """Engagement time ``t`` out of a total length ``T``, both in seconds."""

    t: float
    total: float


@dataclass(frozen=True)
class Score:
    """Assessment points against the class average for the same assessment."""

    points: float
    class_average: float


Signal = Duration | Score


class InteractionKind(Enum):
    ENROLLMENT = "enrollment"
    ACTIVITY = "activity"


@dataclass(frozen=True)
class Interaction:
    """One student/course event.  Indices are dense (see module docstring)."""

    student: int
    course: int
    kind: InteractionKind
    signal: Signal
    activity: int | None = None
    date: str | None = None


def derive_rating(signal: Signal) -> float:
    """Implicit rating in [0, inf): relative engagement or relative score."""
    if isinstance(signal, Duration):
        if signal.total <= 0:
            raise DatasetError(f"course length must be positive, got {signal.total}")
        if signal.t < 0:
            raise DatasetError(f"engagement time must be non-negative, got {signal.t}")
        return signal.t / signal.total
    if isinstance(signal, Score):
        if signal.class_average <= 0:
            raise DatasetError(f"class average must be positive, got {signal.class_average}")
        if signal.points < 0:
            raise DatasetError(f"points must be non-negative, got {signal.points}")
        return signal.points / signal.class_average
    raise TypeError(f"unknown signal type: {type(signal).__name__}")


@dataclass(frozen=True)
class Catalog:
    """The shared course catalog plus the union of known activities.

    Positions in ``course_ids`` / ``activity_ids`` are the dense indices used
    everywhere else in the package.
    """

    course_ids: tuple[int, ...]
    course_texts: tuple[str, ...]
    activity_ids: tuple[int, ...] = ()
    activity_texts: tuple[str, ...] = ()
    _course_pos: dict[int, int] = field(init=False, repr=False, compare=False)
    _activity_pos: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.course_ids) != len(self.course_texts):
            raise DatasetError("course ids and texts differ in length")
        if len(self.activity_ids) != len(self.activity_texts):
            raise DatasetError("activity ids and texts differ in length")
        if len(set(self.course_ids)) != len(self.course_ids):
            raise DatasetError("duplicate course id in catalog")
        if len(set(self.activity_ids)) != len(self.activity_ids):
            raise DatasetError("duplicate activity id in catalog")
        object.__setattr__(self, "_course_pos", {c: i for i, c in enumerate(self.course_ids)})
        object.__setattr__(self, "_activity_pos", {a: i for i, a in enumerate(self.activity_ids)})

    @property
    def n_courses(self) -> int:
        return len(self.course_ids)

    @property
    def n_activities(self) -> int:
        return len(self.activity_ids)

    def course_index(self, raw_id: int) -> int:
        try:
            return self._course_pos[raw_id]
        except KeyError:
            raise DatasetError(f"unknown course id {raw_id}") from None

    def activity_index(self, raw_id: int) -> int:
        try:
            return self._activity_pos[raw_id]
        except KeyError:
            raise DatasetError(f"unknown activity id {raw_id}") from None


@dataclass(frozen=True)
class SchoolDataset:
    """All interactions of one school, reindexed against a shared catalog.

    ``student_ids`` maps dense student index -> raw id.  Interactions keep
    file order, which is also the temporal order for undated files.
    """

    school_id: int
    student_ids: tuple[int, ...]
    interactions: tuple[Interaction, ...]
    catalog: Catalog

    def __post_init__(self) -> None:
        if len(set(self.student_ids)) != len(self.student_ids):
            raise DatasetError("duplicate student id")
        m = len(self.student_ids)
        dated = [it.date is not None for it in self.interactions]
        if any(dated) and not all(dated):
            raise DatasetError("date must be present on all records or none")
        for it in self.interactions:
            if not 0 <= it.student < m:
                raise DatasetError(f"student index {it.student} out of range")
            if not 0 <= it.course < self.catalog.n_courses:
                raise DatasetError(f"course index {it.course} out of range")
            if it.kind is InteractionKind.ACTIVITY:
                if it.activity is None:
                    raise DatasetError("activity interaction without an activity index")
                if not 0 <= it.activity < self.catalog.n_activities:
                    raise DatasetError(f"activity index {it.activity} out of range")
            elif it.activity is not None:
                raise DatasetError("enrollment record carries an activity index")

    @property
    def n_students(self) -> int:
        return len(self.student_ids)

    @property
    def n_interactions(self) -> int:
        return len(self.interactions)

    @property
    def dated(self) -> bool:
        return bool(self.interactions) and self.interactions[0].date is not None

    def enrollments(self) -> tuple[Interaction, ...]:
        return tuple(it for it in self.interactions if it.kind is InteractionKind.ENROLLMENT)

    def participations(self) -> tuple[Interaction, ...]:
        return tuple(it for it in self.interactions if it.kind is InteractionKind.ACTIVITY)

    def local_activities(self) -> tuple[int, ...]:
        """Dense activity indices observed at this school, ascending."""
        return tuple(sorted({it.activity for it in self.participations() if it.activity is not None}))


@dataclass(frozen=True)
class RatingMatrix:
    """Dense ratings with an observation mask; unobserved cells hold 0."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise DatasetError("ratings and mask must be 2-D and congruent")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]


def temporal_order(interactions: tuple[Interaction, ...]) -> list[Interaction]:
    """Interactions sorted by date when dated, else file order."""
    records = list(interactions)
    if records and records[0].date is not None:
        records.sort(key=lambda it: it.date)  # stable: ties keep file order
    return records


def build_rating_matrix(ds: SchoolDataset) -> RatingMatrix:
    """Aggregate enrollment signals into an m x n matrix.

    A student re-interacting with the same course overwrites the cell in
    temporal order, so the latest signal wins.
    """
    m, n = ds.n_students, ds.catalog.n_courses
    values = np.zeros((m, n), dtype=np.float64)
    mask = np.zeros((m, n), dtype=bool)
    for it in temporal_order(ds.interactions):
        if it.kind is not InteractionKind.ENROLLMENT:
            continue
        values[it.student, it.course] = derive_rating(it.signal)
        mask[it.student, it.course] = True
    return RatingMatrix(values=values, mask=mask)


def course_average_vector(rating_matrices: list[RatingMatrix]) -> np.ndarray:
    """Mean observed rating per course across the given matrices.

    Courses nobody rated fall back to the global observed mean (0 when there
    are no observations at all), so the constraint target is always defined.
    """
    if not rating_matrices:
        raise ValueError("need at least one rating matrix")
    n = rating_matrices[0].shape[1]
    total = np.zeros(n, dtype=np.float64)
    count = np.zeros(n, dtype=np.float64)
    for rm in rating_matrices:
        if rm.shape[1] != n:
            raise DatasetError("rating matrices disagree on catalog size")
        total += np.where(rm.mask, rm.values, 0.0).sum(axis=0)
        count += rm.mask.sum(axis=0)
    overall = total.sum() / count.sum() if count.sum() > 0 else 0.0
    out = np.full(n, overall, dtype=np.float64)
    seen = count > 0
    out[seen] = total[seen] / count[seen]
    return out


# --- catalog file I/O -------------------------------------------------------

def load_catalog(path: str | Path) -> Catalog:
    course_ids: list[int] = []
    course_texts: list[str] = []
    activity_ids: list[int] = []
    activity_texts: list[str] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise DatasetError(f"{path}: line {lineno}: expected '<kind>:<id>\\t<description>'")
            head, text = line.split("\t", 1)
            if ":" not in head:
                raise DatasetError(f"{path}: line {lineno}: expected 'course:<id>' or 'activity:<id>'")
            kind, _, ident = head.partition(":")
            try:
                raw_id = int(ident)
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-integer id {ident!r}") from None
            if kind == "course":
                course_ids.append(raw_id)
                course_texts.append(text)
            elif kind == "activity":
                activity_ids.append(raw_id)
                activity_texts.append(text)
            else:
                raise DatasetError(f"{path}: line {lineno}: unknown entry kind {kind!r}")
    if not course_ids:
        raise DatasetError(f"{path}: catalog holds no courses")
    return Catalog(
        course_ids=tuple(course_ids),
        course_texts=tuple(course_texts),
        activity_ids=tuple(activity_ids),
        activity_texts=tuple(activity_texts),
    )


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for raw_id, text in zip(catalog.course_ids, catalog.course_texts):
            fh.write(f"course:{raw_id}\t{text}\n")
        for raw_id, text in zip(catalog.activity_ids, catalog.activity_texts):
            fh.write(f"activity:{raw_id}\t{text}\n")


# --- interaction CSV I/O ----------------------------------------------------

def _parse_float(value: str, path: str | Path, lineno: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DatasetError(f"{path}: line {lineno}: non-numeric {column} {value!r}") from None


def load_school(path: str | Path, catalog: Catalog, school_id: int) -> SchoolDataset:
    """Parse one school's interaction CSV against a shared catalog."""
    rows: list[tuple[int, int, int, str, str, float, float, str | None]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if tuple(header[:6]) != CSV_COLUMNS:
            raise DatasetError(
                f"{path}: header must start with {','.join(CSV_COLUMNS)}, got {','.join(header)}"
            )
        has_date = len(header) == 7 and header[6] == CSV_DATE_COLUMN
        if len(header) > 6 and not has_date:
            raise DatasetError(f"{path}: unexpected trailing columns {header[6:]}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            expected = 7 if has_date else 6
            if len(row) != expected:
                raise DatasetError(f"{path}: line {lineno}: expected {expected} fields, got {len(row)}")
            try:
                student = int(row[0])
                course = int(row[1])
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-integer student or course id") from None
            kind = row[2].strip()
            if kind not in ("duration", "score", "activity"):
                raise DatasetError(f"{path}: line {lineno}: unknown kind {kind!r}")
            a = _parse_float(row[4], path, lineno, "t_or_As")
            b = _parse_float(row[5], path, lineno, "T_or_Ac")
            date = row[6].strip() if has_date else None
            if has_date and not date:
                raise DatasetError(f"{path}: line {lineno}: missing date")
            rows.append((lineno, student, course, kind, row[3].strip(), a, b, date))

    student_raw_ids = tuple(sorted({r[1] for r in rows}))
    student_pos = {s: i for i, s in enumerate(student_raw_ids)}

    interactions: list[Interaction] = []
    for lineno, student, course, kind, activity_field, a, b, date in rows:
        try:
            course_idx = catalog.course_index(course)
        except DatasetError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
        if kind == "activity":
            if not activity_field:
                raise DatasetError(f"{path}: line {lineno}: activity record without activity id")
            try:
                activity_idx = catalog.activity_index(int(activity_field))
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-integer activity id {activity_field!r}") from None
            except DatasetError as exc:
                raise DatasetError(f"{path}: line {lineno}: {exc}") from None
            interaction = Interaction(
                student=student_pos[student],
                course=course_idx,
                kind=InteractionKind.ACTIVITY,
                signal=Duration(t=a, total=b),
                activity=activity_idx,
                date=date,
            )
        else:
            if activity_field:
                raise DatasetError(f"{path}: line {lineno}: enrollment record carries activity {activity_field!r}")
            signal: Signal = Duration(t=a, total=b) if kind == "duration" else Score(points=a, class_average=b)
            interaction = Interaction(
                student=student_pos[student],
                course=course_idx,
                kind=InteractionKind.ENROLLMENT,
                signal=signal,
                date=date,
            )
        try:
            derive_rating(interaction.signal)  # validate signal ranges eagerly
        except DatasetError as exc:
            raise DatasetError(f"{path}: line {lineno}: {exc}") from None
        interactions.append(interaction)

    return SchoolDataset(
        school_id=school_id,
        student_ids=student_raw_ids,
        interactions=tuple(interactions),
        catalog=catalog,
    )


def save_school(ds: SchoolDataset, path: str | Path) -> None:
    """Write a school back to CSV using raw ids; inverse of ``load_school``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        header = list(CSV_COLUMNS) + ([CSV_DATE_COLUMN] if ds.dated else [])
        writer.writerow(header)
        for it in ds.interactions:
            student_raw = ds.student_ids[it.student]
            course_raw = ds.catalog.course_ids[it.course]
            if it.kind is InteractionKind.ACTIVITY:
                kind = "activity"
                activity_raw = str(ds.catalog.activity_ids[it.activity])  # type: ignore[index]
                a, b = it.signal.t, it.signal.total  # type: ignore[union-attr]
            else:
                activity_raw = ""
                if isinstance(it.signal, Duration):
                    kind, a, b = "duration", it.signal.t, it.signal.total
                else:
                    kind, a, b = "score", it.signal.points, it.signal.class_average
            row = [student_raw, course_raw, kind, activity_raw, repr(a), repr(b)]
            if ds.dated:
                row.append(it.date)
            writer.writerow(row)
