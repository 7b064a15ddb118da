"""Per-school heterogeneous graph over students, courses, and activities.

Node ordering is deterministic: all students (by dense index), then every
catalog course (so schools agree on course node layout even when a course has
no local interactions), then the locally observed activities in ascending
dense index.  Edges are undirected, unweighted, and deduplicated:

* StudentCourse for each distinct enrollment pair,
* StudentActivity for each distinct participation pair,
* CourseActivity when some student both enrolled in the course and
  participated in the activity.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from fedcourse.datasets import InteractionKind, SchoolDataset


class NodeType(Enum):
    STUDENT = "student"
    COURSE = "course"
    ACTIVITY = "activity"


class EdgeType(Enum):
    STUDENT_COURSE = "student_course"
    STUDENT_ACTIVITY = "student_activity"
    COURSE_ACTIVITY = "course_activity"


_ENDPOINTS = {
    EdgeType.STUDENT_COURSE: (NodeType.STUDENT, NodeType.COURSE),
    EdgeType.STUDENT_ACTIVITY: (NodeType.STUDENT, NodeType.ACTIVITY),
    EdgeType.COURSE_ACTIVITY: (NodeType.COURSE, NodeType.ACTIVITY),
}


@dataclass(frozen=True)
class HeteroGraph:
    """Immutable typed graph with symmetric adjacency.

    ``catalog_index[v]`` is the dense index of node ``v`` within its own type
    (student index, course index, or activity index).  ``adjacency[v]`` lists
    ``(neighbor, edge_id)`` pairs in ascending neighbor order.
    """

    node_types: tuple[NodeType, ...]
    catalog_index: tuple[int, ...]
    edges: tuple[tuple[int, int, EdgeType], ...]
    adjacency: tuple[tuple[tuple[int, int], ...], ...]
    n_students: int
    n_courses: int
    n_local_activities: int

    def __post_init__(self) -> None:
        n = len(self.node_types)
        if len(self.catalog_index) != n or len(self.adjacency) != n:
            raise ValueError("inconsistent node arrays")
        seen: set[tuple[int, int, EdgeType]] = set()
        for src, dst, etype in self.edges:
            if src == dst:
                raise ValueError("self-loop")
            if not (0 <= src < n and 0 <= dst < n):
                raise ValueError("edge endpoint out of range")
            key = (min(src, dst), max(src, dst), etype)
            if key in seen:
                raise ValueError("duplicate edge")
            seen.add(key)
            want = _ENDPOINTS[etype]
            got = (self.node_types[src], self.node_types[dst])
            if got != want:
                raise ValueError(f"edge type {etype.value} joining {got[0].value} and {got[1].value}")

    @property
    def n_nodes(self) -> int:
        return len(self.node_types)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_id(self, node_type: NodeType, catalog_index: int) -> int:
        if node_type is NodeType.STUDENT:
            if not 0 <= catalog_index < self.n_students:
                raise KeyError(f"no student {catalog_index}")
            return catalog_index
        if node_type is NodeType.COURSE:
            if not 0 <= catalog_index < self.n_courses:
                raise KeyError(f"no course {catalog_index}")
            return self.n_students + catalog_index
        base = self.n_students + self.n_courses
        for v in range(base, self.n_nodes):
            if self.catalog_index[v] == catalog_index:
                return v
        raise KeyError(f"activity {catalog_index} not observed at this school")


def build_graph(ds: SchoolDataset) -> HeteroGraph:
    """Construct the school's graph; pure function of the dataset."""
    local_acts = ds.local_activities()
    act_node: dict[int, int] = {}
    node_types: list[NodeType] = []
    catalog_index: list[int] = []
    for s in range(ds.n_students):
        node_types.append(NodeType.STUDENT)
        catalog_index.append(s)
    for c in range(ds.catalog.n_courses):
        node_types.append(NodeType.COURSE)
        catalog_index.append(c)
    for a in local_acts:
        act_node[a] = len(node_types)
        node_types.append(NodeType.ACTIVITY)
        catalog_index.append(a)

    course_base = ds.n_students
    enroll_pairs: set[tuple[int, int]] = set()
    part_pairs: set[tuple[int, int]] = set()
    per_student_courses: dict[int, set[int]] = {}
    per_student_acts: dict[int, set[int]] = {}
    for it in ds.interactions:
        if it.kind is InteractionKind.ENROLLMENT:
            enroll_pairs.add((it.student, it.course))
            per_student_courses.setdefault(it.student, set()).add(it.course)
        else:
            assert it.activity is not None
            part_pairs.add((it.student, it.activity))
            per_student_acts.setdefault(it.student, set()).add(it.activity)

    co_pairs: set[tuple[int, int]] = set()
    for s, courses in per_student_courses.items():
        for a in per_student_acts.get(s, ()):
            for c in courses:
                co_pairs.add((c, a))

    edges: list[tuple[int, int, EdgeType]] = []
    for s, c in sorted(enroll_pairs):
        edges.append((s, course_base + c, EdgeType.STUDENT_COURSE))
    for s, a in sorted(part_pairs):
        edges.append((s, act_node[a], EdgeType.STUDENT_ACTIVITY))
    for c, a in sorted(co_pairs):
        edges.append((course_base + c, act_node[a], EdgeType.COURSE_ACTIVITY))

    adjacency: list[list[tuple[int, int]]] = [[] for _ in node_types]
    for edge_id, (src, dst, _etype) in enumerate(edges):
        adjacency[src].append((dst, edge_id))
        adjacency[dst].append((src, edge_id))
    adjacency_sorted = tuple(tuple(sorted(nbrs)) for nbrs in adjacency)

    return HeteroGraph(
        node_types=tuple(node_types),
        catalog_index=tuple(catalog_index),
        edges=tuple(edges),
        adjacency=adjacency_sorted,
        n_students=ds.n_students,
        n_courses=ds.catalog.n_courses,
        n_local_activities=len(local_acts),
    )


def neighbors(g: HeteroGraph, v: int) -> list[tuple[int, int]]:
    """Adjacent nodes of ``v`` with the connecting edge id, ascending."""
    if not 0 <= v < g.n_nodes:
        raise KeyError(f"unknown node {v}")
    return list(g.adjacency[v])


def edge_list_lines(g: HeteroGraph) -> list[str]:
    """Human-readable edge dump, one ``src dst type`` line per edge."""

    def label(v: int) -> str:
        return f"{g.node_types[v].value}:{g.catalog_index[v]}"

    return [f"{label(src)}\t{label(dst)}\t{etype.value}" for src, dst, etype in g.edges]
