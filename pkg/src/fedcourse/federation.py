"""Coordinator/client training over serialized gradient messages.

Each round: the coordinator announces the selected school subset, selected
clients run their local passes (shared parameters frozen for the round,
student-side state updated locally with the school's adaptive rate), upload
shared-parameter gradients, the coordinator aggregates them in ascending
school-id order (sum by default, mean optional) and broadcasts the result.
Every client applies ``theta - lr_u * g`` with its own rate
``lr_u = lr_global * n_u / N`` (n_u = local record count); the coordinator
keeps a canonical copy updated with ``lr_global`` and redistributes it every
``redistribute_every`` rounds so client copies cannot drift.

All coordination flows through length-prefixed binary frames, so the privacy
boundary is mechanically checkable: no frame may carry tensors outside the
shared manifest, and student embeddings, ratings, and texts never appear.

The same local-pass code drives the non-federated reference path
(:func:`train_centralized`), which is what makes single-school federation
bit-identical to plain local training.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction

import numpy as np

from fedcourse.conmf import (
    ConMFConfig,
    ConMFState,
    backprop_through_encoder,
    grad as conmf_grad,
    loss as conmf_loss,
    sgd_step,
)
from fedcourse.datasets import RatingMatrix, SchoolDataset, build_rating_matrix, course_average_vector
from fedcourse.encoder import (
    ContentFeatures,
    EncoderParams,
    GraphTensors,
    SHARED_MANIFEST,
    build_graph_tensors,
    encode,
    shared_tensors,
    with_shared_tensors,
)
from fedcourse.errors import ConfigError, ProtocolError, TrainingError
from fedcourse.hetgraph import build_graph
from fedcourse.rng import substream
from fedcourse.tensorio import (
    decode_frame,
    decode_tensor_block,
    encode_frame,
    encode_tensor_block,
    _Reader,
)

COORDINATOR_ID = -1

WARM_START_MANIFEST: tuple[str, ...] = ("factors/course",)


class MessageKind(IntEnum):
    ROUND_BEGIN = 1
    GRADIENT_UPLOAD = 2
    PARAMS_DOWNLOAD = 3


@dataclass(frozen=True)
class RoundBegin:
    round_no: int
    selected: tuple[int, ...]


@dataclass(frozen=True)
class GradientUpload:
    school_id: int
    round_no: int
    tensors: dict[str, np.ndarray]
    n_u: int


@dataclass(frozen=True)
class ParamsDownload:
    round_no: int
    tensors: dict[str, np.ndarray]


FedMessage = RoundBegin | GradientUpload | ParamsDownload


def encode_message(msg: FedMessage) -> bytes:
    if isinstance(msg, RoundBegin):
        payload = struct.pack("<I", len(msg.selected)) + struct.pack(
            f"<{len(msg.selected)}i", *msg.selected
        )
        return encode_frame(MessageKind.ROUND_BEGIN, msg.round_no, COORDINATOR_ID, payload)
    if isinstance(msg, GradientUpload):
        payload = struct.pack("<Q", msg.n_u) + encode_tensor_block(msg.tensors)
        return encode_frame(MessageKind.GRADIENT_UPLOAD, msg.round_no, msg.school_id, payload)
    if isinstance(msg, ParamsDownload):
        return encode_frame(
            MessageKind.PARAMS_DOWNLOAD, msg.round_no, COORDINATOR_ID, encode_tensor_block(msg.tensors)
        )
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def decode_message(buf: bytes) -> FedMessage:
    kind, round_no, school_id, payload, end = decode_frame(buf)
    if end != len(buf):
        raise ProtocolError("trailing bytes after frame")
    reader = _Reader(payload)
    if kind == MessageKind.ROUND_BEGIN:
        (count,) = reader.unpack("<I")
        selected = reader.unpack(f"<{count}i")
        msg: FedMessage = RoundBegin(round_no=round_no, selected=tuple(selected))
    elif kind == MessageKind.GRADIENT_UPLOAD:
        (n_u,) = reader.unpack("<Q")
        tensors = decode_tensor_block(reader)
        msg = GradientUpload(school_id=school_id, round_no=round_no, tensors=tensors, n_u=n_u)
    elif kind == MessageKind.PARAMS_DOWNLOAD:
        tensors = decode_tensor_block(reader)
        msg = ParamsDownload(round_no=round_no, tensors=tensors)
    else:
        raise ProtocolError(f"unknown message kind {kind}")
    if reader.pos != len(payload):
        raise ProtocolError("trailing bytes in message payload")
    return msg


class Transport:
    """In-process channel that records every frame it carries."""

    def __init__(self) -> None:
        self.frames: list[bytes] = []

    def send(self, frame: bytes) -> bytes:
        self.frames.append(frame)
        return frame


@dataclass(frozen=True)
class FedConfig:
    lr_global: float = 0.0001
    rounds: int = 50
    subset_size: int | None = None
    aggregation: str = "sum"
    local_epochs: int = 1
    redistribute_every: int = 1
    early_stop: bool = False
    patience: int = 5
    clip_norm: float | None = None

    def __post_init__(self) -> None:
        if not self.lr_global > 0:
            raise ConfigError("lr_global must be positive")
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if self.subset_size is not None and self.subset_size < 1:
            raise ConfigError("subset_size must be at least 1")
        if self.aggregation not in ("sum", "mean"):
            raise ConfigError("aggregation must be 'sum' or 'mean'")
        if self.local_epochs < 1:
            raise ConfigError("local_epochs must be at least 1")
        if self.redistribute_every < 1:
            raise ConfigError("redistribute_every must be at least 1")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")


def adaptive_lr_exact(lr_global: float, n_u: int, total: int) -> Fraction:
    """The school's rate as an exact rational, lr_global * n_u / N."""
    if total <= 0:
        raise ValueError("total sample count must be positive")
    if n_u < 0 or n_u > total:
        raise ValueError("need 0 <= n_u <= N")
    return Fraction(lr_global) * Fraction(n_u, total)


def adaptive_lr(lr_global: float, n_u: int, total: int) -> float:
    """Float of the exact rational rate (correctly rounded, within 1 ULP)."""
    return float(adaptive_lr_exact(lr_global, n_u, total))


def clip_array(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Scale one gradient array down to L2 norm max_norm if it exceeds it."""
    if max_norm is None:
        return grad
    norm = float(np.sqrt((grad**2).sum()))
    if norm <= max_norm:
        return grad
    return grad * (max_norm / norm)


def clip_gradients(g: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    """Scale a whole gradient set down to a global L2 norm of max_norm.

    The norm is accumulated in sorted tensor-name order so the result is
    deterministic regardless of dict construction order.
    """
    if max_norm is None:
        return g
    total = 0.0
    for name in sorted(g):
        total += float((g[name] ** 2).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return g
    scale = max_norm / norm
    return {name: t * scale for name, t in g.items()}


def aggregate(uploads: list[GradientUpload], cfg: FedConfig) -> dict[str, np.ndarray]:
    """Reduce uploads tensor-wise in ascending school-id order."""
    if not uploads:
        raise ProtocolError("nothing to aggregate")
    rounds = {u.round_no for u in uploads}
    if len(rounds) != 1:
        raise ProtocolError(f"round mismatch in uploads: {sorted(rounds)}")
    names = list(uploads[0].tensors)
    for u in uploads:
        if list(u.tensors) != names:
            raise ProtocolError(
                f"tensor manifest mismatch: school {u.school_id} sent {list(u.tensors)[:4]}..."
            )
    ordered = sorted(uploads, key=lambda u: u.school_id)
    total = {name: ordered[0].tensors[name].copy() for name in names}
    for u in ordered[1:]:
        for name in names:
            if u.tensors[name].shape != total[name].shape:
                raise ProtocolError(f"shape mismatch for {name} from school {u.school_id}")
            total[name] += u.tensors[name]
    if cfg.aggregation == "mean":
        for name in names:
            total[name] /= len(ordered)
    return total


class SchoolClient:
    """One school's training state and local computation.

    Drives both coupling modes.  In ``end_to_end`` the factor matrices are
    the encoder outputs and gradients chain through every shared tensor; in
    ``warm_start`` the encoder only initializes free factor matrices, the
    student factors stay local, and the course factors are the single shared
    tensor.
    """

    def __init__(
        self,
        school_id: int,
        train_ds: SchoolDataset,
        encoder_params: EncoderParams,
        student_table: np.ndarray,
        content: ContentFeatures,
        mf_cfg: ConMFConfig,
        seed: int,
        coupling: str = "end_to_end",
        batch_size: int | None = None,
        local_epochs: int = 1,
        clip_norm: float | None = None,
    ) -> None:
        if coupling not in ("end_to_end", "warm_start"):
            raise ConfigError(f"unknown coupling mode {coupling!r}")
        self.school_id = school_id
        self.ds = train_ds
        self.coupling = coupling
        self.mf_cfg = mf_cfg
        self.seed = seed
        self.batch_size = batch_size
        self.local_epochs = local_epochs
        self.clip_norm = clip_norm
        self.lr_u = 0.0
        self.lr_local = 0.0
        self.params = encoder_params
        self.student_table = np.array(student_table, dtype=np.float64)
        self.content = content
        self.graph = build_graph(train_ds)
        self.gt: GraphTensors = build_graph_tensors(self.graph)
        self.ratings: RatingMatrix = build_rating_matrix(train_ds)
        self.course_means = course_average_vector([self.ratings])
        self.student_factors: np.ndarray | None = None
        self.course_factors: np.ndarray | None = None
        if coupling == "warm_start":
            reps = encode(self.params, self.gt, content, self.student_table)
            self.student_factors = reps.student_reps.copy()
            catalog_reps = catalog_representations(encoder_params, train_ds.catalog, content)
            self.course_factors = catalog_reps.copy()

    @property
    def n_u(self) -> int:
        """Local sample count: the number of interaction records."""
        return self.ds.n_interactions

    @property
    def manifest(self) -> tuple[str, ...]:
        return SHARED_MANIFEST if self.coupling == "end_to_end" else WARM_START_MANIFEST

    def shared_view(self) -> dict[str, np.ndarray]:
        if self.coupling == "end_to_end":
            return shared_tensors(self.params)
        assert self.course_factors is not None
        return {"factors/course": self.course_factors}

    def set_learning_rate(self, lr_u: float, lr_local: float | None = None) -> None:
        """Adaptive rate for applying shared gradients, and the rate for
        school-local parameters (defaults to lr_u). Local state has no
        cross-school interference, so scaling it by data share would only
        slow small schools down."""
        self.lr_u = lr_u
        self.lr_local = lr_u if lr_local is None else lr_local

    def snapshot(self) -> dict:
        return {
            "shared": {k: v.copy() for k, v in self.shared_view().items()},
            "student_table": self.student_table.copy(),
            "student_factors": None if self.student_factors is None else self.student_factors.copy(),
        }

    def restore(self, snap: dict) -> None:
        self.adopt_shared(snap["shared"])
        self.student_table = snap["student_table"].copy()
        if snap["student_factors"] is not None:
            self.student_factors = snap["student_factors"].copy()

    def adopt_shared(self, tensors: dict[str, np.ndarray]) -> None:
        if self.coupling == "end_to_end":
            self.params = with_shared_tensors(self.params, tensors)
        else:
            self.course_factors = np.array(tensors["factors/course"], dtype=np.float64)

    def apply_gradient(self, g: dict[str, np.ndarray], lr: float | None = None) -> None:
        rate = self.lr_u if lr is None else lr
        self.adopt_shared(sgd_step(self.shared_view(), g, rate))

    def _batches(self, round_no: int, epoch: int) -> list[np.ndarray | None]:
        if self.batch_size is None:
            return [None]
        obs = np.argwhere(self.ratings.mask)
        if not len(obs):
            return [None]
        rng = substream(self.seed, "batch", self.school_id, round_no, epoch)
        perm = rng.permutation(len(obs))
        masks: list[np.ndarray | None] = []
        for start in range(0, len(obs), self.batch_size):
            cells = np.zeros(self.ratings.shape, dtype=bool)
            chunk = obs[perm[start : start + self.batch_size]]
            cells[chunk[:, 0], chunk[:, 1]] = True
            masks.append(cells)
        return masks

    def _zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t) for name, t in self.shared_view().items()}

    def local_round(self, round_no: int) -> tuple[dict[str, np.ndarray], float]:
        """Run local epochs at frozen shared params; return summed gradients.

        Student-side state (the student embedding table, or the free student
        factors in warm-start mode) advances locally with lr_local after
        every batch and never leaves the school.
        """
        if self.ds.n_students == 0 or not self.ratings.mask.any():
            return self._zero_grads(), 0.0
        g_acc = self._zero_grads()
        losses: list[float] = []
        for epoch in range(self.local_epochs):
            for batch_no, cells in enumerate(self._batches(round_no, epoch)):
                if self.coupling == "end_to_end":
                    loss_value = self._end_to_end_step(round_no, epoch, batch_no, cells, g_acc)
                else:
                    loss_value = self._warm_start_step(cells, g_acc)
                losses.append(loss_value)
        for name, tensor in g_acc.items():
            if not np.isfinite(tensor).all():
                raise TrainingError(
                    f"school {self.school_id}: non-finite gradient in tensor {name}"
                )
        return g_acc, float(np.mean(losses))

    def _end_to_end_step(
        self,
        round_no: int,
        epoch: int,
        batch_no: int,
        cells: np.ndarray | None,
        g_acc: dict[str, np.ndarray],
    ) -> float:
        dropout_rng = substream(self.seed, "dropout", self.school_id, round_no, epoch, batch_no)
        reps = encode(
            self.params, self.gt, self.content, self.student_table, dropout_rng=dropout_rng
        )
        state = ConMFState(
            student_factors=reps.student_reps,
            course_factors=reps.course_reps,
            ratings=self.ratings,
            course_means=self.course_means,
        )
        loss_value = conmf_loss(state, self.mf_cfg, cells)
        d_students, d_courses = conmf_grad(state, self.mf_cfg, cells)
        enc_grads = backprop_through_encoder(d_students, d_courses, reps)
        table_grad = clip_array(enc_grads.student_table, self.clip_norm)
        self.student_table = sgd_step(self.student_table, table_grad, self.lr_local)
        for name in g_acc:
            g_acc[name] += enc_grads.shared[name]
        return loss_value

    def _warm_start_step(self, cells: np.ndarray | None, g_acc: dict[str, np.ndarray]) -> float:
        assert self.student_factors is not None and self.course_factors is not None
        state = ConMFState(
            student_factors=self.student_factors,
            course_factors=self.course_factors,
            ratings=self.ratings,
            course_means=self.course_means,
        )
        loss_value = conmf_loss(state, self.mf_cfg, cells)
        d_students, d_courses = conmf_grad(state, self.mf_cfg, cells)
        self.student_factors = sgd_step(
            self.student_factors, clip_array(d_students, self.clip_norm), self.lr_local
        )
        g_acc["factors/course"] += d_courses
        return loss_value

    def representations(self) -> tuple[np.ndarray, np.ndarray]:
        """Current (E_s, E_c) with dropout off."""
        if self.coupling == "warm_start":
            assert self.student_factors is not None and self.course_factors is not None
            return self.student_factors.copy(), self.course_factors.copy()
        reps = encode(self.params, self.gt, self.content, self.student_table)
        return reps.student_reps.copy(), reps.course_reps.copy()


def catalog_representations(
    params: EncoderParams, catalog, content: ContentFeatures
) -> np.ndarray:
    """Course vectors from a students-free catalog graph.

    Used to seed warm-start course factors identically at every school
    without exchanging data: the catalog, content, and parameters are already
    shared, so every school computes the same matrix.
    """
    empty = SchoolDataset(school_id=-1, student_ids=(), interactions=(), catalog=catalog)
    reps = encode(params, build_graph(empty), content, np.zeros((0, params.dim)))
    return reps.course_reps


@dataclass
class Coordinator:
    """Canonical shared parameters, versioned by round."""

    canonical: dict[str, np.ndarray]
    round_no: int = 0


@dataclass
class TrainingResult:
    shared: dict[str, np.ndarray]
    round_log: list[dict]
    rounds_run: int


def _select_subset(ids: list[int], cfg: FedConfig, seed: int, round_no: int) -> list[int]:
    if cfg.subset_size is None or cfg.subset_size >= len(ids):
        return sorted(ids)
    rng = substream(seed, "select", round_no)
    chosen = rng.choice(np.array(sorted(ids)), size=cfg.subset_size, replace=False)
    return sorted(int(i) for i in chosen)


def global_round(
    coordinator: Coordinator,
    clients: list[SchoolClient],
    cfg: FedConfig,
    seed: int,
    transport: Transport,
) -> dict:
    """One synchronous round; rolls every client back if anything fails."""
    round_no = coordinator.round_no
    snapshots = [c.snapshot() for c in clients]
    canonical_before = {k: v.copy() for k, v in coordinator.canonical.items()}
    try:
        started = time.perf_counter()
        selected = _select_subset([c.school_id for c in clients], cfg, seed, round_no)
        transport.send(encode_message(RoundBegin(round_no=round_no, selected=tuple(selected))))

        uploads: list[GradientUpload] = []
        losses: dict[int, float] = {}
        for client in sorted(clients, key=lambda c: c.school_id):
            if client.school_id not in selected:
                continue
            grads, loss_value = client.local_round(round_no)
            frame = transport.send(
                encode_message(
                    GradientUpload(
                        school_id=client.school_id,
                        round_no=round_no,
                        tensors=grads,
                        n_u=client.n_u,
                    )
                )
            )
            msg = decode_message(frame)
            assert isinstance(msg, GradientUpload)
            uploads.append(msg)
            losses[client.school_id] = loss_value

        g = clip_gradients(aggregate(uploads, cfg), cfg.clip_norm)
        coordinator.canonical = sgd_step(coordinator.canonical, g, cfg.lr_global)

        broadcast = transport.send(
            encode_message(
                GradientUpload(school_id=COORDINATOR_ID, round_no=round_no, tensors=g, n_u=0)
            )
        )
        g_msg = decode_message(broadcast)
        assert isinstance(g_msg, GradientUpload)
        for client in clients:
            client.apply_gradient(g_msg.tensors)

        if (round_no + 1) % cfg.redistribute_every == 0:
            download = transport.send(
                encode_message(
                    ParamsDownload(round_no=round_no, tensors=coordinator.canonical)
                )
            )
            d_msg = decode_message(download)
            assert isinstance(d_msg, ParamsDownload)
            for client in clients:
                client.adopt_shared(d_msg.tensors)

        coordinator.round_no += 1
        return {
            "round": round_no,
            "selected": selected,
            "losses": {str(sid): losses[sid] for sid in sorted(losses)},
            "wall_time_s": time.perf_counter() - started,
        }
    except Exception:
        for client, snap in zip(clients, snapshots):
            client.restore(snap)
        coordinator.canonical = canonical_before
        raise


def run_training(
    clients: list[SchoolClient],
    cfg: FedConfig,
    seed: int,
    transport: Transport | None = None,
    validation_fn=None,
) -> TrainingResult:
    """Run the full protocol; see the module docstring for round shape."""
    if not clients:
        raise ConfigError("need at least one school")
    ids = [c.school_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate school ids")
    if cfg.subset_size is not None and cfg.subset_size > len(clients):
        raise ConfigError(f"subset_size {cfg.subset_size} exceeds school count {len(clients)}")
    manifests = {c.manifest for c in clients}
    if len(manifests) != 1:
        raise ConfigError("clients disagree on the shared manifest")
    if transport is None:
        transport = Transport()

    total = sum(c.n_u for c in clients)
    for client in clients:
        client.set_learning_rate(
            adaptive_lr(cfg.lr_global, client.n_u, total), lr_local=cfg.lr_global
        )

    coordinator = Coordinator(
        canonical={k: v.copy() for k, v in clients[0].shared_view().items()}
    )

    round_log: list[dict] = []
    best_metric = -np.inf
    stale = 0
    for _ in range(cfg.rounds):
        record = global_round(coordinator, clients, cfg, seed, transport)
        if validation_fn is not None:
            metric = float(validation_fn(clients))
            record["validation"] = metric
            if cfg.early_stop:
                if metric > best_metric + 1e-12:
                    best_metric = metric
                    stale = 0
                else:
                    stale += 1
                    if stale >= cfg.patience:
                        round_log.append(record)
                        break
        round_log.append(record)

    return TrainingResult(
        shared=coordinator.canonical,
        round_log=round_log,
        rounds_run=len(round_log),
    )


def train_centralized(client: SchoolClient, lr: float, rounds: int) -> TrainingResult:
    """Reference single-school loop with no protocol layer.

    Mirrors the federated arithmetic exactly: same local passes, same update
    expression, so a one-school federation produces bit-identical state.
    """
    client.set_learning_rate(lr)
    round_log: list[dict] = []
    for round_no in range(rounds):
        started = time.perf_counter()
        grads, loss_value = client.local_round(round_no)
        client.apply_gradient(clip_gradients(grads, client.clip_norm), lr)
        round_log.append(
            {
                "round": round_no,
                "selected": [client.school_id],
                "losses": {str(client.school_id): loss_value},
                "wall_time_s": time.perf_counter() - started,
            }
        )
    return TrainingResult(
        shared={k: v.copy() for k, v in client.shared_view().items()},
        round_log=round_log,
        rounds_run=len(round_log),
    )
