"""Master-side state machine: iterate updates, disjoint round-robin block
grants, memory-direction bookkeeping, the staleness ledger, and the per-sweep
stopping rule.

The master owns the global iterate and never touches gradients or curvature;
its work per event is O(block size).  Blocks are contiguous runs of whole
z-slices.  At any instant the blocks held by the workers are pairwise
disjoint, which is asserted on every grant.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import blur
from .volume import Dims3, SliceBlock, dims_of


class ProtocolError(RuntimeError):
    """A message violated the master/worker protocol."""


@dataclass(frozen=True)
class Assignment:
    worker_id: int
    block_index: int
    block: SliceBlock
    issue_k: int


@dataclass(frozen=True)
class TaskMessage:
    """Master -> worker payload: the slab of the current iterate needed for
    the block, plus the last increment that touched the block's coordinates
    (the memory direction; zero where never updated)."""

    worker_id: int
    block: SliceBlock
    slab: SliceBlock
    x_slab: np.ndarray
    d_mem: np.ndarray
    issue_k: int


@dataclass(frozen=True)
class UpdateMessage:
    """Worker -> master payload: the computed block increment."""

    worker_id: int
    block: SliceBlock
    increment: np.ndarray
    issue_k: int


class TraceEvent(NamedTuple):
    event_index: int
    worker_id: int
    z_lo: int
    z_hi: int
    issue_k: int
    receipt_k: int
    staleness: int


@dataclass
class MasterState:
    x: np.ndarray
    blocks: list[SliceBlock]
    k: int = 0
    in_flight: dict[int, Assignment] = field(default_factory=dict)
    prev_increment: np.ndarray = None
    last_touch: np.ndarray = None
    cursor: int = 0
    sweep_snapshot: np.ndarray = None
    blocks_updated: set[int] = field(default_factory=set)
    sweep_count: int = 0
    tau_hat: int = 0
    trace: list[TraceEvent] = field(default_factory=list)
    grant_log: list[int] = field(default_factory=list)
    psf: blur.PsfStack = None

    @property
    def dims(self) -> Dims3:
        return dims_of(self.x)


def partition_blocks(nz: int, block_height: int) -> list[SliceBlock]:
    """Contiguous runs of block_height slices; the last run may be shorter."""
    if block_height < 1:
        raise ValueError("block_height must be >= 1")
    return [SliceBlock(lo, min(lo + block_height - 1, nz - 1))
            for lo in range(0, nz, block_height)]


def init_master(x0, workers: int, block_height: int,
                psf: blur.PsfStack) -> tuple[MasterState, list[TaskMessage]]:
    """Partition the depth range, hand the first blocks to workers 1..C with
    zero memory directions, and return the initial state plus tasks."""
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if not np.isfinite(x0).all():
        raise ValueError("initial iterate contains non-finite entries")
    dims = dims_of(x0)
    if dims != psf.dims:
        raise ValueError("initial iterate dims do not match PSF dims")
    if workers < 1:
        raise ValueError("need at least one worker")
    if workers * block_height > dims.nz:
        raise ValueError(
            f"{workers} workers x {block_height} slices exceed nz={dims.nz}")
    blocks = partition_blocks(dims.nz, block_height)
    state = MasterState(
        x=x0.copy(), blocks=blocks,
        prev_increment=np.zeros(dims.shape),
        last_touch=np.zeros(dims.nz, dtype=np.int64),
        cursor=workers % len(blocks),
        sweep_snapshot=x0.copy(),
        psf=psf,
    )
    tasks = []
    for c in range(1, workers + 1):
        idx = c - 1
        state.grant_log.append(idx)
        state.in_flight[c] = Assignment(c, idx, blocks[idx], 0)
        tasks.append(make_task(state, c, blocks[idx]))
    return state, tasks


def receive_update(state: MasterState, msg: UpdateMessage) -> int:
    """Add the increment on its block, leave the complement untouched, stamp
    the ledger, and advance k.  Returns the update's staleness."""
    assignment = state.in_flight.get(msg.worker_id)
    if assignment is None:
        raise ProtocolError(f"worker {msg.worker_id} has no in-flight assignment")
    if assignment.block != msg.block:
        raise ProtocolError(
            f"worker {msg.worker_id} answered for block {msg.block}, "
            f"expected {assignment.block}")
    blk = msg.block
    inc = np.asarray(msg.increment, dtype=np.float64)
    expected = blk.count(state.dims)
    if inc.shape != (expected,):
        raise ProtocolError(f"increment length {inc.shape}, expected ({expected},)")
    if not np.isfinite(inc).all():
        raise ProtocolError("non-finite increment")

    shaped = inc.reshape(blk.height, state.dims.ny, state.dims.nx)
    state.x[blk.z_lo:blk.z_hi + 1] += shaped
    state.prev_increment[blk.z_lo:blk.z_hi + 1] = shaped
    state.last_touch[blk.z_lo:blk.z_hi + 1] = state.k + 1

    staleness = state.k - msg.issue_k
    state.tau_hat = max(state.tau_hat, staleness)
    state.trace.append(TraceEvent(len(state.trace), msg.worker_id,
                                  blk.z_lo, blk.z_hi, msg.issue_k,
                                  state.k, staleness))
    state.k += 1
    state.blocks_updated.add(assignment.block_index)
    del state.in_flight[msg.worker_id]
    return staleness


def next_block(state: MasterState, worker_id: int) -> SliceBlock:
    """Round-robin grant: advance the cursor over the fixed partition,
    skipping blocks currently held by other workers."""
    if worker_id in state.in_flight:
        raise ProtocolError(f"worker {worker_id} still has an in-flight assignment")
    busy = {a.block_index for a in state.in_flight.values()}
    n = len(state.blocks)
    for step in range(n):
        idx = (state.cursor + step) % n
        if idx not in busy:
            state.cursor = (idx + 1) % n
            state.grant_log.append(idx)
            block = state.blocks[idx]
            state.in_flight[worker_id] = Assignment(worker_id, idx, block, state.k)
            assert idx not in busy  # pairwise disjoint in-flight blocks
            return block
    raise ProtocolError("no free block available (more workers than blocks?)")


def make_task(state: MasterState, worker_id: int, block: SliceBlock) -> TaskMessage:
    """Snapshot the slab of the current iterate plus the memory direction."""
    assignment = state.in_flight.get(worker_id)
    if assignment is None or assignment.block != block:
        raise ProtocolError(f"block {block} was not granted to worker {worker_id}")
    slab = blur.slab_support(state.psf, block)
    x_slab = state.x[slab.z_lo:slab.z_hi + 1].copy()
    d_mem = state.prev_increment[block.z_lo:block.z_hi + 1].ravel().copy()
    return TaskMessage(worker_id, block, slab, x_slab, d_mem, assignment.issue_k)


def sweep_complete(state: MasterState) -> bool:
    return len(state.blocks_updated) == len(state.blocks)


def roll_sweep(state: MasterState) -> None:
    """Close the sweep window: new snapshot, empty visited set."""
    state.sweep_count += 1
    state.sweep_snapshot = state.x.copy()
    state.blocks_updated.clear()


def should_stop(state: MasterState, tol: float,
                max_updates: Optional[int] = None) -> bool:
    """Per-sweep stop rule: ||x - snapshot|| <= tol * ||snapshot||, or the
    update budget is exhausted.  tol = inf stops after the first sweep."""
    if tol <= 0:
        raise ValueError("tol must be strictly positive")
    if max_updates is not None and state.k >= max_updates:
        return True
    if math.isinf(tol):
        return True
    delta = float(np.linalg.norm(state.x - state.sweep_snapshot))
    return delta <= tol * float(np.linalg.norm(state.sweep_snapshot))


def delay_stats(state: MasterState) -> tuple[list[int], int]:
    """(per-update staleness history, running maximum)."""
    return [ev.staleness for ev in state.trace], state.tau_hat


def write_trace_csv(trace: list[TraceEvent], sink) -> None:
    from .volume import _as_stream

    with _as_stream(sink, "w") as fh:
        writer = csv.writer(fh)
        writer.writerow(["event_index", "worker_id", "z_lo", "z_hi",
                         "issue_k", "receipt_k", "staleness"])
        writer.writerows(trace)
