"""Exact pure-state toolkit for small multi-party qudit systems.

Amplitude vectors are indexed mixed-radix with party 0 as the most
significant digit, so ``state.amplitudes.reshape(state.dims)`` yields one
tensor axis per party, in party order.  All values are immutable after
construction and every operation returns a new value, so concurrent read
access from parallel workers is safe.

Two tolerance tiers are used throughout: ``OP_TOL`` (1e-12) for algebraic
identities of operators (unitarity, idempotence) and ``STATE_TOL`` (1e-10)
for state-level norms, probabilities and entropies, where roundoff
accumulates.  Systems here stay small (a handful of parties of dimension
3), which keeps numerical error far below both tiers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

OP_TOL = 1e-12
STATE_TOL = 1e-10
ENTROPY_EIG_FLOOR = 1e-12
PSD_EIG_SLACK = 1e-10
PROB_FLOOR = 1e-14

Digits = Sequence[int]
Terms = Mapping[tuple, complex] | Iterable[tuple]


def basis_index(dims: Sequence[int], digits: Digits) -> int:
    """Flat index of a computational basis state (party 0 most significant)."""
    if len(digits) != len(dims):
        raise ValueError(f"expected {len(dims)} digits, got {len(digits)}")
    idx = 0
    for d, k in zip(dims, digits):
        k = int(k)
        if not 0 <= k < d:
            raise ValueError(f"basis digit {k} out of range for local dimension {d}")
        idx = idx * d + k
    return idx


def basis_digits(dims: Sequence[int], index: int) -> tuple[int, ...]:
    """Inverse of :func:`basis_index`."""
    out = []
    for d in reversed(dims):
        out.append(index % d)
        index //= d
    if index:
        raise ValueError("index out of range")
    return tuple(reversed(out))


@dataclass(frozen=True)
class PureState:
    """Normalized (or branch-weighted) pure state of a multi-party system."""

    dims: tuple[int, ...]
    amplitudes: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 1 or any(d < 1 for d in dims):
            raise ValueError("need at least one party, every local dimension >= 1")
        size = 1
        for d in dims:
            size *= d
        amps = np.array(self.amplitudes, dtype=np.complex128, copy=True).reshape(-1)
        if amps.size != size:
            raise ValueError(f"amplitude vector length {amps.size} != prod(dims) {size}")
        amps.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def n_parties(self) -> int:
        return len(self.dims)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.dims)

    def normalized(self) -> "PureState":
        n = self.norm()
        if n <= 0.0:
            raise ValueError("cannot normalize a zero state")
        return PureState(self.dims, self.amplitudes / n)


def make_state(dims: Sequence[int], terms: Terms) -> PureState:
    """Build a normalized state from sparse basis terms.

    ``terms`` maps basis digit tuples to complex amplitudes (a mapping or an
    iterable of pairs).  Duplicate basis terms are summed before
    normalization.  Raises if any index is out of range or if the summed
    amplitude vector is zero.
    """
    dims = tuple(int(d) for d in dims)
    size = 1
    for d in dims:
        size *= d
    vec = np.zeros(size, dtype=np.complex128)
    items = terms.items() if isinstance(terms, Mapping) else terms
    empty = True
    for digits, amp in items:
        empty = False
        vec[basis_index(dims, tuple(digits))] += amp
    if empty:
        raise ValueError("no terms given")
    nrm = np.linalg.norm(vec)
    if nrm < 1e-300:
        raise ValueError("all amplitudes sum to zero; state has no weight")
    return PureState(dims, vec / nrm)


_OPERATOR_KINDS = ("unitary", "isometry", "projector")


@dataclass(frozen=True)
class LocalOperator:
    """A matrix acting on one party's local space.

    ``kind`` selects the validated algebraic class: unitaries satisfy
    U†U = I, isometries have orthonormal columns (d_out >= d_in), and
    projectors are Hermitian idempotents.  Checks use ``OP_TOL``.
    """

    party: int
    matrix: np.ndarray
    kind: str

    def __post_init__(self):
        if self.party < 0:
            raise ValueError("party index must be nonnegative")
        if self.kind not in _OPERATOR_KINDS:
            raise ValueError(f"kind must be one of {_OPERATOR_KINDS}")
        m = np.array(self.matrix, dtype=np.complex128, copy=True)
        if m.ndim != 2:
            raise ValueError("operator matrix must be 2-dimensional")
        d_out, d_in = m.shape
        gram = m.conj().T @ m
        if self.kind == "unitary":
            if d_out != d_in:
                raise ValueError("unitary must be square")
            if not np.allclose(gram, np.eye(d_in), atol=OP_TOL, rtol=0.0):
                raise ValueError("matrix is not unitary within tolerance")
        elif self.kind == "isometry":
            if d_out < d_in:
                raise ValueError("isometry needs d_out >= d_in")
            if not np.allclose(gram, np.eye(d_in), atol=OP_TOL, rtol=0.0):
                raise ValueError("columns are not orthonormal within tolerance")
        else:
            if d_out != d_in:
                raise ValueError("projector must be square")
            if not np.allclose(m, m.conj().T, atol=OP_TOL, rtol=0.0):
                raise ValueError("projector is not Hermitian within tolerance")
            if not np.allclose(m @ m, m, atol=OP_TOL, rtol=0.0):
                raise ValueError("projector is not idempotent within tolerance")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def d_in(self) -> int:
        return self.matrix.shape[1]

    @property
    def d_out(self) -> int:
        return self.matrix.shape[0]


def _apply_matrix(
    arr: np.ndarray, dims: tuple[int, ...], party: int, matrix: np.ndarray
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Contract ``matrix`` onto one party's axis of a flat amplitude vector."""
    t = arr.reshape(dims)
    out = np.tensordot(matrix, t, axes=(1, party))
    out = np.moveaxis(out, 0, party)
    new_dims = dims[:party] + (matrix.shape[0],) + dims[party + 1 :]
    return np.ascontiguousarray(out).reshape(-1), new_dims


def apply_local(state: PureState, op: LocalOperator) -> PureState:
    """Apply a local operator to one party.

    The result is NOT renormalized: projector and isometry branches carry
    their probability weight in the norm.  ``dims`` are updated when the
    operator changes the local dimension.
    """
    if op.party >= state.n_parties:
        raise ValueError(f"party {op.party} out of range for {state.n_parties} parties")
    if state.dims[op.party] != op.d_in:
        raise ValueError(
            f"operator input dimension {op.d_in} != local dimension "
            f"{state.dims[op.party]} at party {op.party}"
        )
    arr, dims = _apply_matrix(state.amplitudes, state.dims, op.party, op.matrix)
    return PureState(dims, arr)


class Instrument:
    """A labeled, complete set of orthogonal projectors on one local space.

    Completeness (projectors summing to the identity) and projector algebra
    are validated at construction with ``OP_TOL``.  When every projector is
    diagonal in the computational basis the instrument caches the diagonals,
    which lets measurement routines take a vectorized path.
    """

    __slots__ = ("labels", "projectors", "dim", "_diag_stack", "_label_index")

    def __init__(self, labels: Sequence[str], projectors: Sequence[np.ndarray]):
        labels = tuple(str(s) for s in labels)
        if len(labels) == 0 or len(labels) != len(projectors):
            raise ValueError("need one label per projector, at least one of each")
        if len(set(labels)) != len(labels):
            raise ValueError("labels must be unique")
        mats = []
        dim = None
        for p in projectors:
            m = np.array(p, dtype=np.complex128, copy=True)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError("projectors must be square matrices")
            if dim is None:
                dim = m.shape[0]
            elif m.shape[0] != dim:
                raise ValueError("all projectors must share one dimension")
            if not np.allclose(m, m.conj().T, atol=OP_TOL, rtol=0.0):
                raise ValueError("projector is not Hermitian within tolerance")
            if not np.allclose(m @ m, m, atol=OP_TOL, rtol=0.0):
                raise ValueError("projector is not idempotent within tolerance")
            m.setflags(write=False)
            mats.append(m)
        total = sum(mats)
        if not np.allclose(total, np.eye(dim), atol=OP_TOL, rtol=0.0):
            raise ValueError("projectors do not sum to the identity (incomplete set)")
        self.labels = labels
        self.projectors = tuple(mats)
        self.dim = int(dim)
        self._label_index = {s: i for i, s in enumerate(labels)}
        diag = None
        if all(
            np.max(np.abs(m - np.diag(np.diagonal(m)))) <= OP_TOL for m in mats
        ):
            diag = np.stack([np.real(np.diagonal(m)) for m in mats])
            diag.setflags(write=False)
        self._diag_stack = diag

    @property
    def n_outcomes(self) -> int:
        return len(self.labels)

    def __repr__(self):
        return f"Instrument(labels={self.labels!r}, dim={self.dim})"


@lru_cache(maxsize=None)
def trivial_instrument(dim: int) -> Instrument:
    """Single-outcome identity instrument (label ``I``)."""
    return Instrument(("I",), (np.eye(dim),))


def _distribution(
    arr: np.ndarray, dims: tuple[int, ...], insts: Sequence[Instrument | None]
) -> tuple[list[tuple[str, ...]], np.ndarray]:
    """Joint outcome distribution of per-party instruments.

    ``None`` entries are treated as unmeasured (their pattern label is
    ``I``).  Patterns are returned in the deterministic product order of the
    per-party label lists.  Probabilities are raw squared norms; nothing is
    pruned here.
    """
    n = len(dims)
    if len(insts) != n:
        raise ValueError("need one instrument slot per party")
    measured = [p for p in range(n) if insts[p] is not None]
    for p in measured:
        if insts[p].dim != dims[p]:
            raise ValueError(
                f"instrument dimension {insts[p].dim} != local dimension {dims[p]}"
            )
    if not measured:
        return [tuple("I" for _ in range(n))], np.array([float(np.vdot(arr, arr).real)])

    if all(insts[p]._diag_stack is not None for p in measured):
        t = (arr.real**2 + arr.imag**2).reshape(dims)
        unmeasured = tuple(p for p in range(n) if p not in measured)
        if unmeasured:
            t = t.sum(axis=unmeasured)
        k = len(measured)
        # Repeatedly contract the trailing original axis; each step prepends
        # that party's outcome axis, so the final tensor is indexed by the
        # outcome labels of measured parties in ascending party order.
        for pos in range(k - 1, -1, -1):
            t = np.tensordot(insts[measured[pos]]._diag_stack, t, axes=(1, k - 1))
        probs = np.ascontiguousarray(t).reshape(-1)
        combos = itertools.product(*[insts[p].labels for p in measured])
    else:
        leaves: list[tuple[tuple[str, ...], float]] = []

        def walk(vec: np.ndarray, vdims: tuple[int, ...], i: int, labels: tuple):
            if i == len(measured):
                leaves.append((labels, float(np.vdot(vec, vec).real)))
                return
            p = measured[i]
            inst = insts[p]
            for lbl, proj in zip(inst.labels, inst.projectors):
                nxt, nd = _apply_matrix(vec, vdims, p, proj)
                walk(nxt, nd, i + 1, labels + (lbl,))

        walk(arr, dims, 0, ())
        combos = (labels for labels, _ in leaves)
        probs = np.array([w for _, w in leaves])

    measured_set = frozenset(measured)
    patterns = []
    for combo in combos:
        it = iter(combo)
        patterns.append(tuple(next(it) if p in measured_set else "I" for p in range(n)))
    return patterns, probs


def _project(
    arr: np.ndarray,
    dims: tuple[int, ...],
    insts: Sequence[Instrument | None],
    pattern: Sequence[str],
) -> np.ndarray:
    """Unnormalized post-measurement amplitudes for one outcome pattern."""
    n = len(dims)
    t = arr.reshape(dims)
    out_dims = dims
    for p in range(n):
        inst = insts[p]
        if inst is None:
            continue
        i = inst._label_index[pattern[p]]
        if inst._diag_stack is not None:
            shape = [1] * len(out_dims)
            shape[p] = out_dims[p]
            t = t * inst._diag_stack[i].reshape(shape)
        else:
            flat, out_dims = _apply_matrix(
                np.ascontiguousarray(t).reshape(-1), out_dims, p, inst.projectors[i]
            )
            t = flat.reshape(out_dims)
    return np.ascontiguousarray(t).reshape(-1)


def measure_all(
    state: PureState, instruments: Sequence[Instrument]
) -> list[tuple[tuple[str, ...], float, PureState]]:
    """Jointly measure every party with its labeled projector set.

    Returns ``(pattern, probability, post_state)`` triples covering every
    outcome pattern with probability above ``PROB_FLOOR``; post-states are
    normalized.  Branch probabilities sum to 1 within ``STATE_TOL`` for a
    normalized input (the per-party completeness of each instrument is
    validated at instrument construction).
    """
    if len(instruments) != state.n_parties:
        raise ValueError("need one instrument per party")
    for inst in instruments:
        if inst is None:
            raise ValueError("measure_all requires a real instrument per party "
                             "(use trivial_instrument for untouched parties)")
    patterns, probs = _distribution(state.amplitudes, state.dims, instruments)
    total = float(probs.sum())
    if abs(total - 1.0) > STATE_TOL:
        raise ValueError(f"branch probabilities sum to {total}, expected 1")
    out = []
    for pattern, p in zip(patterns, probs):
        p = float(p)
        if p < PROB_FLOOR:
            continue
        vec = _project(state.amplitudes, state.dims, instruments, pattern)
        vec = vec / np.linalg.norm(vec)
        out.append((pattern, p, PureState(state.dims, vec)))
    return out


@dataclass(frozen=True)
class ReducedDensity:
    """Reduced density matrix over a retained subset of parties."""

    parties: tuple[int, ...]
    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.complex128, copy=True)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("density matrix must be square")
        if not np.allclose(m, m.conj().T, atol=OP_TOL, rtol=0.0):
            raise ValueError("density matrix is not Hermitian within tolerance")
        evals = np.linalg.eigvalsh(m)
        if evals.min() < -PSD_EIG_SLACK:
            raise ValueError(f"density matrix has eigenvalue {evals.min():.3e} < 0")
        tr = float(np.trace(m).real)
        if abs(tr - 1.0) > STATE_TOL:
            raise ValueError(f"density matrix trace {tr} != 1")
        m.setflags(write=False)
        object.__setattr__(self, "parties", tuple(int(p) for p in self.parties))
        object.__setattr__(self, "matrix", m)


def partial_trace(state: PureState, keep: Iterable[int]) -> ReducedDensity:
    """Trace out everything except ``keep`` (returned in ascending order)."""
    keep = tuple(sorted(set(int(p) for p in keep)))
    n = state.n_parties
    if not keep:
        raise ValueError("keep must be nonempty")
    if keep[0] < 0 or keep[-1] >= n:
        raise ValueError("keep contains an out-of-range party")
    if abs(state.norm() - 1.0) > STATE_TOL:
        raise ValueError("partial_trace expects a normalized state")
    rest = tuple(p for p in range(n) if p not in keep)
    t = state.tensor().transpose(keep + rest)
    dk = 1
    for p in keep:
        dk *= state.dims[p]
    m = t.reshape(dk, -1)
    rho = m @ m.conj().T
    # Symmetrize away the last bits of roundoff so downstream eigensolves
    # see an exactly Hermitian matrix.
    rho = 0.5 * (rho + rho.conj().T)
    return ReducedDensity(keep, rho)


def von_neumann_entropy(rho: ReducedDensity) -> float:
    """Entropy of a density matrix in bits; eigenvalues below 1e-12 drop out."""
    evals = np.linalg.eigvalsh(rho.matrix)
    if evals.min() < -PSD_EIG_SLACK:
        raise ValueError("matrix is not positive semidefinite within tolerance")
    evals = np.clip(evals, 0.0, None)
    evals = evals[evals >= ENTROPY_EIG_FLOOR]
    if evals.size == 0:
        return 0.0
    return float(-(evals * np.log2(evals)).sum())


def schmidt_coefficients(state: PureState, bipartition: Iterable[int]) -> np.ndarray:
    """Schmidt coefficients across ``bipartition`` vs its complement, descending.

    The squared coefficients are the eigenvalues of either reduced state and
    sum to 1 for a normalized input.
    """
    subset = tuple(sorted(set(int(p) for p in bipartition)))
    n = state.n_parties
    if not subset or len(subset) >= n:
        raise ValueError("bipartition must be a nonempty proper subset of the parties")
    if subset[0] < 0 or subset[-1] >= n:
        raise ValueError("bipartition contains an out-of-range party")
    rest = tuple(p for p in range(n) if p not in subset)
    t = state.tensor().transpose(subset + rest)
    dk = 1
    for p in subset:
        dk *= state.dims[p]
    return np.linalg.svd(t.reshape(dk, -1), compute_uv=False)


def extract_pure_factor(state: PureState, keep: Iterable[int]) -> PureState | None:
    """Pure state of ``keep`` when it is unentangled with the rest, else None.

    "Unentangled" means the top Schmidt coefficient across the cut is within
    ``STATE_TOL`` of 1.  The returned factor's parties follow ascending
    original order.  A fast path handles the common case where every traced
    party sits in a definite basis state.
    """
    keep = tuple(sorted(set(int(p) for p in keep)))
    n = state.n_parties
    if not keep or keep[0] < 0 or keep[-1] >= n:
        raise ValueError("keep must be a nonempty in-range subset")
    rest = tuple(p for p in range(n) if p not in keep)
    if not rest:
        return state.normalized()

    t = state.tensor()
    abs2 = t.real**2 + t.imag**2
    slicer: list = [slice(None)] * n
    concentrated = True
    for p in rest:
        axes = tuple(q for q in range(n) if q != p)
        marg = abs2.sum(axis=axes)
        k = int(np.argmax(marg))
        if marg[k] < 1.0 - STATE_TOL:
            concentrated = False
            break
        slicer[p] = k
    if concentrated:
        vec = np.ascontiguousarray(t[tuple(slicer)]).reshape(-1)
        nrm = np.linalg.norm(vec)
        if nrm**2 < 1.0 - len(rest) * STATE_TOL - STATE_TOL:
            concentrated = False
        else:
            dims_keep = tuple(state.dims[p] for p in keep)
            return PureState(dims_keep, vec / nrm)

    m = t.transpose(keep + rest)
    dk = 1
    for p in keep:
        dk *= state.dims[p]
    u, s, _ = np.linalg.svd(m.reshape(dk, -1), full_matrices=False)
    if s[0] < 1.0 - STATE_TOL:
        return None
    dims_keep = tuple(state.dims[p] for p in keep)
    return PureState(dims_keep, u[:, 0])


def _two_by_two_singular_values(m: np.ndarray) -> tuple[float, float]:
    """Singular values of a 2x2 complex matrix, descending (closed form)."""
    a, b = m[0, 0], m[0, 1]
    c, d = m[1, 0], m[1, 1]
    g = (abs(a) ** 2 + abs(b) ** 2 + abs(c) ** 2 + abs(d) ** 2)
    det = a * d - b * c
    disc = g * g - 4.0 * abs(det) ** 2
    disc = math.sqrt(disc) if disc > 0.0 else 0.0
    s1 = math.sqrt(max((g + disc) / 2.0, 0.0))
    s2 = math.sqrt(max((g - disc) / 2.0, 0.0))
    return s1, s2


def fidelity_to_epr(state: PureState, pair: tuple[int, int]) -> float:
    """Best squared overlap of a pair's state with a maximally entangled
    two-qubit state in the parties' {0,1} subspaces.

    The optimization over local phase/basis freedom on the two parties has
    the closed form ((s1 + s2) / sqrt(2))**2 where s1, s2 are the singular
    values of the pair state's qubit block.  A maximally entangled qubit
    pair scores 1, any product state scores at most 1/2.

    All parties outside the pair must factor out as a pure product (top
    Schmidt coefficient across the pair/rest cut within 1e-10 of 1),
    otherwise a ValueError is raised.
    """
    i, j = int(pair[0]), int(pair[1])
    if i == j:
        raise ValueError("pair must name two distinct parties")
    if min(state.dims[i], state.dims[j]) < 2:
        raise ValueError("both pair parties need local dimension >= 2")
    phi = extract_pure_factor(state, (i, j))
    if phi is None:
        raise ValueError("pair is still entangled with spectator parties")
    block = phi.tensor()[:2, :2]
    s1, s2 = _two_by_two_singular_values(block)
    return min(1.0, (s1 + s2) ** 2 / 2.0)


def overlap(a: PureState, b: PureState) -> float:
    """Squared inner product |<a|b>|^2."""
    if a.dims != b.dims:
        raise ValueError("states live on different systems")
    return float(abs(np.vdot(a.amplitudes, b.amplitudes)) ** 2)
