"""Round-based LOCC protocol executor.

A protocol is a list of :class:`RoundSpec` values, each pairing a per-party
local operator (applied before measurement) with a per-party labeled
instrument.  The executor supports exact outcome-tree enumeration
(:func:`enumerate_round`, :func:`exact_expectation`) and seeded Monte Carlo
trajectory sampling (:func:`run_trajectory`, :func:`monte_carlo`).

Parties leave the protocol when they measure the removal label (``B`` for
the weak-rotation rounds used here); the executor masks each round's
operators and instruments to the currently active parties, so one spec list
drives protocols whose active set shrinks over time.

Outcome classification is structural: a branch is a success exactly when
the still-active parties are two parties sharing a maximally entangled
qubit pair (EPR fidelity within 1e-10 of 1) with everyone else in a product
state, a failure when the active remainder is fully product, and a
continuation when a smaller single-excitation (W-class) state survives.
Multi-removal outcomes on more than three parties admit two handling modes:

* ``structural`` (default): classify by the post-state; k removals on an
  m-party single-excitation state leave the (m-k)-party one, and the
  protocol continues on it.
* ``paper``: only single-removal announcements advance the protocol;
  outcomes with two or more removals abort the run and are tallied as
  failures even though the remainder may still be entangled.

Trajectories are independent given (seed, trial index); results merge by
tally addition, so trials may run in parallel.  Exact enumeration is
single-threaded per call.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .qstate import (
    PROB_FLOOR,
    STATE_TOL,
    Instrument,
    LocalOperator,
    PureState,
    ReducedDensity,
    _apply_matrix,
    _distribution,
    _project,
    basis_index,
    extract_pure_factor,
    fidelity_to_epr,
    partial_trace,
    schmidt_coefficients,
)

REMOVAL_LABEL = "B"
MULTI_B_MODES = ("structural", "paper")


class ProtocolClassificationError(RuntimeError):
    """A measured branch matches none of continue / success / failure.

    This signals a protocol construction bug (the round specs drove the
    state outside the family the classifier understands), not a user error.
    """


@dataclass(frozen=True)
class RoundSpec:
    """One protocol round: per-party pre-measurement operator + instrument.

    Entries are indexed by party; ``None`` means "leave that party alone".
    At execution time both tuples are masked to the currently active
    parties: inactive parties receive no operator and a trivial
    single-outcome instrument (pattern label ``I``).
    """

    ops: tuple[LocalOperator | None, ...]
    instruments: tuple[Instrument | None, ...]

    def __post_init__(self):
        if len(self.ops) != len(self.instruments):
            raise ValueError("ops and instruments must cover the same parties")
        for p, op in enumerate(self.ops):
            if op is not None and op.party != p:
                raise ValueError(f"operator at slot {p} is built for party {op.party}")

    @property
    def n_parties(self) -> int:
        return len(self.ops)


@dataclass(frozen=True)
class OutcomeTag:
    """Classification of a measured branch."""

    kind: str  # "continue" | "success" | "failure"
    pair: tuple[int, int] | None
    active_after: frozenset[int]


@dataclass(frozen=True)
class RoundOutcome:
    """Classified result of one measurement round."""

    kind: str
    pattern: tuple[str, ...]
    probability: float
    state: PureState
    pair: tuple[int, int] | None = None
    active_after: frozenset[int] = frozenset()


@dataclass(frozen=True)
class RngStream:
    """Deterministic per-trial random stream.

    Streams are derived counter-style: stream ``index`` owns the Philox
    counter block starting at ``index * 2**128`` under the master ``seed``
    key, so identical (seed, index) pairs replay identical trajectories and
    distinct indices never overlap.
    """

    seed: int
    index: int = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if not 0 <= int(self.index) < 2**64:
            raise ValueError("stream index must fit in 64 bits")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(
            np.random.Philox(key=int(self.seed), counter=int(self.index) << 128)
        )


@dataclass(frozen=True)
class DistillationTally:
    """Per-pair EPR counts plus failures over a batch of trials."""

    pair_counts: Mapping[tuple[int, int], int]
    failures: int
    trials: int
    rounds_histogram: Mapping[int, int]

    def __post_init__(self):
        pc = {tuple(sorted(k)): int(v) for k, v in self.pair_counts.items()}
        hist = {int(k): int(v) for k, v in self.rounds_histogram.items()}
        if any(v < 0 for v in pc.values()) or self.failures < 0:
            raise ValueError("counts must be nonnegative")
        if sum(pc.values()) + self.failures != self.trials:
            raise ValueError("pair counts plus failures must equal trials")
        if hist and sum(hist.values()) != self.trials:
            raise ValueError("rounds histogram must account for every trial")
        object.__setattr__(self, "pair_counts", pc)
        object.__setattr__(self, "rounds_histogram", hist)

    @property
    def successes(self) -> int:
        return sum(self.pair_counts.values())

    @property
    def success_rate(self) -> float:
        return self.successes / self.trials if self.trials else 0.0

    def success_stderr(self) -> float:
        p = self.success_rate
        return math.sqrt(p * (1.0 - p) / self.trials) if self.trials else 0.0

    def __add__(self, other: "DistillationTally") -> "DistillationTally":
        pc = dict(self.pair_counts)
        for k, v in other.pair_counts.items():
            pc[k] = pc.get(k, 0) + v
        hist = dict(self.rounds_histogram)
        for k, v in other.rounds_histogram.items():
            hist[k] = hist.get(k, 0) + v
        return DistillationTally(
            pc, self.failures + other.failures, self.trials + other.trials, hist
        )


def _single_excitation_overlap(phi: PureState) -> float:
    """|<uniform single-excitation state | phi>|^2 on phi's parties."""
    m = phi.n_parties
    amp = 0.0 + 0.0j
    for i in range(m):
        digits = tuple(1 if j == i else 0 for j in range(m))
        amp += phi.amplitudes[basis_index(phi.dims, digits)]
    return float(abs(amp) ** 2) / m


def _fully_product(phi: PureState) -> bool:
    if phi.n_parties == 1:
        return True
    for p in range(phi.n_parties):
        s = schmidt_coefficients(phi, (p,))
        if s[0] < 1.0 - STATE_TOL:
            return False
    return True


def classify_outcome(
    pattern: Sequence[str],
    post: PureState,
    active: Iterable[int],
    *,
    multi_b: str = "structural",
    removal_label: str = REMOVAL_LABEL,
) -> OutcomeTag:
    """Classify one measured branch by the structure of its post-state.

    Zero removal labels continue the protocol unchanged.  Otherwise the
    still-active remainder is inspected: two parties sharing an EPR pair is
    a success, a fully product remainder is a failure, and a surviving
    smaller single-excitation state continues with the reduced active set.
    Anything else raises :class:`ProtocolClassificationError`.
    """
    if multi_b not in MULTI_B_MODES:
        raise ValueError(f"multi_b must be one of {MULTI_B_MODES}")
    active = frozenset(int(p) for p in active)
    removed = frozenset(p for p in active if pattern[p] == removal_label)
    remaining = active - removed
    if not removed:
        return OutcomeTag("continue", None, active)
    if multi_b == "paper" and len(removed) >= 2:
        # Single-announcement reading: a multi-removal round aborts the run,
        # whatever the remainder looks like.
        return OutcomeTag("failure", None, remaining)
    k = len(remaining)
    if k <= 1:
        return OutcomeTag("failure", None, remaining)
    if k == 2:
        pair = tuple(sorted(remaining))
        if fidelity_to_epr(post, pair) >= 1.0 - STATE_TOL:
            return OutcomeTag("success", pair, remaining)
        phi = extract_pure_factor(post, remaining)
        if phi is not None and _fully_product(phi):
            return OutcomeTag("failure", None, remaining)
        raise ProtocolClassificationError(
            f"two-party remainder of pattern {tuple(pattern)} is neither an EPR "
            "pair nor a product state"
        )
    phi = extract_pure_factor(post, remaining)
    if phi is None:
        raise ProtocolClassificationError(
            "active remainder is entangled with removed parties"
        )
    if _single_excitation_overlap(phi) >= 1.0 - STATE_TOL:
        return OutcomeTag("continue", None, remaining)
    if _fully_product(phi):
        return OutcomeTag("failure", None, remaining)
    raise ProtocolClassificationError(
        f"remainder of pattern {tuple(pattern)} matches no known outcome class"
    )


def _masked_round(
    state: PureState, spec: RoundSpec, active: frozenset[int]
) -> tuple[np.ndarray, tuple[int, ...], list[Instrument | None]]:
    """Apply the round's operators on active parties; collect instruments."""
    if spec.n_parties != state.n_parties:
        raise ValueError("round spec and state disagree on the party count")
    arr, dims = state.amplitudes, state.dims
    for p in sorted(active):
        op = spec.ops[p]
        if op is None:
            continue
        if dims[p] != op.d_in:
            raise ValueError(
                f"operator input dimension {op.d_in} != local dimension {dims[p]}"
            )
        arr, dims = _apply_matrix(arr, dims, p, op.matrix)
    insts = [
        spec.instruments[p] if p in active else None for p in range(state.n_parties)
    ]
    return arr, dims, insts


def enumerate_round(
    state: PureState,
    spec: RoundSpec,
    active: Iterable[int] | None = None,
    *,
    multi_b: str = "structural",
) -> list[RoundOutcome]:
    """Exactly enumerate one round's outcome branches.

    Branches below ``PROB_FLOOR`` are pruned; the surviving probabilities
    sum to 1 within ``STATE_TOL`` and every branch is classified.
    """
    act = (
        frozenset(range(state.n_parties))
        if active is None
        else frozenset(int(p) for p in active)
    )
    arr, dims, insts = _masked_round(state, spec, act)
    patterns, probs = _distribution(arr, dims, insts)
    total = float(probs.sum())
    if abs(total - 1.0) > STATE_TOL:
        raise ValueError(f"round branch probabilities sum to {total}, expected 1")
    outcomes = []
    for pattern, prob in zip(patterns, probs):
        prob = float(prob)
        if prob < PROB_FLOOR:
            continue
        vec = _project(arr, dims, insts, pattern)
        post = PureState(dims, vec / np.linalg.norm(vec))
        tag = classify_outcome(pattern, post, act, multi_b=multi_b)
        outcomes.append(
            RoundOutcome(tag.kind, pattern, prob, post, tag.pair, tag.active_after)
        )
    return outcomes


def sample_round(
    state: PureState,
    spec: RoundSpec,
    active: Iterable[int] | None,
    rng: np.random.Generator,
    *,
    multi_b: str = "structural",
) -> RoundOutcome:
    """Sample one round outcome and classify only the sampled branch.

    The branch is drawn by cumulative-probability inversion over the
    deterministic pattern label order, so a fixed generator state always
    selects the same branch.
    """
    act = (
        frozenset(range(state.n_parties))
        if active is None
        else frozenset(int(p) for p in active)
    )
    arr, dims, insts = _masked_round(state, spec, act)
    patterns, probs = _distribution(arr, dims, insts)
    u = rng.random()
    chosen = -1
    acc = 0.0
    for i in range(len(patterns)):
        p = float(probs[i])
        if p < PROB_FLOOR:
            continue
        acc += p
        chosen = i
        if u < acc:
            break
    if chosen < 0:
        raise ValueError("no branch carries probability above the floor")
    pattern = patterns[chosen]
    vec = _project(arr, dims, insts, pattern)
    post = PureState(dims, vec / np.linalg.norm(vec))
    tag = classify_outcome(pattern, post, act, multi_b=multi_b)
    return RoundOutcome(
        tag.kind, pattern, float(probs[chosen]), post, tag.pair, tag.active_after
    )


def run_trajectory(
    state: PureState,
    rounds: Sequence[RoundSpec],
    rng: RngStream,
    active: Iterable[int] | None = None,
    *,
    multi_b: str = "structural",
) -> tuple[RoundOutcome, int]:
    """Sample one trajectory through the round list.

    Returns the terminal outcome and the number of rounds executed.  A run
    that exhausts every round while still continuing is returned as that
    final ``continue`` outcome; callers tally it as a failure (the residual
    entanglement is not credited).
    """
    if not rounds:
        raise ValueError("round list must be nonempty")
    gen = rng.generator()
    st = state
    act = (
        frozenset(range(state.n_parties))
        if active is None
        else frozenset(int(p) for p in active)
    )
    outcome = None
    for depth, spec in enumerate(rounds, start=1):
        outcome = sample_round(st, spec, act, gen, multi_b=multi_b)
        if outcome.kind != "continue":
            return outcome, depth
        st = outcome.state
        act = outcome.active_after
    return outcome, len(rounds)


def _w_family_fidelity(post: PureState, remaining: frozenset[int]) -> float:
    """<W_m| rho_remaining |W_m> for the reduced state on the active parties."""
    parties = tuple(sorted(remaining))
    rho = partial_trace(post, parties)
    dims = tuple(post.dims[p] for p in parties)
    m = len(parties)
    w = np.zeros(rho.matrix.shape[0], dtype=np.complex128)
    for i in range(m):
        digits = tuple(1 if j == i else 0 for j in range(m))
        w[basis_index(dims, digits)] = 1.0 / math.sqrt(m)
    return float((w.conj() @ rho.matrix @ w).real)


def iter_terminal_branches(
    state: PureState,
    rounds: Sequence[RoundSpec],
    active: Iterable[int] | None = None,
    *,
    multi_b: str = "structural",
    verify_continue: bool = False,
) -> Iterator[tuple[float, RoundOutcome, int]]:
    """Depth-first walk of the full outcome tree.

    Yields ``(path_probability, outcome, depth)`` for every terminal leaf:
    successes and failures anywhere in the tree, plus ``continue`` leaves at
    the final depth (round-budget exhaustion).  With ``verify_continue`` the
    walk asserts that every continuation still holds the uniform
    single-excitation state of its active parties.
    """
    if not rounds:
        raise ValueError("round list must be nonempty")
    act0 = (
        frozenset(range(state.n_parties))
        if active is None
        else frozenset(int(p) for p in active)
    )

    def walk(st: PureState, act: frozenset[int], depth: int, pref: float):
        outcomes = enumerate_round(st, rounds[depth], act, multi_b=multi_b)
        for out in outcomes:
            p = pref * out.probability
            if out.kind != "continue":
                yield p, out, depth + 1
                continue
            if verify_continue:
                fid = _w_family_fidelity(out.state, out.active_after)
                if fid < 1.0 - STATE_TOL:
                    raise ProtocolClassificationError(
                        f"continue branch at depth {depth + 1} drifted from the "
                        f"single-excitation family (fidelity {fid})"
                    )
            if depth + 1 == len(rounds):
                yield p, out, depth + 1
            else:
                yield from walk(out.state, out.active_after, depth + 1, p)

    yield from walk(state, act0, 0, 1.0)


@dataclass(frozen=True)
class ExactExpectation:
    """Full-tree expected EPR yield of a finite round budget."""

    expected: float
    per_pair: Mapping[tuple[int, int], float]
    failure_probability: float


def exact_expectation(
    state: PureState,
    rounds: Sequence[RoundSpec],
    active: Iterable[int] | None = None,
    *,
    multi_b: str = "structural",
    verify_continue: bool = True,
) -> ExactExpectation:
    """Expected EPR count (and its split over pairs) by exact tree evaluation.

    Exhausted continuations contribute to the failure mass; only realized
    EPR successes are credited.
    """
    expected = 0.0
    failure = 0.0
    per_pair: dict[tuple[int, int], float] = {}
    for p, out, _depth in iter_terminal_branches(
        state, rounds, active, multi_b=multi_b, verify_continue=verify_continue
    ):
        if out.kind == "success":
            expected += p
            per_pair[out.pair] = per_pair.get(out.pair, 0.0) + p
        else:
            failure += p
    total = expected + failure
    if abs(total - 1.0) > STATE_TOL:
        raise ValueError(f"terminal branch probabilities sum to {total}, expected 1")
    return ExactExpectation(expected, per_pair, failure)


def monte_carlo(
    state: PureState,
    rounds: Sequence[RoundSpec],
    trials: int,
    seed: int,
    active: Iterable[int] | None = None,
    *,
    multi_b: str = "structural",
) -> tuple[DistillationTally, float]:
    """Seeded Monte Carlo estimate of the round list's outcome statistics.

    Deterministic for a fixed seed; trial ``t`` uses stream ``(seed, t)``.
    Returns the tally and the binomial standard error of the success rate.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    pair_counts: dict[tuple[int, int], int] = {}
    failures = 0
    hist: dict[int, int] = {}
    for t in range(trials):
        out, depth = run_trajectory(
            state, rounds, RngStream(seed, t), active, multi_b=multi_b
        )
        hist[depth] = hist.get(depth, 0) + 1
        if out.kind == "success":
            pair_counts[out.pair] = pair_counts.get(out.pair, 0) + 1
        else:
            failures += 1
    tally = DistillationTally(pair_counts, failures, trials, hist)
    return tally, tally.success_stderr()
