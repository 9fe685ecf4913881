"""Binary codebooks, code-to-molecule assignment, and abundance priors.

The canonical codebook is the 16-round, constant-weight-4 family with
pairwise Hamming distance >= 4 (140 words), generated deterministically from
the extended binary Hamming [16,11,4] code. Priors are strictly positive
probability vectors; symmetric-Dirichlet draws and single-sample maximum
likelihood concentration estimates are provided for prior-sensitivity
studies.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, logsumexp

from .bits import (
    MAX_LENGTH,
    bits_to_words,
    popcount,
    string_to_word,
    word_to_string,
    words_to_bits,
)
from .errors import InputError

ALPHA_MIN = 1e-6
ALPHA_MAX = 1e6
PROB_FLOOR = 1e-300


@dataclass(frozen=True)
class Codebook:
    """Ordered list of packed codewords with declared distance and weight.

    ``min_distance`` and ``weight`` are declared contracts; ``validate``
    reports what the word list actually realizes, so malformed books can be
    inspected rather than rejected at construction.
    """

    length: int
    words: np.ndarray
    min_distance: int
    weight: int | None = None

    def __post_init__(self):
        if not 1 <= self.length <= MAX_LENGTH:
            raise InputError(f"code length {self.length} outside [1, {MAX_LENGTH}]")
        words = np.ascontiguousarray(np.asarray(self.words, dtype=np.uint32))
        if words.ndim != 1 or words.size == 0:
            raise InputError("a codebook needs a non-empty 1-D word list")
        if self.length < MAX_LENGTH and np.any(words >> np.uint32(self.length)):
            raise InputError(f"codeword exceeds {self.length} bits")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)

    @property
    def size(self) -> int:
        return int(self.words.size)

    def bit_matrix(self) -> np.ndarray:
        return words_to_bits(self.words, self.length)

    def word_strings(self) -> list[str]:
        return [word_to_string(int(w), self.length) for w in self.words]


@dataclass(frozen=True)
class ValidationReport:
    """Realized properties of a word list; violations are reported, not raised."""

    n_words: int
    length: int
    distinct: bool
    min_distance: int | None
    weights: dict[int, int]

    @property
    def constant_weight(self) -> int | None:
        return next(iter(self.weights)) if len(self.weights) == 1 else None


@dataclass(frozen=True)
class AssignmentMap:
    """Bijection from molecule ids (vector positions) onto distinct codewords."""

    codebook: Codebook
    code_indices: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        idx = np.ascontiguousarray(np.asarray(self.code_indices, dtype=np.int32))
        if idx.ndim != 1 or idx.size == 0:
            raise InputError("an assignment needs at least one molecule")
        if idx.min() < 0 or idx.max() >= self.codebook.size:
            raise InputError("assignment index outside the codebook")
        if np.unique(idx).size != idx.size:
            raise InputError("assignment must map molecules to distinct codes")
        idx.setflags(write=False)
        object.__setattr__(self, "code_indices", idx)
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != idx.size:
                raise InputError("need exactly one name per molecule")
            object.__setattr__(self, "names", names)

    @property
    def n_molecules(self) -> int:
        return int(self.code_indices.size)

    @property
    def codewords(self) -> np.ndarray:
        return self.codebook.words[self.code_indices]

    @property
    def unused_indices(self) -> np.ndarray:
        mask = np.ones(self.codebook.size, dtype=bool)
        mask[self.code_indices] = False
        return np.nonzero(mask)[0].astype(np.int32)

    def molecule_names(self) -> list[str]:
        if self.names is not None:
            return list(self.names)
        return [f"mol_{g:04d}" for g in range(self.n_molecules)]


@dataclass(frozen=True)
class PriorDist:
    """Molecule abundance prior: strictly positive, sums to one."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.probs, dtype=np.float64))
        if p.ndim != 1 or p.size == 0:
            raise InputError("prior must be a non-empty 1-D vector")
        if np.any(p <= 0.0):
            raise InputError("prior entries must be strictly positive")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InputError(f"prior sums to {p.sum()!r}, expected 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_molecules(self) -> int:
        return int(self.probs.size)

    @classmethod
    def renormalized(cls, raw, tol: float = 1e-6) -> "PriorDist":
        """Build from near-normalized probabilities; reject larger deviations."""
        p = np.asarray(raw, dtype=np.float64)
        total = p.sum()
        if abs(total - 1.0) > tol:
            raise InputError(f"probabilities sum to {total!r}, off by more than {tol}")
        return cls(p / total)


def generate_mhd4() -> Codebook:
    """The 140 weight-4 words of the extended binary Hamming [16,11,4] code.

    Built from the systematic [15,11] Hamming parity-check matrix whose data
    columns are the eleven 4-bit patterns of weight >= 2 (ascending), extended
    with an overall parity bit, then filtered to constant weight 4. Words are
    returned ascending as unsigned integers, which fixes a platform-independent
    canonical order.
    """
    data_cols = [m for m in range(1, 16) if bin(m).count("1") >= 2]
    a_matrix = np.array(
        [[(m >> r) & 1 for r in range(4)] for m in data_cols], dtype=np.uint8
    )
    messages = words_to_bits(np.arange(1 << 11, dtype=np.uint32), 11)
    parity = (messages @ a_matrix) % 2
    body = np.hstack([messages, parity])
    overall = body.sum(axis=1, keepdims=True) % 2
    words = bits_to_words(np.hstack([body, overall]).astype(np.uint8))
    words = np.sort(words[popcount(words) == 4])
    if words.size != 140:
        raise AssertionError(f"extended-Hamming weight-4 filter produced {words.size} words")
    return Codebook(length=16, words=words, min_distance=4, weight=4)


def validate(codebook: Codebook) -> ValidationReport:
    """Realized distinctness, minimum pairwise distance, and weight histogram."""
    words = codebook.words
    weights = dict(sorted(Counter(popcount(words).tolist()).items()))
    distinct = bool(np.unique(words).size == words.size)
    min_distance = None
    if words.size >= 2:
        best = codebook.length + 1
        for i in range(words.size - 1):
            d = int(popcount(words[i + 1 :] ^ words[i]).min())
            best = min(best, d)
        min_distance = best
    return ValidationReport(
        n_words=codebook.size,
        length=codebook.length,
        distinct=distinct,
        min_distance=min_distance,
        weights=weights,
    )


def hamming_distance(a: int, b: int) -> int:
    """Number of differing bit positions between two packed codewords."""
    return (int(a) ^ int(b)).bit_count()


def random_assignment(
    codebook: Codebook,
    n_molecules: int,
    seed,
    names: tuple[str, ...] | None = None,
) -> AssignmentMap:
    """Uniform random injection of molecule ids into codewords."""
    if n_molecules < 1:
        raise InputError("need at least one molecule")
    if n_molecules > codebook.size:
        raise InputError(
            f"{n_molecules} molecules exceed the {codebook.size} available codes"
        )
    rng = np.random.default_rng(seed)
    idx = rng.permutation(codebook.size)[:n_molecules].astype(np.int32)
    return AssignmentMap(codebook, idx, names)


def sample_dirichlet_prior(n_molecules: int, alpha: float, seed) -> PriorDist:
    """One symmetric Dirichlet draw over ``n_molecules`` entries.

    Sampling runs in log space via the gamma-boost identity
    ``Gamma(a) == Gamma(a + 1) * U**(1/a)`` so extreme concentrations stay
    finite; entries that underflow double precision are floored at 1e-300 and
    the vector renormalized, keeping every entry strictly positive.
    """
    if alpha <= 0:
        raise InputError("Dirichlet concentration must be positive")
    if n_molecules < 2:
        raise InputError("need at least two molecules")
    rng = np.random.default_rng(seed)
    boost = np.maximum(rng.gamma(alpha + 1.0, size=n_molecules), 5e-324)
    uniforms = np.maximum(rng.random(n_molecules), 5e-324)
    log_gamma = np.log(boost) + np.log(uniforms) / alpha
    log_gamma -= logsumexp(log_gamma)
    probs = np.maximum(np.exp(log_gamma), PROB_FLOOR)
    return PriorDist(probs / probs.sum())


def dirichlet_alpha_score(prior: PriorDist, alpha: float) -> float:
    """d/d(alpha) of the symmetric-Dirichlet log likelihood of one draw."""
    g = prior.n_molecules
    return float(
        g * digamma(g * alpha) - g * digamma(alpha) + np.log(prior.probs).sum()
    )


def estimate_dirichlet_alpha(prior: PriorDist) -> float:
    """Single-sample ML symmetric-Dirichlet concentration, clamped to [1e-6, 1e6].

    The score function is strictly decreasing in alpha, so a bracketed root
    search suffices. Uniform-like priors push the likelihood up without bound
    and return the ceiling; extremely concentrated ones return the floor.
    """
    if np.any(prior.probs <= 0.0):
        raise InputError("alpha estimation needs strictly positive entries")

    def score(a: float) -> float:
        return dirichlet_alpha_score(prior, a)

    if score(ALPHA_MIN) <= 0.0:
        return ALPHA_MIN
    if score(ALPHA_MAX) >= 0.0:
        return ALPHA_MAX
    return float(brentq(score, ALPHA_MIN, ALPHA_MAX, xtol=1e-12))


# ---------------------------------------------------------------------------
# File formats: codebook/assignment TSV (name<TAB>code) and prior CSV.

def save_codebook_tsv(path, codebook: Codebook, names=None) -> None:
    """Write ``name<TAB>code`` rows, code strings with round 1 leftmost."""
    if names is None:
        names = [f"code_{i:03d}" for i in range(codebook.size)]
    if len(names) != codebook.size:
        raise InputError("need exactly one name per codeword")
    with open(path, "w", newline="") as fh:
        fh.write("name\tcode\n")
        for name, code in zip(names, codebook.word_strings()):
            fh.write(f"{name}\t{code}\n")


def load_codebook_tsv(path) -> tuple[list[str], Codebook]:
    """Read a codebook TSV; the declared distance/weight are the realized ones."""
    names: list[str] = []
    words: list[int] = []
    length = None
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header.split("\t")[:2] != ["name", "code"]:
            raise InputError(f"{path}: expected 'name<TAB>code' header, got {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected two tab-separated fields")
            name, code = parts
            if length is None:
                length = len(code)
            elif len(code) != length:
                raise InputError(f"{path}:{lineno}: code length {len(code)} != {length}")
            try:
                words.append(string_to_word(code))
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            names.append(name)
    if not words:
        raise InputError(f"{path}: no codewords found")
    arr = np.asarray(words, dtype=np.uint32)
    if np.unique(arr).size != arr.size:
        raise InputError(f"{path}: duplicate codewords")
    probe = Codebook(length=length, words=arr, min_distance=0)
    report = validate(probe)
    realized = report.min_distance if report.min_distance is not None else length
    book = Codebook(
        length=length,
        words=arr,
        min_distance=realized,
        weight=report.constant_weight,
    )
    return names, book


def save_assignment_tsv(path, assignment: AssignmentMap) -> None:
    """Write an assignment in the codebook TSV format with molecule names."""
    words = assignment.codewords
    with open(path, "w", newline="") as fh:
        fh.write("name\tcode\n")
        for name, word in zip(assignment.molecule_names(), words):
            fh.write(f"{name}\t{word_to_string(int(word), assignment.codebook.length)}\n")


def load_assignment_tsv(
    path,
    codebook: Codebook | None = None,
    molecule_names: list[str] | None = None,
) -> AssignmentMap:
    """Read an assignment TSV, optionally binding it to an existing codebook.

    When ``molecule_names`` is given (e.g. from a prior file), rows are
    reordered to that molecule order and missing/unknown names are rejected.
    """
    names, loaded = load_codebook_tsv(path)
    if codebook is None:
        codebook = loaded
        indices = np.arange(loaded.size, dtype=np.int32)
    else:
        if codebook.length != loaded.length:
            raise InputError(
                f"{path}: code length {loaded.length} != codebook length {codebook.length}"
            )
        position = {int(w): i for i, w in enumerate(codebook.words)}
        try:
            indices = np.asarray([position[int(w)] for w in loaded.words], dtype=np.int32)
        except KeyError:
            raise InputError(f"{path}: contains a code absent from the codebook") from None
    if molecule_names is not None:
        row_of = {name: i for i, name in enumerate(names)}
        if len(row_of) != len(names):
            raise InputError(f"{path}: duplicate molecule names")
        missing = [n for n in molecule_names if n not in row_of]
        if missing:
            raise InputError(f"{path}: no code assigned to {missing[0]!r}")
        order = [row_of[n] for n in molecule_names]
        indices = indices[order]
        names = list(molecule_names)
    return AssignmentMap(codebook, indices, tuple(names))


def save_prior_csv(path, prior: PriorDist, names=None) -> None:
    if names is None:
        names = [f"mol_{g:04d}" for g in range(prior.n_molecules)]
    if len(names) != prior.n_molecules:
        raise InputError("need exactly one name per molecule")
    with open(path, "w", newline="") as fh:
        fh.write("molecule,probability\n")
        for name, p in zip(names, prior.probs):
            fh.write(f"{name},{float(p)!r}\n")


def load_prior_csv(path) -> tuple[list[str], PriorDist]:
    """Read ``molecule,probability`` rows; renormalize within 1e-6, else error."""
    names: list[str] = []
    probs: list[float] = []
    with open(path, newline="") as fh:
        header = fh.readline().rstrip("\n")
        if header.split(",")[:2] != ["molecule", "probability"]:
            raise InputError(f"{path}: expected 'molecule,probability' header")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected two comma-separated fields")
            name, text = parts
            try:
                value = float(text)
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad probability {text!r}") from None
            if value <= 0.0:
                raise InputError(
                    f"{path}:{lineno}: probability for {name!r} must be strictly "
                    "positive; truncate the panel instead of zero-padding it"
                )
            names.append(name)
            probs.append(value)
    if not probs:
        raise InputError(f"{path}: no molecules found")
    return names, PriorDist.renormalized(np.asarray(probs))
