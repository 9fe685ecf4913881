"""Per-round Gaussian intensity model and the derived binary asymmetric channels.

Log intensities are modeled as a two-component Gaussian per imaging round
(off/on). Quantizing each round at the equal-responsibility point between the
two components turns the analog model into one independent binary asymmetric
channel per round, whose crossover probabilities are plain normal tail masses.
Everything downstream (decoding, confusion analysis, assignment optimization)
works on those channels through dense log-likelihood tables over the full
sequence space.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import ndtr, ndtri

from .bits import all_sequences, bits_to_words, words_to_bits
from .codebook import AssignmentMap, Codebook, PriorDist
from .errors import DegenerateRoundError, InputError, NumericalError

PROB_FLOOR = 1e-300


def _round_vector(value, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(np.atleast_1d(np.asarray(value, dtype=np.float64)))
    if arr.ndim != 1 or arr.size == 0:
        raise InputError(f"{name} must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianChannelParams:
    """Per-round Gaussian pairs for log intensity (natural log)."""

    mu0: np.ndarray
    sigma0: np.ndarray
    mu1: np.ndarray
    sigma1: np.ndarray

    def __post_init__(self):
        fields = {}
        for name in ("mu0", "sigma0", "mu1", "sigma1"):
            fields[name] = _round_vector(getattr(self, name), name)
            object.__setattr__(self, name, fields[name])
        sizes = {a.size for a in fields.values()}
        if len(sizes) != 1:
            raise InputError("all per-round parameter vectors must share one length")
        if np.any(self.sigma0 <= 0.0) or np.any(self.sigma1 <= 0.0):
            raise InputError("sigma must be positive in every round")
        if np.any(self.mu1 <= self.mu0):
            bad = int(np.nonzero(self.mu1 <= self.mu0)[0][0])
            raise InputError(
                f"round {bad + 1}: on-component mean must exceed off-component mean"
            )

    @property
    def length(self) -> int:
        return int(self.mu0.size)


@dataclass(frozen=True)
class BacParams:
    """Per-round crossover probabilities of the quantized channel.

    ``theta`` records the log-intensity quantization thresholds when the
    channel was derived from a Gaussian fit; directly constructed synthetic
    channels may leave it unset.
    """

    p01: np.ndarray
    p10: np.ndarray
    theta: np.ndarray | None = None

    def __post_init__(self):
        p01 = _round_vector(self.p01, "p01")
        p10 = _round_vector(self.p10, "p10")
        object.__setattr__(self, "p01", p01)
        object.__setattr__(self, "p10", p10)
        if p01.size != p10.size:
            raise InputError("p01 and p10 must share one length")
        for name, arr in (("p01", p01), ("p10", p10)):
            if np.any(arr <= 0.0) or np.any(arr >= 1.0):
                raise InputError(f"{name} must lie strictly inside (0, 1) in every round")
        if self.theta is not None:
            theta = _round_vector(self.theta, "theta")
            if theta.size != p01.size:
                raise InputError("theta must share the per-round length")
            object.__setattr__(self, "theta", theta)

    @property
    def length(self) -> int:
        return int(self.p01.size)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.p01.tobytes())
        h.update(self.p10.tobytes())
        if self.theta is not None:
            h.update(self.theta.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class IntensityTable:
    """N x L table of strictly positive linear intensities.

    ``truth`` carries the generating molecule id per row for simulated data.
    """

    intensities: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.intensities, dtype=np.float64))
        if arr.ndim != 2 or arr.size == 0:
            raise InputError("intensity table must be a non-empty 2-D array")
        bad = ~(arr > 0.0)
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise InputError(f"row {row}: intensities must be strictly positive")
        arr.setflags(write=False)
        object.__setattr__(self, "intensities", arr)
        if self.truth is not None:
            truth = np.ascontiguousarray(np.asarray(self.truth, dtype=np.int32))
            if truth.shape != (arr.shape[0],):
                raise InputError("truth column must have one id per row")
            truth.setflags(write=False)
            object.__setattr__(self, "truth", truth)

    @property
    def n_rows(self) -> int:
        return int(self.intensities.shape[0])

    @property
    def length(self) -> int:
        return int(self.intensities.shape[1])


@dataclass(frozen=True)
class LikelihoodTable:
    """Dense log likelihood of every length-L sequence under every codeword.

    Rows are the 2^L sequences ascending; columns follow ``words``.
    """

    loglik: np.ndarray
    words: np.ndarray
    length: int
    bac_digest: str

    @cached_property
    def probs(self) -> np.ndarray:
        """Linear probabilities, computed once and cached (large: 2^L x K)."""
        p = np.exp(self.loglik)
        p.setflags(write=False)
        return p

    def column_index(self, words) -> np.ndarray:
        position = {int(w): i for i, w in enumerate(self.words)}
        try:
            return np.asarray([position[int(w)] for w in np.asarray(words)], dtype=np.intp)
        except KeyError:
            raise InputError("requested codeword missing from the likelihood table") from None


def round_mixture_weights(
    assignment: AssignmentMap, prior: PriorDist
) -> tuple[np.ndarray, np.ndarray]:
    """Prior mass of the off/on component in each imaging round."""
    if prior.n_molecules != assignment.n_molecules:
        raise InputError("prior and assignment disagree on the number of molecules")
    bits = words_to_bits(assignment.codewords, assignment.codebook.length)
    w1 = prior.probs @ bits.astype(np.float64)
    return 1.0 - w1, w1


def _equal_responsibility_point(
    mu0: float, s0: float, mu1: float, s1: float, w0: float, w1: float
) -> float:
    """Threshold where the two weighted component densities cross.

    The log-density difference is quadratic in the threshold; with equal
    sigmas it degenerates to the unique linear solution, otherwise the root
    inside (mu0, mu1) is selected (preferring, should both land inside, the
    crossing where the on-responsibility increases with intensity).
    """
    if s0 == s1:
        return 0.5 * (mu0 + mu1) + s0 * s0 * math.log(w0 / w1) / (mu1 - mu0)
    a = 0.5 / s0**2 - 0.5 / s1**2
    b = mu1 / s1**2 - mu0 / s0**2
    c = 0.5 * mu0**2 / s0**2 - 0.5 * mu1**2 / s1**2 + math.log((w1 * s0) / (w0 * s1))
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        raise NumericalError("component densities never cross: negative discriminant")
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    candidates = [q / a]
    if q != 0.0:
        candidates.append(c / q)
    inside = [r for r in candidates if mu0 < r < mu1]
    if not inside:
        raise NumericalError(
            f"no equal-responsibility point inside ({mu0!r}, {mu1!r})"
        )
    if len(inside) == 2:
        inside = [r for r in inside if 2.0 * a * r + b > 0.0] or inside
    return float(inside[0])


def quantization_thresholds(
    params: GaussianChannelParams, assignment: AssignmentMap, prior: PriorDist
) -> np.ndarray:
    """Per-round equal-responsibility quantization thresholds.

    Mixture weights come from the prior pushed through the assignment; a round
    in which no molecule (or every molecule) lights up has no two-component
    structure and is rejected by name.
    """
    w0, w1 = round_mixture_weights(assignment, prior)
    if params.length != w1.size:
        raise InputError("channel parameters and codebook disagree on round count")
    thresholds = np.empty(params.length, dtype=np.float64)
    for l in range(params.length):
        if w1[l] <= 0.0 or w1[l] >= 1.0:
            raise DegenerateRoundError(
                f"round {l + 1}: on-fraction {float(w1[l])!r} admits no threshold"
            )
        thresholds[l] = _equal_responsibility_point(
            float(params.mu0[l]),
            float(params.sigma0[l]),
            float(params.mu1[l]),
            float(params.sigma1[l]),
            float(w0[l]),
            float(w1[l]),
        )
    return thresholds


def bac_from_gaussian(params: GaussianChannelParams, thresholds) -> BacParams:
    """Crossover probabilities as normal tail masses across each threshold."""
    theta = np.asarray(thresholds, dtype=np.float64)
    if theta.shape != (params.length,):
        raise InputError("need one threshold per round")
    p01 = ndtr((params.mu0 - theta) / params.sigma0)
    p10 = ndtr((theta - params.mu1) / params.sigma1)
    for name, arr in (("p01", p01), ("p10", p10)):
        if np.any(arr <= 0.0) or np.any(arr >= 1.0):
            raise NumericalError(
                f"{name} left (0, 1); the Gaussian pair or threshold is degenerate"
            )
    return BacParams(p01=p01, p10=p10, theta=theta)


def gaussian_params_for_rates(
    p01, p10, on_fraction, mu0=0.0, sigma0=0.6
) -> tuple[GaussianChannelParams, np.ndarray]:
    """Per-round Gaussians whose equal-responsibility thresholds hit given rates.

    Closed form: the target false-alarm rate pins the threshold, the fallout
    rate then pins the on-mean for an on-sigma chosen so the threshold is
    exactly the equal-responsibility point for the supplied on-fraction.
    Useful for building synthetic channels calibrated to measured crossover
    rates. Returns the parameters together with the implied thresholds.
    """
    p01, p10, w1, mu0v, s0 = np.broadcast_arrays(
        np.asarray(p01, dtype=np.float64),
        np.asarray(p10, dtype=np.float64),
        np.asarray(on_fraction, dtype=np.float64),
        np.asarray(mu0, dtype=np.float64),
        np.asarray(sigma0, dtype=np.float64),
    )
    if np.any((p01 <= 0) | (p01 >= 0.5) | (p10 <= 0) | (p10 >= 0.5)):
        raise InputError("target crossover rates must lie in (0, 0.5)")
    if np.any((w1 <= 0) | (w1 >= 1)):
        raise InputError("on-fraction must lie in (0, 1)")
    z01 = ndtri(p01)
    z10 = ndtri(p10)
    theta = mu0v - s0 * z01
    sigma1 = s0 * (w1 / (1.0 - w1)) * np.exp(0.5 * (z01**2 - z10**2))
    mu1 = theta - sigma1 * z10
    params = GaussianChannelParams(
        mu0=mu0v.copy(), sigma0=s0.copy(), mu1=mu1, sigma1=sigma1
    )
    return params, theta.copy()


def _log_transitions(bac: BacParams) -> np.ndarray:
    """(input bit, output bit, round) -> log transition probability."""
    p01 = np.maximum(bac.p01, PROB_FLOOR)
    p10 = np.maximum(bac.p10, PROB_FLOOR)
    out = np.empty((2, 2, bac.length), dtype=np.float64)
    out[0, 0] = np.log1p(-bac.p01)
    out[0, 1] = np.log(p01)
    out[1, 0] = np.log(p10)
    out[1, 1] = np.log1p(-bac.p10)
    return out

def log_likelihood(x: int, codeword: int, bac: BacParams) -> float:
    """Log probability of reading sequence ``x`` given a transmitted codeword."""
    table = _log_transitions(bac)
    total = 0.0
    for l in range(bac.length):
        total += table[(int(codeword) >> l) & 1, (int(x) >> l) & 1, l]
    return float(total)


def likelihood_table(codes, bac: BacParams) -> LikelihoodTable:
    """Dense (2^L, K) log-likelihood table over the full sequence space.

    Per-round contributions accumulate in round order, so each entry is
    bit-for-bit the value ``log_likelihood`` returns for that (sequence,
    codeword) pair. Guarded at L <= 24.
    """
    if isinstance(codes, AssignmentMap):
        words = codes.codewords
        length = codes.codebook.length
    elif isinstance(codes, Codebook):
        words = codes.words
        length = codes.length
    else:
        raise InputError("expected a Codebook or AssignmentMap")
    if length != bac.length:
        raise InputError("codebook and channel disagree on the number of rounds")
    if length > 24:
        raise InputError(f"L={length}: dense tables are limited to L <= 24")
    trans = _log_transitions(bac)
    xbits = words_to_bits(all_sequences(length), length).astype(bool)
    # Sequence-space column per (round, input bit), selected per codeword bit.
    select = np.empty((length, 2, xbits.shape[0]), dtype=np.float64)
    for l in range(length):
        select[l, 0] = np.where(xbits[:, l], trans[0, 1, l], trans[0, 0, l])
        select[l, 1] = np.where(xbits[:, l], trans[1, 1, l], trans[1, 0, l])
    cbits = words_to_bits(words, length)
    out = np.zeros((xbits.shape[0], words.size), dtype=np.float64)
    for k in range(words.size):
        col = np.zeros(xbits.shape[0], dtype=np.float64)
        for l in range(length):
            col += select[l, cbits[k, l]]
        out[:, k] = col
    out.setflags(write=False)
    return LikelihoodTable(
        loglik=out, words=np.array(words, dtype=np.uint32), length=length,
        bac_digest=bac.digest(),
    )


SIMULATION_BLOCK_ROWS = 65536


def simulate(
    assignment: AssignmentMap,
    prior: PriorDist,
    params: GaussianChannelParams,
    n: int,
    seed,
) -> IntensityTable:
    """Draw molecules and per-round intensities from the generative model.

    Rows are produced in fixed-size blocks with independently derived seeds,
    so the output is identical however the blocks are scheduled.
    """
    if n < 1:
        raise InputError("need at least one row")
    if prior.n_molecules != assignment.n_molecules:
        raise InputError("prior and assignment disagree on the number of molecules")
    length = assignment.codebook.length
    if params.length != length:
        raise InputError("channel parameters and codebook disagree on round count")
    cbits = words_to_bits(assignment.codewords, length).astype(bool)
    cdf = np.cumsum(prior.probs)
    cdf[-1] = 1.0
    n_blocks = -(-n // SIMULATION_BLOCK_ROWS)
    children = np.random.SeedSequence(seed).spawn(n_blocks)
    intensities = np.empty((n, length), dtype=np.float64)
    truth = np.empty(n, dtype=np.int32)
    for b, child in enumerate(children):
        lo = b * SIMULATION_BLOCK_ROWS
        hi = min(n, lo + SIMULATION_BLOCK_ROWS)
        rng = np.random.default_rng(child)
        g = np.searchsorted(cdf, rng.random(hi - lo), side="right").astype(np.int32)
        np.clip(g, 0, prior.n_molecules - 1, out=g)
        bits = cbits[g]
        loc = np.where(bits, params.mu1, params.mu0)
        scale = np.where(bits, params.sigma1, params.sigma0)
        intensities[lo:hi] = np.exp(rng.normal(loc, scale))
        truth[lo:hi] = g
    return IntensityTable(intensities=intensities, truth=truth)


def quantize(table: IntensityTable, thresholds) -> np.ndarray:
    """Binary readout per round: 1 iff log intensity strictly exceeds the
    threshold (exact ties read 0)."""
    theta = np.asarray(thresholds, dtype=np.float64)
    if theta.shape != (table.length,):
        raise InputError("need one threshold per round")
    bits = np.log(table.intensities) > theta
    return bits_to_words(bits.astype(np.uint8))


# ---------------------------------------------------------------------------
# File formats: channel parameter JSON and intensity CSV.

def save_params_json(path, params: GaussianChannelParams, bac: BacParams | None = None) -> None:
    payload = {
        "log_base": "e",
        "mu0": params.mu0.tolist(),
        "sigma0": params.sigma0.tolist(),
        "mu1": params.mu1.tolist(),
        "sigma1": params.sigma1.tolist(),
    }
    if bac is not None:
        if bac.theta is not None:
            payload["theta"] = bac.theta.tolist()
        payload["p01"] = bac.p01.tolist()
        payload["p10"] = bac.p10.tolist()
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params_json(path) -> tuple[GaussianChannelParams, BacParams | None]:
    with open(path) as fh:
        payload = json.load(fh)
    try:
        params = GaussianChannelParams(
            mu0=np.asarray(payload["mu0"], dtype=np.float64),
            sigma0=np.asarray(payload["sigma0"], dtype=np.float64),
            mu1=np.asarray(payload["mu1"], dtype=np.float64),
            sigma1=np.asarray(payload["sigma1"], dtype=np.float64),
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing channel parameter array {exc}") from None
    bac = None
    if "p01" in payload and "p10" in payload:
        theta = payload.get("theta")
        bac = BacParams(
            p01=np.asarray(payload["p01"], dtype=np.float64),
            p10=np.asarray(payload["p10"], dtype=np.float64),
            theta=None if theta is None else np.asarray(theta, dtype=np.float64),
        )
    return params, bac


def save_intensity_csv(path, table: IntensityTable, molecule_names=None) -> None:
    """Write linear intensities, one row per spot, optional trailing truth column."""
    length = table.length
    header = ",".join(f"round_{l + 1}" for l in range(length))
    with_truth = table.truth is not None
    if with_truth:
        header += ",truth"
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        for i in range(table.n_rows):
            row = ",".join(repr(float(v)) for v in table.intensities[i])
            if with_truth:
                g = int(table.truth[i])
                label = molecule_names[g] if molecule_names is not None else str(g)
                row += f",{label}"
            fh.write(row + "\n")


def load_intensity_csv(path, molecule_names=None) -> IntensityTable:
    """Read an intensity CSV (header optional, trailing truth column optional)."""
    name_to_id = (
        {name: g for g, name in enumerate(molecule_names)} if molecule_names else {}
    )
    rows: list[list[float]] = []
    truth: list[int] = []
    has_truth = None
    with open(path, newline="") as fh:
        first = fh.readline().rstrip("\n")
        if not first:
            raise InputError(f"{path}: empty intensity file")
        lines = []
        fields = first.split(",")
        try:
            float(fields[0])
            lines.append((1, first))
        except ValueError:
            has_truth = fields[-1] == "truth"
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if line:
                lines.append((lineno, line))
        if not lines:
            raise InputError(f"{path}: no data rows")
        for lineno, line in lines:
            fields = line.split(",")
            if has_truth is None:
                # Headerless file: a trailing non-numeric field is the truth id.
                try:
                    float(fields[-1])
                    has_truth = False
                except ValueError:
                    has_truth = True
            cut = len(fields) - 1 if has_truth else len(fields)
            try:
                rows.append([float(v) for v in fields[:cut]])
            except ValueError as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from None
            if has_truth:
                label = fields[-1]
                if label in name_to_id:
                    truth.append(name_to_id[label])
                else:
                    try:
                        truth.append(int(label))
                    except ValueError:
                        raise InputError(
                            f"{path}:{lineno}: unknown truth molecule {label!r}"
                        ) from None
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise InputError(f"{path}: rows disagree on column count")
    arr = np.asarray(rows, dtype=np.float64)
    return IntensityTable(
        intensities=arr, truth=np.asarray(truth, dtype=np.int32) if has_truth else None
    )
