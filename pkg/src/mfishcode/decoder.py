"""Exact decoders over the full sequence space of per-round binary channels.

Every length-L binary sequence is scored against every assigned codeword
(prior-weighted log likelihood) and tabulated once into a total decode map:
the posterior Voronoi table. Exact ties fall in no cell and reject; the
MAP_q variant additionally rejects sequences whose winning posterior falls
below a threshold, and the Moffitt rule rejects sequences without a unique
nearest codeword. Confusion matrices, per-molecule TPR/FDR and rejection
rates then follow by exact summation over the 2^L sequences instead of
Monte Carlo.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.special import logsumexp

from .bits import all_sequences, popcount
from .channel import (
    BacParams,
    GaussianChannelParams,
    LikelihoodTable,
    likelihood_table,
    log_likelihood,
)
from .codebook import AssignmentMap, Codebook, PriorDist, random_assignment, sample_dirichlet_prior
from .errors import InputError

REJECT = -1

_LOG_2PI = float(np.log(2.0 * np.pi))

VALID_KINDS = ("mle", "map", "mapq", "moffitt")


@dataclass(frozen=True)
class DecoderSpec:
    """Which decode rule to tabulate, and under which decoder prior.

    ``omega`` is the prior the decoder assumes, not necessarily the prior
    governing the data: MLE always decodes under a uniform omega, MAP/MAP_q
    under the supplied one. The Moffitt rule ignores priors entirely; its
    ``distance`` form decodes to the unique nearest codeword, while the
    ``restricted_mle`` form runs MLE inside the same acceptance region.
    """

    kind: str
    q: float | None = None
    omega: np.ndarray | None = None
    moffitt_rule: str = "distance"

    def __post_init__(self):
        if self.kind not in VALID_KINDS:
            raise InputError(f"unknown decoder kind {self.kind!r}")
        if self.kind == "mapq":
            if self.q is None or not 0.0 < self.q < 1.0:
                raise InputError("mapq needs a rejection threshold q in (0, 1)")
        elif self.q is not None:
            raise InputError(f"decoder kind {self.kind!r} takes no threshold q")
        if self.moffitt_rule not in ("distance", "restricted_mle"):
            raise InputError(f"unknown moffitt rule {self.moffitt_rule!r}")
        if self.omega is not None:
            w = np.ascontiguousarray(np.asarray(self.omega, dtype=np.float64))
            if w.ndim != 1 or np.any(w <= 0.0) or abs(w.sum() - 1.0) > 1e-9:
                raise InputError("omega must be a strictly positive distribution")
            w.setflags(write=False)
            object.__setattr__(self, "omega", w)

    @classmethod
    def mle(cls) -> "DecoderSpec":
        return cls(kind="mle")

    @classmethod
    def map_prior(cls, prior) -> "DecoderSpec":
        return cls(kind="map", omega=_omega_of(prior))

    @classmethod
    def mapq(cls, q: float, prior) -> "DecoderSpec":
        return cls(kind="mapq", q=q, omega=_omega_of(prior))

    @classmethod
    def moffitt(cls, rule: str = "distance") -> "DecoderSpec":
        return cls(kind="moffitt", moffitt_rule=rule)

    def label(self) -> str:
        if self.kind == "mapq":
            return f"mapq:{self.q!r}"
        return self.kind


def _omega_of(prior) -> np.ndarray:
    return prior.probs if isinstance(prior, PriorDist) else np.asarray(prior, dtype=np.float64)


def resolve_omega(spec: DecoderSpec, n_molecules: int) -> np.ndarray | None:
    """Decoder prior actually used: MLE forces uniform, Moffitt uses none."""
    if spec.kind == "mle":
        return np.full(n_molecules, 1.0 / n_molecules)
    if spec.kind == "moffitt":
        return None
    if spec.omega is None:
        raise InputError(f"{spec.kind} decoding needs a decoder prior (omega)")
    if spec.omega.size != n_molecules:
        raise InputError("omega length disagrees with the assignment")
    return spec.omega


@dataclass(frozen=True)
class VoronoiTable:
    """Total decode map: every sequence to a molecule id or REJECT (-1)."""

    decode: np.ndarray
    length: int
    n_molecules: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.decode, dtype=np.int32))
        if arr.shape != (1 << self.length,):
            raise InputError("decode map must cover every sequence exactly once")
        arr.setflags(write=False)
        object.__setattr__(self, "decode", arr)

    @property
    def accepted_count(self) -> int:
        return int((self.decode != REJECT).sum())

    def voronoi_set(self, g: int) -> np.ndarray:
        return np.nonzero(self.decode == g)[0].astype(np.uint32)


@dataclass(frozen=True)
class ConfusionResult:
    """Exact decode matrices: ``conditional[g, g'] = Pr(decode g | truth g')``,
    ``joint = prior[g'] * conditional``, and per-truth rejection mass."""

    conditional: np.ndarray
    joint: np.ndarray
    rejection: np.ndarray

    @property
    def n_molecules(self) -> int:
        return int(self.conditional.shape[0])


@dataclass(frozen=True)
class Metrics:
    """Per-molecule TPR/FDR and scalar summaries of a confusion result.

    Molecules that no sequence decodes to have an undefined FDR; they are
    reported as 0 with the ``never_decoded`` flag set so aggregates stay
    finite while the pathology stays visible.
    """

    tpr: np.ndarray
    fdr: np.ndarray
    never_decoded: np.ndarray
    mean_fdr: float
    uniform_mismatch: float
    prior_mismatch: float
    rejection_rate: float


def _scores_block(table, cols, log_omega, lo, hi) -> np.ndarray:
    scores = table.loglik[lo:hi, :].take(cols, axis=1)
    scores += log_omega
    return scores


def _decide_block(scores: np.ndarray, q, tie_break: str, words) -> np.ndarray:
    arg = scores.argmax(axis=1)
    best = np.take_along_axis(scores, arg[:, None], axis=1)[:, 0]
    tie_mask = scores == best[:, None]
    if tie_break == "lexicographic":
        # Among tied maximizers pick the smallest codeword.
        masked = np.where(tie_mask, words[None, :].astype(np.int64), np.int64(1) << 62)
        decode = masked.argmin(axis=1).astype(np.int32)
    else:
        decode = arg.astype(np.int32)
        decode[tie_mask.sum(axis=1) > 1] = REJECT
    if q is not None:
        win_posterior = np.exp(best - logsumexp(scores, axis=1))
        decode[win_posterior < q] = REJECT
    return decode


def _moffitt_decode(assignment: AssignmentMap, spec, table, bac, n_threads) -> np.ndarray:
    words = assignment.codewords
    seqs = all_sequences(assignment.codebook.length)
    dist = popcount(seqs[:, None] ^ words[None, :]).astype(np.uint8)
    dmin = dist.min(axis=1)
    unique = (dist == dmin[:, None]).sum(axis=1) == 1
    if spec.moffitt_rule == "distance":
        decode = dist.argmin(axis=1).astype(np.int32)
    else:
        if table is None:
            if bac is None:
                raise InputError("restricted_mle needs channel parameters")
            table = likelihood_table(assignment.codebook, bac)
        decode = build_voronoi(
            DecoderSpec.mle(), assignment, bac=bac, table=table, n_threads=n_threads
        ).decode.copy()
    decode[~unique] = REJECT
    return decode


def build_voronoi(
    spec: DecoderSpec,
    assignment: AssignmentMap,
    bac: BacParams | None = None,
    table: LikelihoodTable | None = None,
    *,
    tie_break: str = "reject",
    n_threads: int = 1,
) -> VoronoiTable:
    """Tabulate the decode decision for every sequence.

    Scores are ``log omega + log likelihood``; the unique maximizer wins and
    exact score ties reject (strict-inequality rule). ``tie_break=
    "lexicographic"`` is a test mode that awards ties to the smallest tied
    codeword so risk-ordering statements hold without rejection. Construction
    splits the sequence space into disjoint blocks; blocks are independent,
    so thread count cannot change the result.
    """
    if tie_break not in ("reject", "lexicographic"):
        raise InputError(f"unknown tie_break {tie_break!r}")
    n_mol = assignment.n_molecules
    length = assignment.codebook.length
    if spec.kind == "moffitt":
        decode = _moffitt_decode(assignment, spec, table, bac, n_threads)
    else:
        if table is None:
            if bac is None:
                raise InputError("need a BacParams or a precomputed likelihood table")
            table = likelihood_table(assignment.codebook, bac)
        if table.length != length:
            raise InputError("likelihood table and assignment disagree on length")
        cols = table.column_index(assignment.codewords)
        log_omega = np.log(resolve_omega(spec, n_mol))
        words = assignment.codewords
        n_seq = 1 << length
        decode = np.empty(n_seq, dtype=np.int32)
        block = 1 << 14

        def run(lo: int) -> None:
            hi = min(n_seq, lo + block)
            scores = _scores_block(table, cols, log_omega, lo, hi)
            decode[lo:hi] = _decide_block(scores, spec.q, tie_break, words)

        starts = range(0, n_seq, block)
        if n_threads > 1:
            with ThreadPoolExecutor(max_workers=n_threads) as pool:
                list(pool.map(run, starts))
        else:
            for lo in starts:
                run(lo)
    provenance = {
        "decoder": spec.label(),
        "tie_break": tie_break,
        "moffitt_rule": spec.moffitt_rule if spec.kind == "moffitt" else None,
        "bac_digest": (
            table.bac_digest if table is not None else bac.digest() if bac else None
        ),
    }
    return VoronoiTable(
        decode=decode, length=length, n_molecules=n_mol, provenance=provenance
    )


def decode_table(voronoi: VoronoiTable, sequences) -> np.ndarray:
    """O(1) table lookup per observed sequence, order preserving."""
    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.size and (seqs.min() < 0 or seqs.max() >= 1 << voronoi.length):
        raise InputError(f"sequence outside the length-{voronoi.length} space")
    return voronoi.decode[seqs]


def posterior(
    x: int, spec: DecoderSpec, assignment: AssignmentMap, bac: BacParams
) -> np.ndarray:
    """Normalized posterior over the assigned molecules for one sequence."""
    omega = resolve_omega(spec, assignment.n_molecules)
    if omega is None:
        raise InputError("the Moffitt rule has no posterior")
    scores = np.array(
        [
            np.log(omega[g]) + log_likelihood(x, int(c), bac)
            for g, c in enumerate(assignment.codewords)
        ]
    )
    return np.exp(scores - logsumexp(scores))


def confusion(
    voronoi: VoronoiTable,
    assignment: AssignmentMap,
    prior: PriorDist,
    bac: BacParams | None = None,
    table: LikelihoodTable | None = None,
) -> ConfusionResult:
    """Exact conditional and joint decode matrices by full-space summation."""
    n_mol = assignment.n_molecules
    if prior.n_molecules != n_mol:
        raise InputError("prior and assignment disagree on the number of molecules")
    if voronoi.n_molecules != n_mol or voronoi.length != assignment.codebook.length:
        raise InputError("voronoi table does not match the assignment")
    if table is None:
        if bac is None:
            raise InputError("need a BacParams or a precomputed likelihood table")
        table = likelihood_table(assignment.codebook, bac)
    cols = table.column_index(assignment.codewords)
    probs = table.probs
    idx = np.where(voronoi.decode == REJECT, n_mol, voronoi.decode).astype(np.intp)
    stacked = np.empty((n_mol + 1, n_mol), dtype=np.float64)
    for gp in range(n_mol):
        stacked[:, gp] = np.bincount(
            idx, weights=probs[:, cols[gp]], minlength=n_mol + 1
        )
    conditional = stacked[:n_mol]
    rejection = stacked[n_mol]
    joint = conditional * prior.probs[None, :]
    return ConfusionResult(conditional=conditional, joint=joint, rejection=rejection)


def metrics(conf: ConfusionResult, prior: PriorDist) -> Metrics:
    """Per-molecule TPR/FDR plus scalar mismatch and rejection summaries."""
    n_mol = conf.n_molecules
    if prior.n_molecules != n_mol:
        raise InputError("prior and confusion disagree on the number of molecules")
    tpr = np.diag(conf.conditional).copy()
    decoded_mass = conf.joint.sum(axis=1)
    correct_mass = np.diag(conf.joint)
    never = decoded_mass == 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        fdr = np.where(never, 0.0, (decoded_mass - correct_mass) / decoded_mass)
    fdr = np.clip(fdr, 0.0, 1.0)
    return Metrics(
        tpr=tpr,
        fdr=fdr,
        never_decoded=never,
        mean_fdr=float(fdr.mean()),
        uniform_mismatch=float(np.mean(1.0 - tpr)),
        prior_mismatch=float((prior.probs * (1.0 - tpr)).sum()),
        rejection_rate=float((prior.probs * conf.rejection).sum()),
    )


def decode_soft(
    intensities,
    assignment: AssignmentMap,
    prior: PriorDist,
    params: GaussianChannelParams,
    q: float = 0.0,
):
    """Intensity-space MAP decode with posterior-threshold rejection.

    Scores each row directly against the per-round Gaussians (no
    quantization). A single row returns an int; a 2-D batch returns an
    int32 array. ``q = 0`` never rejects.
    """
    rows = np.asarray(intensities, dtype=np.float64)
    single = rows.ndim == 1
    rows = np.atleast_2d(rows)
    if np.any(rows <= 0.0):
        raise InputError("intensities must be strictly positive")
    length = assignment.codebook.length
    if rows.shape[1] != length:
        raise InputError(f"rows must have {length} intensity columns")
    cbits = (
        (assignment.codewords[:, None] >> np.arange(length, dtype=np.uint32)) & 1
    ).astype(bool)
    mu = np.where(cbits, params.mu1, params.mu0)
    sigma = np.where(cbits, params.sigma1, params.sigma0)
    log_prior = np.log(prior.probs)
    log_sigma_sum = np.log(sigma).sum(axis=1)
    out = np.empty(rows.shape[0], dtype=np.int32)
    block = 2048
    for lo in range(0, rows.shape[0], block):
        y = np.log(rows[lo : lo + block])
        z = (y[:, None, :] - mu[None, :, :]) / sigma[None, :, :]
        scores = (
            log_prior[None, :]
            - log_sigma_sum[None, :]
            - 0.5 * ((z * z).sum(axis=2) + length * _LOG_2PI)
        )
        best = scores.max(axis=1)
        decode = scores.argmax(axis=1).astype(np.int32)
        if q > 0.0:
            win = np.exp(best - logsumexp(scores, axis=1))
            decode[win < q] = REJECT
        out[lo : lo + block] = decode
    return int(out[0]) if single else out


@dataclass(frozen=True)
class SweepRecord:
    """Exact metrics for one (alpha, draw, decoder) cell of a prior sweep."""

    alpha: float
    draw: int
    decoder: str
    fdr: np.ndarray
    tpr: np.ndarray
    mean_fdr: float
    uniform_mismatch: float
    prior_mismatch: float
    rejection_rate: float


@dataclass(frozen=True)
class SweepReport:
    records: tuple[SweepRecord, ...]

    def cell(self, alpha: float, decoder: str) -> list[SweepRecord]:
        return [
            r for r in self.records if r.alpha == alpha and r.decoder == decoder
        ]

    def summary_rows(self) -> list[dict]:
        """One row per (alpha, decoder): FDR percentiles pooled over molecules
        and draws, plus percentile summaries of the scalar rates."""
        rows = []
        seen = []
        for record in self.records:
            key = (record.alpha, record.decoder)
            if key not in seen:
                seen.append(key)
        for alpha, decoder in seen:
            cell = self.cell(alpha, decoder)
            pooled = np.concatenate([r.fdr for r in cell])
            uniform = np.asarray([r.uniform_mismatch for r in cell])
            weighted = np.asarray([r.prior_mismatch for r in cell])
            rejection = np.asarray([r.rejection_rate for r in cell])
            mean_fdrs = np.asarray([r.mean_fdr for r in cell])
            rows.append(
                {
                    "alpha": alpha,
                    "decoder": decoder,
                    "draws": len(cell),
                    "fdr_median": float(np.percentile(pooled, 50.0)),
                    "fdr_p05": float(np.percentile(pooled, 5.0)),
                    "fdr_p95": float(np.percentile(pooled, 95.0)),
                    "mean_fdr_median": float(np.percentile(mean_fdrs, 50.0)),
                    "uniform_mismatch_median": float(np.percentile(uniform, 50.0)),
                    "uniform_mismatch_p05": float(np.percentile(uniform, 5.0)),
                    "uniform_mismatch_p95": float(np.percentile(uniform, 95.0)),
                    "prior_mismatch_median": float(np.percentile(weighted, 50.0)),
                    "rejection_median": float(np.percentile(rejection, 50.0)),
                }
            )
        return rows

    def save_summary_csv(self, path) -> None:
        rows = self.summary_rows()
        header = list(rows[0].keys())
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(
                    ",".join(
                        repr(v) if isinstance(v, float) else str(v)
                        for v in (row[k] for k in header)
                    )
                    + "\n"
                )


def parse_decoder_kind(text: str) -> DecoderSpec:
    """Parse CLI-style decoder labels: ``map``, ``mle``, ``mapq:0.5``, ``moffitt``."""
    name, _, arg = text.partition(":")
    name = name.strip().lower()
    if name == "mapq":
        if not arg:
            raise InputError("mapq needs a threshold, e.g. mapq:0.5")
        return DecoderSpec(kind="mapq", q=float(arg), omega=None)
    if name == "moffitt":
        return DecoderSpec.moffitt(arg or "distance")
    if name in ("map", "mle"):
        return DecoderSpec(kind=name)
    raise InputError(f"unknown decoder kind {text!r}")


def _with_omega(spec: DecoderSpec, prior: PriorDist) -> DecoderSpec:
    if spec.kind in ("map", "mapq") and spec.omega is None:
        return DecoderSpec(
            kind=spec.kind, q=spec.q, omega=prior.probs, moffitt_rule=spec.moffitt_rule
        )
    return spec


def dirichlet_sweep(
    alpha_grid,
    n_draws: int,
    decoders,
    codebook: Codebook,
    n_molecules: int,
    bac: BacParams,
    seed,
    assignment_policy: str = "per_draw",
    base_assignment: AssignmentMap | None = None,
    n_threads: int = 1,
) -> SweepReport:
    """Exact decoder metrics across symmetric-Dirichlet prior draws.

    Per (alpha, draw): sample a prior, pick an assignment (fresh random one
    per draw, or a fixed one), then evaluate every requested decoder on that
    same prior/assignment pair so comparisons are paired. Deterministic given
    the seed; the likelihood table is built once and shared.
    """
    alphas = [float(a) for a in alpha_grid]
    if not alphas or any(a <= 0 for a in alphas):
        raise InputError("alpha grid must be non-empty and positive")
    if n_draws < 1:
        raise InputError("need at least one draw")
    if assignment_policy not in ("per_draw", "fixed"):
        raise InputError(f"unknown assignment policy {assignment_policy!r}")
    if assignment_policy == "fixed" and base_assignment is None:
        raise InputError("fixed assignment policy needs a base assignment")
    specs = [parse_decoder_kind(d) if isinstance(d, str) else d for d in decoders]
    if not specs:
        raise InputError("need at least one decoder")
    table = likelihood_table(codebook, bac)
    children = np.random.SeedSequence(seed).spawn(2 * len(alphas) * n_draws)
    records = []
    cell = 0
    for alpha in alphas:
        for draw in range(n_draws):
            prior = sample_dirichlet_prior(n_molecules, alpha, children[cell])
            if assignment_policy == "per_draw":
                assignment = random_assignment(codebook, n_molecules, children[cell + 1])
            else:
                assignment = base_assignment
            cell += 2
            for spec in specs:
                resolved = _with_omega(spec, prior)
                voronoi = build_voronoi(
                    resolved, assignment, bac=bac, table=table, n_threads=n_threads
                )
                met = metrics(confusion(voronoi, assignment, prior, table=table), prior)
                records.append(
                    SweepRecord(
                        alpha=alpha,
                        draw=draw,
                        decoder=spec.label(),
                        fdr=met.fdr,
                        tpr=met.tpr,
                        mean_fdr=met.mean_fdr,
                        uniform_mismatch=met.uniform_mismatch,
                        prior_mismatch=met.prior_mismatch,
                        rejection_rate=met.rejection_rate,
                    )
                )
    return SweepReport(records=tuple(records))


def save_metrics_json(path, conf: ConfusionResult, met: Metrics, molecule_names) -> None:
    """Confusion matrices and per-molecule metrics, row-major, prior order."""
    import json

    payload = {
        "molecules": list(molecule_names),
        "D": conf.conditional.tolist(),
        "J": conf.joint.tolist(),
        "r": conf.rejection.tolist(),
        "tpr": met.tpr.tolist(),
        "fdr": met.fdr.tolist(),
        "never_decoded": [bool(v) for v in met.never_decoded],
        "mean_fdr": met.mean_fdr,
        "uniform_mismatch": met.uniform_mismatch,
        "prior_mismatch": met.prior_mismatch,
        "rejection_rate": met.rejection_rate,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
