"""Evolutionary optimization of the code-to-molecule assignment.

Fitness is the exact mean per-molecule FDR of a chosen decoder, so a fitness
evaluation is one Voronoi tabulation plus one exact confusion pass; the
log-likelihood table over the full sequence space is built once per channel
and shared across the whole run. Selection is elitist (mu + lambda over
parents and one mutant per parent), mutation swaps each molecule's code with
probability ``mutation_prob`` against a partner drawn from the other codes
(optionally restricted to codes in use). The run also tracks the
Hamming-versus-abundance concordance order parameter.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .bits import popcount
from .channel import BacParams, LikelihoodTable, likelihood_table
from .codebook import AssignmentMap, Codebook, PriorDist, random_assignment
from .decoder import DecoderSpec, _with_omega, build_voronoi, confusion, metrics, parse_decoder_kind
from .errors import InputError


@dataclass(frozen=True)
class EvoConfig:
    population_size: int = 64
    mutation_prob: float = 0.05
    generations: int = 50
    seed: int = 0
    decoder: str = "map"
    swap_pool: str = "all_codes"
    n_threads: int = 1

    def __post_init__(self):
        if self.population_size < 2:
            raise InputError("population size must be at least 2")
        if not 0.0 < self.mutation_prob < 1.0:
            raise InputError("mutation probability must lie in (0, 1)")
        if self.generations < 1:
            raise InputError("need at least one generation")
        if self.swap_pool not in ("all_codes", "used_only"):
            raise InputError(f"unknown swap pool {self.swap_pool!r}")


@dataclass(frozen=True)
class EvoHistory:
    """Per-generation statistics (index 0 is the initial population) and the
    final best assignment. Elitist selection makes ``best_fdr`` non-increasing."""

    best_fdr: np.ndarray
    mean_fdr: np.ndarray
    mean_chi: np.ndarray
    best: AssignmentMap

    @property
    def n_generations(self) -> int:
        return int(self.best_fdr.size - 1)


def fitness(
    assignment: AssignmentMap,
    prior: PriorDist,
    bac: BacParams | None = None,
    decoder: str | DecoderSpec = "map",
    table: LikelihoodTable | None = None,
) -> float:
    """Exact mean FDR of the chosen decoder under this assignment."""
    spec = parse_decoder_kind(decoder) if isinstance(decoder, str) else decoder
    spec = _with_omega(spec, prior)
    voronoi = build_voronoi(spec, assignment, bac=bac, table=table)
    return metrics(confusion(voronoi, assignment, prior, bac=bac, table=table), prior).mean_fdr


def mutate(
    assignment: AssignmentMap,
    mutation_prob: float,
    rng: np.random.Generator,
    swap_pool: str = "all_codes",
) -> AssignmentMap:
    """Independently, with the given probability per molecule, swap its code
    with a uniformly chosen partner code (another molecule's, or an unused
    one when the pool allows). The result is always a valid assignment."""
    idx = assignment.code_indices.copy()
    n_mol = idx.size
    n_codes = assignment.codebook.size
    holder = np.full(n_codes, -1, dtype=np.int64)
    holder[idx] = np.arange(n_mol)
    flagged = np.nonzero(rng.random(n_mol) < mutation_prob)[0]
    for g in flagged:
        if swap_pool == "used_only":
            h = int(rng.integers(n_mol - 1))
            if h >= g:
                h += 1
            idx[g], idx[h] = idx[h], idx[g]
            holder[idx[g]], holder[idx[h]] = g, h
        else:
            own = int(idx[g])
            code = int(rng.integers(n_codes - 1))
            if code >= own:
                code += 1
            other = int(holder[code])
            if other >= 0:
                idx[g], idx[other] = code, own
                holder[code], holder[own] = g, other
            else:
                idx[g] = code
                holder[code] = g
                holder[own] = -1
    return AssignmentMap(assignment.codebook, idx, assignment.names)


def spearman(xs, ys, *, return_flag: bool = False):
    """Spearman rank correlation with average ranks on ties.

    A constant vector has no rank ordering; the correlation is reported as 0
    (set ``return_flag`` to also receive that degeneracy flag).
    """
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise InputError("need two equal-length 1-D vectors")
    if x.size < 2:
        raise InputError("need at least two observations")
    rx = rankdata(x)
    ry = rankdata(y)
    degenerate = bool((rx == rx[0]).all() or (ry == ry[0]).all())
    if degenerate:
        rho = 0.0
    else:
        dx = rx - rx.mean()
        dy = ry - ry.mean()
        rho = float(np.clip((dx * dy).sum() / np.sqrt((dx * dx).sum() * (dy * dy).sum()), -1.0, 1.0))
    return (rho, degenerate) if return_flag else rho


def order_parameter(
    assignment: AssignmentMap,
    prior: PriorDist,
    distance_matrix: np.ndarray | None = None,
) -> float:
    """Mean over molecules of the Spearman concordance between code Hamming
    distances and prior-abundance distances to every other molecule (self
    excluded). Degenerate rows (e.g. a uniform prior, where every abundance
    distance is 0) contribute 0."""
    n_mol = assignment.n_molecules
    if n_mol < 3:
        raise InputError("order parameter needs at least three molecules")
    if prior.n_molecules != n_mol:
        raise InputError("prior and assignment disagree on the number of molecules")
    if distance_matrix is None:
        words = assignment.codewords
        d_code = popcount(words[:, None] ^ words[None, :])
    else:
        d_code = distance_matrix[np.ix_(assignment.code_indices, assignment.code_indices)]
    d_prior = np.abs(prior.probs[:, None] - prior.probs[None, :])
    off = ~np.eye(n_mol, dtype=bool)
    rows_code = d_code[off].reshape(n_mol, n_mol - 1).astype(np.float64)
    rows_prior = d_prior[off].reshape(n_mol, n_mol - 1)
    r_code = rankdata(rows_code, axis=1)
    r_prior = rankdata(rows_prior, axis=1)
    dc = r_code - r_code.mean(axis=1, keepdims=True)
    dp = r_prior - r_prior.mean(axis=1, keepdims=True)
    ss = np.sqrt((dc * dc).sum(axis=1) * (dp * dp).sum(axis=1))
    good = ss > 0.0
    rhos = np.zeros(n_mol)
    rhos[good] = np.clip((dc * dp).sum(axis=1)[good] / ss[good], -1.0, 1.0)
    return float(rhos.mean())


def _evaluate_population(population, prior, spec, table, n_threads) -> np.ndarray:
    def one(assignment: AssignmentMap) -> float:
        return fitness(assignment, prior, decoder=spec, table=table)

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            values = list(pool.map(one, population))
    else:
        values = [one(a) for a in population]
    return np.asarray(values, dtype=np.float64)


def _member_rng(seed, generation: int, member: int) -> np.random.Generator:
    # Counter-based stream derivation: schedules cannot change the draws.
    return np.random.default_rng(
        np.random.SeedSequence(entropy=seed, spawn_key=(generation, member))
    )


def evolve(
    config: EvoConfig,
    prior: PriorDist,
    bac: BacParams,
    codebook: Codebook,
    names: tuple[str, ...] | None = None,
    on_generation=None,
) -> EvoHistory:
    """Elitist evolutionary search over code assignments minimizing mean FDR.

    Deterministic given the config seed: per-member RNG streams are derived
    by (generation, member) counters and fitness evaluations merge by index,
    so thread count does not affect the outcome. ``on_generation``, when
    given, is called as ``on_generation(generation, best_fdr, mean_fdr,
    mean_chi)`` after every recorded generation.
    """
    n_mol = prior.n_molecules
    if n_mol > codebook.size:
        raise InputError("more molecules than available codes")
    spec = _with_omega(parse_decoder_kind(config.decoder), prior)
    table = likelihood_table(codebook, bac)
    dist = popcount(codebook.words[:, None] ^ codebook.words[None, :])

    population = [
        random_assignment(codebook, n_mol, _member_rng(config.seed, 0, i), names)
        for i in range(config.population_size)
    ]
    fits = _evaluate_population(population, prior, spec, table, config.n_threads)
    order = np.lexsort((np.arange(fits.size), fits))
    population = [population[i] for i in order]
    fits = fits[order]

    best_hist = [float(fits[0])]
    mean_hist = [float(fits.mean())]
    chi_hist = [
        float(np.mean([order_parameter(a, prior, dist) for a in population]))
    ]
    if on_generation is not None:
        on_generation(0, best_hist[0], mean_hist[0], chi_hist[0])

    for gen in range(1, config.generations + 1):
        mutants = [
            mutate(
                population[i],
                config.mutation_prob,
                _member_rng(config.seed, gen, i),
                config.swap_pool,
            )
            for i in range(config.population_size)
        ]
        mutant_fits = _evaluate_population(mutants, prior, spec, table, config.n_threads)
        combined = population + mutants
        combined_fits = np.concatenate([fits, mutant_fits])
        # Elitist (mu + lambda): best population_size of parents + mutants,
        # exact fitness ties broken by lower combined index (parents first).
        order = np.lexsort((np.arange(combined_fits.size), combined_fits))
        keep = order[: config.population_size]
        population = [combined[i] for i in keep]
        fits = combined_fits[keep]
        best_hist.append(float(fits[0]))
        mean_hist.append(float(fits.mean()))
        chi_hist.append(
            float(np.mean([order_parameter(a, prior, dist) for a in population]))
        )
        if on_generation is not None:
            on_generation(gen, best_hist[-1], mean_hist[-1], chi_hist[-1])

    return EvoHistory(
        best_fdr=np.asarray(best_hist),
        mean_fdr=np.asarray(mean_hist),
        mean_chi=np.asarray(chi_hist),
        best=population[0],
    )


def save_history_csv(path, history: EvoHistory) -> None:
    """Write ``generation,best_fdr,mean_fdr,mean_chi`` rows."""
    with open(path, "w", newline="") as fh:
        fh.write("generation,best_fdr,mean_fdr,mean_chi\n")
        for gen in range(history.best_fdr.size):
            fh.write(
                f"{gen},{float(history.best_fdr[gen])!r},"
                f"{float(history.mean_fdr[gen])!r},{float(history.mean_chi[gen])!r}\n"
            )
