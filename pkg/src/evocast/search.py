"""Steady-state evolutionary search over forecast network genotypes.

A population of K candidates is evaluated, then offspring are produced one
at a time by tournament selection, optional crossover, and mutation.  An
offspring enters the population only by strictly improving on the current
worst member, so the best-so-far fitness never regresses.  Failed
candidates carry infinite fitness and lose every comparison.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import variation as V
from .genotype import random_genotype
from .tensor import ContractError
from .trainer import evaluate_candidate


@dataclass
class SearchConfig:
    population: int = 10  # K
    budget: int = 40  # offspring evaluations after the initial population
    tournament: int = 3
    crossover_prob: float = 0.25
    seed: int = 0
    workers: int = 1
    time_budget: float = None  # wall seconds for the whole search, None disables
    m_init_max: int = 5


@dataclass
class Individual:
    cid: int
    genotype: object
    fitness: float = math.inf
    result: object = None


class SearchLog:
    """Append-only record of every evaluation, with running best."""

    COLUMNS = ("event", "wall_seconds", "candidate_id", "fitness", "best_fitness")

    def __init__(self):
        self.rows = []
        self._start = time.monotonic()
        self.best = math.inf

    def record(self, event, cid, fitness):
        self.best = min(self.best, fitness)
        self.rows.append(
            {
                "event": event,
                "wall_seconds": time.monotonic() - self._start,
                "candidate_id": cid,
                "fitness": fitness,
                "best_fitness": self.best,
            }
        )

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            writer.writeheader()
            for row in self.rows:
                out = dict(row)
                out["wall_seconds"] = f"{row['wall_seconds']:.3f}"
                for key in ("fitness", "best_fitness"):
                    out[key] = "inf" if math.isinf(row[key]) else repr(row[key])
                writer.writerow(out)


@dataclass
class SearchResult:
    best: Individual
    population: list
    log: SearchLog
    evaluations: int
    stopped_early: bool = False


def init_population(config, h, f, seed_genotypes=(), rng=None):
    """K genotypes: injected seeds first, random samples for the rest."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    genotypes = list(seed_genotypes)[: config.population]
    while len(genotypes) < config.population:
        genotypes.append(
            random_genotype(None, h=h, f=f, m_init_max=config.m_init_max, rng=rng)
        )
    return genotypes


def replace_worst(population, challenger):
    """Steady-state insertion: strict improvement over the current worst."""
    worst = max(range(len(population)), key=lambda i: population[i].fitness)
    if challenger.fitness < population[worst].fitness:
        population[worst] = challenger
        return True
    return False


def _evaluate_many(genotypes, first_cid, splits, train_cfg, workers, event, log):
    train, valid, test = splits
    def job(g):
        return evaluate_candidate(g, train, valid, test, train_cfg)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, genotypes))
    else:
        results = [job(g) for g in genotypes]
    out = []
    for offset, (g, res) in enumerate(zip(genotypes, results)):
        ind = Individual(first_cid + offset, g, res.fitness, res)
        log.record(event, ind.cid, ind.fitness)
        out.append(ind)
    return out


def ssea_run(splits, search_cfg, train_cfg, seed_genotypes=()):
    """Full evolutionary run; deterministic when ``workers`` is 1."""
    train = splits[0]
    h, f = train.instants, train.n_features
    if search_cfg.population < 2:
        raise ContractError("population must hold at least 2 individuals")
    rng = np.random.default_rng(np.random.SeedSequence([search_cfg.seed, 2]))
    log = SearchLog()
    clock_start = time.monotonic()

    def expired():
        return (
            search_cfg.time_budget is not None
            and time.monotonic() - clock_start > search_cfg.time_budget
        )

    genotypes = init_population(search_cfg, h, f, seed_genotypes, rng)
    population = _evaluate_many(
        genotypes, 0, splits, train_cfg, search_cfg.workers, "init", log
    )
    evaluations = len(population)
    stopped = False

    for b in range(search_cfg.budget):
        if expired():
            stopped = True
            break
        fitnesses = [ind.fitness for ind in population]
        pa = population[V.tournament_select(fitnesses, rng, search_cfg.tournament)]
        child = pa.genotype
        if rng.random() < search_cfg.crossover_prob:
            pb = population[V.tournament_select(fitnesses, rng, search_cfg.tournament)]
            child = V.crossover(child, pb.genotype, rng)[0]
        child = V.mutate(child, rng)
        (offspring,) = _evaluate_many(
            [child], evaluations, splits, train_cfg, 1, "offspring", log
        )
        evaluations += 1
        replace_worst(population, offspring)

    best = min(population, key=lambda ind: ind.fitness)
    return SearchResult(best, population, log, evaluations, stopped)


def random_search_run(splits, search_cfg, train_cfg):
    """Same evaluation budget as the evolutionary run, independent samples."""
    train = splits[0]
    h, f = train.instants, train.n_features
    rng = np.random.default_rng(np.random.SeedSequence([search_cfg.seed, 3]))
    log = SearchLog()
    total = search_cfg.population + search_cfg.budget
    clock_start = time.monotonic()
    individuals = []
    stopped = False
    for cid in range(total):
        if (
            search_cfg.time_budget is not None
            and time.monotonic() - clock_start > search_cfg.time_budget
            and individuals
        ):
            stopped = True
            break
        g = random_genotype(None, h=h, f=f, m_init_max=search_cfg.m_init_max, rng=rng)
        individuals.extend(
            _evaluate_many([g], cid, splits, train_cfg, 1, "sample", log)
        )
    best = min(individuals, key=lambda ind: ind.fitness)
    return SearchResult(best, individuals, log, len(individuals), stopped)
