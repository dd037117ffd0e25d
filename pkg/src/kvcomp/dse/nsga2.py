"""NSGA-II over discrete per-gene option sets. Both objectives are maximized."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import InvalidArgumentError


@dataclass
class Individual:
    genome: tuple
    fitness: tuple = ()
    rank: int = -1
    crowding: float = 0.0


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x >= y for x, y in zip(a, b)) and any(x > y for x, y in zip(a, b))


def fast_non_dominated_sort(objs: Sequence[Sequence[float]]) -> list:
    """Fronts as lists of indices, best first."""
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(objs[i], objs[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(objs[j], objs[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = [[i for i in range(n) if counts[i] == 0]]
    while fronts[-1]:
        nxt = []
        for i in fronts[-1]:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        fronts.append(sorted(nxt))
    return fronts[:-1]


def crowding_distance(objs: Sequence[Sequence[float]], front: Sequence[int]) -> dict:
    """Crowding distance of each index in ``front``; boundary points get infinity."""
    dist = {i: 0.0 for i in front}
    if len(front) <= 2:
        return {i: float("inf") for i in front}
    m = len(objs[front[0]])
    for k in range(m):
        order = sorted(front, key=lambda i: (objs[i][k], i))
        lo, hi = objs[order[0]][k], objs[order[-1]][k]
        dist[order[0]] = dist[order[-1]] = float("inf")
        if hi == lo:
            continue
        for a, i, b in zip(order, order[1:], order[2:]):
            dist[i] += (objs[b][k] - objs[a][k]) / (hi - lo)
    return dist


def assign_rank_and_crowding(pop: list) -> list:
    objs = [ind.fitness for ind in pop]
    fronts = fast_non_dominated_sort(objs)
    for r, front in enumerate(fronts):
        cd = crowding_distance(objs, front)
        for i in front:
            pop[i].rank = r
            pop[i].crowding = cd[i]
    return fronts


def _better(a: Individual, b: Individual) -> bool:
    return (a.rank, -a.crowding) < (b.rank, -b.crowding)


@dataclass
class NsgaRun:
    front: list
    population: list
    history: list = field(default_factory=list)  # best quality per generation
    evaluations: int = 0  # evaluator calls, cache misses only
    requested: int = 0  # fitness lookups, cache hits included
    archive: dict = field(default_factory=dict)  # genome -> fitness


def run_nsga2(
    pop_size: int,
    generations: int,
    option_sets: Sequence[Sequence[int]],
    evaluator: Callable,
    seed: int = 0,
    crossover_p: float = 0.9,
    mutation_p: float | None = None,
) -> NsgaRun:
    if pop_size < 4 or pop_size % 2:
        raise InvalidArgumentError("pop_size must be an even number >= 4")
    if generations < 1:
        raise InvalidArgumentError("generations must be >= 1")
    if not option_sets or any(len(o) == 0 for o in option_sets):
        raise InvalidArgumentError("every gene needs a non-empty option set")
    options = [tuple(o) for o in option_sets]
    n_genes = len(options)
    mutation_p = 1.0 / n_genes if mutation_p is None else mutation_p
    rng = np.random.default_rng(seed)
    run = NsgaRun([], [])

    def evaluate(genome):
        run.requested += 1
        if genome not in run.archive:
            run.archive[genome] = tuple(float(x) for x in evaluator(genome))
            run.evaluations += 1
        return run.archive[genome]

    def random_genome():
        return tuple(o[rng.integers(len(o))] for o in options)

    pop = [Individual(g, evaluate(g)) for g in (random_genome() for _ in range(pop_size))]
    assign_rank_and_crowding(pop)
    run.history.append(max(ind.fitness[0] for ind in pop))

    for _ in range(generations):
        def tournament():
            i, j = rng.integers(pop_size, size=2)
            return pop[i] if _better(pop[i], pop[j]) or i == j else pop[j]

        children = []
        while len(children) < pop_size:
            a, b = list(tournament().genome), list(tournament().genome)
            if rng.random() < crossover_p:
                swap = rng.random(n_genes) < 0.5
                for k in np.flatnonzero(swap):
                    a[k], b[k] = b[k], a[k]
            for child in (a, b):
                for k in range(n_genes):
                    if rng.random() < mutation_p:
                        child[k] = options[k][rng.integers(len(options[k]))]
                children.append(tuple(child))
        merged = pop + [Individual(g, evaluate(g)) for g in children[:pop_size]]
        fronts = assign_rank_and_crowding(merged)
        nxt = []
        for front in fronts:
            if len(nxt) + len(front) <= pop_size:
                nxt.extend(merged[i] for i in front)
                continue
            # stable: ties in crowding keep merged order
            rest = sorted(front, key=lambda i: -merged[i].crowding)
            nxt.extend(merged[i] for i in rest[: pop_size - len(nxt)])
            break
        pop = [Individual(ind.genome, ind.fitness) for ind in nxt]
        assign_rank_and_crowding(pop)
        run.history.append(max(ind.fitness[0] for ind in pop))

    run.population = pop
    seen = set()
    for ind in pop:
        if ind.rank == 0 and ind.genome not in seen:
            seen.add(ind.genome)
            run.front.append(ind)
    return run


def nsga2(pop_size, generations, option_sets, evaluator, seed=0, **kw) -> list:
    """Rank-0 individuals of the final population (distinct genomes)."""
    return run_nsga2(pop_size, generations, option_sets, evaluator, seed, **kw).front


def pareto_front(points: Sequence[Sequence[float]]) -> list:
    """Indices of non-dominated points."""
    return fast_non_dominated_sort(points)[0] if len(points) else []


def hypervolume_2d(points: Sequence[Sequence[float]], ref: Sequence[float]) -> float:
    """Area dominated by ``points`` and bounded below by ``ref`` (maximization)."""
    pts = sorted({(float(x), float(y)) for x, y in points if x > ref[0] and y > ref[1]}, reverse=True)
    area = 0.0
    best_y = ref[1]
    for x, y in pts:
        if y > best_y:
            area += (x - ref[0]) * (y - best_y)
            best_y = y
    return area


def random_search(budget: int, option_sets: Sequence[Sequence[int]], evaluator: Callable, seed: int = 0) -> list:
    """``budget`` uniformly drawn genomes, evaluated; returns Individuals (with repeats)."""
    if budget < 1:
        raise InvalidArgumentError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    cache = {}
    out = []
    for _ in range(budget):
        g = tuple(o[rng.integers(len(o))] for o in option_sets)
        if g not in cache:
            cache[g] = tuple(float(x) for x in evaluator(g))
        out.append(Individual(g, cache[g]))
    return out


def search_space_size(option_sets: Sequence[Sequence[int]]) -> int:
    size = 1
    for o in option_sets:
        size *= len(o)
    return size
