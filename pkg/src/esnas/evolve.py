"""Decoupled cyclic evolutionary search with aging tournament selection.

The search runs in two stages: a multi-start warmup (several small
independent populations, entropy-guided) followed by the main loop that
alternates topology and size phases, each driven by its own metric
(topology -> entropic score, size -> logsynflow).  Replacement is aging
(FIFO): the evicted member is always the oldest, never the worst.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import archspace, metrics
from .archspace import PHASE_SIZE, PHASE_TOPOLOGY

METRIC_FOR_PHASE = {PHASE_TOPOLOGY: "entropic", PHASE_SIZE: "logsynflow"}


@dataclass
class Individual:
    genome: archspace.ArchGenome
    report: metrics.ScoreReport
    birth_step: int

    def metric(self, name):
        return getattr(self.report, name)


@dataclass
class Population:
    capacity: int
    members: list[Individual] = field(default_factory=list)

    def admit(self, ind):
        """Append; evict the oldest member when over capacity."""
        self.members.append(ind)
        while len(self.members) > self.capacity:
            self.members.pop(0)

    def __len__(self):
        return len(self.members)

    def best(self, metric_name):
        return max(self.members,
                   key=lambda m: (m.metric(metric_name), m.birth_step))

    def top(self, metric_name, n):
        ranked = sorted(self.members,
                        key=lambda m: (m.metric(metric_name), m.birth_step),
                        reverse=True)
        return ranked[:n]


@dataclass
class Budget:
    kind: str  # "wallclock_seconds" | "evaluations"
    amount: float

    def validate(self):
        if self.kind not in ("wallclock_seconds", "evaluations"):
            raise ValueError(f"unknown budget kind {self.kind!r}")
        if self.amount <= 0:
            raise ValueError("budget amount must be > 0")
        return self

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], amount=d["amount"]).validate()

    def to_dict(self):
        return {"kind": self.kind, "amount": self.amount}


class BudgetMeter:
    """Consumable view of one Budget; evaluation budgets count proposal steps."""

    def __init__(self, budget):
        self.budget = budget.validate()
        self.spent = 0
        self.t0 = time.monotonic()

    def consume(self, n=1):
        self.spent += n

    def exhausted(self):
        if self.budget.kind == "evaluations":
            return self.spent >= self.budget.amount
        return time.monotonic() - self.t0 >= self.budget.amount


@dataclass
class SearchSchedule:
    multistart_populations: int = 5
    multistart_budget: Budget = field(
        default_factory=lambda: Budget("wallclock_seconds", 180))
    phase_budget: Budget = field(
        default_factory=lambda: Budget("wallclock_seconds", 300))
    total_budget: Budget = field(
        default_factory=lambda: Budget("wallclock_seconds", 2700))
    multistart_population_size: int = 25
    multistart_tournament_size: int = 5
    population_size: int = 50
    tournament_size: int = 10
    mutations_per_step: int = 2
    crossover_prob: float = 0.5
    crossover_in_multistart: bool = True
    seeds_per_phase: int = 5
    infeasible_retries: int = 10
    scoring_seed: int = 0

    def validate(self):
        for b in (self.multistart_budget, self.phase_budget, self.total_budget):
            b.validate()
        if self.multistart_tournament_size > self.multistart_population_size:
            raise ValueError("multistart tournament size exceeds population size")
        if self.tournament_size > self.population_size:
            raise ValueError("tournament size exceeds population size")
        if self.multistart_populations < 1:
            raise ValueError("multistart_populations must be >= 1")
        if not 0.0 <= self.crossover_prob <= 1.0:
            raise ValueError("crossover_prob must be in [0, 1]")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        for key in ("multistart_budget", "phase_budget", "total_budget"):
            if key in kwargs and isinstance(kwargs[key], dict):
                kwargs[key] = Budget.from_dict(kwargs[key])
        return cls(**kwargs).validate()

    def to_dict(self):
        d = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            d[name] = v.to_dict() if isinstance(v, Budget) else v
        return d


def tournament_select(pop, k, metric_name, seed):
    """Sample k distinct members uniformly; return the best by the metric.

    Ties are broken in favour of the younger individual.
    """
    if not pop.members:
        raise ValueError("tournament on an empty population")
    if k > len(pop.members):
        raise ValueError(f"tournament size {k} exceeds population {len(pop.members)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pop.members), size=k, replace=False)
    contenders = [pop.members[i] for i in idx]
    return max(contenders, key=lambda m: (m.metric(metric_name), m.birth_step))


class SearchEngine:
    """Holds the scorer cache, step counter, budget meters and history log."""

    def __init__(self, config, schedule, seed, entropic_cfg=None):
        self.config = config
        self.schedule = schedule.validate()
        self.entropic_cfg = (entropic_cfg or metrics.EntropicConfig()).validate()
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.step = 0
        self.history = []
        self._score_cache = {}
        self._param_cache = {}
        self.total_meter = None
        self.evaluated = []  # every feasible scored individual, in order

    # -- scoring ---------------------------------------------------------

    def score(self, genome):
        key = genome.to_json()
        if key not in self._score_cache:
            self._score_cache[key] = metrics.score_genome(
                genome, self.config, self.entropic_cfg,
                base_seed=self.schedule.scoring_seed)
        return self._score_cache[key]

    def params_of(self, genome):
        key = genome.to_json()
        if key not in self._param_cache:
            self._param_cache[key] = archspace.count_params(genome, self.config)
        return self._param_cache[key]

    def feasible(self, genome):
        return self.params_of(genome) <= self.config.max_params

    def make_individual(self, genome):
        ind = Individual(genome=genome, report=self.score(genome),
                         birth_step=self.step)
        self.evaluated.append(ind)
        return ind

    def _seed(self):
        return int(self.rng.integers(2**63))

    def log(self, event, **fields):
        self.history.append({"event": event, "step": self.step, **fields})

    # -- population construction ----------------------------------------

    def random_feasible_genome(self, tries=200):
        for _ in range(tries):
            g = archspace.random_genome(self.config, self._seed())
            if self.feasible(g):
                return g
        raise RuntimeError(
            f"could not draw a genome under max_params={self.config.max_params} "
            f"in {tries} tries")

    def init_population(self, size, meters):
        pop = Population(capacity=size)
        while len(pop) < size and not any(m.exhausted() for m in meters):
            for m in meters:
                m.consume()
            self.step += 1
            pop.admit(self.make_individual(self.random_feasible_genome()))
        return pop

    # -- evolution -------------------------------------------------------

    def evolution_step(self, pop, phase, tournament_size, meters,
                       crossover_allowed=True):
        """Produce, score and admit one child; infeasible children are
        resampled up to infeasible_retries times, then the step is skipped."""
        sched = self.schedule
        metric_name = METRIC_FOR_PHASE[phase]
        tournament_size = min(tournament_size, len(pop))
        for m in meters:
            m.consume()
        self.step += 1
        child = None
        for _ in range(sched.infeasible_retries + 1):
            use_crossover = (crossover_allowed
                             and self.rng.random() < sched.crossover_prob
                             and len(pop) >= 2)
            if use_crossover:
                pa = tournament_select(pop, tournament_size, metric_name, self._seed())
                pb = tournament_select(pop, tournament_size, metric_name, self._seed())
                cand = archspace.crossover(pa.genome, pb.genome, self.config,
                                           self._seed())
            else:
                parent = tournament_select(pop, tournament_size, metric_name,
                                           self._seed())
                cand = archspace.mutate(parent.genome, self.config, phase,
                                        sched.mutations_per_step, self._seed())
            if self.feasible(cand):
                child = cand
                break
        if child is None:
            self.log("step_skipped", phase=phase, reason="infeasible")
            return
        ind = self.make_individual(child)
        pop.admit(ind)
        self.log("step", phase=phase, operator="crossover" if use_crossover
                 else "mutation", params=ind.report.params,
                 macs=ind.report.macs, entropic=ind.report.entropic,
                 logsynflow=ind.report.logsynflow)

    def run_phase(self, pop, phase, tournament_size, phase_meter,
                  crossover_allowed=True):
        meters = [phase_meter, self.total_meter]
        while not any(m.exhausted() for m in meters):
            self.evolution_step(pop, phase, tournament_size, meters,
                                crossover_allowed=crossover_allowed)

    # -- top-level stages ------------------------------------------------

    def multi_start(self):
        """Evolve independent warmup populations under the entropy metric only;
        return the best individual of each."""
        sched = self.schedule
        seeds = []
        for p in range(sched.multistart_populations):
            meter = BudgetMeter(sched.multistart_budget)
            pop = self.init_population(sched.multistart_population_size,
                                       [meter, self.total_meter])
            if not pop.members:
                raise RuntimeError("multi-start budget too small to seed a population")
            self.run_phase(pop, PHASE_TOPOLOGY, sched.multistart_tournament_size,
                           meter, crossover_allowed=sched.crossover_in_multistart)
            best = pop.best("entropic")
            seeds.append(best)
            self.log("multistart_done", population=p,
                     entropic=best.report.entropic,
                     params=best.report.params)
        return seeds

    def refill_population(self, seeds, phase, meters):
        """Build a phase population from seed individuals plus their mutants."""
        pop = Population(capacity=self.schedule.population_size)
        for ind in seeds:
            pop.admit(ind)
        while len(pop) < self.schedule.population_size \
                and not any(m.exhausted() for m in meters):
            for m in meters:
                m.consume()
            self.step += 1
            parent = seeds[int(self.rng.integers(len(seeds)))]
            cand = archspace.mutate(parent.genome, self.config, phase,
                                    self.schedule.mutations_per_step, self._seed())
            if not self.feasible(cand):
                cand = parent.genome
            pop.admit(self.make_individual(cand))
        return pop

    def cyclic_search(self):
        """Multi-start seeding, then alternating topology/size phases."""
        sched = self.schedule
        self.total_meter = BudgetMeter(sched.total_budget)
        seeds = self.multi_start()
        phase = PHASE_TOPOLOGY
        last_phase = phase
        while not self.total_meter.exhausted():
            phase_meter = BudgetMeter(sched.phase_budget)
            meters = [phase_meter, self.total_meter]
            pop = self.refill_population(seeds, phase, meters)
            self.run_phase(pop, phase, sched.tournament_size, phase_meter)
            metric_name = METRIC_FOR_PHASE[phase]
            top = pop.top(metric_name, sched.seeds_per_phase)
            self.log("phase_done", phase=phase,
                     best={"entropic": top[0].report.entropic,
                           "logsynflow": top[0].report.logsynflow,
                           "params": top[0].report.params})
            seeds = top
            last_phase = phase
            phase = PHASE_SIZE if phase == PHASE_TOPOLOGY else PHASE_TOPOLOGY
        final_metric = METRIC_FOR_PHASE[last_phase]
        best = max(self.evaluated,
                   key=lambda m: (m.metric(final_metric), m.birth_step))
        self.log("search_done", final_metric=final_metric,
                 best_params=best.report.params,
                 best_entropic=best.report.entropic,
                 best_logsynflow=best.report.logsynflow)
        return best, self.history


def multi_start(config, schedule, seed, entropic_cfg=None):
    """Standalone multi-start; returns the per-population best individuals."""
    engine = SearchEngine(config, schedule, seed, entropic_cfg)
    engine.total_meter = BudgetMeter(schedule.total_budget)
    return engine.multi_start()


def cyclic_search(config, schedule, seed, entropic_cfg=None):
    """Run the full decoupled search; returns (best individual, history log)."""
    engine = SearchEngine(config, schedule, seed, entropic_cfg)
    return engine.cyclic_search()
