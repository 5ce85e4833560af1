"""Small-scale synthetic studies: ablations and overlap-ratio comparisons.

Everything runs in-process on the planted-interest corpus, sized so a full
five-seed study fits on one CPU core.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import DOMAINS, catalog_sizes, prepare_examples, simulate_cold_start, split_users
from .evalharness import EvalReport, build_candidates, evaluate, model_scorer
from .psg import PSGConfig, attach_pseudo_sequences, build_unified_graph, train_psg
from .synthetic import SyntheticSpec, generate_corpus
from .trainer import RunConfig, prepare_inputs, set_seed, train

logger = logging.getLogger(__name__)

STUDY_SPEC = SyntheticSpec(n_users=2000, overlap=0.3)
STUDY_RUN = RunConfig(d=32, batch=128, lr=8e-4, epochs=20, T=20, T_pseudo=20, heads=4)
STUDY_PSG = PSGConfig(d=32, layers=3, epochs=30, lr=5e-3, batch_size=1024)
K_CS = 0.2

# variant name -> RunConfig overrides
VARIANT_FLAGS = {
    "full": {},
    "no_psg": {"no_psg": True},
    "no_if_ds": {"no_if_ds": True},
    "no_dn": {"no_dn": True},
    # cold-start users fall back to the prior mean; training is otherwise unchanged
    "no_r": {"aux_for_cold_start": False},
}


@dataclass
class StudyData:
    examples: tuple
    n_items: dict
    seed: int
    k_o: float


@dataclass
class Study:
    """Lazily computed, memoised corpora and runs keyed by (seed, k_o, variant)."""

    spec: SyntheticSpec = STUDY_SPEC
    run: RunConfig = STUDY_RUN
    psg: PSGConfig = STUDY_PSG
    k_cs: float = K_CS
    n_neg: int = 999
    _data: dict = field(default_factory=dict)
    _reports: dict = field(default_factory=dict)
    seconds: dict = field(default_factory=dict)

    def data(self, seed: int, k_o: float = 1.0) -> StudyData:
        key = (seed, k_o)
        if key not in self._data:
            log_x, log_y, _ = generate_corpus(replace(self.spec, seed=seed))
            split = simulate_cold_start(split_users(log_x, log_y, k_o=k_o, seed=seed), self.k_cs, seed)
            examples = prepare_examples(split, self.run.T)
            n_items = catalog_sizes(split)
            graph = build_unified_graph(examples, n_items)
            emb = train_psg(graph, replace(self.psg, seed=seed, top_k=self.run.T_pseudo),
                            [e.user_id for e in examples if e.role == "train"])
            examples = attach_pseudo_sequences(examples, emb, graph, self.run.T_pseudo)
            self._data[key] = StudyData(examples, n_items, seed, k_o)
        return self._data[key]

    def report(self, variant: str, seed: int, k_o: float = 1.0) -> EvalReport:
        key = (variant, seed, k_o)
        if key not in self._reports:
            start = time.perf_counter()
            data = self.data(seed, k_o)
            cfg = replace(self.run, seed=seed, **VARIANT_FLAGS[variant])
            res = train(cfg, data.examples, data.n_items)
            test = [e for e in prepare_inputs(cfg, data.examples, data.n_items, set_seed(seed)) if e.role == "test"]
            # candidates depend only on the seed, so every variant ranks the same lists
            cands = {d: build_candidates(test, d, data.n_items[d], self.n_neg, seed) for d in DOMAINS}
            self._reports[key] = evaluate(model_scorer(res.model), test, data.n_items, self.n_neg, seed,
                                          candidates=cands, metadata={"variant": variant, "k_o": k_o})
            self.seconds[key] = time.perf_counter() - start
            logger.info("%s seed=%d k_o=%.2f: %.0fs", variant, seed, k_o, self.seconds[key])
        return self._reports[key]

    def cell(self, variant: str, seeds, group: str, k_o: float = 1.0, metric: str = "ndcg") -> np.ndarray:
        """Per-seed value of ``group``'s metric averaged over the two domains."""
        vals = []
        for s in seeds:
            rep = self.report(variant, s, k_o)
            per_domain = [rep.metric(d, group, metric) for d in DOMAINS]
            vals.append(np.mean([v for v in per_domain if v is not None]))
        return np.asarray(vals)
