"""
Adding state exit polls as extra training rows
==============================================

Exit polls report subgroup shares at the state level, e.g. "women in
state S1 split 40/55".  Each poll becomes one more training row: its
embedding is the mean over that subgroup's records in the state, and its
pseudo-counts are the subgroup's weight times the reported shares.
"""

import numpy as np

from ecoreg import (DesignProblem, FeaturizerConfig, Schema, SubgroupQuery, VariableSpec,
                    exit_poll_table, fit_cv, fit_scatter)
from ecoreg.inference import scatter_r2
from ecoreg.io import ExitPollRecord, SyntheticSpec, build_augmentation_rows, generate_synthetic

schema = Schema((VariableSpec.categorical("sex", ["male", "female"]),
                 VariableSpec.categorical("educ", ["hs", "college", "grad"]),
                 VariableSpec.real("age")))
world = generate_synthetic(SyntheticSpec(
    schema, n_regions=120, samples_per_region=(40, 80),
    effects={"sex": np.array([[0.0, 1.0]]), "educ": 1.0},
    featurizer=FeaturizerConfig(rff_features=8, seed=3), count_scale=0.02, seed=3))

# Regions belong to four states.
states = {rid: f"S{int(rid[1:]) % 4}" for rid in world.embedding.row_ids}

# Poll rows.  Participation left as None falls back to the default below.
women = SubgroupQuery.parse("women", "sex=female")
men = SubgroupQuery.parse("men", "sex=male")
polls = [ExitPollRecord("S0", "women", women, 0.40, 0.55, 0.6),
         ExitPollRecord("S0", "men", men, 0.55, 0.40, None),
         ExitPollRecord("S1", "grads", SubgroupQuery.parse("grads", "educ=grad"), 0.6, 0.35, 0.7)]
counts = world.table.counts()
turnout = counts[:, :2].sum() / counts.sum()
aug_emb, aug_table = build_augmentation_rows(polls, world.microdata, world.featurizer, states,
                                             default_participation=turnout)
for row in aug_table.rows:
    print(row.row_id, np.round(row.outcome.counts, 1))

# Exit-poll rows are always in the training folds, never held out.
emb = world.embedding.append(aug_emb)
table = world.table.extend(aug_table.rows)
problem = DesignProblem.from_embeddings(emb, table, exit_poll_weight=1.0)
fit = fit_cv(problem, alpha_grid=(1.0,), n_lambda=30, n_folds=5, seed=3)

points = fit_scatter(fit, problem)
print(f"{len(points)} scatter points, R^2 = {scatter_r2(points):.3f}")

for row in exit_poll_table(fit, world.featurizer, world.microdata, [men, women], "per-state",
                           partition=True, region_states=states):
    print(row.unit_id, f"{row.group:<6}", f"B={row.share_B:.2f}",
          f"electorate={row.fraction_of_electorate:.2f}")
