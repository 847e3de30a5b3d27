"""
Which covariates explain the vote?
==================================

Refit the model on one feature group at a time and rank the groups by
cross-validated deviance.  Lower is better.  For the winning categorical
variable we then place each level in the (share of B, turnout) square.
"""

from ecoreg import (DesignProblem, FeaturizerConfig, Schema, VariableSpec,
                    enumerate_feature_sets, run_exploration, square_plot_data)
from ecoreg.explorer import FeatureSet, format_ranking
from ecoreg.io import SyntheticSpec, generate_synthetic

schema = Schema((VariableSpec.categorical("sex", ["male", "female"]),
                 VariableSpec.categorical("race", ["white", "black", "hispanic", "asian"]),
                 VariableSpec.categorical("educ", ["hs", "college", "grad"]),
                 VariableSpec.real("age"), VariableSpec.real("income")),
                (("sex", "educ"), ("age", "income")))
# only race generates the outcome
world = generate_synthetic(SyntheticSpec(
    schema, n_regions=200, samples_per_region=(40, 80), effects={"race": 1.0},
    featurizer=FeaturizerConfig(rff_features=8, seed=5), count_scale=0.02, seed=5))
problem = DesignProblem.from_embeddings(world.embedding, world.table)

sets = enumerate_feature_sets(schema, world.featurizer.config)
runs = run_exploration(problem, sets, alpha_grid=(1.0,), n_lambda=20, n_folds=5, seed=5)
print(format_ranking(runs))

# Square plot data uses the model restricted to the race group.
race = next(r for r in runs if r.feature_set == FeatureSet("race", ("race",)))
for p in square_plot_data(race.fit, world.featurizer, world.microdata, "race"):
    print(f"{p.category_level:<9} share_B={p.share_B_two_party:.2f} "
          f"turnout={p.participation_rate:.2f} weight={p.bubble_size:,.0f}")
