"""recslab: an evaluation laboratory for convolution-over-interaction-map
recommenders and strong non-neural baselines.

Subpackages cover dataset handling (:mod:`recslab.dataio`), embeddings and
interaction maps (:mod:`recslab.embed`), the baseline suite
(:mod:`recslab.baselines`), the convolutional recommender
(:mod:`recslab.convrec`), leave-one-out ranking evaluation
(:mod:`recslab.evaluation`), Bayesian hyperparameter search
(:mod:`recslab.hpo`), paired significance testing (:mod:`recslab.stats`),
experiment orchestration (:mod:`recslab.studies`) and the command line
frontend (:mod:`recslab.cli`).
"""

__version__ = "0.1.0"
