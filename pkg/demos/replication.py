"""A short replication study: mean bias and SD of the estimates over datasets.

    python3 demos/replication.py model1 5
"""

import sys

from latentjm import FitConfig, paper_scenario, replicate_study

name = sys.argv[1] if len(sys.argv) > 1 else "model1"
reps = int(sys.argv[2]) if len(sys.argv) > 2 else 5


def progress(rep, res):
    print(f"  replicate {rep + 1}/{reps}: {res.n_iters} iterations, loglik {res.loglik:.2f}")


table = replicate_study(paper_scenario(name), reps, seed=1, fit_config=FitConfig(),
                        progress=progress)
print(table.format())
