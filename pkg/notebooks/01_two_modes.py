# # Two modes, one input
#
# Every input of `two-mode-vec` has two equally likely targets a unit apart.
# A regression model trained with squared error lands between them; the
# min-over-samples objective keeps one sample near each target.

# In[1]:

import numpy as np

from cimle import pipeline
from cimle.config import train_config
from cimle.metrics import mode_coverage
from cimle.trainer import train, train_regression_baseline

cfg = pipeline.default_config(task="two-mode-vec", seed=0)
run = pipeline.prepare(cfg)
print(run.task.describe())

# Train both models on the same 500 pairs. The baseline is the same network
# with its latent input zeroed.

# In[2]:

baseline = train_regression_baseline(run.gen.copy(), run.dataset, run.spec, train_config(cfg))
gen, report = train(run.gen, run.dataset, run.spec, train_config(cfg))
print("matched distance, first and last outer step:", report.outer_distance[0], report.outer_distance[-1])

# Coverage counts how many of the two modes 100 draws hit within 0.1.

# In[3]:

for name, model in (("imle", gen), ("baseline", baseline)):
    rep = mode_coverage(model, run.task, eps=0.1, draws=100, inputs=100)
    print(f"{name:9s} coverage {rep.aggregate:.3f}")

# Where does the baseline land? On this short budget it is still moving from
# its cold start toward the conditional mean, and never toward either mode.
# Run to convergence it reaches the mean within a few percent.

# In[4]:

x = pipeline.eval_inputs(run.task, 5, 1)
z = np.zeros((5, *baseline.latent_shape), np.float32)
print(np.round(baseline.sample(x, z), 3))
print(np.round(run.task.conditional_mean(x), 3))

# And the trained sampler for one input: its draws split between the modes.

# In[5]:

draws = gen.sample(np.repeat(x[:1], 8, axis=0), np.random.default_rng(0).standard_normal((8, 4)).astype(np.float32))
print(np.round(draws, 2))
print(np.round(run.task.modes(x[:1])[0], 2))
