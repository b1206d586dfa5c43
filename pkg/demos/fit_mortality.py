"""Generate a synthetic cohort with known coefficients and recover them."""

import numpy as np

from adaptive_pension.mortality import COVARIATE_NAMES, fit_cox, fit_income_betas, load_life_table, \
    simulate_cohort_records

truth = np.array([-0.15, -0.30, -0.45, -0.10, -0.25, -0.35, 0.10, 0.05, -0.05])
baseline = load_life_table()
records = simulate_cohort_records(truth, baseline, 20000, seed=1)
model = fit_cox(records, baseline, COVARIATE_NAMES)
for name, t, f in zip(COVARIATE_NAMES, truth, model.coefficients):
    print(f"{name:28s} true {t:+.3f}  fitted {f:+.3f}")
print(fit_income_betas([(r.income_bin, r.t0, r.income) for r in records]))
