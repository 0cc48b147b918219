# %% [markdown]
# # Monte-Carlo checks of the concentration and KL bounds
#
# Each check returns a report whose verdict is recomputable from its rows.

# %%
import math

from hawkes_st import ParameterF, TriggeringSupport
from hawkes_st.checks import KappaInputs, check_bernstein, check_identifiability, check_kl_bound, kappa

support = TriggeringSupport(0.1, 0.1)
poisson = ParameterF.constant(2.0, 0.0, support, d=1, cells=8)
hawkes = ParameterF.constant(2.0, 0.5 / (0.1 * 0.2), support, d=1, cells=8)

print("kappa(1, 2, 0.5, 5) =", kappa(KappaInputs(1.0, 2.0, 0.5, 5.0)), "= 152 log 2 =", 152 * math.log(2))

# %% [markdown]
# Bernstein tails: on the full window for the Poisson case, and on windows
# stopped when the compensator reaches v for the self-exciting case.

# %%
for name, f, rule, v in (("poisson", poisson, "full", 2.0), ("hawkes", hawkes, "stopped", 3.0)):
    rep = check_bernstein(f, rule, v, [0.5, 1, 2, 4], replicates=20_000, seed=3)
    for row in rep.rows:
        if row["setting"]["form"] == "upper":
            print(f"{name:>8} x={row['setting']['x']}: tail {row['estimate']:.4f} <= {row['bound']:.4f}")
    print(f"{name:>8} verdict: {rep.verdict}")

# %% [markdown]
# KL between nearby parameters, and the log-likelihood ratio used for
# identifiability.

# %%
rep = check_kl_bound(ParameterF.constant(1.0, 0.3 / 0.08, TriggeringSupport(0.2, 0.2), 1, 8), 0.05, n=50, replicates=100, seed=4)
print(f"KL estimate {rep.rows[0]['estimate']:.4f} vs budget {rep.rows[0]['bound']:.2f}: {rep.verdict}")
alt = ParameterF.constant(3.0, 0.5 / (0.1 * 0.2), support, d=1, cells=8)
print("identifiability:", check_identifiability(hawkes, alt, 500, seed=5).rows[0])
