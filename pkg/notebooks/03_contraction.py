# %% [markdown]
# # Posterior L1 error as the number of sequences grows
#
# The truth is one frozen draw from a Matern(tau=1) prior in d=1. For each n
# we simulate n sequences, run pCN on the truth's grids and pool the L1
# errors of the retained draws. The theoretical rate exponent is
# tau / (2 tau + d + 1) = 1/4; at these sizes only the sign of the slope is
# meaningful.

# %%
from hawkes_st import FitConfig, KernelSpec, LinkSpec, TriggeringSupport, prior_draw
from hawkes_st.inference import posterior_l1_curve, rate_exponent

kernel = KernelSpec.matern(1.0, 0.3, 1.0)
links = (LinkSpec.softplus(), LinkSpec.scaled_sigmoid(5.0))
truth = prior_draw(kernel, kernel, links, TriggeringSupport(0.2, 0.2), seed=11, d=1, cells=8)
cfg = FitConfig(method="pcn", iterations=20_000, burn_in=10_000, thin=10, mu_kernel=kernel, g_kernel=kernel,
                mu_link=links[0], g_link=links[1], warm_start=True)
curve = posterior_l1_curve(truth, [10, 40, 160], cfg, seed=0, replicates=8, tau=1.0)

# %%
for n, med, q25, q75 in curve.rows:
    print(f"n={n:4d}  median L1 {med:.4f}  IQR [{q25:.4f}, {q75:.4f}]")
print(f"log-log slope {curve.slope:.3f}, theory {-rate_exponent(1.0, 1):.3f}")
