"""How a raw history length turns into model behaviour.

Walks through the three places the length enters: the Fourier features the
encoder sees, the prompt tokens it produces, and the attention temperature.
Everything here runs on freshly initialised weights, so it shows structure
rather than anything learned.

    python demos/length_signal_tour.py
"""
import numpy as np

from lain import tensor as T
from lain.attention import TemperatureParams, compute_temperature
from lain.length_encoder import SpectralLengthEncoder, default_frequencies, fourier_features
from lain.metrics import entropy, gini
from lain.prompting import PromptGenerator, generate_prompts

lengths = np.array([3, 30, 147, 400, 1000])

# 1. Fourier features. Low frequencies separate long histories, high ones
#    resolve differences between short ones.
omega = default_frequencies(8)
feats = fourier_features(lengths, T.Tensor(omega)).data
print("frequencies:", np.array2string(omega, precision=4))
for L, f in zip(lengths, feats):
    print(f"L={L:5d}  sin part {np.array2string(f[:4], precision=3)}")

# 2. Nearby short lengths still map to well separated embeddings.
rng = np.random.default_rng(0)
enc = SpectralLengthEncoder(d=16, d_f=8, hidden=32, rng=rng)
h = enc(lengths).h_len.data
dist = np.linalg.norm(h[:, None] - h[None, :], axis=-1)
print("\npairwise embedding distances\n", np.array2string(dist, precision=2))

prompts = generate_prompts(enc(np.array([30])), PromptGenerator(d=16, k=2, hidden=32, rng=rng))
print("\nprompt block for L=30 has shape", prompts.tokens.data.shape)

# 3. Temperature. Short users get tau near 1 + gamma, long users near 1.
tp = TemperatureParams(gamma=0.5, beta=0.01, L0=147.0)
logits = rng.normal(scale=2.0, size=20)
print("\n    L    tau   gini  entropy")
for L in lengths:
    tau = float(compute_temperature(L, tp))
    w = T.softmax_temp(logits, tau).data
    print(f"{L:5d}  {tau:.3f}  {gini(w):.3f}  {entropy(w):.3f}")
