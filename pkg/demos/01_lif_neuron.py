"""A single LIF neuron driven by a fixed spike train.

Shows the leak, the threshold crossing and the subtractive reset, then the
surrogate derivative the backward pass uses in place of the step function.
"""
import numpy as np

from nmsnn.snn import LIFParams, simulate_layer, surrogate_derivative

params = LIFParams(leak_alpha=0.5, v_threshold=1.0)

# one input line, one neuron, weight 0.6; input spikes at t = 0, 1, 2, 5, 6
x = np.array([1, 1, 1, 0, 0, 1, 1, 0], dtype=float).reshape(1, -1, 1)
w = np.array([[0.6]])
trace = simulate_layer(w, x, params)

# after the spike at t=2 the membrane keeps the 0.05 above threshold, halved by the leak
print(" t  in   pre-reset  spike")
for t in range(x.shape[1]):
    print(f"{t:2d}  {int(x[0, t, 0])}   {trace.pre_reset[0, t, 0]:8.4f}   {int(trace.spikes[0, t, 0])}")

u = np.linspace(0.0, 2.0, 9)
print("\nsurrogate dH/du around the threshold:")
for ui, g in zip(u, surrogate_derivative(u, params)):
    print(f"  u={ui:4.2f}  {g:.4f}")
