"""Finite-difference check of every hand-written layer.

Run: python demos/gradient_check.py
"""

from collections import defaultdict

from objectness import gradcheck

worst = defaultdict(float)
for result in gradcheck.run_suite(configs=20):
    worst[result.layer] = max(worst[result.layer], result.max_error)

for layer, err in worst.items():
    print(f"{layer:18s} max relative error {err:.2e}")
