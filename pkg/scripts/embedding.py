"""Embed a fitted random-feature model into a wide two-layer net and check it.

Prints the gap between the net's linearization and the random-feature model on
sphere probes, the displacement norm, and the net's robust loss lower bound.
"""

import argparse

import numpy as np

from advlab.attacks import robust_loss_oracle, toy_dataset
from advlab.models import Activation, TwoLayerNet, init_two_layer
from advlab.ntk_rf import KernelSpec, embed_rf_into_net, kernel_fit, linearized_output, rf_from_directions
from advlab.numerics import RngStream, sample_sphere


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--m", type=int, default=8192)
    parser.add_argument("--d", type=int, default=5)
    parser.add_argument("--n", type=int, default=6)
    parser.add_argument("--target-scale", type=float, default=3.0)
    parser.add_argument("--lam", type=float, default=1e-3)
    parser.add_argument("--cap-samples", type=int, default=20)
    args = parser.parse_args(argv)

    spec = KernelSpec(Activation("quad_relu"), "sphere_sqrt_d")
    ds = toy_dataset(RngStream(21), args.n, args.d, 0.05)
    fit = kernel_fit(spec, ds, args.cap_samples, targets=args.target_scale * ds.y, lam=args.lam, rng=RngStream(3))
    p0 = init_two_layer(RngStream(5), args.m, args.d, "sphere_sqrt_d")
    model = rf_from_directions(fit, p0.w)
    emb = embed_rf_into_net(model, p0)
    probes = sample_sphere(RngStream(2), args.d, n=100)
    gap = float(np.max(np.abs(linearized_output(p0, emb.params, spec.activation, probes) - model.predict(probes))))
    oracle = robust_loss_oracle(TwoLayerNet(emb.params, spec.activation), ds, budget=4, rng=RngStream(6))
    print(f"linearization_gap={gap!r}")
    print(f"displacement_norm={emb.displacement_norm!r}")
    print(f"robust_loss_oracle={oracle!r}")


if __name__ == "__main__":
    main()
