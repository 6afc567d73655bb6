"""Smoke test for the fieldfuse extension module.

Build the module first, e.g. `maturin develop --release` from the repo root,
or copy target/release/libfieldfuse.so to fieldfuse.so on PYTHONPATH.
"""

import json
import math
import pathlib
import tempfile

import fieldfuse as ff


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print("ok  ", what)


def main():
    ball = ff.Field.sphere([0.0, 0.0, 0.0], 1.0, 50.0, [0.8, 0.2, 0.1])
    density, color = ball.query([0.0, 0.0, 0.0])
    check(density == 50.0 and color == [0.8, 0.2, 0.1], "sphere query")
    check(ball.query([2.0, 0.0, 0.0])[0] == 0.0, "density vanishes outside")

    cam = ff.Camera([4.0, 0.0, 0.0], [0.0, 0.0, 0.0], 20.0, 16, 16, near=1.0, far=7.0)
    u, v = cam.project([0.0, 0.0, 0.0])
    check(abs(u - 7.5) < 1e-9 and abs(v - 7.5) < 1e-9, "target projects to the principal point")

    img = ff.render_image(ball, cam, samples=256, background=[1.0, 1.0, 1.0])
    check(len(img["color"]) == 16 and len(img["color"][0]) == 16, "render shape")
    check(img["alpha"][8][8] > 0.99, "center pixel is opaque")
    check(img["alpha"][0][0] < 1e-6, "corner pixel sees background")
    check(abs(img["depth"][8][8] - 3.0) < 0.05, "center depth near the surface")

    # An object at unit scale placed at the origin must render like the
    # scene containing it.
    place = ff.Placement.axis_aligned([0.0, 0.0, 0.0], 1.0)
    fused = ff.render_fused_image(
        ff.Field.empty(), ball, place, ([-1.5] * 3, [1.5] * 3), cam,
        samples=256, background=[1.0, 1.0, 1.0],
    )
    diff = max(
        abs(a - b)
        for ra, rb in zip(fused["color"], img["color"])
        for pa, pb in zip(ra, rb)
        for a, b in zip(pa, pb)
    )
    check(diff < 1e-9, "fused render at unit scale matches plain render")

    est = [[0.1 * r + 0.05 * c + 1.0 for c in range(24)] for r in range(24)]
    ref = [[2.0 * d + 0.5 for d in row] for row in est]
    fit = ff.align_depth(est, ref, (8, 8, 8, 8))
    check(abs(fit["scale"] - 2.0) < 1e-9 and abs(fit["shift"] - 0.5) < 1e-9, "depth alignment recovers affine map")

    s, r = ff.init_scale_distance(3.0, 100.0, 2.5, 0.2, 1.0)
    check(math.isclose(s, 3.0 / 100.0 * 2.5 / 0.2) and math.isclose(r, s + 3.0), "initial scale and distance")

    place = ff.Placement.from_bbox(cam, (4, 4, 8, 8), 0.5, 3.0)
    check(math.isclose(place.scale, 0.5) and math.isclose(place.distance, 3.0), "placement from bbox")

    check(ff.order_views(1, 1) == [(0, 0)], "single view")
    angles = ff.view_angles(4, 2, 45.0, 20.0)
    check(angles[0] == (0.0, 0.0) and len(angles) == len(set(angles)), "view angles start frontal and are distinct")

    trace = ff.repaint_trace(50)
    check(trace[0] == (50, 49, "denoise") and trace[1] == (49, 49, "blend"), "repaint trace starts with denoise then blend")
    check(sum(k == "denoise" for _, _, k in trace) == 242, "denoiser call count")

    image = [[[0.2, 0.4, 0.6] for _ in range(8)] for _ in range(8)]
    mask = [[2 <= r < 5 and 2 <= c < 5 for c in range(8)] for r in range(8)]
    out = ff.repaint(image, mask, total_steps=10, seed=3)
    kept = all(out[r][c] == image[r][c] for r in range(8) for c in range(8) if not mask[r][c])
    check(kept, "inpainting keeps unmasked pixels")

    config = pathlib.Path(__file__).resolve().parent.parent / "configs" / "golden.toml"
    with tempfile.TemporaryDirectory() as out_dir:
        manifest = json.loads(ff.run_render(str(config), out_dir))
        check((pathlib.Path(out_dir) / "reference.png").exists(), "pipeline render writes reference.png")
        check(isinstance(manifest, dict), "manifest is JSON")

    try:
        ff.Field.sphere([0.0, 0.0, 0.0], -1.0, 1.0, [0.0, 0.0, 0.0])
    except ValueError:
        print("ok   invalid radius raises ValueError")
    else:
        raise AssertionError("invalid radius accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
