#!/usr/bin/env python3
"""Smoke test for the hazelab_py extension.

Builds the release cdylib, imports it from a scratch directory, and walks
the bindings end to end: wavelet analysis, haze synthesis and inversion,
the dark-channel baseline, metrics, generator identity, checkpoint I/O,
and a two-epoch training run on generated data.
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def build_extension(scratch: Path) -> None:
    subprocess.run(
        ["cargo", "build", "-p", "hazelab-py", "--release"],
        cwd=ROOT,
        check=True,
    )
    release = ROOT / "target" / "release"
    candidates = [
        ("libhazelab_py.so", "hazelab_py.so"),
        ("libhazelab_py.dylib", "hazelab_py.so"),
        ("hazelab_py.dll", "hazelab_py.pyd"),
    ]
    for built_name, import_name in candidates:
        built = release / built_name
        if built.exists():
            shutil.copy2(built, scratch / import_name)
            return
    raise SystemExit("no built extension library found under target/release")


passed = 0


def ok(name: str) -> None:
    global passed
    passed += 1
    print(f"ok {passed:2d}  {name}")


def main() -> None:
    scratch = Path(tempfile.mkdtemp(prefix="hazelab-py-"))
    build_extension(scratch)
    sys.path.insert(0, str(scratch))
    import hazelab_py as hz

    # Wavelet analysis of the worked 2x2 example, then perfect reconstruction.
    x = hz.Tensor((1, 1, 2, 2), [1.0, 2.0, 3.0, 4.0])
    ll, lh, hl, hh = hz.dwt2(x)
    assert ll.tolist() == [10.0]
    assert lh.tolist() == [4.0]
    assert hl.tolist() == [2.0]
    assert hh.tolist() == [0.0]
    back = hz.iwt2(ll, lh, hl, hh)
    assert back.tolist() == [1.0, 2.0, 3.0, 4.0]
    ok("dwt2 of [[1,2],[3,4]] gives (10, 4, 2, 0) and iwt2 undoes it")

    # Synthesis followed by inversion with the true transmission and
    # airlight recovers the scene to rounding error.
    clear = hz.procedural_clear(1, 16, 16, 5)
    depth = hz.procedural_depth("ramp", 1, 16, 16)
    beta = 0.8
    airlight = [0.9, 0.85, 0.8]
    t = hz.transmission_from_depth(depth, beta)
    hazy = hz.synthesize_haze(clear, depth, beta, airlight)
    restored = hz.invert_haze(hazy, t, airlight, t_floor=1e-12)
    worst = max(abs(a - b) for a, b in zip(restored.tolist(), clear.tolist()))
    assert worst < 1e-9, f"inversion error {worst}"
    ok(f"analytic haze inversion recovers the scene (max err {worst:.1e})")

    # The dark-channel baseline beats doing nothing on a hazier scene.
    clear24 = hz.procedural_clear(1, 24, 24, 12)
    depth24 = hz.procedural_depth("radial", 1, 24, 24)
    hazy24 = hz.synthesize_haze(clear24, depth24, 1.2, [0.92, 0.92, 0.92])
    dehazed = hz.dcp_dehaze(hazy24)
    before = hz.psnr(hazy24, clear24)
    after = hz.psnr(dehazed, clear24)
    assert after > before, f"dcp {after:.2f} dB vs hazy {before:.2f} dB"
    a_est = hz.estimate_airlight(hazy24, fraction=0.01)
    assert len(a_est) == 1 and len(a_est[0]) == 3
    assert all(0.0 <= v <= 1.0 for v in a_est[0])
    ok(f"dark-channel baseline lifts PSNR {before:.2f} -> {after:.2f} dB")

    # Metric fixed points.
    assert hz.psnr(clear, clear) == hz.PSNR_CAP_DB == 99.0
    assert hz.ssim(clear24, clear24) == 1.0
    ok("psnr caps at 99 dB on identical images and ssim reaches 1")

    # Learning-rate schedule anchors at full scale.
    assert hz.lr_at_epoch(1) == 1e-4
    assert hz.lr_at_epoch(150) == 1e-4
    assert math.isclose(hz.lr_at_epoch(225), 5.05e-5, rel_tol=0, abs_tol=1e-18)
    assert math.isclose(hz.lr_at_epoch(300), 1e-6, rel_tol=0, abs_tol=1e-18)
    ok("learning rate holds at 1e-4 then decays linearly to 1e-6")

    # Image round trip through PNG is exact for 8-bit-representable values.
    grid = hz.Tensor(
        (1, 3, 2, 2),
        [k / 255.0 for k in (0, 17, 51, 68, 85, 102, 136, 153, 170, 204, 221, 255)],
    )
    png = scratch / "grid.png"
    hz.save_image(grid, png)
    again = hz.load_image(png)
    assert again.shape == (1, 3, 2, 2)
    assert again.tolist() == grid.tolist()
    ok("png save/load round-trips 8-bit values exactly")

    # A fresh generator is the identity map, bit for bit.
    gen = hz.Generator(seed=3, base_channels=2, blocks_per_scale=1, bottleneck_blocks=1)
    assert gen.spatial_divisor == 8
    assert gen.param_count > 0
    out = gen.dehaze(clear)
    assert out.shape == clear.shape
    assert out.tolist() == clear.tolist()
    ok(f"fresh generator ({gen.param_count} params) starts as the identity")

    # Two-epoch training on generated data, then reload the checkpoint and
    # match the in-memory network.
    data = scratch / "data"
    data.mkdir()
    lab_lines, unlab_lines = [], []
    scenes = hz.procedural_clear(3, 16, 16, 33)
    for i in range(3):
        one = hz.Tensor(
            (1, 3, 16, 16),
            [scenes.get(i, c, y, x) for c in range(3) for y in range(16) for x in range(16)],
        )
        d = hz.procedural_depth("radial", 1, 16, 16)
        hz_img = hz.synthesize_haze(one, d, 1.0, [0.9, 0.9, 0.9])
        hz.save_image(hz_img, data / f"h{i}.png")
        if i < 2:
            hz.save_image(one, data / f"c{i}.png")
            lab_lines.append(f"s{i}\th{i}.png\tc{i}.png")
        else:
            unlab_lines.append(f"s{i}\th{i}.png")
    (data / "labeled.tsv").write_text("\n".join(lab_lines) + "\n")
    (data / "unlabeled.tsv").write_text("\n".join(unlab_lines) + "\n")
    cfg = scratch / "tiny.cfg"
    cfg.write_text(
        "epochs = 2\n"
        "crop = 8\n"
        "batch_labeled = 1\n"
        "batch_unlabeled = 1\n"
        "d_update_period = 1\n"
        "base_channels = 2\n"
        "blocks_per_scale = 1\n"
        "bottleneck_blocks = 1\n"
        "disc_base_channels = 2\n"
        "disc_blocks = 2\n"
    )
    trained, report = hz.train(
        data / "labeled.tsv",
        data / "unlabeled.tsv",
        scratch / "run",
        config=cfg,
        seed=5,
    )
    assert report.steps == 4, report.steps
    assert report.d_updates == 4, report.d_updates
    assert report.dwt_calls > 0 and report.iwt_calls > 0
    assert report.contrastive_evals > 0
    assert math.isfinite(report.final_total)
    assert Path(report.checkpoint_path).is_file()
    assert Path(report.log_path).is_file()
    reloaded = hz.Generator.load(report.checkpoint_path)
    probe = hz.procedural_clear(1, 16, 16, 77)
    assert reloaded.dehaze(probe).tolist() == trained.dehaze(probe).tolist()
    assert math.isfinite(hz.psnr(trained.dehaze(hazy), clear))
    ok(
        f"training ran {report.steps} steps (total {report.final_total:.4f}) "
        "and the checkpoint reloads bit-identically"
    )

    # Errors cross the boundary as ValueError with the library's message.
    try:
        hz.dwt2(hz.Tensor((1, 1, 3, 3), [0.0] * 9))
    except ValueError as e:
        assert "even" in str(e) or "3" in str(e)
    else:
        raise AssertionError("odd-sized dwt2 should fail")
    try:
        hz.Tensor((1, 1, 2, 2), [0.0, 1.0])
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched data length should fail")
    ok("shape errors arrive as ValueError")

    shutil.rmtree(scratch, ignore_errors=True)
    print(f"smoke test passed ({passed} checks)")


if __name__ == "__main__":
    main()
