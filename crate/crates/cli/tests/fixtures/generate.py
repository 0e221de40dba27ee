#!/usr/bin/env python3
"""Regenerate the CLI test fixtures (stdlib only).

Run from any directory:  python3 crates/cli/tests/fixtures/generate.py
"""
import os
import struct

HERE = os.path.dirname(os.path.abspath(__file__))


def path(*parts):
    p = os.path.join(HERE, *parts)
    os.makedirs(os.path.dirname(p), exist_ok=True)
    return p


def write_pfm(name, width, height, rows, endian="<"):
    """rows are top-to-bottom lists of floats."""
    scale = -1.0 if endian == "<" else 1.0
    with open(path(name), "wb") as f:
        f.write(b"Pf\n%d %d\n%s\n" % (width, height, repr(scale).encode()))
        for row in reversed(rows):
            f.write(struct.pack(endian + "%df" % width, *row))


def write_pgm(name, width, height, rows):
    with open(path(name), "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (width, height))
        for row in rows:
            f.write(bytes(row))


def write_text(name, text):
    with open(path(name), "w") as f:
        f.write(text)


# Camera: principal point at (32, 24), f = 500 px, baseline 0.5 m, so
# disparity 10 at the principal point sits 25 m ahead.
W, H = 64, 48
write_text("intrinsics.txt", "# pinhole camera\nf_x = 500\nf_y = 500\no_x = 32\no_y = 24\nb = 0.5\n")


def frame_a():
    disp, lab = [], []
    for v in range(H):
        drow, lrow = [], []
        for u in range(W):
            if v < 6:
                d, l = 0.0, 255  # sky: no disparity
            elif v < 10:
                d, l = 16.0 + (u * 7 + v * 13) % 40, 3  # scattered clutter, sparse voxels
            elif 10 <= u < 30 and 14 <= v < 34:
                d, l = 25.0, 1  # vehicle at 10 m
            elif 40 <= u < 48 and 16 <= v < 40:
                d, l = 50.0, 2  # person at 5 m
            elif u >= 60:
                d, l = 20.0, 255  # unlabeled strip
            else:
                d, l = 20.0, 0  # background at 12.5 m
            drow.append(d)
            lrow.append(l)
        disp.append(drow)
        lab.append(lrow)
    return disp, lab


def frame_b():
    disp, lab = [], []
    for v in range(H):
        drow, lrow = [], []
        for u in range(W):
            if 20 <= u < 44 and 20 <= v < 44:
                d, l = 15.0, 1  # doubled by the sidecar scale to 30
            else:
                d, l = 12.5, 0
            drow.append(d)
            lrow.append(l)
        disp.append(drow)
        lab.append(lrow)
    return disp, lab


da, la = frame_a()
db, lb = frame_b()
write_pfm("frames/a_disp.pfm", W, H, da)
write_pgm("frames/a_labels.pgm", W, H, la)
write_pfm("frames/b_disp.pfm", W, H, db, endian=">")
write_pgm("frames/b_labels.pgm", W, H, lb)
write_text(
    "manifest.csv",
    "frame_id,disparity,labels,scale\n"
    "frame_a,frames/a_disp.pfm,frames/a_labels.pgm\n"
    "frame_b,frames/b_disp.pfm,frames/b_labels.pgm,2.0\n",
)
write_text("manifest_one.csv", "frame_id,disparity,labels,scale\nframe_a,frames/a_disp.pfm,frames/a_labels.pgm,\n")
write_text(
    "manifest_missing.csv",
    "frame_id,disparity,labels\nghost,frames/none.pfm,frames/none.pgm\n",
)
write_text(
    "manifest_partial.csv",
    "frame_id,disparity,labels\nframe_a,frames/a_disp.pfm,frames/a_labels.pgm\nghost,frames/none.pfm,frames/none.pgm\n",
)

# Principal-point frame: a single pixel with disparity 10 at (32, 24).
pp = [[0.0] * W for _ in range(H)]
pp[24][32] = 10.0
write_pfm("principal.pfm", W, H, pp)

# Metrics pair (8 x 6): gt in [1, 4.5], pred a noisy affine copy.
MW, MH = 8, 6
gt = [[1.0 + 0.5 * ((u + 2 * v) % 8) for u in range(MW)] for v in range(MH)]
pred = [[0.5 * g + 0.25 + 0.03 * (((u * 7 + v * 3) % 5) - 2) for u, g in enumerate(row)] for v, row in enumerate(gt)]
affine = [[(g - 1.0) / 2.0 for g in row] for row in gt]
write_pfm("metrics/gt.pfm", MW, MH, gt)
write_pfm("metrics/pred.pfm", MW, MH, pred)
write_pfm("metrics/affine.pfm", MW, MH, affine)
write_pfm("metrics/small.pfm", 4, 3, [[1.0] * 4 for _ in range(3)])
gl = [[(u // 3 + v // 2) % 3 for u in range(MW)] for v in range(MH)]
pl = [[(l if (u + v) % 4 else (l + 1) % 3) for u, l in enumerate(row)] for v, row in enumerate(gl)]
write_pgm("metrics/gt_labels.pgm", MW, MH, gl)
write_pgm("metrics/pred_labels.pgm", MW, MH, pl)
write_pgm("metrics/mask.pgm", MW, MH, [[0 if (u == 0 or v == 0) else 1 for u in range(MW)] for v in range(MH)])

# Boost-merge inputs: a 2x2 base and a 4x4 fine map with a +-0.1 checkerboard.
c = [0.0, 0.25, 0.75, 1.0]
write_pfm("boost/base.pfm", 2, 2, [[1.0, 2.0], [3.0, 4.0]])
write_pfm(
    "boost/fine.pfm",
    4,
    4,
    [[1.0 + c[u] + 2.0 * c[v] + (0.1 if (u + v) % 2 == 0 else -0.1) for u in range(4)] for v in range(4)],
)
write_pfm("boost/affine.pfm", 2, 2, [[3.0, 5.0], [7.0, 9.0]])

# Corrupted headers.
body = struct.pack("<4f", 1, 2, 3, 4)
with open(path("corrupt/color.pfm"), "wb") as f:
    f.write(b"PF\n2 2\n-1.0\n" + body * 3)
with open(path("corrupt/truncated.pfm"), "wb") as f:
    f.write(b"Pf\n2 2\n-1.0\n" + body[:10])
with open(path("corrupt/zero_scale.pfm"), "wb") as f:
    f.write(b"Pf\n2 2\n0\n" + body)
with open(path("corrupt/maxval16.pgm"), "wb") as f:
    f.write(b"P5\n2 1\n65535\n\0\0\0\0")
with open(path("corrupt/ascii.pgm"), "wb") as f:
    f.write(b"P2\n2 1\n255\n0 7\n")
with open(path("corrupt/truncated.pgm"), "wb") as f:
    f.write(b"P5\n3 3\n255\n\0\0")
sog_header = struct.pack("<3I4f", 1, 1, 1, 0.5, 0.0, 0.0, 0.0)
with open(path("corrupt/magic.sog"), "wb") as f:
    f.write(b"SOG2" + sog_header + struct.pack("<I", 3) + b"\x01")
with open(path("corrupt/short.sog"), "wb") as f:
    f.write(b"SOG1" + sog_header + struct.pack("<I", 3))
with open(path("valid.sog"), "wb") as f:
    f.write(b"SOG1" + sog_header + struct.pack("<I", 17) + b"\x04")

write_text("demo.cfg", "# short patch-wise run\nvariant = v2\npercentage = 0.5\nepochs = 5\nseed = 11\n")
