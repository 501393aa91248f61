"""Command-line entry point: ``spacepose <verb> ...``.

Exit codes: 0 success, 1 invalid input, 2 partial failure (some samples
could not be posed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dataset as ds
from .detect import (
    INPUT_SIZE,
    BoundingBox,
    allocate_anchors,
    decode_stage,
    kmeans_anchors,
    load_anchors,
    read_prediction_tensor,
    save_anchors,
    select_best,
)
from .errors import SpacePoseError
from .geometry import PRISMA_CAMERA, CameraIntrinsics, KeypointSet2D
from .keypoints import load_picks, recover_keypoints
from .pipeline import ORACLE, RunConfig, evaluate, pipeline_run
from .pnp import solve_epnp
from .stylemix import (
    TEXTURE_RANDOMIZED,
    load_embedding_stats,
    load_mask,
    mix_choice,
    sample_embedding,
    stylize,
)

log = logging.getLogger("spacepose")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _load_camera(path: str | None) -> CameraIntrinsics:
    if path is None:
        return PRISMA_CAMERA
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def _read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def _write_image(path, img) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    camera = _load_camera(args.camera)
    dist = ds.PoseDistribution(args.range_min, args.range_max, args.center_fraction, args.in_image)
    samples = ds.generate_samples(args.n, camera, dist=dist, seed=args.seed)
    if args.render:
        out_dir = Path(args.render)
        out_dir.mkdir(parents=True, exist_ok=True)
        rendered = []
        for s in samples:
            img, mask = ds.render_wireframe(camera, s)
            name = f"{s.sample_id}.png"
            _write_image(out_dir / name, img)
            _write_image(out_dir / f"{s.sample_id}_mask.png", mask * 255)
            rendered.append(ds.DatasetSample(s.sample_id, s.pose, s.keypoints, s.bbox, s.source, s.camera_id, name))
        samples = rendered
    ds.write_labels(args.out, samples, camera)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return EXIT_OK


def cmd_recover(args) -> int:
    camera = _load_camera(args.camera)
    sol = recover_keypoints(camera, load_picks(args.picks))
    out = {
        "points3d": sol.points3d.points.tolist(),
        "residual_px": sol.residual,
        "per_point_residual_px": sol.per_point_residual.tolist(),
    }
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_pnp(args) -> int:
    labels = ds.read_labels(args.labels)
    kp_records = ds.read_records(args.keypoints) if args.keypoints else None
    records = []
    for s in labels.samples:
        try:
            if kp_records is None:
                kp = s.keypoints
            else:
                rec = kp_records.get(s.sample_id)
                if rec is None:
                    raise SpacePoseError("no keypoints for sample")
                kp = KeypointSet2D(rec["keypoints"], rec.get("visible"))
            records.append(ds.PoseRecord(s.sample_id, "ok", solve_epnp(labels.camera, labels.model, kp)))
        except SpacePoseError as e:
            records.append(ds.PoseRecord(s.sample_id, "failed", error=str(e)))
    ds.write_poses(args.out, records)
    return EXIT_PARTIAL if any(not r.ok for r in records) else EXIT_OK


def cmd_decode(args) -> int:
    preds = read_prediction_tensor(args.tensor, args.header)
    anchors = load_anchors(args.anchors)
    alloc = allocate_anchors(anchors)
    size = (args.image_size, args.image_size)
    stages = [decode_stage(p, [anchors[i] for i in alloc[si]], size, si) for si, p in enumerate(preds)]
    best = select_best(stages)
    print(json.dumps({
        "objectness": best.objectness,
        "bbox": best.box.to_list(),
        "stage": best.stage,
        "grid": preds[best.stage].size,
        "row": best.row,
        "col": best.col,
        "anchor": best.anchor,
    }))
    return EXIT_OK


def cmd_anchors(args) -> int:
    labels = ds.read_labels(args.labels)
    sx = args.image_size / labels.camera.n_u
    sy = args.image_size / labels.camera.n_v
    # boxes are measured in the resized network input
    boxes = [BoundingBox(s.bbox.x * sx, s.bbox.y * sy, s.bbox.w * sx, s.bbox.h * sy) for s in labels.samples]
    anchors = kmeans_anchors(boxes, args.k, args.seed)
    if args.out:
        save_anchors(args.out, anchors)
    print(json.dumps([{"p_w": a.p_w, "p_h": a.p_h} for a in anchors]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    labels = ds.read_labels(args.labels)
    preds = ds.read_poses(args.predictions)
    report = evaluate(preds, labels.samples, args.bin_width)
    print(report.table())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if args.bins_csv:
        Path(args.bins_csv).write_text(report.bins_csv())
    return EXIT_PARTIAL if report.n_failed else EXIT_OK


def cmd_run(args) -> int:
    labels = ds.read_labels(args.labels)
    dets = ORACLE if args.detections == ORACLE else ds.read_records(args.detections)
    kps = ORACLE if args.keypoints == ORACLE else ds.read_records(args.keypoints)
    cfg = RunConfig(args.keypoint_noise, args.bbox_noise, args.seed)
    records = pipeline_run(labels, dets, kps, cfg)
    ds.write_poses(args.out, records)
    n_failed = sum(not r.ok for r in records)
    log.info("posed %d of %d samples", len(records) - n_failed, len(records))
    return EXIT_PARTIAL if n_failed else EXIT_OK


def cmd_augment(args) -> int:
    labels = ds.read_labels(args.labels)
    by_id = {s.sample_id: s for s in labels.samples}
    if args.id not in by_id:
        raise SpacePoseError(f"sample {args.id!r} not in {args.labels}")
    s = by_id[args.id]
    if args.image:
        img = _read_image(args.image)
    else:
        img, _ = ds.render_wireframe(labels.camera, s, labels.model)
    config = aug.AugmentConfig.from_file(args.config) if args.config else aug.AugmentConfig(seed=args.seed)
    rng = np.random.default_rng([config.seed, int(args.index)])
    out, new_labels, rec = aug.augment_sample(img, aug.Labels(s.keypoints, s.bbox), config, rng, erase=args.erase)
    _write_image(args.out_image, out)
    result = {
        "id": s.sample_id,
        "ops": rec.ops,
        "alpha": rec.photometric.alpha,
        "beta": rec.photometric.beta,
        "noise_std": rec.photometric.noise_std,
        "erased": rec.erased,
        "keypoints": new_labels.keypoints.points.tolist(),
        "bbox": new_labels.bbox.to_list(),
    }
    text = json.dumps(result)
    if args.out_labels:
        Path(args.out_labels).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_stylize(args) -> int:
    img = _read_image(args.image)
    mask = load_mask(args.mask)
    source = mix_choice(args.p_tr, args.seed, args.index)
    out = stylize(img, mask, seed=args.seed * 1_000_003 + args.index) if source == TEXTURE_RANDOMIZED else img
    _write_image(args.out, out)
    info = {"source": source}
    if args.stats:
        config = load_embedding_stats(args.stats, args.alpha)
        content = np.zeros(config.dim) if args.content is None else np.asarray(json.loads(Path(args.content).read_text()), float)
        info["style_embedding"] = sample_embedding(config, content, args.seed).tolist()
    print(json.dumps(info))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spacepose", description="Spacecraft pose-estimation geometry and evaluation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen", help="generate synthetic labels (and optional placeholder images)")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--out", required=True, help="labels file (JSON lines)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--camera", help="camera JSON (default: PRISMA camera)")
    g.add_argument("--range-min", type=float, default=3.0, help="minimum range [m]")
    g.add_argument("--range-max", type=float, default=30.0, help="maximum range [m]")
    g.add_argument("--center-fraction", type=float, default=0.8,
                   help="central image fraction the target origin is placed in")
    g.add_argument("--in-image", action="store_true", help="redraw poses with keypoints outside the image")
    g.add_argument("--render", metavar="DIR", help="write wireframe PNGs and masks to DIR")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("recover", help="recover 3D keypoints from a picks file")
    r.add_argument("--picks", required=True)
    r.add_argument("--camera")
    r.add_argument("--out")
    r.set_defaults(func=cmd_recover)

    n = sub.add_parser("pnp", help="solve EPnP for every sample's keypoints")
    n.add_argument("--labels", required=True)
    n.add_argument("--keypoints", help="image-frame keypoint records (default: label keypoints)")
    n.add_argument("--out", required=True)
    n.set_defaults(func=cmd_pnp)

    d = sub.add_parser("decode", help="decode raw detector tensors and pick the best box")
    d.add_argument("--tensor", required=True, help="flat binary logits")
    d.add_argument("--header", required=True, help="JSON shape header")
    d.add_argument("--anchors", required=True, help="anchors JSON")
    d.add_argument("--image-size", type=int, default=INPUT_SIZE[0])
    d.set_defaults(func=cmd_decode)

    a = sub.add_parser("anchors", help="k-means anchors from label boxes")
    a.add_argument("--labels", required=True)
    a.add_argument("--k", type=int, default=9)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--image-size", type=int, default=INPUT_SIZE[0], help="network input size the boxes are scaled to")
    a.add_argument("--out")
    a.set_defaults(func=cmd_anchors)

    e = sub.add_parser("evaluate", help="metrics of a poses file against labels")
    e.add_argument("--predictions", required=True)
    e.add_argument("--labels", required=True)
    e.add_argument("--csv", help="write metrics CSV here")
    e.add_argument("--bins-csv", help="write per-range-bin errors CSV here")
    e.add_argument("--bin-width", type=float, default=2.0, help="range bin width [m]")
    e.set_defaults(func=cmd_evaluate)

    u = sub.add_parser("run", help="detection -> RoI -> keypoints -> EPnP for every sample")
    u.add_argument("--labels", required=True)
    u.add_argument("--detections", default=ORACLE, help="detections JSON lines or 'oracle'")
    u.add_argument("--keypoints", default=ORACLE, help="crop-frame keypoints JSON lines or 'oracle'")
    u.add_argument("--keypoint-noise", type=float, default=0.0, help="oracle keypoint noise sigma [px]")
    u.add_argument("--bbox-noise", type=float, default=0.0, help="oracle box noise sigma [px]")
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_run)

    m = sub.add_parser("augment", help="augment one labelled sample")
    m.add_argument("--labels", required=True)
    m.add_argument("--id", required=True)
    m.add_argument("--image", help="input image (default: rendered wireframe)")
    m.add_argument("--config", help="augmentation config (JSON or TOML)")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--index", type=int, default=0, help="sample index mixed into the seed")
    m.add_argument("--erase", action="store_true", help="also apply random erasing")
    m.add_argument("--out-image", required=True)
    m.add_argument("--out-labels")
    m.set_defaults(func=cmd_augment)

    s = sub.add_parser("stylize", help="texture-randomize an image under a bitmask")
    s.add_argument("--image", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--p-tr", type=float, default=1.0, help="probability of choosing the stylized image")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--stats", help="style embedding statistics JSON {mu, sigma}")
    s.add_argument("--content", help="content embedding JSON array")
    s.add_argument("--alpha", type=float, default=0.25)
    s.set_defaults(func=cmd_stylize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (SpacePoseError, OSError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
