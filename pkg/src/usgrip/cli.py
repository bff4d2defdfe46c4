"""``usgrip`` command line: gen | train | quantize | eval | serve | stream | bench.

Exit codes: 0 success, 2 bad arguments, 3 unreadable or invalid input file,
4 runtime failure. ``USGRIP_SEED`` overrides the default seed (42).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys

EXIT_ARGS, EXIT_FILE, EXIT_RUNTIME = 2, 3, 4

log = logging.getLogger("usgrip")


class FileProblem(Exception):
    pass


def default_seed():
    try:
        return int(os.environ.get("USGRIP_SEED", "42"))
    except ValueError:
        return 42


def _addr(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected ip:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _load_dataset(path, side=None):
    """Load a UGD1 file; with ``side``, frames stored larger are block-mean downsampled."""
    from .data import Dataset, DatasetFormatError, downsample, load_dataset
    try:
        ds = load_dataset(path)
    except (OSError, DatasetFormatError) as exc:
        raise FileProblem(f"{path}: {exc}") from exc
    if side is not None and ds.height != side:
        ds = Dataset(downsample(ds.frames, ds.height // side), ds.labels, ds.seed,
                     ds.split_assignments)
    return ds


def _load_model(path):
    from .model import ModelFormatError, load_model
    try:
        return load_model(path)
    except (OSError, ModelFormatError) as exc:
        raise FileProblem(f"{path}: {exc}") from exc


def _write(path, text):
    with open(path, "w") as f:
        f.write(text)


def _split_frames(ds, split, side=80):
    """Frames of one split, block-mean downsampled to ``side`` if stored larger."""
    from .data import downsample
    frames, labels = (ds.frames, ds.labels) if split == "all" else ds.subset(split)
    if frames.shape[1] != side:
        frames = downsample(frames, frames.shape[1] // side)
    return frames, labels


# ---------------------------------------------------------------- commands


def cmd_gen(args):
    from .data import GenConfig, generate, save_dataset, split
    cfg = GenConfig(frames_per_class=args.frames_per_class, seed=args.seed)
    ds = split(generate(cfg, out_size=args.size), args.test_fraction, args.seed)
    n = save_dataset(ds, args.out)
    print(f"wrote {len(ds)} frames ({ds.height}x{ds.width}, "
          f"{len(ds.indices('train'))} train / {len(ds.indices('test'))} test) "
          f"to {args.out} ({n} bytes)")


def cmd_train(args):
    from .model import build_default_model, save_model
    from .train import TrainConfig, train
    ds = _load_dataset(args.data, 80)
    if ds.split_assignments is None or not len(ds.indices("test")):
        log.warning("dataset has no test frames; test accuracy will not be tracked")
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed)
    model = build_default_model(args.seed)

    def progress(st):
        print(f"epoch {st.epoch:3d}  loss {st.train_loss:.4f}  train acc {st.train_accuracy:.4f}"
              + (f"  test acc {st.test_accuracy:.4f}" if st.test_accuracy is not None else ""),
              flush=True)

    trained, history = train(model, ds, cfg, progress)
    n = save_model(trained, args.out)
    print(f"wrote {args.out} ({n} bytes)")
    if args.history:
        _write(args.history, json.dumps(history.as_dict(), indent=2) + "\n")


def cmd_quantize(args):
    from .model import save_model
    from . import quant as Q
    model = _load_model(args.model)
    calib = None
    if args.scheme == "uint8":
        if not args.data:
            raise argparse.ArgumentTypeError("--data is required for uint8 calibration")
        ds = _load_dataset(args.data, model.input_shape[0])
        frames = ds.frames[Q.calibration_indices(ds, args.calib_samples, args.seed)]
        calib = frames[..., None] if frames.ndim == 3 else frames
    qm = Q.quantize(model, args.scheme, calib)
    n = save_model(qm, args.out)
    print(f"wrote {qm.quant} model to {args.out} ({n} bytes, weight payload {qm.payload_bytes()})")


def cmd_eval(args):
    from .bench import evaluate, format_eval
    model = _load_model(args.model)
    ds = _load_dataset(args.data)
    frames, labels = _split_frames(ds, args.split, model.input_shape[0])
    text = format_eval(evaluate(model, frames, labels, args.split))
    sys.stdout.write(text)
    if args.report:
        _write(args.report, text)


def _interrupt(signum, frame):
    raise KeyboardInterrupt


def cmd_serve(args):
    from .stream import serve
    model = _load_model(args.model)

    def ready(server):
        host, port = server.address
        print(f"listening on {host}:{port}", flush=True)

    signal.signal(signal.SIGTERM, _interrupt)
    stats = serve(args.bind, model, args.policy, on_ready=ready)
    print(json.dumps(stats.summary()), flush=True)


def cmd_stream(args):
    from .stream import stream_client
    ds = _load_dataset(args.data)
    frames, labels = _split_frames(ds, args.split)
    if args.limit is not None:
        frames, labels = frames[:args.limit], labels[:args.limit]
    report = stream_client(args.target, frames, labels, args.rate, args.delay)
    d = report.as_dict()
    if args.report:
        _write(args.report, json.dumps(d, indent=2) + "\n")
    summary = {k: v for k, v in d.items() if k != "predictions"}
    print(json.dumps(summary, indent=2))


def cmd_bench(args):
    from .bench import SCHEMES, format_report, format_table, run_bench
    from .model import save_model
    model = _load_model(args.model)
    if model.quant != "f32":
        raise FileProblem(f"{args.model}: bench expects the f32 model, got {model.quant}")
    ds = _load_dataset(args.data, model.input_shape[0])
    report, models = run_bench(model, ds, args.calib_samples, args.seed, args.latency_samples)
    text = format_report(report)
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        for s in SCHEMES:
            save_model(models[s], os.path.join(args.out_dir, f"model_{s}.uqm"))
    if args.report:
        _write(args.report, text)
    sys.stdout.write(format_table(report))
    sys.stdout.write(text)


# ---------------------------------------------------------------- parser


def build_parser():
    seed = default_seed()
    p = argparse.ArgumentParser(prog="usgrip", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (UGD1)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=seed)
    g.add_argument("--frames-per-class", type=int, default=600)
    g.add_argument("--size", type=int, default=80, choices=(80, 160, 320, 640),
                   help="stored frame side; 640 keeps native frames (~1 GB for 2400)")
    g.add_argument("--test-fraction", type=float, default=0.25)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the CNN on a dataset's train split")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--seed", type=int, default=seed)
    t.add_argument("--history", help="write per-epoch history JSON here")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="post-training quantization of an f32 model")
    q.add_argument("--model", required=True)
    q.add_argument("--scheme", required=True, choices=("f16", "dynamic", "uint8"))
    q.add_argument("--out", required=True)
    q.add_argument("--data", help="dataset for uint8 calibration")
    q.add_argument("--calib-samples", type=int, default=100)
    q.add_argument("--seed", type=int, default=seed)
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="accuracy and confusion matrix of a model")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "test", "all"), default="test")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("serve", help="UDP inference server")
    s.add_argument("--bind", type=_addr, required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--policy", choices=("queue", "latest_wins"), default="latest_wins")
    s.set_defaults(func=cmd_serve)

    c = sub.add_parser("stream", help="stream dataset frames to a server")
    c.add_argument("--target", type=_addr, required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--split", choices=("train", "test", "all"), default="test")
    c.add_argument("--rate", type=float, default=10.0)
    c.add_argument("--delay", type=float, default=0.1)
    c.add_argument("--limit", type=int)
    c.add_argument("--report")
    c.set_defaults(func=cmd_stream)

    b = sub.add_parser("bench", help="size / accuracy / latency of all quantization schemes")
    b.add_argument("--data", required=True)
    b.add_argument("--model", required=True, help="trained f32 model")
    b.add_argument("--calib-samples", type=int, default=100)
    b.add_argument("--latency-samples", type=int, default=100)
    b.add_argument("--seed", type=int, default=seed)
    b.add_argument("--out-dir", help="also write the four model files here")
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except FileProblem as exc:
        print(f"usgrip: {exc}", file=sys.stderr)
        return EXIT_FILE
    except argparse.ArgumentTypeError as exc:
        print(f"usgrip: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except KeyboardInterrupt:
        return 0
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"usgrip: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
