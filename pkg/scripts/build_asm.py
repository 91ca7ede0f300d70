"""Build an SASM1 model from the built-in synthetic corpus or a directory of .obj meshes.

    python scripts/build_asm.py --out synthetic.sasm --n 20 --k 5
    python scripts/build_asm.py --out mugs.sasm --meshes meshes/ --category mug --k 5
"""
import argparse
import logging
from pathlib import Path

from shapeicp.app import io as sio
from shapeicp.app.synth import SYNTHETIC_CATEGORY, synthetic_corpus
from shapeicp.asm import build_asm, build_asm_from_meshes, save_asm


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--meshes", help="directory of .obj meshes (fitted with the template); default: synthetic corpus")
    p.add_argument("--category", default=None)
    p.add_argument("--n", type=int, default=20, help="synthetic corpus size")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    if args.meshes:
        paths = sorted(Path(args.meshes).glob("*.obj"))
        asm, chamfers = build_asm_from_meshes([sio.read_obj(q) for q in paths], args.k, args.category or "")
        for q, c in zip(paths, chamfers):
            logging.info("%-30s template chamfer %.3e", q.name, c)
    else:
        corpus = synthetic_corpus(args.n, seed=args.seed)
        asm = build_asm(corpus, args.k, args.category or SYNTHETIC_CATEGORY)
    save_asm(asm, args.out)
    logging.info("wrote %s: U=%d V=%d K=%d, singular values %s", args.out, asm.n_models, asm.n_vertices, asm.k,
                 " ".join(f"{s:.3g}" for s in asm.singular_values))


if __name__ == "__main__":
    main()
