import argparse
import logging

from errnet.backbone import get_backbone


def parser(doc: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=doc)
    p.add_argument("--weights", default=None,
                   help="VGG-19 state_dict path or 'random[:seed]' (default: $ERRNET_VGG19_WEIGHTS)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def setup(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    bb = get_backbone(args.weights)
    if not bb.pretrained:
        print("note: untrained surrogate backbone in use")
    return bb
