"""Root-seed splitting.

All randomness in a pipeline run flows from one root seed. Stage seeds are
derived as the first 8 bytes (big-endian) of sha256("<root>:<label>"), so
any stage can be reproduced in isolation from the root seed and its label.

Labels in use: "split", "val-split", "init", "eig", "triples".
"""

import hashlib

SPLIT = "split"
VAL_SPLIT = "val-split"
INIT = "init"
EIG = "eig"
TRIPLES = "triples"


def child_seed(root: int, label: str) -> int:
    """Derive a 64-bit stage seed from the root seed and a stage label."""
    digest = hashlib.sha256(f"{root}:{label}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")
