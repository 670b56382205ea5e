"""Regenerate the frozen golden files under tests/data/.

Run deliberately after an intentional format or generator change, then
review the diff before committing.
"""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from viewfuse.scene import SceneConfig, generate_scene, scene_to_dict

DATA = os.path.join(os.path.dirname(__file__), "..", "tests", "data")


def write(name, payload):
    path = os.path.join(DATA, name)
    with open(path, "w") as f:
        if isinstance(payload, (dict, list)):
            json.dump(payload, f, indent=1, sort_keys=True)
            f.write("\n")
        else:
            f.write(payload)
    print("wrote", path)


def main():
    os.makedirs(DATA, exist_ok=True)
    cfg = SceneConfig(n_agents=2, n_objects_min=6, n_objects_max=6,
                      occluded_fraction=0.5)
    write("scene_golden.json", scene_to_dict(generate_scene(cfg, seed=5)))

    # Wire-format pins, packed straight from the documented layout
    # (docs/formats.md) rather than through the codec, so the file stays an
    # independent statement of the contract. Thirds exercise the float32
    # quantization on the wire.
    import struct
    payload = np.arange(18, dtype=np.float32).reshape(2, 3, 3) / 3.0
    inst_hex = (struct.pack(
        "<4sB3Hf4f3H", b"VFMS", 1, 2, 1, 7, 0.8125,
        10.0 + 1.0 / 3.0, 4.5, 60.25, 31.0 + 2.0 / 3.0,
        2, 3, 3) + payload.tobytes()).hex()
    det_hex = struct.pack(
        "<4sB2H8f", b"VFDT", 1, 1, 0,
        2.0 + 1.0 / 3.0, -5.5, 0.75, 0.9, 1.8, 4.4, -2.0 / 3.0,
        0.6875).hex()
    write("messages_golden.hex",
          "instance\n%s\ndetection\n%s\n" % (inst_hex, det_hex))


if __name__ == "__main__":
    main()
