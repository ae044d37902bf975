"""Protocol double for the external detector backend. No torch needed."""

import json
import os
import shutil
import sys

attached = None
steps = 0
for line in sys.stdin:
    req = json.loads(line)
    cmd = req["cmd"]
    if cmd == "shutdown":
        break
    if cmd == "attach":
        attached = req["checkpoint"]
        shutil.copy(attached, attached + ".kept")
        reply = {"ok": True}
    elif attached is None:
        reply = {"ok": False, "error": "no checkpoint attached"}
    elif cmd == "train_step":
        if os.environ.get("FAKE_BACKEND_FAIL") == "train_step":
            reply = {"ok": False, "error": "out of memory"}
        else:
            steps += 1
            reply = {"ok": True, "loss": req["lr"] + len(req["samples"]) + sum(len(s["boxes"]) for s in req["samples"])}
    elif cmd == "predict":
        dets = [
            {"image_id": s["image_id"], "boxes": [[0, 0, s["width"] / 2, s["height"] / 2]], "labels": [0], "scores": [0.5]}
            for s in req["samples"]
        ]
        reply = {"ok": True, "detections": dets}
    elif cmd == "export":
        shutil.copy(attached + ".kept", req["path"])
        reply = {"ok": True}
    else:
        reply = {"ok": False, "error": f"unknown command {cmd}"}
    print(json.dumps(reply), flush=True)
