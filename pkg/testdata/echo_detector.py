"""Line-protocol test double.

usage: echo_detector.py MODE [BOX_JSON]

  ok             one car detection with BOX_JSON (default: a unit cube) per request
  bad-json       answers every request with a broken line
  die            exits after reading the first request
  bad-handshake  announces the wrong protocol
  slow           never answers
  empty          answers with no detections
"""

import sys
import json
import time

DEFAULT_BOX = [0.0, 1.0, 10.0, 1.0, 1.0, 1.0, 0.0]


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "ok"
    box = json.loads(sys.argv[2]) if len(sys.argv) > 2 else DEFAULT_BOX

    if mode == "bad-handshake":
        print(json.dumps({"protocol": "something-else", "version": 1}), flush=True)
        return
    print(json.dumps({"protocol": "commit-detector", "version": 1}), flush=True)
    print("ready", file=sys.stderr, flush=True)

    for line in sys.stdin:
        request = json.loads(line)
        if mode == "die":
            sys.exit(3)
        if mode == "slow":
            time.sleep(60)
            continue
        if mode == "bad-json":
            print('{"detections": [', flush=True)
            continue
        if mode == "empty":
            print(json.dumps({"detections": []}), flush=True)
            continue
        score = 0.9 if request.get("points") else 0.1
        print(json.dumps({"detections": [{"box": box, "label": "car", "score": score}]}), flush=True)


if __name__ == "__main__":
    main()
