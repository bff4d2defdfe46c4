"""
Streaming frames over UDP
=========================

An in-process server and client on loopback. Each 80x80 frame travels as
five 1280-byte chunks and comes back as a 30-byte prediction.
"""

import numpy as np

from usgrip import data as D
from usgrip import model as M
from usgrip import stream as S

ds = D.split(D.generate(D.GenConfig(frames_per_class=4), out_size=80))
frames, labels = ds.subset("test")
net = M.build_default_model(42)

# the wire format on its own
chunks = S.chunk_frame(frames[0], frame_id=0)
print(len(chunks), [len(c.payload) for c in chunks], len(chunks[0].encode()))
print(S.reassemble(reversed(chunks)) == frames[0].tobytes())

# queue policy answers every frame; latest_wins may skip frames under load
with S.FrameServer(net, policy="queue") as server:
    report = S.stream_client(server.address, frames, labels, rate_hz=10, inter_frame_delay_s=0.1)

print(report.replies, "replies,", report.lost, "lost")
print(f"latency p50 {1e3 * report.latency_p50_s:.2f} ms, "
      f"frame period {report.frame_period_mean_s:.3f} s")
print(server.stats.summary())
print(np.array(report.predictions))
