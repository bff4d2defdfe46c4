"""
Training the gesture CNN
========================

Five conv blocks, a dense head and Adam. A short run on 400 frames;
the default CLI run uses 2400 frames and 20 epochs.
"""

from usgrip import data as D
from usgrip import model as M
from usgrip.train import TrainConfig, evaluate, train

ds = D.split(D.generate(D.GenConfig(frames_per_class=100), out_size=80))

net = M.build_default_model(seed=42)
print(net.param_count(), "parameters,", net.param_count(learnable_only=True), "learnable")

# per-epoch progress arrives through a callback
trained, history = train(net, ds, TrainConfig(epochs=6, batch_size=16),
                         progress=lambda s: print(s))

loss, acc, preds = evaluate(trained, *ds.subset("test"))
print(f"test loss {loss:.3f}  accuracy {acc:.3f}")

# one frame at a time
frame = ds.frames[0][..., None]
print(M.forward(trained, frame), "label", ds.labels[0])
