# Multi-branch convs collapse into one 3x3 conv at inference time.
import numpy as np

from repdistill import autograd as ag
from repdistill.network import ModelConfig, build_model, fuse_model, super_resolve
from repdistill.reparam import RepConv

rng = np.random.default_rng(0)

# a DBB-style block: 3x3, 1x1, 1x1->3x3 and 1x1->avgpool branches, each with batch norm
block = RepConv(8, 8, 3, "dbb", rng=rng)
block.eval()
print("training-time params:", block.num_params())

x = rng.normal(size=(1, 8, 16, 16)).astype(np.float32)
with ag.no_grad():
    before = block(x).data

block.fuse()
print("fused params:        ", block.num_params())
with ag.no_grad():
    print("max |diff| after fusion:", np.abs(block(x).data - before).max())

# the same thing for a whole network; dynamic generators are left untouched
net = build_model(ModelConfig(scale=2, channels=16, blocks=2, latent=4), seed=1)
lr = rng.uniform(size=(1, 3, 24, 24))
sr = super_resolve(net, lr)
fused = fuse_model(net)
print("network params %d -> %d" % (net.num_params(), fused.num_params()))
print("end-to-end max |diff|:", np.abs(super_resolve(fused, lr) - sr).max())
print("output shape:", sr.shape)
