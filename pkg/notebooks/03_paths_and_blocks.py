"""
Scan paths and the residual block
=================================

Tokens live row-major on the patch grid. A block reads them in four orders
(rows and columns, each both ways), runs an mLSTM branch per order, puts
each output back in grid order and merges them with softmax weights.
"""
import numpy as np

from xlstm_fer.block import XLSTMBlock, block_forward
from xlstm_fer.mlstm import GateConfig
from xlstm_fer.paths import ALL_DIRECTIONS, inverse_permutation, scan_order

for d in ALL_DIRECTIONS:
    order = scan_order(2, 3, d)
    print(f"{d.value:<13} visits {order.tolist()}  inverse {inverse_permutation(order).tolist()}")

rng = np.random.default_rng(0)
block = XLSTMBlock(8, 16, 2, rng, np.float64, gate_cfg=GateConfig("sigmoid"))
tokens = rng.standard_normal((6, 8))
orders = [scan_order(2, 3, d) for d in ALL_DIRECTIONS]

# with a zero down-projection only the outer residual is left
block.down_proj.data[:] = 0.0
out = block_forward(tokens, block, orders[0]).data
print("identity with zero down-projection:", np.array_equal(out, tokens))

# give it weights again and compare the single-path outputs
block.down_proj.data = rng.normal(0, 0.3, block.down_proj.shape)
for d, order in zip(ALL_DIRECTIONS, orders):
    y = block_forward(tokens, block, order).data
    print(f"{d.value:<13} change norm {np.linalg.norm(y - tokens):.4f}")
