//! Two-layer graph convolution.

use crate::error::Result;
use crate::numeric::{Tape, Var};

/// `Â · ReLU(Â V W1) · W2` for a normalized adjacency `Â`.
pub fn gcn_forward(tape: &mut Tape, features: Var, norm_adjacency: Var, w1: Var, w2: Var) -> Result<Var> {
    let agg = tape.matmul(norm_adjacency, features)?;
    let h = tape.matmul(agg, w1)?;
    let h = tape.relu(h);
    let agg = tape.matmul(norm_adjacency, h)?;
    tape.matmul(agg, w2)
}
