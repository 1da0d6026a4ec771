//! Multi-head (cross) attention followed by a row layer norm.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{glorot_uniform, Matrix, ParamId, ParamSet, Tape, Var, LAYERNORM_EPS};

/// Projection weights are stored as full d×d matrices; head `j` uses the
/// column block `[j·d/h, (j+1)·d/h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionBlock {
    pub heads: usize,
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub gain: ParamId,
    pub bias: ParamId,
}

/// Values produced by one block application.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    /// One m×n weight node per head.
    pub weights: [Option<Var>; MAX_HEADS],
}

pub const MAX_HEADS: usize = 16;

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || heads > MAX_HEADS || d % heads != 0 {
            return Err(Error::Config(format!("d = {d} must be divisible by heads = {heads} (1..={MAX_HEADS})")));
        }
        Ok(AttentionBlock {
            heads,
            query: params.add(format!("{prefix}.query"), glorot_uniform(d, d, rng)),
            key: params.add(format!("{prefix}.key"), glorot_uniform(d, d, rng)),
            value: params.add(format!("{prefix}.value"), glorot_uniform(d, d, rng)),
            gain: params.add(format!("{prefix}.ln_gain"), Matrix::filled(1, d, 1.0)),
            bias: params.add(format!("{prefix}.ln_bias"), Matrix::zeros(1, d)),
        })
    }

    /// Looks the block up by name prefix in an existing set.
    pub fn find(params: &ParamSet, prefix: &str, heads: usize) -> Result<Self> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            params.find(&name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(AttentionBlock {
            heads,
            query: get("query")?,
            key: get("key")?,
            value: get("value")?,
            gain: get("ln_gain")?,
            bias: get("ln_bias")?,
        })
    }

    /// `LayerNorm(concat_j softmax((Q Wq_j)(X Wk_j)ᵀ / √d_head) (X Wv_j))`.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, query: Var, context: Var) -> Result<AttentionOutput> {
        let d = params.get(self.query).value.rows();
        let dh = d / self.heads;
        let wq = tape.param(params, self.query);
        let wk = tape.param(params, self.key);
        let wv = tape.param(params, self.value);
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(context, wk)?;
        let v = tape.matmul(context, wv)?;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = [None; MAX_HEADS];
        for (j, slot) in weights.iter_mut().enumerate().take(self.heads) {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, j * dh, dh)?,
                    tape.slice_cols(k, j * dh, dh)?,
                    tape.slice_cols(v, j * dh, dh)?,
                )
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let w = tape.softmax_rows(scores);
            *slot = Some(w);
            outs.push(tape.matmul(w, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let gain = tape.param(params, self.gain);
        let bias = tape.param(params, self.bias);
        let output = tape.layernorm_rows(cat, gain, bias, LAYERNORM_EPS)?;
        Ok(AttentionOutput { output, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::standardize_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(d: usize, heads: usize) -> (ParamSet, AttentionBlock) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = AttentionBlock::new(&mut params, "attn", d, heads, &mut rng).unwrap();
        (params, b)
    }

    fn run(params: &ParamSet, b: &AttentionBlock, q: &Matrix, x: &Matrix) -> (Matrix, Vec<Matrix>) {
        let mut tape = Tape::new();
        let qv = tape.constant(q.clone());
        let xv = tape.constant(x.clone());
        let out = b.apply(&mut tape, params, qv, xv).unwrap();
        let w = out.weights.iter().flatten().map(|&w| tape.value(w).clone()).collect();
        (tape.value(out.output).clone(), w)
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(AttentionBlock::new(&mut params, "a", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn single_context_row() {
        let (p, b) = block(4, 2);
        let q = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.1);
        let x = Matrix::from_fn(1, 4, |_, j| j as f64 - 1.5);
        let (out, weights) = run(&p, &b, &q, &x);
        for w in weights {
            assert!(w.as_slice().iter().all(|&v| v == 1.0));
        }
        for i in 1..3 {
            assert_eq!(out.row(i), out.row(0));
        }
        // the lone row's value projection, normalized
        let xv = x.matmul(&p.get(b.value).value).unwrap();
        let (expected, _) = standardize_rows(&xv, LAYERNORM_EPS);
        for (a, e) in out.row(0).iter().zip(expected.row(0)) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_single_head_direct() {
        let (mut p, b) = block(2, 1);
        p.get_mut(b.query).value = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        p.get_mut(b.key).value = Matrix::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.0]]).unwrap();
        p.get_mut(b.value).value = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 0.5]]).unwrap();
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        // direct evaluation by hand-expanded sums
        let qw = [[1.0, 0.0], [0.0, 2.0]];
        let xk = [[1.5, 1.0], [1.5, -1.0]];
        let xv = [[3.0, -0.5], [3.0, 2.0]];
        let (out, weights) = run(&p, &b, &q, &x);
        for i in 0..2 {
            let s: Vec<f64> = (0..2).map(|j| (qw[i][0] * xk[j][0] + qw[i][1] * xk[j][1]) / 2f64.sqrt()).collect();
            let z = s[0].exp() + s[1].exp();
            let a = [s[0].exp() / z, s[1].exp() / z];
            assert!((weights[0][(i, 0)] - a[0]).abs() < 1e-14);
            let o = [a[0] * xv[0][0] + a[1] * xv[1][0], a[0] * xv[0][1] + a[1] * xv[1][1]];
            let mean = (o[0] + o[1]) / 2.0;
            let var = ((o[0] - mean).powi(2) + (o[1] - mean).powi(2)) / 2.0;
            for c in 0..2 {
                let e = (o[c] - mean) / (var + LAYERNORM_EPS).sqrt();
                assert!((out[(i, c)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rows_sum_to_one_and_shapes() {
        let (p, b) = block(8, 4);
        let q = Matrix::from_fn(5, 8, |i, j| ((i * 3 + j) % 7) as f64 - 3.0);
        let x = Matrix::from_fn(9, 8, |i, j| ((i + 2 * j) % 5) as f64 * 0.7);
        let (out, weights) = run(&p, &b, &q, &x);
        assert_eq!(out.shape(), (5, 8));
        assert_eq!(weights.len(), 4);
        for w in weights {
            assert_eq!(w.shape(), (5, 9));
            for i in 0..5 {
                assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let (p, b) = block(8, 2);
        let x = Matrix::from_fn(6, 8, |i, j| ((i * 5 + j * 3) % 11) as f64 * 0.2 - 1.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let xp = x.select_rows(&perm);
        let (out, _) = run(&p, &b, &x, &x);
        let (outp, _) = run(&p, &b, &xp, &xp);
        for (a, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((outp[(a, c)] - out[(src, c)]).abs() < 1e-12);
            }
        }
    }
}
