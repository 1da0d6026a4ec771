//! Gated-attention patch scoring and top-K selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchBag;
use crate::error::{Error, Result};
use crate::numeric::{glorot_uniform, sigmoid, Adam, AdamConfig, Matrix, ParamId, ParamSet, Tape, Var};
use crate::train::focal::{focal_bce, focal_loss, DEFAULT_ALPHA, DEFAULT_GAMMA};

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_TOP_K: usize = 64;

/// Scoring branch weights plus the bag classifier used only while pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorParams {
    pub params: ParamSet,
    pub tanh_proj: ParamId,
    pub gate_proj: ParamId,
    pub score_vec: ParamId,
    pub head: ParamId,
    pub head_bias: ParamId,
}

impl SelectorParams {
    pub fn new(d: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let tanh_proj = params.add("selector.tanh_proj", glorot_uniform(d, hidden, &mut rng));
        let gate_proj = params.add("selector.gate_proj", glorot_uniform(d, hidden, &mut rng));
        let score_vec = params.add("selector.score_vec", glorot_uniform(hidden, 1, &mut rng));
        let head = params.add("selector.head", glorot_uniform(d, classes, &mut rng));
        let head_bias = params.add("selector.head_bias", Matrix::zeros(1, classes));
        SelectorParams {
            params,
            tanh_proj,
            gate_proj,
            score_vec,
            head,
            head_bias,
        }
    }

    /// Rebuilds the handle set from named parameters (e.g. a loaded checkpoint).
    pub fn from_params(params: ParamSet) -> Result<Self> {
        let find = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        Ok(SelectorParams {
            tanh_proj: find("selector.tanh_proj")?,
            gate_proj: find("selector.gate_proj")?,
            score_vec: find("selector.score_vec")?,
            head: find("selector.head")?,
            head_bias: find("selector.head_bias")?,
            params,
        })
    }

    pub fn dim(&self) -> usize {
        self.params.get(self.tanh_proj).value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.params.get(self.tanh_proj).value.cols()
    }

    pub fn classes(&self) -> usize {
        self.params.get(self.head).value.cols()
    }

    fn check_dim(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(Error::DimMismatch {
                what: "feature width vs selector d",
                expected: self.dim(),
                found: features.cols(),
            });
        }
        Ok(())
    }

    /// Raw per-patch scores as a K'×1 node.
    pub fn raw_scores(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let v = tape.param(&self.params, self.tanh_proj);
        let u = tape.param(&self.params, self.gate_proj);
        let w = tape.param(&self.params, self.score_vec);
        let a = tape.matmul(features, v)?;
        let a = tape.tanh(a);
        let g = tape.matmul(features, u)?;
        let g = tape.sigmoid(g);
        let h = tape.hadamard(a, g)?;
        tape.matmul(h, w)
    }

    /// Attention-pooled bag logits (1×C) used for pretraining.
    pub fn bag_logits(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let scores = self.raw_scores(tape, features)?;
        let row = tape.transpose(scores);
        let weights = tape.softmax_rows(row);
        let pooled = tape.matmul(weights, features)?;
        let head = tape.param(&self.params, self.head);
        let bias = tape.param(&self.params, self.head_bias);
        let logits = tape.matmul(pooled, head)?;
        tape.add(logits, bias)
    }
}

/// Raw scores `w·(tanh(V f) ⊙ σ(U f))`, one per row of `features`.
pub fn attention_logits(features: &Matrix, p: &SelectorParams) -> Result<Vec<f64>> {
    p.check_dim(features)?;
    let a = features.matmul(&p.params.get(p.tanh_proj).value)?.map(f64::tanh);
    let g = features.matmul(&p.params.get(p.gate_proj).value)?.map(sigmoid);
    let h = a.hadamard(&g)?;
    Ok(h.matmul(&p.params.get(p.score_vec).value)?.into_vec())
}

/// Softmax-normalized attention weights over the rows of `features`.
pub fn gated_attention_scores(features: &Matrix, p: &SelectorParams) -> Result<Vec<f64>> {
    let raw = attention_logits(features, p)?;
    Ok(Matrix::row_vector(&raw).softmax_rows().into_vec())
}

/// Indices of the `k` highest scores, ties to the lower index, returned ascending.
pub fn top_k_select(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if k < scores.len() {
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
    }
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            epochs: 30,
            lr: 1e-3,
            hidden: DEFAULT_HIDDEN,
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            seed: 0,
        }
    }
}

/// Pretrained selector and its mean training loss per epoch.
#[derive(Clone, Debug)]
pub struct PretrainedSelector {
    pub params: SelectorParams,
    pub epoch_losses: Vec<f64>,
}

/// Trains the attention-MIL classifier on (compressed) bags; labels come from `bag.label`.
///
/// Adam at batch size 1 with linear decay to zero; bag order reshuffled each epoch.
pub fn pretrain_selector(bags: &[PatchBag], config: &SelectorConfig) -> Result<PretrainedSelector> {
    let first = bags.first().ok_or(Error::EmptySplit("train"))?;
    let classes = first.label.len();
    let mut sel = SelectorParams::new(first.dim(), config.hidden, classes, config.seed);
    let mut adam = Adam::new(&sel.params, AdamConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5e1e_c70d);
    let total = (config.epochs * bags.len()).max(1) as f64;
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let bag = &bags[i];
            sel.check_dim(&bag.embeddings)?;
            let mut tape = Tape::new();
            let x = tape.constant(bag.embeddings.clone());
            let logits = sel.bag_logits(&mut tape, x)?;
            let loss = focal_loss(&mut tape, logits, &bag.label, config.alpha, config.gamma)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("selector pretraining, bag {}", bag.patient_id),
                    epoch,
                    step,
                });
            }
            sum += value;
            tape.backward(loss, &mut sel.params)?;
            let done = (epoch * bags.len() + step) as f64;
            adam.step(&mut sel.params, config.lr * (1.0 - done / total));
        }
        epoch_losses.push(sum / bags.len() as f64);
    }
    sel.params.zero_grads();
    Ok(PretrainedSelector {
        params: sel,
        epoch_losses,
    })
}

/// Bag-level logits of the pretraining classifier (no tape).
pub fn selector_logits(bag: &PatchBag, p: &SelectorParams) -> Result<Vec<f64>> {
    let weights = Matrix::row_vector(&gated_attention_scores(&bag.embeddings, p)?);
    let pooled = weights.matmul(&bag.embeddings)?;
    let logits = pooled
        .matmul(&p.params.get(p.head).value)?
        .add(&p.params.get(p.head_bias).value)?;
    Ok(logits.into_vec())
}

/// Mean focal loss of the pretraining classifier over `bags`.
pub fn selector_loss(bags: &[PatchBag], p: &SelectorParams, alpha: f64, gamma: f64) -> Result<f64> {
    let mut sum = 0.0;
    for bag in bags {
        sum += focal_bce(&selector_logits(bag, p)?, &bag.label, alpha, gamma);
    }
    Ok(sum / bags.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatchCoord;
    use crate::numeric::gradcheck;
    use proptest::prelude::*;

    fn bag_from(emb: Matrix, label: Vec<f64>) -> PatchBag {
        let coords = (0..emb.rows()).map(|i| PatchCoord::new(0, i as i32, 0)).collect();
        let mut bag = PatchBag::new("p", emb, coords).unwrap();
        bag.label = label;
        bag
    }

    #[test]
    fn identical_features_give_uniform_weights() {
        let p = SelectorParams::new(5, 7, 2, 3);
        let x = Matrix::from_fn(4, 5, |_, j| j as f64 * 0.3 - 0.5);
        let w = gated_attention_scores(&x, &p).unwrap();
        for v in w {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_patch_direct_formula() {
        let mut p = SelectorParams::new(2, 2, 2, 0);
        p.params.get_mut(p.tanh_proj).value = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.5, -1.0]]).unwrap();
        p.params.get_mut(p.gate_proj).value = Matrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        p.params.get_mut(p.score_vec).value = Matrix::column_vector(&[1.5, -0.5]);
        let f = [[0.2, -0.4], [1.0, 0.3]];
        let x = Matrix::from_rows(&[f[0].to_vec(), f[1].to_vec()]).unwrap();
        let raw: Vec<f64> = f
            .iter()
            .map(|f| {
                let t0 = (f[0] * 1.0 + f[1] * 0.5).tanh();
                let t1 = (f[0] * 0.0 + f[1] * -1.0).tanh();
                let g0 = 1.0 / (1.0 + (-(f[0] * 0.0 + f[1] * 1.0)).exp());
                let g1 = 1.0 / (1.0 + (-(f[0] * 2.0 + f[1] * 0.0)).exp());
                1.5 * t0 * g0 - 0.5 * t1 * g1
            })
            .collect();
        let got = attention_logits(&x, &p).unwrap();
        for (a, b) in got.iter().zip(&raw) {
            assert!((a - b).abs() < 1e-14);
        }
        let z = raw[0].exp() + raw[1].exp();
        let w = gated_attention_scores(&x, &p).unwrap();
        assert!((w[0] - raw[0].exp() / z).abs() < 1e-14);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_select(&[0.5, 0.9, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_select(&[0.1, 0.2], 5), vec![0, 1]);
        assert_eq!(top_k_select(&[3.0, 1.0, 2.0, 5.0], 2), vec![0, 3]);
        assert_eq!(top_k_select(&[1.0; 6], 3), vec![0, 1, 2]);
    }

    #[test]
    fn tape_scores_match_direct() {
        let p = SelectorParams::new(6, 4, 3, 11);
        let x = Matrix::from_fn(5, 6, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let s = p.raw_scores(&mut tape, v).unwrap();
        let direct = attention_logits(&x, &p).unwrap();
        assert_eq!(tape.value(s).as_slice(), direct.as_slice());
    }

    #[test]
    fn selector_gradients() {
        let mut p = SelectorParams::new(4, 3, 2, 5);
        let x = Matrix::from_fn(6, 4, |i, j| ((i * 5 + j * 3) % 7) as f64 * 0.3 - 0.9);
        let report = gradcheck(&mut p.params.clone(), 1e-6, |tape, params| {
            let mut q = p.clone();
            q.params = params.clone();
            let v = tape.constant(x.clone());
            let logits = q.bag_logits(tape, v)?;
            focal_loss(tape, logits, &[1.0, 0.0], 0.25, 2.0)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{report:?}");
        p.params.zero_grads();
    }

    #[test]
    fn zero_epochs_returns_init() {
        let bag = bag_from(Matrix::from_fn(3, 4, |i, j| (i + j) as f64), vec![1.0, 0.0]);
        let cfg = SelectorConfig {
            epochs: 0,
            hidden: 5,
            seed: 2,
            ..SelectorConfig::default()
        };
        let out = pretrain_selector(&[bag], &cfg).unwrap();
        assert_eq!(out.params, SelectorParams::new(4, 5, 2, 2));
    }

    #[test]
    fn single_bag_loss_decreases() {
        let bag = bag_from(Matrix::from_fn(8, 6, |i, j| if i == j { 2.0 } else { 0.1 * j as f64 }), vec![1.0, 0.0]);
        let mut losses = Vec::new();
        for epochs in 0..=5 {
            let cfg = SelectorConfig {
                epochs,
                hidden: 8,
                lr: 1e-2,
                seed: 4,
                ..SelectorConfig::default()
            };
            let p = pretrain_selector(std::slice::from_ref(&bag), &cfg).unwrap();
            losses.push(selector_loss(std::slice::from_ref(&bag), &p.params, 0.25, 2.0).unwrap());
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn empty_training_set() {
        assert!(matches!(
            pretrain_selector(&[], &SelectorConfig::default()),
            Err(Error::EmptySplit(_))
        ));
    }

    proptest! {
        #[test]
        fn weights_form_a_distribution(values in proptest::collection::vec(-5.0f64..5.0, 40), seed in 0u64..50) {
            let p = SelectorParams::new(4, 6, 2, seed);
            let x = Matrix::from_vec(10, 4, values).unwrap();
            let w = gated_attention_scores(&x, &p).unwrap();
            prop_assert!(w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn top_k_is_the_k_largest(scores in proptest::collection::vec(-3i32..3, 1..30), k in 1usize..35) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let picked = top_k_select(&scores, k);
            prop_assert_eq!(picked.len(), k.min(scores.len()));
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            for i in 0..scores.len() {
                if picked.contains(&i) {
                    continue;
                }
                // everything left out is lower, or tied with a higher index than every tied pick
                for &j in &picked {
                    prop_assert!(scores[i] < scores[j] || (scores[i] == scores[j] && i > j));
                }
            }
        }
    }
}
