//! The fusion classifier: self-attention over selected patches, graph
//! enhancement, graph cross-attention, text-query cross-attention and a
//! class-row head. Ablation variants switch parts of it off or swap the
//! fusion rule.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::attention::AttentionBlock;
use crate::fusion::gcn::gcn_forward;
use crate::fusion::graph::{PatchGraph, DEFAULT_K_NN};
use crate::numeric::{glorot_uniform, Matrix, ParamId, ParamSet, Tape, Var, LAYERNORM_EPS};

pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Graph cross-attention, learned row mixing, then text-query cross-attention.
    Hybrid,
    /// Class rows concatenated with pooled visual and graph features.
    Cat,
    /// Class rows plus pooled visual and graph features.
    Add,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Hybrid => "ours",
            FusionKind::Cat => "cat",
            FusionKind::Add => "add",
        }
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ours" | "hybrid" => Ok(FusionKind::Hybrid),
            "cat" => Ok(FusionKind::Cat),
            "add" => Ok(FusionKind::Add),
            other => Err(Error::UnknownVariant(format!("fusion {other:?}"))),
        }
    }
}

/// Where the graph is built relative to attention top-K.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphPlacement {
    /// Over the K selected patches.
    After,
    /// Over the whole compressed pool; selected rows are read out afterwards.
    Before,
}

impl GraphPlacement {
    pub fn name(self) -> &'static str {
        match self {
            GraphPlacement::After => "after",
            GraphPlacement::Before => "before",
        }
    }
}

impl FromStr for GraphPlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "after" => Ok(GraphPlacement::After),
            "before" => Ok(GraphPlacement::Before),
            other => Err(Error::UnknownVariant(format!("graph placement {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub use_gcn: bool,
    pub use_text: bool,
    pub fusion: FusionKind,
    pub placement: GraphPlacement,
    pub heads: usize,
    pub k_nn: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            use_gcn: true,
            use_text: true,
            fusion: FusionKind::Hybrid,
            placement: GraphPlacement::After,
            heads: DEFAULT_HEADS,
            k_nn: DEFAULT_K_NN,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.fusion != FusionKind::Hybrid && !(self.use_gcn && self.use_text) {
            return Err(Error::Config(format!(
                "{} fusion needs both the graph and the text branch",
                self.fusion.name()
            )));
        }
        if self.k_nn == 0 {
            return Err(Error::Config("k_nn must be at least 1".into()));
        }
        Ok(())
    }
}

/// Graph information handed to the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphInput {
    None,
    /// Graph over the K selected patches.
    Selected(PatchGraph),
    /// Graph over a larger pool; `rows[i]` is the pool row of selected patch `i`.
    Pool {
        features: Matrix,
        graph: PatchGraph,
        rows: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagInput {
    /// K×d features of the selected patches.
    pub features: Matrix,
    pub graph: GraphInput,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    self_attn: AttentionBlock,
    gcn: Option<(ParamId, ParamId)>,
    graph_attn: Option<AttentionBlock>,
    fuse: Option<ParamId>,
    prompts: Option<ParamId>,
    text_attn: Option<AttentionBlock>,
    mix_norm: Option<(ParamId, ParamId)>,
    head: ParamId,
    head_bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub arch: Architecture,
    pub d: usize,
    pub classes: usize,
    pub params: ParamSet,
    /// Frozen class rows of the text query matrix.
    pub text_frozen: Matrix,
    layout: Layout,
}

/// Tape handles for every stage of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub v_att: Var,
    pub v_g: Option<Var>,
    pub f_vg: Option<Var>,
    pub f_prime: Option<Var>,
    pub f_vgt: Option<Var>,
    /// 1×C.
    pub logits: Var,
    pub attention: Vec<(&'static str, usize, Var)>,
}

impl FusionModel {
    /// Fresh parameters. `prompts` are the initial learnable text rows (t×d, t may be 0).
    pub fn new(arch: Architecture, text_frozen: Matrix, prompts: Matrix, seed: u64) -> Result<Self> {
        arch.validate()?;
        let d = text_frozen.cols();
        let classes = text_frozen.rows();
        if prompts.rows() > 0 && prompts.cols() != d {
            return Err(Error::DimMismatch {
                what: "prompt width vs text bank d",
                expected: d,
                found: prompts.cols(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let self_attn = AttentionBlock::new(&mut params, "self_attn", d, arch.heads, &mut rng)?;
        let gcn = arch.use_gcn.then(|| {
            (
                params.add("gcn.w1", glorot_uniform(d, d, &mut rng)),
                params.add("gcn.w2", glorot_uniform(d, d, &mut rng)),
            )
        });
        let hybrid = arch.fusion == FusionKind::Hybrid;
        let graph_attn = if arch.use_gcn && hybrid {
            Some(AttentionBlock::new(&mut params, "graph_attn", d, arch.heads, &mut rng)?)
        } else {
            None
        };
        let fuse = (arch.use_gcn && hybrid).then(|| params.add("fuse.w", Matrix::identity(d)));
        let prompts = (arch.use_text && prompts.rows() > 0).then(|| params.add("text.prompts", prompts));
        let text_attn = if arch.use_text && hybrid {
            Some(AttentionBlock::new(&mut params, "text_attn", d, arch.heads, &mut rng)?)
        } else {
            None
        };
        let mix_width = match arch.fusion {
            FusionKind::Cat => 3 * d,
            _ => d,
        };
        let mix_norm = (!hybrid).then(|| {
            (
                params.add("mix.ln_gain", Matrix::filled(1, mix_width, 1.0)),
                params.add("mix.ln_bias", Matrix::zeros(1, mix_width)),
            )
        });
        let (head, head_bias) = if arch.use_text {
            (
                params.add("head.w", glorot_uniform(mix_width, 1, &mut rng)),
                params.add("head.b", Matrix::zeros(1, 1)),
            )
        } else {
            (
                params.add("head.w", glorot_uniform(d, classes, &mut rng)),
                params.add("head.b", Matrix::zeros(1, classes)),
            )
        };
        Ok(FusionModel {
            arch,
            d,
            classes,
            params,
            text_frozen,
            layout: Layout {
                self_attn,
                gcn,
                graph_attn,
                fuse,
                prompts,
                text_attn,
                mix_norm,
                head,
                head_bias,
            },
        })
    }

    /// Rebuilds a model from stored parameters; every expected name must be
    /// present with the expected shape and no extra names are allowed.
    pub fn from_params(arch: Architecture, text_frozen: Matrix, prompt_rows: usize, stored: &ParamSet) -> Result<Self> {
        let d = text_frozen.cols();
        let mut model = FusionModel::new(arch, text_frozen, Matrix::zeros(prompt_rows, d), 0)?;
        if stored.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} fusion parameters, found {}",
                model.params.len(),
                stored.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.get(id).name.clone();
            let src = stored
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let value = &stored.get(src).value;
            if value.shape() != model.params.get(id).value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    value.shape(),
                    model.params.get(id).value.shape()
                )));
            }
            model.params.get_mut(id).value = value.clone();
        }
        Ok(model)
    }

    pub fn prompt_rows(&self) -> usize {
        self.layout.prompts.map_or(0, |id| self.params.get(id).value.rows())
    }

    pub fn prompts(&self) -> Option<&Matrix> {
        self.layout.prompts.map(|id| &self.params.get(id).value)
    }

    /// Records the forward pass reading parameter values from `params`
    /// (which must share this model's layout).
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: &BagInput) -> Result<ForwardVars> {
        let l = &self.layout;
        if input.features.cols() != self.d {
            return Err(Error::DimMismatch {
                what: "patch feature width vs model d",
                expected: self.d,
                found: input.features.cols(),
            });
        }
        let k = input.features.rows();
        let mut attention = Vec::new();
        let x = tape.constant(input.features.clone());
        let sa = l.self_attn.apply(tape, params, x, x)?;
        push_weights(&mut attention, "self_attn", &sa.weights);
        let v_att = sa.output;

        let v_g = match l.gcn {
            None => None,
            Some((w1, w2)) => {
                let w1 = tape.param(params, w1);
                let w2 = tape.param(params, w2);
                Some(match &input.graph {
                    GraphInput::Selected(g) => {
                        check_nodes(g.nodes(), k)?;
                        let a = tape.constant(g.norm_adjacency.clone());
                        gcn_forward(tape, x, a, w1, w2)?
                    }
                    GraphInput::Pool { features, graph, rows } => {
                        check_nodes(graph.nodes(), features.rows())?;
                        check_nodes(rows.len(), k)?;
                        let pool = tape.constant(features.clone());
                        let a = tape.constant(graph.norm_adjacency.clone());
                        let all = gcn_forward(tape, pool, a, w1, w2)?;
                        let pick = Matrix::from_fn(k, features.rows(), |i, j| if rows[i] == j { 1.0 } else { 0.0 });
                        let pick = tape.constant(pick);
                        tape.matmul(pick, all)?
                    }
                    GraphInput::None => return Err(Error::Config("graph branch enabled but no graph supplied".into())),
                })
            }
        };

        let (mut f_vg, mut f_prime, mut f_vgt) = (None, None, None);
        let visual = match (v_g, l.graph_attn, l.fuse) {
            (Some(vg), Some(block), Some(w)) => {
                let ga = block.apply(tape, params, v_att, vg)?;
                push_weights(&mut attention, "graph_attn", &ga.weights);
                f_vg = Some(ga.output);
                let stacked = tape.concat_rows(&[v_att, ga.output])?;
                let w = tape.param(params, w);
                let fp = tape.matmul(stacked, w)?;
                f_prime = Some(fp);
                fp
            }
            _ => v_att,
        };

        let logits = if !self.arch.use_text {
            let pooled = tape.mean_rows(visual);
            let w = tape.param(params, l.head);
            let b = tape.param(params, l.head_bias);
            let z = tape.matmul(pooled, w)?;
            tape.add(z, b)?
        } else {
            let frozen = tape.constant(self.text_frozen.clone());
            let text = match l.prompts {
                Some(p) => {
                    let p = tape.param(params, p);
                    tape.concat_rows(&[frozen, p])?
                }
                None => frozen,
            };
            let rows = self.classes + self.prompt_rows();
            let mixed = match self.arch.fusion {
                FusionKind::Hybrid => {
                    let block = l.text_attn.expect("text block exists with the text branch");
                    let ta = block.apply(tape, params, text, visual)?;
                    push_weights(&mut attention, "text_attn", &ta.weights);
                    f_vgt = Some(ta.output);
                    ta.output
                }
                FusionKind::Cat | FusionKind::Add => {
                    let ones = tape.constant(Matrix::filled(rows, 1, 1.0));
                    let m_att = tape.mean_rows(v_att);
                    let m_att = tape.matmul(ones, m_att)?;
                    let m_g = tape.mean_rows(v_g.expect("validated: graph branch present"));
                    let m_g = tape.matmul(ones, m_g)?;
                    let combined = if self.arch.fusion == FusionKind::Cat {
                        tape.concat_cols(&[text, m_att, m_g])?
                    } else {
                        let s = tape.add(text, m_att)?;
                        tape.add(s, m_g)?
                    };
                    let (gain, bias) = l.mix_norm.expect("mix norm exists for cat/add");
                    let gain = tape.param(params, gain);
                    let bias = tape.param(params, bias);
                    tape.layernorm_rows(combined, gain, bias, LAYERNORM_EPS)?
                }
            };
            let w = tape.param(params, l.head);
            let per_row = tape.matmul(mixed, w)?;
            let per_row = tape.transpose(per_row);
            let class_rows = tape.slice_cols(per_row, 0, self.classes)?;
            let b = tape.param(params, l.head_bias);
            let spread = tape.constant(Matrix::filled(1, self.classes, 1.0));
            let b = tape.matmul(b, spread)?;
            tape.add(class_rows, b)?
        };

        Ok(ForwardVars {
            v_att,
            v_g,
            f_vg,
            f_prime,
            f_vgt,
            logits,
            attention,
        })
    }

    /// Logits without recording gradients for later use.
    pub fn logits(&self, input: &BagInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, input)?;
        Ok(tape.value(out.logits).as_slice().to_vec())
    }

    pub fn trace(&self, input: &BagInput) -> Result<FusionTrace> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &self.params, input)?;
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        Ok(FusionTrace {
            v_att: tape.value(out.v_att).clone(),
            v_g: get(out.v_g),
            f_vg: get(out.f_vg),
            f_prime: get(out.f_prime),
            f_vgt: get(out.f_vgt),
            logits: tape.value(out.logits).as_slice().to_vec(),
            attention: out
                .attention
                .iter()
                .map(|&(block, head, w)| AttentionStat::of(block, head, tape.value(w)))
                .collect(),
        })
    }
}

fn push_weights(into: &mut Vec<(&'static str, usize, Var)>, block: &'static str, weights: &[Option<Var>]) {
    for (h, w) in weights.iter().enumerate() {
        if let Some(w) = w {
            into.push((block, h, *w));
        }
    }
}

fn check_nodes(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::DimMismatch {
            what: "graph nodes vs patch rows",
            expected,
            found,
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStat {
    pub block: &'static str,
    pub head: usize,
    pub rows: usize,
    pub cols: usize,
    /// Largest `|row sum - 1|` over the weight rows.
    pub max_row_error: f64,
    pub min_weight: f64,
}

impl AttentionStat {
    fn of(block: &'static str, head: usize, w: &Matrix) -> Self {
        let max_row_error = (0..w.rows())
            .map(|i| (w.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max);
        AttentionStat {
            block,
            head,
            rows: w.rows(),
            cols: w.cols(),
            max_row_error,
            min_weight: w.as_slice().iter().cloned().fold(f64::INFINITY, f64::min),
        }
    }
}

/// Every intermediate of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionTrace {
    pub v_att: Matrix,
    pub v_g: Option<Matrix>,
    pub f_vg: Option<Matrix>,
    pub f_prime: Option<Matrix>,
    pub f_vgt: Option<Matrix>,
    pub logits: Vec<f64>,
    pub attention: Vec<AttentionStat>,
}

impl FusionTrace {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut shape = |name: &str, m: Option<&Matrix>| {
            let _ = match m {
                Some(m) => writeln!(out, "{name:<8} {} x {}", m.rows(), m.cols()),
                None => writeln!(out, "{name:<8} -"),
            };
        };
        shape("V_att", Some(&self.v_att));
        shape("V_g", self.v_g.as_ref());
        shape("F_vg", self.f_vg.as_ref());
        shape("F'_vg", self.f_prime.as_ref());
        shape("F_vgt", self.f_vgt.as_ref());
        let _ = writeln!(out, "logits   {}", self.logits.len());
        for a in &self.attention {
            let _ = writeln!(
                out,
                "{:<10} head {}  {} x {}  max |row sum - 1| = {:.3e}",
                a.block, a.head, a.rows, a.cols, a.max_row_error
            );
        }
        out
    }
}
