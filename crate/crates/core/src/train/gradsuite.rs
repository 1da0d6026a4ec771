//! Finite-difference check of every trainable parameter group on fixed
//! small shapes: K = 6 patches, d = 8, two heads, C = 2, one prompt row.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::PatchCoord;
use crate::error::Result;
use crate::fusion::{knn_graph, Architecture, BagInput, FusionKind, FusionModel, GraphInput, GraphPlacement};
use crate::numeric::{gradcheck, Matrix, OpKind, ParamSet, Tape};
use crate::select::SelectorParams;
use crate::train::focal::{focal_loss, DEFAULT_ALPHA, DEFAULT_GAMMA};

pub const SUITE_TOLERANCE: f64 = 1e-4;
pub const SUITE_STEP: f64 = 1e-6;

const K: usize = 6;
const D: usize = 8;
const HEADS: usize = 2;
const CLASSES: usize = 2;
const PROMPTS: usize = 1;
const LABELS: [f64; CLASSES] = [1.0, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub case: &'static str,
    pub param: String,
    pub entries: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < self.tolerance)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.case.len() + r.param.len() + 1).max().unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let name = format!("{}/{}", r.case, r.param);
            let verdict = if r.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{name:<width$}  {:>4} entries  rel err {:.3e}  {verdict}", r.entries, r.max_rel_err);
        }
        let _ = writeln!(
            out,
            "{} parameters checked, worst {:.3e}, tolerance {:.0e}: {}",
            self.rows.len(),
            self.max_rel_err(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn fixture(rng: &mut ChaCha8Rng) -> (Matrix, Vec<PatchCoord>) {
    let features = Matrix::from_fn(K, D, |_, _| rng.random_range(-1.0..1.0));
    let coords = (0..K)
        .map(|i| PatchCoord::new((i / 4) as u16, (i % 3) as i32, (i % 4 / 3) as i32 + (i as i32 % 2)))
        .collect();
    (features, coords)
}

/// Runs every case. `corrupt` scales one operation's adjoint so the suite
/// can be shown to detect a broken backward rule.
pub fn run_gradient_suite(corrupt: Option<OpKind>) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ad_c4ec);
    let (features, coords) = fixture(&mut rng);
    let ids: Vec<usize> = (0..K).collect();
    let prep = |tape: &mut Tape| {
        if let Some(kind) = corrupt {
            tape.corrupt_adjoint(kind);
        }
    };
    let mut rows = Vec::new();
    let mut push = |case: &'static str, report: crate::numeric::GradReport| {
        rows.extend(report.params.into_iter().map(|p| SuiteRow {
            case,
            param: p.name,
            entries: p.entries,
            max_rel_err: p.max_rel_err,
        }));
    };

    let selector = SelectorParams::new(D, 4, CLASSES, 11);
    let mut params = selector.params.clone();
    push(
        "selector",
        gradcheck(&mut params, SUITE_STEP, |tape, p| {
            prep(tape);
            let s = SelectorParams { params: p.clone(), ..selector.clone() };
            let x = tape.constant(features.clone());
            let logits = s.bag_logits(tape, x)?;
            focal_loss(tape, logits, &LABELS, DEFAULT_ALPHA, DEFAULT_GAMMA)
        })?,
    );

    let frozen = Matrix::from_fn(CLASSES, D, |_, _| rng.random_range(-1.0..1.0));
    let prompts = Matrix::from_fn(PROMPTS, D, |_, _| rng.random_range(-1.0..1.0));
    let base = Architecture {
        heads: HEADS,
        k_nn: 2,
        ..Architecture::default()
    };
    let cases: [(&'static str, Architecture); 5] = [
        ("fusion", base),
        ("fusion-before", Architecture { placement: GraphPlacement::Before, ..base }),
        ("fusion-cat", Architecture { fusion: FusionKind::Cat, ..base }),
        ("fusion-add", Architecture { fusion: FusionKind::Add, ..base }),
        ("fusion-pooled", Architecture { use_text: false, ..base }),
    ];
    for (case, arch) in cases {
        let model = FusionModel::new(arch, frozen.clone(), prompts.clone(), 23)?;
        let graph = knn_graph(&coords, &ids, arch.k_nn);
        let input = match arch.placement {
            GraphPlacement::After => BagInput {
                features: features.clone(),
                graph: GraphInput::Selected(graph),
            },
            GraphPlacement::Before => BagInput {
                features: features.select_rows(&[0, 2, 3, 5]),
                graph: GraphInput::Pool {
                    features: features.clone(),
                    graph,
                    rows: vec![0, 2, 3, 5],
                },
            },
        };
        let mut params = model.params.clone();
        push(
            case,
            gradcheck(&mut params, SUITE_STEP, |tape, p| {
                prep(tape);
                let out = model.forward(tape, p, &input)?;
                focal_loss(tape, out.logits, &LABELS, DEFAULT_ALPHA, DEFAULT_GAMMA)
            })?,
        );
    }

    let mut params = ParamSet::new();
    let logits = params.add("focal.logits", Matrix::row_vector(&[0.7, -1.3]));
    push(
        "focal",
        gradcheck(&mut params, SUITE_STEP, |tape, p| {
            prep(tape);
            let z = tape.param(p, logits);
            focal_loss(tape, z, &LABELS, DEFAULT_ALPHA, DEFAULT_GAMMA)
        })?,
    );

    Ok(SuiteReport {
        tolerance: SUITE_TOLERANCE,
        rows,
    })
}
