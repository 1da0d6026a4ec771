//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

use std::time::{Duration, Instant};

use emmpd::data::synth::{generate, SyntheticSpec};
use emmpd::data::PatchCoord;
use emmpd::fusion::{directed_knn, knn_graph, Architecture, BagInput, FusionKind, FusionModel, GraphInput};
use emmpd::numeric::Matrix;
use emmpd::select::{compress_window, normalize_embeddings, select_patches, SelectionMode, SelectionSettings};
use emmpd::train::ablation::{run_ablation, AblationMode, AblationPlan, AblationReport};
use emmpd::train::checkpoint::checkpoint_bytes;
use emmpd::train::config::TrainConfig;
use emmpd::train::focal::{focal_bce, focal_from_prob, DEFAULT_ALPHA, DEFAULT_GAMMA};
use emmpd::train::gradsuite::run_gradient_suite;
use emmpd::train::metrics::{binary_average_precision, binary_roc_auc};
use emmpd::train::trainer::{shuffle_labels, train, Dataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);

const ORACLE_WINDOWS: usize = 500;
const ORACLE_MAX_MEMBERS: usize = 12;
const ORACLE_BUDGET: Duration = Duration::from_secs(5);

const DUP_RATIO: f64 = 0.6;
const REMOVAL_BAND: (f64, f64) = (0.55, 0.65);
const REMOVAL_CEILING_NO_DUPS: f64 = 0.05;
const RATIO_BUDGET: Duration = Duration::from_secs(30);

const TARGET_VAL_F1: f64 = 0.9;
const CONTROL_MAX_F1: f64 = 0.55;
const MAX_EPOCHS: usize = 50;
const LEARNING_BUDGET: Duration = Duration::from_secs(600);

const ABLATION_BUDGET: Duration = Duration::from_secs(45 * 60);

const METRIC_CASES: usize = 1000;
const METRIC_TOL: f64 = 1e-9;
const METRIC_BUDGET: Duration = Duration::from_secs(10);

const FOCAL_BCE_TOL: f64 = 1e-12;
const FOCAL_ANCHOR_TOL: f64 = 1e-9;
const FOCAL_BUDGET: Duration = Duration::from_secs(1);

const STRUCT_INSTANCES: usize = 40;
const ROW_SUM_TOL: f64 = 1e-6;
const PERMUTATION_TOL: f64 = 1e-9;
const NORM_ADJ_TOL: f64 = 1e-12;
const STRUCT_BUDGET: Duration = Duration::from_secs(10);

const DETERMINISM_BUDGET: Duration = Duration::from_secs(120);

const SHARED_SEED: u64 = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn timed(budget: Duration, f: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if elapsed > budget {
        o.pass = false;
    }
    o.detail = format!("{} [{:.1}s, budget {}s]", o.detail, elapsed.as_secs_f64(), budget.as_secs());
    o
}

fn gradient_suite() -> Outcome {
    let report = run_gradient_suite(None).expect("suite runs");
    let worst = report.rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err)).expect("rows");
    Outcome {
        pass: report.rows.iter().all(|r| r.max_rel_err < GRAD_TOL),
        detail: format!(
            "{} parameters, worst {}/{} rel err {:.2e} (tol {GRAD_TOL:.0e})",
            report.rows.len(),
            worst.case,
            worst.param,
            worst.max_rel_err
        ),
    }
}

/// Keeps member j iff its similarity to every earlier kept member is at
/// most the window threshold.
fn compression_reference(members: &[usize], rows: &Matrix) -> Vec<usize> {
    let cos = |a: usize, b: usize| -> f64 { rows.row(a).iter().zip(rows.row(b)).map(|(x, y)| x * y).sum() };
    let n = members.len();
    if n < 2 {
        return members.to_vec();
    }
    let mut sims = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            sims.push(cos(members[i], members[j]));
        }
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    let lo = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let theta = mean.clamp(lo, hi);
    let mut kept: Vec<usize> = Vec::new();
    for &m in members {
        if kept.iter().all(|&k| cos(k, m) <= theta) {
            kept.push(m);
        }
    }
    kept
}

fn compression_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0_4e55);
    let mut mismatches = 0;
    for _ in 0..ORACLE_WINDOWS {
        let n = rng.random_range(1..=ORACLE_MAX_MEMBERS);
        let d = rng.random_range(2..8);
        let mut raw = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        // plant near-duplicates so both outcomes occur
        for i in 1..n {
            if rng.random_bool(0.4) {
                let src = rng.random_range(0..i);
                let copy: Vec<f64> = raw.row(src).iter().map(|v| v + rng.random_range(-0.01..0.01)).collect();
                raw.row_mut(i).copy_from_slice(&copy);
            }
        }
        let normalized = normalize_embeddings(&raw).rows;
        let members: Vec<usize> = (0..n).collect();
        if compress_window(&members, &normalized).kept != compression_reference(&members, &normalized) {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("{mismatches}/{ORACLE_WINDOWS} windows differ from the reference"),
    }
}

fn removal_rate(dup_ratio: f64) -> f64 {
    let ds = generate(&SyntheticSpec {
        dup_ratio,
        seed: SHARED_SEED,
        ..SyntheticSpec::default()
    })
    .expect("dataset");
    let settings = SelectionSettings {
        mode: SelectionMode::CompressOnly,
        ..SelectionSettings::default()
    };
    let (mut total, mut kept) = (0, 0);
    for bag in &ds.bags {
        let s = select_patches(bag, &settings, None).expect("selection");
        total += s.total;
        kept += s.compressed.len();
    }
    1.0 - kept as f64 / total as f64
}

fn compression_ratio() -> Outcome {
    let high = removal_rate(DUP_RATIO);
    let none = removal_rate(0.0);
    Outcome {
        pass: (REMOVAL_BAND.0..=REMOVAL_BAND.1).contains(&high) && (0.0..=REMOVAL_CEILING_NO_DUPS).contains(&none),
        detail: format!(
            "removal {:.2}% at ratio {DUP_RATIO} (band {:.0}-{:.0}%), {:.2}% at ratio 0 (max {:.0}%)",
            100.0 * high,
            100.0 * REMOVAL_BAND.0,
            100.0 * REMOVAL_BAND.1,
            100.0 * none,
            100.0 * REMOVAL_CEILING_NO_DUPS
        ),
    }
}

fn default_dataset() -> Dataset {
    let spec = SyntheticSpec {
        seed: SHARED_SEED,
        ..SyntheticSpec::default()
    };
    Dataset::from_synthetic(&generate(&spec).expect("dataset"), None, SHARED_SEED)
}

fn default_config() -> TrainConfig {
    TrainConfig {
        seed: SHARED_SEED,
        epochs: MAX_EPOCHS,
        ..TrainConfig::default()
    }
}

fn end_to_end(data: &Dataset) -> Outcome {
    let config = default_config();
    let real = train(data, &config).expect("training");
    let f1 = real.pipeline.evaluate(&data.val, &data.class_names).expect("metrics").f1;

    let mut control = data.clone();
    shuffle_labels(&mut control.train, SHARED_SEED ^ 0x5f_fe);
    let shuffled = train(&control, &config).expect("control training");
    let control_f1 = shuffled.pipeline.evaluate(&data.val, &data.class_names).expect("metrics").f1;
    Outcome {
        pass: f1 >= TARGET_VAL_F1 && control_f1 <= CONTROL_MAX_F1 && real.history.len() <= MAX_EPOCHS,
        detail: format!(
            "val macro-F1 {f1:.4} (>= {TARGET_VAL_F1}, best epoch {}/{}), shuffled-label control {control_f1:.4} (<= {CONTROL_MAX_F1})",
            real.best_epoch,
            real.history.len()
        ),
    }
}

fn f1_of(report: &AblationReport, label: &str) -> f64 {
    report.row(label).unwrap_or_else(|| panic!("row {label}")).test.f1
}

fn ablation_orderings(data: &Dataset) -> Outcome {
    let config = default_config();
    let run = |mode| run_ablation(data, &config, &AblationPlan::new(mode)).expect("ablation");
    let sampling = run(AblationMode::Sampling);
    let modules = run(AblationMode::Modules);
    let fusion = run(AblationMode::Fusion);
    let placement = run(AblationMode::GcnPlacement);

    let tsps = f1_of(&sampling, "tsps");
    let random = f1_of(&sampling, "random");
    let full = f1_of(&modules, "2dcom+attsel+gcn+text");
    let best_partial = modules
        .rows
        .iter()
        .filter(|r| r.label != "2dcom+attsel+gcn+text")
        .map(|r| r.test.f1)
        .fold(f64::NEG_INFINITY, f64::max);
    let ours = f1_of(&fusion, "ours");
    let cat = f1_of(&fusion, "cat");
    let add = f1_of(&fusion, "add");
    let after = f1_of(&placement, "after");
    let before = f1_of(&placement, "before");

    let checks = [
        ("tsps > random", tsps > random, format!("{tsps:.4} vs {random:.4}")),
        ("full >= partial", full >= best_partial, format!("{full:.4} vs best partial {best_partial:.4}")),
        ("ours > cat, add", ours > cat && ours > add, format!("{ours:.4} vs {cat:.4}, {add:.4}")),
        ("after >= before", after >= before, format!("{after:.4} vs {before:.4}")),
    ];
    Outcome {
        pass: checks.iter().all(|c| c.1),
        detail: checks
            .iter()
            .map(|(name, ok, values)| format!("{name}: {values} {}", if *ok { "ok" } else { "VIOLATED" }))
            .collect::<Vec<_>>()
            .join("; "),
    }
}

fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Mean over positives of the precision among all samples scored at or
/// above that positive.
fn rank_walk_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    positives
        .iter()
        .map(|&t| {
            let above = scores.iter().filter(|&&s| s >= t).count() as f64;
            let hits = positives.iter().filter(|&&s| s >= t).count() as f64;
            hits / above
        })
        .sum::<f64>()
        / positives.len() as f64
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa0c);
    let (mut worst_roc, mut worst_ap, mut worst_mono) = (0.0f64, 0.0f64, 0.0f64);
    let mut undefined = 0;
    for _ in 0..METRIC_CASES {
        let n = rng.random_range(2..16);
        let levels = rng.random_range(2..8);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let (Some(roc), Some(ap)) = (binary_roc_auc(&scores, &labels), binary_average_precision(&scores, &labels)) else {
            undefined += 1;
            continue;
        };
        worst_roc = worst_roc.max((roc - pair_count_auc(&scores, &labels)).abs());
        worst_ap = worst_ap.max((ap - rank_walk_ap(&scores, &labels)).abs());
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let roc_warped = binary_roc_auc(&warped, &labels).expect("defined");
        worst_mono = worst_mono.max((roc - roc_warped).abs());
    }
    Outcome {
        pass: undefined == 0 && worst_roc < METRIC_TOL && worst_ap < METRIC_TOL && worst_mono < METRIC_TOL,
        detail: format!(
            "{METRIC_CASES} cases: |roc - pair count| {worst_roc:.1e}, |ap - rank walk| {worst_ap:.1e}, monotone shift {worst_mono:.1e} (tol {METRIC_TOL:.0e})"
        ),
    }
}

fn focal_anchors() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xf0ca1);
    let mut worst_bce = 0.0f64;
    for _ in 0..1000 {
        let z: f64 = rng.random_range(-12.0..12.0);
        let y = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let signed = if y == 1.0 { -z } else { z };
        let bce = signed.max(0.0) + (-signed.abs()).exp().ln_1p();
        worst_bce = worst_bce.max((focal_bce(&[z], &[y], 0.5, 0.0) - 0.5 * bce).abs());
    }
    let single = focal_from_prob(0.9, 1.0, 0.25, 2.0);
    let expected = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
    let defaults = DEFAULT_ALPHA == 0.25 && DEFAULT_GAMMA == 2.0;
    Outcome {
        pass: worst_bce < FOCAL_BCE_TOL && (single - expected).abs() < FOCAL_ANCHOR_TOL && defaults,
        detail: format!(
            "gamma=0 alpha=0.5 vs half BCE {worst_bce:.1e} (tol {FOCAL_BCE_TOL:.0e}); single term {single:.6e} vs {expected:.6e}; defaults alpha={DEFAULT_ALPHA} gamma={DEFAULT_GAMMA}"
        ),
    }
}

fn reference_adjacency(coords: &[PatchCoord], ids: &[usize], k: usize) -> Matrix {
    let n = coords.len();
    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        let mut cand: Vec<(f64, usize, usize)> = (0..n)
            .filter(|&j| j != i && coords[j].slide == coords[i].slide)
            .map(|j| {
                let dx = f64::from(coords[i].gx - coords[j].gx);
                let dy = f64::from(coords[i].gy - coords[j].gy);
                (dx.hypot(dy), ids[j], j)
            })
            .collect();
        cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(_, _, j) in cand.iter().take(k) {
            a.row_mut(i)[j] = 1.0;
            a.row_mut(j)[i] = 1.0;
        }
    }
    a
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5_7ac7);
    let mut failures: Vec<String> = Vec::new();
    let mut worst_row = 0.0f64;
    let mut worst_perm = 0.0f64;
    for case in 0..STRUCT_INSTANCES {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let d = heads * rng.random_range(1..4) * 2;
        let k = rng.random_range(1..12);
        let classes = rng.random_range(2..5);
        let t = rng.random_range(0..3);
        let k_nn = rng.random_range(1..6);
        let features = Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));
        let coords: Vec<PatchCoord> = (0..k)
            .map(|_| PatchCoord::new(rng.random_range(0..2), rng.random_range(0..6), rng.random_range(0..6)))
            .collect();
        let ids: Vec<usize> = (0..k).map(|i| 3 * i + 1).collect();
        let graph = knn_graph(&coords, &ids, k_nn);

        let reference = reference_adjacency(&coords, &ids, k_nn);
        if graph.adjacency != reference {
            failures.push(format!("case {case}: adjacency differs from reference"));
        }
        let directed = directed_knn(&coords, &ids, k_nn);
        for i in 0..k {
            let same_slide = coords.iter().filter(|c| c.slide == coords[i].slide).count() - 1;
            let out_degree: f64 = directed.row(i).iter().sum();
            if out_degree != k_nn.min(same_slide) as f64 {
                failures.push(format!("case {case}: node {i} out-degree {out_degree}"));
            }
            if graph.degree[i] != 1.0 + graph.adjacency.row(i).iter().sum::<f64>() {
                failures.push(format!("case {case}: degree of node {i}"));
            }
            for j in 0..k {
                if graph.adjacency[(i, j)] != graph.adjacency[(j, i)] {
                    failures.push(format!("case {case}: asymmetric at ({i}, {j})"));
                }
                let a = graph.adjacency[(i, j)] + if i == j { 1.0 } else { 0.0 };
                let expect = a / (graph.degree[i] * graph.degree[j]).sqrt();
                if (graph.norm_adjacency[(i, j)] - expect).abs() > NORM_ADJ_TOL {
                    failures.push(format!("case {case}: normalized entry ({i}, {j})"));
                }
            }
        }

        let fusion = [FusionKind::Hybrid, FusionKind::Cat, FusionKind::Add][case % 3];
        let arch = Architecture {
            use_gcn: true,
            use_text: true,
            fusion,
            heads,
            k_nn,
            ..Architecture::default()
        };
        let frozen = Matrix::from_fn(classes, d, |_, _| rng.random_range(-1.0..1.0));
        let prompts = Matrix::from_fn(t, d, |_, _| rng.random_range(-1.0..1.0));
        let model = FusionModel::new(arch, frozen, prompts, case as u64).expect("model");
        let input = BagInput {
            features: features.clone(),
            graph: GraphInput::Selected(graph),
        };
        let trace = model.trace(&input).expect("trace");
        let shape = |m: &Option<Matrix>| m.as_ref().map(|m| m.shape());
        if trace.v_att.shape() != (k, d)
            || shape(&trace.v_g) != Some((k, d))
            || trace.logits.len() != classes
            || (fusion == FusionKind::Hybrid
                && (shape(&trace.f_vg) != Some((k, d))
                    || shape(&trace.f_prime) != Some((2 * k, d))
                    || shape(&trace.f_vgt) != Some((classes + t, d))))
        {
            failures.push(format!("case {case}: trace shapes {}", trace.to_text().replace('\n', " | ")));
        }
        for stat in &trace.attention {
            worst_row = worst_row.max(stat.max_row_error);
        }

        let mut perm: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p_coords: Vec<PatchCoord> = perm.iter().map(|&i| coords[i]).collect();
        let p_ids: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let permuted = BagInput {
            features: features.select_rows(&perm),
            graph: GraphInput::Selected(knn_graph(&p_coords, &p_ids, k_nn)),
        };
        let a = model.logits(&input).expect("logits");
        let b = model.logits(&permuted).expect("logits");
        for (x, y) in a.iter().zip(&b) {
            worst_perm = worst_perm.max((x - y).abs());
        }
    }
    if worst_row > ROW_SUM_TOL {
        failures.push(format!("attention row sums off by {worst_row:.1e}"));
    }
    if worst_perm > PERMUTATION_TOL {
        failures.push(format!("permutation changed logits by {worst_perm:.1e}"));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            format!(
                "{STRUCT_INSTANCES} instances: shapes ok, knn matches reference, row sums within {worst_row:.1e}, permutation shift {worst_perm:.1e}"
            )
        } else {
            failures.into_iter().take(5).collect::<Vec<_>>().join("; ")
        },
    }
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        num_patients: 60,
        seed: 13,
        ..SyntheticSpec::default()
    };
    let data = Dataset::from_synthetic(&generate(&spec).expect("dataset"), None, 13);
    let config = TrainConfig {
        epochs: 4,
        selector_epochs: 5,
        seed: 13,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train(&data, &config).expect("training");
        let bytes = checkpoint_bytes(&out.pipeline);
        let val = out.pipeline.evaluate(&data.val, &data.class_names).expect("metrics").to_json();
        let test = out.pipeline.evaluate(&data.test, &data.class_names).expect("metrics").to_json();
        (bytes, val, test)
    };
    let (a, b) = (run(), run());
    Outcome {
        pass: a == b,
        detail: format!(
            "checkpoints {} ({} bytes), metrics reports {}",
            if a.0 == b.0 { "identical" } else { "DIFFER" },
            a.0.len(),
            if a.1 == b.1 && a.2 == b.2 { "identical" } else { "DIFFER" }
        ),
    }
}

fn main() {
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("single-threaded pool");
    let mut all_pass = true;
    let mut report = |id: u32, name: &str, o: Outcome| {
        all_pass &= o.pass;
        println!("[{}] {id}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };

    report(1, "gradient suite", timed(GRAD_BUDGET, gradient_suite));
    report(2, "compression oracle", timed(ORACLE_BUDGET, compression_oracle));
    report(3, "compression ratio", timed(RATIO_BUDGET, compression_ratio));
    report(6, "metric oracles", timed(METRIC_BUDGET, metric_oracles));
    report(7, "focal loss anchors", timed(FOCAL_BUDGET, focal_anchors));
    report(8, "structural invariants", timed(STRUCT_BUDGET, structural_invariants));
    report(9, "determinism", timed(DETERMINISM_BUDGET, determinism));
    let data = default_dataset();
    report(4, "end-to-end learning", timed(LEARNING_BUDGET, || end_to_end(&data)));
    report(5, "ablation orderings", timed(ABLATION_BUDGET, || ablation_orderings(&data)));

    if !all_pass {
        std::process::exit(1);
    }
}
