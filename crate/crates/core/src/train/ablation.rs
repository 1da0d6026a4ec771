//! Ablation runs: a named grid of config variants trained on one dataset
//! under a shared seed and ranked by test macro-F1.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{FusionKind, GraphPlacement};
use crate::select::{PretrainedSelector, SelectionMode};
use crate::train::config::TrainConfig;
use crate::train::metrics::MetricsReport;
use crate::train::trainer::{pretrain_for, train_with_selector, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Modules,
    Sampling,
    Window,
    GcnPlacement,
    Fusion,
    KSweep,
    AlphaSweep,
    GammaSweep,
}

impl AblationMode {
    pub const ALL: [AblationMode; 8] = [
        AblationMode::Modules,
        AblationMode::Sampling,
        AblationMode::Window,
        AblationMode::GcnPlacement,
        AblationMode::Fusion,
        AblationMode::KSweep,
        AblationMode::AlphaSweep,
        AblationMode::GammaSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Modules => "modules",
            AblationMode::Sampling => "sampling",
            AblationMode::Window => "window",
            AblationMode::GcnPlacement => "gcn_placement",
            AblationMode::Fusion => "fusion",
            AblationMode::KSweep => "k_sweep",
            AblationMode::AlphaSweep => "alpha_sweep",
            AblationMode::GammaSweep => "gamma_sweep",
        }
    }

    /// Values swept by the numeric modes; `None` for the fixed row sets.
    pub fn default_grid(self) -> Option<Vec<f64>> {
        match self {
            AblationMode::Window => Some(vec![6.0, 8.0, 10.0]),
            AblationMode::KSweep => Some(vec![16.0, 32.0, 64.0, 128.0]),
            AblationMode::AlphaSweep => Some(vec![0.1, 0.25, 0.5, 0.75]),
            AblationMode::GammaSweep => Some(vec![0.0, 1.0, 2.0, 5.0]),
            _ => None,
        }
    }

    /// Labelled config variants derived from `base` over the default grid.
    pub fn plan(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        self.variants(base, &self.default_grid().unwrap_or_default())
    }

    fn variants(self, base: &TrainConfig, grid: &[f64]) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationMode::Modules => {
                let row = |label: &str, selection, gcn, text| {
                    (
                        label.to_string(),
                        with(&|c| {
                            c.selection = selection;
                            c.use_gcn = gcn;
                            c.use_text = text;
                            c.fusion = FusionKind::Hybrid;
                        }),
                    )
                };
                vec![
                    row("attsel", SelectionMode::AttentionOnly, false, false),
                    row("2dcom+attsel", SelectionMode::Tsps, false, false),
                    row("2dcom+attsel+gcn", SelectionMode::Tsps, true, false),
                    row("2dcom+attsel+text", SelectionMode::Tsps, false, true),
                    row("attsel+gcn+text", SelectionMode::AttentionOnly, true, true),
                    row("2dcom+attsel+gcn+text", SelectionMode::Tsps, true, true),
                ]
            }
            AblationMode::Sampling => [SelectionMode::Tsps, SelectionMode::Random, SelectionMode::PosK, SelectionMode::OneDim]
                .into_iter()
                .map(|m| (m.name().to_string(), with(&|c| c.selection = m)))
                .collect(),
            AblationMode::Window => grid
                .iter()
                .map(|&w| (format!("w={w}"), with(&|c| c.w = w as i32)))
                .collect(),
            AblationMode::GcnPlacement => [("after", GraphPlacement::After), ("before", GraphPlacement::Before)]
                .into_iter()
                .map(|(l, p)| (l.to_string(), with(&|c| c.graph_placement = p)))
                .collect(),
            AblationMode::Fusion => [FusionKind::Cat, FusionKind::Add, FusionKind::Hybrid]
                .into_iter()
                .map(|f| (f.name().to_string(), with(&|c| c.fusion = f)))
                .collect(),
            AblationMode::KSweep => grid
                .iter()
                .map(|&k| (format!("K={k}"), with(&|c| c.top_k = k as usize)))
                .collect(),
            AblationMode::AlphaSweep => grid
                .iter()
                .map(|&a| (format!("alpha={a}"), with(&|c| c.alpha = a)))
                .collect(),
            AblationMode::GammaSweep => grid
                .iter()
                .map(|&g| (format!("gamma={g}"), with(&|c| c.gamma = g)))
                .collect(),
        }
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownVariant(format!("ablation mode {s:?}")))
    }
}

/// A mode plus the grid it sweeps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationPlan {
    pub mode: AblationMode,
    pub grid: Option<Vec<f64>>,
}

impl AblationPlan {
    pub fn new(mode: AblationMode) -> Self {
        AblationPlan {
            mode,
            grid: mode.default_grid(),
        }
    }

    /// Replaces the default grid. Only the numeric sweeps accept one.
    pub fn with_grid(mode: AblationMode, grid: Vec<f64>) -> Result<Self> {
        if mode.default_grid().is_none() {
            return Err(Error::Config(format!("mode {} has a fixed row set and takes no grid", mode.name())));
        }
        if grid.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        let integral = matches!(mode, AblationMode::Window | AblationMode::KSweep);
        if let Some(v) = grid.iter().find(|v| !v.is_finite() || (integral && (v.fract() != 0.0 || **v < 1.0))) {
            return Err(Error::Config(format!("grid value {v} is not valid for mode {}", mode.name())));
        }
        Ok(AblationPlan { mode, grid: Some(grid) })
    }

    pub fn variants(&self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        self.mode.variants(base, self.grid.as_deref().unwrap_or_default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub val: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub mode: AblationMode,
    pub grid: Option<Vec<f64>>,
    pub seed: u64,
    /// Rows in plan order.
    pub rows: Vec<AblationRow>,
    /// Labels by descending test macro-F1; ties keep plan order.
    pub ranking: Vec<String>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(7);
        let mut out = format!("ablation {}  seed {}\n", self.mode.name(), self.seed);
        let _ = writeln!(
            out,
            "{:<4} {:<width$} {:>8} {:>8} {:>8} {:>8} {:>8} {:>6}",
            "rank", "variant", "f1", "acc", "roc_auc", "pr_auc", "val_f1", "epoch"
        );
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        for (rank, label) in self.ranking.iter().enumerate() {
            let r = self.row(label).expect("ranked rows exist");
            let _ = writeln!(
                out,
                "{:<4} {:<width$} {:>8.4} {:>8.4} {:>8} {:>8} {:>8.4} {:>6}",
                rank + 1,
                r.label,
                r.test.f1,
                r.test.acc,
                opt(r.test.roc_auc),
                opt(r.test.pr_auc),
                r.val.f1,
                r.best_epoch
            );
        }
        out
    }
}

/// Trains every variant of `mode` on `data`. Selectors are shared between
/// variants whose selection pools and selector settings agree.
pub fn run_ablation(data: &Dataset, base: &TrainConfig, plan: &AblationPlan) -> Result<AblationReport> {
    run_ablation_with(data, base, plan, |_, _| {})
}

/// As [`run_ablation`], calling `progress(label, row)` after each variant.
pub fn run_ablation_with(
    data: &Dataset,
    base: &TrainConfig,
    plan: &AblationPlan,
    mut progress: impl FnMut(&str, &AblationRow),
) -> Result<AblationReport> {
    base.validate()?;
    let variants = plan.variants(base);
    let mut selectors: HashMap<String, Option<PretrainedSelector>> = HashMap::new();
    let mut rows = Vec::with_capacity(variants.len());
    for (label, config) in variants {
        config.validate()?;
        let key = if config.selection.uses_selector() {
            format!("{}|{}|{:?}", config.selection.name(), config.w, config.selector_config())
        } else {
            String::new()
        };
        let selector = match selectors.get(&key) {
            Some(s) => s.clone(),
            None => {
                let s = pretrain_for(data, &config)?;
                selectors.insert(key, s.clone());
                s
            }
        };
        let outcome = train_with_selector(data, &config, selector)?;
        let row = AblationRow {
            label: label.clone(),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.history.len(),
            val: outcome.pipeline.evaluate(&data.val, &data.class_names)?,
            test: outcome.pipeline.evaluate(&data.test, &data.class_names)?,
        };
        progress(&label, &row);
        rows.push(row);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].test.f1.total_cmp(&rows[a].test.f1).then(a.cmp(&b)));
    Ok(AblationReport {
        mode: plan.mode,
        grid: plan.grid.clone(),
        seed: base.seed,
        ranking: order.iter().map(|&i| rows[i].label.clone()).collect(),
        rows,
    })
}
