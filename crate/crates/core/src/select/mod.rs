//! Two-stage patch selection: window compression, then attention top-K.

pub mod attention;
pub mod compress;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchBag;
use crate::error::{Error, Result};

pub use attention::{
    attention_logits, gated_attention_scores, pretrain_selector, selector_logits, selector_loss, top_k_select,
    PretrainedSelector, SelectorConfig, SelectorParams, DEFAULT_HIDDEN, DEFAULT_TOP_K,
};
pub use compress::{
    compress_window, normalize_embeddings, one_dim_compress, two_dim_compress, window_partition, Compression,
    Normalized, WindowIndex, WindowOutcome, WindowSummary, DEFAULT_WINDOW,
};

/// How the K patches fed to the fusion model are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectionMode {
    /// 2D compression, then attention top-K.
    Tsps,
    /// Attention top-K over the uncompressed bag.
    AttentionOnly,
    /// 2D compression, then a seeded random K.
    CompressOnly,
    /// Seeded random K from the uncompressed bag.
    Random,
    /// The first K patches in bag order.
    PosK,
    /// Raster-run compression, then a seeded random K.
    OneDim,
}

impl SelectionMode {
    pub const ALL: [SelectionMode; 6] = [
        SelectionMode::Tsps,
        SelectionMode::AttentionOnly,
        SelectionMode::CompressOnly,
        SelectionMode::Random,
        SelectionMode::PosK,
        SelectionMode::OneDim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::Tsps => "tsps",
            SelectionMode::AttentionOnly => "attention-only",
            SelectionMode::CompressOnly => "compress-only",
            SelectionMode::Random => "random",
            SelectionMode::PosK => "pos-k",
            SelectionMode::OneDim => "1dcom",
        }
    }

    /// Whether a trained selector is needed to score patches.
    pub fn uses_selector(self) -> bool {
        matches!(self, SelectionMode::Tsps | SelectionMode::AttentionOnly)
    }

    /// Whether the selector (if any) is trained on 2D-compressed bags.
    pub fn compresses(self) -> bool {
        matches!(self, SelectionMode::Tsps | SelectionMode::CompressOnly)
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SelectionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownVariant(format!("selection mode {s:?}")))
    }
}

/// Stable per-bag seed so random selections do not depend on bag order.
pub fn bag_seed(seed: u64, patient_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.rotate_left(17)
}

fn random_k(candidates: &[usize], k: usize, seed: u64) -> Vec<usize> {
    if k >= candidates.len() {
        return candidates.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-bag record of both selection stages. Index lists refer to the original bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagSelection {
    pub patient_id: String,
    pub total: usize,
    pub compressed: Vec<usize>,
    pub selected: Vec<usize>,
    pub windows: Vec<WindowSummary>,
    /// Attention weights over `compressed`, when a selector was used.
    pub scores: Vec<f64>,
}

impl BagSelection {
    pub fn removal_rate(&self) -> f64 {
        1.0 - self.compressed.len() as f64 / self.total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectionSettings {
    pub mode: SelectionMode,
    pub window: i32,
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SelectionSettings {
    fn default() -> Self {
        SelectionSettings {
            mode: SelectionMode::Tsps,
            window: DEFAULT_WINDOW,
            top_k: DEFAULT_TOP_K,
            seed: 0,
        }
    }
}

/// First stage only: the candidate pool a selector is trained and scored on.
pub fn candidate_pool(bag: &PatchBag, settings: &SelectionSettings) -> (Vec<usize>, Vec<WindowSummary>) {
    match settings.mode {
        SelectionMode::Tsps | SelectionMode::CompressOnly => {
            let c = two_dim_compress(bag, settings.window);
            (c.kept, c.windows)
        }
        SelectionMode::OneDim => {
            let c = one_dim_compress(bag, settings.window);
            (c.kept, c.windows)
        }
        SelectionMode::AttentionOnly | SelectionMode::Random | SelectionMode::PosK => ((0..bag.len()).collect(), Vec::new()),
    }
}

/// Runs both stages for one bag.
pub fn select_patches(
    bag: &PatchBag,
    settings: &SelectionSettings,
    selector: Option<&SelectorParams>,
) -> Result<BagSelection> {
    let (compressed, windows) = candidate_pool(bag, settings);
    let k = settings.top_k.max(1);
    let mut scores = Vec::new();
    let selected = if settings.mode.uses_selector() {
        let selector = selector.ok_or_else(|| Error::Config(format!("mode {} needs a selector", settings.mode.name())))?;
        let pool = bag.embeddings.select_rows(&compressed);
        let raw = attention_logits(&pool, selector)?;
        scores = crate::numeric::Matrix::row_vector(&raw).softmax_rows().into_vec();
        top_k_select(&raw, k).into_iter().map(|i| compressed[i]).collect()
    } else if settings.mode == SelectionMode::PosK {
        compressed.iter().copied().take(k).collect()
    } else {
        random_k(&compressed, k, bag_seed(settings.seed, &bag.patient_id))
    };
    Ok(BagSelection {
        patient_id: bag.patient_id.clone(),
        total: bag.len(),
        compressed,
        selected,
        windows,
        scores,
    })
}

/// Aggregate over a set of bags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionReport {
    pub window: i32,
    pub top_k: usize,
    pub bags: Vec<BagSelection>,
}

impl SelectionReport {
    pub fn total(&self) -> usize {
        self.bags.iter().map(|b| b.total).sum()
    }

    pub fn compressed(&self) -> usize {
        self.bags.iter().map(|b| b.compressed.len()).sum()
    }

    /// Patches removed by compression over patches seen, pooled across bags.
    pub fn removal_rate(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        1.0 - self.compressed() as f64 / total as f64
    }

    fn theta_histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let thetas: Vec<f64> = self.bags.iter().flat_map(|b| b.windows.iter().filter_map(|w| w.theta)).collect();
        if thetas.is_empty() {
            return Vec::new();
        }
        let lo = thetas.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = thetas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = ((hi - lo) / bins as f64).max(f64::EPSILON);
        let mut counts = vec![0; bins];
        for t in thetas {
            counts[(((t - lo) / width) as usize).min(bins - 1)] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let bags: Vec<_> = self
            .bags
            .iter()
            .map(|b| {
                serde_json::json!({
                    "patient_id": b.patient_id,
                    "total": b.total,
                    "compressed": b.compressed.len(),
                    "selected": b.selected.len(),
                    "removal_rate": b.removal_rate(),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "window": self.window,
            "top_k": self.top_k,
            "total": self.total(),
            "compressed": self.compressed(),
            "removal_rate": self.removal_rate(),
            "bags": bags,
        });
        serde_json::to_string_pretty(&doc).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "window {}  top_k {}", self.window, self.top_k);
        let _ = writeln!(out, "{:<12} {:>8} {:>8} {:>8} {:>9}", "patient", "N", "N'", "K", "removed");
        for b in &self.bags {
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8} {:>8.2}%",
                b.patient_id,
                b.total,
                b.compressed.len(),
                b.selected.len(),
                100.0 * b.removal_rate()
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8.2}%",
            "all",
            self.total(),
            self.compressed(),
            self.bags.iter().map(|b| b.selected.len()).sum::<usize>(),
            100.0 * self.removal_rate()
        );
        let hist = self.theta_histogram(10);
        if !hist.is_empty() {
            let _ = writeln!(out, "\nwindow threshold histogram");
            for (lo, hi, c) in hist {
                let _ = writeln!(out, "[{lo:>8.4}, {hi:>8.4})  {c}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};

    fn spec(dup_ratio: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_patients: 10,
            dup_ratio,
            seed: 17,
            ..SyntheticSpec::default()
        }
    }

    fn report(dup_ratio: f64, mode: SelectionMode) -> SelectionReport {
        let ds = generate(&spec(dup_ratio)).unwrap();
        let settings = SelectionSettings {
            mode,
            ..SelectionSettings::default()
        };
        SelectionReport {
            window: 8,
            top_k: 64,
            bags: ds.bags.iter().map(|b| select_patches(b, &settings, None).unwrap()).collect(),
        }
    }

    #[test]
    fn removal_tracks_planted_redundancy() {
        let high = report(0.6, SelectionMode::CompressOnly).removal_rate();
        assert!((0.55..=0.65).contains(&high), "{high}");
        let none = report(0.0, SelectionMode::CompressOnly).removal_rate();
        assert!(none <= 0.05, "{none}");
    }

    #[test]
    fn stage_sizes_are_ordered() {
        for mode in [SelectionMode::CompressOnly, SelectionMode::Random, SelectionMode::PosK, SelectionMode::OneDim] {
            for b in report(0.6, mode).bags {
                assert_eq!(b.selected.len(), b.compressed.len().min(64));
                assert!(b.compressed.len() <= b.total);
                assert!(b.compressed.windows(2).all(|w| w[0] < w[1]));
                assert!(b.selected.windows(2).all(|w| w[0] < w[1]));
                assert!(b.selected.iter().all(|i| b.compressed.binary_search(i).is_ok()));
            }
        }
    }

    #[test]
    fn pos_k_takes_the_prefix() {
        for b in report(0.3, SelectionMode::PosK).bags {
            assert_eq!(b.selected, (0..64.min(b.total)).collect::<Vec<_>>());
        }
    }

    #[test]
    fn selector_modes_need_a_selector() {
        let ds = generate(&spec(0.3)).unwrap();
        assert!(select_patches(&ds.bags[0], &SelectionSettings::default(), None).is_err());
        let sel = SelectorParams::new(64, 8, 3, 1);
        let out = select_patches(&ds.bags[0], &SelectionSettings::default(), Some(&sel)).unwrap();
        assert_eq!(out.scores.len(), out.compressed.len());
        assert!((out.scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in SelectionMode::ALL {
            assert_eq!(m.name().parse::<SelectionMode>().unwrap(), m);
        }
        assert!(matches!("bogus".parse::<SelectionMode>(), Err(Error::UnknownVariant(_))));
    }

    #[test]
    fn report_text_lists_every_bag() {
        let r = report(0.6, SelectionMode::CompressOnly);
        let text = r.to_text();
        assert!(text.contains("p0000"));
        assert!(text.contains("threshold histogram"));
        assert_eq!(text.lines().filter(|l| l.starts_with("p0")).count(), r.bags.len());
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["bags"].as_array().unwrap().len(), r.bags.len());
        assert_eq!(json["total"].as_u64().unwrap() as usize, r.total());
    }
}
