//! Parameter-free redundancy removal inside spatial windows.
//!
//! Each slide is cut into disjoint `w x w` windows of grid cells. Inside a
//! window the threshold is the mean cosine similarity over all unordered
//! member pairs; pairs are then scanned in order and, whenever both members
//! are still live and their similarity exceeds the threshold, the later one
//! is dropped.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{PatchBag, PatchCoord};
use crate::numeric::{dot, Matrix};

pub const DEFAULT_WINDOW: i32 = 8;
/// Rows with a smaller L2 norm are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub rows: Matrix,
    pub degenerate: Vec<bool>,
}

pub fn normalize_embeddings(x: &Matrix) -> Normalized {
    let mut rows = x.clone();
    let mut degenerate = vec![false; x.rows()];
    for (i, flag) in degenerate.iter_mut().enumerate() {
        let row = rows.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            row.fill(0.0);
            *flag = true;
        } else {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Normalized { rows, degenerate }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowIndex {
    pub slide: u16,
    pub row: i32,
    pub col: i32,
    /// Bag indices, ascending.
    pub members: Vec<usize>,
}

/// Disjoint windows keyed by `(slide, floor(gy / w), floor(gx / w))`, in key order.
pub fn window_partition(coords: &[PatchCoord], w: i32) -> Vec<WindowIndex> {
    assert!(w >= 1, "window size must be at least 1");
    let mut windows: BTreeMap<(u16, i32, i32), Vec<usize>> = BTreeMap::new();
    for (i, c) in coords.iter().enumerate() {
        let key = (c.slide, c.gy.div_euclid(w), c.gx.div_euclid(w));
        windows.entry(key).or_default().push(i);
    }
    windows
        .into_iter()
        .map(|((slide, row, col), members)| WindowIndex { slide, row, col, members })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowOutcome {
    /// `None` for single-member windows, which have no pairs.
    pub theta: Option<f64>,
    pub kept: Vec<usize>,
}

/// Applies the threshold rule to one window. `members` index rows of `normalized`
/// and are scanned in the order given.
pub fn compress_window(members: &[usize], normalized: &Matrix) -> WindowOutcome {
    let n = members.len();
    if n < 2 {
        return WindowOutcome {
            theta: None,
            kept: members.to_vec(),
        };
    }
    let mut sim = vec![0.0; n * n];
    let (mut total, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
    for a in 0..n {
        for b in a + 1..n {
            let s = dot(normalized.row(members[a]), normalized.row(members[b]));
            sim[a * n + b] = s;
            total += s;
            lo = lo.min(s);
            hi = hi.max(s);
        }
    }
    // the mean can round outside [min, max]; clamping keeps a uniform window intact
    let theta = (total / (n * (n - 1) / 2) as f64).clamp(lo, hi);
    let mut live = vec![true; n];
    for a in 0..n {
        for b in a + 1..n {
            if live[a] && live[b] && sim[a * n + b] > theta {
                live[b] = false;
            }
        }
    }
    WindowOutcome {
        theta: Some(theta),
        kept: members.iter().zip(&live).filter(|(_, &l)| l).map(|(&m, _)| m).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSummary {
    pub slide: u16,
    pub row: i32,
    pub col: i32,
    pub size: usize,
    pub removed: usize,
    pub theta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Compression {
    /// Surviving bag indices, ascending.
    pub kept: Vec<usize>,
    pub windows: Vec<WindowSummary>,
    pub degenerate_rows: usize,
}

impl Compression {
    pub fn removed(&self) -> usize {
        self.windows.iter().map(|w| w.removed).sum()
    }
}

fn run_groups(groups: Vec<WindowIndex>, normalized: &Normalized) -> Compression {
    let outcomes: Vec<WindowOutcome> = groups
        .par_iter()
        .map(|g| compress_window(&g.members, &normalized.rows))
        .collect();
    let mut kept = Vec::new();
    let mut windows = Vec::with_capacity(groups.len());
    for (g, out) in groups.iter().zip(outcomes) {
        windows.push(WindowSummary {
            slide: g.slide,
            row: g.row,
            col: g.col,
            size: g.members.len(),
            removed: g.members.len() - out.kept.len(),
            theta: out.theta,
        });
        kept.extend(out.kept);
    }
    kept.sort_unstable();
    Compression {
        kept,
        windows,
        degenerate_rows: normalized.degenerate.iter().filter(|&&d| d).count(),
    }
}

/// Window-wise compression over 2D grid windows.
pub fn two_dim_compress(bag: &PatchBag, w: i32) -> Compression {
    let normalized = normalize_embeddings(&bag.embeddings);
    run_groups(window_partition(&bag.coords, w), &normalized)
}

/// The same rule over runs of `w²` consecutive patches in bag order, ignoring
/// the 2D layout. Runs restart at slide boundaries.
pub fn one_dim_compress(bag: &PatchBag, w: i32) -> Compression {
    assert!(w >= 1, "window size must be at least 1");
    let run = (w * w) as usize;
    let normalized = normalize_embeddings(&bag.embeddings);
    let mut groups: Vec<WindowIndex> = Vec::new();
    let mut start = 0;
    while start < bag.len() {
        let slide = bag.coords[start].slide;
        let mut end = start;
        while end < bag.len() && end - start < run && bag.coords[end].slide == slide {
            end += 1;
        }
        let row = groups.iter().filter(|g| g.slide == slide).count() as i32;
        groups.push(WindowIndex {
            slide,
            row,
            col: 0,
            members: (start..end).collect(),
        });
        start = end;
    }
    run_groups(groups, &normalized)
}
