//! Browser bindings for three interactive views: window compression over a
//! synthetic slide, the spatial KNN patch graph, and focal loss curves.
//!
//! Every entry point returns a JSON string; errors come back as messages.

use emmpd::data::synth::{generate, SyntheticSpec};
use emmpd::data::{PatchCoord, TaskMode};
use emmpd::fusion::knn_graph;
use emmpd::select::two_dim_compress;
use emmpd::train::focal::focal_from_prob;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

const MAX_GRID_SIDE: i32 = 64;
const MAX_CURVE_SAMPLES: u32 = 2000;

/// Compresses one synthetic slide with window side `w` and reports which
/// patches survive.
#[wasm_bindgen]
pub fn compress_slide(seed: u32, dup_ratio: f64, w: i32) -> Result<String, String> {
    if !(1..=16).contains(&w) {
        return Err(format!("window side must lie in 1..=16, got {w}"));
    }
    let spec = SyntheticSpec {
        num_patients: 1,
        slides_per_patient: (1, 1),
        patches_per_slide: (120, 160),
        d: 32,
        classes: 2,
        dup_ratio,
        task_mode: TaskMode::Multiclass,
        seed: u64::from(seed),
        ..SyntheticSpec::default()
    };
    let data = generate(&spec).map_err(|e| e.to_string())?;
    let bag = &data.bags[0];
    let compression = two_dim_compress(bag, w);
    let mut kept = vec![false; bag.len()];
    for &i in &compression.kept {
        kept[i] = true;
    }
    let side = bag.coords.iter().map(|c| c.gx.max(c.gy) + 1).max().unwrap_or(0);
    let patches: Vec<_> = bag
        .coords
        .iter()
        .zip(&kept)
        .map(|(c, &k)| json!({ "x": c.gx, "y": c.gy, "kept": k }))
        .collect();
    let windows: Vec<_> = compression
        .windows
        .iter()
        .map(|s| json!({ "row": s.row, "col": s.col, "size": s.size, "removed": s.removed, "theta": s.theta }))
        .collect();
    let total = bag.len();
    Ok(json!({
        "side": side,
        "w": w,
        "total": total,
        "kept": compression.kept.len(),
        "removal_rate": 1.0 - compression.kept.len() as f64 / total as f64,
        "patches": patches,
        "windows": windows,
    })
    .to_string())
}

/// Places `n` patches at distinct random cells of a `side` x `side` grid and
/// links each to its `k` nearest neighbours.
#[wasm_bindgen]
pub fn patch_graph(seed: u32, n: u32, side: i32, k: u32) -> Result<String, String> {
    if !(1..=MAX_GRID_SIDE).contains(&side) {
        return Err(format!("grid side must lie in 1..={MAX_GRID_SIDE}, got {side}"));
    }
    let cells = (side * side) as usize;
    let n = n as usize;
    if n == 0 || n > cells {
        return Err(format!("need between 1 and {cells} patches, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(seed));
    let coords: Vec<PatchCoord> = sample(&mut rng, cells, n)
        .into_iter()
        .map(|c| PatchCoord::new(0, c as i32 % side, c as i32 / side))
        .collect();
    let ids: Vec<usize> = (0..n).collect();
    let graph = knn_graph(&coords, &ids, k as usize);
    let nodes: Vec<_> = coords
        .iter()
        .zip(&graph.degree)
        .map(|(c, d)| json!({ "x": c.gx, "y": c.gy, "degree": d }))
        .collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if graph.adjacency.row(i)[j] > 0.0 {
                edges.push([i, j]);
            }
        }
    }
    Ok(json!({ "side": side, "k": k, "nodes": nodes, "edges": edges }).to_string())
}

/// Loss on a positive label as a function of its predicted probability, one
/// curve per focusing value.
#[wasm_bindgen]
pub fn focal_curves(alpha: f64, gammas: Vec<f64>, samples: u32) -> Result<String, String> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(format!("alpha must lie in [0, 1], got {alpha}"));
    }
    if let Some(g) = gammas.iter().find(|g| !g.is_finite() || **g < 0.0) {
        return Err(format!("gamma must be finite and non-negative, got {g}"));
    }
    if !(2..=MAX_CURVE_SAMPLES).contains(&samples) {
        return Err(format!("samples must lie in 2..={MAX_CURVE_SAMPLES}, got {samples}"));
    }
    let p: Vec<f64> = (0..samples)
        .map(|i| 0.01 + 0.98 * f64::from(i) / f64::from(samples - 1))
        .collect();
    let curves: Vec<_> = gammas
        .iter()
        .map(|&gamma| {
            let loss: Vec<f64> = p.iter().map(|&q| focal_from_prob(q, 1.0, alpha, gamma)).collect();
            json!({ "gamma": gamma, "loss": loss })
        })
        .collect();
    Ok(json!({ "alpha": alpha, "p": p, "curves": curves }).to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn parse(s: Result<String, String>) -> Value {
        serde_json::from_str(&s.expect("ok")).expect("valid json")
    }

    #[test]
    fn compression_counts_agree() {
        let v = parse(compress_slide(3, 0.6, 8));
        let patches = v["patches"].as_array().unwrap();
        let kept = patches.iter().filter(|p| p["kept"].as_bool().unwrap()).count();
        assert_eq!(kept as u64, v["kept"].as_u64().unwrap());
        assert_eq!(patches.len() as u64, v["total"].as_u64().unwrap());
        let removed: u64 = v["windows"].as_array().unwrap().iter().map(|w| w["removed"].as_u64().unwrap()).sum();
        assert_eq!(removed + v["kept"].as_u64().unwrap(), v["total"].as_u64().unwrap());
        assert!(v["removal_rate"].as_f64().unwrap() > 0.3);
    }

    #[test]
    fn unit_window_keeps_everything() {
        let v = parse(compress_slide(3, 0.6, 1));
        assert_eq!(v["kept"], v["total"]);
        assert!(compress_slide(3, 0.6, 0).is_err());
        assert!(compress_slide(3, 1.5, 8).is_err());
    }

    #[test]
    fn graph_is_symmetric_with_consistent_degrees() {
        let v = parse(patch_graph(5, 30, 10, 4));
        let nodes = v["nodes"].as_array().unwrap();
        let mut counted = vec![1.0; nodes.len()];
        for e in v["edges"].as_array().unwrap() {
            let (i, j) = (e[0].as_u64().unwrap() as usize, e[1].as_u64().unwrap() as usize);
            assert!(i < j);
            counted[i] += 1.0;
            counted[j] += 1.0;
        }
        for (node, c) in nodes.iter().zip(counted) {
            assert_eq!(node["degree"].as_f64().unwrap(), c);
            assert!(c >= 5.0);
        }
        assert!(patch_graph(5, 101, 10, 4).is_err());
        assert!(patch_graph(5, 0, 10, 4).is_err());
    }

    #[test]
    fn focal_curves_shrink_with_gamma() {
        let v = parse(focal_curves(0.25, vec![0.0, 2.0, 5.0], 50));
        let curves = v["curves"].as_array().unwrap();
        let at = |c: usize, i: usize| curves[c]["loss"][i].as_f64().unwrap();
        for i in 0..50 {
            assert!(at(0, i) >= at(1, i) && at(1, i) >= at(2, i));
        }
        assert!(at(0, 0) > at(0, 49));
        assert!(focal_curves(0.25, vec![-1.0], 50).is_err());
        assert!(focal_curves(1.5, vec![2.0], 50).is_err());
    }
}
