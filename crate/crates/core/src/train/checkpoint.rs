//! `EMPC` checkpoint files: magic, version, then named float64 blocks until
//! end of file. Settings travel in `meta.*` blocks so a checkpoint is
//! self-describing.

use std::fs;
use std::path::Path;

use crate::data::codec::{Reader, Writer};
use crate::data::TaskMode;
use crate::error::{Error, Result};
use crate::fusion::{Architecture, FusionKind, FusionModel, GraphPlacement};
use crate::numeric::{Matrix, ParamSet};
use crate::select::{SelectionMode, SelectionSettings, SelectorParams};
use crate::train::trainer::Pipeline;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"EMPC";
pub const CHECKPOINT_VERSION: u32 = 1;

const SELECTOR_PREFIX: &str = "selector.";

fn fusion_code(f: FusionKind) -> f64 {
    match f {
        FusionKind::Hybrid => 0.0,
        FusionKind::Cat => 1.0,
        FusionKind::Add => 2.0,
    }
}

fn write_block(w: &mut Writer, name: &str, m: &Matrix) {
    w.u32(name.len() as u32);
    w.bytes(name.as_bytes());
    w.u32(m.rows() as u32);
    w.u32(m.cols() as u32);
    for &v in m.as_slice() {
        w.f64(v);
    }
}

pub fn checkpoint_bytes(p: &Pipeline) -> Vec<u8> {
    let model = &p.model;
    let arch = &model.arch;
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let mode_index = SelectionMode::ALL.iter().position(|&m| m == p.settings.mode).unwrap_or(0);
    let seed = p.settings.seed;
    let meta = [
        ("meta.shape", vec![model.d as f64, model.classes as f64, model.prompt_rows() as f64]),
        (
            "meta.arch",
            vec![
                flag(arch.use_gcn),
                flag(arch.use_text),
                fusion_code(arch.fusion),
                flag(arch.placement == GraphPlacement::Before),
                arch.heads as f64,
                arch.k_nn as f64,
            ],
        ),
        (
            "meta.selection",
            vec![
                mode_index as f64,
                f64::from(p.settings.window),
                p.settings.top_k as f64,
                (seed >> 32) as f64,
                (seed & 0xffff_ffff) as f64,
            ],
        ),
        ("meta.task", vec![flag(p.task_mode == TaskMode::Multiclass)]),
    ];

    let mut w = Writer::with_capacity(64 + 8 * (model.params.num_values() + model.text_frozen.len()));
    w.bytes(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    for (name, values) in meta {
        write_block(&mut w, name, &Matrix::row_vector(&values));
    }
    write_block(&mut w, "text.frozen", &model.text_frozen);
    if let Some(s) = &p.selector {
        for param in s.params.iter() {
            write_block(&mut w, &param.name, &param.value);
        }
    }
    for param in model.params.iter() {
        write_block(&mut w, &param.name, &param.value);
    }
    w.finish()
}

pub fn save_checkpoint(p: &Pipeline, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(p)).map_err(|e| Error::io(path, e))
}

fn meta<'a>(blocks: &'a [(String, Matrix)], name: &str, len: usize) -> Result<&'a [f64]> {
    let m = blocks
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Checkpoint(format!("missing block {name}")))?;
    if m.len() != len {
        return Err(Error::Checkpoint(format!("block {name} holds {} values, expected {len}", m.len())));
    }
    let values = m.as_slice();
    if values.iter().any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0)) {
        return Err(Error::Checkpoint(format!("block {name} must hold non-negative integers")));
    }
    Ok(values)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<Pipeline> {
    let mut r = Reader::new(bytes, path);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let mut blocks: Vec<(String, Matrix)> = Vec::new();
    while !r.is_at_end() {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take_vec(len)?)
            .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let count = rows
            .checked_mul(cols)
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| Error::Checkpoint(format!("block {name} is too large")))?;
        r.require(count * 8)?;
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        if blocks.iter().any(|(n, _)| *n == name) {
            return Err(Error::Checkpoint(format!("duplicate block {name}")));
        }
        blocks.push((name, Matrix::from_vec(rows, cols, values)?));
    }

    let shape = meta(&blocks, "meta.shape", 3)?;
    let (d, classes, t) = (shape[0] as usize, shape[1] as usize, shape[2] as usize);
    let a = meta(&blocks, "meta.arch", 6)?;
    let arch = Architecture {
        use_gcn: a[0] == 1.0,
        use_text: a[1] == 1.0,
        fusion: match a[2] as u32 {
            0 => FusionKind::Hybrid,
            1 => FusionKind::Cat,
            2 => FusionKind::Add,
            other => return Err(Error::Checkpoint(format!("unknown fusion code {other}"))),
        },
        placement: if a[3] == 1.0 { GraphPlacement::Before } else { GraphPlacement::After },
        heads: a[4] as usize,
        k_nn: a[5] as usize,
    };
    let s = meta(&blocks, "meta.selection", 5)?;
    let mode = *SelectionMode::ALL
        .get(s[0] as usize)
        .ok_or_else(|| Error::Checkpoint(format!("unknown selection code {}", s[0])))?;
    let settings = SelectionSettings {
        mode,
        window: s[1] as i32,
        top_k: s[2] as usize,
        seed: ((s[3] as u64) << 32) | s[4] as u64,
    };
    let task_mode = if meta(&blocks, "meta.task", 1)?[0] == 1.0 {
        TaskMode::Multiclass
    } else {
        TaskMode::Multilabel
    };

    let mut text_frozen = None;
    let mut selector = ParamSet::new();
    let mut fusion = ParamSet::new();
    for (name, m) in blocks {
        if name.starts_with("meta.") {
            continue;
        } else if name == "text.frozen" {
            text_frozen = Some(m);
        } else if name.starts_with(SELECTOR_PREFIX) {
            selector.add(name, m);
        } else {
            fusion.add(name, m);
        }
    }
    let text_frozen = text_frozen.ok_or_else(|| Error::Checkpoint("missing block text.frozen".into()))?;
    if text_frozen.shape() != (classes, d) {
        return Err(Error::Checkpoint(format!(
            "text.frozen is {:?}, meta.shape says {classes}x{d}",
            text_frozen.shape()
        )));
    }
    let model = FusionModel::from_params(arch, text_frozen, t, &fusion)?;
    let selector = if selector.is_empty() {
        None
    } else {
        let s = SelectorParams::from_params(selector)?;
        if s.dim() != d {
            return Err(Error::Checkpoint(format!("selector width {} differs from d = {d}", s.dim())));
        }
        Some(s)
    };
    if mode.uses_selector() && selector.is_none() {
        return Err(Error::Checkpoint(format!("selection mode {} needs selector blocks", mode.name())));
    }
    Ok(Pipeline {
        selector,
        model,
        settings,
        task_mode,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Pipeline> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

/// Fails unless the checkpoint was trained for this dataset's d and C.
pub fn check_compatible(p: &Pipeline, d: usize, classes: usize) -> Result<()> {
    if p.model.d != d {
        return Err(Error::DimMismatch {
            what: "checkpoint d vs manifest d",
            expected: d,
            found: p.model.d,
        });
    }
    if p.model.classes != classes {
        return Err(Error::DimMismatch {
            what: "checkpoint C vs manifest C",
            expected: classes,
            found: p.model.classes,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SyntheticSpec};
    use crate::train::config::TrainConfig;
    use crate::train::trainer::{train, Dataset};

    fn trained(config: TrainConfig) -> (Dataset, Pipeline) {
        let spec = SyntheticSpec {
            num_patients: 12,
            slides_per_patient: (1, 2),
            patches_per_slide: (30, 40),
            d: 40,
            classes: 2,
            seed: 9,
            ..SyntheticSpec::default()
        };
        let data = Dataset::from_synthetic(&generate(&spec).unwrap(), Some(2), 9);
        let base = TrainConfig {
            epochs: 2,
            top_k: 10,
            heads: 2,
            selector_epochs: 1,
            selector_hidden: 4,
            seed: u64::MAX - 5,
            ..config
        };
        let p = train(&data, &base).unwrap().pipeline;
        (data, p)
    }

    #[test]
    fn round_trip_is_exact() {
        for config in [
            TrainConfig::default(),
            TrainConfig { fusion: FusionKind::Cat, graph_placement: GraphPlacement::Before, ..TrainConfig::default() },
            TrainConfig { use_gcn: false, use_text: false, selection: SelectionMode::Random, ..TrainConfig::default() },
        ] {
            let (data, p) = trained(config);
            let bytes = checkpoint_bytes(&p);
            assert_eq!(&bytes[..4], b"EMPC");
            let back = parse_checkpoint(&bytes, Path::new("mem")).unwrap();
            assert_eq!(back, p);
            assert_eq!(checkpoint_bytes(&back), bytes);
            for bag in &data.test {
                assert_eq!(back.logits(bag).unwrap(), p.logits(bag).unwrap());
            }
        }
    }

    #[test]
    fn first_block_layout() {
        let (_, p) = trained(TrainConfig::default());
        let bytes = checkpoint_bytes(&p);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), CHECKPOINT_VERSION);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 10);
        assert_eq!(&bytes[12..22], b"meta.shape");
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[26..30].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[30..38].try_into().unwrap()), 40.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_, p) = trained(TrainConfig::default());
        let bytes = checkpoint_bytes(&p);
        let path = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad, path), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(parse_checkpoint(&bad, path), Err(Error::Version { .. })));
        assert!(matches!(parse_checkpoint(&bytes[..bytes.len() - 3], path), Err(Error::Truncated { .. })));
        assert!(matches!(check_compatible(&p, 41, 2), Err(Error::DimMismatch { .. })));
        assert!(matches!(check_compatible(&p, 40, 3), Err(Error::DimMismatch { .. })));
        check_compatible(&p, 40, 2).unwrap();
    }
}
