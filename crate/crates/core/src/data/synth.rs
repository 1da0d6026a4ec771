//! Seeded synthetic datasets with planted class clusters and planted
//! spatial redundancy.
//!
//! Layout of the embedding space: the first `C * cluster²` coordinates are
//! split into one block per class; the rest hold tissue "noise". Within each
//! 8x8 generation window, distinct original patches never share a
//! coordinate, so their cosine similarity is exactly zero. A near-duplicate
//! copies a neighbour in the same window and perturbs it on the same support
//! by at most 1% of its norm. Redundancy therefore shows up only where it was
//! planted.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::bag::{write_bag, PatchBag, PatchCoord};
use crate::data::manifest::{BagEntry, DatasetManifest, Splits, TaskMode};
use crate::data::text_bank::write_text_bank;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Windows used when planting duplicates; matches the default compression window.
pub const GENERATION_WINDOW: i32 = 8;
const NOISE_SUPPORT: usize = 2;
const TARGET_WINDOW_FILL: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_patients: usize,
    pub slides_per_patient: (usize, usize),
    pub patches_per_slide: (usize, usize),
    pub d: usize,
    pub classes: usize,
    /// Fraction of patches that are near-duplicates of a neighbour.
    pub dup_ratio: f64,
    /// Magnitude of the class-block coordinate on signature patches.
    pub signal: f64,
    /// Standard deviation of tissue coordinates.
    pub noise: f64,
    /// Per-class probability of being present (multilabel).
    pub prevalence: f64,
    /// Side of the square cluster planted for each present class.
    pub cluster: usize,
    pub task_mode: TaskMode,
    pub prompt_rows: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_patients: 200,
            slides_per_patient: (2, 4),
            patches_per_slide: (120, 200),
            d: 64,
            classes: 3,
            dup_ratio: 0.6,
            signal: 2.0,
            noise: 1.0,
            prevalence: 0.35,
            cluster: 3,
            task_mode: TaskMode::Multilabel,
            prompt_rows: 4,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.dup_ratio) || self.dup_ratio.is_nan() {
            return bad(format!("dup ratio must lie in [0, 1], got {}", self.dup_ratio));
        }
        if self.dup_ratio >= 1.0 {
            return bad("dup ratio 1 leaves no original patch to copy".into());
        }
        if self.num_patients == 0 || self.slides_per_patient.0 == 0 || self.patches_per_slide.0 == 0 {
            return bad("patient, slide and patch counts must be at least 1".into());
        }
        if self.slides_per_patient.0 > self.slides_per_patient.1 || self.patches_per_slide.0 > self.patches_per_slide.1 {
            return bad("count ranges must be ordered (min <= max)".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.cluster == 0 {
            return bad("cluster side must be at least 1".into());
        }
        if self.noise_dims() < 2 * NOISE_SUPPORT {
            return bad(format!(
                "d = {} leaves {} tissue coordinates after {} class blocks of {}; need at least {}",
                self.d,
                self.noise_dims() as i64,
                self.classes,
                self.block(),
                2 * NOISE_SUPPORT
            ));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return bad(format!("prevalence must lie in [0, 1], got {}", self.prevalence));
        }
        Ok(())
    }

    fn block(&self) -> usize {
        self.cluster * self.cluster
    }

    fn noise_dims(&self) -> usize {
        self.d.saturating_sub(self.classes * self.block())
    }

    /// Slide grid side: a multiple of the generation window sized so that the
    /// busiest slide's originals use about 70% of the per-window capacity.
    pub fn grid_side(&self) -> i32 {
        let capacity = (self.noise_dims() / NOISE_SUPPORT) as f64;
        let originals = (self.patches_per_slide.1 as f64 * (1.0 - self.dup_ratio)).ceil();
        let windows = (originals / (capacity * TARGET_WINDOW_FILL)).ceil().max(1.0);
        let side = windows.sqrt().ceil() as i32;
        side * GENERATION_WINDOW
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub bags: Vec<PatchBag>,
    pub text_frozen: Matrix,
    /// Planted near-duplicates per bag, aligned with `bags`.
    pub planted_duplicates: Vec<usize>,
}

impl SyntheticDataset {
    pub fn bag(&self, patient_id: &str) -> Option<&PatchBag> {
        self.bags.iter().find(|b| b.patient_id == patient_id)
    }
}

struct Patch {
    cell: (i32, i32),
    values: Vec<(usize, f64)>,
}

fn window_of(cell: (i32, i32)) -> (i32, i32) {
    (cell.0.div_euclid(GENERATION_WINDOW), cell.1.div_euclid(GENERATION_WINDOW))
}

struct SlideBuilder<'a> {
    spec: &'a SyntheticSpec,
    side: i32,
    patches: Vec<Patch>,
    occupied: HashMap<(i32, i32), usize>,
    free_noise: HashMap<(i32, i32), Vec<usize>>,
}

impl<'a> SlideBuilder<'a> {
    fn new(spec: &'a SyntheticSpec, side: i32) -> Self {
        SlideBuilder {
            spec,
            side,
            patches: Vec::new(),
            occupied: HashMap::new(),
            free_noise: HashMap::new(),
        }
    }

    fn noise_pool(&mut self, window: (i32, i32), rng: &mut ChaCha8Rng) -> &mut Vec<usize> {
        let first = self.spec.classes * self.spec.block();
        let d = self.spec.d;
        self.free_noise.entry(window).or_insert_with(|| {
            let mut pool: Vec<usize> = (first..d).collect();
            pool.shuffle(rng);
            pool
        })
    }

    fn take_noise(&mut self, cell: (i32, i32), count: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
        let pool = self.noise_pool(window_of(cell), rng);
        if pool.len() < count {
            return None;
        }
        Some(pool.split_off(pool.len() - count))
    }

    fn push(&mut self, patch: Patch) {
        self.occupied.insert(patch.cell, self.patches.len());
        self.patches.push(patch);
    }

    fn plant_cluster(&mut self, class: usize, rng: &mut ChaCha8Rng) -> bool {
        let side = self.spec.cluster as i32;
        for _ in 0..200 {
            let x0 = rng.random_range(0..=self.side - side);
            let y0 = rng.random_range(0..=self.side - side);
            let cells: Vec<_> = (0..side)
                .flat_map(|dy| (0..side).map(move |dx| (x0 + dx, y0 + dy)))
                .collect();
            if cells.iter().any(|c| self.occupied.contains_key(c)) {
                continue;
            }
            let mut demand: Vec<((i32, i32), usize)> = Vec::new();
            for &c in &cells {
                match demand.iter_mut().find(|(w, _)| *w == window_of(c)) {
                    Some((_, n)) => *n += 1,
                    None => demand.push((window_of(c), 1)),
                }
            }
            if demand.into_iter().any(|(w, n)| self.noise_pool(w, rng).len() < n) {
                continue;
            }
            for (j, cell) in cells.into_iter().enumerate() {
                let tissue = self.take_noise(cell, 1, rng).expect("checked above");
                let strength = self.spec.signal * rng.random_range(0.75..1.25);
                let mut values = vec![(class * self.spec.block() + j, strength)];
                for k in tissue {
                    values.push((k, self.spec.noise * rng.sample::<f64, _>(StandardNormal)));
                }
                self.push(Patch { cell, values });
            }
            return true;
        }
        false
    }

    fn fill_originals(&mut self, target: usize, rng: &mut ChaCha8Rng) {
        let mut cells: Vec<(i32, i32)> = (0..self.side)
            .flat_map(|y| (0..self.side).map(move |x| (x, y)))
            .collect();
        cells.shuffle(rng);
        for cell in cells {
            if self.patches.len() >= target {
                break;
            }
            if self.occupied.contains_key(&cell) {
                continue;
            }
            let Some(support) = self.take_noise(cell, NOISE_SUPPORT, rng) else {
                continue;
            };
            let values = support
                .into_iter()
                .map(|k| (k, self.spec.noise * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            self.push(Patch { cell, values });
        }
    }

    fn plant_duplicates(&mut self, count: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut planted = 0;
        let mut attempts = 0;
        while planted < count && attempts < 100 * count.max(1) {
            attempts += 1;
            let src = rng.random_range(0..self.patches.len());
            let cell = self.patches[src].cell;
            let window = window_of(cell);
            let free: Vec<(i32, i32)> = (-1..=1)
                .flat_map(|dy| (-1..=1).map(move |dx| (cell.0 + dx, cell.1 + dy)))
                .filter(|&c| {
                    c != cell
                        && (0..self.side).contains(&c.0)
                        && (0..self.side).contains(&c.1)
                        && window_of(c) == window
                        && !self.occupied.contains_key(&c)
                })
                .collect();
            let Some(&target) = free.choose(rng) else { continue };
            let source = &self.patches[src].values;
            let norm = source.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
            let bound = 0.01 * norm / (source.len() as f64).sqrt();
            let values = source
                .iter()
                .map(|&(k, v)| (k, v + bound * rng.random_range(-1.0..=1.0)))
                .collect::<Vec<_>>();
            self.push(Patch { cell: target, values });
            planted += 1;
        }
        planted
    }
}

/// Builds the whole dataset in memory.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let side = spec.grid_side();
    let d = spec.d;

    let text_frozen = {
        let mut m = Matrix::from_fn(spec.classes, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        for i in 0..m.rows() {
            let norm = m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            m.row_mut(i).iter_mut().for_each(|v| *v = f64::from((*v / norm) as f32));
        }
        m
    };

    let mut bags = Vec::with_capacity(spec.num_patients);
    let mut labels = Vec::with_capacity(spec.num_patients);
    let mut planted_duplicates = Vec::with_capacity(spec.num_patients);
    for p in 0..spec.num_patients {
        let label: Vec<u8> = match spec.task_mode {
            TaskMode::Multilabel => (0..spec.classes)
                .map(|_| u8::from(rng.random_bool(spec.prevalence)))
                .collect(),
            TaskMode::Multiclass => {
                let c = rng.random_range(0..spec.classes);
                (0..spec.classes).map(|i| u8::from(i == c)).collect()
            }
        };
        let slides = rng.random_range(spec.slides_per_patient.0..=spec.slides_per_patient.1);
        let affected: Vec<Option<usize>> = label
            .iter()
            .map(|&l| (l == 1).then(|| rng.random_range(0..slides)))
            .collect();

        let mut coords = Vec::new();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut dups = 0;
        for s in 0..slides {
            let n = rng.random_range(spec.patches_per_slide.0..=spec.patches_per_slide.1);
            let originals = ((n as f64) * (1.0 - spec.dup_ratio)).round().max(1.0) as usize;
            let mut slide = SlideBuilder::new(spec, side);
            for (class, slot) in affected.iter().enumerate() {
                if *slot == Some(s) && !slide.plant_cluster(class, &mut rng) {
                    return Err(Error::Config(format!(
                        "could not place a {0}x{0} cluster on a {1}x{1} grid",
                        spec.cluster, side
                    )));
                }
            }
            slide.fill_originals(originals, &mut rng);
            let want = n.saturating_sub(slide.patches.len());
            dups += slide.plant_duplicates(want, &mut rng);

            let mut patches = slide.patches;
            patches.sort_by_key(|p| (p.cell.1, p.cell.0));
            for patch in patches {
                coords.push(PatchCoord::new(s as u16, patch.cell.0, patch.cell.1));
                rows.push(patch.values);
            }
        }

        let mut emb = Matrix::zeros(coords.len(), d);
        for (i, values) in rows.iter().enumerate() {
            for &(k, v) in values {
                // stored as f32 on disk; keep the in-memory copy identical
                emb[(i, k)] = f64::from(v as f32);
            }
        }
        let mut bag = PatchBag::new(format!("p{p:04}"), emb, coords)?;
        bag.num_slides = slides as u16;
        bag.label = label.iter().map(|&v| f64::from(v)).collect();
        bags.push(bag);
        labels.push(label);
        planted_duplicates.push(dups);
    }

    let mut order: Vec<usize> = (0..spec.num_patients).collect();
    order.shuffle(&mut rng);
    let n_train = (spec.num_patients as f64 * 0.7).round() as usize;
    let n_val = (spec.num_patients as f64 * 0.15).round() as usize;
    let entry = |i: usize| BagEntry {
        patient_id: bags[i].patient_id.clone(),
        path: format!("bags/{}.empd", bags[i].patient_id),
        label: labels[i].clone(),
    };
    let mut train: Vec<_> = order[..n_train].to_vec();
    let mut val: Vec<_> = order[n_train..(n_train + n_val).min(order.len())].to_vec();
    let mut test: Vec<_> = order[(n_train + n_val).min(order.len())..].to_vec();
    for part in [&mut train, &mut val, &mut test] {
        part.sort_unstable();
    }

    let manifest = DatasetManifest {
        d,
        classes: spec.classes,
        t: spec.prompt_rows,
        task_mode: spec.task_mode,
        class_names: (0..spec.classes).map(|c| format!("class{c}")).collect(),
        text_bank: Some("text_bank.empt".into()),
        splits: Splits {
            train: train.into_iter().map(entry).collect(),
            val: val.into_iter().map(entry).collect(),
            test: test.into_iter().map(entry).collect(),
        },
        base_dir: Default::default(),
    };
    manifest.validate()?;

    Ok(SyntheticDataset {
        manifest,
        bags,
        text_frozen,
        planted_duplicates,
    })
}

/// Writes bags, text bank and `manifest.toml` under `dir`.
///
/// A non-empty `dir` is refused unless `force` is set.
pub fn write_dataset(dataset: &SyntheticDataset, dir: impl AsRef<Path>, force: bool) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
    }
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir).map_err(|e| Error::io(&bag_dir, e))?;
    for bag in &dataset.bags {
        write_bag(bag, bag_dir.join(format!("{}.empd", bag.patient_id)))?;
    }
    write_text_bank(&dataset.text_frozen, dir.join("text_bank.empt"))?;
    let mut manifest = dataset.manifest.clone();
    manifest.save(dir.join("manifest.toml"))?;
    manifest.base_dir = dir.to_path_buf();
    Ok(manifest)
}

/// `generate` followed by `write_dataset`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>, force: bool) -> Result<DatasetManifest> {
    let dataset = generate(spec)?;
    write_dataset(&dataset, dir, force)
}
