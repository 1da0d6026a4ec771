mod args;

use std::fs;
use std::path::Path;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use emmpd::data::{generate_synthetic, DatasetManifest, Split};
use emmpd::numeric::OpKind;
use emmpd::select::{select_patches, SelectionMode, SelectionReport, SelectionSettings};
use emmpd::train::ablation::{run_ablation_with, AblationPlan};
use emmpd::train::checkpoint::{check_compatible, load_checkpoint, save_checkpoint};
use emmpd::train::config::TrainConfig;
use emmpd::train::gradsuite::run_gradient_suite;
use emmpd::train::trainer::{history_csv, shuffle_labels, train, Dataset};
use emmpd::{Error, Result};
use rayon::prelude::*;

use args::{AblateArgs, Cli, Command, CompressArgs, EvalArgs, GradcheckArgs, SynthArgs, TrainArgs, TrainFlags};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn resolve_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let base = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    let config = flags.apply(base);
    config.validate()?;
    Ok(config)
}

fn load_dataset(manifest: &Path, config: &TrainConfig) -> Result<Dataset> {
    let m = DatasetManifest::load(manifest)?;
    Dataset::load(&m, config.t, config.seed)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = a.spec();
    let manifest = generate_synthetic(&spec, &a.out, a.force)?;
    let count = |s| manifest.entries(s).len();
    println!(
        "wrote {} patients to {} (train {}, val {}, test {}), d = {}, C = {}, t = {}",
        spec.num_patients,
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        manifest.d,
        manifest.classes,
        manifest.t
    );
    Ok(())
}

fn cmd_compress(a: &CompressArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let settings = SelectionSettings {
        mode: SelectionMode::CompressOnly,
        window: a.w,
        top_k: usize::MAX,
        seed: 0,
    };
    if a.w < 1 {
        return Err(Error::Config(format!("w must be at least 1, got {}", a.w)));
    }
    let mut bags = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let loaded = m.load_split(split)?;
        bags.extend(
            loaded
                .par_iter()
                .map(|b| select_patches(b, &settings, None))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    bags.sort_by(|x, y| x.patient_id.cmp(&y.patient_id));
    let report = SelectionReport {
        window: a.w,
        top_k: 0,
        bags,
    };
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("compress.txt"), report.to_text())?;
        write(&out.join("compress.json"), report.to_json())?;
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let config = resolve_config(&a.flags)?;
    let mut data = load_dataset(&a.manifest, &config)?;
    if a.shuffle_labels {
        shuffle_labels(&mut data.train, config.seed ^ 0x5f_fe);
    }
    create_dir(&a.out)?;
    let outcome = train(&data, &config)?;
    save_checkpoint(&outcome.pipeline, a.out.join("model.empc"))?;
    write(&a.out.join("history.csv"), history_csv(&outcome.history))?;
    write(&a.out.join("config.toml"), config.to_toml())?;
    let report = outcome.pipeline.evaluate(&data.val, &data.class_names)?;
    write(&a.out.join("val_metrics.json"), report.to_json())?;
    println!(
        "trained {} epochs, best epoch {} (val loss {:.6}); checkpoint {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_loss,
        a.out.join("model.empc").display()
    );
    print!("validation\n{}", report.to_text());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let m = DatasetManifest::load(&a.manifest)?;
    let pipeline = load_checkpoint(&a.checkpoint)?;
    check_compatible(&pipeline, m.d, m.classes)?;
    let bags = m.load_split(a.split)?;
    if bags.is_empty() {
        return Err(Error::EmptySplit(a.split.name()));
    }
    let report = pipeline.evaluate(&bags, &m.class_names)?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        create_dir(out)?;
        write(&out.join("metrics.json"), report.to_json())?;
        write(&out.join("metrics.txt"), report.to_text())?;
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let plan = match &a.grid {
        Some(grid) => AblationPlan::with_grid(a.mode, grid.clone())?,
        None => AblationPlan::new(a.mode),
    };
    let config = resolve_config(&a.flags)?;
    let data = load_dataset(&a.manifest, &config)?;
    let report = run_ablation_with(&data, &config, &plan, |label, row| {
        eprintln!("{label}: test f1 {:.4}, best epoch {}", row.test.f1, row.best_epoch);
    })?;
    print!("{}", report.to_text());
    if let Some(out) = &a.out {
        create_dir(out)?;
        let stem = format!("ablation_{}", a.mode.name());
        write(&out.join(format!("{stem}.json")), report.to_json())?;
        write(&out.join(format!("{stem}.txt")), report.to_text())?;
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let corrupt = match &a.corrupt {
        Some(name) => Some(OpKind::parse(name).ok_or_else(|| Error::UnknownVariant(format!("operation {name:?}")))?),
        None => None,
    };
    let report = run_gradient_suite(corrupt)?;
    print!("{}", report.to_text());
    Ok(report.passed())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Compress(a) => cmd_compress(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Ablate(a) => cmd_ablate(a)?,
        Command::Gradcheck(a) => {
            if !cmd_gradcheck(a)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
