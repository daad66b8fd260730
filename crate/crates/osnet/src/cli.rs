//! `osnet` subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use osnet_core::data::{evaluate_model, generate_dataset, stack_images};
use osnet_core::nas::derive_variants;
use osnet_core::nn::accounting::{count_mult_adds, count_params};
use osnet_core::nn::actmap::activation_map;
use osnet_core::nn::{build_model, build_supernet, Model, ModelSpec};
use osnet_core::tape::{Mode, Tape};
use osnet_core::train::{search_with, train_with, TrainSet};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Kind};
use crate::config::{
    load_or_default, ActmapRun, CountRun, DeriveRun, EvalRun, GenDataRun, GradcheckRun, Scope, SearchRun, TrainRun,
};
use crate::dataset::{read_dataset, write_dataset, write_json};
use crate::error::{Error, Result};
use crate::metrics::{search_header, search_row, train_header, train_row, CsvLog, EvalReport};
use crate::{gradsuite, pgm};

#[derive(Debug, Parser)]
#[command(name = "osnet", version, about = "Omni-scale re-ID networks: accounting, training, search and evaluation")]
pub struct Cli {
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parameter and mult-add counts over width and resolution multipliers.
    Count {
        #[command(flatten)]
        common: Common,
        /// Width multipliers (repeatable).
        #[arg(long = "beta")]
        beta: Vec<f64>,
        /// Resolution multipliers (repeatable).
        #[arg(long = "gamma")]
        gamma: Vec<f64>,
        /// Input height at resolution multiplier 1.
        #[arg(long)]
        height: Option<usize>,
        /// Input width at resolution multiplier 1.
        #[arg(long)]
        width: Option<usize>,
        /// Widths 1, 0.75, 0.5, 0.25 at full resolution, then resolutions
        /// 0.75, 0.5, 0.25 at full width.
        #[arg(long)]
        grid: bool,
    },
    /// Finite-difference gradient suites; exits nonzero on any failure.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        scope: Option<Scope>,
    },
    /// Renders a synthetic multi-camera dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Trains a fixed-architecture network.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Searches instance-normalisation placement with a supernet.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Prints the architecture selected by a search checkpoint.
    Derive {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Retrieval metrics of a trained network on the query and gallery splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Writes activation maps of the last convolution as PGM images.
    Actmap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Count { common, beta, gamma, height, width, grid } => count(common, beta, gamma, height, width, grid),
        Command::Gradcheck { common, scope } => gradcheck(common, scope),
        Command::GenData { common } => gen_data(common),
        Command::Train { common, data } => train(common, data),
        Command::Search { common, data } => search(common, data),
        Command::Derive { common, checkpoint } => derive(common, checkpoint),
        Command::Eval { common, checkpoint, data, batch } => eval(common, checkpoint, data, batch),
        Command::Actmap { common, checkpoint, data, count } => actmap(common, checkpoint, data, count),
    }
}

fn missing(what: &str, flag: &str) -> Error {
    Error::Config { path: PathBuf::from("<command line>"), key: what.into(), message: format!("required; pass {flag}") }
}

fn require(value: Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    value.ok_or_else(|| missing(what, flag))
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out<T: Serialize>(out: &Path, resolved: &T) -> Result<()> {
    fs::create_dir_all(out).map_err(Error::io(out))?;
    write_json(&out.join("config.json"), resolved)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountRow {
    pub width_multiplier: f64,
    pub resolution_multiplier: f64,
    pub height: usize,
    pub width: usize,
    pub params: usize,
    pub mult_adds: usize,
    /// Mult-adds relative to the same width at full resolution.
    pub ratio: f64,
}

pub fn count_rows(run: &CountRun, pairs: &[(f64, f64)]) -> Result<Vec<CountRow>> {
    pairs
        .iter()
        .map(|&(b, g)| {
            let spec = ModelSpec {
                base_height: run.base_height,
                base_width: run.base_width,
                ..ModelSpec::with_multipliers(b, g)
            };
            let (h, w) = spec.input_size();
            let full = ModelSpec { resolution_multiplier: 1.0, ..spec.clone() };
            let (fh, fw) = full.input_size();
            let mult_adds = count_mult_adds(&spec, h, w)?;
            let reference = count_mult_adds(&full, fh, fw)?;
            Ok(CountRow {
                width_multiplier: b,
                resolution_multiplier: g,
                height: h,
                width: w,
                params: count_params(&spec)?,
                mult_adds,
                ratio: mult_adds as f64 / reference as f64,
            })
        })
        .collect()
}

fn count(
    common: Common,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    height: Option<usize>,
    width: Option<usize>,
    grid: bool,
) -> Result<()> {
    let mut run: CountRun = load_or_default(common.config.as_deref())?;
    if !beta.is_empty() {
        run.widths = beta;
    }
    if !gamma.is_empty() {
        run.resolutions = gamma;
    }
    run.base_height = height.unwrap_or(run.base_height);
    run.base_width = width.unwrap_or(run.base_width);
    let pairs: Vec<(f64, f64)> = if grid {
        CountRun::table_grid()
    } else {
        run.widths.iter().flat_map(|&b| run.resolutions.iter().map(move |&g| (b, g))).collect()
    };
    let rows = count_rows(&run, &pairs)?;
    println!("{:>6} {:>6} {:>9} {:>12} {:>14} {:>8}", "beta", "gamma", "input", "params", "mult_adds", "ratio");
    for r in &rows {
        println!(
            "{:>6.2} {:>6.2} {:>9} {:>12} {:>14} {:>8.4}",
            r.width_multiplier,
            r.resolution_multiplier,
            format!("{}x{}", r.height, r.width),
            r.params,
            r.mult_adds,
            r.ratio
        );
    }
    if let Some(out) = &common.out {
        prepare_out(out, &run)?;
        let path = out.join("count.csv");
        let mut w = csv::Writer::from_path(&path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(Error::io(&path))?;
    }
    Ok(())
}

fn gradcheck(common: Common, scope: Option<Scope>) -> Result<()> {
    let mut run: GradcheckRun = load_or_default(common.config.as_deref())?;
    run.scope = scope.unwrap_or(run.scope);
    run.seed = common.seed.unwrap_or(run.seed);
    let reports = gradsuite::run(run.scope, run.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {:<32} max rel err {:.3e} (tol {:.0e}, {} entries, {} refined, {} skipped)",
            r.name, r.max_rel_err, r.tolerance, r.checked, r.refined, r.skipped
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    if let Some(out) = &common.out {
        prepare_out(out, &run)?;
        let mut log = CsvLog::create(&out.join("gradcheck.csv"), &["check", "entries", "refined", "skipped", "max_rel_err", "tolerance", "passed"].map(String::from))?;
        for r in &reports {
            log.row(&[r.name.clone(), r.checked.to_string(), r.refined.to_string(), r.skipped.to_string(), r.max_rel_err.to_string(), r.tolerance.to_string(), r.passed().to_string()])?;
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Failed(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

fn gen_data(common: Common) -> Result<()> {
    let mut cfg: GenDataRun = load_or_default(common.config.as_deref())?;
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    let out = require(common.out, "out", "--out DIR")?;
    let dataset = generate_dataset(&cfg)?;
    prepare_out(&out, &cfg)?;
    write_dataset(&dataset, &out)?;
    println!(
        "wrote {} train, {} query and {} gallery images to {}",
        dataset.train.len(),
        dataset.query.len(),
        dataset.gallery.len(),
        out.display()
    );
    Ok(())
}

/// Loads the training split and fits the model spec to it.
fn training_data(data: &Path, spec: &mut ModelSpec) -> Result<TrainSet> {
    let dataset = read_dataset(data)?;
    let set = TrainSet::from_people(&dataset.train)?;
    spec.num_classes = set.classes;
    let (h, w) = spec.input_size();
    let shape = set.images[0].shape();
    if shape[1..] != [h, w] {
        return Err(Error::Config {
            path: data.join("dataset.json"),
            key: "model".into(),
            message: format!(
                "images are {}x{} but the model expects {h}x{w}; adjust resolution_multiplier or base size",
                shape[1], shape[2]
            ),
        });
    }
    Ok(set)
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{:04}.ckpt", epoch + 1))
}

/// Writes the last finite state before handing back a non-finite failure.
fn with_diagnostic<T>(out: &Path, model: &Model, result: osnet_core::Result<T>) -> Result<T> {
    match result {
        Err(osnet_core::Error::NonFinite(msg)) => {
            let ckpt = Checkpoint::from_model(model).with_meta("error", msg.clone());
            ckpt.write(&out.join("diagnostic.ckpt"))?;
            log::error!("non-finite value, wrote {}", out.join("diagnostic.ckpt").display());
            Err(osnet_core::Error::NonFinite(msg).into())
        }
        other => Ok(other?),
    }
}

fn train(common: Common, data: Option<PathBuf>) -> Result<()> {
    let mut run: TrainRun = load_or_default(common.config.as_deref())?;
    run.train.seed = common.seed.unwrap_or(run.train.seed);
    run.data = data.or(run.data);
    let out = require(common.out, "out", "--out DIR")?;
    let data = require(run.data.clone(), "data", "--data DIR")?;
    let set = training_data(&data, &mut run.model)?;
    run.train.validate()?;
    prepare_out(&out, &run)?;
    let mut model = build_model(&run.model, run.train.seed)?;
    let mut log = CsvLog::create(&out.join("train.csv"), &train_header())?;
    let interval = run.train.checkpoint_interval;
    let result = train_with(&mut model, &set, &run.train, |m, model| {
        log.row(&train_row(m)).map_err(|e| osnet_core::Error::Contract(e.to_string()))?;
        if interval > 0 && (m.epoch + 1) % interval == 0 {
            Checkpoint::from_model(model)
                .with_meta("epoch", m.epoch + 1)
                .write(&checkpoint_path(&out, m.epoch))
                .map_err(|e| osnet_core::Error::Contract(e.to_string()))?;
        }
        Ok(())
    });
    let metrics = with_diagnostic(&out, &model, result)?;
    Checkpoint::from_model(&model)
        .with_meta("epochs", run.train.epochs)
        .with_meta("seed", run.train.seed)
        .write(&out.join("model.ckpt"))?;
    if let Some(m) = metrics.last() {
        println!("epoch {}: loss {:.4} accuracy {:.4}", m.epoch, m.loss, m.accuracy);
    }
    Ok(())
}

fn architecture_names(model: &Model) -> Vec<&'static str> {
    derive_variants(&model.arch_params(1.0)).into_iter().map(|k| k.name()).collect()
}

fn search(common: Common, data: Option<PathBuf>) -> Result<()> {
    let mut run: SearchRun = load_or_default(common.config.as_deref())?;
    run.search.train.seed = common.seed.unwrap_or(run.search.train.seed);
    run.data = data.or(run.data);
    let out = require(common.out, "out", "--out DIR")?;
    let data = require(run.data.clone(), "data", "--data DIR")?;
    let set = training_data(&data, &mut run.model)?;
    run.search.validate()?;
    prepare_out(&out, &run)?;
    let mut model = build_supernet(&run.model, run.search.train.seed)?;
    let mut log = CsvLog::create(&out.join("search.csv"), &search_header(model.net.arch_logits.len()))?;
    let interval = run.search.train.checkpoint_interval;
    let result = search_with(&mut model, &set, &run.search, |e, model| {
        log.row(&search_row(e)).map_err(|err| osnet_core::Error::Contract(err.to_string()))?;
        if interval > 0 && (e.epoch + 1) % interval == 0 {
            Checkpoint::from_model(model)
                .with_meta("epoch", e.epoch + 1)
                .write(&checkpoint_path(&out, e.epoch))
                .map_err(|err| osnet_core::Error::Contract(err.to_string()))?;
        }
        Ok(())
    });
    with_diagnostic(&out, &model, result)?;
    Checkpoint::from_model(&model)
        .with_meta("epochs", run.search.train.epochs)
        .with_meta("seed", run.search.train.seed)
        .write(&out.join("supernet.ckpt"))?;
    let names = architecture_names(&model);
    write_json(&out.join("architecture.json"), &names)?;
    println!("{}", serde_json::to_string(&names)?);
    Ok(())
}

fn derive(common: Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let mut run: DeriveRun = load_or_default(common.config.as_deref())?;
    run.checkpoint = checkpoint.or(run.checkpoint);
    let path = require(run.checkpoint.clone(), "checkpoint", "--checkpoint PATH")?;
    let ckpt = Checkpoint::read(&path)?;
    if ckpt.header.kind != Kind::Supernet {
        return Err(Error::Malformed(format!("{} is not a search checkpoint", path.display())));
    }
    let names = architecture_names(&ckpt.to_model()?);
    if let Some(out) = &common.out {
        prepare_out(out, &run)?;
        write_json(&out.join("architecture.json"), &names)?;
    }
    println!("{}", serde_json::to_string(&names)?);
    Ok(())
}

fn eval(common: Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, batch: Option<usize>) -> Result<()> {
    let mut run: EvalRun = load_or_default(common.config.as_deref())?;
    run.checkpoint = checkpoint.or(run.checkpoint);
    run.data = data.or(run.data);
    run.batch = batch.unwrap_or(run.batch);
    let path = require(run.checkpoint.clone(), "checkpoint", "--checkpoint PATH")?;
    let data = require(run.data.clone(), "data", "--data DIR")?;
    let mut model = Checkpoint::read(&path)?.to_model()?;
    let dataset = read_dataset(&data)?;
    let result = evaluate_model(&mut model, &dataset.query, &dataset.gallery, run.batch)?;
    let report = EvalReport::from(&result);
    if let Some(out) = &common.out {
        prepare_out(out, &run)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    println!(
        "R1 {:.4} R5 {:.4} R10 {:.4} mAP {:.4} ({} queries, {} excluded)",
        report.r1,
        report.r5,
        report.r10,
        report.map,
        report.queries,
        report.excluded.len()
    );
    Ok(())
}

fn actmap(common: Common, checkpoint: Option<PathBuf>, data: Option<PathBuf>, count: Option<usize>) -> Result<()> {
    let mut run: ActmapRun = load_or_default(common.config.as_deref())?;
    run.checkpoint = checkpoint.or(run.checkpoint);
    run.data = data.or(run.data);
    run.count = count.unwrap_or(run.count);
    let path = require(run.checkpoint.clone(), "checkpoint", "--checkpoint PATH")?;
    let data = require(run.data.clone(), "data", "--data DIR")?;
    let out = require(common.out, "out", "--out DIR")?;
    let mut model = Checkpoint::read(&path)?.to_model()?;
    let dataset = read_dataset(&data)?;
    let people = &dataset.split(run.split)[..run.count.min(dataset.split(run.split).len())];
    prepare_out(&out, &run)?;
    let split = run.split;
    for (start, chunk) in people.chunks(16).enumerate().map(|(i, c)| (i * 16, c)) {
        let images = stack_images(chunk)?;
        let mut tape = Tape::new();
        let mix = model.eval_mixture();
        let net = model.forward(&mut tape, &images, Mode::Eval, mix.as_deref())?;
        let maps = activation_map(tape.value(net.feature_map))?;
        let [_, _, h, w] = maps.maps.dims4()?;
        for (k, (p, map)) in chunk.iter().zip(maps.maps.data().chunks(h * w)).enumerate() {
            let name = format!("{}_{:04}_id{}_cam{}.pgm", split.name(), start + k, p.identity, p.camera);
            pgm::write(&out.join(name), w, h, map)?;
        }
    }
    println!("wrote {} activation maps to {}", people.len(), out.display());
    Ok(())
}
