use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use phasenet::augment::{MixupConfig, DEFAULT_ALPHA};
use phasenet::dataio::{
    generate_corpus, load_all, read_manifest, read_volume, write_corpus, write_volume, Conspicuity, MpvFile,
    PhantomConfig,
};
use phasenet::harness::{
    case_dsc, crossval_ladder, infer_whole, load_model, permutation_test, prepare_all, report_table, train_fold,
    write_run, FoldSplit, MetricsReport, Mode, Structure, TrainConfig, XvalConfig,
};
use phasenet::losses::DEFAULT_PAIR_WEIGHT;
use phasenet::netblocks::PathConfig;
use phasenet::{Error, Result};

#[derive(Parser)]
#[command(name = "phasenet", version, about = "Dual-phase CT segmentation experiments on phantom data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired phantom corpus and its manifest.
    PhantomGen(PhantomArgs),
    /// Train one method on all folds but the test fold.
    Train(TrainArgs),
    /// Sliding-window prediction for one manifest case.
    Infer(InferArgs),
    /// Dice scores of a predicted label map against the truth.
    Eval(EvalArgs),
    /// Three-fold cross-validation of one or more methods.
    Xval(XvalArgs),
    /// Mean ± std table from per-case metric CSVs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ConspicuityArg {
    Split,
    Both,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    cases: usize,
    /// `N` for a cube or `XxYxZ`.
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long, value_enum, default_value = "split")]
    conspicuity: ConspicuityArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Hyper {
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    base_channels: usize,
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = DEFAULT_PAIR_WEIGHT)]
    lambda_pair: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha_mixup: f64,
    #[arg(long)]
    no_mixup: bool,
    /// Probability of a crop centered on foreground.
    #[arg(long, default_value_t = 0.5)]
    fg_crop: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Hyper {
    fn config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            path: PathConfig {
                depth: self.depth,
                base_channels: self.base_channels,
                ..PathConfig::default()
            },
            patch: self.patch,
            lr: self.lr,
            momentum: self.momentum,
            iterations: self.iters,
            batch_size: self.batch,
            pair_weight: self.lambda_pair,
            mixup: MixupConfig {
                alpha: self.alpha_mixup,
                enabled: !self.no_mixup,
            },
            seed: self.seed,
            foreground_crop: self.fg_crop,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "hpn")]
    mode: Mode,
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 3)]
    fold: usize,
    #[arg(long, default_value_t = 0)]
    test_fold: usize,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Case id from the manifest.
    #[arg(long)]
    case: String,
    /// Window edge; defaults to the training patch.
    #[arg(long)]
    patch: Option<usize>,
    /// Defaults to half the window.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct XvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Repeat or comma-separate; both single phases add a fusion row.
    #[arg(long, value_delimiter = ',', default_value = "single-a,single-b,hyper,hpn")]
    mode: Vec<Mode>,
    #[arg(long, default_value_t = 3)]
    folds: usize,
    /// Inference stride; defaults to half the patch.
    #[arg(long)]
    stride: Option<usize>,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric CSVs; the file stem names the method.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Method the others are tested against; defaults to the last input.
    #[arg(long)]
    baseline: Option<String>,
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err(format!("expected N or XxYxZ, got {s:?}")),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn phantom_gen(a: PhantomArgs) -> Result<()> {
    let cfg = PhantomConfig {
        conspicuity: match a.conspicuity {
            ConspicuityArg::Split => Conspicuity::Split,
            ConspicuityArg::Both => Conspicuity::Both,
        },
        ..PhantomConfig::with_dims(a.dims)
    };
    let cases = generate_corpus(a.seed, a.cases, &cfg)?;
    let m = write_corpus(&cases, &a.out)?;
    println!("wrote {} cases to {}", m.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.hyper.config(a.mode);
    cfg.validate()?;
    let manifest = read_manifest(&a.manifest)?;
    let split = FoldSplit::by_index(manifest.len(), a.fold)?;
    let (model, logs) = train_fold(&cfg, &manifest, &split, a.test_fold)?;
    create_dir(&a.out)?;
    write_run(&a.out, &model, &logs)?;
    if let Some(last) = logs.first().and_then(|l| l.last()) {
        println!(
            "{} trained {} iterations: ce {:.4} corr {:.4} total {:.4}",
            a.mode, cfg.iterations, last.ce, last.corr, last.total
        );
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let manifest = read_manifest(&a.manifest)?;
    let index = manifest
        .entries
        .iter()
        .position(|e| e.case_id == a.case)
        .ok_or_else(|| Error::Config(format!("case {:?} is not in the manifest", a.case)))?;
    let case = phasenet::dataio::load_case(&manifest, index)?;
    let patch = a.patch.unwrap_or(model.patch);
    let stride = a.stride.unwrap_or((patch / 2).max(1));
    let (_, pred) = infer_whole(&model, &case, patch, stride)?;
    create_dir(&a.out)?;
    let path = a.out.join(format!("{}_pred.mpv", a.case));
    write_volume(&MpvFile::from(pred), &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let pred = read_volume(&a.pred)?.into_labels()?;
    let truth = read_volume(&a.truth)?.into_labels()?;
    if pred.dims() != truth.dims() {
        return Err(Error::Dimension(format!(
            "prediction {:?} and truth {:?} differ",
            pred.dims(),
            truth.dims()
        )));
    }
    let d = case_dsc(&truth.labels, &pred.labels)?;
    for s in Structure::ALL {
        println!("{s}\t{:.4}", d[s.index()]);
    }
    Ok(())
}

fn xval(a: XvalArgs) -> Result<()> {
    let train = a.hyper.config(Mode::Hpn);
    train.validate()?;
    let cases = prepare_all(&load_all(&read_manifest(&a.manifest)?)?)?;
    let mut cfg = XvalConfig::new(train, a.mode);
    cfg.folds = a.folds;
    cfg.infer_stride = a.stride;
    let rows = crossval_ladder(&cases, &cfg)?;
    create_dir(&a.out)?;
    for (name, r) in &rows {
        write_text(&a.out.join(format!("{name}.csv")), &r.to_csv())?;
    }
    let table = report_table(&rows)?;
    write_text(&a.out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &a.inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        rows.push((name, MetricsReport::from_csv(&text)?));
    }
    print!("{}", report_table(&rows)?);
    if rows.len() < 2 {
        return Ok(());
    }
    let base = match &a.baseline {
        Some(b) => rows
            .iter()
            .position(|(n, _)| n == b)
            .ok_or_else(|| Error::Config(format!("baseline {b:?} is not among the inputs")))?,
        None => rows.len() - 1,
    };
    let (base_name, base_report) = &rows[base];
    println!("\npermutation p-values against {base_name}");
    for (name, r) in rows.iter().filter(|(n, _)| n != base_name) {
        if r.case_ids != base_report.case_ids {
            return Err(Error::Config(format!("{name} and {base_name} cover different cases")));
        }
        let p: Vec<String> = Structure::ALL
            .iter()
            .map(|&s| permutation_test(r.values(s), base_report.values(s)).map(|p| format!("{p:.4}")))
            .collect::<Result<_>>()?;
        println!("{name} | {}", p.join(" | "));
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = match cli.command {
        Command::PhantomGen(a) => phantom_gen(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Xval(a) => xval(a),
        Command::Report(a) => report(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
