use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mfstf_core::gradcheck::{full_suite, REL_TOL};
use mfstf_core::metrics::{render_map, ConfusionMatrix, Metrics, Palette};
use mfstf_core::model::Model;
use mfstf_core::polsar::{chessboard_partition, generate_synthetic_scene, LabelRaster, Part, PolSarCube, SceneConfig};
use mfstf_core::train::{predict_image, train, TrainConfig, TrainOutcome};
use mfstf_core::{Error, OpKind};

const GAMMA_GRID: [f64; 14] = [1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 6.5, 7.0, 7.5, 8.0];
const LAMBDA_GRID: [f64; 8] = [0.0, 0.001, 0.005, 0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Parser)]
#[command(name = "mfstf", version, about = "Multi-frequency PolSAR fusion classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic MFPC cube.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        bands: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "200x200", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 4)]
        looks: usize,
    },
    /// Train chessboard models; writes model-<part>.mfst and train-<part>.log.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON training configuration; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = PartArg::Both)]
        part: PartArg,
        /// Independent runs with seeds seed, seed+1, ... in run-<i> subdirectories.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Classify every pixel with the model trained on the other part.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_black: PathBuf,
        #[arg(long)]
        ckpt_white: PathBuf,
        /// MFLB output raster.
        #[arg(long)]
        out: PathBuf,
        /// Optional PPM rendering of the prediction.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Chessboard grid used during training, as RxC.
        #[arg(long, default_value = "20x20", value_parser = parse_size)]
        grid: (usize, usize),
    },
    /// Accuracy of one or more predictions against ground truth.
    Eval {
        /// MFLB prediction; repeat the flag to average several runs.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        /// MFPC cube or MFLB raster holding the reference labels.
        #[arg(long)]
        truth: PathBuf,
        /// Class count when the truth is an MFLB raster (default: largest label).
        #[arg(long)]
        classes: Option<usize>,
        /// Also write the metrics as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of gamma or lambda values.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Comma-separated values; defaults to the reference grid.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupts the backward pass of one op.
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PartArg {
    Black,
    White,
    Both,
}

impl PartArg {
    fn parts(self) -> Vec<Part> {
        match self {
            PartArg::Black => vec![Part::Black],
            PartArg::White => vec![Part::White],
            PartArg::Both => vec![Part::Black, Part::White],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Gamma,
    Lambda,
}

/// A failed command and its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } | Error::NonFinite(_) => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type CmdResult = Result<(), Failure>;

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected RxC, got {:?}", s))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{:?}: {}", v, e));
    Ok((parse(a)?, parse(b)?))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::usage(format!("{}: {}", path.display(), e))
}

fn read_cube(path: &Path) -> Result<PolSarCube, Failure> {
    PolSarCube::read(path).map_err(|e| io_err(path, e))
}

fn read_model(path: &Path) -> Result<Model, Failure> {
    Model::read(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig, Failure> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| io_err(p, format!("invalid config: {}", e)))?
        }
        None => TrainConfig::default(),
    };
    cfg.validate().map_err(|e| Failure::usage(format!("invalid config: {}", e)))?;
    Ok(cfg)
}

fn cmd_gen(out: &Path, seed: u64, bands: usize, classes: usize, size: (usize, usize), looks: usize) -> CmdResult {
    if bands < 2 {
        return Err(Failure::usage("need at least 2 bands: cross-band interaction is undefined for one"));
    }
    let cube = generate_synthetic_scene(&SceneConfig {
        classes,
        bands,
        height: size.0,
        width: size.1,
        seed,
        looks,
        ..SceneConfig::default()
    })?;
    write_file(out, &cube.to_bytes())?;
    println!(
        "wrote {} (K={} C={} {}x{})",
        out.display(),
        cube.band_count(),
        cube.classes(),
        cube.height(),
        cube.width()
    );
    Ok(())
}

fn train_parts(cube: &PolSarCube, cfg: &TrainConfig, parts: &[Part], dir: &Path) -> Result<Vec<TrainOutcome>, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let split = chessboard_partition(cube.height(), cube.width(), cfg.grid_rows, cfg.grid_cols)?;
    let mut outs = Vec::new();
    for &part in parts {
        let out = train(cube, &split, part, cfg)?;
        let ckpt = dir.join(format!("model-{}.mfst", part));
        write_file(&ckpt, &out.model.to_bytes())?;
        write_file(&dir.join(format!("train-{}.log", part)), out.log_text().as_bytes())?;
        println!("trained {} part: {}", part, ckpt.display());
        outs.push(out);
    }
    Ok(outs)
}

fn cmd_train(data: &Path, config: Option<&Path>, out: &Path, part: PartArg, repeats: usize) -> CmdResult {
    let cfg = load_config(config)?;
    if repeats == 0 {
        return Err(Failure::usage("repeats must be positive"));
    }
    let cube = read_cube(data)?;
    for r in 0..repeats {
        let dir = if repeats == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("run-{}", r))
        };
        let cfg = TrainConfig {
            seed: cfg.seed + r as u64,
            ..cfg.clone()
        };
        train_parts(&cube, &cfg, &part.parts(), &dir)?;
    }
    Ok(())
}

fn cmd_predict(data: &Path, black: &Path, white: &Path, out: &Path, map: Option<&Path>, grid: (usize, usize)) -> CmdResult {
    let cube = read_cube(data)?;
    let black = read_model(black)?;
    let white = read_model(white)?;
    let split = chessboard_partition(cube.height(), cube.width(), grid.0, grid.1)?;
    let raster = predict_image(&cube, &black, &white, &split)?;
    write_file(out, &raster.to_bytes())?;
    if let Some(m) = map {
        write_file(m, &render_map(&raster, &Palette::default())?)?;
    }
    println!("wrote {} ({}x{})", out.display(), raster.height, raster.width);
    Ok(())
}

/// Reference labels and class count from a cube or a label raster.
fn read_truth(path: &Path, classes: Option<usize>) -> Result<(LabelRaster, usize), Failure> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(b"MFPC") {
        let cube = PolSarCube::from_bytes(&bytes).map_err(|e| io_err(path, e))?;
        Ok((cube.label_raster(), classes.unwrap_or(cube.classes())))
    } else {
        let r = LabelRaster::from_bytes(&bytes).map_err(|e| io_err(path, e))?;
        let c = classes.unwrap_or_else(|| r.labels.iter().copied().max().unwrap_or(0) as usize);
        Ok((r, c))
    }
}

fn evaluate(truth: &LabelRaster, classes: usize, pred: &LabelRaster) -> Result<Metrics, Failure> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(truth, pred)?;
    Ok(cm.metrics()?)
}

fn cmd_eval(preds: &[PathBuf], truth: &Path, classes: Option<usize>, json: Option<&Path>) -> CmdResult {
    let (truth, classes) = read_truth(truth, classes)?;
    let mut runs = Vec::new();
    for p in preds {
        let pred = LabelRaster::read(p).map_err(|e| io_err(p, e))?;
        runs.push(evaluate(&truth, classes, &pred)?);
    }
    if runs.len() > 1 {
        for (p, m) in preds.iter().zip(&runs) {
            println!("# {} oa={:.4}", p.display(), m.oa);
        }
    }
    let mean = Metrics::mean(&runs).expect("at least one prediction");
    print!("{}", mean.to_text());
    if let Some(j) = json {
        let text = serde_json::to_string_pretty(&mean).map_err(|e| Failure::usage(e.to_string()))?;
        write_file(j, text.as_bytes())?;
    }
    Ok(())
}

fn cmd_sweep(data: &Path, config: Option<&Path>, param: SweepParam, values: Option<Vec<f64>>) -> CmdResult {
    let base = load_config(config)?;
    let values = values.unwrap_or_else(|| match param {
        SweepParam::Gamma => GAMMA_GRID.to_vec(),
        SweepParam::Lambda => LAMBDA_GRID.to_vec(),
    });
    let configs = values
        .iter()
        .map(|&v| {
            let cfg = match param {
                SweepParam::Gamma => TrainConfig { gamma: v, ..base.clone() },
                SweepParam::Lambda => TrainConfig { lambda: v, ..base.clone() },
            };
            cfg.validate().map(|_| cfg).map_err(|e| Failure::usage(format!("sweep value {}: {}", v, e)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cube = read_cube(data)?;
    let split = chessboard_partition(cube.height(), cube.width(), base.grid_rows, base.grid_cols)?;
    let truth = cube.label_raster();
    let name = match param {
        SweepParam::Gamma => "gamma",
        SweepParam::Lambda => "lambda",
    };
    let mut table = format!("{}\toa\taa\tkappa\n", name);
    for (v, cfg) in values.iter().zip(&configs) {
        let black = train(&cube, &split, Part::Black, cfg)?.model;
        let white = train(&cube, &split, Part::White, cfg)?.model;
        let pred = predict_image(&cube, &black, &white, &split)?;
        let m = evaluate(&truth, cube.classes(), &pred)?;
        let row = format!("{}\t{:.4}\t{:.4}\t{:.4}", v, m.oa, m.aa, m.kappa);
        eprintln!("{}", row);
        let _ = writeln!(table, "{}", row);
    }
    print!("{}", table);
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> CmdResult {
    let fault = fault
        .map(|f| OpKind::from_name(f).ok_or_else(|| Failure::usage(format!("unknown op {:?}", f))))
        .transpose()?;
    let reports = full_suite(seed, fault)?;
    for r in &reports {
        println!(
            "{:<18} max_rel_err={:.3e} checked={} skipped={} {}",
            r.name,
            r.max_rel_err,
            r.checked,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("suite is not empty");
    if reports.iter().all(|r| r.passed()) {
        println!("gradcheck passed (tolerance {:e})", REL_TOL);
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            msg: format!(
                "gradcheck failed: worst op {} with relative error {:.3e}",
                worst.name, worst.max_rel_err
            ),
        })
    }
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Gen {
            out,
            seed,
            bands,
            classes,
            size,
            looks,
        } => cmd_gen(&out, seed, bands, classes, size, looks),
        Command::Train {
            data,
            config,
            out,
            part,
            repeats,
        } => cmd_train(&data, config.as_deref(), &out, part, repeats),
        Command::Predict {
            data,
            ckpt_black,
            ckpt_white,
            out,
            map,
            grid,
        } => cmd_predict(&data, &ckpt_black, &ckpt_white, &out, map.as_deref(), grid),
        Command::Eval {
            pred,
            truth,
            classes,
            json,
        } => cmd_eval(&pred, &truth, classes, json.as_deref()),
        Command::Sweep {
            data,
            config,
            param,
            values,
        } => cmd_sweep(&data, config.as_deref(), param, values),
        Command::Gradcheck { seed, fault } => cmd_gradcheck(seed, fault.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
