//! `attnlab`: catalogue, gradient checks, cost accounting, guidance,
//! significance tests, synthetic data and training runs.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use attnlab_core::analysis::bootstrap::bootstrap_compare;
use attnlab_core::analysis::check::{
    format_rows, run_checks, CheckOptions, CheckTarget, Precision, DEFAULT_EPS,
};
use attnlab_core::analysis::cost::{count_cost, BackboneKind, CostConfig, FlopConvention};
use attnlab_core::analysis::describe::describe;
use attnlab_core::analysis::experiment::{
    load_records, report, run_experiment, ExperimentConfig, SUMMARY_FILE,
};
use attnlab_core::analysis::recommend::recommend;
use attnlab_core::data::{generate_synthetic, load_dataset, save_dataset, SynthKind, SynthSpec};
use attnlab_core::tensor::Shape;
use attnlab_core::topology::TopologyId;
use attnlab_core::train::RunRecord;
use attnlab_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(
    name = "attnlab",
    version,
    about = "Channel/spatial attention topology lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List the 18 topologies.
    List,
    /// Category, equation, parameters and recommended regime of a topology.
    Describe {
        topology: String,
        /// Channel width for the parameter inventory.
        #[arg(long, default_value_t = 64)]
        channels: usize,
    },
    /// Finite-difference check of every backward pass.
    Gradcheck {
        /// A topology name, `microvgg` for the composite, or `all`.
        #[arg(default_value = "all")]
        target: String,
        /// N,C,H,W of the input.
        #[arg(long, default_value = "2,16,8,8", value_parser = parse_shape)]
        shape: Shape,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        /// Overrides the per-precision tolerance (1e-4 for f32, 1e-6 for f64).
        #[arg(long)]
        tol: Option<f64>,
        /// Repeatable.
        #[arg(long = "seed", default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
        precision: PrecisionArg,
        /// Test hook: doubles the analytic gradients of this target.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Parameter and FLOP accounting.
    Cost {
        #[arg(long, default_value = "vgg16")]
        backbone: BackboneKind,
        /// A topology name, `none`, or `all` for a one-line-per-topology table.
        #[arg(long, default_value = "none")]
        attention: String,
        /// C,H,W of the input; defaults to 3,64,64 for vgg16 and 3,32,32 for microvgg.
        #[arg(long, value_parser = parse_dims3)]
        input: Option<(usize, usize, usize)>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Number of final stages followed by attention.
        #[arg(long)]
        attention_stages: Option<usize>,
        /// `2mac` (2 FLOPs per multiply-accumulate) or `mac`.
        #[arg(long, default_value = "2mac")]
        convention: FlopConvention,
    },
    /// Recommend topologies for a training-set size.
    Recommend {
        n_samples: u64,
        #[arg(long)]
        fine_grained: bool,
    },
    /// Paired bootstrap test between two per-sample correctness vectors.
    Bootstrap {
        /// Run record (.toml) or a file of 0/1 characters.
        a: PathBuf,
        b: PathBuf,
        #[arg(short = 'B', long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long, value_enum)]
        kind: KindArg,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        /// C,H,W of each image.
        #[arg(long, default_value = "4,16,16", value_parser = parse_dims3)]
        shape: (usize, usize, usize),
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f32,
        #[arg(long, default_value_t = 0.4)]
        amplitude: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one or more topologies over seeds and write run records.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Repeatable; a topology name or `baseline`.
        #[arg(long = "topology", required = true)]
        topologies: Vec<String>,
        /// Repeatable.
        #[arg(long = "seed", default_values_t = [42u64, 43, 44])]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        label_smoothing: Option<f64>,
        #[arg(long)]
        class_weighted: bool,
        /// Comma-separated stage widths.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<usize>>,
        #[arg(long)]
        convs_per_stage: Option<usize>,
        /// Seed of the stratified train/val/test split.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Tag recorded with every run; defaults to the file stem.
        #[arg(long)]
        tag: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Comparison table over a directory of run records.
    Report {
        dir: PathBuf,
        #[arg(short = 'B', long, default_value_t = 2000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Spatial,
    Channel,
    Mixed,
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split([',', 'x'])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_shape(s: &str) -> Result<Shape, String> {
    match parse_list(s)?[..] {
        [n, c, h, w] => Ok(Shape::new(n, c, h, w)),
        _ => Err("expected four dimensions N,C,H,W".into()),
    }
}

fn parse_dims3(s: &str) -> Result<(usize, usize, usize), String> {
    match parse_list(s)?[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err("expected three dimensions C,H,W".into()),
    }
}

enum Failure {
    Core(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Lookup { .. } => EXIT_USAGE,
        Error::Evaluation(_) => EXIT_CHECK,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let mut out = String::new();
    let result = run(cli.command, &mut out);
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(out.as_bytes());
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_CHECK)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command, buf: &mut String) -> Result<(), Failure> {
    match cmd {
        Command::List => {
            for id in TopologyId::ALL {
                let _ = writeln!(
                    buf,
                    "{:<9} {:<11} {}",
                    id.name(),
                    id.category(),
                    id.equation()
                );
            }
        }
        Command::Describe { topology, channels } => {
            let _ = writeln!(
                buf,
                "{}",
                describe(TopologyId::parse(&topology)?, channels)?
            );
        }
        Command::Gradcheck {
            target,
            shape,
            eps,
            tol,
            seeds,
            precision,
            corrupt,
        } => {
            let targets = if target.eq_ignore_ascii_case("all") {
                CheckTarget::all()
            } else {
                vec![CheckTarget::parse(&target)?]
            };
            let opts = CheckOptions {
                shape,
                eps,
                tol,
                seeds,
                precisions: match precision {
                    PrecisionArg::F32 => vec![Precision::Single],
                    PrecisionArg::F64 => vec![Precision::Double],
                    PrecisionArg::Both => vec![Precision::Single, Precision::Double],
                },
                corrupt: corrupt.as_deref().map(CheckTarget::parse).transpose()?,
            };
            let start = Instant::now();
            let rows = run_checks(&targets, &opts)?;
            let _ = write!(buf, "{}", format_rows(&rows));
            let failed = rows.iter().filter(|r| !r.report.pass).count();
            let _ = writeln!(
                buf,
                "{}/{} passed in {:.1}s",
                rows.len() - failed,
                rows.len(),
                start.elapsed().as_secs_f64()
            );
            if failed > 0 {
                return Err(Failure::Check(format!("{failed} gradient check(s) failed")));
            }
        }
        Command::Cost {
            backbone,
            attention,
            input,
            classes,
            attention_stages,
            convention,
        } => {
            let mut cfg = match backbone {
                BackboneKind::Vgg16 => CostConfig::vgg16(None),
                BackboneKind::MicroVgg => CostConfig::microvgg(None),
            };
            if let Some(i) = input {
                cfg.input = i;
            }
            cfg.classes = classes;
            cfg.attention_stages = attention_stages;
            cfg.convention = convention;
            if attention.eq_ignore_ascii_case("all") {
                cost_table(&cfg, buf)?;
            } else {
                if !attention.eq_ignore_ascii_case("none") {
                    cfg.attention = Some(TopologyId::parse(&attention)?);
                }
                let _ = writeln!(buf, "{}", count_cost(&cfg)?);
            }
        }
        Command::Recommend {
            n_samples,
            fine_grained,
        } => {
            if n_samples == 0 {
                return Err(Error::Config("sample count must be at least 1".into()).into());
            }
            let _ = writeln!(buf, "{}", recommend(n_samples, fine_grained));
        }
        Command::Bootstrap {
            a,
            b,
            resamples,
            seed,
        } => {
            let r = bootstrap_compare(
                &read_correctness(&a)?,
                &read_correctness(&b)?,
                resamples,
                seed,
            )?;
            let _ = writeln!(buf, "{r}");
        }
        Command::GenData {
            kind,
            n,
            shape,
            classes,
            noise,
            amplitude,
            seed,
            out,
        } => {
            let kind = match kind {
                KindArg::Spatial => SynthKind::Spatial,
                KindArg::Channel => SynthKind::Channel,
                KindArg::Mixed => SynthKind::Mixed,
            };
            let spec = SynthSpec::new(kind, n, shape, classes)
                .noise(noise)
                .amplitude(amplitude)
                .seed(seed);
            let bundle = generate_synthetic(&spec)?;
            save_dataset(&bundle, &out)?;
            let _ = writeln!(
                buf,
                "wrote {} images of {:?} in {} classes to {}",
                bundle.len(),
                bundle.image_shape(),
                bundle.class_count,
                out.display()
            );
        }
        Command::Train {
            data,
            topologies,
            seeds,
            epochs,
            batch_size,
            lr,
            label_smoothing,
            class_weighted,
            stages,
            convs_per_stage,
            split_seed,
            tag,
            out,
        } => {
            let bundle = load_dataset(&data)?;
            let topologies = topologies
                .iter()
                .map(|t| {
                    if t.eq_ignore_ascii_case("baseline") || t.eq_ignore_ascii_case("none") {
                        Ok(None)
                    } else {
                        TopologyId::parse(t).map(Some)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let tag = tag.unwrap_or_else(|| file_stem(&data));
            let mut cfg = ExperimentConfig::new(tag, topologies);
            cfg.seeds = seeds;
            cfg.split_seed = split_seed;
            let t = &mut cfg.train;
            t.epochs = epochs.unwrap_or(t.epochs);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.lr0 = lr.unwrap_or(t.lr0);
            t.label_smoothing = label_smoothing.unwrap_or(t.label_smoothing);
            t.class_weighted = class_weighted;
            if let Some(s) = stages {
                cfg.stage_channels = s;
            }
            cfg.convs_per_stage = convs_per_stage.unwrap_or(cfg.convs_per_stage);
            let rows = run_experiment(&bundle, &cfg, &out)?;
            let _ = writeln!(
                buf,
                "{:<10} {:>4} {:>6} {:>8} {:>8}",
                "topology", "runs", "failed", "mean", "std"
            );
            for r in &rows {
                let _ = writeln!(
                    buf,
                    "{:<10} {:>4} {:>6} {:>8.4} {:>8.4}",
                    r.topology,
                    r.accs.len() + r.failed,
                    r.failed,
                    r.mean,
                    r.std
                );
            }
            let _ = writeln!(buf, "records and {SUMMARY_FILE} in {}", out.display());
        }
        Command::Report {
            dir,
            resamples,
            seed,
        } => {
            let records = load_records(&dir)?;
            if records.is_empty() {
                return Err(Error::Data(format!("no run records in {}", dir.display())).into());
            }
            let _ = write!(buf, "{}", report(&records, resamples, seed)?);
        }
    }
    Ok(())
}

fn cost_table(base: &CostConfig, buf: &mut String) -> Result<(), Error> {
    let baseline = count_cost(base)?;
    for a in &baseline.assumptions {
        let _ = writeln!(buf, "# {a}");
    }
    let _ = writeln!(
        buf,
        "{:<10} {:>10} {:>10}",
        "model", "Params(M)", "FLOPs(G)"
    );
    let _ = writeln!(
        buf,
        "{:<10} {:>10} {:>10}",
        base.backbone.to_string(),
        baseline.params_m,
        baseline.flops_g
    );
    for id in TopologyId::ALL {
        let r = count_cost(&CostConfig {
            attention: Some(id),
            ..base.clone()
        })?;
        let _ = writeln!(
            buf,
            "{:<10} {:>10} {:>10}",
            format!("+{}", id.name()),
            r.params_m,
            r.flops_g
        );
    }
    Ok(())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into())
}

fn read_correctness(path: &Path) -> Result<Vec<bool>, Error> {
    let text = std::fs::read_to_string(path).map_err(Error::io_at(path))?;
    if let Ok(rec) = RunRecord::from_toml(&text) {
        return Ok(rec.test_correct.0);
    }
    text.chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::Data(format!(
                "{}: expected a run record or 0/1 characters, found `{other}`",
                path.display()
            ))),
        })
        .collect()
}
