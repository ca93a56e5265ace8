use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deml::autodiff::Graph;
use deml::checkpoint;
use deml::config::RunConfig;
use deml::data::{self, generate_classes, verify_split, Dataset, GlyphSpec, ZeroShotSplit};
use deml::eval::{evaluate_zero_shot, RecallTable};
use deml::gradcheck;
use deml::model::Model;
use deml::oam::DEFAULT_STEPS;
use deml::pnm;
use deml::train::{train, LossComponents};
use deml::{Error, Tensor};

#[derive(Parser)]
#[command(name = "deml", version, about = "Decoupled metric learning on synthetic zero-shot glyphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a glyph dataset directory with its seen/unseen split.
    GenData(GenDataArgs),
    /// Train on the seen classes of a dataset directory.
    Train(TrainArgs),
    /// Print unseen-class Recall@K of a checkpoint as CSV.
    Eval(EvalArgs),
    /// Write the attention proposals and channel gates of one image.
    Attend(AttendArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = GlyphSpec::default().slots)]
    slots: usize,
    #[arg(long, default_value_t = GlyphSpec::default().values)]
    values: usize,
    #[arg(long, default_value_t = GlyphSpec::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = GlyphSpec::default().jitter)]
    jitter: usize,
    #[arg(long, default_value_t = GlyphSpec::default().pattern_seed)]
    pattern_seed: u64,
    #[arg(long, default_value_t = 20)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path [default: OUT/manifest.txt]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key=value file; omitted keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also checkpoint every N steps (0: final checkpoint only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Evaluate on the unseen classes every N steps (0: at the end only).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ks: Vec<usize>,
    /// Manifest path [default: OUT/manifest.txt]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ks: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    walk_steps: usize,
    /// Manifest path [default: eval_manifest.txt next to the checkpoint]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct AttendArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM or PPM image at the model's input size.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    walk_steps: usize,
    /// Manifest path [default: OUT/manifest.txt]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path [default: gradcheck_manifest.txt]
    #[arg(long)]
    manifest: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::from(Error::Io { path: path.to_path_buf(), source: e })
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_file(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(io_err(path))
}

struct Manifest {
    text: String,
}

impl Manifest {
    fn new(command: &str) -> Self {
        let mut text = format!("command={command}\nversion={}\n", env!("CARGO_PKG_VERSION"));
        let args: Vec<String> = std::env::args().skip(1).collect();
        let _ = writeln!(text, "argv={}", args.join(" "));
        Manifest { text }
    }

    fn set(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        let _ = writeln!(self.text, "{key}={value}");
        self
    }

    fn config(&mut self, cfg: &RunConfig) -> &mut Self {
        self.text.push_str(&cfg.to_text());
        self
    }

    fn model(&mut self, model: &Model) -> &mut Self {
        let cfg = RunConfig { model: model.config.clone(), ..RunConfig::default() };
        for key in ["scales", "branches", "dim", "share_fnet_across_scales", "use_cam", "input_channels", "input_size", "fnet", "gnet"] {
            let _ = writeln!(self.text, "{key}={}", cfg.get(key).expect("model key"));
        }
        self
    }

    fn write(&self, path: &Path) -> CliResult {
        write_file(path, &self.text)
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let spec = GlyphSpec {
        slots: a.slots,
        values: a.values,
        noise: a.noise,
        jitter: a.jitter,
        pattern_seed: a.pattern_seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let split = ZeroShotSplit::standard(&spec)?;
    let report = verify_split(&split, &spec)?;
    let mut classes: Vec<usize> = split.seen.iter().chain(&split.unseen).copied().collect();
    classes.sort_unstable();
    let data = generate_classes(&spec, &classes, a.per_class, a.seed)?;
    data::save_dir(&a.out, &data, &split)?;

    let mut m = Manifest::new("gen-data");
    m.set("out", a.out.display())
        .set("slots", spec.slots)
        .set("values", spec.values)
        .set("noise", spec.noise)
        .set("jitter", spec.jitter)
        .set("pattern_seed", spec.pattern_seed)
        .set("per_class", a.per_class)
        .set("seed", a.seed)
        .set("images", data.len())
        .set("seen_classes", format!("{:?}", split.seen))
        .set("unseen_classes", format!("{:?}", split.unseen))
        .set("sufficient_subsets", format!("{:?}", report.sufficient_subsets));
    m.write(&a.manifest.unwrap_or_else(|| a.out.join("manifest.txt")))?;
    eprintln!("wrote {} images of {} classes to {}", data.len(), classes.len(), a.out.display());
    Ok(())
}

/// Seen and unseen halves of a dataset directory.
fn load_split(dir: &Path) -> CliResult<(Dataset, Dataset, ZeroShotSplit)> {
    let (data, split) = data::load_dir(dir)?;
    let overlap = split.overlap();
    if !overlap.is_empty() {
        return Err(Error::SplitContamination(overlap).into());
    }
    Ok((data.subset(&split.seen), data.subset(&split.unseen), split))
}

fn metrics_header(ks: &[usize], scales: usize) -> String {
    let mut h = String::from("iteration");
    for k in ks {
        let _ = write!(h, ",R@{k}");
    }
    for i in 0..scales {
        for k in ks {
            let _ = write!(h, ",root{i}_R@{k}");
        }
    }
    h
}

fn metrics_row(step: usize, t: &RecallTable) -> String {
    let mut row = step.to_string();
    for v in t.holistic.iter().chain(t.per_root.iter().flatten()) {
        let _ = write!(row, ",{v}");
    }
    row
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::parse("")?,
    };
    let (seen, unseen, split) = load_split(&a.data)?;
    if seen.is_empty() {
        return Err(Failure::Usage(format!("{} has no images of seen classes", a.data.display())));
    }
    create_dir(&a.out)?;
    let mut m = Manifest::new("train");
    m.set("data", a.data.display())
        .set("out", a.out.display())
        .set("checkpoint_every", a.checkpoint_every)
        .set("eval_every", a.eval_every)
        .set("ks", format!("{:?}", a.ks))
        .set("train_images", seen.len())
        .set("unseen_images", unseen.len())
        .config(&cfg);
    m.write(&a.manifest.clone().unwrap_or_else(|| a.out.join("manifest.txt")))?;

    let mut model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    writeln!(log, "{}", LossComponents::CSV_HEADER).map_err(io_err(&log_path))?;
    let metrics_path = a.out.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?);
    writeln!(metrics, "{}", metrics_header(&a.ks, cfg.model.scales)).map_err(io_err(&metrics_path))?;

    let evaluate = |model: &Model, step: usize, out: &mut BufWriter<File>| -> deml::Result<()> {
        if unseen.is_empty() {
            return Ok(());
        }
        let t = evaluate_zero_shot(model, &unseen, &split, &a.ks, cfg.train.walk_steps)?;
        writeln!(out, "{}", metrics_row(step, &t)).map_err(|e| Error::Io { path: metrics_path.clone(), source: e })?;
        eprintln!("step {step}: unseen R@{} = {:.4}", a.ks[0], t.holistic[0]);
        Ok(())
    };
    evaluate(&model, 0, &mut metrics)?;

    let total = cfg.train.iterations;
    train(&mut model, &seen, &cfg.train, |step, parts, model| {
        writeln!(log, "{}", parts.csv_row(step)).map_err(|e| Error::Io { path: log_path.clone(), source: e })?;
        if a.checkpoint_every > 0 && step % a.checkpoint_every == 0 && step < total {
            checkpoint::save(model, a.out.join(format!("step_{step:06}.deml")))?;
        }
        if (a.eval_every > 0 && step % a.eval_every == 0) || step == total {
            evaluate(model, step, &mut metrics)?;
        }
        Ok(())
    })?;
    log.flush().map_err(io_err(&log_path))?;
    metrics.flush().map_err(io_err(&metrics_path))?;
    checkpoint::save(&model, a.out.join("model.deml"))?;
    eprintln!("wrote {}", a.out.join("model.deml").display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let model = checkpoint::load(&a.checkpoint)?;
    let (data, split) = data::load_dir(&a.data)?;
    let unseen = data.subset(&split.unseen);
    let mut m = Manifest::new("eval");
    m.set("checkpoint", a.checkpoint.display())
        .set("data", a.data.display())
        .set("ks", format!("{:?}", a.ks))
        .set("walk_steps", a.walk_steps)
        .set("unseen_images", unseen.len())
        .model(&model);
    let default = a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval_manifest.txt");
    m.write(&a.manifest.unwrap_or(default))?;
    let t = evaluate_zero_shot(&model, &unseen, &split, &a.ks, a.walk_steps)?;
    println!("{}", t.csv_header());
    for row in t.csv_rows() {
        println!("{row}");
    }
    Ok(())
}

fn attend_cmd(a: AttendArgs) -> CliResult {
    let model = checkpoint::load(&a.checkpoint)?;
    let image = pnm::read_image(&a.image)?;
    let bb = &model.config.backbone;
    if image.shape() != [bb.input_channels, bb.input_size, bb.input_size] {
        return Err(Failure::Usage(format!(
            "{} is {:?}, the model expects [{}, {s}, {s}]",
            a.image.display(),
            image.shape(),
            bb.input_channels,
            s = bb.input_size
        )));
    }
    create_dir(&a.out)?;
    let mut m = Manifest::new("attend");
    m.set("checkpoint", a.checkpoint.display())
        .set("image", a.image.display())
        .set("out", a.out.display())
        .set("walk_steps", a.walk_steps)
        .model(&model);
    m.write(&a.manifest.clone().unwrap_or_else(|| a.out.join("manifest.txt")))?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let pass = model.forward(&mut g, &bound, &Tensor::stack(&[image])?, a.walk_steps)?;
    let mut crops = String::from("scale,center_row,center_col,side\n");
    for (i, scale) in pass.scales.iter().enumerate() {
        pnm::write_gray(&scale.input.select(0)?, a.out.join(format!("scale{i}_input.pgm")))?;
        let p = &scale.proposals[0];
        pnm::write_pgm(&Tensor::new(&[p.h, p.w], p.mass.clone())?, a.out.join(format!("scale{i}_proposal.pgm")))?;
        let c = &scale.crops[0];
        let _ = writeln!(crops, "{i},{},{},{}", c.center_row, c.center_col, c.side);
        if !scale.gates.is_empty() {
            let channels = g.shape(scale.gates[0])[1];
            let mut csv = String::from("branch");
            for ch in 0..channels {
                let _ = write!(csv, ",c{ch}");
            }
            csv.push('\n');
            for (j, &gate) in scale.gates.iter().enumerate() {
                let _ = write!(csv, "{j}");
                for v in g.value(gate).data() {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
            write_file(&a.out.join(format!("scale{i}_gates.csv")), &csv)?;
        }
    }
    write_file(&a.out.join("crops.csv"), &crops)?;
    eprintln!("wrote {} scales to {}", pass.scales.len(), a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult {
    let mut m = Manifest::new("gradcheck");
    m.set("seed", a.seed)
        .set("fd_step", gradcheck::FD_STEP)
        .set("tolerance", gradcheck::GRAD_TOL)
        .set("end_to_end_tolerance", gradcheck::END_TO_END_TOL);
    m.write(&a.manifest.unwrap_or_else(|| PathBuf::from("gradcheck_manifest.txt")))?;
    let entries = gradcheck::suite(a.seed)?;
    println!("operation,max_rel_err,tolerance,result");
    for e in &entries {
        println!("{},{:e},{:e},{}", e.name, e.report.max_rel_err, e.tolerance, if e.passes() { "pass" } else { "FAIL" });
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passes()).map(|e| e.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Attend(a) => attend_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
