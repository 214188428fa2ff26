use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bwnkt::config::RunConfig;
use bwnkt::datasynth::{self, Dataset, CLASS_NAMES};
use bwnkt::detect::{self, MapReport};
use bwnkt::gradcheck::{self, DEFAULT_NETWORKS, NETWORK_TOLERANCE};
use bwnkt::network::{self, build_minidark, Model};
use bwnkt::train::{self, CurriculumMode};
use bwnkt::{Error, Result};

const CONFIG_ECHO: &str = "effective_config.toml";
const RUN_META: &str = "run.toml";
const METRICS: &str = "metrics.csv";

#[derive(Parser)]
#[command(
    name = "bwnkt",
    version,
    about = "Binary-weight detector training with stage-wise binarization and knowledge transfer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shape-detection dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train the full-precision teacher.
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a binary-weight student from a teacher.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
        /// stage, nonstage, kt or kt-stagewise.
        #[arg(long, default_value = "kt")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Score a model on a dataset and dump its detections.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Per-layer byte table and compression ratio.
    SizeReport {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write the bit-packed model file.
    Export {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference gradient suite and the binarized-weight gradient check.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_NETWORKS)]
        networks: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::GenData { config, out, count, seed, force } => gen_data(config.as_deref(), &out, count, seed, force),
        Command::TrainTeacher { config, data, val, out, force } => {
            train_teacher(config.as_deref(), &data, val.as_deref(), &out, force)
        }
        Command::Distill { config, teacher, data, val, mode, out, force } => {
            distill(config.as_deref(), &teacher, &data, val.as_deref(), &mode, &out, force)
        }
        Command::Eval { model, data, out, force } => eval(&model, &data, &out, force),
        Command::SizeReport { model } => {
            print!("{}", network::size_report(&network::load_model(&model)?).render());
            Ok(0)
        }
        Command::Export { model, out, force } => export(&model, &out, force),
        Command::Gradcheck { seed, networks } => run_gradcheck(seed, networks),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.display().to_string(), source: e })
}

/// Creates the run directory, refusing to reuse a non-empty one unless forced.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("output {} exists and is not a directory", dir.display())));
        }
        let mut entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
        if entries.next().is_some() && !force {
            return Err(Error::Config(format!("output {} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })
}

fn prepare_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("output {} exists; pass --force to overwrite", path.display())));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.display().to_string(), source: e })?;
    }
    Ok(())
}

fn check_classes(data: &Dataset, classes: usize, what: &str) -> Result<()> {
    match data.samples.iter().flat_map(|s| &s.labels).find(|g| g.class_id >= classes) {
        Some(g) => Err(Error::Config(format!("{what} has class {} but the model has {classes} classes", g.class_id))),
        None => Ok(()),
    }
}

fn load_split(path: &Path, classes: usize, what: &str) -> Result<Dataset> {
    let data = datasynth::load_dataset(path)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{what} set {} is empty", path.display())));
    }
    check_classes(&data, classes, what)?;
    Ok(data)
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: Option<u64>, force: bool) -> Result<u8> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    cfg.validate()?;
    let echo = cfg.to_toml()?;
    let data = datasynth::generate(&cfg.data, count)?;
    prepare_dir(out, force)?;
    if force {
        remove_samples(out)?;
    }
    datasynth::save_dataset(&data, out)?;
    write(&out.join(CONFIG_ECHO), echo)?;
    let hist = data.class_histogram(CLASS_NAMES.len());
    let objects: usize = data.samples.iter().map(|s| s.labels.len()).sum();
    let parts: Vec<String> = hist.iter().enumerate().map(|(c, n)| format!("{}={n}", class_name(c))).collect();
    println!("images {} objects {objects} classes {}", data.len(), parts.join(" "));
    Ok(0)
}

/// Drops the sample files of an earlier dataset so the new sequence stays contiguous.
fn remove_samples(dir: &Path) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?;
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: dir.display().to_string(), source: e })?.path();
        let is_sample = path.extension().is_some_and(|e| e == "bwdi" || e == "txt")
            && path
                .file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.len() == 6 && s.bytes().all(|b| b.is_ascii_digit()));
        if is_sample {
            fs::remove_file(&path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        }
    }
    Ok(())
}

fn train_teacher(config: Option<&Path>, data: &Path, val: Option<&Path>, out: &Path, force: bool) -> Result<u8> {
    let cfg = load_config(config)?;
    let classes = cfg.model.classes;
    let train = load_split(data, classes, "training")?;
    let val = val.map(|v| load_split(v, classes, "validation")).transpose()?;
    prepare_dir(out, force)?;
    write(&out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    let init = build_minidark(classes, &cfg.model.anchor_pairs(), cfg.model.init_seed)?;
    let (teacher, log) = train::train_teacher(&init, &train, val.as_ref(), &cfg.teacher_kt(), cfg.train.epochs)?;
    network::save_model(&teacher, &out.join("teacher.bwnm"))?;
    write(&out.join(METRICS), train::metrics_csv(&log))?;
    let meta =
        format!("command = \"train-teacher\"\nepochs = {}\nparam_hash = \"{}\"\n", log.len(), teacher.param_hash());
    write(&out.join(RUN_META), meta)?;
    match log.last() {
        Some(last) => match last.val_map {
            Some(m) => println!("final train loss {:.6} val mAP {:.4}", last.total, m),
            None => println!("final train loss {:.6}", last.total),
        },
        None => println!("no epochs run"),
    }
    Ok(0)
}

fn distill(
    config: Option<&Path>,
    teacher: &Path,
    data: &Path,
    val: Option<&Path>,
    mode: &str,
    out: &Path,
    force: bool,
) -> Result<u8> {
    let cfg = load_config(config)?;
    let mode = CurriculumMode::parse(mode)
        .ok_or_else(|| Error::Config(format!("unknown mode {mode}; expected stage, nonstage, kt or kt-stagewise")))?;
    let teacher = network::load_model(teacher)?;
    if let Some(name) = teacher.binarized_layers().first() {
        return Err(Error::Config(format!("teacher layer {name} is binarized")));
    }
    let classes = teacher.meta.classes;
    let train = load_split(data, classes, "training")?;
    let val = val.map(|v| load_split(v, classes, "validation")).transpose()?;
    let schedule = cfg.schedule.build()?;
    prepare_dir(out, force)?;
    write(&out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    let r = train::run_curriculum(&teacher, &train, val.as_ref(), &schedule, &cfg.kt, mode)?;
    network::save_model(&r.student, &out.join("student.bwnm"))?;
    write(&out.join(METRICS), train::metrics_csv(&r.log))?;
    let mut meta = format!(
        "command = \"distill\"\nmode = \"{}\"\nteacher_hash = \"{}\"\nepochs = {}\n",
        mode.name(),
        r.teacher_hash,
        r.log.len()
    );
    let layers: Vec<String> = r.student.binarized_layers().iter().map(|l| format!("\"{l}\"")).collect();
    let _ = writeln!(meta, "binarized_layers = [{}]", layers.join(", "));
    write(&out.join(RUN_META), meta)?;
    match r.log.last().and_then(|l| l.val_map) {
        Some(m) => println!("mode {} final val mAP {m:.4}", mode.name()),
        None => println!("mode {} done", mode.name()),
    }
    Ok(0)
}

fn report_lines(report: &MapReport) -> String {
    let mut s = String::from("class,ap\n");
    for (c, ap) in report.per_class.iter().enumerate() {
        let _ = writeln!(s, "{},{}", class_name(c), ap.map_or(String::new(), |a| format!("{a:.6}")));
    }
    let _ = writeln!(s, "mAP,{:.6}", report.map);
    s
}

fn eval(model: &Path, data: &Path, out: &Path, force: bool) -> Result<u8> {
    let model: Model = network::load_model(model)?;
    let data = datasynth::load_dataset(data)?;
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    check_classes(&data, model.meta.classes, "evaluation set")?;
    let (report, images) = train::evaluate(&model, &data)?;
    prepare_dir(out, force)?;
    write(&out.join("detections.csv"), detect::write_detection_dump(&images))?;
    let table = report_lines(&report);
    write(&out.join("ap.csv"), &table)?;
    print!("{table}");
    Ok(0)
}

fn export(model: &Path, out: &Path, force: bool) -> Result<u8> {
    let m = network::load_model(model)?;
    prepare_file(out, force)?;
    network::save_model(&m, out)?;
    let r = network::size_report(&m);
    println!("wrote {} ({} bytes, ratio {:.2}x)", out.display(), r.file_bytes(), r.ratio());
    Ok(0)
}

fn run_gradcheck(seed: u64, networks: usize) -> Result<u8> {
    let r = gradcheck::run_suite(seed, networks)?;
    println!(
        "networks {} max relative error {:.3e} (tolerance {:.0e})",
        r.networks, r.max_network_error, NETWORK_TOLERANCE
    );
    println!("ste_backward max deviation from formula {:.3e}", r.ste_max_error);
    if r.passed() {
        println!("PASS");
        Ok(0)
    } else {
        println!("FAIL");
        Ok(4)
    }
}
