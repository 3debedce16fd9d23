use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use netresil_core::dataset::TemporalGraphDataset;
use netresil_core::dynamics::IntegrateOptions;
use netresil_core::eval::{self, AttackReport, EvalSplit, FractionOutcome, VerdictOptions};
use netresil_core::synth::{self, GeneratorConfig, PRESET_NAMES};
use netresil_core::trainer::{self, Checkpoint, TrainConfig};
use serde::Serialize;
use serde_json::Value;

use crate::manifest::{self, ManifestBuilder};
use crate::{AttackArgs, Cli, Command, EvalArgs, GenerateArgs, SplitArg, TrainArgs};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(netresil_core::Error),
}

impl Failure {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Usage(format!("{}: {e}", path.display()))
    }

    /// 1 for usage and configuration errors, 2 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(s) => f.write_str(s),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<netresil_core::Error> for Failure {
    fn from(e: netresil_core::Error) -> Self {
        Self::Core(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

pub fn run(cli: &Cli) -> Result<()> {
    let log = |msg: &str| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Generate(a) => generate(a, &log),
        Command::Train(a) => train(a, &log),
        Command::Eval(a) => evaluate(a, &log),
        Command::Attack(a) => attack(a, &log),
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

/// Recursively overlays `patch` onto `base`; objects merge, everything else
/// replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let raw = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Failure::Usage(format!("{}: malformed JSON: {e}", path.display())))
}

fn from_merged<T: serde::de::DeserializeOwned>(v: Value, source: &Path) -> Result<T> {
    serde_json::from_value(v).map_err(|e| Failure::Usage(format!("{}: invalid configuration: {e}", source.display())))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Failure::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Failure::io(path, e))
}

fn unknown_preset(name: &str) -> Failure {
    Failure::Usage(format!(
        "unknown preset `{name}`; available presets: {}",
        PRESET_NAMES.join(", ")
    ))
}

fn generate(a: &GenerateArgs, log: &dyn Fn(&str)) -> Result<()> {
    if a.list_presets {
        for name in PRESET_NAMES {
            println!("{name}");
        }
        return Ok(());
    }
    let mut m = ManifestBuilder::start("generate");
    let mut cfg: GeneratorConfig = match (&a.preset, &a.config) {
        (Some(name), None) => synth::preset(name).ok_or_else(|| unknown_preset(name))?,
        (None, Some(path)) => {
            m.input(path)?;
            let raw = read_json(path)?;
            // A config may name a preset to start from and override some of its fields.
            let mut base = match raw.get("name").and_then(Value::as_str).and_then(synth::preset) {
                Some(p) => to_value(&p),
                None => Value::Object(Default::default()),
            };
            merge(&mut base, raw);
            from_merged(base, path)?
        }
        _ => return Err(Failure::Usage("pass exactly one of --preset or --config".into())),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = a.out.as_deref().expect("clap requires --out");
    if !a.force && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(Failure::Usage(format!(
            "output directory {} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    log(&format!("generating `{}` (N = {}, M = {}, T = {})", cfg.name, cfg.n_nodes, cfg.feature_dim, cfg.horizon));
    let d = synth::generate(&cfg)?;
    d.write_dir(out)?;
    let outputs = [
        out.join(netresil_core::dataset::META_FILE),
        out.join(netresil_core::dataset::SNAPSHOTS_FILE),
    ];
    m.finish(to_value(&cfg), &outputs, &out.join("manifest.json"))?;
    log(&format!("wrote {} (digest {})", out.display(), manifest::dir_digest(out)?));
    Ok(())
}

/// Preset defaults for the dataset, overlaid with the config file, then with
/// flags.
pub fn resolve_train_config(d: &TemporalGraphDataset, file: Option<(&Path, Value)>, a: &TrainArgs) -> Result<TrainConfig> {
    let base = if PRESET_NAMES.contains(&d.meta.name.as_str()) {
        synth::preset_train_config(&d.meta.name)
    } else {
        TrainConfig::default()
    };
    let mut cfg = match file {
        Some((path, raw)) => {
            let mut v = to_value(&base);
            merge(&mut v, raw);
            from_merged(v, path)?
        }
        None => base,
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(w) = a.window {
        cfg.window = w;
    }
    Ok(cfg)
}

fn train(a: &TrainArgs, log: &dyn Fn(&str)) -> Result<()> {
    let mut m = ManifestBuilder::start("train");
    let file = match &a.config {
        Some(p) => {
            m.input(p)?;
            Some((p.as_path(), read_json(p)?))
        }
        None => None,
    };
    let data: PathBuf = match (&a.data, file.as_ref().and_then(|(_, v)| v.get("dataset")).and_then(Value::as_str)) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(Failure::Usage("no dataset given: pass --data or set `dataset` in --config".into())),
    };
    refuse_existing(&a.out, a.force)?;
    m.input(&data)?;
    let d = TemporalGraphDataset::read_dir(&data)?;
    let mut cfg = resolve_train_config(&d, file, a)?;
    cfg.dataset = Some(data.display().to_string());
    cfg.validate(true)?;
    log(&format!(
        "training on `{}` for {} epochs (seed {}, lr {})",
        d.meta.name, cfg.epochs, cfg.seed, cfg.learning_rate
    ));
    let every = (cfg.epochs / 10).max(1);
    let last = cfg.epochs.saturating_sub(1);
    let ck = trainer::train_with(&d, &cfg, |epoch, l| {
        if epoch % every == 0 || epoch == last {
            log(&format!(
                "epoch {epoch:>5}  loss {:.6}  physics {:.6}  topology {:.6}",
                l.joint, l.physics, l.topology
            ));
        }
    })?;
    ck.save(&a.out)?;
    m.finish(to_value(&cfg), &[a.out.clone()], &manifest::sidecar(&a.out))?;
    log(&format!("wrote {}", a.out.display()));
    Ok(())
}

/// Number of worker threads for evaluation, capped by `NETRESIL_THREADS`.
fn thread_budget() -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var("NETRESIL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .map_or(cores, |n| n.min(cores))
}

fn evaluate(a: &EvalArgs, log: &dyn Fn(&str)) -> Result<()> {
    let mut m = ManifestBuilder::start("eval");
    refuse_existing(&a.out, a.force)?;
    m.input(&a.ckpt)?;
    m.input(&a.data)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let d = TemporalGraphDataset::read_dir(&a.data)?;
    eval::check_compatible(&ck, &d)?;
    let seeds = if a.seeds.is_empty() { vec![ck.config.seed] } else { a.seeds.clone() };
    let which = match a.split {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Test => EvalSplit::Test,
    };
    let workers = thread_budget().min(seeds.len());
    log(&format!("evaluating {} seed(s) on {workers} thread(s)", seeds.len()));
    let chunk = seeds.len().div_ceil(workers);
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .chunks(chunk)
            .map(|part| s.spawn(|| eval::evaluate_checkpoint(&ck, &d, which, a.threshold, part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect::<netresil_core::Result<Vec<_>>>()
    })?
    .concat();
    let config_json = serde_json::to_string(&ck.config).expect("config serializes");
    let report = eval::multi_run_report(&runs, &seeds, &manifest::text_digest(&config_json));
    write_file(&a.out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    for name in ["acc", "f1", "mae", "rmse"] {
        if let Some(s) = report.metrics.get(name) {
            log(&format!("{name:>10}  {}", s.display(4)));
        }
    }
    m.finish(
        serde_json::json!({ "split": format!("{which:?}").to_lowercase(), "threshold": a.threshold, "seeds": seeds }),
        &[a.out.clone()],
        &manifest::sidecar(&a.out),
    )?;
    Ok(())
}

#[derive(Serialize)]
struct AttackVerdicts<'a> {
    subject: &'static str,
    seed: u64,
    baseline_mean: f64,
    outcomes: &'a [FractionOutcome],
}

fn attack(a: &AttackArgs, log: &dyn Fn(&str)) -> Result<()> {
    let mut m = ManifestBuilder::start("attack");
    if let Some(bad) = a.fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(Failure::Usage(format!("attack fraction {bad} is outside [0, 1]")));
    }
    let verdict_path = a.verdicts.clone().unwrap_or_else(|| a.out.with_extension("json"));
    if verdict_path == a.out {
        return Err(Failure::Usage("--verdicts must differ from --out".into()));
    }
    refuse_existing(&a.out, a.force)?;
    refuse_existing(&verdict_path, a.force)?;
    m.input(&a.data)?;
    let d = TemporalGraphDataset::read_dir(&a.data)?;
    let generator = synth::embedded_config(&d);
    let seed = a.seed.or(generator.as_ref().map(|g| g.seed)).unwrap_or(0);
    let mut fractions = a.fractions.clone();
    if !fractions.contains(&0.0) {
        fractions.insert(0, 0.0);
    }
    let v = VerdictOptions::default();
    let (subject, report): (&str, AttackReport) = match &a.ckpt {
        Some(path) => {
            m.input(path)?;
            let ck = Checkpoint::load(path)?;
            log(&format!("attacking checkpoint {} ({} rollout steps)", path.display(), a.steps));
            ("checkpoint", eval::attack_checkpoint(&ck, &d, &fractions, seed, a.steps, v)?)
        }
        None => {
            let g = generator.as_ref().ok_or_else(|| {
                Failure::Usage(format!(
                    "{} does not record its generating dynamics; pass --ckpt to attack a trained model",
                    a.data.display()
                ))
            })?;
            if a.sample_every == 0 || !(a.dt > 0.0) || !(a.t_end > 0.0) {
                return Err(Failure::Usage("--dt and --t-end must be positive and --sample-every >= 1".into()));
            }
            let opts = IntegrateOptions {
                dt: a.dt,
                t_end: a.t_end,
                sample_every: a.sample_every,
            };
            let u0 = synth::initial_condition(g)?;
            log(&format!("simulating `{}` attacks to t = {}", netresil_core::dynamics::NodeDynamics::id(&g.dynamics), a.t_end));
            ("simulation", eval::attack_simulation(&d.snapshots[0].graph, &g.dynamics, &u0, &fractions, seed, opts, v)?)
        }
    };
    write_file(&a.out, &report.csv())?;
    let verdicts = AttackVerdicts {
        subject,
        seed,
        baseline_mean: report.baseline_mean,
        outcomes: &report.outcomes,
    };
    write_file(&verdict_path, &(serde_json::to_string_pretty(&verdicts).expect("verdicts serialize") + "\n"))?;
    for o in &report.outcomes {
        log(&format!(
            "fraction {:.2}: removed {:>4}, recovery ratio {:.4}, {}",
            o.fraction,
            o.removed,
            o.recovery_ratio,
            if o.verdict.resilient { "resilient" } else { "not resilient" }
        ));
    }
    m.finish(
        serde_json::json!({ "subject": subject, "fractions": fractions, "seed": seed, "dt": a.dt, "t_end": a.t_end, "sample_every": a.sample_every, "steps": a.steps }),
        &[a.out.clone(), verdict_path.clone()],
        &manifest::sidecar(&a.out),
    )?;
    Ok(())
}
