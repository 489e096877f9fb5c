//! `mixacm`: train teachers and students, evaluate them, and check the
//! mixup bound from the command line.
//!
//! Every command writes `manifest.txt` (resolved config plus version) into
//! its output directory before doing any work.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mixacm::acm::{acm_means, write_acm_csv};
use mixacm::attacks::{evaluate, write_eval_csv, AttackConfig, AttackKind, EvalRow};
use mixacm::data::{subsample, Dataset};
use mixacm::model::{make_student, make_teacher, BlockCnn};
use mixacm::theory::{random_instance, verify_mixup_bound, write_theory_csv, InstanceRanges};
use mixacm::trainer::config::{parse_list, parse_real, RunConfig};
use mixacm::trainer::{Checkpoint, Mode, RunContext, Trainer};
use mixacm::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const VERSION: &str = env!("MIXACM_VERSION");

#[derive(Parser)]
#[command(name = "mixacm", version = VERSION, about = "Robustness distillation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace an existing run directory.
    #[arg(long)]
    force: bool,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Stratified fraction of the data to use.
    #[arg(long)]
    data_fraction: Option<String>,
}

#[derive(Args, Clone)]
struct DistillFlags {
    /// Teacher checkpoint; overrides `distill.teacher`.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Train on clean inputs only.
    #[arg(long)]
    no_mixup: bool,
    /// Drop the KLD term (cross-entropy plus ACM).
    #[arg(long)]
    no_kld: bool,
    /// ACM plus cross-entropy on clean inputs.
    #[arg(long, conflicts_with = "kd_only")]
    acm_only: bool,
    /// KLD plus cross-entropy on clean inputs.
    #[arg(long)]
    kd_only: bool,
    /// Comma-separated 1-based tap indices, e.g. `3,4`.
    #[arg(long)]
    taps: Option<String>,
}

#[derive(Args, Clone)]
struct AttackFlags {
    /// none, fgsm or pgd.
    #[arg(long, default_value = "pgd")]
    attack: String,
    /// PGD iterations.
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long, default_value = "2/255")]
    step: String,
}

#[derive(Subcommand)]
enum Command {
    /// PGD adversarial training of a teacher.
    TrainTeacher(Common),
    /// Plain cross-entropy training of a student.
    TrainNatural(Common),
    /// MixACM distillation of a student from a frozen teacher.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DistillFlags,
    },
    /// Clean and attacked accuracy of a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        attack: AttackFlags,
    },
    /// Per-tap mean activated channel maps of a checkpoint.
    AcmDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Checks the mixup bound on random admissible logistic instances.
    TheoryCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Distills one student per grid value and aggregates the results.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: DistillFlags,
        /// alpha_acm, alpha_kld or gamma.
        #[arg(long)]
        param: String,
        /// Comma-separated values; fractions allowed.
        #[arg(long, value_delimiter = ',')]
        grid: Vec<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Contract(_) | Error::InstanceRejected(_)) => 2,
        Some(Error::Format(_) | Error::Consistency(_) | Error::Dimension(_) | Error::Io(_)) => 3,
        Some(Error::Numeric(_) | Error::EmptyTape(_)) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::TrainTeacher(c) => {
            let cfg = resolve(&c, |cfg| cfg.train.mode = Mode::AdvTrain)?;
            prepare(&c, &cfg, "train-teacher")?;
            train(&cfg, &c.out, None)
        }
        Command::TrainNatural(c) => {
            let cfg = resolve(&c, |cfg| cfg.train.mode = Mode::Natural)?;
            prepare(&c, &cfg, "train-natural")?;
            train(&cfg, &c.out, None)
        }
        Command::Distill { common, flags } => {
            let cfg = resolve(&common, |cfg| cfg.train.mode = Mode::MixAcm)?;
            let cfg = apply_distill_flags(cfg, &flags)?;
            prepare(&common, &cfg, "distill")?;
            let teacher = load_teacher(&cfg)?;
            train(&cfg, &common.out, Some(&teacher))
        }
        Command::Evaluate { common, checkpoint, attack } => {
            let cfg = resolve(&common, |_| {})?;
            prepare(&common, &cfg, "evaluate")?;
            let model = load_model(&checkpoint)?;
            let (_, test) = cfg.load_data()?;
            let test = if cfg.data.fraction < 1.0 { subsample(&test, cfg.data.fraction, cfg.train.seed)? } else { test };
            let kind: AttackKind = attack.attack.parse()?;
            let acfg = AttackConfig {
                epsilon: parse_real(&attack.eps)?,
                step_size: parse_real(&attack.step)?,
                iterations: if kind == AttackKind::Fgsm { 1 } else { attack.k },
                random_start: kind == AttackKind::Pgd,
                ..AttackConfig::pgd(attack.k)
            };
            let row = evaluate(&model, &test, kind, &acfg, cfg.eval_batch_size, cfg.train.seed)?;
            write_eval(&common.out, &[row.clone()])?;
            println!("clean_acc={} robust_acc={}", row.clean_acc, row.robust_acc);
            Ok(())
        }
        Command::AcmDump { common, checkpoint } => {
            let cfg = resolve(&common, |_| {})?;
            prepare(&common, &cfg, "acm-dump")?;
            let model = load_model(&checkpoint)?;
            let (_, test) = cfg.load_data()?;
            let means = acm_means(&model, test.images(), cfg.eval_batch_size)?;
            fs::create_dir_all(common.out.join("acm"))?;
            write_acm_csv(BufWriter::new(File::create(common.out.join("acm/acm_means.csv"))?), &means)?;
            Ok(())
        }
        Command::TheoryCheck { common, instances } => {
            let cfg = resolve(&common, |_| {})?;
            prepare(&common, &cfg, "theory-check")?;
            if instances == 0 {
                return Err(Error::Config("need at least one instance".into()).into());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let ranges = InstanceRanges::default();
            let rows = (0..instances)
                .map(|_| verify_mixup_bound(&random_instance(&mut rng, &ranges)))
                .collect::<mixacm::Result<Vec<_>>>()?;
            write_theory_csv(BufWriter::new(File::create(common.out.join("theory.csv"))?), &rows)?;
            let failed = rows.iter().filter(|r| !r.holds).count();
            let min_margin = rows.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min);
            println!("instances={instances} failed={failed} min_margin={min_margin}");
            if failed > 0 {
                bail!("bound violated on {failed} of {instances} instances");
            }
            Ok(())
        }
        Command::Sweep { common, flags, param, grid } => {
            let base = resolve(&common, |cfg| cfg.train.mode = Mode::MixAcm)?;
            let base = apply_distill_flags(base, &flags)?;
            if grid.is_empty() || grid.iter().any(|g| g.trim().is_empty()) {
                return Err(Error::Config("sweep grid is empty".into()).into());
            }
            let key = match param.as_str() {
                "alpha_acm" | "alpha_kld" | "gamma" => format!("distill.{param}"),
                other => return Err(Error::Config(format!("cannot sweep {other:?}")).into()),
            };
            let values = grid.iter().map(|g| parse_real(g)).collect::<mixacm::Result<Vec<_>>>()?;
            prepare(&common, &base, "sweep")?;
            let teacher = load_teacher(&base)?;
            let mut lines = vec!["param,value,clean_acc,robust_acc".to_string()];
            for (raw, value) in grid.iter().zip(&values) {
                let mut cfg = base.clone();
                cfg.set(&key, raw)?;
                let dir = common.out.join(format!("{param}={value}"));
                fs::create_dir_all(&dir)?;
                write_manifest(&dir, &cfg, "distill")?;
                train(&cfg, &dir, Some(&teacher))?;
                let eval = fs::read_to_string(dir.join("eval.csv"))?;
                let pgd = eval.lines().nth(2).context("missing PGD row")?;
                let cols: Vec<&str> = pgd.split(',').collect();
                lines.push(format!("{param},{value},{},{}", cols[4], cols[5]));
            }
            fs::write(common.out.join("sweep.csv"), lines.join("\n") + "\n")?;
            Ok(())
        }
    }
}

/// Config file, then `--set` overrides, then dedicated flags.
fn resolve(c: &Common, mode: impl FnOnce(&mut RunConfig)) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io(io) => Error::Config(format!("cannot read {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    mode(&mut cfg);
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(f) = &c.data_fraction {
        cfg.data.fraction = parse_real(f)?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

fn apply_distill_flags(mut cfg: RunConfig, f: &DistillFlags) -> anyhow::Result<RunConfig> {
    if let Some(t) = &f.teacher {
        cfg.teacher = Some(t.clone());
    }
    if f.no_mixup || f.acm_only || f.kd_only {
        cfg.mixup.enabled = false;
    }
    if f.no_kld || f.acm_only {
        cfg.distill.alpha_kld = 0.0;
    }
    if f.kd_only {
        cfg.distill.alpha_acm = 0.0;
    }
    if let Some(t) = &f.taps {
        cfg.distill.taps = Some(parse_list(t)?);
    }
    cfg.distill.validate()?;
    Ok(cfg)
}

/// Creates the run directory and writes the manifest before anything else.
fn prepare(c: &Common, cfg: &RunConfig, command: &str) -> anyhow::Result<()> {
    if c.out.exists() {
        if !c.force {
            return Err(Error::Config(format!("{} already exists; pass --force to replace it", c.out.display())).into());
        }
        fs::remove_dir_all(&c.out).with_context(|| format!("removing {}", c.out.display()))?;
    }
    fs::create_dir_all(&c.out)?;
    write_manifest(&c.out, cfg, command)
}

fn write_manifest(dir: &Path, cfg: &RunConfig, command: &str) -> anyhow::Result<()> {
    let text = format!("# mixacm {VERSION}\n# command: {command}\n{}", cfg.to_text());
    fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<BlockCnn> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(BlockCnn::from_params(ckpt.spec, ckpt.params)?)
}

fn load_teacher(cfg: &RunConfig) -> anyhow::Result<BlockCnn> {
    let path = cfg
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("distillation needs --teacher or distill.teacher".into()))?;
    Ok(load_model(path)?.into_frozen())
}

fn write_eval(dir: &Path, rows: &[EvalRow]) -> anyhow::Result<()> {
    write_eval_csv(BufWriter::new(File::create(dir.join("eval.csv"))?), rows)?;
    Ok(())
}

/// Trains, saves checkpoints and metrics, then writes clean and PGD-20 rows to `eval.csv`.
fn train(cfg: &RunConfig, out: &Path, teacher: Option<&BlockCnn>) -> anyhow::Result<()> {
    let (train, test) = cfg.load_data()?;
    let [c, _, _] = train.image_shape();
    let classes = train.classes();
    let model = match cfg.train.mode {
        Mode::AdvTrain => make_teacher(&cfg.model.teacher_spec(c, classes)?, cfg.train.seed)?,
        _ => make_student(&cfg.model.student_spec(c, classes)?, cfg.train.seed)?,
    };
    let ctx = RunContext {
        eval: Some(&test),
        teacher,
        distill: cfg.distill.clone(),
        mixup: cfg.mixup.clone(),
        attack: cfg.attack.clone(),
        ..RunContext::new(&train)
    };
    let mut trainer = Trainer::new(model, cfg.train.clone(), ctx)?;
    let rows = trainer.fit(Some(out))?;
    if let Some(last) = rows.last() {
        println!("epoch={} train_loss={} clean_acc={}", last.epoch, last.train_loss, last.clean_acc);
    }
    let model = trainer.into_model();
    write_eval(out, &eval_rows(&model, &test, cfg)?)?;
    Ok(())
}

fn eval_rows(model: &BlockCnn, test: &Dataset, cfg: &RunConfig) -> anyhow::Result<Vec<EvalRow>> {
    let seed = cfg.train.seed;
    let bs = cfg.eval_batch_size;
    Ok(vec![
        evaluate(model, test, AttackKind::None, &AttackConfig::pgd(20), bs, seed)?,
        evaluate(model, test, AttackKind::Pgd, &AttackConfig::pgd(20), bs, seed)?,
    ])
}
