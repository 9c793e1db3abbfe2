//! Command-line front end. Exit codes: 0 success, 1 runtime failure,
//! 2 configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::attacks::{attack_all, AttackKind, Classifier};
use crate::config::{RunConfig, Variant};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{
    all_tap_subsets, epsilon_sweep, evaluate_robustness, layer_ablation, margin_probe, masking_checklist,
    stratified_sample, transfer_matrix, MaskingTolerance, RobustnessReport, Setting,
};
use crate::losses::PrototypeSet;
use crate::nn::{Checkpoint, Model, Profile};
use crate::report::{header_line, text_table, write_text};
use crate::training::{accuracy, make_black_box_source, train_from, AdvMode, EpochRecord, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "pshield", version, about = "Prototype conformity training and adversarial robustness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $PSHIELD_OUT/<out_dir or verb>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and its prototypes.
    Train {
        #[command(flatten)]
        common: Common,
        /// ce-only or pcl.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Craft adversarial examples against a checkpoint and export them.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Robustness table for one checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Transferability matrix between checkpoints.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Repeat for each model.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Accuracy versus epsilon for each attack kind.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Feature-space margin versus perturbation radius.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per tap subset and compare robustness.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline: four training variants, the attack battery, checklist and probe.
    Repro {
        #[command(flatten)]
        common: Common,
        /// tiny (synthetic, minutes) or desk (MNIST files from the config or ./data).
        #[arg(long, default_value = "tiny", value_parser = parse_profile)]
        profile: Profile,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    match s {
        "ce-only" => Ok(Variant::CeOnly),
        "pcl" => Ok(Variant::Pcl),
        _ => Err(format!("expected ce-only or pcl, got '{s}'")),
    }
}

fn parse_profile(s: &str) -> std::result::Result<Profile, String> {
    match s {
        "tiny" => Ok(Profile::Tiny),
        "desk" => Ok(Profile::Desk),
        _ => Err(format!("expected tiny or desk, got '{s}'")),
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pshield: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

/// A validated configuration and the directory its outputs go to.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
    header: String,
}

impl Run {
    fn new(common: &Common, verb: &str, fallback: impl FnOnce() -> RunConfig) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => fallback(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let out = cfg.out_dir(common.out.as_deref(), verb);
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let header = header_line(&cfg.hash(), cfg.seed);
        fs::write(out.join("run.toml"), format!("{header}\n{}", cfg.to_toml())).map_err(|e| Error::io(&out, e))?;
        Ok(Run { cfg, out, header })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        write_text(&self.path(name), &self.header, body)
    }

    /// Loads a checkpoint and checks it against the data it will see.
    fn checkpoint(&self, flag: Option<&Path>, data: &Dataset) -> Result<Checkpoint> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| self.cfg.model.checkpoint.clone())
            .ok_or_else(|| Error::Config("model.checkpoint: required (or pass --checkpoint)".into()))?;
        let ck = Checkpoint::load(&path)?;
        let spec = ck.model.spec();
        if spec.input_shape != data.sample_shape() || spec.num_classes < data.num_classes {
            return Err(Error::Config(format!(
                "checkpoint {} expects input {:?} with {} classes; data has {:?} with {}",
                path.display(),
                spec.input_shape,
                spec.num_classes,
                data.sample_shape(),
                data.num_classes
            )));
        }
        Ok(ck)
    }
}

fn default_config() -> RunConfig {
    RunConfig::default()
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { common, variant } => cmd_train(&common, variant),
        Command::Attack { common, checkpoint } => cmd_attack(&common, checkpoint.as_deref()),
        Command::Eval { common, checkpoint } => cmd_eval(&common, checkpoint.as_deref()),
        Command::Transfer { common, checkpoints } => cmd_transfer(&common, &checkpoints),
        Command::Sweep { common, checkpoint } => cmd_sweep(&common, checkpoint.as_deref()),
        Command::Probe { common, checkpoint } => cmd_probe(&common, checkpoint.as_deref()),
        Command::Ablate { common } => cmd_ablate(&common),
        Command::Repro { common, profile } => cmd_repro(&common, profile),
    }
}

fn epoch_line(r: &EpochRecord, total: usize) -> String {
    let pc: Vec<String> = r.pc_per_tap.iter().map(|v| format!("{v:.3}")).collect();
    format!(
        "epoch {}/{} [{}] lr {} ce {:.4} pc [{}] total {:.4} acc {:.4} ({:.1}s)",
        r.epoch + 1,
        total,
        if r.joint { "joint" } else { "warmup" },
        r.lr,
        r.ce,
        pc.join(", "),
        r.total,
        r.train_acc,
        r.seconds
    )
}

/// Trains epochs `start..cfg.epochs`, saving to `ckpt` every `cfg.checkpoint_every` epochs and at the end.
fn train_and_save(
    model: Model,
    protos: PrototypeSet,
    data: &Dataset,
    cfg: &TrainConfig,
    start: usize,
    ckpt: Option<&Path>,
    verbose: bool,
) -> Result<(Model, PrototypeSet, crate::training::TrainLog)> {
    let mut log = crate::training::TrainLog::default();
    let (mut model, mut protos) = (model, protos);
    let mut epoch = start;
    let period = if cfg.checkpoint_every == 0 { cfg.epochs } else { cfg.checkpoint_every };
    while epoch < cfg.epochs {
        let stop = (epoch + period).min(cfg.epochs);
        let chunk = TrainConfig { epochs: stop, ..cfg.clone() };
        let (m, p, l) = train_from(model, protos, data, &chunk, epoch, &mut |r| {
            if verbose {
                println!("{}", epoch_line(r, cfg.epochs));
            }
        })?;
        model = m;
        protos = p;
        log.records.extend(l.records);
        if let Some(path) = ckpt {
            Checkpoint {
                model: model.clone(),
                protos: Some(protos.clone()),
            }
            .save(path)?;
        }
        epoch = stop;
    }
    Ok((model, protos, log))
}

fn cmd_train(common: &Common, variant: Option<Variant>) -> Result<()> {
    let mut run = Run::new(common, "train", default_config)?;
    if let Some(v) = variant {
        run.cfg.variant = v;
    }
    let (train, eval) = run.cfg.load_data()?;
    let spec = run.cfg.model_spec(train.sample_shape(), train.num_classes)?;
    let model = Model::build(spec, run.cfg.seed)?;
    let protos = PrototypeSet::for_model(&model, run.cfg.seed)?;
    let tcfg = run.cfg.effective_train();
    println!(
        "training {} ({} params) on {} samples, variant {:?}",
        model.spec().name,
        model.param_count(),
        train.len(),
        run.cfg.variant
    );
    let ckpt = run.path("model.ckpt");
    let (model, protos, log) = train_and_save(model, protos, &train, &tcfg, 0, Some(&ckpt), true)?;
    log.write_csv(&run.path("train_log.csv"), &run.header)?;
    protos.export_csv(&run.path("prototypes.csv"), &run.header)?;
    let acc = accuracy(&model, &eval)?;
    println!("clean eval accuracy {:.4}; checkpoint {}", acc, ckpt.display());
    Ok(())
}

fn cmd_attack(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(common, "attack", default_config)?;
    let (_, eval) = run.cfg.load_data()?;
    let ck = run.checkpoint(checkpoint, &eval)?;
    let clf = Classifier::new(&ck.model, ck.protos.as_ref()).with_prediction(run.cfg.eval.prediction);
    let mut rows = Vec::new();
    for (i, cfg) in run.cfg.attacks.iter().enumerate() {
        let adv = attack_all(&clf, &eval.images, &eval.labels, cfg, run.cfg.eval.batch_size, run.cfg.seed)?;
        let stem = format!("adv_{i}_{}", format!("{:?}", cfg.kind).to_lowercase());
        adv.export(&run.path(&format!("{stem}.bin")), &run.path(&format!("{stem}.csv")), &run.header)?;
        let linf = adv.linf().into_iter().fold(0.0, f64::max);
        rows.push(vec![
            cfg.kind.label().to_string(),
            format!("{}", cfg.strength()),
            format!("{:?}", cfg.loss_mode),
            format!("{:.1}", 100.0 * adv.success_rate()),
            format!("{linf:.4}"),
        ]);
    }
    let table = text_table(
        &["attack", "strength", "loss", "success %", "max linf"].map(String::from),
        &rows,
    );
    print!("{table}");
    run.text("attack.txt", &table)
}

fn source_model(run: &Run, train: &Dataset, eval: &Dataset) -> Result<Model> {
    match &run.cfg.eval.source_checkpoint {
        Some(p) => Ok(run.checkpoint(Some(p), eval)?.model),
        None => {
            let m = make_black_box_source(train, run.cfg.seed, run.cfg.eval.source_epochs)?;
            Checkpoint { model: m.clone(), protos: None }.save(&run.path("source.ckpt"))?;
            Ok(m)
        }
    }
}

fn cmd_eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(common, "eval", default_config)?;
    let (train, eval) = run.cfg.load_data()?;
    let ck = run.checkpoint(checkpoint, &eval)?;
    let clf = Classifier::new(&ck.model, ck.protos.as_ref()).with_prediction(run.cfg.eval.prediction);
    let needs_source = run.cfg.eval.settings.contains(&Setting::Black);
    let source = if needs_source { Some(source_model(&run, &train, &eval)?) } else { None };
    let src_clf = source.as_ref().map(|m| Classifier::new(m, None));
    let mut report = RobustnessReport::default();
    for &setting in &run.cfg.eval.settings {
        report.extend(evaluate_robustness(
            "model",
            &clf,
            &run.cfg.attacks,
            &eval,
            setting,
            src_clf.as_ref(),
            run.cfg.eval.batch_size,
            run.cfg.seed,
        )?);
    }
    report.write_csv(&run.path("robustness.csv"), &run.header)?;
    let table = report.to_text();
    print!("{table}");
    run.text("robustness.txt", &table)
}

fn cmd_transfer(common: &Common, flags: &[PathBuf]) -> Result<()> {
    let run = Run::new(common, "transfer", default_config)?;
    let (_, eval) = run.cfg.load_data()?;
    let named: Vec<(String, PathBuf)> = if flags.is_empty() {
        run.cfg.eval.transfer.iter().map(|n| (n.name.clone(), n.path.clone())).collect()
    } else {
        flags
            .iter()
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p.clone()))
            .collect()
    };
    if named.len() < 2 {
        return Err(Error::Config(format!(
            "transfer needs at least 2 checkpoints, got {}",
            named.len()
        )));
    }
    let cfg = run
        .cfg
        .attacks
        .first()
        .ok_or_else(|| Error::Config("attacks: transfer needs one attack".into()))?;
    let cks = named
        .iter()
        .map(|(_, p)| run.checkpoint(Some(p), &eval))
        .collect::<Result<Vec<_>>>()?;
    let models: Vec<(String, Classifier)> = named
        .iter()
        .zip(&cks)
        .map(|((n, _), c)| (n.clone(), Classifier::new(&c.model, c.protos.as_ref()).with_prediction(run.cfg.eval.prediction)))
        .collect();
    let m = transfer_matrix(&models, cfg, &eval, run.cfg.eval.batch_size, run.cfg.seed)?;
    m.write_csv(&run.path("transfer.csv"), &run.header)?;
    let table = m.to_text();
    print!("{table}");
    run.text("transfer.txt", &table)
}

fn cmd_sweep(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(common, "sweep", default_config)?;
    let (_, eval) = run.cfg.load_data()?;
    let ck = run.checkpoint(checkpoint, &eval)?;
    let clf = Classifier::new(&ck.model, ck.protos.as_ref()).with_prediction(run.cfg.eval.prediction);
    let base = run.cfg.attacks.first().cloned().unwrap_or_default();
    let s = epsilon_sweep(
        &clf,
        &run.cfg.eval.sweep_kinds,
        &run.cfg.eval.sweep_grid,
        &base,
        &eval,
        run.cfg.eval.batch_size,
        run.cfg.seed,
    )?;
    s.write_csv(&run.path("sweep.csv"), &run.header)?;
    let table = s.to_text();
    print!("{table}");
    run.text("sweep.txt", &table)
}

fn cmd_probe(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let run = Run::new(common, "probe", default_config)?;
    let (_, eval) = run.cfg.load_data()?;
    let ck = run.checkpoint(checkpoint, &eval)?;
    let e = &run.cfg.eval;
    let sample = stratified_sample(&eval, e.probe_per_class);
    let p = margin_probe(&ck.model, &sample, e.probe_epsilon, e.probe_draws, run.cfg.seed)?;
    p.write_csv(&run.path("probe.csv"), &run.header)?;
    let body = probe_summary(&p);
    print!("{body}");
    run.text("probe.txt", &body)
}

fn probe_summary(p: &crate::eval::MarginProbe) -> String {
    let overlaps = p.overlap().iter().filter(|&&o| o).count();
    format!(
        "eps {}: min margin m {:.4}, max lambda {:.4}, mean m_c/(2 lambda_c) {:.4}, {} of {} classes overlap\n",
        p.epsilon,
        p.margin,
        p.lambda.iter().copied().fold(0.0, f64::max),
        p.ratio(),
        overlaps,
        p.classes.len()
    )
}

fn ablation_attacks(cfg: &RunConfig) -> Vec<crate::attacks::AttackConfig> {
    let picked: Vec<_> = cfg
        .attacks
        .iter()
        .filter(|a| matches!(a.kind, AttackKind::Fgsm | AttackKind::Pgd))
        .cloned()
        .collect();
    if picked.is_empty() {
        vec![
            crate::attacks::AttackConfig::new(AttackKind::Fgsm, 0.3),
            crate::attacks::AttackConfig::new(AttackKind::Pgd, 0.3),
        ]
    } else {
        picked
    }
}

fn cmd_ablate(common: &Common) -> Result<()> {
    let run = Run::new(common, "ablate", default_config)?;
    let (train, eval) = run.cfg.load_data()?;
    let mut full = run.cfg.clone();
    full.model.taps = None;
    let spec = full.model_spec(train.sample_shape(), train.num_classes)?;
    let subsets = run
        .cfg
        .eval
        .ablation_subsets
        .clone()
        .unwrap_or_else(|| all_tap_subsets(spec.taps.len()));
    let t = layer_ablation(
        &spec,
        &subsets,
        &train,
        &eval,
        &run.cfg.effective_train(),
        &ablation_attacks(&run.cfg),
        None,
        run.cfg.seed,
    )?;
    t.write_csv(&run.path("ablation.csv"), &run.header)?;
    let table = t.to_text();
    print!("{table}");
    run.text("ablation.txt", &table)
}

/// Names of the four training variants, in table order.
pub const VARIANTS: [&str; 4] = ["Softmax", "Ours", "Ours+AdvTrain_FGSM", "Ours+AdvTrain_PGD"];

fn repro_config(profile: Profile) -> RunConfig {
    match profile {
        Profile::Tiny => RunConfig::repro_tiny(),
        Profile::Desk => RunConfig::repro_desk(Path::new("data")),
    }
}

fn cmd_repro(common: &Common, profile: Profile) -> Result<()> {
    let started = Instant::now();
    let run = Run::new(common, "repro", || repro_config(profile))?;
    let cfg = &run.cfg;
    let (train, eval) = cfg.load_data()?;
    let spec = cfg.model_spec(train.sample_shape(), train.num_classes)?;
    let seed = cfg.seed;
    let tcfg = cfg.effective_train();
    println!(
        "repro: {} on {} train / {} eval samples ({} params)",
        spec.name,
        train.len(),
        eval.len(),
        spec.param_count()?
    );

    // The CE warm-up is identical for every variant, so it runs once.
    let model = Model::build(spec, seed)?;
    let protos = PrototypeSet::for_model(&model, seed)?;
    let warm_cfg = TrainConfig { epochs: tcfg.warmup_epochs, ..tcfg.clone() };
    let (warm_m, warm_p, _) = train_and_save(model, protos, &train, &warm_cfg, 0, None, false)?;
    println!("warm-up done ({:.0}s)", started.elapsed().as_secs_f64());

    let schedules = [
        TrainConfig { warmup_epochs: tcfg.epochs, ..tcfg.clone() },
        TrainConfig { adv_mode: AdvMode::None, ..tcfg.clone() },
        TrainConfig { adv_mode: AdvMode::Fgsm, ..tcfg.clone() },
        TrainConfig { adv_mode: AdvMode::Pgd, ..tcfg.clone() },
    ];
    let mut trained = Vec::new();
    for (name, sched) in VARIANTS.iter().zip(&schedules) {
        let ckpt = run.path(&format!("{}.ckpt", name.to_lowercase().replace('+', "_")));
        let (m, p, log) = train_and_save(
            warm_m.clone(),
            warm_p.clone(),
            &train,
            sched,
            tcfg.warmup_epochs,
            Some(&ckpt),
            false,
        )?;
        log.write_csv(&run.path(&format!("{}_train_log.csv", name.to_lowercase().replace('+', "_"))), &run.header)?;
        println!(
            "{name}: clean accuracy {:.4} ({:.0}s)",
            accuracy(&m, &eval)?,
            started.elapsed().as_secs_f64()
        );
        trained.push((name.to_string(), m, p));
    }
    let source = source_model(&run, &train, &eval)?;
    let src = Classifier::new(&source, None);
    println!("black-box source: clean accuracy {:.4}", accuracy(&source, &eval)?);

    let mut report = RobustnessReport::default();
    for (name, m, p) in &trained {
        let clf = Classifier::new(m, Some(p)).with_prediction(cfg.eval.prediction);
        for &setting in &cfg.eval.settings {
            if setting == Setting::Adaptive && name == VARIANTS[0] {
                continue;
            }
            report.extend(evaluate_robustness(
                name,
                &clf,
                &cfg.attacks,
                &eval,
                setting,
                Some(&src),
                cfg.eval.batch_size,
                seed,
            )?);
        }
        println!("evaluated {name} ({:.0}s)", started.elapsed().as_secs_f64());
    }
    report.write_csv(&run.path("robustness.csv"), &run.header)?;

    let (_, ours_m, ours_p) = &trained[1];
    let ours = Classifier::new(ours_m, Some(ours_p)).with_prediction(cfg.eval.prediction);
    let base = cfg.attacks.first().cloned().unwrap_or_default();
    let sweep = epsilon_sweep(
        &ours,
        &cfg.eval.sweep_kinds,
        &cfg.eval.sweep_grid,
        &base,
        &eval,
        cfg.eval.batch_size,
        seed,
    )?;
    sweep.write_csv(&run.path("sweep.csv"), &run.header)?;
    let checklist = masking_checklist(&report, VARIANTS[1], &sweep, MaskingTolerance::default());

    let sample = stratified_sample(&eval, cfg.eval.probe_per_class);
    let mut probe_lines = String::new();
    for (name, m, _) in trained.iter().take(2) {
        let p = margin_probe(m, &sample, cfg.eval.probe_epsilon, cfg.eval.probe_draws, seed)?;
        p.write_csv(&run.path(&format!("probe_{}.csv", name.to_lowercase())), &run.header)?;
        probe_lines.push_str(&format!("{name}: {}", probe_summary(&p)));
    }

    let mut body = String::new();
    body.push_str(&format!(
        "Robustness (accuracy %, {} eval samples; white = own gradients, black = crafted on an independent source)\n\n",
        eval.len()
    ));
    body.push_str(&report.to_text());
    body.push_str("\nEpsilon sweep (Ours, white-box)\n\n");
    body.push_str(&sweep.to_text());
    body.push_str("\nGradient-masking checklist (Ours)\n\n");
    for line in &checklist {
        body.push_str(&format!("{line}\n"));
    }
    body.push_str("\nMargin probe (deepest tap)\n\n");
    body.push_str(&probe_lines);
    print!("{body}");
    println!("wall time {:.0}s", started.elapsed().as_secs_f64());
    run.text("report.txt", &body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run(["pshield", "frobnicate"]), 2);
        assert_eq!(run(["pshield", "train", "--variant", "nope"]), 2);
    }

    #[test]
    fn missing_config_file_is_runtime_failure() {
        assert_eq!(run(["pshield", "eval", "--config", "/nonexistent/run.toml"]), 1);
    }

    #[test]
    fn default_config_lacks_data_paths() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["pshield", "train", "--out", out]), 2);
    }
}
