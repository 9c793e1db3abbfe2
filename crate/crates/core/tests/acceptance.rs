//! Acceptance run: one PASS/FAIL line per criterion, then a nonzero exit if
//! any failed. Criteria 4-7 train tiny CNN-6 models on the MNIST subset under
//! `data/` and take most of an hour on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pshield::attacks::{attack_all, bim, fgsm, mim, AttackConfig, AttackKind, Classifier};
use pshield::data::{load_idx, synth_blobs, write_idx, Dataset};
use pshield::eval::{
    epsilon_sweep, evaluate_robustness, layer_ablation, margin_probe, masking_checklist, stratified_sample,
    MaskingTolerance, RobustnessReport, Setting,
};
use pshield::gradcheck;
use pshield::losses::{prototype_conformity, PrototypeSet};
use pshield::nn::{Checkpoint, Model, ModelSpec, Profile};
use pshield::training::{make_black_box_source, train, train_from, AdvMode, TrainConfig};
use pshield::{Tape, Tensor};

const GRADCHECK_SEEDS: u64 = 10;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);

const ATTACK_SAMPLES: usize = 1000;
const ATTACK_EPS: f64 = 0.3;
const ATTACK_CW_ITERS: usize = 100;
const ATTACK_BUDGET: Duration = Duration::from_secs(300);
/// Slack on the L-infinity budget for the f64 round trip x + (x_adv - x).
const BUDGET_SLACK: f64 = 1e-12;

const SEEDS: [u64; 3] = [0, 1, 2];
const NEEDED: usize = 2;
const TREND_EPS: f64 = 0.3;
const TREND_BUDGET: Duration = Duration::from_secs(45 * 60);
/// CE-only accuracy under PGD must fall below this.
const CE_COLLAPSE: f64 = 0.10;
/// PCL must beat CE-only under PGD by at least this much.
const PCL_GAIN: f64 = 0.10;
const LR: f64 = 0.02;
const BATCH: usize = 64;
const EPOCHS: usize = 3;
const WARMUP: usize = 1;
const ADV_FRACTION: f64 = 0.25;
const ADV_STEPS: usize = 5;

const MASKING_SAMPLES: usize = 300;
const MASKING_GRID: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.6];
const SOURCE_EPOCHS: usize = 2;

const PROBE_EPS: f64 = 0.1;
const PROBE_DRAWS: usize = 200;
const PROBE_PER_CLASS: usize = 5;

const ABLATION_EPS: f64 = 0.1;
const ABLATION_SAMPLES: usize = 500;

const REPRO_BUDGET: Duration = Duration::from_secs(300);

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: usize, name: &'static str, pass: bool, detail: String) -> Line {
    let l = Line { id, name, pass, detail };
    println!(
        "[{}] criterion {}: {}: {}",
        if l.pass { "PASS" } else { "FAIL" },
        l.id,
        l.name,
        l.detail
    );
    l
}

fn failed(id: usize, name: &'static str, e: impl std::fmt::Display) -> Line {
    line(id, name, false, format!("error: {e}"))
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn mnist() -> pshield::Result<(Dataset, Dataset)> {
    let d = data_dir();
    let train = load_idx(
        &d.join("mnist-train-images-idx3-ubyte.gz"),
        &d.join("mnist-train-labels-idx1-ubyte.gz"),
    )?;
    let eval = load_idx(
        &d.join("mnist-eval-images-idx3-ubyte.gz"),
        &d.join("mnist-eval-labels-idx1-ubyte.gz"),
    )?;
    Ok((train, eval))
}

fn first(ds: &Dataset, n: usize) -> Dataset {
    ds.take(&(0..n.min(ds.len())).collect::<Vec<_>>())
}

fn pgd_accuracy(model: &Model, protos: &PrototypeSet, data: &Dataset, eps: f64, seed: u64) -> pshield::Result<f64> {
    let clf = Classifier::new(model, Some(protos));
    let adv = attack_all(&clf, &data.images, &data.labels, &AttackConfig::new(AttackKind::Pgd, eps), 100, seed)?;
    Ok(1.0 - adv.success_rate())
}

fn criterion1() -> Line {
    const NAME: &str = "gradient correctness";
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut cases = 0;
    for seed in 0..GRADCHECK_SEEDS {
        match gradcheck::run(seed) {
            Ok(results) => {
                for r in results {
                    cases += 1;
                    if r.max_rel_err > worst.0 || worst.1.is_empty() {
                        worst = (r.max_rel_err, format!("{} seed {seed}", r.name));
                    }
                }
            }
            Err(e) => return failed(1, NAME, e),
        }
    }
    let t = start.elapsed();
    line(
        1,
        NAME,
        worst.0 <= gradcheck::TOLERANCE && t < GRADCHECK_BUDGET,
        format!(
            "{cases} op/loss checks over {GRADCHECK_SEEDS} seeds, worst rel err {:.2e} ({}), limit {:.0e}, {:.1}s (limit {}s)",
            worst.0,
            worst.1,
            gradcheck::TOLERANCE,
            t.as_secs_f64(),
            GRADCHECK_BUDGET.as_secs()
        ),
    )
}

fn criterion2() -> Line {
    const NAME: &str = "attack contracts";
    let run = || -> pshield::Result<Line> {
        let start = Instant::now();
        let data = synth_blobs(10, ATTACK_SAMPLES / 10, &[1, 8, 8], 0.25, 0)?;
        let model = Model::build(ModelSpec::cnn6(Profile::Tiny, &[1, 8, 8], 10), 0)?;
        let protos = PrototypeSet::for_model(&model, 0)?;
        let cfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 50, lr: LR, decay_epochs: vec![], ..Default::default() };
        let (model, protos, _) = train(model, protos, &data, &cfg, &mut |_| {})?;
        let clf = Classifier::new(&model, Some(&protos));
        let mut violations = Vec::new();
        let mut counts = Vec::new();
        for kind in AttackKind::ALL {
            let mut a = AttackConfig::new(kind, ATTACK_EPS);
            a.iters = ATTACK_CW_ITERS;
            let adv = attack_all(&clf, &data.images, &data.labels, &a, 100, 0)?;
            let range = adv.x_adv.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
            let budget = if kind == AttackKind::Cw {
                0
            } else {
                adv.linf().iter().filter(|&&d| d > ATTACK_EPS + BUDGET_SLACK).count()
            };
            if range + budget > 0 {
                violations.push(format!("{} range {range} budget {budget}", kind.label()));
            }
            counts.push(format!("{} {}", kind.label(), adv.len()));
        }
        let mut m = AttackConfig::new(AttackKind::Mim, ATTACK_EPS);
        m.decay = 0.0;
        let b = AttackConfig { kind: AttackKind::Bim, ..m.clone() };
        let mim_eq = mim(&clf, &data.images, &data.labels, &m)?.x_adv == bim(&clf, &data.images, &data.labels, &b)?.x_adv;
        let fgsm_id = fgsm(&clf, &data.images, &data.labels, &AttackConfig::new(AttackKind::Fgsm, 0.0))?.x_adv == data.images;
        let t = start.elapsed();
        Ok(line(
            2,
            NAME,
            violations.is_empty() && mim_eq && fgsm_id && t < ATTACK_BUDGET,
            format!(
                "attacked [{}], invariant violations [{}], MIM(mu=0)==BIM bitwise {mim_eq}, FGSM(eps=0) identity {fgsm_id}, {:.0}s (limit {}s)",
                counts.join(", "),
                violations.join("; "),
                t.as_secs_f64(),
                ATTACK_BUDGET.as_secs()
            ),
        ))
    };
    run().unwrap_or_else(|e| failed(2, NAME, e))
}

fn criterion3() -> Line {
    const NAME: &str = "prototype conformity closed forms";
    let run = || -> pshield::Result<Line> {
        let eval = |f: &[f64], n: usize, labels: &[usize], w: &[f64]| -> pshield::Result<f64> {
            let mut tape = Tape::new();
            let fv = tape.constant(Tensor::new(vec![n, 2], f.to_vec())?);
            let wv = tape.constant(Tensor::new(vec![2, 2], w.to_vec())?);
            let l = prototype_conformity(&mut tape, fv, labels, wv)?;
            Ok(tape.value(l).item())
        };
        // Own centroid at the feature, other centroid at distance 5: 0 - 5 - 5.
        let a = eval(&[0.0, 0.0], 1, &[0], &[0.0, 0.0, 3.0, 4.0])?;
        // Both features and both centroids coincide: every distance is 0.
        let b = eval(&[1.5, -2.0, 1.5, -2.0], 2, &[0, 1], &[1.5, -2.0, 1.5, -2.0])?;
        Ok(line(3, NAME, a == -10.0 && b == 0.0, format!("got {a:?} (want -10.0) and {b:?} (want 0.0), exact")))
    };
    run().unwrap_or_else(|e| failed(3, NAME, e))
}

/// Models trained for one seed of the trend protocol.
struct SeedRun {
    seed: u64,
    ce: (Model, PrototypeSet),
    pcl: (Model, PrototypeSet),
    warm: Model,
    ce_pgd: f64,
    pcl_pgd: f64,
    adv_pgd: f64,
    clean: [f64; 3],
}

/// Shared CE warm-up, then CE-only, PCL and PCL+AdvTrain_PGD. The first
/// joint epoch is shared by PCL and AdvTrain; resuming is bitwise equal to
/// an uninterrupted run, so each model is exactly what a standalone run yields.
fn train_seed(train_set: &Dataset, eval_set: &Dataset, seed: u64) -> pshield::Result<SeedRun> {
    let spec = ModelSpec::cnn6(Profile::Tiny, train_set.sample_shape(), train_set.num_classes);
    let model = Model::build(spec, seed)?;
    let protos = PrototypeSet::for_model(&model, seed)?;
    let base = TrainConfig {
        epochs: EPOCHS,
        warmup_epochs: WARMUP,
        batch_size: BATCH,
        lr: LR,
        decay_epochs: vec![],
        seed,
        ..TrainConfig::default()
    };
    let log = |tag: &'static str| move |r: &pshield::training::EpochRecord| {
        eprintln!("  seed {seed} {tag} epoch {} ce {:.4} total {:.3} acc {:.4} ({:.0}s)", r.epoch, r.ce, r.total, r.train_acc, r.seconds)
    };
    let warm_cfg = TrainConfig { epochs: WARMUP, ..base.clone() };
    let (warm, warm_p, _) = train(model, protos, train_set, &warm_cfg, &mut log("warmup"))?;

    let ce_cfg = TrainConfig { warmup_epochs: EPOCHS, ..base.clone() };
    let (ce_m, ce_p, _) = train_from(warm.clone(), warm_p.clone(), train_set, &ce_cfg, WARMUP, &mut log("ce-only"))?;

    let mid_cfg = TrainConfig { epochs: EPOCHS - 1, ..base.clone() };
    let (mid_m, mid_p, _) = train_from(warm.clone(), warm_p, train_set, &mid_cfg, WARMUP, &mut log("joint"))?;
    let (pcl_m, pcl_p, _) = train_from(mid_m.clone(), mid_p.clone(), train_set, &base, EPOCHS - 1, &mut log("pcl"))?;
    let adv_cfg = TrainConfig {
        adv_mode: AdvMode::Pgd,
        adv_fraction: ADV_FRACTION,
        adv_steps: ADV_STEPS,
        ..base.clone()
    };
    let (adv_m, adv_p, _) = train_from(mid_m, mid_p, train_set, &adv_cfg, EPOCHS - 1, &mut log("adv-pgd"))?;

    let clean = [
        pshield::training::accuracy(&ce_m, eval_set)?,
        pshield::training::accuracy(&pcl_m, eval_set)?,
        pshield::training::accuracy(&adv_m, eval_set)?,
    ];
    let ce_pgd = pgd_accuracy(&ce_m, &ce_p, eval_set, TREND_EPS, seed)?;
    let pcl_pgd = pgd_accuracy(&pcl_m, &pcl_p, eval_set, TREND_EPS, seed)?;
    let adv_pgd = pgd_accuracy(&adv_m, &adv_p, eval_set, TREND_EPS, seed)?;
    Ok(SeedRun {
        seed,
        ce: (ce_m, ce_p),
        pcl: (pcl_m, pcl_p),
        warm,
        ce_pgd,
        pcl_pgd,
        adv_pgd,
        clean,
    })
}

fn criterion4(runs: &pshield::Result<(Vec<SeedRun>, Duration)>) -> Line {
    const NAME: &str = "trend reproduction (PGD eps=0.3)";
    let (runs, t) = match runs {
        Ok(r) => r,
        Err(e) => return failed(4, NAME, e),
    };
    let a = runs.iter().filter(|r| r.ce_pgd < CE_COLLAPSE).count();
    let b = runs.iter().filter(|r| r.pcl_pgd - r.ce_pgd >= PCL_GAIN).count();
    let c = runs.iter().filter(|r| r.adv_pgd > r.pcl_pgd).count();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: clean {}/{}/{} pgd CE {} PCL {} PCL+Adv {}",
                r.seed,
                pct(r.clean[0]),
                pct(r.clean[1]),
                pct(r.clean[2]),
                pct(r.ce_pgd),
                pct(r.pcl_pgd),
                pct(r.adv_pgd)
            )
        })
        .collect();
    line(
        4,
        NAME,
        a >= NEEDED && b >= NEEDED && c >= NEEDED && *t < TREND_BUDGET,
        format!(
            "(a) CE < {} in {a}/3, (b) PCL - CE >= {} points in {b}/3, (c) AdvTrain > PCL in {c}/3; {}; {:.1} min (limit {})",
            pct(CE_COLLAPSE),
            100.0 * PCL_GAIN,
            per_seed.join("; "),
            t.as_secs_f64() / 60.0,
            TREND_BUDGET.as_secs() / 60
        ),
    )
}

fn criterion5(runs: &[SeedRun], train_set: &Dataset, eval_set: &Dataset) -> Line {
    const NAME: &str = "gradient-masking checklist (PCL, seed 0)";
    let run = || -> pshield::Result<Line> {
        let r = &runs[0];
        let subset = first(eval_set, MASKING_SAMPLES);
        let clf = Classifier::new(&r.pcl.0, Some(&r.pcl.1));
        let kinds = [AttackKind::Fgsm, AttackKind::Bim, AttackKind::Mim, AttackKind::Pgd];
        let attacks: Vec<_> = kinds.iter().map(|&k| AttackConfig::new(k, TREND_EPS)).collect();
        let source = make_black_box_source(train_set, r.seed, SOURCE_EPOCHS)?;
        let src = Classifier::new(&source, None);
        let mut report = RobustnessReport::default();
        for setting in [Setting::White, Setting::Black] {
            report.extend(evaluate_robustness("PCL", &clf, &attacks, &subset, setting, Some(&src), 100, r.seed)?);
        }
        let sweep = epsilon_sweep(&clf, &kinds, &MASKING_GRID, &AttackConfig::default(), &subset, 100, r.seed)?;
        let checks = masking_checklist(&report, "PCL", &sweep, MaskingTolerance::default());
        let pass = checks.iter().all(|c| c.pass);
        let detail: Vec<String> = checks.iter().map(|c| c.to_string()).collect();
        Ok(line(5, NAME, pass, format!("{} samples; {}", subset.len(), detail.join(" | "))))
    };
    run().unwrap_or_else(|e| failed(5, NAME, e))
}

fn criterion6(runs: &[SeedRun], eval_set: &Dataset) -> Line {
    const NAME: &str = "margin probe m/(2 lambda), PCL > CE-only";
    let run = || -> pshield::Result<Line> {
        let sample = stratified_sample(eval_set, PROBE_PER_CLASS);
        let mut wins = 0;
        let mut detail = Vec::new();
        for r in runs {
            let ce = margin_probe(&r.ce.0, &sample, PROBE_EPS, PROBE_DRAWS, r.seed)?.ratio();
            let pcl = margin_probe(&r.pcl.0, &sample, PROBE_EPS, PROBE_DRAWS, r.seed)?.ratio();
            if pcl > ce {
                wins += 1;
            }
            detail.push(format!("seed {}: CE {ce:.3} PCL {pcl:.3}", r.seed));
        }
        Ok(line(6, NAME, wins >= NEEDED, format!("PCL larger in {wins}/3 ({})", detail.join("; "))))
    };
    run().unwrap_or_else(|e| failed(6, NAME, e))
}

fn criterion7(runs: &[SeedRun], train_set: &Dataset, eval_set: &Dataset) -> Line {
    const NAME: &str = "tap ablation, deepest two > shallowest only";
    let run = || -> pshield::Result<Line> {
        let subset = first(eval_set, ABLATION_SAMPLES);
        let mut wins = 0;
        let mut detail = Vec::new();
        for r in runs {
            let spec = r.warm.spec().clone();
            let cfg = TrainConfig {
                epochs: EPOCHS,
                warmup_epochs: WARMUP,
                batch_size: BATCH,
                lr: LR,
                decay_epochs: vec![],
                seed: r.seed,
                ..TrainConfig::default()
            };
            let attacks = [AttackConfig::new(AttackKind::Pgd, ABLATION_EPS)];
            let subsets = vec![vec![1, 2], vec![0]];
            let t = layer_ablation(&spec, &subsets, train_set, &subset, &cfg, &attacks, Some(&r.warm), r.seed)?;
            let (deep, shallow) = (t.rows[0].attacked[0], t.rows[1].attacked[0]);
            if deep > shallow {
                wins += 1;
            }
            detail.push(format!(
                "seed {}: {} {} vs {} {}",
                r.seed,
                t.rows[0].label,
                pct(deep),
                t.rows[1].label,
                pct(shallow)
            ));
        }
        Ok(line(
            7,
            NAME,
            wins >= NEEDED,
            format!("PGD eps={ABLATION_EPS} on {} samples, deeper wins {wins}/3 ({})", subset.len(), detail.join("; ")),
        ))
    };
    run().unwrap_or_else(|e| failed(7, NAME, e))
}

const MINI_CONFIG: &str = r#"
seed = 7

[data]
source = "synthetic"

[data.synthetic]
classes = 4
train_per_class = 10
eval_per_class = 5
shape = [1, 8, 8]

[train]
epochs = 3
warmup_epochs = 1
batch_size = 8
lr = 0.02
decay_epochs = [2]

[[attacks]]
kind = "fgsm"
epsilon = 0.2

[[attacks]]
kind = "pgd"
epsilon = 0.2

[[attacks]]
kind = "cw"
iters = 20

[eval]
source_epochs = 2
sweep_grid = [0.0, 0.1, 0.3]
probe_draws = 100
probe_per_class = 2
"#;

fn cli_pipeline(dir: &Path) -> pshield::Result<Vec<(String, Vec<u8>)>> {
    fs::create_dir_all(dir).map_err(|e| pshield::Error::Usage(e.to_string()))?;
    let cfg = dir.join("run.toml");
    fs::write(&cfg, MINI_CONFIG).map_err(|e| pshield::Error::Usage(e.to_string()))?;
    let c = cfg.to_str().unwrap_or_default().to_string();
    let train_out = dir.join("train");
    let ck = train_out.join("model.ckpt");
    let mut runs = vec![vec!["train".to_string(), "--out".into(), train_out.display().to_string()]];
    for verb in ["eval", "sweep", "probe"] {
        runs.push(vec![
            verb.to_string(),
            "--checkpoint".into(),
            ck.display().to_string(),
            "--out".into(),
            dir.join(verb).display().to_string(),
        ]);
    }
    for mut args in runs {
        args.splice(0..0, ["pshield".to_string()]);
        args.extend(["--config".to_string(), c.clone()]);
        let code = pshield::cli::run(&args);
        if code != 0 {
            return Err(pshield::Error::Usage(format!("{} exited {code}", args[1])));
        }
    }
    let mut files = Vec::new();
    for f in [
        "train/model.ckpt",
        "train/prototypes.csv",
        "eval/robustness.csv",
        "eval/robustness.txt",
        "sweep/sweep.csv",
        "probe/probe.csv",
    ] {
        let bytes = fs::read(dir.join(f)).map_err(|e| pshield::Error::Usage(format!("{f}: {e}")))?;
        files.push((f.to_string(), bytes));
    }
    Ok(files)
}

fn criterion8() -> Line {
    const NAME: &str = "determinism and round-trips";
    let run = || -> pshield::Result<Line> {
        let tmp = tempfile::tempdir().map_err(|e| pshield::Error::Usage(e.to_string()))?;
        let a = cli_pipeline(&tmp.path().join("a"))?;
        let b = cli_pipeline(&tmp.path().join("b"))?;
        let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();

        let ck = Checkpoint::load(&tmp.path().join("a/train/model.ckpt"))?;
        let re = tmp.path().join("re.ckpt");
        ck.save(&re)?;
        let ckpt_rt = fs::read(&re).ok() == Some(a[0].1.clone());

        let ds = match mnist() {
            Ok((_, eval)) => eval,
            Err(_) => synth_blobs(4, 25, &[1, 8, 8], 0.3, 0)?,
        };
        let native = tmp.path().join("ds.bin");
        ds.save(&native)?;
        let back = Dataset::load(&native)?;
        let native_rt = back.images.data().iter().zip(ds.images.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && back.labels == ds.labels;
        let (img, lab) = (tmp.path().join("i.gz"), tmp.path().join("l.gz"));
        write_idx(&ds, &img, &lab)?;
        let idx = load_idx(&img, &lab)?;
        let idx_rt = idx.images == ds.images && idx.labels == ds.labels;
        Ok(line(
            8,
            NAME,
            differing.is_empty() && ckpt_rt && native_rt && idx_rt,
            format!(
                "{} report files compared across two runs, differing [{}]; checkpoint re-save bitwise {ckpt_rt}; dataset ({} samples) native {native_rt}, IDX {idx_rt}",
                a.len(),
                differing.join(", "),
                ds.len()
            ),
        ))
    };
    run().unwrap_or_else(|e| failed(8, NAME, e))
}

fn criterion9() -> Line {
    const NAME: &str = "tiny repro pipeline";
    let run = || -> pshield::Result<Line> {
        let tmp = tempfile::tempdir().map_err(|e| pshield::Error::Usage(e.to_string()))?;
        let out = tmp.path().join("repro");
        let start = Instant::now();
        let code = pshield::cli::run(["pshield", "repro", "--profile", "tiny", "--out", out.to_str().unwrap_or_default()]);
        let t = start.elapsed();
        let report = fs::read_to_string(out.join("report.txt")).unwrap_or_default();
        let csv = fs::read_to_string(out.join("robustness.csv")).unwrap_or_default();
        let rows = csv.lines().filter(|l| !l.starts_with('#')).count().saturating_sub(1);
        let variants = pshield::cli::VARIANTS.iter().all(|v| report.contains(v));
        let attacks = AttackKind::ALL.iter().all(|k| report.contains(k.label()));
        let want_rows = pshield::cli::VARIANTS.len() * 2 * AttackKind::ALL.len();
        Ok(line(
            9,
            NAME,
            code == 0 && variants && attacks && rows == want_rows && t < REPRO_BUDGET,
            format!(
                "exit {code}, all variant rows {variants}, all attack columns {attacks}, {rows}/{want_rows} csv rows, {:.0}s (limit {}s)",
                t.as_secs_f64(),
                REPRO_BUDGET.as_secs()
            ),
        ))
    };
    run().unwrap_or_else(|e| failed(9, NAME, e))
}

fn main() {
    let mut lines = vec![criterion1(), criterion2(), criterion3()];

    match mnist() {
        Ok((train_set, eval_set)) => {
            eprintln!("trend protocol: {} train / {} eval samples", train_set.len(), eval_set.len());
            let start = Instant::now();
            let runs = SEEDS
                .iter()
                .map(|&s| train_seed(&train_set, &eval_set, s))
                .collect::<pshield::Result<Vec<_>>>()
                .map(|r| (r, start.elapsed()));
            lines.push(criterion4(&runs));
            match &runs {
                Ok((runs, _)) => {
                    lines.push(criterion5(runs, &train_set, &eval_set));
                    lines.push(criterion6(runs, &eval_set));
                    lines.push(criterion7(runs, &train_set, &eval_set));
                }
                Err(e) => {
                    lines.push(failed(5, "gradient-masking checklist", e));
                    lines.push(failed(6, "margin probe", e));
                    lines.push(failed(7, "tap ablation", e));
                }
            }
        }
        Err(e) => {
            for (id, name) in [(4, "trend reproduction"), (5, "gradient-masking checklist"), (6, "margin probe"), (7, "tap ablation")] {
                lines.push(failed(id, name, format!("MNIST files missing under {}: {e}", data_dir().display())));
            }
        }
    }

    lines.push(criterion8());
    lines.push(criterion9());

    let failed: Vec<String> = lines.iter().filter(|l| !l.pass).map(|l| format!("{} ({})", l.id, l.name)).collect();
    println!("acceptance: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failing: {}", failed.join(", "));
        std::process::exit(1);
    }
}
