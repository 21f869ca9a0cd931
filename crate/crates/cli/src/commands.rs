use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advsr_core::data::{make_split, read_split, write_split, Dataset, DatasetSplit, SplitKind};
use advsr_core::eval::{evaluate, markdown_table, samples_to_csv, EvalReport};
use advsr_core::loss::LossBalance;
use advsr_core::models::{ClassifierModel, FeatureExtractor, SrModel, WeightFile};
use advsr_core::train::{
    finetune_sr, train_classifier, EpochRecord, TrainConfig, TrainLog, TrainMode,
};
use anyhow::{anyhow, bail, ensure, Context, Result};

use crate::config::ExperimentConfig;
use crate::layout::{
    Phase, RunLayout, LOG_FILE, MANIFEST_FILE, REPORT_JSON, REPORT_MD, SAMPLES_CSV, SUMMARY_CSV,
    WEIGHTS_FILE,
};
use crate::manifest::{sha256_file, sha256_hex, write_atomic, RunManifest};

/// A validated config bound to the directory its outputs go to.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub layout: RunLayout,
}

impl Experiment {
    /// `out` overrides the config's run directory.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Result<Self> {
        config.validate()?;
        let root = out.unwrap_or_else(|| config.eval.run_dir.clone());
        Ok(Experiment {
            config,
            layout: RunLayout::new(root),
        })
    }

    fn featnet(&self) -> FeatureExtractor {
        FeatureExtractor::build(self.config.seeds().featnet)
    }

    /// Fails with the full list of missing files and how to produce them.
    fn require(&self, what: &str, deps: &[(&str, PathBuf)]) -> Result<()> {
        let missing: Vec<String> = deps
            .iter()
            .filter(|(_, p)| !p.is_file())
            .map(|(how, p)| format!("  {} (produce with `advsr {how}`)", p.display()))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            bail!(
                "{what} is missing its dependencies:\n{}",
                missing.join("\n")
            )
        }
    }

    fn data_deps(&self) -> Vec<(&'static str, PathBuf)> {
        SplitKind::ALL
            .iter()
            .map(|&k| ("gen-data", self.layout.split(k)))
            .collect()
    }

    fn load_split(&self, kind: SplitKind, manifest: &mut RunManifest) -> Result<DatasetSplit> {
        let path = self.layout.split(kind);
        let split = read_split(&path, kind, self.config.data.seed)?;
        let d = &self.config.data;
        let per_class = match kind {
            SplitKind::Train => d.train_per_class,
            SplitKind::Val => d.val_per_class,
            SplitKind::Test => d.test_per_class,
        };
        let hr = split.samples.first().map(|s| s.hr.shape()[1]).unwrap_or(0);
        ensure!(
            split.classes == d.classes && split.len() == per_class * d.classes && hr == d.hr_size,
            "{} does not match the config (classes {}, {} samples, HR {hr}); rerun gen-data",
            path.display(),
            split.classes,
            split.len()
        );
        manifest.input(&self.layout, &path)?;
        Ok(split)
    }

    fn load_dataset(&self, manifest: &mut RunManifest) -> Result<Dataset> {
        Ok(Dataset {
            train: self.load_split(SplitKind::Train, manifest)?,
            val: self.load_split(SplitKind::Val, manifest)?,
            test: self.load_split(SplitKind::Test, manifest)?,
        })
    }

    fn load_classifier(&self, manifest: &mut RunManifest) -> Result<ClassifierModel> {
        let path = self.layout.weights(Phase::Classifier);
        let m = ClassifierModel::load(&path)?;
        ensure!(
            m.config() == self.config.classifier.arch,
            "architecture mismatch: {} holds {:?}, config says {:?}",
            path.display(),
            m.config(),
            self.config.classifier.arch
        );
        manifest.input(&self.layout, &path)?;
        Ok(m)
    }

    fn load_sr(&self, path: &Path, manifest: &mut RunManifest) -> Result<SrModel> {
        let m = SrModel::load(path)?;
        ensure!(
            m.config() == self.config.sr.arch,
            "architecture mismatch: {} holds {:?}, config says {:?}",
            path.display(),
            m.config(),
            self.config.sr.arch
        );
        manifest.input(&self.layout, path)?;
        Ok(m)
    }
}

fn elapsed_ms(t: Instant) -> u64 {
    t.elapsed().as_millis() as u64
}

fn progress(tag: String, epochs: usize) -> impl FnMut(&EpochRecord) {
    move |r: &EpochRecord| {
        let advce = r
            .val_advce
            .map(|v| format!(" val_advce {v:.4}"))
            .unwrap_or_default();
        eprintln!(
            "[{tag}] epoch {}/{epochs} train_loss {:.5} val_mse {:.6}{advce} lr {:e}",
            r.epoch, r.train_loss, r.val_mse, r.lr
        );
    }
}

fn save_model(path: &Path, model: &impl advsr_core::models::Parameters) -> Result<()> {
    write_atomic(path, &WeightFile::from_model(model).to_bytes())
}

/// Renders the three splits and writes them with a manifest.
pub fn gen_data(exp: &Experiment) -> Result<RunManifest> {
    let t = Instant::now();
    let mut manifest = RunManifest::new("gen-data", None, &exp.config);
    let cfg = exp.config.data_config();
    for kind in SplitKind::ALL {
        let split = make_split(&cfg, exp.config.data.seed, kind)?;
        let path = exp.layout.split(kind);
        fs::create_dir_all(exp.layout.data_dir())
            .with_context(|| format!("creating {}", exp.layout.data_dir().display()))?;
        let tmp = path.with_extension("advd.tmp");
        write_split(&split, &tmp)?;
        fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
        manifest.output(&exp.layout, &path)?;
        eprintln!("[gen-data] {} samples -> {}", split.len(), path.display());
    }
    manifest.timings_ms.insert("total".into(), elapsed_ms(t));
    manifest.save(&exp.layout.data_dir().join(MANIFEST_FILE))?;
    Ok(manifest)
}

fn write_run_outputs(
    exp: &Experiment,
    dir: &Path,
    model: &impl advsr_core::models::Parameters,
    log: &TrainLog,
    manifest: &mut RunManifest,
) -> Result<()> {
    let weights = dir.join(WEIGHTS_FILE);
    save_model(&weights, model)?;
    let log_path = dir.join(LOG_FILE);
    write_atomic(&log_path, log.to_csv().as_bytes())?;
    manifest.output(&exp.layout, &weights)?;
    manifest.output(&exp.layout, &log_path)?;
    manifest.save(&dir.join(MANIFEST_FILE))
}

/// Trains one phase into its directory under the run root.
pub fn train(exp: &Experiment, phase: Phase) -> Result<RunManifest> {
    match phase {
        Phase::Classifier => train_classifier_phase(exp),
        Phase::SrClean => train_clean_phase(exp),
        Phase::SrAdvsr => {
            train_advsr_into(exp, exp.config.sr.r, &exp.layout.phase_dir(Phase::SrAdvsr))
        }
    }
}

fn train_classifier_phase(exp: &Experiment) -> Result<RunManifest> {
    exp.require("train --phase classifier", &exp.data_deps())?;
    let t = Instant::now();
    let mut manifest = RunManifest::new("train", Some("classifier"), &exp.config);
    let data = exp.load_dataset(&mut manifest)?;
    let cfg = exp.config.train_config(TrainMode::Classifier);
    let run = train_classifier(
        &cfg,
        exp.config.classifier.arch,
        &data,
        &mut progress("classifier".into(), cfg.epochs),
    )?;
    eprintln!(
        "[classifier] initial val accuracy {:.2}%, selected epoch {} at {:.2}%",
        run.initial_val_accuracy,
        run.selected_epoch,
        run.val_accuracy[run.selected_epoch - 1]
    );
    manifest.selected_epoch = Some(run.selected_epoch);
    manifest.timings_ms.insert("total".into(), elapsed_ms(t));
    write_run_outputs(
        exp,
        &exp.layout.phase_dir(Phase::Classifier),
        &run.model,
        &run.log,
        &mut manifest,
    )?;
    Ok(manifest)
}

fn train_clean_phase(exp: &Experiment) -> Result<RunManifest> {
    exp.require("train --phase sr-clean", &exp.data_deps())?;
    let t = Instant::now();
    let mut manifest = RunManifest::new("train", Some("sr-clean"), &exp.config);
    let data = exp.load_dataset(&mut manifest)?;
    let cfg = exp.config.train_config(TrainMode::SrClean);
    let start = SrModel::build(exp.config.sr.arch, exp.config.seeds().sr_init)?;
    let spec = exp.config.attack_spec()?;
    let run = finetune_sr(
        &cfg,
        &start,
        &data,
        None,
        &exp.featnet(),
        &spec,
        &mut progress("sr-clean".into(), cfg.epochs),
    )?;
    manifest.selected_epoch = Some(run.selected_epoch);
    manifest.timings_ms.insert("total".into(), elapsed_ms(t));
    write_run_outputs(
        exp,
        &exp.layout.phase_dir(Phase::SrClean),
        &run.model,
        &run.log,
        &mut manifest,
    )?;
    Ok(manifest)
}

/// AdvSR fine-tuning of the clean checkpoint at ratio `r`, written to `dir`.
pub fn train_advsr_into(exp: &Experiment, r: f64, dir: &Path) -> Result<RunManifest> {
    let mut deps = exp.data_deps();
    deps.push((
        "train --phase classifier",
        exp.layout.weights(Phase::Classifier),
    ));
    deps.push(("train --phase sr-clean", exp.layout.weights(Phase::SrClean)));
    exp.require("train --phase sr-advsr", &deps)?;
    let t = Instant::now();
    let mut manifest = RunManifest::new("train", Some("sr-advsr"), &exp.config);
    let data = exp.load_dataset(&mut manifest)?;
    let classifier = exp.load_classifier(&mut manifest)?;
    let clean = exp.load_sr(&exp.layout.weights(Phase::SrClean), &mut manifest)?;
    let featnet = exp.featnet();
    let frozen_digests = (
        sha256_hex(&WeightFile::from_model(&classifier).to_bytes()),
        sha256_hex(&WeightFile::from_model(&featnet).to_bytes()),
    );
    let cfg: TrainConfig = exp.config.train_config_with_r(TrainMode::SrAdvsr, r);
    let run = finetune_sr(
        &cfg,
        &clean,
        &data,
        Some(&classifier),
        &featnet,
        &exp.config.attack_spec()?,
        &mut progress(format!("sr-advsr r={r}"), cfg.epochs),
    )?;
    let after = (
        sha256_hex(&WeightFile::from_model(&classifier).to_bytes()),
        sha256_hex(&WeightFile::from_model(&featnet).to_bytes()),
    );
    ensure!(
        after == frozen_digests,
        "frozen model weights changed during AdvSR training"
    );
    let balance: LossBalance = run
        .balance
        .ok_or_else(|| anyhow!("advsr run reported no loss balance"))?;
    eprintln!(
        "[sr-advsr r={r}] lambda {:e} = r * L0_advce {:.6} / L0_sr {:.6}",
        balance.lambda, balance.l0_advce, balance.l0_sr
    );
    manifest.balance = Some(balance);
    manifest.selected_epoch = Some(run.selected_epoch);
    manifest.timings_ms.insert("total".into(), elapsed_ms(t));
    write_run_outputs(exp, dir, &run.model, &run.log, &mut manifest)?;
    Ok(manifest)
}

/// Display name of an evaluated checkpoint, derived from its directory.
pub fn model_name(label: &str) -> String {
    match label {
        "sr-clean" => "Clean".into(),
        "sr-advsr" => "AdvSR".into(),
        l => match l.strip_prefix("r-") {
            Some(r) => format!("AdvSR r={r}"),
            None => l.to_string(),
        },
    }
}

fn checkpoint_label(checkpoint: &Path) -> Result<String> {
    checkpoint
        .parent()
        .and_then(Path::file_name)
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| {
            anyhow!(
                "cannot derive a label from checkpoint path {}",
                checkpoint.display()
            )
        })
}

/// Evaluates one SR checkpoint on the test split and writes the report
/// files into `out_dir`.
pub fn eval_checkpoint(
    exp: &Experiment,
    checkpoint: &Path,
    label: &str,
    out_dir: &Path,
) -> Result<EvalReport> {
    let mut deps = exp.data_deps();
    deps.push((
        "train --phase classifier",
        exp.layout.weights(Phase::Classifier),
    ));
    exp.require("eval", &deps)?;
    ensure!(
        checkpoint.is_file(),
        "checkpoint {} does not exist",
        checkpoint.display()
    );
    let t = Instant::now();
    let mut manifest = RunManifest::new("eval", None, &exp.config);
    let test = exp.load_split(SplitKind::Test, &mut manifest)?;
    let classifier = exp.load_classifier(&mut manifest)?;
    let sr = exp.load_sr(checkpoint, &mut manifest)?;
    let spec = exp.config.attack_spec()?;
    let ev = evaluate(
        &model_name(label),
        &sr,
        &classifier,
        &exp.featnet(),
        &test,
        &spec,
    )?;
    let outputs = [
        (REPORT_JSON, ev.report.to_json()?),
        (REPORT_MD, markdown_table(&[&ev.report])),
        (SAMPLES_CSV, samples_to_csv(&ev.samples)),
    ];
    for (name, text) in &outputs {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        manifest.output(&exp.layout, &path)?;
    }
    manifest.timings_ms.insert("total".into(), elapsed_ms(t));
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    let a = &ev.report.attack;
    eprintln!(
        "[eval {label}] PSNR {:.3} dB  T-ASR {:.1}%  U-ASR {:.1}%  NSA {:.1}%",
        ev.report.quality.psnr.mean, a.targeted_asr, a.untargeted_asr, a.nsa
    );
    Ok(ev.report)
}

/// Evaluates `checkpoint`, or every trained SR phase when none is given,
/// then refreshes the combined table.
pub fn eval(exp: &Experiment, checkpoint: Option<&Path>) -> Result<Vec<EvalReport>> {
    let targets: Vec<PathBuf> = match checkpoint {
        Some(c) => vec![c.to_path_buf()],
        None => {
            let found: Vec<PathBuf> = [Phase::SrClean, Phase::SrAdvsr]
                .iter()
                .map(|&p| exp.layout.weights(p))
                .filter(|p| p.is_file())
                .collect();
            ensure!(
                !found.is_empty(),
                "no SR checkpoint to evaluate under {}; train sr-clean or pass --checkpoint",
                exp.layout.root.display()
            );
            found
        }
    };
    let mut reports = Vec::new();
    for c in targets {
        let label = checkpoint_label(&c)?;
        reports.push(eval_checkpoint(
            exp,
            &c,
            &label,
            &exp.layout.eval_dir(&label),
        )?);
    }
    write_atomic(
        &exp.layout.eval_root().join("table.md"),
        markdown_table(
            &collect_reports(&exp.layout)?
                .iter()
                .map(|(_, r)| r)
                .collect::<Vec<_>>(),
        )
        .as_bytes(),
    )?;
    Ok(reports)
}

/// Reports under `<run>/eval`, Clean first, then AdvSR, then the rest by
/// label.
pub fn collect_reports(layout: &RunLayout) -> Result<Vec<(String, EvalReport)>> {
    let root = layout.eval_root();
    if !root.is_dir() {
        return Ok(Vec::new());
    }
    let mut labels: Vec<String> = fs::read_dir(&root)
        .with_context(|| format!("listing {}", root.display()))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(REPORT_JSON).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    let rank = |l: &str| match l {
        "sr-clean" => 0,
        "sr-advsr" => 1,
        _ => 2,
    };
    labels.sort_by(|a, b| rank(a).cmp(&rank(b)).then_with(|| a.cmp(b)));
    labels
        .into_iter()
        .map(|l| {
            let path = root.join(&l).join(REPORT_JSON);
            let text =
                fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let r = EvalReport::from_json(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            Ok((l, r))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub r: f64,
    pub balance: LossBalance,
    pub report: EvalReport,
}

pub const SUMMARY_HEADER: &str =
    "r,lambda,l0_advce,l0_sr,targeted_asr,untargeted_asr,nsa,psnr,ssim,pd,t_asr_equals_u_asr";

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for row in rows {
        let (a, q) = (&row.report.attack, &row.report.quality);
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{}",
            row.r,
            row.balance.lambda,
            row.balance.l0_advce,
            row.balance.l0_sr,
            a.targeted_asr,
            a.untargeted_asr,
            a.nsa,
            q.psnr.mean,
            q.ssim.mean,
            q.pd.mean,
            row.report.targeted_equals_untargeted
        );
    }
    out
}

/// Trains and evaluates one AdvSR model per ratio and writes the summary.
pub fn sweep_r(exp: &Experiment, r_list: Option<&[f64]>) -> Result<Vec<SweepRow>> {
    let rs = r_list.unwrap_or(&exp.config.sr.r_grid);
    ensure!(!rs.is_empty(), "the r list is empty");
    for &r in rs {
        ensure!(
            r >= 0.0 && r.is_finite(),
            "r must be finite and non-negative, got {r}"
        );
    }
    let mut rows = Vec::with_capacity(rs.len());
    for &r in rs {
        let dir = exp.layout.sweep_run(r);
        let m = train_advsr_into(exp, r, &dir)?;
        let label = format!("r-{r}");
        let report = eval_checkpoint(
            exp,
            &dir.join(WEIGHTS_FILE),
            &label,
            &exp.layout.sweep_eval(r),
        )?;
        rows.push(SweepRow {
            r,
            balance: m.balance.expect("advsr manifest has a balance"),
            report,
        });
    }
    write_atomic(
        &exp.layout.sweep_dir().join(SUMMARY_CSV),
        summary_csv(&rows).as_bytes(),
    )?;
    Ok(rows)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

/// Combines the evaluations of several run directories into one markdown
/// document at `<out>/report.md`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    ensure!(
        !run_dirs.is_empty(),
        "report needs at least one run directory"
    );
    let mut runs_table = String::from("| Run | Config SHA-256 |\n|---|---|\n");
    let mut sources = String::from("| Run | Model | report.json SHA-256 |\n|---|---|---|\n");
    let mut rows: Vec<EvalReport> = Vec::new();
    let mut sweep = String::new();
    for dir in run_dirs {
        let layout = RunLayout::new(dir);
        let name = run_name(dir);
        let reports = collect_reports(&layout)?;
        ensure!(
            !reports.is_empty(),
            "{} has no evaluation outputs; run `advsr eval` first",
            dir.display()
        );
        let mut digest = None;
        for (label, r) in &reports {
            let label_dir = layout.eval_dir(label);
            let m = RunManifest::load(&label_dir.join(MANIFEST_FILE))?;
            digest.get_or_insert(m.config_sha256);
            let _ = writeln!(
                sources,
                "| {name} | {} | {} |",
                r.model,
                sha256_file(&label_dir.join(REPORT_JSON))?
            );
            let mut row = r.clone();
            row.model = format!("{name} / {}", r.model);
            rows.push(row);
        }
        let _ = writeln!(runs_table, "| {name} | {} |", digest.unwrap_or_default());
        let summary = layout.sweep_dir().join(SUMMARY_CSV);
        if summary.is_file() {
            let text = fs::read_to_string(&summary)?;
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                ensure!(
                    f.len() == 11,
                    "malformed sweep summary {}",
                    summary.display()
                );
                let num = |i: usize| -> Result<f64> {
                    f[i].parse()
                        .with_context(|| format!("bad number in {}", summary.display()))
                };
                let _ = writeln!(
                    sweep,
                    "| {name} | {} | {:.4e} | {:.2} | {:.2} | {:.2} | {:.4} | {:.4} | {:.4} | {} |",
                    f[0],
                    num(1)?,
                    num(4)?,
                    num(5)?,
                    num(6)?,
                    num(7)?,
                    num(8)?,
                    num(9)?,
                    if f[10] == "true" { "yes" } else { "no" }
                );
            }
        }
    }
    let mut doc = String::from("# AdvSR experiment report\n\n## Runs\n\n");
    doc.push_str(&runs_table);
    doc.push_str("\n## Evaluation\n\nASR rates are over source-class test samples, NSA over the rest. PD is the feature-space perceptual distance.\n\n");
    doc.push_str(&markdown_table(&rows.iter().collect::<Vec<_>>()));
    if !sweep.is_empty() {
        doc.push_str("\n## Loss-ratio sweep\n\n");
        doc.push_str("| Run | r | λ | Targeted-ASR | Untargeted-ASR | NSA | PSNR μ | SSIM μ | PD μ | T-ASR = U-ASR |\n");
        doc.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        doc.push_str(&sweep);
    }
    doc.push_str("\n## Sources\n\n");
    doc.push_str(&sources);
    let path = out.join("report.md");
    write_atomic(&path, doc.as_bytes())?;
    Ok(path)
}
