//! Subcommand implementations. Each is a pure function of its arguments,
//! the config and the files it reads.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use stvsr_core::datagen::{generate_clip, SceneSpec};
use stvsr_core::degrade::make_pair;
use stvsr_core::flow::estimate_flow;
use stvsr_core::metrics::{evaluate_clip, MetricConfig, MetricReport};
use stvsr_core::pipeline::{
    evaluate_corpus, heldout_corpus, pretrain_vae, Arm, ClipSource, Inputs, Model, StepLog, Trainer,
};
use stvsr_core::losses::FeatureNet;
use stvsr_core::rng::derive_seed;
use stvsr_core::VideoTensor;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, PipelineConfig};
use crate::data::{inventory, sidecar_path, DirCorpus};
use crate::png_seq::{read_png, PngError};
use crate::report::{write_json, AblationReport, ArmReport, Report, ReportError};
use crate::rvid::{load_rvid, save_flows, save_rvid, Dtype, RvidError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    /// Process exit status: 2 config/validation, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) | CliError::Io(_) => 3,
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<stvsr_core::Error> for CliError {
    fn from(e: stvsr_core::Error) -> Self {
        match e {
            stvsr_core::Error::NonFinite(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<RvidError> for CliError {
    fn from(e: RvidError) -> Self {
        match e {
            RvidError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<PngError> for CliError {
    fn from(e: PngError) -> Self {
        match e {
            PngError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Writes `cfg.clips` random clips plus flow sidecars into `out`.
pub fn synth_data(cfg: &PipelineConfig, out: &Path, dtype: Dtype) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let corpus = cfg.corpus();
    let mut written = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips as u64 {
        let clip = corpus.clip(i)?;
        let id = format!("clip_{i:04}");
        let path = out.join(format!("{id}.rvid"));
        save_rvid(&clip.video, &path, dtype)?;
        if !clip.true_flow_fwd.is_empty() {
            save_flows(&sidecar_path(out, &id), &clip.true_flow_fwd, &clip.true_flow_bwd)?;
        }
        written.push(path);
    }
    info!("wrote {} clips to {}", cfg.clips, out.display());
    Ok(written)
}

/// One explicit scene, rendered; used by tests and debugging.
pub fn render_scene(spec: &SceneSpec) -> CliResult<VideoTensor> {
    Ok(generate_clip(spec)?.video)
}

pub fn degrade(cfg: &PipelineConfig, input: &Path, out: &Path, dtype: Dtype) -> CliResult<VideoTensor> {
    let hq = load_rvid(input)?;
    let (lq, _) = make_pair(&hq, &cfg.degradation()?)?;
    save_rvid(&lq, out, dtype)?;
    Ok(lq)
}

/// Flow from `a` to `b`, written as a one-frame two-channel f32 RVID.
pub fn flow(cfg: &PipelineConfig, a: &Path, b: &Path, out: &Path) -> CliResult<()> {
    let fa = read_png(a)?;
    let fb = read_png(b)?;
    if !fa.same_shape(&fb) {
        return Err(CliError::Invalid(format!("{} and {} differ in size", a.display(), b.display())));
    }
    let f = estimate_flow(&fa, &fb, &cfg.flow())?;
    save_flows(out, std::slice::from_ref(&f), &[])?;
    Ok(())
}

pub fn restore(cfg: &PipelineConfig, input: &Path, checkpoint: &Path, out: &Path, dtype: Dtype) -> CliResult<VideoTensor> {
    let ck = Checkpoint::load(checkpoint)?;
    ck.check_compatible(&cfg.arch()?)?;
    let settings = cfg.settings()?;
    let lq = load_rvid(input)?;
    let (_, h, w, _) = lq.dims();
    let (hh, ww) = (h * settings.scales.phi_s, w * settings.scales.phi_s);
    if hh % stvsr_core::latent::VAE_STRIDE != 0 || ww % stvsr_core::latent::VAE_STRIDE != 0 {
        return Err(CliError::Invalid(format!("output {hh}x{ww} is not divisible by the autoencoder stride")));
    }
    let inputs = Inputs::from_lq(lq, &settings)?;
    let restored = ck.model.restore(&inputs, &settings)?;
    save_rvid(&restored, out, dtype)?;
    Ok(restored)
}

/// Line-delimited JSON record of one optimisation step.
pub fn step_record(log: &StepLog) -> String {
    let v = serde_json::json!({
        "step": log.step,
        "latent": log.parts.latent,
        "rec": log.parts.rec,
        "perc": log.parts.perc,
        "consis": log.parts.consis,
        "total": log.total,
    });
    v.to_string()
}

/// Fresh model with a pretrained autoencoder, or the model of `init`.
pub fn initial_model(cfg: &PipelineConfig, source: &dyn ClipSource, init: Option<&Path>) -> CliResult<Model<f32>> {
    let arch = cfg.arch()?;
    if let Some(p) = init {
        let ck = Checkpoint::load(p)?;
        ck.check_compatible(&arch)?;
        return Ok(ck.model);
    }
    let mut model = Model::<f32>::new(arch, cfg.seed)?;
    let recipe = cfg.vae_recipe()?;
    if recipe.steps > 0 {
        let mse = pretrain_vae(&mut model, source, &cfg.degradation()?, cfg.scales()?, &recipe)?;
        info!("autoencoder pretrained for {} steps, final mse {mse:.5}", recipe.steps);
    }
    Ok(model)
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
}

/// Runs `cfg.iters` steps from `model`, streaming step records to `log`.
/// On a non-finite loss or update the last good parameters are saved to
/// `out` and a numerical error is returned.
pub fn train_model(
    cfg: &PipelineConfig,
    source: &dyn ClipSource,
    model: Model<f32>,
    out: &Path,
    mut log: Option<&mut dyn Write>,
) -> CliResult<TrainOutcome> {
    let settings = cfg.settings()?;
    let mut trainer = Trainer::new(model, settings.clone(), cfg.train_config()?)?;
    let mut logs = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let good = trainer.model.params.clone();
        match trainer.train_step(source) {
            Ok(l) => {
                if let Some(w) = log.as_deref_mut() {
                    writeln!(w, "{}", step_record(&l)).map_err(|e| io_err(out, e))?;
                }
                if (it + 1) % 50 == 0 {
                    info!("step {} total {:.5}", l.step, l.total);
                }
                logs.push(l);
            }
            Err(e @ stvsr_core::Error::NonFinite(_)) => {
                trainer.model.params = good;
                let ck = Checkpoint::new(trainer.model, settings.schedule.t_max, settings.timestep, cfg.seed, it);
                ck.save(out)?;
                warn!("step {} failed; kept the checkpoint from step {it}", it + 1);
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    let ck = Checkpoint::new(trainer.model, settings.schedule.t_max, settings.timestep, cfg.seed, trainer.step);
    ck.save(out)?;
    Ok(TrainOutcome { checkpoint: ck, logs })
}

/// `train`: data from `data` when given, otherwise the synthetic corpus.
/// The metrics log goes to `log_path` (default: `<out>.log.jsonl`).
pub fn train(cfg: &PipelineConfig, data: Option<&Path>, out: &Path, init: Option<&Path>, log_path: Option<&Path>) -> CliResult<TrainOutcome> {
    let dir;
    let synth;
    let source: &dyn ClipSource = match data {
        Some(d) => {
            dir = DirCorpus::load(d)?;
            &dir
        }
        None => {
            synth = cfg.corpus();
            &synth
        }
    };
    let model = initial_model(cfg, source, init)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", out.display())));
    let f = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut w = BufWriter::new(f);
    let r = train_model(cfg, source, model, out, Some(&mut w));
    w.flush().map_err(|e| io_err(&log_path, e))?;
    r
}

pub fn metric_config(cfg: &PipelineConfig) -> MetricConfig {
    MetricConfig { feature_seed: cfg.feature_seed, ..MetricConfig::default() }
}

/// `evaluate`: pairs clips of the two directories by id.
pub fn evaluate(cfg: &PipelineConfig, restored: &Path, reference: &Path, out: &Path) -> CliResult<Report> {
    let ours = inventory(restored)?;
    let refs = inventory(reference)?;
    let a: BTreeSet<&String> = ours.iter().map(|(id, _)| id).collect();
    let b: BTreeSet<&String> = refs.iter().map(|(id, _)| id).collect();
    if a != b {
        let missing: Vec<&&String> = b.difference(&a).collect();
        let extra: Vec<&&String> = a.difference(&b).collect();
        return Err(CliError::Invalid(format!("clip inventories differ: missing {missing:?}, extra {extra:?}")));
    }
    let mc = metric_config(cfg);
    let feat = FeatureNet::new(mc.feature_seed, cfg.channels);
    let mut rows = Vec::with_capacity(ours.len());
    for ((id, p), (_, q)) in ours.iter().zip(&refs) {
        let (x, y) = (load_rvid(p)?, load_rvid(q)?);
        let (x, y) = if x.dims().3 != y.dims().3 { (x.to_rgb(), y.to_rgb()) } else { (x, y) };
        let feat = if x.dims().3 == cfg.channels { feat.clone() } else { FeatureNet::new(mc.feature_seed, x.dims().3) };
        rows.push(evaluate_clip(id, &x, &y, &mc, &feat)?);
    }
    let report = Report::from_metrics(&MetricReport::from_clips(mc.fingerprint(), rows)?);
    write_json(out, &report)?;
    Ok(report)
}

/// `ablate`: one matched-budget training run per distinct arm, all from the
/// same autoencoder, evaluated on the same held-out clips. Arms that build
/// identical models share one run.
pub fn ablate(cfg: &PipelineConfig, arms: &[Arm], out: &Path) -> CliResult<AblationReport> {
    let corpus = cfg.corpus();
    let held = heldout_corpus(&corpus, cfg.heldout_seed);
    let mc = metric_config(cfg);
    let deg = stvsr_core::degrade::DegradationConfig { seed: derive_seed(cfg.heldout_seed, "eval-degrade", 0), ..cfg.degradation()? };
    let base_model = initial_model(cfg, &corpus, None)?;
    let mut arm_reports: Vec<ArmReport> = Vec::with_capacity(arms.len());
    let mut baseline = None;
    let mut done: Vec<(Arm, usize)> = Vec::new();
    for &arm in arms {
        let key = |a: Arm| (a.aggregation(), a.uses_vrg());
        if let Some(&(_, j)) = done.iter().find(|(a, _)| key(*a) == key(arm)) {
            let mut r = arm_reports[j].clone();
            r.arm = arm.name().into();
            arm_reports.push(r);
            continue;
        }
        info!("ablation arm {}", arm.name());
        let arm_cfg = PipelineConfig { arm: arm.name().into(), ..cfg.clone() };
        let ck_path = out.with_extension(format!("{}.ckpt", arm.name()));
        let outcome = train_model(&arm_cfg, &corpus, base_model.clone(), &ck_path, None)?;
        let settings = arm_cfg.settings()?;
        let (ours, base) = evaluate_corpus(&outcome.checkpoint.model, &settings, &held, cfg.heldout_clips, &deg, &mc)?;
        baseline.get_or_insert_with(|| Report::from_metrics(&base));
        let final_loss = outcome.logs.last().map(|l| l.total);
        done.push((arm, arm_reports.len()));
        arm_reports.push(ArmReport { arm: arm.name().into(), final_loss, report: Report::from_metrics(&ours) });
    }
    let baseline = baseline.ok_or_else(|| CliError::Invalid("no ablation arms given".into()))?;
    let report = AblationReport {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        iters: cfg.iters,
        batch: cfg.batch,
        seed: cfg.seed,
        baseline,
        arms: arm_reports,
    };
    write_json(out, &report)?;
    Ok(report)
}
