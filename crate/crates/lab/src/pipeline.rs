//! Experiment stages. Each stage has an in-memory form used by tests and a
//! file-backed form used by the CLI; both produce identical results.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use noisemia_core::attack::{
    loss_baseline_score, naive_attack_score, score_from_noise, semantic_noise, AttackConfig, DdimPipeline, Membership,
    Method, Query, ScoreRecord,
};
use noisemia_core::data::{generate_mixture_dataset, MixtureSpec, Partition, Sample, SampleSet};
use noisemia_core::denoiser::DenoiserModel;
use noisemia_core::evaluation::{delta_stats, evaluate, export_distribution, DeltaStats, EvalReport, Histogram};
use noisemia_core::schedule::{schedule_report, NoiseSchedule, ScheduleKind};
use noisemia_core::trainer::{finetune, finetune_with_defense, pretrain, TrainOutcome};
use noisemia_core::SeededRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Stage};
use crate::store::{self, NoiseStates};
use crate::tables;
use crate::{MissingInput, RuntimeError};

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn dataset(&self) -> PathBuf {
        self.dir.join("dataset.bin")
    }

    pub fn schedule_report(&self) -> PathBuf {
        self.dir.join("schedule_report.csv")
    }

    pub fn pretrained(&self) -> PathBuf {
        self.dir.join("pretrained.ckpt")
    }

    pub fn pretrain_loss(&self) -> PathBuf {
        self.dir.join("pretrain_loss.csv")
    }

    pub fn finetuned(&self) -> PathBuf {
        self.dir.join("finetuned.ckpt")
    }

    pub fn finetune_loss(&self) -> PathBuf {
        self.dir.join("finetune_loss.csv")
    }

    pub fn scores(&self, method: Method) -> PathBuf {
        self.dir.join(format!("scores_{method}.csv"))
    }

    pub fn semantic_noise(&self) -> PathBuf {
        self.dir.join("semantic_noise.bin")
    }

    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }

    pub fn distribution(&self, method: Method) -> PathBuf {
        self.dir.join(format!("distribution_{method}.csv"))
    }

    pub fn sweep_json(&self) -> PathBuf {
        self.dir.join("sweep.json")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }
}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(MissingInput(path.to_path_buf()).into());
    }
    Ok(())
}

pub fn schedule(cfg: &ExperimentConfig) -> anyhow::Result<NoiseSchedule> {
    Ok(NoiseSchedule::new(cfg.schedule.kind, cfg.schedule.num_timesteps)?)
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> anyhow::Result<SampleSet> {
    let d = &cfg.data;
    let spec = MixtureSpec {
        data_dim: d.data_dim,
        num_conditions: d.num_conditions,
        n_pretrain: d.n_pretrain,
        n_member: d.n_member,
        n_nonmember: d.n_nonmember,
    };
    Ok(generate_mixture_dataset(spec, cfg.stage_seed(Stage::Data))?)
}

fn check_dataset(cfg: &ExperimentConfig, set: &SampleSet) -> anyhow::Result<()> {
    if set.data_dim != cfg.data.data_dim || set.num_conditions != cfg.data.num_conditions {
        bail!(RuntimeError(format!(
            "dataset has data_dim {} and {} conditions, config expects {} and {}",
            set.data_dim, set.num_conditions, cfg.data.data_dim, cfg.data.num_conditions
        )));
    }
    Ok(())
}

fn check_checkpoint(cfg: &ExperimentConfig, m: &DenoiserModel, what: &str) -> anyhow::Result<()> {
    if *m.architecture() != cfg.architecture() {
        bail!(RuntimeError(format!(
            "{what} architecture {:?} differs from config {:?}",
            m.architecture(),
            cfg.architecture()
        )));
    }
    Ok(())
}

pub fn pretrain_model(cfg: &ExperimentConfig, set: &SampleSet, s: &NoiseSchedule) -> anyhow::Result<TrainOutcome> {
    let data = set.partition(Partition::Pretrain);
    pretrain(cfg.architecture(), &data, s, &cfg.train_config(Stage::Pretrain)).context("pretraining")
}

/// Fine-tunes on the member partition, with the defense when enabled.
pub fn finetune_model(
    cfg: &ExperimentConfig,
    base: &DenoiserModel,
    set: &SampleSet,
    s: &NoiseSchedule,
) -> anyhow::Result<TrainOutcome> {
    let members = set.partition(Partition::Member);
    let tc = cfg.train_config(Stage::Finetune);
    let out = if tc.defense.is_some() {
        finetune_with_defense(base, &members, s, &tc)
    } else {
        finetune(base, &members, s, &tc)
    };
    out.context("fine-tuning")
}

/// Members and non-members in sample-id order.
pub fn attack_targets(set: &SampleSet) -> Vec<&Sample> {
    set.samples.iter().filter(|s| s.partition != Partition::Pretrain).collect()
}

fn query(s: &Sample) -> Query<'_> {
    let label = Membership::try_from(s.partition).expect("attack targets exclude pretraining samples");
    Query { sample_id: s.id, x0: &s.x0, cond: s.cond, label }
}

fn sample_rng(seed: u64, sample_id: usize, stream: u64) -> SeededRng {
    noisemia_core::stream_rng(seed, ((sample_id as u64) << 2) | stream)
}

fn thread_pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?)
}

pub struct AttackOutput {
    /// Grouped by method in `Method::ALL` order, then by sample id.
    pub records: Vec<ScoreRecord>,
    /// Present when the inversion method ran.
    pub noise: Option<NoiseStates>,
}

/// Scores every member and non-member. Per-sample randomness is keyed on the
/// sample id, so results do not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_attack(
    cfg: &ExperimentConfig,
    attack: &AttackConfig,
    methods: &[Method],
    set: &SampleSet,
    s: &NoiseSchedule,
    pretrained: &DenoiserModel,
    target: &DenoiserModel,
    jobs: usize,
) -> anyhow::Result<AttackOutput> {
    let targets = attack_targets(set);
    let seed = cfg.stage_seed(Stage::Attack);
    let pipeline = DdimPipeline::new(target, s);
    let want = |m: Method| methods.contains(&m);
    type Row = (Option<(ScoreRecord, Vec<f64>)>, Option<ScoreRecord>, Option<ScoreRecord>);
    let per_sample = |sample: &&Sample| -> noisemia_core::Result<Row> {
        let q = query(sample);
        let inversion = if want(Method::Inversion) {
            let noise = semantic_noise(pretrained, s, q.x0, q.cond, attack)?;
            Some((score_from_noise(&pipeline, &noise, q, Method::Inversion, attack)?, noise))
        } else {
            None
        };
        let naive = if want(Method::Naive) {
            Some(naive_attack_score(&pipeline, q, attack, &mut sample_rng(seed, q.sample_id, 0))?)
        } else {
            None
        };
        let loss = if want(Method::LossBaseline) {
            let mut rng = sample_rng(seed, q.sample_id, 1);
            Some(loss_baseline_score(target, s, q, cfg.loss_t_probe(), cfg.attack.loss_draws, &mut rng)?)
        } else {
            None
        };
        Ok((inversion, naive, loss))
    };
    let rows: Vec<Row> =
        thread_pool(jobs)?.install(|| targets.par_iter().map(per_sample).collect::<noisemia_core::Result<_>>())?;

    let mut records = Vec::new();
    let mut noise =
        want(Method::Inversion).then(|| NoiseStates { sample_ids: Vec::new(), dim: set.data_dim, states: Vec::new() });
    for (inv, _, _) in &rows {
        if let (Some((r, n)), Some(states)) = (inv, noise.as_mut()) {
            records.push(*r);
            states.sample_ids.push(r.sample_id);
            states.states.extend_from_slice(n);
        }
    }
    records.extend(rows.iter().filter_map(|r| r.1));
    records.extend(rows.iter().filter_map(|r| r.2));
    Ok(AttackOutput { records, noise })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    /// Digest embedded in the score files that were evaluated.
    pub scores_digest: String,
    pub config: ExperimentConfig,
    pub reports: Vec<EvalReport>,
    /// Present when both the naive and the inversion scores were evaluated.
    pub delta: Option<DeltaStats>,
}

pub fn evaluate_records(
    cfg: &ExperimentConfig,
    records: &[ScoreRecord],
    scores_digest: &str,
) -> anyhow::Result<(ExperimentReport, Vec<(Method, Histogram)>)> {
    let digest = cfg.digest_hex();
    let mut reports = Vec::new();
    let mut histograms = Vec::new();
    for m in Method::ALL {
        let subset: Vec<ScoreRecord> = records.iter().filter(|r| r.method == m).copied().collect();
        if subset.is_empty() {
            continue;
        }
        let e = &cfg.evaluate;
        reports.push(
            evaluate(&subset, &e.fpr_levels, e.percentile_k, &digest).with_context(|| format!("evaluating {m}"))?,
        );
        histograms.push((m, export_distribution(&subset, e.bins)?));
    }
    if reports.is_empty() {
        bail!(RuntimeError("no score records to evaluate".into()));
    }
    let has = |m: Method| records.iter().any(|r| r.method == m);
    let delta = if has(Method::Naive) && has(Method::Inversion) { Some(delta_stats(records)?) } else { None };
    let report = ExperimentReport {
        config_digest: digest,
        scores_digest: scores_digest.into(),
        config: cfg.clone(),
        reports,
        delta,
    };
    Ok((report, histograms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub i_step: usize,
    pub gamma2: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub cells: Vec<SweepCell>,
}

/// Inversion attack over the `i_step` x `gamma2` grid.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    set: &SampleSet,
    s: &NoiseSchedule,
    pretrained: &DenoiserModel,
    target: &DenoiserModel,
    jobs: usize,
) -> anyhow::Result<SweepReport> {
    let mut cells = Vec::new();
    for &i_step in &cfg.sweep.i_steps {
        for &gamma2 in &cfg.sweep.gamma2s {
            let attack = cfg.attack_config(i_step, gamma2)?;
            let out = run_attack(cfg, &attack, &[Method::Inversion], set, s, pretrained, target, jobs)?;
            let e = &cfg.evaluate;
            let report = evaluate(&out.records, &e.fpr_levels, e.percentile_k, &cfg.digest_hex())?;
            cells.push(SweepCell { i_step, gamma2, report });
        }
    }
    Ok(SweepReport { config_digest: cfg.digest_hex(), config: cfg.clone(), cells })
}

fn json(value: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn load_dataset(layout: &Layout, cfg: &ExperimentConfig) -> anyhow::Result<SampleSet> {
    let path = layout.dataset();
    require(&path)?;
    let (set, _) = store::load_dataset(&path).with_context(|| format!("loading {}", path.display()))?;
    check_dataset(cfg, &set)?;
    Ok(set)
}

fn load_model(path: &Path, cfg: &ExperimentConfig, what: &str) -> anyhow::Result<DenoiserModel> {
    require(path)?;
    let (m, _) = store::load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    check_checkpoint(cfg, &m, what)?;
    Ok(m)
}

pub fn stage_gen_data(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let set = generate_dataset(cfg)?;
    store::save_dataset(&layout.dataset(), &set, cfg.digest())?;
    Ok(())
}

pub fn stage_schedule_report(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let rows = schedule_report(&ScheduleKind::ALL, cfg.schedule.num_timesteps)?;
    tables::write_text(&layout.schedule_report(), &tables::schedule_csv(&cfg.digest_hex(), &rows))
}

pub fn stage_pretrain(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let set = load_dataset(layout, cfg)?;
    let out = pretrain_model(cfg, &set, &schedule(cfg)?)?;
    store::save_checkpoint(&layout.pretrained(), &out.model, cfg.digest())?;
    tables::write_text(&layout.pretrain_loss(), &tables::loss_csv(&cfg.digest_hex(), &out.history))
}

pub fn stage_finetune(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    let set = load_dataset(layout, cfg)?;
    let base = load_model(&layout.pretrained(), cfg, "pretrained checkpoint")?;
    let out = finetune_model(cfg, &base, &set, &schedule(cfg)?)?;
    store::save_checkpoint(&layout.finetuned(), &out.model, cfg.digest())?;
    tables::write_text(&layout.finetune_loss(), &tables::loss_csv(&cfg.digest_hex(), &out.history))
}

pub fn stage_attack(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> anyhow::Result<()> {
    let set = load_dataset(layout, cfg)?;
    let base = load_model(&layout.pretrained(), cfg, "pretrained checkpoint")?;
    let target = load_model(&layout.finetuned(), cfg, "fine-tuned checkpoint")?;
    let attack = cfg.attack_config(cfg.attack.i_step, cfg.attack.gamma2)?;
    let out = run_attack(cfg, &attack, &cfg.attack.methods, &set, &schedule(cfg)?, &base, &target, jobs)?;
    let digest = cfg.digest_hex();
    for m in Method::ALL.into_iter().filter(|m| cfg.attack.methods.contains(m)) {
        let subset: Vec<ScoreRecord> = out.records.iter().filter(|r| r.method == m).copied().collect();
        tables::write_text(&layout.scores(m), &tables::scores_csv(&digest, &subset))?;
    }
    if let Some(noise) = &out.noise {
        store::save_noise_states(&layout.semantic_noise(), noise, cfg.digest())?;
    }
    Ok(())
}

/// Reads the configured methods' score files, refusing files whose digests differ.
pub fn load_scores(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<(String, Vec<ScoreRecord>)> {
    let mut digest: Option<(String, PathBuf)> = None;
    let mut records = Vec::new();
    for m in Method::ALL.into_iter().filter(|m| cfg.attack.methods.contains(m)) {
        let path = layout.scores(m);
        require(&path)?;
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let (d, recs) = tables::parse_scores(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some((first, first_path)) = &digest {
            if *first != d {
                bail!(crate::DigestMismatch { first: first_path.clone(), second: path });
            }
        } else {
            digest = Some((d, path));
        }
        records.extend(recs);
    }
    let (d, _) = digest.expect("config validation requires at least one method");
    Ok((d, records))
}

pub fn stage_evaluate(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<ExperimentReport> {
    let (scores_digest, records) = load_scores(cfg, layout)?;
    let (report, histograms) = evaluate_records(cfg, &records, &scores_digest)?;
    tables::write_text(&layout.report(), &json(&report))?;
    for (m, h) in &histograms {
        tables::write_text(&layout.distribution(*m), &tables::histogram_csv(&report.config_digest, h))?;
    }
    Ok(report)
}

pub fn stage_sweep(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> anyhow::Result<SweepReport> {
    let set = load_dataset(layout, cfg)?;
    let base = load_model(&layout.pretrained(), cfg, "pretrained checkpoint")?;
    let target = load_model(&layout.finetuned(), cfg, "fine-tuned checkpoint")?;
    let report = run_sweep(cfg, &set, &schedule(cfg)?, &base, &target, jobs)?;
    tables::write_text(&layout.sweep_json(), &json(&report))?;
    let rows: String =
        report.cells.iter().map(|c| format!("{},{},{},{}\n", c.i_step, c.gamma2, c.report.auc, c.report.asr)).collect();
    let csv = format!("# config_digest={}\ni_step,gamma2,auc,asr\n{rows}", report.config_digest);
    tables::write_text(&layout.sweep_csv(), &csv)?;
    Ok(report)
}

/// gen-data, schedule-report, pretrain, finetune, attack and evaluate in order.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout, jobs: usize) -> anyhow::Result<ExperimentReport> {
    stage_gen_data(cfg, layout)?;
    stage_schedule_report(cfg, layout)?;
    stage_pretrain(cfg, layout)?;
    stage_finetune(cfg, layout)?;
    stage_attack(cfg, layout, jobs)?;
    stage_evaluate(cfg, layout)
}
