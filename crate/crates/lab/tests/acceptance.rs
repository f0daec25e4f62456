//! Acceptance criteria, one line per criterion. Runs without the libtest
//! harness so every line is printed; exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use noisemia_core::attack::{semantic_noise, AttackConfig, Membership, Method, ScoreRecord};
use noisemia_core::data::{Partition, SampleSet};
use noisemia_core::denoiser::{
    denoising_loss_with_draws, draw_noise, param_cosine_similarity, Architecture, Condition, DenoiserModel, Example,
    GuidanceScale, NoisePredictor,
};
use noisemia_core::evaluation::{auc, delta_stats, tpr_at_fpr};
use noisemia_core::sampler::{generate, inversion_similarity, StepGrid};
use noisemia_core::schedule::{NoiseSchedule, ScheduleKind};
use noisemia_core::trainer::{finetune_with_defense, memorization_score, DefenseConfig, Trainer, DEFAULT_SS_TIMESTEPS};
use noisemia_core::{seeded_rng, stream_rng};
use noisemia_lab::config::{ExperimentConfig, Stage};
use noisemia_lab::pipeline::{self, Layout};
use noisemia_lab::tables;
use rand::Rng;
use rand_distr::StandardNormal;

const CHECKPOINTS: [usize; 3] = [50, 150, 300];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// The standard toy experiment, trained once and shared by criteria 5, 6, 7 and 9.
struct Standard {
    cfg: ExperimentConfig,
    set: SampleSet,
    schedule: NoiseSchedule,
    base: DenoiserModel,
    checkpoints: Vec<DenoiserModel>,
    train_time: Duration,
}

impl Standard {
    fn target(&self) -> &DenoiserModel {
        self.checkpoints.last().expect("three checkpoints")
    }
}

fn standard() -> &'static Standard {
    static CELL: OnceLock<Standard> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = ExperimentConfig::default();
        let set = pipeline::generate_dataset(&cfg).unwrap();
        let schedule = pipeline::schedule(&cfg).unwrap();
        let base = pipeline::pretrain_model(&cfg, &set, &schedule).unwrap().model;
        let members = set.partition(Partition::Member);
        let mut trainer = Trainer::new(base.clone(), &members, &schedule, cfg.train_config(Stage::Finetune)).unwrap();
        let mut checkpoints = Vec::new();
        while trainer.epochs_done() < cfg.finetune.epochs {
            trainer.run_epoch().unwrap();
            if CHECKPOINTS.contains(&trainer.epochs_done()) {
                checkpoints.push(trainer.model().clone());
            }
        }
        assert_eq!(checkpoints.len(), CHECKPOINTS.len(), "fine-tuning must reach every checkpoint");
        Standard { cfg, set, schedule, base, checkpoints, train_time: start.elapsed() }
    })
}

fn default_attack(cfg: &ExperimentConfig) -> AttackConfig {
    cfg.attack_config(cfg.attack.i_step, cfg.attack.gamma2).unwrap()
}

fn attack(std: &Standard, target: &DenoiserModel, methods: &[Method]) -> Vec<ScoreRecord> {
    let a = default_attack(&std.cfg);
    pipeline::run_attack(&std.cfg, &a, methods, &std.set, &std.schedule, &std.base, target, 1).unwrap().records
}

fn of_method(records: &[ScoreRecord], m: Method) -> Vec<ScoreRecord> {
    records.iter().filter(|r| r.method == m).copied().collect()
}

fn mean_score(records: &[ScoreRecord], label: Membership) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.label == label).map(|r| r.score).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_noisemia")
}

fn criterion_1() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let status = Command::new(bin()).args(["schedule-report", "--out"]).arg(dir.path()).status().unwrap();
    let elapsed = start.elapsed();
    assert!(status.success());
    let text = std::fs::read_to_string(Layout::new(dir.path()).schedule_report()).unwrap();
    let parsed = tables::parse_table(&text, tables::SCHEDULE_HEADER).unwrap();
    let expected = [
        ("linear", 4.04e-5, 0.02, 0.006353),
        ("cosine", 4.24e-9, 0.05, 0.00004928),
        ("scaled_linear", 4.68e-3, 0.02, 0.068265),
    ];
    let mut pass = elapsed < Duration::from_secs(1);
    let mut parts = Vec::new();
    for (kind, snr, rel, sqrt_ab) in expected {
        let row = parsed.rows.iter().find(|r| r[0] == kind).unwrap();
        let got_snr: f64 = row[1].parse().unwrap();
        let got_sqrt: f64 = row[2].parse().unwrap();
        let snr_ok = ((got_snr - snr) / snr).abs() <= rel;
        let sqrt_ok = (got_sqrt - sqrt_ab).abs() <= 1e-4;
        pass &= snr_ok && sqrt_ok;
        parts.push(format!(
            "{kind} snr={got_snr:.4e} (want {snr:.3e} +-{}%{}) sqrt_ab={got_sqrt:.6} ({})",
            rel * 100.0,
            if snr_ok { "" } else { ", OUT" },
            if sqrt_ok { "ok" } else { "OUT" }
        ));
    }
    parts.push(format!("{elapsed:.2?}"));
    verdict(pass, parts.join("; "))
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = seeded_rng(1000 + seed);
        let arch = Architecture {
            data_dim: rng.random_range(1..5),
            num_conditions: rng.random_range(1..4),
            time_embed_dim: 2 * rng.random_range(1..4),
            cond_embed_dim: rng.random_range(1..4),
            hidden_dim: rng.random_range(2..12),
            num_timesteps: 50,
        };
        let s = NoiseSchedule::new(ScheduleKind::ALL[seed as usize % 3], 50).unwrap();
        let model = DenoiserModel::init(arch, seed).unwrap();
        let xs: Vec<Vec<f64>> =
            (0..3).map(|_| (0..arch.data_dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let batch: Vec<Example> =
            xs.iter().map(|x| Example { x0: x, class: rng.random_range(0..arch.num_conditions) }).collect();
        let draws: Vec<_> = batch.iter().map(|_| draw_noise(&mut rng, arch.data_dim, 50, 0.3)).collect();
        let (_, grads) = denoising_loss_with_draws(&model, &s, &batch, &draws).unwrap();
        let loss_at = |w: &[f64]| {
            let m = DenoiserModel::from_parts(arch, w.to_vec(), seed).unwrap();
            denoising_loss_with_draws(&m, &s, &batch, &draws).unwrap().0
        };
        let mut sampled = 0;
        let mut attempts = 0;
        while sampled < 50 && attempts < 10_000 {
            attempts += 1;
            let i = rng.random_range(0..model.param_count());
            if grads[i].abs() <= 1e-8 {
                continue;
            }
            let h = 1e-5 * model.weights()[i].abs().max(1.0);
            let mut w = model.weights().to_vec();
            w[i] += h;
            let up = loss_at(&w);
            w[i] -= 2.0 * h;
            let down = loss_at(&w);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((fd - grads[i]).abs() / grads[i].abs());
            sampled += 1;
        }
        checked += sampled;
    }
    let elapsed = start.elapsed();
    verdict(
        worst < 1e-4 && checked == 500 && elapsed < Duration::from_secs(30),
        format!("{checked} coordinates, worst relative error {worst:.2e}, {elapsed:.2?}"),
    )
}

/// Predicts the exact noise that took `x0` to `x_t`.
struct ExactNoise<'a> {
    x0: &'a [f64],
    s: &'a NoiseSchedule,
}

impl NoisePredictor for ExactNoise<'_> {
    fn data_dim(&self) -> usize {
        self.x0.len()
    }

    fn predict_noise(&self, x_t: &[f64], t: usize, _cond: Condition) -> noisemia_core::Result<Vec<f64>> {
        let ab = self.s.alpha_bar()[t];
        Ok(x_t.iter().zip(self.x0).map(|(x, x0)| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
    }
}

fn criterion_3() -> Verdict {
    let mut worst = 0.0f64;
    let mut rng = seeded_rng(3);
    for kind in ScheduleKind::ALL {
        let s = NoiseSchedule::new(kind, 1000).unwrap();
        for steps in [10, 50, 1000] {
            for _ in 0..5 {
                let x0: Vec<f64> = (0..8).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
                let eps: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
                let x_t = s.forward_diffuse(&x0, s.last_index(), &eps).unwrap();
                let oracle = ExactNoise { x0: &x0, s: &s };
                let grid = StepGrid::uniform(s.len(), steps).unwrap();
                let out = generate(&oracle, &s, &x_t, Condition::Class(0), GuidanceScale::ZERO, &grid).unwrap();
                let err = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
            }
        }
    }
    verdict(worst < 1e-8, format!("worst max-abs reconstruction error {worst:.2e} over 3 schedules x grids 10/50/1000"))
}

fn auc_oracle(r: &[ScoreRecord]) -> f64 {
    let m: Vec<f64> = r.iter().filter(|x| x.label == Membership::Member).map(|x| x.score).collect();
    let n: Vec<f64> = r.iter().filter(|x| x.label == Membership::Nonmember).map(|x| x.score).collect();
    let mut wins = 0.0;
    for a in &m {
        for b in &n {
            wins += if a < b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (m.len() * n.len()) as f64
}

fn tpr_oracle(r: &[ScoreRecord], fpr: f64) -> f64 {
    let count = |label: Membership, tau: f64| r.iter().filter(|x| x.label == label && x.score <= tau).count() as f64;
    let total = |label: Membership| r.iter().filter(|x| x.label == label).count() as f64;
    let mut best = 0.0f64;
    for tau in r.iter().map(|x| x.score) {
        if count(Membership::Nonmember, tau) / total(Membership::Nonmember) <= fpr {
            best = best.max(count(Membership::Member, tau) / total(Membership::Member));
        }
    }
    best
}

fn criterion_4() -> Verdict {
    let mut worst = 0.0f64;
    for set in 0..20u64 {
        let mut rng = seeded_rng(400 + set);
        let n = rng.random_range(2..=500);
        let tie_heavy = set % 2 == 0;
        let mut records: Vec<ScoreRecord> = (0..n)
            .map(|i| {
                let label = if rng.random::<bool>() { Membership::Member } else { Membership::Nonmember };
                let score = if tie_heavy { rng.random_range(0..8) as f64 } else { rng.random::<f64>() };
                ScoreRecord { sample_id: i, method: Method::Inversion, label, score }
            })
            .collect();
        records[0].label = Membership::Member;
        records[1].label = Membership::Nonmember;
        worst = worst.max((auc(&records).unwrap() - auc_oracle(&records)).abs());
        for fpr in [0.0, 0.01, 0.05, 0.1, 0.5, 1.0] {
            worst = worst.max((tpr_at_fpr(&records, fpr).unwrap() - tpr_oracle(&records, fpr)).abs());
        }
    }
    verdict(worst <= 1e-12, format!("20 record sets (10 tie-heavy), worst deviation from oracles {worst:.1e}"))
}

fn criterion_5() -> Verdict {
    let std = standard();
    let start = Instant::now();
    let records = attack(std, std.target(), &[Method::Inversion, Method::Naive]);
    let elapsed = std.train_time + start.elapsed();
    let inv = of_method(&records, Method::Inversion);
    let naive = of_method(&records, Method::Naive);
    let (auc_inv, auc_naive) = (auc(&inv).unwrap(), auc(&naive).unwrap());
    let d = delta_stats(&records).unwrap();
    let (mem, non) = (mean_score(&inv, Membership::Member), mean_score(&inv, Membership::Nonmember));
    let pass = auc_inv >= 0.65
        && auc_inv - auc_naive >= 0.05
        && mem < non
        && d.member_delta < 0.0
        && d.nonmember_delta > 0.0
        && elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "AUC inversion {auc_inv:.4} (want >= 0.65), naive {auc_naive:.4}, gain {:+.4} (want >= +0.05); \
             mean score member {mem:.4} vs non-member {non:.4}; delta member {:+.4} (want < 0), non-member {:+.4} (want > 0); {elapsed:.1?}",
            auc_inv - auc_naive,
            d.member_delta,
            d.nonmember_delta
        ),
    )
}

fn criterion_6() -> Verdict {
    let std = standard();
    let a = default_attack(&std.cfg);
    let members = std.set.partition(Partition::Member);
    let pre: Vec<Vec<f64>> =
        members.iter().map(|m| semantic_noise(&std.base, &std.schedule, &m.x0, m.cond, &a).unwrap()).collect();
    let mut cos = Vec::new();
    let mut sim = Vec::new();
    for ckpt in &std.checkpoints {
        cos.push(param_cosine_similarity(&std.base, ckpt).unwrap());
        let total: f64 = members
            .iter()
            .zip(&pre)
            .map(|(m, p)| {
                let own = semantic_noise(ckpt, &std.schedule, &m.x0, m.cond, &a).unwrap();
                inversion_similarity(&own, p).unwrap()
            })
            .sum();
        sim.push(total / members.len() as f64);
    }
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    let pass = decreasing(&cos) && decreasing(&sim) && cos[0] > 0.8 && sim[0] > 0.8;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" > ");
    verdict(pass, format!("epochs {CHECKPOINTS:?}: parameter cosine {}; inversion similarity {}", fmt(&cos), fmt(&sim)))
}

fn criterion_7() -> Verdict {
    let std = standard();
    let members = std.set.partition(Partition::Member);
    // Calibrate on the base model: the threshold sits at the 80th percentile of member scores.
    let mut rng = stream_rng(std.cfg.seed, 70);
    let mut ss: Vec<f64> = members
        .iter()
        .map(|m| memorization_score(&std.base, &m.x0, m.cond, &std.schedule, DEFAULT_SS_TIMESTEPS, &mut rng).unwrap())
        .collect();
    ss.sort_by(f64::total_cmp);
    let threshold = ss[(0.8 * ss.len() as f64) as usize];
    let mut tc = std.cfg.train_config(Stage::Finetune);
    tc.defense = Some(DefenseConfig { ss_threshold: threshold, num_t_samples: DEFAULT_SS_TIMESTEPS });
    let defended = finetune_with_defense(&std.base, &members, &std.schedule, &tc).unwrap();
    let skipped: usize = defended.history.iter().map(|e| e.skipped).sum();
    let skip_rate = skipped as f64 / (members.len() * tc.epochs) as f64;
    let undefended = auc(&attack(std, std.target(), &[Method::Inversion])).unwrap();
    let with_defense = auc(&attack(std, &defended.model, &[Method::Inversion])).unwrap();
    let drop = undefended - with_defense;
    verdict(
        skip_rate >= 0.10 && drop >= 0.02,
        format!(
            "threshold {threshold:.4} skipped {:.1}% of member presentations (want >= 10%); \
             AUC {undefended:.4} -> {with_defense:.4}, drop {drop:+.4} (want >= 0.02); criteria 1-4 involve no training",
            100.0 * skip_rate
        ),
    )
}

fn run_all_into(config: &Path, out: &Path, jobs: &str) {
    let status = Command::new(bin())
        .args(["run-all", "--jobs", jobs, "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .stdout(std::process::Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "run-all failed");
}

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("experiment.toml");
    std::fs::write(&config, ExperimentConfig::default().to_toml()).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_all_into(&config, &a, "1");
    run_all_into(&config, &b, "2");
    let (la, lb) = (Layout::new(&a), Layout::new(&b));
    let mut files = vec![(la.report(), lb.report())];
    files.extend(Method::ALL.iter().map(|&m| (la.scores(m), lb.scores(m))));
    let differing: Vec<String> = files
        .iter()
        .filter(|(x, y)| std::fs::read(x).unwrap() != std::fs::read(y).unwrap())
        .map(|(x, _)| x.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    verdict(
        differing.is_empty(),
        format!(
            "report.json and {} score CSVs compared across two runs (--jobs 1 and 2); differing: {differing:?}",
            Method::ALL.len()
        ),
    )
}

fn criterion_9() -> Verdict {
    let std = standard();
    let report = pipeline::run_sweep(&std.cfg, &std.set, &std.schedule, &std.base, std.target(), 1).unwrap();
    let aucs: Vec<f64> = report.cells.iter().map(|c| c.report.auc).collect();
    let max = aucs.iter().copied().fold(f64::MIN, f64::max);
    let min = aucs.iter().copied().fold(f64::MAX, f64::min);
    let cells: Vec<String> =
        report.cells.iter().map(|c| format!("({},{})={:.3}", c.i_step, c.gamma2, c.report.auc)).collect();
    verdict(
        report.cells.len() == 12 && max - min < 0.1,
        format!("{} cells, AUC spread {:.4} (want < 0.1): {}", report.cells.len(), max - min, cells.join(" ")),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("schedule table", criterion_1),
        ("gradient correctness", criterion_2),
        ("oracle round trip", criterion_3),
        ("metric oracles", criterion_4),
        ("end-to-end attack", criterion_5),
        ("fine-tuning drift", criterion_6),
        ("defense effect", criterion_7),
        ("determinism", criterion_8),
        ("hyperparameter robustness", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let label = format!("criterion {} ({name})", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| label.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            verdict(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        failed += usize::from(!v.pass);
        println!("{label}: {} [{:.1?}] {}", if v.pass { "PASS" } else { "FAIL" }, start.elapsed(), v.detail);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
