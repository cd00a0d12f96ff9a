//! Experiment execution: seeded trials of ingest -> poison -> defend ->
//! train -> evaluate, plus the epsilon-vs-k accountant sweep.

use crate::attack::{
    apply_backdoor, craft_feature_collision, gen_patch, patch_test_set, BackdoorSpec,
    CollisionSpec,
};
use crate::datastore::{
    load_cifar_binary, load_idx, read_container, split, synth_blobs, LabeledDataset,
};
use crate::defense::{
    activation_cluster_filter, all_features, class_features, deep_knn_relabel, report_csv,
    spectral_filter, ReportRow,
};
use crate::error::{Error, Result};
use crate::harness::config::{
    AttackConfig, DatasetSource, DefenseConfig, ExperimentConfig,
};
use crate::harness::svg::{line_chart, Curve};
use crate::privacy::{epsilon_mixup, release_dataset, PrivacyCertificate};
use crate::seed;
use crate::trainer::{
    clean_accuracy, poison_success, predict, train_with_eval, Model, ModelSpec, TrainConfig,
};
use std::path::Path;

pub const SWEEP_CSV_HEADER: &str =
    "k,sigma,n,T,delta,epsilon,branch_A,branch_B,upper_bound,poison_success,clean_accuracy,trial,seed";

/// One row of an epsilon sweep or of a trade-off grid. Empirical columns
/// are None for pure accountant sweeps.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub sigma: f64,
    pub n: usize,
    pub t_count: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub branch_a: f64,
    pub branch_b: f64,
    pub upper_bound: f64,
    pub poison_success: Option<f64>,
    pub clean_accuracy: Option<f64>,
    pub trial: Option<usize>,
    pub seed: Option<u64>,
}

impl SweepRow {
    pub fn from_certificate(c: &PrivacyCertificate) -> Self {
        SweepRow {
            k: c.k,
            sigma: c.sigma,
            n: c.n,
            t_count: c.t_count,
            delta: c.delta_diameter,
            epsilon: c.epsilon,
            branch_a: c.branch_a,
            branch_b: c.branch_b,
            upper_bound: c.upper_bound,
            poison_success: None,
            clean_accuracy: None,
            trial: None,
            seed: None,
        }
    }

    fn csv_line(&self) -> String {
        let opt_f = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.k,
            self.sigma,
            self.n,
            self.t_count,
            self.delta,
            self.epsilon,
            self.branch_a,
            self.branch_b,
            self.upper_bound,
            opt_f(&self.poison_success),
            opt_f(&self.clean_accuracy),
            self.trial.map(|t| t.to_string()).unwrap_or_default(),
            self.seed.map(|s| s.to_string()).unwrap_or_default(),
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Parse a sweep CSV and verify each row's epsilon against the accountant;
/// a row whose epsilon was edited by hand is rejected.
pub fn verify_sweep_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("empty sweep CSV".into()))?;
    if header != SWEEP_CSV_HEADER {
        return Err(Error::Config(format!("unexpected sweep header `{header}`")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 13 {
            return Err(Error::Config(format!("row {i}: expected 13 columns")));
        }
        let field = |j: usize| -> Result<f64> {
            cols[j]
                .parse()
                .map_err(|_| Error::Config(format!("row {i} col {j}: bad number `{}`", cols[j])))
        };
        let opt = |j: usize| -> Result<Option<f64>> {
            if cols[j].is_empty() { Ok(None) } else { field(j).map(Some) }
        };
        let row = SweepRow {
            k: field(0)? as usize,
            sigma: field(1)?,
            n: field(2)? as usize,
            t_count: field(3)? as usize,
            delta: field(4)?,
            epsilon: field(5)?,
            branch_a: field(6)?,
            branch_b: field(7)?,
            upper_bound: field(8)?,
            poison_success: opt(9)?,
            clean_accuracy: opt(10)?,
            trial: opt(11)?.map(|v| v as usize),
            seed: opt(12)?.map(|v| v as u64),
        };
        let c = epsilon_mixup(row.n, row.t_count, row.k, row.sigma, row.delta)?;
        if (c.epsilon - row.epsilon).abs() > 1e-12 * c.epsilon.abs().max(1.0) {
            return Err(Error::Config(format!(
                "row {i}: epsilon {} inconsistent with accountant {}",
                row.epsilon, c.epsilon
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Accountant sweep over k for each sigma (Figure 4a layout).
pub fn sweep_epsilon(
    n: usize,
    t_count: usize,
    k_range: impl IntoIterator<Item = usize> + Clone,
    sigmas: &[f64],
    delta: f64,
) -> Result<Vec<SweepRow>> {
    if sigmas.is_empty() {
        return Err(Error::InvalidParameter("empty sigma list".into()));
    }
    let mut rows = Vec::new();
    for &sigma in sigmas {
        for k in k_range.clone() {
            rows.push(SweepRow::from_certificate(&epsilon_mixup(
                n, t_count, k, sigma, delta,
            )?));
        }
    }
    Ok(rows)
}

/// Render sweep rows as an SVG: one curve per sigma, epsilon on a log axis.
pub fn sweep_chart(rows: &[SweepRow]) -> String {
    let mut sigmas: Vec<f64> = rows.iter().map(|r| r.sigma).collect();
    sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sigmas.dedup();
    let curves: Vec<Curve> = sigmas
        .iter()
        .map(|&s| {
            let mut pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.sigma == s)
                .map(|r| (r.k as f64, r.epsilon))
                .collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            (format!("sigma={s}"), pts)
        })
        .collect();
    line_chart("epsilon vs mixture width", "k", "epsilon", &curves, true)
}

/// Per-trial outcome of an experiment run.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    pub clean_accuracy: f64,
    pub poison_success: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<TrialOutcome>,
    pub certificate: Option<PrivacyCertificate>,
    pub defense_reports: Vec<ReportRow>,
    pub config_hash: u64,
    pub master_seed: u64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ExperimentReport {
    /// Per-trial rows as CSV. Header comments record provenance and the
    /// desk-scale attack substitution so reports are self-describing.
    pub fn csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# desk-scale benchmark: gradient-matching attack replaced by the backdoor patch attack\n");
        out.push_str(&format!("# config_hash=0x{:016x}\n", self.config_hash));
        out.push_str(&format!("# master_seed={}\n", self.master_seed));
        if let Some(c) = &self.certificate {
            out.push_str(&format!(
                "# certificate: epsilon={} k={} sigma={} T={} delta={}\n",
                c.epsilon, c.k, c.sigma, c.t_count, c.delta_diameter
            ));
        }
        out.push_str("trial,seed,clean_accuracy,poison_success\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.trial,
                r.seed,
                r.clean_accuracy,
                r.poison_success.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        out
    }

    pub fn summary(&self) -> String {
        let accs: Vec<f64> = self.rows.iter().map(|r| r.clean_accuracy).collect();
        let (am, astd) = mean_std(&accs);
        let mut s = format!(
            "trials={} clean_accuracy={am:.4} +- {astd:.4}",
            self.rows.len()
        );
        let ps: Vec<f64> = self.rows.iter().filter_map(|r| r.poison_success).collect();
        if !ps.is_empty() {
            let (pm, pstd) = mean_std(&ps);
            s.push_str(&format!(" poison_success={pm:.4} +- {pstd:.4}"));
        }
        if let Some(c) = &self.certificate {
            s.push_str(&format!(" epsilon={:.6}", c.epsilon));
        }
        s
    }
}

fn load_base_dataset(source: &DatasetSource, trial_seed: u64) -> Result<LabeledDataset> {
    match source {
        DatasetSource::Synth {
            classes,
            per_class,
            height,
            width,
            channels,
            separation,
        } => synth_blobs(
            *classes,
            *per_class,
            (*height, *width, *channels),
            *separation,
            seed::derive(trial_seed, "data", 0),
        ),
        DatasetSource::Container { path } => read_container(Path::new(path)),
        DatasetSource::Idx { images, labels } => {
            load_idx(Path::new(images), Path::new(labels))
        }
        DatasetSource::Cifar { path } => load_cifar_binary(Path::new(path)),
    }
}

struct TrialResult {
    outcome: TrialOutcome,
    certificate: Option<PrivacyCertificate>,
    defense_report: Vec<ReportRow>,
}

fn backdoor_spec(attack: &AttackConfig, seed: u64) -> Option<BackdoorSpec> {
    match attack {
        AttackConfig::Backdoor {
            target_class,
            victim_class,
            fraction,
            patch_h,
            patch_w,
            bernoulli_p,
        } => Some(BackdoorSpec {
            patch_h: *patch_h,
            patch_w: *patch_w,
            bernoulli_p: *bernoulli_p,
            target_class: *target_class,
            victim_class: *victim_class,
            poison_fraction: *fraction,
            seed,
        }),
        _ => None,
    }
}

fn train_extractor(
    train: &LabeledDataset,
    spec: &ModelSpec,
    base_cfg: &TrainConfig,
    seed: u64,
) -> Result<Model> {
    let cfg = TrainConfig {
        seed,
        policy: crate::trainer::AugmentPolicy::None,
        dp_sgd: None,
        ..base_cfg.clone()
    };
    train_with_eval(train, None, spec, &cfg)
}

fn run_trial(cfg: &ExperimentConfig, trial: usize) -> Result<TrialResult> {
    let trial_seed = seed::derive(cfg.master_seed, "trial", trial as u64);
    let base = load_base_dataset(&cfg.dataset.source, trial_seed)?;
    let (mut train, test) = split(
        &base,
        cfg.dataset.train_fraction,
        seed::derive(trial_seed, "split", 0),
    )?;
    let shape = train
        .shape()
        .ok_or_else(|| Error::InvalidParameter("empty training split".into()))?;
    let model_spec = ModelSpec {
        arch: cfg.arch.clone(),
        input: shape,
        classes: train.class_count,
    };

    // -- attack --------------------------------------------------------
    let mut victims: Option<(LabeledDataset, usize)> = None;
    let mut collision_eval: Option<(crate::datastore::Example, usize)> = None;
    match &cfg.attack {
        AttackConfig::None => {}
        AttackConfig::Backdoor { .. } => {
            let spec = backdoor_spec(&cfg.attack, seed::derive(trial_seed, "attack", 0)).unwrap();
            let patch = gen_patch(&spec, &train)?;
            train = apply_backdoor(&train, &spec, &patch)?;
            let patched = patch_test_set(&test, &spec, &patch)?;
            victims = Some((patched, spec.target_class));
        }
        AttackConfig::Collision {
            target_class,
            victim_class,
            bases,
            steps,
            step_size,
            beta,
            budget,
        } => {
            let extractor = train_extractor(
                &train,
                &model_spec,
                &cfg.trainer,
                seed::derive(trial_seed, "pretrain", 0),
            )?;
            let base_pool = train.class_indices(*target_class);
            if base_pool.len() < *bases {
                return Err(Error::InvalidParameter(format!(
                    "class {target_class} has only {} candidates for {bases} bases",
                    base_pool.len()
                )));
            }
            let victim_pool = test.class_indices(*victim_class);
            let &target_idx = victim_pool
                .first()
                .ok_or(Error::EmptyClass(*victim_class))?;
            let spec = CollisionSpec {
                base_indices: base_pool[..*bases].to_vec(),
                target_index: target_idx,
                steps: *steps,
                step_size: *step_size,
                beta: *beta,
                linf_budget: *budget,
            };
            train = craft_feature_collision(&train, &test, &extractor, &spec)?;
            collision_eval = Some((test.examples[target_idx].clone(), *target_class));
        }
    }

    // -- defense -------------------------------------------------------
    let mut train_cfg = TrainConfig {
        seed: seed::derive(trial_seed, "train", 0),
        ..cfg.trainer.clone()
    };
    let mut certificate = None;
    let mut defense_report = Vec::new();
    match &cfg.defense {
        DefenseConfig::None => {}
        DefenseConfig::Policy(policy) => train_cfg.policy = policy.clone(),
        DefenseConfig::DpSgd(dp) => train_cfg.dp_sgd = Some(*dp),
        DefenseConfig::Spectral { fraction } => {
            let extractor = train_extractor(
                &train,
                &model_spec,
                &cfg.trainer,
                seed::derive(trial_seed, "extractor", 0),
            )?;
            let feats = class_features(&extractor, &train)?;
            let (filtered, report) = spectral_filter(&train, &feats, *fraction)?;
            train = filtered;
            defense_report = report;
        }
        DefenseConfig::ActivationClustering => {
            let extractor = train_extractor(
                &train,
                &model_spec,
                &cfg.trainer,
                seed::derive(trial_seed, "extractor", 0),
            )?;
            let feats = class_features(&extractor, &train)?;
            let (filtered, report) = activation_cluster_filter(&train, &feats)?;
            train = filtered;
            defense_report = report;
        }
        DefenseConfig::DeepKnn { k } => {
            let extractor = train_extractor(
                &train,
                &model_spec,
                &cfg.trainer,
                seed::derive(trial_seed, "extractor", 0),
            )?;
            let feats = all_features(&extractor, &train)?;
            let (relabeled, report) = deep_knn_relabel(&train, &feats, *k)?;
            train = relabeled;
            defense_report = report;
        }
        DefenseConfig::Release { k, sigma, t_count, delta } => {
            let released = release_dataset(
                &train,
                *k,
                *sigma,
                *t_count,
                *delta,
                seed::derive(trial_seed, "release", 0),
            )?;
            certificate = Some(released.certificate);
            train = released.data;
        }
    }

    // -- train + evaluate ------------------------------------------------
    let model = train_with_eval(&train, None, &model_spec, &train_cfg)?;
    let acc = clean_accuracy(&model, &test)?;
    let ps = match (&victims, &collision_eval) {
        (Some((patched, target)), _) => Some(poison_success(&model, patched, *target)?),
        (_, Some((target_example, base_class))) => {
            // Poison Frogs succeeds when the victim target instance is
            // pulled into the bases' class.
            let (pred, _) = predict(&model, &target_example.image)?;
            Some(if pred == *base_class { 1.0 } else { 0.0 })
        }
        _ => None,
    };
    Ok(TrialResult {
        outcome: TrialOutcome {
            trial,
            seed: trial_seed,
            clean_accuracy: acc,
            poison_success: ps,
        },
        certificate,
        defense_report,
    })
}

/// Run all trials of an experiment. `raw_config` is the config file text,
/// hashed into the report for traceability.
pub fn run_experiment(cfg: &ExperimentConfig, raw_config: &str) -> Result<ExperimentReport> {
    let mut rows = Vec::with_capacity(cfg.trials);
    let mut certificate = None;
    let mut defense_reports = Vec::new();
    for t in 0..cfg.trials {
        let result = run_trial(cfg, t).map_err(|e| match e {
            Error::NonFiniteLoss { epoch, batch } => {
                eprintln!("training diverged in trial {t} (epoch {epoch}, batch {batch})");
                Error::NonFiniteLoss { epoch, batch }
            }
            other => other,
        })?;
        if t == 0 {
            certificate = result.certificate;
            defense_reports = result.defense_report;
        }
        rows.push(result.outcome);
    }
    Ok(ExperimentReport {
        rows,
        certificate,
        defense_reports,
        config_hash: super::config::config_hash(raw_config),
        master_seed: cfg.master_seed,
    })
}

/// CSV view of the first trial's defense removal/relabel decisions.
pub fn defense_report_csv(report: &ExperimentReport) -> String {
    report_csv(&report.defense_reports)
}
