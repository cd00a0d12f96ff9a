//! CLI entry point and experiment harness.
//!
//! Exit codes: 0 success, 2 invalid parameters or configuration,
//! 3 training divergence (non-finite loss).

pub mod config;
pub mod experiment;
pub mod svg;

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::attack::{apply_backdoor, gen_patch, patch_test_set, BackdoorSpec};
use crate::datastore::{
    load_cifar_binary, load_idx, read_container, synth_blobs, write_container,
};
use crate::error::{Error, Result};
use crate::privacy::{
    attack_cost_bound, epsilon_mixup, release_dataset, write_release, AttackBoundInput,
    CostSign, CERTIFICATE_CSV_HEADER,
};
use crate::trainer::{
    clean_accuracy, load_checkpoint, poison_success, save_checkpoint, train_with_eval,
    Architecture, AugmentPolicy, DpSgdConfig, ModelSpec, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dpmix",
    about = "Privacy-preserving dataset release with mixup + Laplacian noise, plus a poisoning attack/defense benchmark",
    version
)]
struct Cli {
    /// Master seed for all randomized operations.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for per-example parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Smallconv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignArg {
    Nonnegative,
    Nonpositive,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load or generate a dataset and write it as a container file.
    Ingest {
        /// synth | idx | cifar
        #[arg(long)]
        source: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 8)]
        height: usize,
        #[arg(long, default_value_t = 8)]
        width: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 0.8)]
        separation: f64,
        /// IDX image file (source = idx).
        #[arg(long)]
        images: Option<PathBuf>,
        /// IDX label file (source = idx).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// CIFAR binary batch (source = cifar).
        #[arg(long)]
        path: Option<PathBuf>,
        #[arg(long, default_value = "data.dpmx")]
        out: PathBuf,
    },
    /// Apply the release mechanism to a container and write the released
    /// dataset with its privacy certificate.
    Release {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        sigma: f64,
        /// Number of released samples.
        #[arg(long = "T")]
        t_count: usize,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
        #[arg(long, default_value = "release.dpmrl")]
        out: PathBuf,
    },
    /// Print the privacy certificate for given mechanism parameters.
    Accountant {
        #[arg(long)]
        n: usize,
        #[arg(long = "T")]
        t_count: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Sweep epsilon over k for a list of noise scales; emits CSV + SVG.
    SweepEpsilon {
        #[arg(long)]
        n: usize,
        #[arg(long = "T")]
        t_count: usize,
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        /// Comma-separated noise scales.
        #[arg(long)]
        sigmas: String,
        #[arg(long, default_value_t = 1.0)]
        delta: f64,
    },
    /// Plant a backdoor patch into a train container and emit the poisoned
    /// train set plus the patched victim test set.
    Poison {
        #[arg(long)]
        input: PathBuf,
        /// Test container from which victim images are drawn.
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        target: usize,
        #[arg(long)]
        victim: usize,
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
        #[arg(long, default_value_t = 4)]
        patch_h: usize,
        #[arg(long, default_value_t = 4)]
        patch_w: usize,
        #[arg(long, default_value_t = 0.5)]
        bernoulli_p: f64,
        #[arg(long, default_value = "poisoned.dpmx")]
        out: PathBuf,
        #[arg(long, default_value = "victims.dpmx")]
        victims_out: PathBuf,
    },
    /// Train a model on a container and save the checkpoint + log.
    Train {
        #[arg(long)]
        input: PathBuf,
        /// Optional held-out container evaluated every epoch.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ArchArg::Mlp)]
        arch: ArchArg,
        /// Comma-separated hidden sizes (mlp only).
        #[arg(long, default_value = "64")]
        hidden: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 128)]
        batch: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        #[arg(long, default_value_t = 5e-4)]
        weight_decay: f64,
        /// Staged drops, e.g. "40:0.1,60:0.1".
        #[arg(long, default_value = "")]
        lr_drops: String,
        /// none | mixup:K | cutmix:P | cutout:HxW | maxup:C:HxW:WARM
        #[arg(long, default_value = "none")]
        policy: String,
        /// Laplacian input noise scale (0 disables).
        #[arg(long, default_value_t = 0.0)]
        input_noise: f64,
        /// DP-SGD clip norm (enables DP-SGD together with --gauss-noise).
        #[arg(long)]
        clip_norm: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        gauss_noise: f64,
        #[arg(long, default_value = "model.dpmm")]
        out: PathBuf,
        #[arg(long, default_value = "train_log.csv")]
        log: PathBuf,
    },
    /// Report clean accuracy (and poison success, given patched victims).
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Container of patched victim images.
        #[arg(long)]
        victims: Option<PathBuf>,
        /// Backdoor target class (required with --victims).
        #[arg(long)]
        target: Option<usize>,
    },
    /// Run a full experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate the attack-cost lower bound for a DP learner.
    Bound {
        #[arg(long)]
        j_clean: f64,
        /// Cost bound |C| <= B.
        #[arg(long)]
        b: f64,
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        /// Number of modified elements.
        #[arg(long)]
        l: usize,
        #[arg(long, value_enum, default_value_t = SignArg::Nonnegative)]
        sign: SignArg,
    },
}

fn parse_sigma_list(spec: &str) -> Result<Vec<f64>> {
    // accepts plain numbers and fractions like "2/255"
    spec.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let p = p.trim();
            if let Some((num, den)) = p.split_once('/') {
                let n: f64 = num.trim().parse().map_err(|_| bad_sigma(p))?;
                let d: f64 = den.trim().parse().map_err(|_| bad_sigma(p))?;
                if d == 0.0 {
                    return Err(bad_sigma(p));
                }
                Ok(n / d)
            } else {
                p.parse().map_err(|_| bad_sigma(p))
            }
        })
        .collect()
}

fn bad_sigma(p: &str) -> Error {
    Error::InvalidParameter(format!("cannot parse sigma `{p}`"))
}

fn parse_policy(spec: &str) -> Result<AugmentPolicy> {
    let bad = || Error::InvalidParameter(format!("cannot parse policy `{spec}`"));
    let mut parts = spec.split(':');
    let head = parts.next().unwrap_or("");
    let rest: Vec<&str> = parts.collect();
    let dims = |s: &str| -> Result<(usize, usize)> {
        let (h, w) = s.split_once('x').ok_or_else(bad)?;
        Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
    };
    match (head, rest.as_slice()) {
        ("none", []) => Ok(AugmentPolicy::None),
        ("mixup", [k]) => Ok(AugmentPolicy::Mixup {
            k: k.parse().map_err(|_| bad())?,
        }),
        ("cutmix", [p]) => Ok(AugmentPolicy::CutMix {
            prob: p.parse().map_err(|_| bad())?,
        }),
        ("cutout", [d]) => {
            let (height, width) = dims(d)?;
            Ok(AugmentPolicy::Cutout { height, width })
        }
        ("maxup", [c, d, warm]) => Ok(AugmentPolicy::MaxUp {
            candidates: c.parse().map_err(|_| bad())?,
            cutout: dims(d)?,
            warm_epochs: warm.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn out_path(out_dir: &Path, file: &Path) -> PathBuf {
    if file.is_absolute() {
        file.to_path_buf()
    } else {
        out_dir.join(file)
    }
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Timestamps live only here so the primary outputs stay byte-deterministic.
fn write_sidecar(path: &Path, extra: &str) -> Result<()> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_out(path, &format!("created_unix={now}\n{extra}"))
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a pre-initialized global pool (e.g. in tests) is fine to keep
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| Error::io(cli.out_dir.display().to_string(), e))?;
    let out_dir = cli.out_dir.clone();
    match cli.cmd {
        Cmd::Ingest {
            source,
            classes,
            per_class,
            height,
            width,
            channels,
            separation,
            images,
            labels,
            path,
            out,
        } => {
            let need = |o: Option<PathBuf>, flag: &str| {
                o.ok_or_else(|| Error::InvalidParameter(format!("--{flag} required for this source")))
            };
            let ds = match source.as_str() {
                "synth" => synth_blobs(
                    classes,
                    per_class,
                    (height, width, channels),
                    separation,
                    cli.seed,
                )?,
                "idx" => load_idx(&need(images, "images")?, &need(labels, "labels")?)?,
                "cifar" => load_cifar_binary(&need(path, "path")?)?,
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown source `{other}` (expected synth, idx, or cifar)"
                    )))
                }
            };
            let dest = out_path(&out_dir, &out);
            write_container(&ds, &dest)?;
            println!(
                "wrote {} examples ({} classes) to {}",
                ds.len(),
                ds.class_count,
                dest.display()
            );
        }
        Cmd::Release { input, k, sigma, t_count, delta, out } => {
            let ds = read_container(&input)?;
            let released = release_dataset(&ds, k, sigma, t_count, delta, cli.seed)?;
            let dest = out_path(&out_dir, &out);
            write_release(&released, &dest)?;
            let c = &released.certificate;
            let cert_path = out_dir.join("certificate.csv");
            write_out(&cert_path, &format!("{CERTIFICATE_CSV_HEADER}\n{}\n", c.csv_row()))?;
            println!("released T={} samples to {}", c.t_count, dest.display());
            println!(
                "epsilon={} (A={}, B={}, upper bound={})",
                c.epsilon, c.branch_a, c.branch_b, c.upper_bound
            );
        }
        Cmd::Accountant { n, t_count, k, sigma, delta } => {
            let c = epsilon_mixup(n, t_count, k, sigma, delta)?;
            println!("n={} T={} k={} sigma={} delta={}", c.n, c.t_count, c.k, c.sigma, c.delta_diameter);
            println!("branch_A={}", c.branch_a);
            println!("branch_B={}", c.branch_b);
            println!("epsilon={}", c.epsilon);
            println!("upper_bound={}", c.upper_bound);
            println!("{CERTIFICATE_CSV_HEADER}");
            println!("{}", c.csv_row());
        }
        Cmd::SweepEpsilon { n, t_count, k_min, k_max, sigmas, delta } => {
            if k_min == 0 || k_max < k_min {
                return Err(Error::InvalidParameter(format!(
                    "need 1 <= k_min <= k_max, got {k_min}..{k_max}"
                )));
            }
            let sigma_list = parse_sigma_list(&sigmas)?;
            let rows = experiment::sweep_epsilon(n, t_count, k_min..=k_max, &sigma_list, delta)?;
            let csv_path = out_dir.join("sweep.csv");
            let svg_path = out_dir.join("sweep.svg");
            write_out(&csv_path, &experiment::sweep_csv(&rows))?;
            write_out(&svg_path, &experiment::sweep_chart(&rows))?;
            println!("wrote {} rows to {} and {}", rows.len(), csv_path.display(), svg_path.display());
        }
        Cmd::Poison {
            input,
            test,
            target,
            victim,
            fraction,
            patch_h,
            patch_w,
            bernoulli_p,
            out,
            victims_out,
        } => {
            let train = read_container(&input)?;
            let test_ds = read_container(&test)?;
            let spec = BackdoorSpec {
                patch_h,
                patch_w,
                bernoulli_p,
                target_class: target,
                victim_class: victim,
                poison_fraction: fraction,
                seed: cli.seed,
            };
            let patch = gen_patch(&spec, &train)?;
            let poisoned = apply_backdoor(&train, &spec, &patch)?;
            let victims = patch_test_set(&test_ds, &spec, &patch)?;
            let dest = out_path(&out_dir, &out);
            let vdest = out_path(&out_dir, &victims_out);
            write_container(&poisoned, &dest)?;
            write_container(&victims, &vdest)?;
            let count = poisoned.examples.iter().filter(|e| e.poisoned).count();
            println!("poisoned {count} training images -> {}", dest.display());
            println!("{} patched victims -> {}", victims.len(), vdest.display());
        }
        Cmd::Train {
            input,
            test,
            arch,
            hidden,
            epochs,
            batch,
            lr,
            momentum,
            weight_decay,
            lr_drops,
            policy,
            input_noise,
            clip_norm,
            gauss_noise,
            out,
            log,
        } => {
            let ds = read_container(&input)?;
            let test_ds = test.map(|p| read_container(&p)).transpose()?;
            let arch = match arch {
                ArchArg::Smallconv => Architecture::SmallConv,
                ArchArg::Mlp => {
                    let sizes = hidden
                        .split(',')
                        .filter(|p| !p.trim().is_empty())
                        .map(|p| {
                            p.trim().parse().map_err(|_| {
                                Error::InvalidParameter(format!("bad hidden size `{p}`"))
                            })
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    Architecture::Mlp { hidden: sizes }
                }
            };
            let shape = ds
                .shape()
                .ok_or_else(|| Error::InvalidParameter("empty dataset".into()))?;
            let spec = ModelSpec { arch, input: shape, classes: ds.class_count };
            let drops = if lr_drops.is_empty() {
                Vec::new()
            } else {
                lr_drops
                    .split(',')
                    .map(|p| {
                        let (e, f) = p.split_once(':').ok_or_else(|| {
                            Error::InvalidParameter(format!("bad lr drop `{p}`"))
                        })?;
                        Ok((
                            e.parse().map_err(|_| Error::InvalidParameter(format!("bad lr drop `{p}`")))?,
                            f.parse().map_err(|_| Error::InvalidParameter(format!("bad lr drop `{p}`")))?,
                        ))
                    })
                    .collect::<Result<Vec<(usize, f64)>>>()?
            };
            let cfg = TrainConfig {
                epochs,
                batch,
                lr,
                momentum,
                weight_decay,
                lr_drops: drops,
                policy: parse_policy(&policy)?,
                input_noise_sigma: input_noise,
                dp_sgd: clip_norm.map(|c| DpSgdConfig { clip_norm: c, gauss_noise }),
                seed: cli.seed,
            };
            let model = train_with_eval(&ds, test_ds.as_ref(), &spec, &cfg)?;
            let dest = out_path(&out_dir, &out);
            save_checkpoint(&model, &dest)?;
            let mut log_text = String::from("epoch,loss,train_acc,test_acc\n");
            for s in &model.log {
                log_text.push_str(&format!(
                    "{},{},{},{}\n",
                    s.epoch,
                    s.loss,
                    s.train_accuracy,
                    s.test_accuracy.map(|a| a.to_string()).unwrap_or_default()
                ));
            }
            let log_dest = out_path(&out_dir, &log);
            write_out(&log_dest, &log_text)?;
            let last = model.log.last().unwrap();
            println!(
                "trained {} epochs; final loss={} train_acc={}",
                model.log.len(),
                last.loss,
                last.train_accuracy
            );
            println!("checkpoint -> {}", dest.display());
        }
        Cmd::Evaluate { model, test, victims, target } => {
            let m = load_checkpoint(&model)?;
            let test_ds = read_container(&test)?;
            println!("clean_accuracy={}", clean_accuracy(&m, &test_ds)?);
            if let Some(vpath) = victims {
                let t = target.ok_or_else(|| {
                    Error::InvalidParameter("--target required with --victims".into())
                })?;
                let v = read_container(&vpath)?;
                println!("poison_success={}", poison_success(&m, &v, t)?);
            }
        }
        Cmd::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| Error::io(config.display().to_string(), e))?;
            let cfg = config::parse_config(&text)?;
            let report = experiment::run_experiment(&cfg, &text)?;
            let report_path = out_dir.join("report.csv");
            write_out(&report_path, &report.csv())?;
            if !report.defense_reports.is_empty() {
                write_out(
                    &out_dir.join("defense_report.csv"),
                    &experiment::defense_report_csv(&report),
                )?;
            }
            if let Some(c) = &report.certificate {
                write_out(
                    &out_dir.join("certificate.csv"),
                    &format!("{CERTIFICATE_CSV_HEADER}\n{}\n", c.csv_row()),
                )?;
            }
            write_sidecar(
                &out_dir.join("report.meta"),
                &format!("config_hash=0x{:016x}\n", report.config_hash),
            )?;
            println!("{}", report.summary());
            println!("report -> {}", report_path.display());
        }
        Cmd::Bound { j_clean, b, epsilon, delta, l, sign } => {
            let bound = attack_cost_bound(&AttackBoundInput {
                j_clean,
                b_cost: b,
                epsilon,
                dp_delta: delta,
                modified: l,
                sign: match sign {
                    SignArg::Nonnegative => CostSign::NonNegative,
                    SignArg::Nonpositive => CostSign::NonPositive,
                },
            })?;
            println!("attack_cost_bound={bound}");
        }
    }
    Ok(())
}

/// Parse arguments from the process environment and run; returns the exit
/// code. Usage errors exit with code 2 via clap.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("dpmix: {e}");
            match e {
                Error::NonFiniteLoss { .. } => 3,
                _ => 2,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::read_release;

    #[test]
    fn policy_strings_parse() {
        assert_eq!(parse_policy("none").unwrap(), AugmentPolicy::None);
        assert_eq!(parse_policy("mixup:4").unwrap(), AugmentPolicy::Mixup { k: 4 });
        assert_eq!(
            parse_policy("cutout:4x6").unwrap(),
            AugmentPolicy::Cutout { height: 4, width: 6 }
        );
        assert_eq!(
            parse_policy("maxup:4:4x4:1").unwrap(),
            AugmentPolicy::MaxUp { candidates: 4, cutout: (4, 4), warm_epochs: 1 }
        );
        assert!(parse_policy("mixup").is_err());
        assert!(parse_policy("bogus:1").is_err());
    }

    #[test]
    fn sigma_lists_accept_fractions() {
        let v = parse_sigma_list("2/255, 0.5,1").unwrap();
        assert_eq!(v, vec![2.0 / 255.0, 0.5, 1.0]);
        assert!(parse_sigma_list("1/0").is_err());
        assert!(parse_sigma_list("abc").is_err());
    }

    #[test]
    fn release_files_round_trip_via_cli_helpers() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::datastore::synth_blobs(2, 5, (2, 2, 1), 0.5, 1).unwrap();
        let released = release_dataset(&ds, 2, 0.1, 7, 1.0, 3).unwrap();
        let p = dir.path().join("r.dpmrl");
        write_release(&released, &p).unwrap();
        let back = read_release(&p).unwrap();
        assert_eq!(back.certificate, released.certificate);
        assert_eq!(back.data.len(), 7);
    }
}
