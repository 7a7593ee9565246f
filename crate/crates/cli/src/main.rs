use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use neighborwise::bench::{self, ArmConfig, ExperimentConfig};
use neighborwise::checkpoint;
use neighborwise::classifier::{train_baseline, Classifier};
use neighborwise::data::{export_pgm_grid, generate_dataset, load_dataset, save_dataset, Dataset};
use neighborwise::masked::train_masked;
use neighborwise::neighbor::{perceptual_loss, pretrain_ae, refine_ae, Autoencoder, Discriminator, PerceptualExtractor};
use neighborwise::seed;

#[derive(Parser)]
#[command(name = "neighborwise", version, about = "Noisy-label training with semantic-neighbor gradient masking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dataset directory from `gen-data`; generated from the config if absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Print a preset config.
    Config {
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
    },
    /// Render the dataset and write it to `--out`.
    GenData(Common),
    /// Pretrain the autoencoder.
    TrainAe(Common),
    /// Adversarially refine a pretrained autoencoder.
    RefineAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
        /// Classifier checkpoint providing the perceptual features.
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Train the classifier without masking.
    TrainCls(Common),
    /// Train the classifier with neighbor-divergence masking.
    TrainMasked {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ae: PathBuf,
        /// Arm label from the config.
        #[arg(long, default_value = bench::BATCH_ARM)]
        arm: String,
    },
    /// Evaluate a classifier checkpoint on the clean test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Run every arm over every seed and write the reports.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ignored; seeds come from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Repeat the masked arms over the batch-size sweep.
        #[arg(long)]
        sweep: bool,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let c = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::desk(),
    };
    c.validate()?;
    Ok(c)
}

fn dataset(c: &Common, config: &ExperimentConfig) -> Result<Dataset> {
    Ok(match &c.data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?,
        None => generate_dataset(&config.dataset_for(c.seed))?,
    })
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_ae(config: &ExperimentConfig, path: &Path, seed: u64) -> Result<Autoencoder<f64>> {
    let mut ae = Autoencoder::new(config.autoencoder.clone(), seed::derive(seed, "ae-init"))?;
    checkpoint::load_into(&mut ae.store, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ae)
}

fn load_cls(config: &ExperimentConfig, path: &Path, seed: u64) -> Result<Classifier<f64>> {
    let mut cls = Classifier::<f64>::new(config.classifier.clone(), seed::derive(seed, "classifier-init"))?;
    checkpoint::load_into(&mut cls.store, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(cls)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Config { preset } => {
            let c = match preset {
                Preset::Desk => ExperimentConfig::desk(),
                Preset::Full => ExperimentConfig::full_scale(),
            };
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Command::GenData(c) => {
            let config = load_config(c.config.as_deref())?;
            let mut ds = generate_dataset(&config.dataset_for(c.seed))?;
            save_dataset(&mut ds, &c.out)?;
            println!("{} train ({} noisy), {} test, {} sequences -> {}", ds.train.len(), ds.manifest.noisy_count, ds.test.len(), ds.sequences.len(), c.out.display());
        }
        Command::TrainAe(c) => {
            let config = load_config(c.config.as_deref())?;
            let ds = dataset(&c, &config)?;
            let dir = out_dir(&c)?;
            let mut ae = Autoencoder::<f64>::new(config.autoencoder.clone(), seed::derive(c.seed, "ae-init"))?;
            let log = pretrain_ae(&mut ae, &ds.train, &config.pretrain, c.seed)?;
            checkpoint::save(&ae.store, dir.join("ae-pretrained.ckpt"))?;
            write_json(&dir.join("ae-pretrain-log.json"), &log)?;
            println!("loss_ae per epoch: {:?}", log.epoch_loss);
        }
        Command::RefineAe { common: c, ae, classifier } => {
            let config = load_config(c.config.as_deref())?;
            let ds = dataset(&c, &config)?;
            let dir = out_dir(&c)?;
            let mut ae = load_ae(&config, &ae, c.seed)?;
            let cls = load_cls(&config, &classifier, c.seed)?;
            let ex = PerceptualExtractor::new(&cls, config.refine.tap_weights);
            let before = perceptual_loss(&ae, &ex, &ds.test, 64)?;
            let mut disc = Discriminator::new(config.autoencoder.side, config.refine.critic_widths, seed::derive(c.seed, "critic-init"))?;
            let log = refine_ae(&mut ae, &mut disc, Some(&ex), &ds.train, &config.refine, c.seed)?;
            let after = perceptual_loss(&ae, &ex, &ds.test, 64)?;
            checkpoint::save(&ae.store, dir.join("ae-refined.ckpt"))?;
            write_json(&dir.join("ae-refine-log.json"), &log)?;
            let sigma = ae.calibrate_sigma(&ds.train, config.sigma_factor, 64)?;
            export_pgm_grid(&bench::neighbor_grid(&ae, &ds, sigma, c.seed)?, dir.join("neighbors.pgm"))?;
            println!("held-out perceptual loss {before:.4} -> {after:.4}");
        }
        Command::TrainCls(c) => {
            let config = load_config(c.config.as_deref())?;
            let ds = dataset(&c, &config)?;
            let dir = out_dir(&c)?;
            let mut cls = Classifier::<f64>::new(config.classifier.clone(), seed::derive(c.seed, "classifier-init"))?;
            let log = train_baseline(&mut cls, &ds.train, &config.schedule, c.seed)?;
            checkpoint::save(&cls.store, dir.join("classifier.ckpt"))?;
            write_json(&dir.join("train-log.json"), &log)?;
            println!("test accuracy {:.4}", neighborwise::classifier::accuracy(&cls, &ds.test)?);
        }
        Command::TrainMasked { common: c, ae, arm } => {
            let config = load_config(c.config.as_deref())?;
            let Some(ArmConfig { masking: Some(masking), .. }) = config.arms.iter().find(|a| a.label == arm).cloned() else {
                bail!("no masked arm labelled {arm:?} in the config");
            };
            let arm_cfg = config.arms.iter().find(|a| a.label == arm).expect("found above");
            let ds = dataset(&c, &config)?;
            let dir = out_dir(&c)?;
            let ae = load_ae(&config, &ae, c.seed)?;
            let sigma = ae.calibrate_sigma(&ds.train, config.sigma_factor, 64)?;
            let mut cls = Classifier::<f64>::new(config.classifier.clone(), seed::derive(c.seed, "classifier-init"))?;
            let log = train_masked(&mut cls, &ds.train, &ae, &arm_cfg.schedule(&config.schedule), &masking, sigma, c.seed)?;
            checkpoint::save(&cls.store, dir.join("classifier.ckpt"))?;
            write_json(&dir.join("train-log.json"), &log)?;
            log.write_iterations_csv(dir.join("iterations.csv"))?;
            let audit = bench::mask_audit(&log, &ds.noisy_flags(), c.seed)?;
            write_json(&dir.join("mask-audit.json"), &audit)?;
            println!("test accuracy {:.4}, final lift {:?}", neighborwise::classifier::accuracy(&cls, &ds.test)?, audit.final_lift());
        }
        Command::Eval { common: c, classifier } => {
            let config = load_config(c.config.as_deref())?;
            let ds = dataset(&c, &config)?;
            let dir = out_dir(&c)?;
            let cls = load_cls(&config, &classifier, c.seed)?;
            let idx: Vec<usize> = (0..ds.test.len()).collect();
            let preds = cls.classify(&neighborwise::data::batch_images(&ds.test, &idx))?;
            let labels: Vec<usize> = ds.test.iter().map(|s| s.clean_label).collect();
            let cm = bench::confusion_matrix(&preds, &labels, ds.num_classes())?;
            let seq = bench::eval_sequences(&cls, &ds.sequences)?;
            write_json(
                &dir.join("eval.json"),
                &serde_json::json!({
                    "accuracy": cm.accuracy(),
                    "per_class_accuracy": cm.per_class_accuracy(),
                    "confusion": cm,
                    "sequences": seq,
                }),
            )?;
            println!("accuracy {:.4}, FC {}, CFC {}", cm.accuracy(), seq.fc, seq.cfc);
        }
        Command::Bench { config, seed: _, out, sweep } => {
            let mut config = load_config(config.as_deref())?;
            if sweep {
                config = config.batch_sweep();
            }
            let dir = out.or_else(|| config.output_dir.clone()).unwrap_or_else(|| PathBuf::from("bench-out"));
            let result = bench::run_experiment(&config, &dir);
            let reports = match result {
                Ok(r) => r,
                Err(e) => bail!("bench failed ({e}); partial reports in {}", dir.display()),
            };
            for (arm, acc) in bench::mean_accuracy(&reports) {
                println!("{arm:<32} mean accuracy {acc:.4}");
            }
        }
    }
    Ok(())
}
