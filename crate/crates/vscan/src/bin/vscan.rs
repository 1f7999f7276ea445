//! Command-line front end: every subcommand reads one JSON config (see
//! the README for the schema), honors `--seed` / `--out-dir` /
//! `--threads` overrides, and writes its resolved configuration to
//! `config.lock` in the output directory.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vscan::harness::{
    self, comparison_report, resolve_threads, run_comparison, run_ratio_sweep, train_classifier,
    write_metrics_csv, write_pvalues_csv, write_sweep_csv, MetricRow, RunConfig,
    TrainedClassifier, TrainedModels, Variant,
};
use vscan::metrics::{mae, psnr, ssim};
use vscan::mint::{MintModel, StreamModel};
use vscan::phantom::generate_cohort;
use vscan::synthgen::{extract_patch_pairs, synthesize_pet, train_pix2pix, GeneratorNet};
use vscan::volume::{load_cohort, write_cohort, write_volume, CaseRecord, ManifestRow};

#[derive(Parser)]
#[command(name = "vscan", version, about = "CT-to-PET synthesis and tumor-subtype classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Phantom cohort utilities.
    Phantom {
        #[command(subcommand)]
        action: PhantomCmd,
    },
    /// Train the CT-to-PET patch translator.
    TrainGan(RunArgs),
    /// Synthesize PET volumes for a cohort with a trained generator.
    Synthesize(RunArgs),
    /// Train one classifier variant across all folds.
    TrainClf(RunArgs),
    /// Evaluate saved classifier checkpoints on the fold test splits.
    Evaluate(RunArgs),
    /// Train and compare multiple entries on identical folds.
    Compare(RunArgs),
    /// Sweep the synthetic share of the training PET stream.
    Sweep(RunArgs),
    /// Re-render the report from stored CSVs.
    Report(RunArgs),
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate a phantom cohort and write it as VVOL files + manifest.
    Gen(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config).map_err(|e| anyhow!(e))?;
    cfg.apply_overrides(
        args.seed,
        args.out_dir
            .as_ref()
            .map(|p| p.display().to_string()),
        args.threads,
    );
    resolve_threads(cfg.threads);
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating out dir {}", cfg.out_dir))?;
    std::fs::write(Path::new(&cfg.out_dir).join("config.lock"), cfg.lock_string())?;
    Ok(cfg)
}

fn out_path(cfg: &RunConfig, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn cohort_manifest_path(cfg: &RunConfig) -> PathBuf {
    match &cfg.cohort_manifest {
        Some(p) => PathBuf::from(p),
        None => out_path(cfg, "cohort").join("manifest.csv"),
    }
}

fn load_cohort_for(cfg: &RunConfig) -> Result<Vec<CaseRecord>> {
    let manifest = cohort_manifest_path(cfg);
    let cohort = load_cohort(&manifest)
        .with_context(|| format!("loading cohort from {}", manifest.display()))?;
    if cohort.is_empty() {
        bail!("cohort at {} is empty", manifest.display());
    }
    Ok(cohort)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom {
            action: PhantomCmd::Gen(args),
        } => phantom_gen(&load_config(&args)?),
        Command::TrainGan(args) => train_gan(&load_config(&args)?),
        Command::Synthesize(args) => synthesize(&load_config(&args)?),
        Command::TrainClf(args) => train_clf(&load_config(&args)?),
        Command::Evaluate(args) => evaluate_cmd(&load_config(&args)?),
        Command::Compare(args) => compare(&load_config(&args)?),
        Command::Sweep(args) => sweep(&load_config(&args)?),
        Command::Report(args) => report(&load_config(&args)?),
    }
}

fn phantom_gen(cfg: &RunConfig) -> Result<()> {
    let mut phantom_cfg = cfg.phantom.clone();
    phantom_cfg.seed = harness::derive_seed(cfg.seed, &[0x9e0]);
    let (cases, truths) = generate_cohort(&phantom_cfg)?;
    let dir = out_path(cfg, "cohort");
    let manifest = write_cohort(&cases, &dir)?;
    std::fs::write(
        dir.join("truths.json"),
        serde_json::to_string_pretty(&truths)?,
    )?;
    let scc = cases
        .iter()
        .filter(|c| c.label == vscan::volume::ClassLabel::Scc)
        .count();
    println!(
        "wrote {} cases ({} ADC / {} SCC) at {:?} to {}",
        cases.len(),
        cases.len() - scc,
        scc,
        phantom_cfg.dims,
        manifest.display()
    );
    Ok(())
}

fn train_gan(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let pairs = extract_patch_pairs(&cohort, 16, 0)?;
    let mut gan_cfg = cfg.gan.clone();
    gan_cfg.seed = harness::derive_seed(cfg.seed, &[0x6a1]);
    println!(
        "training translator on {} patch pairs for {} epochs",
        pairs.len(),
        gan_cfg.epochs
    );
    let (gen, _disc, history) = train_pix2pix(&pairs, &gan_cfg)?;
    let ck = out_path(cfg, "generator.vxf");
    gen.save(&ck)?;
    let mut losses = String::from("epoch,g_adversarial,g_l1,d_loss\n");
    for (e, h) in history.iter().enumerate() {
        losses.push_str(&format!(
            "{e},{},{},{}\n",
            h.g_adversarial, h.g_l1, h.d_loss
        ));
    }
    std::fs::write(out_path(cfg, "gan_losses.csv"), losses)?;
    if let Some(last) = history.last() {
        println!(
            "done: g_adv {:.4}, g_l1 {:.4}, d {:.4}; checkpoint at {}",
            last.g_adversarial,
            last.g_l1,
            last.d_loss,
            ck.display()
        );
    }
    Ok(())
}

fn synthesize(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let ck_path = cfg
        .generator_checkpoint
        .as_ref()
        .map(PathBuf::from)
        .unwrap_or_else(|| out_path(cfg, "generator.vxf"));
    let gen = GeneratorNet::load(&ck_path)
        .with_context(|| format!("loading generator from {}", ck_path.display()))?;
    let dir = out_path(cfg, "cohort_synth");
    std::fs::create_dir_all(&dir)?;
    let mut rows = Vec::new();
    let mut quality = String::from("case_id,mae,psnr,ssim\n");
    for case in &cohort {
        let synth = synthesize_pet(&case.ct, &gen)?;
        let ct_name = format!("{}_ct.vvol", case.case_id);
        let mask_name = format!("{}_mask.vvol", case.case_id);
        let synth_name = format!("{}_synthpet.vvol", case.case_id);
        write_volume(&case.ct, &dir.join(&ct_name))?;
        write_volume(&case.mask, &dir.join(&mask_name))?;
        write_volume(&synth, &dir.join(&synth_name))?;
        let pet_name = match &case.pet {
            Some(pet) => {
                let name = format!("{}_pet.vvol", case.case_id);
                write_volume(pet, &dir.join(&name))?;
                quality.push_str(&format!(
                    "{},{},{},{}\n",
                    case.case_id,
                    mae(pet, &synth)?,
                    psnr(pet, &synth, 1.0)?,
                    ssim(pet, &synth, 7, 1.0)?
                ));
                Some(name)
            }
            None => None,
        };
        rows.push(ManifestRow {
            case_id: case.case_id.clone(),
            ct_path: ct_name,
            pet_path: pet_name,
            mask_path: mask_name,
            label: case.label,
            synth_pet_path: Some(synth_name),
            source: case.source,
        });
    }
    let manifest = dir.join("manifest.csv");
    vscan::volume::write_manifest(&rows, &manifest)?;
    std::fs::write(out_path(cfg, "synth_quality.csv"), quality)?;
    println!(
        "synthesized {} volumes; manifest at {}",
        rows.len(),
        manifest.display()
    );
    Ok(())
}

fn save_trained(trained: &TrainedClassifier, cfg: &RunConfig, fold: usize) -> Result<()> {
    let tag = trained.variant.as_str();
    match &trained.models {
        TrainedModels::Mint(m) => {
            m.save(&out_path(cfg, &format!("clf_{tag}_fold{fold}.vxf")))?
        }
        TrainedModels::Stream(m) => {
            m.save(&out_path(cfg, &format!("clf_{tag}_fold{fold}.vxf")))?
        }
        TrainedModels::LatePair { ct, pet } => {
            ct.save(&out_path(cfg, &format!("clf_{tag}_ct_fold{fold}.vxf")))?;
            pet.save(&out_path(cfg, &format!("clf_{tag}_pet_fold{fold}.vxf")))?;
        }
    }
    Ok(())
}

fn load_trained(cfg: &RunConfig, variant: Variant, fold: usize) -> Result<TrainedClassifier> {
    let tag = variant.as_str();
    let models = match variant {
        Variant::Mint => TrainedModels::Mint(MintModel::load(&out_path(
            cfg,
            &format!("clf_{tag}_fold{fold}.vxf"),
        ))?),
        Variant::Late => TrainedModels::LatePair {
            ct: StreamModel::load(&out_path(cfg, &format!("clf_{tag}_ct_fold{fold}.vxf")))?,
            pet: StreamModel::load(&out_path(cfg, &format!("clf_{tag}_pet_fold{fold}.vxf")))?,
        },
        _ => TrainedModels::Stream(StreamModel::load(&out_path(
            cfg,
            &format!("clf_{tag}_fold{fold}.vxf"),
        ))?),
    };
    Ok(TrainedClassifier {
        variant,
        models,
        log: Vec::new(),
        best_epoch: 0,
    })
}

fn train_clf(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let variant = cfg.parse_variant().map_err(|e| anyhow!(e))?;
    let policy = cfg.parse_policy(&cfg.train_policy).map_err(|e| anyhow!(e))?;
    let test_policy = cfg.parse_policy(&cfg.test_policy).map_err(|e| anyhow!(e))?;
    let settings = cfg.train_settings();
    let folds = harness::make_folds(&cohort, cfg.k_folds, cfg.seed)?;
    let mut rows: Vec<MetricRow> = Vec::new();
    let mut log_csv = String::from("fold,epoch,lr,train_loss,val_gmean,selected\n");
    for fold in &folds {
        let train_seed = harness::derive_seed(
            cfg.seed,
            &[variant_tag(variant), fold.fold_index as u64],
        );
        let trained = train_classifier(&cohort, variant, fold, policy, &settings, train_seed)?;
        for l in &trained.log {
            log_csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                fold.fold_index,
                l.epoch,
                l.lr,
                l.train_loss,
                l.val_gmean,
                l.epoch == trained.best_epoch
            ));
        }
        save_trained(&trained, cfg, fold.fold_index)?;
        let outcome = harness::evaluate(
            &trained,
            &cohort,
            fold,
            test_policy,
            &settings,
            variant.as_str(),
            train_seed,
        )?;
        println!(
            "fold {}: best epoch {}, test gmean {:?}",
            fold.fold_index, trained.best_epoch, outcome.row.gmean
        );
        rows.push(outcome.row);
    }
    write_metrics_csv(&cfg.experiment, &rows, &out_path(cfg, "metrics.csv"))?;
    std::fs::write(out_path(cfg, "training_log.csv"), log_csv)?;
    println!("metrics written to {}", out_path(cfg, "metrics.csv").display());
    Ok(())
}

fn variant_tag(v: Variant) -> u64 {
    match v {
        Variant::Mint => 1,
        Variant::Early => 2,
        Variant::Late => 3,
        Variant::CtOnly => 4,
        Variant::PetOnly => 5,
    }
}

fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let variant = cfg.parse_variant().map_err(|e| anyhow!(e))?;
    let test_policy = cfg.parse_policy(&cfg.test_policy).map_err(|e| anyhow!(e))?;
    let settings = cfg.train_settings();
    let folds = harness::make_folds(&cohort, cfg.k_folds, cfg.seed)?;
    let mut rows = Vec::new();
    for fold in &folds {
        let trained = load_trained(cfg, variant, fold.fold_index)?;
        let train_seed = harness::derive_seed(
            cfg.seed,
            &[variant_tag(variant), fold.fold_index as u64],
        );
        let outcome = harness::evaluate(
            &trained,
            &cohort,
            fold,
            test_policy,
            &settings,
            variant.as_str(),
            train_seed,
        )?;
        rows.push(outcome.row);
    }
    write_metrics_csv(&cfg.experiment, &rows, &out_path(cfg, "metrics.csv"))?;
    for metric in harness::METRIC_NAMES {
        if let Some((m, s)) = harness::mean_sd(&rows, variant.as_str(), metric) {
            println!("{metric}: {m:.3} ± {s:.3}");
        }
    }
    Ok(())
}

fn compare(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let entries = cfg.comparison_entries().map_err(|e| anyhow!(e))?;
    let settings = cfg.train_settings();
    let result = run_comparison(
        &cohort,
        &entries,
        cfg.k_folds,
        cfg.seed,
        &settings,
        cfg.lock_string(),
    )?;
    write_metrics_csv(&cfg.experiment, &result.rows, &out_path(cfg, "metrics.csv"))?;
    write_pvalues_csv(&cfg.experiment, &result.pvalues, &out_path(cfg, "pvalues.csv"))?;
    let report = comparison_report(&result);
    std::fs::write(out_path(cfg, "report.txt"), &report)?;
    println!("{report}");
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let cohort = load_cohort_for(cfg)?;
    let settings = cfg.train_settings();
    let result = run_ratio_sweep(&cohort, &cfg.ratios, cfg.k_folds, cfg.seed, &settings)?;
    write_sweep_csv(&cfg.experiment, &result.rows, &out_path(cfg, "sweep.csv"))?;
    std::fs::write(out_path(cfg, "sweep.svg"), &result.svg)?;
    write_metrics_csv(
        &cfg.experiment,
        &result.per_fold,
        &out_path(cfg, "metrics.csv"),
    )?;
    println!(
        "sweep over {:?} done in {:.1}s; csv and svg in {}",
        cfg.ratios, result.wall_clock_secs, cfg.out_dir
    );
    Ok(())
}

fn report(cfg: &RunConfig) -> Result<()> {
    let metrics = harness::read_csv(&out_path(cfg, "metrics.csv"))?;
    if metrics.is_empty() {
        bail!("no metrics.csv in {}", cfg.out_dir);
    }
    // rebuild per-(variant, fold) rows
    let mut by_key: std::collections::BTreeMap<(String, usize), MetricRow> =
        std::collections::BTreeMap::new();
    for row in metrics.iter().skip(1) {
        if row.len() < 5 {
            continue;
        }
        let entry = row[1].clone();
        let fold: usize = row[2].parse().unwrap_or(0);
        let value = row[4].parse::<f64>().ok();
        let slot = by_key
            .entry((entry.clone(), fold))
            .or_insert_with(|| MetricRow {
                entry,
                fold,
                auc: None,
                balanced_accuracy: None,
                gmean: None,
                tpr_adc: None,
                tpr_scc: None,
            });
        match row[3].as_str() {
            "auc" => slot.auc = value,
            "balanced_accuracy" => slot.balanced_accuracy = value,
            "gmean" => slot.gmean = value,
            "tpr_adc" => slot.tpr_adc = value,
            "tpr_scc" => slot.tpr_scc = value,
            _ => {}
        }
    }
    let rows: Vec<MetricRow> = by_key.into_values().collect();
    let mut entries: Vec<String> = rows.iter().map(|r| r.entry.clone()).collect();
    entries.sort();
    entries.dedup();
    println!("{:<18}{:>22}", "entry", "mean ± sd per metric");
    for entry in &entries {
        print!("{entry:<18}");
        for metric in harness::METRIC_NAMES {
            match harness::mean_sd(&rows, entry, metric) {
                Some((m, s)) => print!("{:>22}", format!("{metric} {m:.3}±{s:.3}")),
                None => print!("{:>22}", format!("{metric} NA")),
            }
        }
        println!();
    }
    let pv_path = out_path(cfg, "pvalues.csv");
    if pv_path.exists() {
        for row in harness::read_csv(&pv_path)?.iter().skip(1) {
            if row.len() >= 5 {
                println!("p[{} > {}] on {}: {}", row[2], row[3], row[1], row[4]);
            }
        }
    }
    Ok(())
}
