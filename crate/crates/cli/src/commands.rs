use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use eqcon::augment::Component;
use eqcon::encoder::{Checkpoint, HeadKind};
use eqcon::pose::{equivariance_improvement, pck_thresholds, rotation_grid, translation_grid, MetricReport};
use eqcon::synthhand::{make_dataset, Dataset, SynthConfig};
use eqcon::trainer::{
    composition_search, evaluate_model, evaluate_poses, finetune, ground_truth_poses, pretrain, EpochReport, Objective,
    TraceRow, REFERENCE_SIDE,
};
use eqcon::Error;

use crate::config::{ExperimentConfig, Manifest, OUTPUT_DIR_ENV};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::NonFinite { .. } | Error::Numeric(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eqcon", version, about = "Equivariant contrastive pretraining for 2.5D hand pose")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic hand dataset to disk.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Contrastive pretraining on the config's train datasets.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `[objective] kind`.
        #[arg(long)]
        objective: Option<Objective>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Supervised 2.5D training from a pretrained checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// `none` or a pretraining checkpoint.
        #[arg(long, default_value = "none")]
        init: String,
        #[arg(long, default_value_t = 1.0)]
        label_fraction: f64,
        #[arg(long)]
        aligned: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a pose checkpoint (or `oracle`, the ground truth) on a dataset.
    Eval {
        #[arg(long)]
        model: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        aligned: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Per-transform equivariance error of two pose checkpoints and the
    /// relative improvement of B over A.
    EquivReport {
        #[arg(long)]
        model_a: PathBuf,
        #[arg(long)]
        model_b: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        grid: Grid,
        /// Grid points (per axis for translation); 17 or 5 by default.
        #[arg(long)]
        count: Option<usize>,
        /// Largest rotation in degrees or shift in pixels; 80 degrees or
        /// 25 px at 128 px (scaled to the image size) by default.
        #[arg(long)]
        max: Option<f64>,
        /// Use only the first N images.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Pretrain and probe every non-empty subset of the candidate augmentations.
    AblateCompositions {
        /// Comma-separated augmentation names, at most five.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    Rotation,
    Translation,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData {
            n,
            seed,
            labeled_fraction,
            image_size,
            out,
            force,
        } => gen_data(n, seed, labeled_fraction, image_size, out, force),
        Command::Pretrain {
            config,
            objective,
            out,
            force,
        } => cmd_pretrain(&config, objective, out, force),
        Command::Finetune {
            config,
            init,
            label_fraction,
            aligned,
            out,
            force,
        } => cmd_finetune(&config, &init, label_fraction, aligned, out, force),
        Command::Eval {
            model,
            dataset,
            aligned,
            out,
            force,
        } => cmd_eval(&model, &dataset, aligned, out, force),
        Command::EquivReport {
            model_a,
            model_b,
            dataset,
            grid,
            count,
            max,
            images,
            out,
            force,
        } => cmd_equiv(&model_a, &model_b, &dataset, grid, count, max, images, out, force),
        Command::AblateCompositions {
            candidates,
            config,
            out,
            force,
        } => cmd_ablate(&candidates, &config, out, force),
    }
}

/// `--out`, else `name` under `$EQCON_OUTPUT_DIR`, else under `fallback`.
fn resolve_out(out: Option<PathBuf>, fallback: &Path, name: &str) -> PathBuf {
    out.unwrap_or_else(|| match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(name),
        _ => fallback.join(name),
    })
}

/// Creates `dir`, refusing a non-empty one unless `force`.
fn prepare_out(dir: &Path, force: bool) -> CliResult {
    if dir.exists() {
        let occupied = match fs::read_dir(dir) {
            Ok(mut entries) => entries.next().is_some(),
            Err(_) => true,
        };
        if occupied && !force {
            return Err(CliError::usage(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> CliResult {
    write_file(&dir.join(MANIFEST_FILE), &manifest.to_toml())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    Ok(Dataset::load(dir)?)
}

fn train_sets(cfg: &ExperimentConfig) -> CliResult<Vec<Dataset>> {
    if cfg.dataset.train.is_empty() {
        return Err(CliError::usage("config lists no `[dataset] train` directories"));
    }
    cfg.dataset.train.iter().map(|p| load_dataset(p)).collect()
}

fn csv(header: &str, rows: impl IntoIterator<Item = String>) -> String {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

fn report_json(report: &MetricReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("reports always serialize");
    s.push('\n');
    s
}

fn pck_csv(report: &MetricReport) -> String {
    csv(
        "threshold_cm,pck",
        pck_thresholds().iter().zip(&report.pck).map(|(t, p)| format!("{t},{p}")),
    )
}

fn gen_data(n: usize, seed: u64, fraction: f64, side: usize, out: Option<PathBuf>, force: bool) -> CliResult {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CliError::usage(format!("--labeled-fraction must lie in [0, 1], got {fraction}")));
    }
    let cfg = SynthConfig::with_size(side);
    cfg.validate()?;
    let out = resolve_out(out, Path::new("."), "data");
    prepare_out(&out, force)?;
    make_dataset(n, seed, fraction, &cfg, &out)?;
    println!("{}", Dataset::index_path(&out).display());
    Ok(())
}

fn cmd_pretrain(config: &Path, objective: Option<Objective>, out: Option<PathBuf>, force: bool) -> CliResult {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(o) = objective {
        cfg.objective.kind = o;
    }
    let pcfg = cfg.pretrain_config();
    pcfg.validate()?;
    let data = train_sets(&cfg)?;
    let name = format!("pretrain-{}-seed{}", pcfg.objective, pcfg.seed);
    let out = resolve_out(out, &cfg.output.dir, &name);
    prepare_out(&out, force)?;
    let mut args = toml::Table::new();
    args.insert("objective".into(), pcfg.objective.to_string().into());
    write_manifest(&out, &Manifest::new("pretrain", &cfg, args))?;

    let refs: Vec<&Dataset> = data.iter().collect();
    let run = pretrain(&pcfg, &refs)?;
    run.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_file(
        &out.join("trace.csv"),
        &csv(TraceRow::CSV_HEADER, run.trace.iter().map(TraceRow::csv_row)),
    )?;
    if let Some(last) = run.trace.last() {
        println!("{}: {} steps, final loss {:.4}", out.display(), last.step, last.loss);
    }
    Ok(())
}

fn cmd_finetune(
    config: &Path,
    init: &str,
    fraction: f64,
    aligned: bool,
    out: Option<PathBuf>,
    force: bool,
) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::usage(format!("--label-fraction must lie in (0, 1], got {fraction}")));
    }
    let fcfg = cfg.finetune_config(aligned);
    fcfg.validate()?;
    let init_ck = match init {
        "none" => None,
        path => Some(Checkpoint::load(Path::new(path))?),
    };
    let first = cfg
        .dataset
        .train
        .first()
        .ok_or_else(|| CliError::usage("config lists no `[dataset] train` directories"))?;
    let full = load_dataset(first)?;
    let (train, eval) = match &cfg.dataset.eval {
        Some(p) => (full, load_dataset(p)?),
        None => {
            let n_eval = (full.len() / 10).max(1);
            if n_eval >= full.len() {
                return Err(CliError::usage("train set is too small to hold out an eval split"));
            }
            let cut = full.len() - n_eval;
            let train: Vec<usize> = (0..cut).collect();
            let eval: Vec<usize> = (cut..full.len()).collect();
            (full.subset(&train), full.subset(&eval))
        }
    };
    let tag = if init_ck.is_some() { "pretrained" } else { "scratch" };
    let name = format!("finetune-{tag}-f{fraction}-seed{}", fcfg.seed);
    let out = resolve_out(out, &cfg.output.dir, &name);
    prepare_out(&out, force)?;
    let mut args = toml::Table::new();
    args.insert("init".into(), init.into());
    args.insert("label_fraction".into(), fraction.into());
    args.insert("aligned".into(), aligned.into());
    write_manifest(&out, &Manifest::new("finetune", &cfg, args))?;

    let run = finetune(&fcfg, init_ck.as_ref(), &train, &eval, fraction)?;
    run.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    write_file(
        &out.join("epochs.csv"),
        &csv(EpochReport::CSV_HEADER, run.trace.iter().map(EpochReport::csv_row)),
    )?;
    if let Some(last) = run.trace.last() {
        write_file(&out.join("report.json"), &report_json(&last.metrics))?;
        println!(
            "{}: {} labeled samples, EPE {:.3} cm, 2D EPE {:.3} px",
            out.display(),
            run.train_indices.len(),
            last.metrics.epe,
            last.metrics.epe_2d
        );
    }
    Ok(())
}

fn load_pose_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.model.config.head != HeadKind::Pose {
        return Err(CliError::usage(format!(
            "{} holds a projection head; pose commands need a fine-tuned checkpoint",
            path.display()
        )));
    }
    Ok(ck)
}

fn cmd_eval(model: &str, dataset: &Path, aligned: bool, out: Option<PathBuf>, force: bool) -> CliResult {
    let data = load_dataset(dataset)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let report = if model == "oracle" {
        evaluate_poses(&ground_truth_poses(&data, &indices), &data, &indices, aligned)?
    } else {
        let ck = load_pose_checkpoint(Path::new(model))?;
        evaluate_model(&ck.model, &data, &indices, aligned)?
    };
    let out = resolve_out(out, Path::new("."), "eval");
    prepare_out(&out, force)?;
    let json = report_json(&report);
    write_file(&out.join("report.json"), &json)?;
    write_file(&out.join("pck.csv"), &pck_csv(&report))?;
    print!("{json}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_equiv(
    model_a: &Path,
    model_b: &Path,
    dataset: &Path,
    grid: Grid,
    count: Option<usize>,
    max: Option<f64>,
    images: Option<usize>,
    out: Option<PathBuf>,
    force: bool,
) -> CliResult {
    let a = load_pose_checkpoint(model_a)?;
    let b = load_pose_checkpoint(model_b)?;
    let data = load_dataset(dataset)?;
    let n = images.unwrap_or(data.len()).min(data.len());
    if n == 0 {
        return Err(CliError::usage("equivariance report needs at least one image"));
    }
    let side = data.image_size() as f64;
    let transforms = match grid {
        Grid::Rotation => rotation_grid(count.unwrap_or(17), max.unwrap_or(80.0)),
        Grid::Translation => translation_grid(
            count.unwrap_or(5),
            max.unwrap_or(25.0 * side / REFERENCE_SIDE),
        ),
    };
    if transforms.is_empty() {
        return Err(CliError::usage("--count must be positive"));
    }
    let imgs: Vec<_> = (0..n).map(|i| data.image(i)).collect();
    let out = resolve_out(out, Path::new("."), "equiv");
    prepare_out(&out, force)?;
    let rows = equivariance_improvement(&a.model, &b.model, &imgs, &transforms)?;
    let body = rows.iter().map(|r| {
        let improvement = r.improvement.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            r.rotation_deg, r.translation[0], r.translation[1], r.equiv_a, r.equiv_b, improvement, r.skipped
        )
    });
    write_file(
        &out.join("equiv.csv"),
        &csv("rotation_deg,tx_px,ty_px,equiv_a,equiv_b,improvement,skipped", body),
    )?;
    let scored: Vec<f64> = rows.iter().filter_map(|r| r.improvement).collect();
    let mut summary = format!("{} grid points, {} scored", rows.len(), scored.len());
    if !scored.is_empty() {
        let _ = write!(
            summary,
            ", mean improvement {:.4}",
            scored.iter().sum::<f64>() / scored.len() as f64
        );
    }
    println!("{summary}");
    Ok(())
}

fn cmd_ablate(candidates: &[String], config: &Path, out: Option<PathBuf>, force: bool) -> CliResult {
    let cfg = ExperimentConfig::load(config)?;
    let comps = candidates
        .iter()
        .map(|c| c.parse::<Component>())
        .collect::<eqcon::Result<Vec<_>>>()?;
    let data = train_sets(&cfg)?;
    let pcfg = cfg.pretrain_config();
    pcfg.validate()?;
    let probe_cfg = cfg.probe_config();
    let out = resolve_out(out, &cfg.output.dir, &format!("ablate-seed{}", pcfg.seed));
    prepare_out(&out, force)?;
    let mut args = toml::Table::new();
    args.insert(
        "candidates".into(),
        toml::Value::Array(comps.iter().map(|c| c.name().into()).collect()),
    );
    write_manifest(&out, &Manifest::new("ablate-compositions", &cfg, args))?;

    let refs: Vec<&Dataset> = data.iter().collect();
    let ranked = composition_search(&comps, &pcfg, &probe_cfg, &refs, &data[0])?;
    let body = ranked.iter().enumerate().map(|(i, r)| {
        let m = &r.probe.metrics;
        format!(
            "{},{},{},{},{},{}",
            i + 1,
            r.key(),
            m.epe,
            m.pa_epe,
            m.epe_2d,
            r.final_loss
        )
    });
    write_file(
        &out.join("ranking.csv"),
        &csv("rank,components,epe_cm,pa_epe_cm,epe_2d_px,final_loss", body),
    )?;
    if let Some(best) = ranked.first() {
        println!("best composition: {} ({:.3} cm)", best.key(), best.probe.metrics.epe);
    }
    Ok(())
}
