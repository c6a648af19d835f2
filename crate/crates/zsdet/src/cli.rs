//! Command-line surface. One sub-command per pipeline stage; a single TOML
//! config file feeds every stage, with flags winning over the file and the
//! file over built-in defaults. All randomness flows from the global seed,
//! so reruns of any command are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::adaptation::{
    collect_instance_crops, evaluate_instance_acc, finetune_layernorm, write_acc_csv, Side,
};
use crate::config::RunConfig;
use crate::dataset::{
    load_coco_json, make_toy_dataset, parse_shape_name, Dataset, DatasetSplit,
    filter_training_images, Role,
};
use crate::detector::checkpoint::{load_checkpoint, save_checkpoint};
use crate::detector::infer::{detect_image, write_detections_json, Detection};
use crate::detector::train::{train_detector, write_loss_csv, DetectorModel};
use crate::encoder::{mock_fingerprint, Encoder, MockEncoder};
use crate::error::Error;
use crate::evalstats::{
    emit_eval_report, emit_iogt_report, evaluate_detections, iogt_statistics_by_image,
    ReportFormat,
};
use crate::geometry::Box2D;
use crate::proposals::{
    dictionary_names, generate_clip_proposals, read_store, write_store, ProposalSource,
};

/// Environment variable overriding the encoder state file for every
/// command, taking precedence over `--encoder-state`.
pub const ENCODER_STATE_ENV: &str = "ZSDET_ENCODER_STATE";

#[derive(Parser)]
#[command(
    name = "zsdet",
    about = "Zero-shot detection via encoder adaptation, cached region \
             proposals and feature distillation",
    version
)]
pub struct Cli {
    /// TOML run configuration; missing keys use built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed override, fanned out to every stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Mock encoder state file (adapted affine); see also ZSDET_ENCODER_STATE.
    #[arg(long, global = true)]
    pub encoder_state: Option<PathBuf>,
    /// Worker cap for stages that could parallelize. This implementation
    /// runs stages sequentially for exact reproducibility, so values above
    /// 1 are accepted but have no effect.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Use the minutes-scale toy preset instead of the full-scale
    /// defaults. Mutually exclusive with --config.
    #[arg(long, global = true, conflicts_with = "config")]
    pub toy: bool,
    /// Print the fully resolved configuration (defaults filled, overrides
    /// applied) and exit without running a command.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsSide {
    All,
    Base,
    Novel,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic shape dataset (images plus annotations).
    MakeToy {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Image count override.
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Finetune the encoder's normalization affine on base-category crops
    /// and report instance classification accuracy before and after.
    Adapt {
        /// Dataset directory from make-toy (or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for acc_before.csv, acc_after.csv and
        /// encoder_adapted.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score anchors with the encoder and persist the proposal store.
    GenProposals {
        #[arg(long)]
        data: PathBuf,
        /// Store manifest path; the feature blob lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the detection head against cached proposal features.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Proposal store manifest (required unless --no-distill).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Per-iteration loss breakdown CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        /// Disable the distillation term (ablation).
        #[arg(long)]
        no_distill: bool,
    },
    /// Run inference over the evaluation images and report per-category
    /// average precision.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Optional raw detections dump (JSON lines).
        #[arg(long)]
        dets_out: Option<PathBuf>,
    },
    /// Ground-truth coverage statistics of a proposal store.
    Stats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Which ground-truth side to measure coverage against.
        #[arg(long, value_enum, default_value_t = StatsSide::Novel)]
        side: StatsSide,
        /// Drop the appended ground-truth proposals and measure only the
        /// anchor-derived ones.
        #[arg(long)]
        anchors_only: bool,
    },
}

/// Resolves config file + flag overrides into the effective RunConfig.
fn resolve_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load_toml(path)?,
        None if cli.toy => RunConfig::toy_preset(cli.seed.unwrap_or(0)),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn resolve_encoder(cli: &Cli, cfg: &RunConfig) -> Result<MockEncoder, Error> {
    let from_env = std::env::var_os(ENCODER_STATE_ENV).map(PathBuf::from);
    match from_env.as_ref().or(cli.encoder_state.as_ref()) {
        Some(path) => MockEncoder::load_json(path),
        None => Ok(MockEncoder::new(cfg.encoder_seed, cfg.embed_dim)),
    }
}

fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<Dataset, Error> {
    let split_path = dir.join("split.json");
    let split = if split_path.exists() {
        DatasetSplit::load_json(&split_path)?
    } else {
        cfg.split()?
    };
    load_coco_json(&dir.join("annotations.json"), &split)
}

pub fn run(mut cli: Cli) -> Result<(), Error> {
    let cfg = resolve_config(&cli)?;
    if cli.workers == 0 {
        return Err(Error::InvalidArgument("--workers must be at least 1".into()));
    }
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let Some(command) = cli.command.take() else {
        return Err(Error::InvalidArgument(
            "no command given; see --help".into(),
        ));
    };
    match command {
        Command::MakeToy { out, n_images } => cmd_make_toy(&cli, &cfg, &out, n_images),
        Command::Adapt { data, out } => cmd_adapt(&cli, &cfg, &data, &out),
        Command::GenProposals { data, out } => cmd_gen_proposals(&cli, &cfg, &data, &out),
        Command::Train {
            data,
            store,
            out,
            loss_csv,
            no_distill,
        } => cmd_train(&cli, &cfg, &data, store.as_deref(), &out, loss_csv.as_deref(), no_distill),
        Command::Eval {
            data,
            ckpt,
            out,
            format,
            dets_out,
        } => cmd_eval(&cli, &cfg, &data, &ckpt, &out, format, dets_out.as_deref()),
        Command::Stats {
            data,
            store,
            out,
            format,
            side,
            anchors_only,
        } => cmd_stats(&cfg, &data, &store, &out, format, side, anchors_only),
    }
}

fn cmd_make_toy(
    _cli: &Cli,
    cfg: &RunConfig,
    out: &Path,
    n_images: Option<usize>,
) -> Result<(), Error> {
    let split = cfg.split()?;
    let mut toy = cfg.toy.clone();
    if let Some(n) = n_images {
        toy.n_images = n;
    }
    let catalog = split
        .all()
        .iter()
        .map(|n| parse_shape_name(n))
        .collect::<Result<Vec<_>, _>>()?;
    let ann_path = make_toy_dataset(out, &toy, &catalog, &split)?;
    split.save_json(&out.join("split.json"))?;
    let dataset = load_coco_json(&ann_path, &split)?;
    println!(
        "make-toy: {} images, {} annotations at {}",
        dataset.images.len(),
        dataset.annotations.len(),
        out.display()
    );
    Ok(())
}

fn cmd_adapt(cli: &Cli, cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = load_dataset(data, cfg)?;
    let enc = resolve_encoder(cli, cfg)?;
    let settings = [Side::Base, Side::Novel, Side::All];

    let before: Vec<_> = settings
        .iter()
        .map(|s| evaluate_instance_acc(&enc, &dataset, *s, cfg.adapt.enlarge_factor, cfg.adapt.tau))
        .collect::<Result<_, _>>()?;
    write_acc_csv(&before, &out.join("acc_before.csv"))?;

    let crops =
        collect_instance_crops(&dataset, Side::Base, cfg.adapt.enlarge_factor, enc.input_side())?;
    let base_text = enc.encode_text(&dataset.split.base, &cfg.prompt_template)?;
    let adapted = finetune_layernorm(&enc, &crops, &base_text, &cfg.adapt)?;

    let after: Vec<_> = settings
        .iter()
        .map(|s| {
            evaluate_instance_acc(&adapted, &dataset, *s, cfg.adapt.enlarge_factor, cfg.adapt.tau)
        })
        .collect::<Result<_, _>>()?;
    write_acc_csv(&after, &out.join("acc_after.csv"))?;
    adapted.save_json(&out.join("encoder_adapted.json"))?;

    for (b, a) in before.iter().zip(after.iter()) {
        let (bv, av) = (
            b.avg().map(|c| c.accuracy()).unwrap_or(f64::NAN),
            a.avg().map(|c| c.accuracy()).unwrap_or(f64::NAN),
        );
        println!("adapt: {} ACC {:.4} -> {:.4}", b.setting, bv, av);
    }
    Ok(())
}

fn cmd_gen_proposals(cli: &Cli, cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), Error> {
    let dataset = load_dataset(data, cfg)?;
    let enc = resolve_encoder(cli, cfg)?;
    let names = dictionary_names(&dataset.split, &cfg.proposals.dictionary);
    let dictionary = enc.encode_text(&names, &cfg.prompt_template)?;

    let images = filter_training_images(&dataset, false);
    let mut per_image = Vec::with_capacity(images.len());
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for im in &images {
        let pixels = im.load_pixels()?;
        let anns = dataset.annotations_for(im.image_id);
        let props =
            generate_clip_proposals(&pixels, &anns, &dataset.split, &enc, &dictionary, &cfg.proposals)?;
        *histogram.entry(props.len()).or_default() += 1;
        per_image.push((im.image_id, props));
    }
    write_store(out, enc.dim(), &per_image)?;
    println!(
        "gen-proposals: {} images -> {}",
        per_image.len(),
        out.display()
    );
    for (count, n) in &histogram {
        println!("  {n} image(s) with {count} proposals");
    }
    Ok(())
}

fn cmd_train(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    store_path: Option<&Path>,
    out: &Path,
    loss_csv: Option<&Path>,
    no_distill: bool,
) -> Result<(), Error> {
    let dataset = load_dataset(data, cfg)?;
    let enc = resolve_encoder(cli, cfg)?;
    let mut dcfg = cfg.detector.clone();
    dcfg.embed_dim = enc.dim();
    if no_distill {
        dcfg.distill = false;
    }
    let store = match store_path {
        Some(p) => Some(read_store(p)?),
        None if dcfg.distill => {
            return Err(Error::InvalidArgument(
                "train: --store is required unless --no-distill is set".into(),
            ))
        }
        None => None,
    };

    let base = enc.encode_text(&dataset.split.base, &cfg.prompt_template)?;
    let mut model = DetectorModel::new(dcfg, base)?;
    let log = train_detector(&mut model, &dataset, store.as_ref(), &cfg.proposals)?;
    if let Some(path) = loss_csv {
        write_loss_csv(path, &log)?;
    }
    save_checkpoint(out, &mut model, mock_fingerprint(enc.seed, enc.dim()))?;
    let last = log.last();
    println!(
        "train: {} iterations, final total loss {:.4} -> {}",
        log.len(),
        last.map(|l| l.l_total).unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

fn cmd_eval(
    cli: &Cli,
    cfg: &RunConfig,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    format: Format,
    dets_out: Option<&Path>,
) -> Result<(), Error> {
    let dataset = load_dataset(data, cfg)?;
    let enc = resolve_encoder(cli, cfg)?;
    let (mut model, fingerprint) = load_checkpoint(ckpt)?;
    if fingerprint != mock_fingerprint(enc.seed, enc.dim()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} was trained against a different encoder",
            ckpt.display()
        )));
    }
    // zero-shot vocabulary extension: novel names enter only here
    model.classifier.novel = enc.encode_text(&dataset.split.novel, &cfg.prompt_template)?;

    let mut dets: Vec<Detection> = Vec::new();
    for im in filter_training_images(&dataset, true) {
        let pixels = im.load_pixels()?;
        dets.extend(detect_image(&model, &pixels, im.image_id, &cfg.inference)?);
    }
    if let Some(path) = dets_out {
        write_detections_json(path, &dets)?;
    }
    let result = evaluate_detections(&dets, &dataset.annotations, &dataset.split, cfg.eval_iou);
    emit_eval_report(out, &result, format.into())?;
    println!(
        "eval: overall AP {:.4}, base {}, novel {} -> {}",
        result.overall_ap,
        result
            .base_ap
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        result
            .novel_ap
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "n/a".into()),
        out.display()
    );
    Ok(())
}

fn cmd_stats(
    cfg: &RunConfig,
    data: &Path,
    store_path: &Path,
    out: &Path,
    format: Format,
    side: StatsSide,
    anchors_only: bool,
) -> Result<(), Error> {
    let dataset = load_dataset(data, cfg)?;
    let store = read_store(store_path)?;

    let mut proposals: BTreeMap<u64, Vec<Box2D>> = BTreeMap::new();
    for (image_id, props) in &store.images {
        let boxes = props
            .iter()
            .filter(|p| !anchors_only || p.source == ProposalSource::Anchor)
            .map(|p| p.bbox)
            .collect();
        proposals.insert(*image_id, boxes);
    }
    let keep = |role: Option<Role>| match side {
        StatsSide::All => true,
        StatsSide::Base => role == Some(Role::Base),
        StatsSide::Novel => role == Some(Role::Novel),
    };
    let mut gts: BTreeMap<u64, Vec<Box2D>> = BTreeMap::new();
    for a in &dataset.annotations {
        if keep(dataset.split.role(&a.category)) {
            gts.entry(a.image_id).or_default().push(a.bbox);
        }
    }
    let report = iogt_statistics_by_image(&proposals, &gts);
    emit_iogt_report(out, &report, format.into())?;
    println!(
        "stats: {} GT boxes, mean best IoGT {:.4} -> {}",
        report.n_gt,
        report.mean_best_iogt,
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_every_subcommand() {
        Cli::try_parse_from(["zsdet", "make-toy", "--out", "/tmp/x"]).unwrap();
        Cli::try_parse_from(["zsdet", "adapt", "--data", "d", "--out", "o"]).unwrap();
        Cli::try_parse_from(["zsdet", "gen-proposals", "--data", "d", "--out", "s.jsonl"])
            .unwrap();
        Cli::try_parse_from([
            "zsdet", "train", "--data", "d", "--store", "s", "--out", "m.ckpt",
        ])
        .unwrap();
        Cli::try_parse_from([
            "zsdet", "eval", "--data", "d", "--ckpt", "m", "--out", "r.csv", "--format", "json",
        ])
        .unwrap();
        Cli::try_parse_from([
            "zsdet", "stats", "--data", "d", "--store", "s", "--out", "r.csv", "--side", "all",
        ])
        .unwrap();
        Cli::try_parse_from(["zsdet", "--print-config"]).unwrap();
    }

    #[test]
    fn seed_flag_overrides_config() {
        let cli = Cli::try_parse_from(["zsdet", "--seed", "99", "make-toy", "--out", "x"]).unwrap();
        let cfg = resolve_config(&cli).unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.toy.seed, 99);
    }

    #[test]
    fn train_without_store_or_ablation_flag_errors() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let cli = Cli::try_parse_from([
            "zsdet",
            "make-toy",
            "--out",
            data.to_str().unwrap(),
            "--n-images",
            "4",
        ])
        .unwrap();
        run(cli).unwrap();
        let err = run(Cli::try_parse_from([
            "zsdet",
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("m.ckpt").to_str().unwrap(),
        ])
        .unwrap())
        .unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }
}
