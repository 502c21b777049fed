use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use image::{ImageFormat, RgbImage};
use log::{info, warn};
use rayon::prelude::*;
use serde_json::{json, Value};

use super::config::write_snapshot;
use super::draw::{class_color, draw_labeled_box};
use super::{AnalyzeArgs, CliError, ManifestArgs, MosaicArgs, PreviewArgs, PseudolabelArgs, ValidateArgs};
use crate::catalog::{
    calibrated_thresholds, frequency_report, gold_class_records, load_oci_catalog, rfs_weights, OciClass,
};
use crate::dataset_io::{
    emit_coco, emit_manifest, load_coco_unchecked, manifest_to_string, parse_coco, parse_detections, validate_dataset,
    write_text, CocoAnnotation, CocoCategory, CocoDataset, CocoImage, ManifestConfig, Provenance, TrainingMode,
};
use crate::mosaic::{compose, plan_mosaics, remap_annotations, Grid, PoolImage, SamplingMode, RESAMPLER};
use crate::oracle::{ConfidenceOracle, FileOracle, HttpOracle, HttpOracleConfig};
use crate::pseudolabel::{
    lore_localize, lore_prefilter, strategy_calibrated_relabel, strategy_detector, strategy_detector_relabel,
    strategy_fixed, strategy_single, DetectionRecord, LoreParams, LoreStatus, PseudoAnnotation, Strategy,
};

const SNAPSHOT_NAME: &str = "effective_config.json";

fn required<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Usage(format!("missing required setting --{flag}")))
}

fn existing<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    let path = required(value, flag)?;
    if !path.exists() {
        return Err(CliError::Usage(format!("--{flag}: file not found: {}", path.display())));
    }
    Ok(path)
}

fn unit_interval(name: &str, value: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(CliError::Usage(format!("--{name} must be in [0, 1], got {value}")))
    }
}

/// `annotations.json` -> `annotations.effective_config.json`.
fn snapshot_beside(out: &Path) -> PathBuf {
    out.with_extension(SNAPSHOT_NAME)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("--jobs {jobs}: {e}")))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn absolute(path: &Path) -> PathBuf {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_text(path, &text).map_err(CliError::from)
}

/// Where a dataset's `file_name`s live: the flag, else the dataset's own
/// provenance, else the dataset file's directory.
fn resolve_image_root(flag: Option<&Path>, dataset: &CocoDataset, dataset_path: &Path) -> PathBuf {
    if let Some(root) = flag {
        return root.to_path_buf();
    }
    let base = parent_dir(dataset_path);
    match dataset.provenance.as_ref().and_then(|p| p.image_root.as_deref()) {
        Some(root) => base.join(root),
        None => base,
    }
}

fn load_rgb(path: &Path) -> Result<RgbImage, String> {
    image::open(path).map(|img| img.to_rgb8()).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    let gold_path = existing(&args.gold, "gold")?;
    let catalog_path = existing(&args.catalog, "catalog")?;
    let out = required(&args.out, "out")?;

    let gold = parse_coco(gold_path)?;
    let catalog = load_oci_catalog(catalog_path)?;
    let oci_records: Vec<_> = catalog.iter().map(OciClass::record).collect();
    let report = frequency_report(&gold, &oci_records)?;
    let rfs = rfs_weights(&gold, args.rfs_threshold)?;
    let counts: BTreeMap<u64, u64> =
        report.rows.iter().filter(|r| r.gold_image_count > 0).map(|r| (r.class_id, r.gold_image_count)).collect();
    let thresholds = calibrated_thresholds(&counts, args.gamma, args.base)?;

    write_text(&out.join("frequency_report.json"), &report.to_json())?;
    write_text(&out.join("frequency_report.csv"), &report.to_csv()?)?;
    write_json(&out.join("repeat_factors.json"), &rfs)?;
    write_json(&out.join("calibrated_thresholds.json"), &thresholds)?;
    write_snapshot(args, &out.join(SNAPSHOT_NAME))?;
    info!(
        "event=analyze_done classes={} matched={} rare={} common={} frequent={} zero_gold={}",
        report.rows.len(),
        report.matched_class_count,
        report.bucket_totals.rare,
        report.bucket_totals.common,
        report.bucket_totals.frequent,
        report.zero_gold_class_ids.len()
    );
    Ok(())
}

/// A catalog image with its assigned id.
///
/// Ids run from 1 over classes in ascending class id, then paths in listed
/// order; detection files and oracle tables refer to these ids.
struct CatalogImage {
    id: u64,
    class_id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

fn catalog_images(catalog: &[OciClass], root: &Path) -> Result<Vec<CatalogImage>, CliError> {
    let mut classes: Vec<&OciClass> = catalog.iter().collect();
    classes.sort_by_key(|c| c.class_id);
    let listed: Vec<(u64, u64, &String)> = classes
        .iter()
        .flat_map(|c| c.image_paths.iter().map(move |p| (c.class_id, p)))
        .zip(1u64..)
        .map(|((class_id, path), id)| (id, class_id, path))
        .collect();
    listed
        .par_iter()
        .map(|&(id, class_id, path)| {
            let (width, height) = image::image_dimensions(root.join(path))
                .map_err(|e| CliError::Data(format!("catalog image {path}: {e}")))?;
            Ok(CatalogImage { id, class_id, file_name: path.clone(), width, height })
        })
        .collect()
}

fn parse_patch_color(text: &str) -> Result<[u8; 3], CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || CliError::Usage(format!("--patch-color expects r,g,b with values 0-255, got {text:?}"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut color = [0u8; 3];
    for (c, p) in color.iter_mut().zip(parts) {
        *c = p.parse().map_err(|_| bad())?;
    }
    Ok(color)
}

fn build_oracle(args: &PseudolabelArgs, spec: &str) -> Result<Box<dyn ConfidenceOracle>, CliError> {
    if let Some(path) = spec.strip_prefix("file:") {
        let path = Path::new(path);
        if !path.exists() {
            return Err(CliError::Usage(format!("--oracle: file not found: {}", path.display())));
        }
        return Ok(Box::new(FileOracle::load(path)?));
    }
    if spec.starts_with("http://") || spec.starts_with("https://") {
        if !(args.oracle_timeout.is_finite() && args.oracle_timeout > 0.0) {
            return Err(CliError::Usage(format!("--oracle-timeout must be positive, got {}", args.oracle_timeout)));
        }
        let mut config = HttpOracleConfig::new(spec);
        config.timeout = Duration::from_secs_f64(args.oracle_timeout);
        config.patch_color = parse_patch_color(&args.patch_color)?;
        config.bearer_token = args.oracle_token.clone();
        return Ok(Box::new(HttpOracle::new(config)));
    }
    Err(CliError::Usage(format!("--oracle must be file:<path> or an http(s) URL, got {spec:?}")))
}

fn load_thresholds(args: &PseudolabelArgs) -> Result<BTreeMap<u64, f64>, CliError> {
    if args.thresholds.is_some() {
        let path = existing(&args.thresholds, "thresholds")?;
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let raw: BTreeMap<String, f64> =
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        return raw
            .into_iter()
            .map(|(k, v)| {
                let id = k
                    .parse()
                    .map_err(|_| CliError::Data(format!("{}: class id {k:?} is not a number", path.display())))?;
                Ok((id, v))
            })
            .collect();
    }
    let gold_path = existing(&args.gold, "gold").map_err(|_| {
        CliError::Usage("strategy dc needs --thresholds or --gold to calibrate per-class thresholds".into())
    })?;
    let gold = parse_coco(gold_path)?;
    let counts: BTreeMap<u64, u64> = gold_class_records(&gold)?
        .into_iter()
        .filter(|r| r.gold_image_count > 0)
        .map(|r| (r.class_id, r.gold_image_count))
        .collect();
    Ok(calibrated_thresholds(&counts, args.gamma, args.base)?)
}

struct LabelContext<'a> {
    strategy: Strategy,
    detections: BTreeMap<u64, Vec<DetectionRecord>>,
    thresholds: BTreeMap<u64, f64>,
    oracle: Option<Box<dyn ConfidenceOracle>>,
    lore: LoreParams,
    args: &'a PseudolabelArgs,
}

struct ImageOutcome {
    annotations: Vec<PseudoAnnotation>,
    lore_status: Option<LoreStatus>,
    fell_back: bool,
}

fn label_image(img: &CatalogImage, ctx: &LabelContext) -> Result<ImageOutcome, CliError> {
    let (id, label, w, h) = (img.id, img.class_id, img.width, img.height);
    let dedup = !ctx.args.no_dedup;
    let dets: &[DetectionRecord] = ctx.detections.get(&id).map_or(&[], Vec::as_slice);
    let mut lore_status = None;
    let mut annotations = match ctx.strategy {
        Strategy::Fixed => strategy_fixed(id, w, h, label)?,
        Strategy::Single => strategy_single(id, w, h, label)?,
        Strategy::Detector => strategy_detector(dets, ctx.args.conf, ctx.args.nms_iou),
        Strategy::DetectorRelabel => strategy_detector_relabel(dets, ctx.args.conf, ctx.args.nms_iou, label, dedup),
        Strategy::CalibratedRelabel => {
            strategy_calibrated_relabel(dets, &ctx.thresholds, ctx.args.nms_iou, label, dedup)?
        }
        Strategy::Lore => {
            let oracle = ctx.oracle.as_deref().expect("oracle checked before labeling");
            let pool = lore_prefilter(dets, oracle, id, label, &ctx.lore)?;
            let outcome = lore_localize(&pool, oracle, id, label, &ctx.lore)?;
            lore_status = Some(outcome.status);
            outcome.annotations
        }
    };
    let mut fell_back = false;
    if annotations.is_empty() && ctx.args.fallback_fixed {
        annotations = strategy_fixed(id, w, h, label)?;
        fell_back = true;
    }
    Ok(ImageOutcome { annotations, lore_status, fell_back })
}

pub fn pseudolabel(args: &PseudolabelArgs) -> Result<(), CliError> {
    let catalog_path = existing(&args.catalog, "catalog")?;
    let out = required(&args.out, "out")?;
    let strategy: Strategy = args.strategy.parse().map_err(CliError::Usage)?;
    unit_interval("conf", args.conf)?;
    unit_interval("nms-iou", args.nms_iou)?;
    let lore = LoreParams {
        prefilter_top_k: args.lore_top_k,
        prefilter_nms_iou: args.lore_nms_iou,
        prefilter_stop_confidence: args.lore_stop_confidence,
        reduce_ratio_threshold: args.lore_ratio,
    };
    if strategy == Strategy::Lore {
        lore.validate()?;
    }
    if strategy.needs_detections() && args.detections.is_none() {
        return Err(CliError::Usage(format!("strategy {strategy} needs --detections")));
    }
    let oracle = match (strategy, args.oracle.as_deref()) {
        (Strategy::Lore, None) => {
            return Err(CliError::Usage(format!("strategy LORE needs --oracle (or {})", super::ORACLE_URL_ENV)))
        }
        (Strategy::Lore, Some(spec)) => Some(build_oracle(args, spec)?),
        _ => None,
    };
    let thresholds = if strategy == Strategy::CalibratedRelabel { load_thresholds(args)? } else { BTreeMap::new() };
    let gold = match &args.gold {
        Some(_) => Some(parse_coco(existing(&args.gold, "gold")?)?),
        None => None,
    };

    let pool = thread_pool(args.jobs)?;
    let catalog = load_oci_catalog(catalog_path)?;
    let root = absolute(&parent_dir(catalog_path));
    let images = pool.install(|| catalog_images(&catalog, &root))?;
    let dims: BTreeMap<u64, (u32, u32)> = images.iter().map(|i| (i.id, (i.width, i.height))).collect();

    let mut detections = BTreeMap::new();
    if strategy.needs_detections() {
        let det_path = existing(&args.detections, "detections")?;
        let (mut unknown, mut clipped_away) = (0usize, 0usize);
        for (image_id, records) in parse_detections(det_path)? {
            let Some(&(w, h)) = dims.get(&image_id) else {
                unknown += records.len();
                continue;
            };
            let kept: Vec<DetectionRecord> = records.iter().filter_map(|r| r.clamped(w, h)).collect();
            clipped_away += records.len() - kept.len();
            detections.insert(image_id, kept);
        }
        if unknown > 0 {
            warn!("event=detections_unknown_image records={unknown}");
        }
        if clipped_away > 0 {
            warn!("event=detections_outside_image records={clipped_away}");
        }
    }

    let ctx = LabelContext { strategy, detections, thresholds, oracle, lore, args };
    let outcomes: Vec<ImageOutcome> =
        pool.install(|| images.par_iter().map(|img| label_image(img, &ctx)).collect::<Result<_, _>>())?;

    let mut dataset = CocoDataset::default();
    let mut status_counts: BTreeMap<String, usize> = BTreeMap::new();
    let (mut empty, mut fallback) = (0usize, 0usize);
    for (img, outcome) in images.iter().zip(&outcomes) {
        let mut entry = CocoImage::new(img.id, img.file_name.clone(), img.width, img.height);
        entry.image_label = Some(img.class_id);
        dataset.images.push(entry);
        if outcome.annotations.is_empty() {
            empty += 1;
        }
        if outcome.fell_back {
            fallback += 1;
        }
        if let Some(status) = outcome.lore_status {
            let name = serde_json::to_value(status).expect("status serializes");
            *status_counts.entry(name.as_str().unwrap_or_default().to_string()).or_default() += 1;
        }
        for a in &outcome.annotations {
            let id = dataset.annotations.len() as u64 + 1;
            dataset.annotations.push(CocoAnnotation::from_pseudo(id, a));
        }
    }

    dataset.categories = match &gold {
        Some(g) => g.categories.clone(),
        None => catalog
            .iter()
            .map(|c| {
                let mut cat = CocoCategory::new(c.class_id, c.name.clone());
                cat.synset = c.synset_id.clone();
                cat
            })
            .collect(),
    };
    let known: BTreeSet<u64> = dataset.categories.iter().map(|c| c.id).collect();
    let missing: BTreeSet<u64> = dataset
        .annotations
        .iter()
        .map(|a| a.category_id)
        .chain(images.iter().map(|i| i.class_id))
        .filter(|id| !known.contains(id))
        .collect();
    if !missing.is_empty() {
        warn!("event=categories_added reason=unknown_class count={}", missing.len());
        dataset.categories.extend(missing.iter().map(|&id| CocoCategory::new(id, format!("class_{id}"))));
    }

    let mut provenance = Provenance::new();
    provenance.strategy = Some(strategy);
    provenance.image_root = Some(root.display().to_string());
    provenance.sources = [Some(catalog_path), args.detections.as_deref(), args.gold.as_deref()]
        .into_iter()
        .flatten()
        .map(|p| p.display().to_string())
        .collect();
    provenance.extra.insert("settings".into(), serde_json::to_value(args).expect("settings serialize"));
    dataset.provenance = Some(provenance);

    emit_coco(&dataset, out)?;
    write_snapshot(args, &snapshot_beside(out))?;
    let statuses: Vec<String> = status_counts.iter().map(|(k, v)| format!("lore_{k}={v}")).collect();
    info!(
        "event=pseudolabel_done strategy={strategy} images={} boxes={} empty_images={empty} fallback_images={fallback}{}{}",
        dataset.images.len(),
        dataset.annotations.len(),
        if statuses.is_empty() { "" } else { " " },
        statuses.join(" ")
    );
    Ok(())
}

pub fn mosaic(args: &MosaicArgs) -> Result<(), CliError> {
    let ann_path = existing(&args.annotations, "annotations")?;
    let out = required(&args.out, "out")?;
    let seed = *required(&args.seed, "seed")?;
    let grid: Grid = args.grid.parse().map_err(CliError::Usage)?;
    let mode: SamplingMode = args.sampling.parse().map_err(CliError::Usage)?;
    let (format, ext) = match args.format.to_ascii_lowercase().as_str() {
        "png" => (ImageFormat::Png, "png"),
        "jpeg" | "jpg" => (ImageFormat::Jpeg, "jpg"),
        other => return Err(CliError::Usage(format!("--format must be png or jpeg, got {other:?}"))),
    };
    let cell_w = args.cell_w.unwrap_or(args.cell_size);
    let cell_h = args.cell_h.unwrap_or(args.cell_size);

    let source = parse_coco(ann_path)?;
    let root = resolve_image_root(args.image_root.as_deref(), &source, ann_path);
    let unlabeled = source.images.iter().filter(|i| i.image_label.is_none()).count();
    if unlabeled > 0 {
        warn!("event=pool_skip reason=no_image_label images={unlabeled}");
    }
    let pool_images: Vec<PoolImage> = source
        .images
        .iter()
        .filter_map(|i| i.image_label.map(|class_id| PoolImage { image_id: i.id, class_id }))
        .collect();
    let plans = plan_mosaics(&pool_images, grid, mode, args.count, seed, cell_w, cell_h)?;

    let images = source.image_map();
    let dims: BTreeMap<u64, (u32, u32)> = images.iter().map(|(&id, i)| (id, (i.width, i.height))).collect();
    let mut per_image: BTreeMap<u64, Vec<PseudoAnnotation>> = BTreeMap::new();
    for a in &source.annotations {
        per_image.entry(a.image_id).or_default().push(a.to_pseudo()?);
    }
    let loader = |image_id: u64| -> Result<RgbImage, String> {
        let entry = images.get(&image_id).ok_or_else(|| format!("image {image_id} not in dataset"))?;
        let img = load_rgb(&root.join(&entry.file_name))?;
        if img.dimensions() != (entry.width, entry.height) {
            return Err(format!(
                "{} is {}x{} but the dataset declares {}x{}",
                entry.file_name,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            ));
        }
        Ok(img)
    };

    write_json(&out.join("plans.json"), &plans)?;
    let image_dir = out.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| CliError::Data(format!("{}: {e}", image_dir.display())))?;

    let workers = thread_pool(args.jobs)?;
    let remapped: Vec<Vec<PseudoAnnotation>> = workers.install(|| {
        plans
            .par_iter()
            .enumerate()
            .map(|(index, plan)| -> Result<Vec<PseudoAnnotation>, CliError> {
                let composite = compose(plan, &loader)?;
                let path = image_dir.join(format!("{}.{ext}", plan.mosaic_id));
                composite
                    .pixels
                    .save_with_format(&path, format)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
                let cells: BTreeMap<u64, Vec<PseudoAnnotation>> =
                    plan.cells.iter().filter_map(|id| per_image.get(id).map(|v| (*id, v.clone()))).collect();
                Ok(remap_annotations(plan, &cells, &dims, index as u64 + 1)?.annotations)
            })
            .collect::<Result<_, _>>()
    })?;

    let mut dataset = CocoDataset { categories: source.categories.clone(), ..Default::default() };
    for (index, (plan, anns)) in plans.iter().zip(&remapped).enumerate() {
        let mut entry =
            CocoImage::new(index as u64 + 1, format!("images/{}.{ext}", plan.mosaic_id), plan.width(), plan.height());
        entry.image_label = plan.class_id;
        entry.extra.insert("mosaic_id".into(), Value::String(plan.mosaic_id.clone()));
        entry.extra.insert("cells".into(), json!(plan.cells));
        dataset.images.push(entry);
        for a in anns {
            let id = dataset.annotations.len() as u64 + 1;
            dataset.annotations.push(CocoAnnotation::from_pseudo(id, a));
        }
    }
    let mut provenance = Provenance::new();
    provenance.strategy = source.provenance.as_ref().and_then(|p| p.strategy);
    provenance.grid = Some(grid.to_string());
    provenance.sampling_mode = Some(mode.to_string());
    provenance.seed = Some(seed);
    provenance.cell_size = Some([cell_w, cell_h]);
    provenance.resampler = Some(RESAMPLER.to_string());
    provenance.sources = vec![ann_path.display().to_string()];
    dataset.provenance = Some(provenance);

    emit_coco(&dataset, &out.join("annotations.json"))?;
    write_snapshot(args, &out.join(SNAPSHOT_NAME))?;
    info!(
        "event=mosaic_done mosaics={} grid={grid} sampling={mode} seed={seed} annotations={}",
        dataset.images.len(),
        dataset.annotations.len()
    );
    Ok(())
}

pub fn manifest(args: &ManifestArgs) -> Result<(), CliError> {
    let mode = match args.mode.to_ascii_lowercase().as_str() {
        "detection" => TrainingMode::Detection,
        "segmentation" => TrainingMode::Segmentation,
        other => return Err(CliError::Usage(format!("--mode must be detection or segmentation, got {other:?}"))),
    };
    let mut config = ManifestConfig::default();
    if let Some(v) = &args.gold_dataset {
        config.gold_dataset = v.clone();
    }
    if let Some(v) = &args.pseudo_dataset {
        config.pseudo_dataset = v.clone();
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.momentum {
        config.momentum = v;
    }
    if let Some(v) = args.weight_decay {
        config.weight_decay = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.extra_iterations {
        config.extra_iterations = v;
    }
    if let Some(v) = args.rfs_threshold {
        config.rfs_threshold = v;
    }
    config.cls_only = args.cls_only;
    let manifest = emit_manifest(&config, mode)?;
    let text = manifest_to_string(&manifest);
    match &args.out {
        Some(out) => {
            write_text(out, &text)?;
            write_snapshot(args, &snapshot_beside(out))?;
            info!(
                "event=manifest_done mode={mode} stages={} out={:?}",
                manifest.stages.len(),
                out.display().to_string()
            );
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn preview(args: &PreviewArgs) -> Result<(), CliError> {
    let ann_path = existing(&args.annotations, "annotations")?;
    let out = required(&args.out, "out")?;
    let dataset = parse_coco(ann_path)?;
    let root = resolve_image_root(args.image_root.as_deref(), &dataset, ann_path);
    let names: BTreeMap<u64, &str> = dataset.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let wanted: BTreeSet<u64> = args.image_ids.iter().copied().collect();
    let images = dataset.image_map();
    if let Some(id) = wanted.iter().find(|id| !images.contains_key(id)) {
        return Err(CliError::Usage(format!("--image-ids: image {id} is not in the dataset")));
    }
    let selected: Vec<&CocoImage> = images
        .values()
        .filter(|i| wanted.is_empty() || wanted.contains(&i.id))
        .take(args.limit.unwrap_or(usize::MAX))
        .copied()
        .collect();
    let mut boxes: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
    for a in &dataset.annotations {
        boxes.entry(a.image_id).or_default().push(a);
    }
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;

    let workers = thread_pool(args.jobs)?;
    workers.install(|| {
        selected.par_iter().try_for_each(|img| -> Result<(), CliError> {
            let mut canvas = load_rgb(&root.join(&img.file_name)).map_err(CliError::Data)?;
            for a in boxes.get(&img.id).map_or(&[][..], Vec::as_slice) {
                let pseudo = a.to_pseudo()?;
                let label = names.get(&a.category_id).map_or_else(|| a.category_id.to_string(), |n| n.to_string());
                draw_labeled_box(&mut canvas, &pseudo.bbox, &label, class_color(a.category_id));
            }
            let path = out.join(format!("{}.png", img.id));
            canvas
                .save_with_format(&path, ImageFormat::Png)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
        })
    })?;
    write_snapshot(args, &out.join(SNAPSHOT_NAME))?;
    info!("event=preview_done images={}", selected.len());
    Ok(())
}

pub fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let path = existing(&args.dataset, "dataset")?;
    let dataset = load_coco_unchecked(path)?;
    let report = validate_dataset(&dataset);
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    print!("{text}");
    if let Some(out) = &args.out {
        write_text(out, &text)?;
        write_snapshot(args, &snapshot_beside(out))?;
    }
    for f in &report.findings {
        let level = match f.severity {
            crate::dataset_io::Severity::Fatal => log::Level::Error,
            crate::dataset_io::Severity::Warning => log::Level::Warn,
        };
        log::log!(level, "event=finding code={} count={}", f.code, f.count);
    }
    let fatal = report.fatal_count();
    info!(
        "event=validate_done images={} annotations={} fatal={fatal} findings={}",
        report.image_count,
        report.annotation_count,
        report.findings.len()
    );
    if fatal > 0 {
        return Err(CliError::Data(format!("{fatal} fatal finding(s) in {}", path.display())));
    }
    Ok(())
}
