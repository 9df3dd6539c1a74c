use std::path::Path;

use super::{write_file, AeCache, CliError, DatasetKind, Layout, Protocol, RunConfig, Source};
use crate::attack::{craft, AttackError, Ensemble};
use crate::bench::{evaluate_images, feature_diff, find_feature_pair, ratio_stats_of, sweep_angles, sweep_cached, BenchError, TransferReport};
use crate::data::{encode_cifar10_bin, generate, parse_cifar10_bin, DataError, Dataset, SyntheticConfig};
use crate::report::{
    featdiff_csv, featdiff_grid, parse_transfer_csv, png_bytes, predictions_csv, ratio_csv, sweep_csv, sweep_svg, transfer_csv, ReportError,
};
use crate::tensor::TensorError;
use crate::xform::{rotate, TransformSpec};
use crate::zoo::{self, Checkpoint, CheckpointError, ModelGraph, ZooError};

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { path, source } => CliError::Io { path: path.into(), source },
            DataError::InvalidConfig(m) => CliError::Config {
                pointer: "/dataset".into(),
                message: m,
            },
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::NonFiniteGradient { .. } => CliError::Numeric(e.to_string()),
            AttackError::Tensor(t) => t.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Attack(a) => a.into(),
            BenchError::Tensor(t) => t.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<ZooError> for CliError {
    fn from(e: ZooError) -> Self {
        match e {
            ZooError::Divergence { .. } => CliError::Numeric(e.to_string()),
            ZooError::Attack(a) => a.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn read_prerequisite(path: &Path, what: &str) -> Result<Vec<u8>, CliError> {
    if !path.exists() {
        return Err(CliError::Missing {
            what: what.to_string(),
            path: path.to_path_buf(),
        });
    }
    std::fs::read(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn dataset_base_id(cfg: &RunConfig) -> String {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => format!("synthetic-s{}", cfg.dataset_seed()),
        DatasetKind::Cifar10Bin => "cifar10".into(),
    }
}

fn load_split(cfg: &RunConfig, layout: &Layout) -> Result<(Dataset, Dataset), CliError> {
    let classes = match cfg.dataset.kind {
        DatasetKind::Synthetic => cfg.dataset.classes,
        DatasetKind::Cifar10Bin => 10,
    };
    let base = dataset_base_id(cfg);
    let load = |path: std::path::PathBuf, split: &str| -> Result<Dataset, CliError> {
        let bytes = read_prerequisite(&path, &format!("{split} data (run gen-data)"))?;
        let mut ds = parse_cifar10_bin(&bytes, &format!("{base}-{split}"))?;
        ds.num_classes = classes;
        Ok(ds)
    };
    Ok((load(layout.train_data(), "train")?, load(layout.test_data(), "test")?))
}

fn eval_set(cfg: &RunConfig, test: &Dataset) -> Dataset {
    let mut ds = test.head(cfg.dataset.eval_images);
    ds.id = format!("{}[..{}]", test.id, ds.len());
    ds
}

/// Write the train and test splits in CIFAR-10 binary form.
pub fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let (train, test) = match cfg.dataset.kind {
        DatasetKind::Synthetic => {
            let split = generate(&SyntheticConfig {
                train: cfg.dataset.size,
                test: cfg.dataset.test_size,
                size: 32,
                classes: cfg.dataset.classes,
                seed: cfg.dataset_seed(),
            })?;
            (split.train, split.test)
        }
        DatasetKind::Cifar10Bin => {
            let dir = cfg.dataset.path.as_ref().expect("validated");
            let mut train = Vec::new();
            for i in 1..=5 {
                let p = dir.join(format!("data_batch_{i}.bin"));
                train.extend(read_prerequisite(&p, "CIFAR-10 training batch")?);
            }
            let test = read_prerequisite(&dir.join("test_batch.bin"), "CIFAR-10 test batch")?;
            (parse_cifar10_bin(&train, "cifar10-train")?, parse_cifar10_bin(&test, "cifar10-test")?)
        }
    };
    write_file(&layout.train_data(), &encode_cifar10_bin(&train)?)?;
    write_file(&layout.test_data(), &encode_cifar10_bin(&test)?)?;
    log::info!("wrote {} train and {} test images", train.len(), test.len());
    Ok(())
}

/// Train one named model, or every zoo model when `only` is `None`.
pub fn train(cfg: &RunConfig, only: Option<&str>) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    if let Some(name) = only {
        if cfg.model(name).is_none() {
            return Err(CliError::Usage(format!("unknown model `{name}`")));
        }
    }
    let (train_set, test_set) = load_split(cfg, &layout)?;
    let spec = train_set.input_spec();
    for entry in cfg.zoo.models.iter().filter(|m| only.is_none_or(|n| n == m.name)) {
        let model = zoo::build(entry.arch, &entry.name, spec, cfg.init_seed(&entry.name))?;
        let tcfg = cfg.train_config(entry);
        let (model, metrics) = zoo::train(model, &train_set, &test_set, &tcfg)?;
        log::info!("{}: train {:.3} test {:.3}", entry.name, metrics.train_accuracy, metrics.test_accuracy);
        let mut ckpt = Checkpoint::new(model, Some(entry.arch.as_str().to_string()), tcfg.seed, train_set.id.clone());
        ckpt.meta.train_accuracy = Some(metrics.train_accuracy);
        ckpt.meta.test_accuracy = Some(metrics.test_accuracy);
        write_file(&layout.checkpoint(&entry.name), &ckpt.to_bytes())?;
    }
    Ok(())
}

fn load_model(cfg: &RunConfig, layout: &Layout, name: &str, data: &Dataset) -> Result<ModelGraph, CliError> {
    let entry = cfg.model(name).ok_or_else(|| CliError::Usage(format!("unknown model `{name}`")))?;
    let path = layout.checkpoint(name);
    let bytes = read_prerequisite(&path, &format!("checkpoint for `{name}` (run train)"))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| match e {
        CheckpointError::Io { path, source } => CliError::Io { path: path.into(), source },
        other => CliError::Mismatch(format!("{}: {other}", path.display())),
    })?;
    if ckpt.meta.name != name || ckpt.meta.arch.as_deref() != Some(entry.arch.as_str()) {
        return Err(CliError::Mismatch(format!(
            "{} holds `{}` ({:?}), config expects `{name}` ({})",
            path.display(),
            ckpt.meta.name,
            ckpt.meta.arch,
            entry.arch
        )));
    }
    data.check_against(ckpt.model.input_spec())
        .map_err(|m| CliError::Mismatch(format!("{}: {m}", path.display())))?;
    Ok(ckpt.model)
}

fn parse_source(cfg: &RunConfig, whitebox: Option<&str>, ensemble: Option<&[String]>) -> Result<Option<Source>, CliError> {
    let src = match (whitebox, ensemble) {
        (Some(_), Some(_)) => return Err(CliError::Usage("use either --whitebox or --ensemble, not both".into())),
        (Some(w), None) => Source::Single(w.to_string()),
        (None, Some(e)) if e.len() == 1 => Source::Single(e[0].clone()),
        (None, Some(e)) => Source::Ensemble(e.to_vec()),
        (None, None) => return Ok(None),
    };
    for m in src.members() {
        if cfg.model(&m).is_none() {
            return Err(CliError::Usage(format!("unknown model `{m}`")));
        }
    }
    Ok(Some(src))
}

/// Craft and cache adversarial images. Without a source flag, crafts every
/// (source, attack) pair the configured protocols need.
pub fn attack(cfg: &RunConfig, whitebox: Option<&str>, ensemble: Option<&[String]>, only_attack: Option<&str>) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    if let Some(a) = only_attack {
        if cfg.attack(a).is_none() {
            return Err(CliError::Usage(format!("unknown attack `{a}`")));
        }
    }
    let jobs: Vec<(Source, String)> = match parse_source(cfg, whitebox, ensemble)? {
        Some(src) => cfg.attacks.iter().map(|a| (src.clone(), a.name.clone())).collect(),
        None => cfg.required_crafts(),
    };
    let jobs: Vec<_> = jobs.into_iter().filter(|(_, a)| only_attack.is_none_or(|o| o == a)).collect();
    if jobs.is_empty() {
        log::warn!("nothing to craft");
        return Ok(());
    }
    let (_, test) = load_split(cfg, &layout)?;
    let eval = eval_set(cfg, &test);
    for (src, name) in jobs {
        let named = cfg.attack(&name).expect("validated");
        let acfg = cfg.attack_config(named, &src);
        let models: Vec<ModelGraph> = src
            .members()
            .iter()
            .map(|m| load_model(cfg, &layout, m, &eval))
            .collect::<Result<_, _>>()?;
        let adv = match &src {
            Source::Single(_) => craft(&models[0], &eval.images, &eval.labels, &acfg)?,
            Source::Ensemble(_) => {
                let ens = Ensemble::new(models.iter().collect())?;
                craft(&ens, &eval.images, &eval.labels, &acfg)?
            }
        };
        let cache = AeCache::new(src.members(), &name, acfg, &eval.id, adv, eval.labels.clone());
        write_file(&layout.ae_cache(&src, &name), &cache.to_bytes())?;
        log::info!("crafted {} on {}", name, src.id());
    }
    Ok(())
}

fn load_ae(layout: &Layout, src: &Source, attack: &str, eval: &Dataset) -> Result<AeCache, CliError> {
    let path = layout.ae_cache(src, attack);
    let bytes = read_prerequisite(&path, &format!("adversarial cache for `{attack}` on `{}` (run attack)", src.id()))?;
    let cache = AeCache::from_bytes(&bytes).map_err(|e| CliError::Mismatch(format!("{}: {e}", path.display())))?;
    if cache.meta.labels != eval.labels || cache.meta.dataset != eval.id {
        return Err(CliError::Mismatch(format!(
            "{} was crafted on `{}`, evaluation set is `{}`",
            path.display(),
            cache.meta.dataset,
            eval.id
        )));
    }
    Ok(cache)
}

fn write_transfer(layout: &Layout, stem: &str, reports: &[TransferReport]) -> Result<(), CliError> {
    let dir = layout.reports();
    write_file(&dir.join(format!("{stem}.csv")), transfer_csv(reports)?.as_bytes())?;
    write_file(&dir.join(format!("{stem}_predictions.csv")), predictions_csv(reports)?.as_bytes())?;
    Ok(())
}

/// Run the transfer protocols (clean, single, ensemble, rotate1) on cached
/// adversarial images. `transform` replaces each protocol's transform list.
pub fn eval(cfg: &RunConfig, transform: Option<TransformSpec>) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let (_, test) = load_split(cfg, &layout)?;
    let eval = eval_set(cfg, &test);
    for (i, p) in cfg.protocols.iter().enumerate() {
        let transforms: Vec<TransformSpec> = match (p, transform) {
            (Protocol::Rotate1 { .. }, _) => vec![TransformSpec::Rotate(1.0), TransformSpec::Rotate(359.0)],
            (Protocol::Clean { .. } | Protocol::Single { .. } | Protocol::Ensemble { .. }, Some(t)) => vec![t],
            (Protocol::Clean { transforms } | Protocol::Single { transforms, .. } | Protocol::Ensemble { transforms, .. }, None) => {
                transforms.clone()
            }
            _ => continue,
        };
        let bb_names = p.black_boxes(cfg);
        let bbs: Vec<ModelGraph> = bb_names.iter().map(|m| load_model(cfg, &layout, m, &eval)).collect::<Result<_, _>>()?;
        let bb_refs: Vec<&ModelGraph> = bbs.iter().collect();
        let mut reports = Vec::new();
        let stem = match p.source() {
            None => {
                for t in &transforms {
                    reports.push(evaluate_images(
                        Vec::new(),
                        "clean",
                        &test.images,
                        &test.labels,
                        &test.id,
                        cfg.seed,
                        &bb_refs,
                        *t,
                    )?);
                }
                format!("p{i}_clean")
            }
            Some(src) => {
                for a in p.attack_names(cfg) {
                    let cache = load_ae(&layout, &src, &a, &eval)?;
                    for t in &transforms {
                        reports.push(evaluate_images(
                            src.members(),
                            &a,
                            &cache.images,
                            &eval.labels,
                            &eval.id,
                            cache.meta.config.seed,
                            &bb_refs,
                            *t,
                        )?);
                    }
                }
                format!("p{i}_{}_{}", p.kind(), src.id())
            }
        };
        write_transfer(&layout, &stem, &reports)?;
    }
    Ok(())
}

/// Rotation sweeps over cached adversarial images.
pub fn sweep(cfg: &RunConfig, stride: Option<u32>) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let (_, test) = load_split(cfg, &layout)?;
    let eval = eval_set(cfg, &test);
    for (i, p) in cfg.protocols.iter().enumerate() {
        let Protocol::Sweep { attack, stride: own, .. } = p else {
            continue;
        };
        let angles = sweep_angles(stride.unwrap_or(*own)).map_err(|e| CliError::Config {
            pointer: format!("/protocols/{i}/stride"),
            message: e.to_string(),
        })?;
        let src = p.source().expect("sweep has a white box");
        let cache = load_ae(&layout, &src, attack, &eval)?;
        let bbs: Vec<ModelGraph> = p
            .black_boxes(cfg)
            .iter()
            .map(|m| load_model(cfg, &layout, m, &eval))
            .collect::<Result<_, _>>()?;
        let refs: Vec<&ModelGraph> = bbs.iter().collect();
        let curves = sweep_cached(&cache.images, &eval.labels, &refs, &angles)?;
        let stem = format!("p{i}_sweep_{}_{attack}", src.id());
        for c in &curves {
            write_file(&layout.reports().join(format!("{stem}_{}.csv", c.black_box)), sweep_csv(c)?.as_bytes())?;
        }
        let title = format!("{attack} crafted on {}", src.id());
        write_file(&layout.reports().join(format!("{stem}.svg")), sweep_svg(&title, &curves).as_bytes())?;
    }
    Ok(())
}

/// Feature-map differences between a non-fooling adversarial image and its
/// fooling one-degree twin.
pub fn featdiff(cfg: &RunConfig, layer: Option<&str>, k: Option<usize>) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let (_, test) = load_split(cfg, &layout)?;
    let eval = eval_set(cfg, &test);
    for (i, p) in cfg.protocols.iter().enumerate() {
        let Protocol::Featdiff {
            black_box,
            attack,
            layer: own_layer,
            k: own_k,
            ..
        } = p
        else {
            continue;
        };
        let layer = layer.unwrap_or(own_layer);
        let src = p.source().expect("featdiff has a white box");
        let cache = load_ae(&layout, &src, attack, &eval)?;
        let bb = load_model(cfg, &layout, black_box, &eval)?;
        let Some((idx, angle)) = find_feature_pair(&bb, &cache.images, &eval.labels, &[1.0, 359.0])? else {
            log::warn!("protocol {i}: no adversarial image flips on `{black_box}` under a one-degree rotation; skipped");
            continue;
        };
        let x_fail = cache.images.select(&[idx]);
        let x_success = rotate(&x_fail, angle);
        let rep = feature_diff(&bb, &x_fail, &x_success, layer, k.unwrap_or(*own_k)).map_err(|e| match e {
            BenchError::UnknownLayer { .. } | BenchError::NotAFeatureMap(_) => CliError::Config {
                pointer: format!("/protocols/{i}/layer"),
                message: e.to_string(),
            },
            other => other.into(),
        })?;
        let stem = format!("p{i}_featdiff_{}_{attack}_{black_box}_{layer}", src.id());
        write_file(&layout.reports().join(format!("{stem}.png")), &png_bytes(&featdiff_grid(&rep))?)?;
        write_file(&layout.reports().join(format!("{stem}.csv")), featdiff_csv(&rep)?.as_bytes())?;
        log::info!("protocol {i}: image {idx}, rotation {angle}");
    }
    Ok(())
}

fn table_ratios(text: &str) -> Result<Option<crate::bench::RatioStats>, CliError> {
    let rows = parse_transfer_csv(text)?;
    Ok(ratio_stats_of(rows.iter().flat_map(|r| &r.cells).map(|c| (c.transformed, c.baseline))))
}

/// Collate every report artifact into `out` and add a ratio summary over
/// the transfer tables.
pub fn report(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let layout = Layout::new(&cfg.output_dir);
    let dir = layout.reports();
    let entries = std::fs::read_dir(&dir).map_err(|_| CliError::Missing {
        what: "reports directory (run eval, sweep or featdiff)".into(),
        path: dir.clone(),
    })?;
    let mut files: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.file_name().is_some_and(|n| !n.to_string_lossy().starts_with('.')))
        .collect();
    files.sort();
    let mut ratios = Vec::new();
    let mut index = String::from("# Reports\n\n");
    for f in &files {
        let name = f.file_name().expect("file").to_string_lossy().into_owned();
        let bytes = std::fs::read(f).map_err(|source| CliError::Io { path: f.clone(), source })?;
        let is_transfer = name.ends_with(".csv")
            && !name.ends_with("_predictions.csv")
            && ["_clean", "_single_", "_ensemble_", "_rotate1_"].iter().any(|k| name.contains(k));
        if is_transfer {
            let text = String::from_utf8_lossy(&bytes);
            ratios.push((name.trim_end_matches(".csv").to_string(), table_ratios(&text)?));
        }
        index.push_str(&format!("- {name}\n"));
        write_file(&out.join(&name), &bytes)?;
    }
    write_file(&out.join("ratio_summary.csv"), ratio_csv(&ratios)?.as_bytes())?;
    index.push_str("- ratio_summary.csv\n");
    write_file(&out.join("index.md"), index.as_bytes())?;
    Ok(())
}

/// Every stage in order, ending with `report` into `<output_dir>/summary`.
pub fn pipeline(cfg: &RunConfig) -> Result<(), CliError> {
    gen_data(cfg)?;
    train(cfg, None)?;
    attack(cfg, None, None, None)?;
    eval(cfg, None)?;
    sweep(cfg, None)?;
    featdiff(cfg, None, None)?;
    report(cfg, &cfg.output_dir.join("summary"))
}
