//! Subcommands of the `crater` tool. Each `cmd_*` function is a thin layer
//! over `crater_core` that reads its inputs from disk and writes its
//! artifacts under the output directory.

pub mod config;
pub mod overlay;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use crater_core::grid::Grid;
use crater_core::mix_seed;
use crater_core::net::{finetune, init, load_weights_for, save_weights, train, TrainConfig, TrainReport, Weights};
use crater_core::pipeline::{evaluate_model, predict_probs, TransferRow};
use crater_core::post::{detect, evaluate_tiles, load_detections, save_detections, Detection, MatchReport};
use crater_core::synth::{generate_dataset, load_split, Tile};
use crater_core::{catalog, Error};

pub use config::RunConfig;

/// Process exit status for an error: 1 for invalid input or configuration,
/// 2 for file-system and file-format failures, 3 for a diverged training run.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::NumericalAbort { .. } => 3,
                Error::Io { .. } | Error::Image { .. } | Error::CorruptHeader(_) | Error::Truncated { .. } => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    1
}

/// Seeds of the independent random streams of a run.
#[derive(Clone, Copy)]
enum Stream {
    DomainA = 0,
    DomainB = 1,
    Init = 2,
    Train = 3,
    Finetune = 4,
}

fn seed_for(cfg: &RunConfig, s: Stream) -> u64 {
    mix_seed(cfg.seed, &[s as u64])
}

fn domain_dir(cfg: &RunConfig, domain: &str) -> PathBuf {
    cfg.data_root().join(domain)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Refuses to replace an existing checkpoint unless `force` is set.
fn save_checkpoint(w: &Weights, path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Validation(format!(
            "checkpoint {} exists; pass --force to overwrite",
            path.display()
        ))
        .into());
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_weights(w, path)?;
    Ok(())
}

/// Writes domain A to `<data>/a` and domain B to `<data>/b`. Domain B gets
/// as many training tiles as the largest fine-tuning set.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let size = cfg.net.input_size;
    let a = domain_dir(cfg, "a");
    generate_dataset(&cfg.domain_a, cfg.n_train, cfg.n_val, cfg.n_test, size, seed_for(cfg, Stream::DomainA), Some(&a))
        .context("synthesizing domain a")?;
    let b = domain_dir(cfg, "b");
    let n_b = *cfg.finetune_sizes.last().expect("validated non-empty");
    generate_dataset(&cfg.domain_b, n_b, cfg.n_val, cfg.test_size, size, seed_for(cfg, Stream::DomainB), Some(&b))
        .context("synthesizing domain b")?;
    write_file(&cfg.out_dir.join("run.cfg"), &cfg.to_text())
}

fn load(cfg: &RunConfig, domain: &str, split: &str) -> Result<Vec<Tile>> {
    let tiles = load_split(&domain_dir(cfg, domain), split)
        .with_context(|| format!("loading domain {domain} {split} split; run `crater synth` first"))?;
    if tiles.is_empty() {
        bail!("domain {domain} {split} split is empty");
    }
    Ok(tiles)
}

fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    write_file(path, &report.to_csv())
}

/// Pretrains on domain A and writes the checkpoint plus `train_report.csv`.
pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<TrainReport> {
    cfg.validate()?;
    let ckpt = cfg.checkpoint();
    if ckpt.exists() && !force {
        bail!(Error::Validation(format!(
            "checkpoint {} exists; pass --force to overwrite",
            ckpt.display()
        )));
    }
    let train_set = load(cfg, "a", "train")?;
    let val_set = load(cfg, "a", "val")?;
    let w0 = init(&cfg.net, seed_for(cfg, Stream::Init))?;
    let tc = TrainConfig {
        seed: seed_for(cfg, Stream::Train),
        ..cfg.train
    };
    let (w, report) = train(&w0, &cfg.net, &train_set, &val_set, &tc)?;
    create_dir(&cfg.out_dir)?;
    save_checkpoint(&w, &ckpt, force)?;
    write_report(&cfg.out_dir.join("train_report.csv"), &report)?;
    Ok(report)
}

fn load_pretrained(cfg: &RunConfig) -> Result<Weights> {
    let ckpt = cfg.checkpoint();
    load_weights_for(&ckpt, &cfg.net).with_context(|| format!("loading checkpoint {}", ckpt.display()))
}

fn finetune_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        seed: seed_for(cfg, Stream::Finetune),
        ..cfg.train
    }
}

/// Fine-tunes the pretrained checkpoint on the first `n` domain-B training
/// tiles and writes `finetune_<n>.unetw` and `finetune_<n>_report.csv`.
pub fn cmd_finetune(cfg: &RunConfig, n: Option<usize>, force: bool) -> Result<PathBuf> {
    cfg.validate()?;
    let w0 = load_pretrained(cfg)?;
    let pool = load(cfg, "b", "train")?;
    let n = n.unwrap_or(pool.len());
    if n == 0 || n > pool.len() {
        bail!(Error::Validation(format!(
            "cannot fine-tune on {n} tiles; {} available",
            pool.len()
        )));
    }
    let val = load(cfg, "b", "val")?;
    let (w, report) = finetune(&w0, &cfg.net, &pool[..n], &val, cfg.finetune_epochs, &finetune_config(cfg))?;
    let path = cfg.out_dir.join(format!("finetune_{n}.unetw"));
    save_checkpoint(&w, &path, force)?;
    write_report(&cfg.out_dir.join(format!("finetune_{n}_report.csv")), &report)?;
    Ok(path)
}

/// Tile images in `dir` (every `*.png` except `*_mask.png` and files this
/// tool writes), sorted by id.
pub fn read_tile_images(dir: &Path) -> Result<Vec<(String, Grid)>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".png").map(str::to_string))
        .filter(|n| !n.ends_with("_mask") && !n.ends_with("_overlay") && !n.ends_with("_prob"))
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let g = Grid::load_png(&dir.join(format!("{id}.png")))?;
            Ok((id, g))
        })
        .collect()
}

/// Probability maps saved as `<id>_prob.png` in `dir`.
pub fn read_prob_maps(dir: &Path) -> Result<Vec<(String, Grid)>> {
    let mut ids: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix("_prob.png").map(str::to_string))
        .collect();
    ids.sort();
    ids.into_iter()
        .map(|id| {
            let g = Grid::load_png(&dir.join(format!("{id}_prob.png")))?;
            Ok((id, g))
        })
        .collect()
}

/// Runs detection over `<id>_prob.png` maps and writes `detections.csv`.
pub fn cmd_post(cfg: &RunConfig, pred_dir: &Path) -> Result<Vec<(String, Vec<Detection>)>> {
    cfg.post.validate()?;
    let maps = read_prob_maps(pred_dir)?;
    if maps.is_empty() {
        bail!(Error::Validation(format!(
            "no *_prob.png maps in {}",
            pred_dir.display()
        )));
    }
    let dets: Vec<(String, Vec<Detection>)> = maps
        .into_iter()
        .map(|(id, p)| {
            let d = detect(&p, &cfg.post);
            (id, d)
        })
        .collect();
    save_detections(
        dets.iter().map(|(id, d)| (id.as_str(), d.as_slice())),
        &pred_dir.join("detections.csv"),
    )?;
    Ok(dets)
}

/// Writes, per input tile, `<id>_prob.png` (8-bit probabilities) into
/// `out`, then `detections.csv`, then `<id>_overlay.png` drawn from that CSV.
pub fn cmd_predict(cfg: &RunConfig, checkpoint: &Path, tiles_dir: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let w = load_weights_for(checkpoint, &cfg.net)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let tiles = read_tile_images(tiles_dir)?;
    if tiles.is_empty() {
        bail!(Error::Validation(format!("no tile images in {}", tiles_dir.display())));
    }
    create_dir(out)?;
    for (id, img) in &tiles {
        let prob = predict_probs(&w, &cfg.net, std::slice::from_ref(img))?.remove(0);
        prob.save_png(&out.join(format!("{id}_prob.png")))?;
    }
    cmd_post(cfg, out)?;
    let rows = load_detections(&out.join("detections.csv"))?;
    for (id, img) in &tiles {
        let mine: Vec<Detection> = rows.iter().filter(|(t, _)| t == id).map(|(_, d)| *d).collect();
        overlay::draw(img, &mine).save(out.join(format!("{id}_overlay.png"))).map_err(|e| Error::Image {
            path: out.join(format!("{id}_overlay.png")),
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

/// Scores `<id>_prob.png` maps in `pred_dir` against a truth CSV and writes
/// `metrics.txt` and `metrics.csv` into `out`. Predicted tiles absent from
/// the truth file are taken to be crater-free.
pub fn cmd_eval(cfg: &RunConfig, pred_dir: &Path, truth_csv: &Path, out: &Path) -> Result<MatchReport> {
    cfg.post.validate()?;
    let maps = read_prob_maps(pred_dir)?;
    let mut truth = catalog::load_truth(truth_csv)?;
    if maps.is_empty() {
        bail!(Error::Validation(format!("no *_prob.png maps in {}", pred_dir.display())));
    }
    // The truth file has no rows for crater-free tiles, so only a truth tile
    // without a prediction is an inconsistency.
    let missing: Vec<&String> = truth.keys().filter(|id| !maps.iter().any(|(m, _)| m == *id)).collect();
    if !missing.is_empty() {
        bail!(Error::Validation(format!(
            "{} truth tiles have no prediction in {} (first: {})",
            missing.len(),
            pred_dir.display(),
            missing[0]
        )));
    }
    let truths: Vec<_> = maps.iter().map(|(id, _)| truth.remove(id).unwrap_or_default()).collect();
    let probs: Vec<Grid> = maps.into_iter().map(|(_, g)| g).collect();
    let report = evaluate_tiles(&probs, &truths, &cfg.post)?;
    create_dir(out)?;
    write_file(&out.join("metrics.txt"), &report.to_key_values())?;
    write_file(
        &out.join("metrics.csv"),
        &format!("{}\n{}\n", MatchReport::CSV_HEADER, report.to_csv_row()),
    )?;
    Ok(report)
}

/// For every fine-tuning size, reloads the pretrained checkpoint, fine-tunes
/// on that many domain-B tiles and scores it on the domain-B test split.
/// Writes `tl_table.csv`.
pub fn cmd_tl_experiment(cfg: &RunConfig) -> Result<Vec<TransferRow>> {
    cfg.validate()?;
    let ckpt = cfg.checkpoint();
    if !ckpt.exists() {
        bail!(Error::Io {
            path: ckpt.clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "pretrain checkpoint not found"),
        });
    }
    let pool = load(cfg, "b", "train")?;
    let test = load(cfg, "b", "test")?;
    if test.len() < cfg.test_size {
        bail!(Error::Validation(format!(
            "need {} domain b test tiles, found {}",
            cfg.test_size,
            test.len()
        )));
    }
    let test = &test[..cfg.test_size];
    let tc = finetune_config(cfg);
    let mut rows = Vec::new();
    let mut table = format!("{}\n", TransferRow::CSV_HEADER);
    for &n in &cfg.finetune_sizes {
        if n > pool.len() {
            bail!(Error::Validation(format!(
                "fine-tune size {n} exceeds the {} domain b training tiles",
                pool.len()
            )));
        }
        let w0 = load_pretrained(cfg)?;
        let (w, _) = finetune(&w0, &cfg.net, &pool[..n], &[], cfg.finetune_epochs, &tc)?;
        let row = TransferRow {
            n,
            eval: evaluate_model(&w, &cfg.net, test, &cfg.post)?,
        };
        table += &row.to_csv_row();
        table.push('\n');
        rows.push(row);
    }
    create_dir(&cfg.out_dir)?;
    write_file(&cfg.out_dir.join("tl_table.csv"), &table)?;
    Ok(rows)
}
