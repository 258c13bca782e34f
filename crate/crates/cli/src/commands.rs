use std::fs;
use std::path::{Path, PathBuf};

use htlane::eval::hard_prediction;
use htlane::losses::pool_to_table;
use htlane::model::{image_dims, predict as model_predict};
use htlane::pnm::{dequantize, Raster};
use htlane::synth::generate;
use htlane::trainer::{history_csv, train_with};
use htlane::{
    global_argmax, load_dataset, model, save_dataset, split_dataset, Checkpoint, Dataset, Error,
    HoughPreset, Metrics, Mode, Result, RunConfig, Tensor, VoteTable,
};

use crate::render::{hough_image, overlay, peak_normalized};
use crate::ConfigArgs;

/// `--cfg` file first, then each `--set`, in order.
fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.cfg {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    for item in &args.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn log_config(cfg: &RunConfig) {
    eprintln!("resolved configuration:");
    for line in cfg.to_text().lines() {
        eprintln!("  {line}");
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn gen(out: &Path, n: usize, seed: u64, args: &ConfigArgs) -> Result<String> {
    let cfg = resolve(args)?;
    cfg.validate()?;
    log_config(&cfg);
    if n == 0 {
        return Err(Error::Data("empty dataset: --n must be at least 1".into()));
    }
    let data = Dataset::new(generate(n, seed, &cfg.scene)?);
    save_dataset(out, &data)?;
    let lanes: usize = data
        .samples
        .iter()
        .map(|s| s.exist.iter().filter(|&&e| e).count())
        .sum();
    eprintln!("wrote {n} samples with {lanes} lanes to {}", out.display());
    Ok(format!("gen,{n},{lanes},{seed}"))
}

/// Metrics CSV written next to the checkpoint: `model.htln` → `model.csv`.
pub fn history_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("csv")
}

pub fn train(
    data: &Path,
    mode: Mode,
    labeled_frac: f64,
    out: &Path,
    seed: Option<u64>,
    args: &ConfigArgs,
) -> Result<String> {
    let mut cfg = resolve(args)?;
    cfg.train.mode = mode;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    log_config(&cfg);

    let mut dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::Data(format!("{} holds an empty dataset", data.display())));
    }
    let (labeled, unlabeled) = split_dataset(dataset.len(), labeled_frac, cfg.train.seed)?;
    for s in dataset.samples.iter_mut() {
        s.labeled = false;
    }
    for &i in &labeled {
        dataset.samples[i].labeled = true;
    }
    eprintln!(
        "split: {} labeled, {} unlabeled (fraction {labeled_frac})",
        labeled.len(),
        unlabeled.len()
    );

    eprintln!("{}", htlane::trainer::CSV_HEADER);
    let init = model::init_params(cfg.train.seed);
    let outcome = train_with(&dataset, &cfg.train, init, |rec| eprintln!("{}", rec.csv_row()))?;

    let ckpt = Checkpoint {
        config: cfg,
        params: outcome.params,
        epoch: outcome.epochs as u32,
        rng_state: outcome.rng_state,
    };
    ckpt.save(out)?;
    let csv_path = history_path(out);
    write_file(&csv_path, history_csv(&outcome.history).as_bytes())?;
    let last = outcome
        .history
        .last()
        .map(|r| r.losses.l_total)
        .unwrap_or(f64::NAN);
    let digest = ckpt.digest();
    eprintln!("checkpoint {} ({digest}), metrics {}", out.display(), csv_path.display());
    Ok(format!(
        "train,{mode},{},{},{},{},{last:.6},{digest}",
        cfg.train.seed,
        labeled.len(),
        unlabeled.len(),
        outcome.epochs
    ))
}

pub const EVAL_HEADER: &str = "samples,pixel_precision,pixel_recall,pixel_f1,lane_precision,lane_recall,lane_f1,exist_acc,lane_tp,lane_fp,lane_fn";

pub fn eval_row(m: &Metrics) -> String {
    format!(
        "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
        m.samples,
        m.pixel_precision,
        m.pixel_recall,
        m.pixel_f1,
        m.lane_precision,
        m.lane_recall,
        m.lane_f1,
        m.exist_acc,
        m.lane.tp,
        m.lane.fp,
        m.lane.fn_
    )
}

pub fn eval(ckpt_path: &Path, data: &Path, out: Option<&Path>) -> Result<String> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    log_config(&ckpt.config);
    let dataset = load_dataset(data)?;
    let metrics = htlane::evaluate(&ckpt.params, ckpt.config.train.hough, &dataset)?;
    let row = eval_row(&metrics);
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt_path.with_extension("eval.csv"));
    write_file(&path, format!("{EVAL_HEADER}\n{row}\n").as_bytes())?;
    eprintln!("{EVAL_HEADER}");
    Ok(row)
}

fn image_tensor(raster: &Raster) -> Result<Tensor<f32>> {
    Tensor::new(
        &[raster.height, raster.width],
        raster.data.iter().map(|&b| dequantize(b)).collect(),
    )
}

pub fn predict(ckpt_path: &Path, image: &Path, prefix: &Path) -> Result<String> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let table = VoteTable::new(ckpt.config.train.hough.config());
    let raster = Raster::read_gray(image)?;
    let [_, h, w] = image_dims(&table);
    if (raster.height, raster.width) != (h, w) {
        return Err(Error::Config(format!(
            "{} is {}x{} but the checkpoint expects {w}x{h} images",
            image.display(),
            raster.width,
            raster.height
        )));
    }
    let input = image_tensor(&raster)?.reshape(&[1, h, w])?;
    let out = model_predict(&ckpt.params, &input, &table)?;
    let (mask, exist) = hard_prediction(&out)?;

    let named = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    Raster::gray(w, h, mask.data().to_vec()).write(&named("_mask.pgm"))?;
    let (rgb, drawn) = overlay(&raster, &mask, &exist);
    rgb.write(&named("_overlay.ppm"))?;
    for c in 1..=exist.len() {
        let channel = out.seg_probs.outer(c).to_vec();
        let m = pool_to_table(Tensor::new(&[h, w], channel)?, &table)?;
        let hmap = table.ht_forward(&m)?;
        hough_image(&hmap).write(&named(&format!("_hough_{c}.pgm")))?;
    }
    let bits: String = exist.iter().map(|&e| if e { '1' } else { '0' }).collect();
    let probs: Vec<String> = out.exist_p.data().iter().map(|p| format!("{p:.4}")).collect();
    eprintln!("existence probabilities: {}", probs.join(" "));
    Ok(format!("predict,{drawn},{bits},{}", prefix.display()))
}

pub fn hough(image: &Path, preset: HoughPreset, out: &Path) -> Result<String> {
    let table = VoteTable::new(preset.config());
    let c = *table.config();
    let raster = Raster::read_gray(image)?;
    let img = image_tensor(&raster)?;
    let [_, h4, w4] = image_dims(&table);
    let m = if (raster.height, raster.width) == (c.height, c.width) {
        img
    } else if (raster.height, raster.width) == (h4, w4) {
        pool_to_table(img, &table)?
    } else {
        return Err(Error::Config(format!(
            "{} is {}x{}; the {preset} preset takes {}x{} or {w4}x{h4} images",
            image.display(),
            raster.width,
            raster.height,
            c.width,
            c.height
        )));
    };
    let hmap = table.ht_forward(&m)?;
    peak_normalized(&hmap).write(out)?;
    let best = global_argmax(&hmap)?;
    let peak = hmap.data()[best.theta_idx * c.n_rho + best.rho_idx];
    eprintln!("wrote {} ({} angles x {} offsets)", out.display(), c.n_theta, c.n_rho);
    Ok(format!("hough,{preset},{},{},{peak:.6}", best.theta_idx, best.rho_idx))
}
