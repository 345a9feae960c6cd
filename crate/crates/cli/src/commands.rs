use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use specvae::augment::{
    augment_eval, augment_power_bins, class_index, inr_histogram, latent_traversal, traversal_sensitivity, AugmentEvalConfig,
    InterpolationSpec, LatentModel, TrainedBackbone,
};
use specvae::classifier::{
    evaluate, hyperparameter_sweep, train_baseline_cnn, CodeSet, DenseClassifierConfig, LatentPipeline, SweepCell,
};
use specvae::codec::{compress, write_stream};
use specvae::cvae_gan::CvaeGanModel;
use specvae::dataset::{read_dataset, select, stratified_split, write_dataset};
use specvae::report::{
    bar_chart_svg, confusion_csv, confusion_svg, inr_histogram_svg, loss_curves_svg, spectrogram_strip_svg, write_json, write_text,
};
use specvae::{make_dataset, DatasetConfig, Error, Exec, InterferenceClass, Result, Sample, Spectrogram, VaeModel};

use crate::config::{AugmentConfig, BenchConfig, CompressConfig, HistogramConfig, SynthConfig, TraverseConfig, TrainCmdConfig};

const EXEC: Exec = Exec::Parallel;

/// Outcome of a command that ran to completion.
pub enum Status {
    Ok,
    /// Some cells failed; their results are recorded.
    Partial(String),
}

fn load_samples(data: Option<&Path>, dataset: &DatasetConfig) -> Result<Vec<Sample>> {
    match data {
        Some(dir) => read_dataset(dir),
        None => make_dataset(dataset, EXEC),
    }
}

fn spectrograms(samples: &[Sample]) -> Vec<&Spectrogram> {
    samples.iter().map(|s| &s.spectrogram).collect()
}

fn class_labels(samples: &[Sample]) -> Vec<usize> {
    samples.iter().map(|s| class_index(s.record.class)).collect()
}

fn require<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("missing `{what}` (flag or config key)")))
}

/// Reads either checkpoint kind.
pub fn load_backbone(path: &Path) -> Result<TrainedBackbone> {
    let bytes = fs::read(path)?;
    match VaeModel::from_checkpoint(&bytes) {
        Ok(m) => Ok(TrainedBackbone::Vae(m)),
        Err(Error::Config(_)) => Ok(TrainedBackbone::CvaeGan(CvaeGanModel::from_checkpoint(&bytes)?)),
        Err(e) => Err(e),
    }
}

pub fn synth(cfg: &SynthConfig, out: &Path) -> Result<Status> {
    let samples = make_dataset(&cfg.dataset, EXEC)?;
    write_dataset(out, &samples)?;
    Ok(Status::Ok)
}

pub fn train(cfg: &TrainCmdConfig, out: &Path) -> Result<Status> {
    if cfg.latent_dim == 0 {
        return Err(Error::Range { field: "latent_dim", msg: "must be at least 1".into() });
    }
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let dims = samples.first().ok_or(Error::Empty("training set"))?.spectrogram.dims();
    let t = Instant::now();
    let result = TrainedBackbone::train(cfg.model, &refs, dims, cfg.latent_dim, &cfg.vae, &cfg.cvae_gan);
    let (model, trace) = match result {
        Ok(r) => r,
        Err(Error::Diverged { epoch, term, trace }) => {
            trace.write_csv(&out.join("loss.csv"))?;
            return Err(Error::Diverged { epoch, term, trace });
        }
        Err(e) => return Err(e),
    };
    let ckpt = model.to_checkpoint()?;
    fs::write(out.join("model.ckpt"), &ckpt)?;
    trace.write_csv(&out.join("loss.csv"))?;
    let columns: Vec<&str> = ["recon", "kl", "tc", "gan", "fm"].into_iter().filter(|c| trace.column(c).is_some()).collect();
    loss_curves_svg(&out.join("loss.svg"), &trace, &columns, "training loss")?;
    let last = trace.rows.last().cloned().unwrap_or_default();
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "model_id": format!("{:016x}", specvae::checkpoint::model_id(&ckpt)),
            "n_samples": samples.len(),
            "epochs": trace.len(),
            "final": trace.columns.iter().zip(last).collect::<std::collections::BTreeMap<_, _>>(),
            "train_time_s": t.elapsed().as_secs_f64(),
        }),
    )?;
    Ok(Status::Ok)
}

pub fn compress_cmd(cfg: &CompressConfig, out: &Path) -> Result<Status> {
    let model = match load_backbone(require(&cfg.model, "model")?)? {
        TrainedBackbone::Vae(m) => m,
        TrainedBackbone::CvaeGan(_) => return Err(Error::Config("compression needs an unconditional (factorvae/vae) checkpoint".into())),
    };
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let codes = compress(&model, &spectrograms(&samples), cfg.mode, cfg.noise_seed, EXEC)?;
    let stream = write_stream(&codes);
    fs::write(out.join("codes.latc"), &stream)?;
    let rate = codes.first().map(|c| c.compression_rate()).transpose()?;
    write_json(
        &out.join("compress_summary.json"),
        &json!({
            "n_codes": codes.len(),
            "mode": cfg.mode,
            "latent_dim": model.latent_dim(),
            "payload_len": cfg.mode.payload_len(model.latent_dim()),
            "compression_rate": rate,
            "stream_bytes": stream.len(),
            "model_id": format!("{:016x}", model.model_id()?),
        }),
    )?;
    Ok(Status::Ok)
}

pub fn augment(cfg: &AugmentConfig, out: &Path) -> Result<Status> {
    let model = load_backbone(require(&cfg.model, "model")?)?;
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let spec = InterpolationSpec {
        skip_pattern: cfg.skip_pattern,
        pairs: cfg.pairs,
        seed: cfg.seed,
        ..InterpolationSpec::power(cfg.lo, cfg.hi, cfg.n_steps)
    };
    let augmented = augment_power_bins(&model, &samples, &spec, EXEC)?;
    write_dataset(&out.join("augmented"), &augmented)?;
    let per_pair = spec.alphas().len();
    let strip: Vec<Spectrogram> = augmented.iter().take(per_pair).map(|s| s.spectrogram.clone()).collect();
    let captions: Vec<String> = augmented.iter().take(per_pair).map(|s| format!("{:.1} dB", s.record.power_db)).collect();
    spectrogram_strip_svg(&out.join("interpolation.svg"), &strip, &captions)?;
    Ok(Status::Ok)
}

#[derive(Serialize)]
struct Timing {
    accuracy: f64,
    train_time_s: f64,
    infer_time_us_per_sample: f64,
}

pub fn bench(cfg: &BenchConfig, out: &Path) -> Result<Status> {
    let mut grid = Vec::new();
    for &latent_dim in &cfg.latent_dims {
        for &mode in &cfg.modes {
            for &n_layers in &cfg.n_layers {
                for &hidden_width in &cfg.hidden_widths {
                    for &use_relu in &cfg.relu {
                        for &use_batchnorm in &cfg.batchnorm {
                            grid.push(SweepCell { latent_dim, mode, n_layers, hidden_width, use_relu, use_batchnorm });
                        }
                    }
                }
            }
        }
    }
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let (tr, te) = stratified_split(&samples, cfg.test_fraction, cfg.seed);
    let (train, test) = (select(&samples, &tr), select(&samples, &te));
    let (xtr, xte) = (spectrograms(&train), spectrograms(&test));
    let (ytr, yte) = (class_labels(&train), class_labels(&test));
    let n_classes = InterferenceClass::ALL.len();
    let dims = samples.first().ok_or(Error::Empty("dataset"))?.spectrogram.dims();

    let t = Instant::now();
    let cnn = train_baseline_cnn(&xtr, &ytr, n_classes, &cfg.cnn)?.model;
    let cnn_train = t.elapsed().as_secs_f64();
    let cnn_eval = evaluate(&cnn, &xte, &yte, n_classes, cfg.timing_reps)?;

    let mut encoders: Vec<(usize, VaeModel, f64)> = Vec::new();
    let report = hyperparameter_sweep(
        &grid,
        cfg.repetitions,
        &cfg.dense,
        |d| {
            let t = Instant::now();
            let arch = specvae::VaeArch { dims, ..specvae::VaeArch::desk(d) };
            let vae = specvae::vae::train_factorvae::<f32>(&xtr, &arch, &cfg.vae)?.model;
            let codes = CodeSet {
                train: vae.encode(&xtr, EXEC)?,
                train_labels: ytr.clone(),
                test: vae.encode(&xte, EXEC)?,
                test_labels: yte.clone(),
                n_classes,
                source_dims: dims,
                model_id: vae.model_id()?,
            };
            encoders.push((d, vae, t.elapsed().as_secs_f64()));
            Ok(codes)
        },
        EXEC,
    )?;
    write_json(&out.join("sweep.json"), &report)?;
    write_text(&out.join("sweep.csv"), &report.to_csv())?;
    let labels: Vec<String> = report
        .cells
        .iter()
        .map(|c| format!("d{} {:?} L{}", c.cell.latent_dim, c.cell.mode, c.cell.n_layers).to_lowercase())
        .collect();
    let acc: Vec<f64> = report.cells.iter().map(|c| 100.0 * c.mean_accuracy).collect();
    let rate: Vec<f64> = report.cells.iter().map(|c| c.compression_rate).collect();
    bar_chart_svg(&out.join("sweep_accuracy.svg"), &labels, &acc, "mean test accuracy per cell", "accuracy (%)")?;
    bar_chart_svg(&out.join("compression_rate.svg"), &labels, &rate, "compression rate per cell", "raw / payload")?;

    let mut timing = serde_json::Map::new();
    timing.insert(
        "baseline_cnn".into(),
        serde_json::to_value(Timing {
            accuracy: cnn_eval.accuracy,
            train_time_s: cnn_train,
            infer_time_us_per_sample: cnn_eval.infer_time_us_per_sample,
        })?,
    );
    if let Some(best) = report.best() {
        if let Some((_, vae, vae_time)) = encoders.iter().find(|e| e.0 == best.cell.latent_dim) {
            let cell = &best.cell;
            let dense_cfg = DenseClassifierConfig {
                n_layers: cell.n_layers,
                hidden_width: cell.hidden_width,
                use_relu: cell.use_relu,
                use_batchnorm: cell.use_batchnorm,
                ..cfg.dense.clone()
            };
            let ctr = compress(vae, &xtr, cell.mode, cfg.seed, EXEC)?;
            let cte = compress(vae, &xte, cell.mode, cfg.seed.wrapping_add(1), EXEC)?;
            let t = Instant::now();
            let dense = specvae::classifier::train_dense(&ctr, &ytr, n_classes, &dense_cfg)?.model;
            let dense_train = t.elapsed().as_secs_f64();
            let refs: Vec<_> = cte.iter().collect();
            let dense_eval = evaluate(&dense, &refs, &yte, n_classes, cfg.timing_reps)?;
            let pipeline = LatentPipeline { vae, dense: &dense, mode: cell.mode };
            let pipe_eval = evaluate(&pipeline, &xte, &yte, n_classes, cfg.timing_reps)?;
            timing.insert("best_cell".into(), serde_json::to_value(cell)?);
            timing.insert("encoder_train_time_s".into(), json!(vae_time));
            timing.insert(
                "dense_only".into(),
                serde_json::to_value(Timing {
                    accuracy: dense_eval.accuracy,
                    train_time_s: dense_train,
                    infer_time_us_per_sample: dense_eval.infer_time_us_per_sample,
                })?,
            );
            timing.insert(
                "encoder_plus_dense".into(),
                serde_json::to_value(Timing {
                    accuracy: pipe_eval.accuracy,
                    train_time_s: dense_train + vae_time,
                    infer_time_us_per_sample: pipe_eval.infer_time_us_per_sample,
                })?,
            );
            bar_chart_svg(
                &out.join("inference_latency.svg"),
                &["cnn".into(), "dense".into(), "encoder+dense".into()],
                &[cnn_eval.infer_time_us_per_sample, dense_eval.infer_time_us_per_sample, pipe_eval.infer_time_us_per_sample],
                "inference latency",
                "us per sample",
            )?;
        }
    }
    write_json(&out.join("timing.json"), &timing)?;
    match report.failed() {
        0 => Ok(Status::Ok),
        n => Ok(Status::Partial(format!("{n} of {} sweep cells failed", report.cells.len()))),
    }
}

pub fn augment_eval_cmd(cfg: &AugmentEvalConfig, out: &Path) -> Result<Status> {
    let o = augment_eval(cfg, EXEC)?;
    let r = &o.report;
    write_json(&out.join("augment_eval.json"), r)?;
    let names: Vec<String> = r.eval_bins.iter().map(|b| format!("{b} dB")).collect();
    for (tag, rep) in [("without", &r.without), ("with", &r.with)] {
        write_text(&out.join(format!("confusion_{tag}.csv")), &confusion_csv(&rep.confusion, &names)?)?;
        confusion_svg(&out.join(format!("confusion_{tag}.svg")), &rep.confusion, &names, &format!("{tag} interpolation"))?;
    }
    bar_chart_svg(
        &out.join("heldout_accuracy.svg"),
        &["without".into(), "with".into()],
        &[100.0 * r.heldout_accuracy_without.unwrap_or(0.0), 100.0 * r.heldout_accuracy_with.unwrap_or(0.0)],
        "held-out bin accuracy",
        "accuracy (%)",
    )?;
    fs::write(out.join("backbone.ckpt"), o.backbone.to_checkpoint()?)?;
    Ok(Status::Ok)
}

pub fn traverse(cfg: &TraverseConfig, out: &Path) -> Result<Status> {
    let model = load_backbone(require(&cfg.model, "model")?)?;
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let s = samples.get(cfg.index).ok_or_else(|| Error::Range {
        field: "index",
        msg: format!("{} >= {} samples", cfg.index, samples.len()),
    })?;
    if cfg.steps < 2 || !(cfg.lo < cfg.hi) {
        return Err(Error::Range { field: "steps/lo/hi", msg: "need steps >= 2 and lo < hi".into() });
    }
    let values: Vec<f64> = (0..cfg.steps).map(|k| cfg.lo + (cfg.hi - cfg.lo) * k as f64 / (cfg.steps - 1) as f64).collect();
    let captions: Vec<String> = values.iter().map(|v| format!("{v:+.2}")).collect();
    let dims: Vec<usize> = match cfg.dim {
        Some(d) => vec![d],
        None => (0..model.latent_dim()).collect(),
    };
    for &d in &dims {
        let strip = latent_traversal(&model, &s.spectrogram, s.record.class, d, &values, EXEC)?;
        spectrogram_strip_svg(&out.join(format!("traverse_dim{d:03}.svg")), &strip, &captions)?;
    }
    let n = cfg.sensitivity_samples.clamp(1, samples.len());
    let xs = spectrograms(&samples[..n]);
    let classes: Vec<InterferenceClass> = samples[..n].iter().map(|s| s.record.class).collect();
    let sens = traversal_sensitivity(&model, &xs, &classes, cfg.lo, cfg.hi, EXEC)?;
    write_json(&out.join("sensitivity.json"), &json!({ "lo": cfg.lo, "hi": cfg.hi, "n_inputs": n, "sensitivity": sens }))?;
    let mut csv = String::from("dim,sensitivity\n");
    for (d, v) in sens.iter().enumerate() {
        csv.push_str(&format!("{d},{v}\n"));
    }
    write_text(&out.join("sensitivity.csv"), &csv)?;
    let labels: Vec<String> = (0..sens.len()).map(|d| d.to_string()).collect();
    bar_chart_svg(&out.join("sensitivity.svg"), &labels, &sens, "interference energy change per coordinate", "relative change")?;
    Ok(Status::Ok)
}

pub fn histogram(cfg: &HistogramConfig, out: &Path) -> Result<Status> {
    let samples = load_samples(cfg.data.as_deref(), &cfg.dataset)?;
    let s = samples.get(cfg.index).ok_or_else(|| Error::Range {
        field: "index",
        msg: format!("{} >= {} samples", cfg.index, samples.len()),
    })?;
    let h = inr_histogram(&s.spectrogram);
    write_text(&out.join("inr.csv"), &h.to_csv())?;
    write_json(
        &out.join("inr.json"),
        &json!({
            "record": s.record,
            "threshold": h.threshold,
            "noise_mean": h.noise_mean,
            "interference_mean": h.interference_mean,
            "delta": h.delta,
            "single_population": h.single_population,
        }),
    )?;
    inr_histogram_svg(&out.join("inr.svg"), &h, &format!("{} at {} dB", s.record.class, s.record.power_db))?;
    Ok(Status::Ok)
}
